"""Central finite-difference checks for every differentiable op and for the
whole model.

Relative error of one tensor is ``max|a - n| / max(max|a|, max|n|, 1e-6)``
where ``a`` is the tape gradient and ``n`` the central difference.  Op checks
probe every coordinate; the end-to-end check samples a few coordinates per
parameter tensor (always including the one with the largest gradient).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import RunConfig
from .fusion import ContrastiveConfig, classify, fuse_early, fuse_late, init_fusion, joint_loss, nt_xent
from .model import Batch, forward, init_model, loss
from .nn import encoder_layer, init_encoder_layer, multi_head_self_attention
from .rng import Rng
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    broadcast_to,
    concat,
    constant,
    cross_entropy_from_logits,
    dropout,
    embedding_lookup,
    gelu,
    l2_normalize_rows,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    parameter,
    pick,
    reshape,
    scale,
    slice_row,
    softmax,
    sum_,
    transpose,
)

EPS = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale_


def check(
    name: str,
    leaves: list[Tensor],
    f: Callable[[], Tensor],
    eps: float = EPS,
    coords_per_tensor: int | None = None,
    rng: Rng | None = None,
) -> CheckResult:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` must be deterministic; anything random inside it has to be re-seeded
    on every call.  With ``coords_per_tensor`` set, only that many coordinates
    of each leaf are probed.
    """
    for t in leaves:
        t.grad = None
    with Tape() as tape:
        out = f()
    backward(out, tape)
    worst, count = 0.0, 0
    for t in leaves:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        if coords_per_tensor is None or coords_per_tensor >= flat.size:
            idx = np.arange(flat.size)
        else:
            picked = {int(np.abs(analytic).argmax())}
            for i in rng.permutation(flat.size):
                if len(picked) >= coords_per_tensor:
                    break
                picked.add(i)
            idx = np.array(sorted(picked))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * eps)
        worst = max(worst, rel_err(analytic.reshape(-1)[idx], numeric))
        count += idx.size
    return CheckResult(name, worst, count)


def _project(out: Tensor, rng: Rng) -> Callable[[Tensor], Tensor]:
    # a fixed random projection turns any output into a scalar without
    # the symmetries a plain sum would hide (softmax rows sum to 1, ...)
    w = constant(rng.normal(out.shape))
    return lambda y: sum_(mul(y, w))


def _op_check(name: str, rng: Rng, leaves: list[Tensor], op: Callable[[], Tensor]) -> CheckResult:
    reduce = _project(op(), rng.spawn("projection"))
    return check(name, leaves, lambda: reduce(op()))


def _leaf(rng: Rng, shape, std: float = 1.0) -> Tensor:
    return parameter(rng.normal(shape, std))


def op_checks(seed: int = 0) -> list[Callable[[], CheckResult]]:
    """One deferred check per primitive and per composite block."""
    root = Rng(seed, "gradcheck")

    def c_add():
        r = root.spawn("add")
        a, b = _leaf(r, (3, 4)), _leaf(r, (4,))
        return _op_check("add (broadcast)", r, [a, b], lambda: add(a, b))

    def c_mul():
        r = root.spawn("mul")
        a, b = _leaf(r, (2, 3, 4)), _leaf(r, (3, 1))
        return _op_check("mul (broadcast)", r, [a, b], lambda: mul(a, b))

    def c_scale():
        r = root.spawn("scale")
        a = _leaf(r, (3, 3))
        return _op_check("scale", r, [a], lambda: scale(a, -1.7))

    def c_broadcast():
        r = root.spawn("broadcast")
        a = _leaf(r, (1, 4))
        return _op_check("broadcast_to", r, [a], lambda: broadcast_to(a, (3, 4)))

    def c_gelu():
        r = root.spawn("gelu")
        a = _leaf(r, (4, 5), 2.0)
        return _op_check("gelu", r, [a], lambda: gelu(a))

    def c_dropout():
        r = root.spawn("dropout")
        a = _leaf(r, (4, 6))
        return _op_check("dropout (fixed mask)", r, [a], lambda: dropout(a, 0.3, Rng(seed, "gradcheck/mask"), True))

    def c_matmul():
        r = root.spawn("matmul")
        a, b = _leaf(r, (2, 3, 4)), _leaf(r, (4, 5))
        return _op_check("matmul (batched)", r, [a, b], lambda: matmul(a, b))

    def c_transpose():
        r = root.spawn("transpose")
        a = _leaf(r, (2, 3, 4))
        return _op_check("transpose", r, [a], lambda: transpose(a, (2, 0, 1)))

    def c_reshape():
        r = root.spawn("reshape")
        a = _leaf(r, (2, 6))
        return _op_check("reshape", r, [a], lambda: reshape(a, (3, 2, 2)))

    def c_sum():
        r = root.spawn("sum")
        a = _leaf(r, (3, 4))
        return _op_check("sum (axis)", r, [a], lambda: sum_(a, axis=1, keepdims=True))

    def c_mean():
        r = root.spawn("mean")
        a = _leaf(r, (3, 4))
        return _op_check("mean (axis)", r, [a], lambda: mean(a, axis=0))

    def c_concat():
        r = root.spawn("concat")
        a, b = _leaf(r, (2, 3)), _leaf(r, (4, 3))
        return _op_check("concat", r, [a, b], lambda: concat([a, b], axis=0))

    def c_slice():
        r = root.spawn("slice")
        a = _leaf(r, (2, 3, 4))
        return _op_check("slice_row", r, [a], lambda: slice_row(a, 0, axis=1))

    def c_pick():
        r = root.spawn("pick")
        a = _leaf(r, (4, 5))
        idx = np.array([1, 0, 4, 1])
        return _op_check("pick", r, [a], lambda: pick(a, idx))

    def c_embedding():
        r = root.spawn("embedding")
        table = _leaf(r, (6, 3))
        ids = np.array([[1, 2, 2], [0, 5, 1]])
        return _op_check("embedding_lookup (repeated ids)", r, [table], lambda: embedding_lookup(table, ids))

    def c_softmax():
        r = root.spawn("softmax")
        a = _leaf(r, (3, 5))
        return _op_check("softmax", r, [a], lambda: softmax(a))

    def c_softmax_masked():
        r = root.spawn("softmax_masked")
        a = _leaf(r, (3, 5))
        mask = np.array([[1, 1, 0, 1, 0], [1, 0, 0, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        return _op_check("softmax (masked)", r, [a], lambda: softmax(a, mask))

    def c_log_softmax():
        r = root.spawn("log_softmax")
        a = _leaf(r, (4, 4))
        mask = ~np.eye(4, dtype=bool)
        return _op_check("log_softmax (masked)", r, [a], lambda: log_softmax(a, mask))

    def c_layer_norm():
        r = root.spawn("layer_norm")
        a, g, b = _leaf(r, (3, 6)), _leaf(r, (6,)), _leaf(r, (6,))
        return _op_check("layer_norm", r, [a, g, b], lambda: layer_norm(a, g, b))

    def c_l2():
        r = root.spawn("l2")
        a = _leaf(r, (3, 4))
        return _op_check("l2_normalize_rows", r, [a], lambda: l2_normalize_rows(a))

    def c_cross_entropy():
        r = root.spawn("ce")
        a = _leaf(r, (4, 3))
        labels = np.array([0, 2, 1, 2])
        return check("cross_entropy", [a], lambda: cross_entropy_from_logits(a, labels))

    def c_mhsa():
        r = root.spawn("mhsa")
        layer = init_encoder_layer(r.spawn("params"), 4, 2, 8)
        x = _leaf(r, (2, 3, 4))
        mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
        leaves = [x, layer.q.w, layer.q.b, layer.k.w, layer.v.w, layer.out.w, layer.out.b]
        return _op_check("multi-head self-attention (masked)", r, leaves, lambda: multi_head_self_attention(x, layer, mask))

    def c_encoder():
        r = root.spawn("encoder")
        layer = init_encoder_layer(r.spawn("params"), 4, 2, 8)
        x = _leaf(r, (1, 2, 4))
        leaves = [x] + [t for t in _layer_tensors(layer)]
        return _op_check(
            "encoder layer (dropout, fixed mask)",
            r,
            leaves,
            lambda: encoder_layer(x, layer, None, Rng(seed, "gradcheck/encoder-mask"), True, 0.2),
        )

    def c_nt_xent():
        r = root.spawn("nt_xent")
        zt, zi = _leaf(r, (3, 4)), _leaf(r, (3, 4))
        return check("nt_xent", [zt, zi], lambda: nt_xent(zt, zi, 0.5))

    def c_classify():
        r = root.spawn("classify")
        params = init_fusion(r.spawn("params"), 4, 3, "early")
        _randomize(params.head_out.w, r.spawn("head_out"))
        ht, hi = _leaf(r, (2, 4)), _leaf(r, (2, 4))
        labels = np.array([2, 0])
        leaves = [ht, hi, params.proj_text.w, params.proj_image.w, params.head_norm.gamma, params.head_hidden.w, params.head_out.w, params.head_out.b]

        def f():
            zt, zi, h = fuse_early(ht, hi, params)
            logits = classify(h, params, Rng(seed, "gradcheck/head-mask"), True, 0.2)
            return joint_loss(logits, labels, zt, zi, ContrastiveConfig(0.5, 0.2))[0]

        return check("fusion + classifier + joint loss", leaves, f)

    def c_late():
        r = root.spawn("late")
        params = init_fusion(r.spawn("params"), 4, 3, "late")
        _randomize(params.late_text.w, r.spawn("late_text"))
        _randomize(params.late_image.w, r.spawn("late_image"))
        ht, hi = _leaf(r, (2, 4)), _leaf(r, (2, 4))
        labels = np.array([1, 0])
        leaves = [ht, hi, params.late_text.w, params.late_image.w, params.late_image.b]
        return check("late fusion", leaves, lambda: cross_entropy_from_logits(fuse_late(ht, hi, params), labels))

    return [
        c_add, c_mul, c_scale, c_broadcast, c_gelu, c_dropout, c_matmul, c_transpose, c_reshape,
        c_sum, c_mean, c_concat, c_slice, c_pick, c_embedding, c_softmax, c_softmax_masked,
        c_log_softmax, c_layer_norm, c_l2, c_cross_entropy, c_mhsa, c_encoder, c_nt_xent,
        c_classify, c_late,
    ]


def _layer_tensors(layer) -> list[Tensor]:
    out = []
    for lin in (layer.q, layer.k, layer.v, layer.out, layer.ff1, layer.ff2):
        out += [lin.w, lin.b]
    for ln in (layer.ln1, layer.ln2):
        out += [ln.gamma, ln.beta]
    return out


def _randomize(t: Tensor, rng: Rng, std: float = 0.3) -> None:
    t.data = t.data + rng.normal(t.shape, std)


def model_check(cfg: RunConfig | None = None, coords_per_tensor: int = 6, vocab_size: int = 24) -> CheckResult:
    """End-to-end check on a 2-sample batch, dropout active with a fixed mask.

    Every parameter gets a random offset first: zero-initialised heads and
    unit LayerNorm gains would otherwise leave some gradients exactly zero.
    """
    cfg = cfg or RunConfig()
    r = Rng(cfg.seed, "gradcheck/model")
    params = init_model(cfg, vocab_size)
    named = params.named()
    for name, t in named:
        _randomize(t, r.spawn(f"offset/{name}"), 0.05)
    n = cfg.max_seq_len
    ids = np.zeros((2, n), dtype=np.int64)
    mask = np.zeros((2, n), dtype=bool)
    for row, length in enumerate((n, max(2, n // 2))):
        ids[row, 0] = 1
        ids[row, 1:length] = [r.below(vocab_size - 6) + 6 for _ in range(length - 1)]
        mask[row, :length] = True
    h, w = cfg.image_size
    images = r.random((2, h, w, cfg.channels))
    labels = np.array([0, min(1, cfg.num_classes - 1)])
    batch = Batch(ids, mask, images, labels, ["a", "b"])

    def f():
        out = forward(params, batch, cfg, Rng(cfg.seed, "gradcheck/model-mask"), training=True)
        return loss(out, batch, cfg)[0]

    leaves = [t for _, t in named]
    result = check("end-to-end model, 2 samples", leaves, f, coords_per_tensor=coords_per_tensor, rng=r.spawn("coords"))
    return result


def run_all(cfg: RunConfig | None = None, seed: int = 0) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = [c() for c in op_checks(seed)]
    results.append(model_check(cfg))
    return results, time.perf_counter() - start


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'coords':>6}  {'max rel err':>11}  result"]
    for r in results:
        err = f"{r.max_rel_err:.3e}" if math.isfinite(r.max_rel_err) else "nan"
        lines.append(f"{r.name:<{width}}  {r.n_coords:>6}  {err:>11}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
