import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtcn import checkpoint
from dtcn.config import LR_PAPER, RunConfig, parse_assignments
from dtcn.data import gen_synthetic
from dtcn.errors import CheckpointError, ConfigError, ContractError
from dtcn.model import init_model
from dtcn.tensor import parameter
from dtcn.training import (
    AdamState,
    EarlyStopState,
    accuracy_macro_f1,
    adam_step,
    clip_grad_norm,
    evaluate,
    read_metrics,
    train,
)

SMALL = RunConfig(hidden_dim=8, n_heads=2, text_layers=1, image_layers=1, epochs=2, num_classes=3)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("small")
    gen_synthetic(path, "correlated", 60, 3, 5)
    return path


@pytest.fixture(scope="module")
def small_run(small_data, tmp_path_factory):
    return train(SMALL, small_data, tmp_path_factory.mktemp("run"))


# ---------------------------------------------------------------- optimiser


def _adam_oracle(grads, lr, b1=0.9, b2=0.999, eps=1e-8, x=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return x


def test_adam_scalar_trajectory():
    p = parameter(np.array([0.0]))
    state = AdamState(lr=0.001)
    grads = [1.0, -0.5, 2.0]
    for g in grads:
        p.grad = np.array([g])
        adam_step([("p", p)], state)
    assert abs(p.data[0] - _adam_oracle(grads, 0.001)) < 1e-12


def test_adam_first_step_and_zero_gradient():
    p = parameter(np.array([3.0]))
    p.grad = np.array([1.0])
    adam_step([("p", p)], AdamState(lr=0.001))
    assert abs(p.data[0] - (3.0 - 0.001 / (1 + 1e-8))) < 1e-15
    q = parameter(np.array([1.5, -2.0]))
    q.grad = np.zeros(2)
    adam_step([("q", q)], AdamState(lr=0.1))
    assert q.data.tolist() == [1.5, -2.0]
    r = parameter(np.ones(1))
    with pytest.raises(ContractError):
        adam_step([("r", r)], AdamState(lr=0.1))


def test_clip_grad_norm():
    a, b = parameter(np.zeros(2)), parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([("a", a), ("b", b)], 1.0) == 5.0
    assert abs(math.hypot(a.grad[0], b.grad[0]) - 1.0) < 1e-15
    a.grad, b.grad = np.array([0.3, 0.0]), np.array([0.4])
    clip_grad_norm([("a", a), ("b", b)], 1.0)
    assert a.grad.tolist() == [0.3, 0.0]
    a.grad = np.array([30.0, 0.0])
    clip_grad_norm([("a", a)], None)
    assert a.grad.tolist() == [30.0, 0.0]


# ---------------------------------------------------------------- metrics


def test_metric_examples():
    assert accuracy_macro_f1([0, 1, 2], [0, 1, 2], 3) == (1.0, 1.0)
    acc, f1 = accuracy_macro_f1([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert acc == 0.75 and abs(f1 - (2 / 3 + 0.8) / 2) < 1e-15
    acc, f1 = accuracy_macro_f1([0, 0, 0, 0], [0, 0, 1, 1], 2)
    assert acc == 0.5 and abs(f1 - 1 / 3) < 1e-15
    _, weighted = accuracy_macro_f1([0, 1, 1, 1], [0, 0, 0, 1], 2, "weighted")
    assert abs(weighted - (0.75 * 0.5 + 0.25 * 0.5)) < 1e-15
    with pytest.raises(ContractError):
        accuracy_macro_f1([0, 3], [0, 1], 3)


@settings(max_examples=50, deadline=None)
@given(data=st.data(), k=st.integers(2, 5))
def test_f1_bounds(data, k):
    n = data.draw(st.integers(1, 30))
    preds = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    labels = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    acc, f1 = accuracy_macro_f1(preds, labels, k)
    assert 0.0 <= f1 <= 1.0 and 0.0 <= acc <= 1.0
    assert (f1 == 1.0) == (preds == labels and len(set(labels)) == k)


def test_early_stop_state(tmp_path):
    s = EarlyStopState(patience=2, path=tmp_path / "best.ckpt")
    history = []
    for epoch, f1 in enumerate([0.5, 0.4, 0.6, 0.6, 0.55], start=1):
        s.update(epoch, f1)
        history.append(s.best_val_f1)
    assert history == sorted(history)
    assert s.best_epoch == 3
    assert s.should_stop(5) and not s.should_stop(4)


# ---------------------------------------------------------------- config + checkpoint


def test_config_round_trip(tmp_path):
    cfg = RunConfig(lam=0.0, clip_norm=None, image_size=(8, 12), fusion="late", lr=LR_PAPER)
    assert RunConfig.loads(cfg.dumps()) == cfg
    cfg.save(tmp_path / "c.txt")
    assert RunConfig.load(tmp_path / "c.txt") == cfg
    assert "lambda = 0.0" in cfg.dumps() and "clip_norm = off" in cfg.dumps()
    assert RunConfig.loads("lr = lr_paper\n").lr == 2e-5


def test_config_errors():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.loads("bogus = 1\nlambda = 0.1\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_assignments("tau = 1\ntau = 2\n")
    with pytest.raises(ConfigError):
        RunConfig.loads("hidden_dim = 30\n")
    with pytest.raises(ConfigError):
        RunConfig.loads("tau = warm\n")
    assert parse_assignments("# only a comment\n\n tau = 0.1 # trailing\n") == {"tau": "0.1"}


def test_checkpoint_round_trip(tmp_path):
    cfg = SMALL.replace(fusion="late", lam=0.0)
    params = init_model(cfg, 30)
    for _, t in params.named():
        t.data = t.data + np.random.default_rng(len(t.data.shape)).normal(size=t.shape)
    checkpoint.save(tmp_path / "m.ckpt", cfg, params)
    cfg2, params2 = checkpoint.load(tmp_path / "m.ckpt")
    assert cfg2 == cfg
    for (n1, a), (n2, b) in zip(params.named(), params2.named()):
        assert n1 == n2 and np.array_equal(a.data, b.data)
    blob = (tmp_path / "m.ckpt").read_bytes()
    assert blob[:4] == b"DTCN"
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "cut.ckpt").write_bytes(blob[:-9])
    for name in ("bad.ckpt", "cut.ckpt", "missing.ckpt"):
        with pytest.raises(CheckpointError):
            checkpoint.load(tmp_path / name)
    assert not list(tmp_path.glob("*.tmp"))


# ---------------------------------------------------------------- training loop


def test_train_outputs(small_run):
    out = small_run.run_dir
    for name in ("config.txt", "vocab.txt", "metrics.csv", "batches.csv", "best.ckpt", "final.ckpt"):
        assert (out / name).exists()
    rows = read_metrics(out / "metrics.csv")
    assert [(r["epoch"], r["split"]) for r in rows] == [
        ("1", "train"), ("1", "val"), ("2", "train"), ("2", "val"), (str(small_run.best_epoch), "test")
    ]
    assert RunConfig.load(out / "config.txt") == SMALL


def test_every_training_sample_once_per_epoch(small_data, tmp_path):
    seen = []
    train(SMALL.replace(epochs=1), small_data, tmp_path, on_step=lambda e, i, p: seen.append(i))
    n_train = 48  # 60 samples, 20 per class -> 16 train each
    assert len(seen) == math.ceil(n_train / SMALL.batch_size)


def test_recomposition_each_batch(small_run):
    for rec in small_run.batch_log:
        assert abs(rec.loss_total - (rec.loss_cls + rec.lam * rec.loss_contrast)) < 1e-12


def test_lambda_zero_never_enters_total(small_data, tmp_path):
    result = train(SMALL.replace(lam=0.0, epochs=1), small_data, tmp_path)
    assert any(rec.loss_contrast > 0 for rec in result.batch_log)
    for rec in result.batch_log:
        assert rec.loss_total == rec.loss_cls


def test_zero_epochs_only_test_row(small_data, tmp_path):
    result = train(SMALL.replace(epochs=0), small_data, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [(r["epoch"], r["split"]) for r in rows] == [("0", "test")]
    assert result.best_epoch == 0


def test_evaluate_replays_best_val(small_run, small_data):
    val = small_run.record("val", small_run.best_epoch)
    rec = evaluate(small_run.run_dir / "best.ckpt", small_data, "val")
    again = evaluate(small_run.run_dir / "best.ckpt", small_data, "val")
    assert rec == again
    for field in ("loss_total", "loss_cls", "loss_contrast", "accuracy", "macro_f1"):
        assert getattr(rec, field) == getattr(val, field)


def test_evaluate_needs_vocab(small_run, tmp_path):
    (tmp_path / "best.ckpt").write_bytes((small_run.run_dir / "best.ckpt").read_bytes())
    with pytest.raises(CheckpointError, match="vocab"):
        evaluate(tmp_path / "best.ckpt", tmp_path)


def test_late_fusion_run(small_data, tmp_path):
    result = train(SMALL.replace(fusion="late", lam=0.2, epochs=1), small_data, tmp_path)
    assert all(rec.lam == 0.0 and rec.loss_contrast == 0.0 for rec in result.batch_log)
