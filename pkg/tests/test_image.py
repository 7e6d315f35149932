import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtcn.errors import ConfigError, ContractError, DataError
from dtcn.gradcheck import check
from dtcn.image import encode_image, init_image_branch, patchify, read_pgm, write_pgm
from dtcn.rng import Rng
from dtcn.tensor import constant, mul, sum_


def _branch(seed=0, size=(8, 8), patch=4):
    return init_image_branch(Rng(seed), size, patch, 1, 8, 2, 16, 1)


def test_pgm_round_trip(tmp_path):
    pixels = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    write_pgm(tmp_path / "a.pgm", pixels)
    img = read_pgm(tmp_path / "a.pgm")
    assert img.shape == (3, 4, 1)
    assert np.array_equal(np.rint(img[..., 0] * 255).astype(np.uint8), pixels)


def test_pgm_header_comment_and_errors(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert read_pgm(tmp_path / "c.pgm")[..., 0].tolist() == [[0.0, 1.0]]
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    (tmp_path / "deep.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    for name in ("p2.pgm", "short.pgm", "deep.pgm", "missing.pgm"):
        with pytest.raises(DataError):
            read_pgm(tmp_path / name)
    write_pgm(tmp_path / "odd.pgm", np.zeros((6, 6), dtype=np.uint8))
    with pytest.raises(ConfigError, match="H=6, W=6.*P=4"):
        read_pgm(tmp_path / "odd.pgm", patch_size=4)


def test_patchify_examples():
    img = np.arange(16.0).reshape(4, 4, 1)
    tiles = patchify(img, 4)
    assert tiles.shape == (1, 16) and tiles[0].tolist() == list(range(16))
    assert patchify(np.zeros((16, 16, 1)), 4).shape == (16, 16)


def test_patchify_index_oracle():
    h = w = 8
    ramp = np.arange(h * w, dtype=np.float64).reshape(h, w, 1)
    tiles = patchify(ramp, 4)
    # tile t covers rows 4*(t//2).., cols 4*(t%2)..; element (r, c) sits at r*4 + c
    for t in range(4):
        for r in range(4):
            for c in range(4):
                assert tiles[t, r * 4 + c] == (4 * (t // 2) + r) * w + 4 * (t % 2) + c
    assert tiles[3].tolist() == [36, 37, 38, 39, 44, 45, 46, 47, 52, 53, 54, 55, 60, 61, 62, 63]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), b=st.integers(1, 3), ph=st.integers(1, 3), pw=st.integers(1, 3), p=st.sampled_from([1, 2, 4]))
def test_patchify_batch_matches_single(seed, b, ph, pw, p):
    imgs = np.random.default_rng(seed).random((b, ph * p, pw * p, 1))
    batched = patchify(imgs, p)
    assert batched.shape == (b, ph * pw, p * p)
    for i in range(b):
        assert np.array_equal(batched[i], patchify(imgs[i], p))


def test_encode_image_properties():
    params = _branch(1)
    g = np.random.default_rng(1)
    img = g.random((1, 8, 8, 1))
    a = encode_image(np.concatenate([img, img]), params, 4)
    assert a.shape == (2, 8)
    assert np.array_equal(a.data[0], a.data[1])
    assert np.array_equal(encode_image(img, params, 4).data, encode_image(img, params, 4).data)
    swapped = img.copy()
    swapped[0, :4, :4], swapped[0, 4:, 4:] = img[0, 4:, 4:], img[0, :4, :4]
    assert not np.allclose(encode_image(swapped, params, 4).data, encode_image(img, params, 4).data)


def test_patch_projection_gradient():
    params = init_image_branch(Rng(2), (4, 4), 4, 1, 8, 2, 16, 1)
    img = np.random.default_rng(2).random((1, 4, 4, 1))
    w = constant(np.random.default_rng(3).normal(size=(1, 8)))
    leaves = [params.patch_proj.w, params.patch_proj.b, params.cls_token]
    res = check("patch", leaves, lambda: sum_(mul(encode_image(img, params, 4), w)))
    assert res.max_rel_err < 1e-4


def test_bad_inputs():
    params = _branch()
    with pytest.raises(ContractError):
        encode_image(np.full((1, 8, 8, 1), 1.5), params, 4)
    with pytest.raises(ContractError):
        encode_image(np.zeros((8, 8, 1)), params, 4)
    with pytest.raises(ConfigError):
        init_image_branch(Rng(0), (10, 8), 4, 1, 8, 2, 16, 1)
