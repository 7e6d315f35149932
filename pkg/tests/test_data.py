import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from dtcn.config import RunConfig
from dtcn.data import (
    SPLITS,
    SplitManifest,
    epoch_order,
    gen_synthetic,
    iterate_batches,
    largest_remainder,
    load_dataset,
    normalize_text,
    parse_sentiment,
    read_mvsa_tsv,
    read_records,
    reconcile_mvsa,
    split_texts,
    stratified_split,
    template,
)
from dtcn.errors import ConfigError, DataError
from dtcn.image import read_pgm
from dtcn.text import Vocab

LABELS = ("negative", "neutral", "positive")


# ---------------------------------------------------------------- normalisation


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("check https://x.co @bob", "check HTTPURL @USER"),
        ("#happy day", "day"),
        ("love!!! #sunset", "love! sunset"),
        ("see www.example.org/a?b=1 now", "see HTTPURL now"),
        ("@@alice and @bob_2", "@USER and @USER"),
        ("great \U0001F600\U0001F600 day", "great EMOJI EMOJI day"),
        ("thumbs \U0001F44D\U0001F3FD up", "thumbs EMOJI up"),
        ("##Sad #Beach ...wow??", "Beach .wow?"),
        ("  spaced \t out \n", "spaced out"),
    ],
)
def test_normalize_examples(raw, expected):
    assert normalize_text(raw) == expected


_pieces = st.sampled_from(
    ["#", "@", "!", "?", ".", " ", "happy", "sun", "http://", "www.", "x.co", "\U0001F600", "‍", "#love", "@bob", "ht", "tp"]
)


@settings(max_examples=200, deadline=None)
@given(parts=st.lists(_pieces | st.text(max_size=3), max_size=12))
def test_normalize_idempotent(parts):
    once = normalize_text("".join(parts))
    assert normalize_text(once) == once


# ---------------------------------------------------------------- reconciliation


def test_reconcile_all_pairs():
    table = {(t, i): reconcile_mvsa(t, i) for t, i in itertools.product(LABELS, repeat=2)}
    assert table[("neutral", "positive")] == 2
    assert table[("positive", "negative")] is None
    assert table[("negative", "negative")] == 0
    assert sum(v is None for v in table.values()) == 2
    for (t, i), v in table.items():
        assert v == table[(i, t)]
        assert v is None or v in (parse_sentiment(t), parse_sentiment(i))


def test_parse_sentiment():
    assert [parse_sentiment(x) for x in ("Negative", " neutral ", "2", 1)] == [0, 1, 2, 1]
    for bad in ("happy", 3, "-1"):
        with pytest.raises(DataError):
            parse_sentiment(bad)


# ---------------------------------------------------------------- splitting


def _oracle_apportion(n, ratios):
    # independent re-derivation: exact quotas, hand the leftover units to the
    # largest fractional parts, earliest slot first on ties
    quotas = [Fraction(n) * r / sum(ratios) for r in ratios]
    base = [int(q) for q in quotas]
    left = n - sum(base)
    ranked = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in ranked[:left]:
        base[i] += 1
    return base


def test_largest_remainder_examples():
    assert largest_remainder(10, (8, 1, 1)) == [8, 1, 1]
    assert largest_remainder(2683, (8, 1, 1)) == [2147, 268, 268]
    assert largest_remainder(470, (8, 1, 1)) == [376, 47, 47]
    assert largest_remainder(1358, (8, 1, 1)) == [1086, 136, 136]
    assert largest_remainder(5, (8, 1, 1)) == [4, 1, 0]


@settings(max_examples=200, deadline=None)
@given(n=st.integers(0, 5000), ratios=st.lists(st.integers(1, 9), min_size=1, max_size=4))
def test_largest_remainder_matches_oracle(n, ratios):
    got = largest_remainder(n, ratios)
    assert got == _oracle_apportion(n, ratios)
    assert sum(got) == n
    assert all(abs(c - Fraction(n * r, sum(ratios))) < 1 for c, r in zip(got, ratios))


def test_split_ten_per_class():
    ids = [f"id{i}" for i in range(30)]
    labels = [i // 10 for i in range(30)]
    m = stratified_split(ids, labels, seed=3)
    assert m.class_counts == {"train": [8, 8, 8], "val": [1, 1, 1], "test": [1, 1, 1]}
    assert sorted(m.train + m.val + m.test) == sorted(ids)
    assert stratified_split(ids, labels, seed=3).to_json() == m.to_json()
    assert stratified_split(ids, labels, seed=4).to_json() != m.to_json()


@settings(max_examples=50, deadline=None)
@given(counts=st.lists(st.integers(1, 60), min_size=2, max_size=5), seed=st.integers(0, 2**32))
def test_split_proportions_per_class(counts, seed):
    labels = [c for c, n in enumerate(counts) for _ in range(n)]
    ids = [f"s{i}" for i in range(len(labels))]
    m = stratified_split(ids, labels, seed)
    for s, r in zip(SPLITS, (8, 1, 1)):
        for c, n in enumerate(counts):
            assert abs(m.class_counts[s][c] - Fraction(n * r, 10)) < 1
    assert len(set(m.train) | set(m.val) | set(m.test)) == len(ids)


def test_split_errors():
    with pytest.raises(DataError):
        stratified_split(["a", "a"], [0, 1], 0)
    with pytest.raises(DataError):
        stratified_split(["a", "b"], [0, 2], 0, num_classes=3)
    with pytest.raises(DataError):
        stratified_split(["a"], [0, 1], 0)


def test_manifest_round_trip():
    m = stratified_split([f"x{i}" for i in range(20)], [i % 2 for i in range(20)], 5)
    assert SplitManifest.from_json(m.to_json()) == m
    with pytest.raises(DataError):
        SplitManifest.from_json("{}")


# ---------------------------------------------------------------- raw input


def test_read_mvsa_tsv_errors(tmp_path):
    p = tmp_path / "raw.tsv"
    p.write_text("")
    with pytest.raises(DataError, match="empty"):
        read_mvsa_tsv(p)
    p.write_text("id\ttext\ttext_label\timage_label\timage_path\n1\thi\tpositive\timg.pgm\n")
    with pytest.raises(DataError, match=":2:"):
        read_mvsa_tsv(p)
    p.write_text("id\ttext\ttext_label\timage_label\timage_path\n1\thi\tpositive\tsad\timg.pgm\n")
    with pytest.raises(DataError, match=":2:"):
        read_mvsa_tsv(p)


# ---------------------------------------------------------------- synthetic


@pytest.fixture(scope="module")
def xor_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("xor")
    gen_synthetic(path, "xor", 2000, 2, 42)
    return path


def test_xor_single_bits_carry_no_signal(xor_dir):
    _, records = read_records(xor_dir)
    recs = list(records.values())
    assert len(recs) == 2000
    for bit in ("text_bit", "image_bit"):
        hit = sum(r["meta"][bit] == r["label"] for r in recs) / len(recs)
        assert abs(hit - 0.5) <= 0.03
    for r in recs:
        assert r["label"] == r["meta"]["text_bit"] ^ r["meta"]["image_bit"]


def test_xor_split_balanced_cells(xor_dir):
    manifest, records = read_records(xor_dir)
    for split in SPLITS:
        cells = [(records[s]["meta"]["text_bit"], records[s]["meta"]["image_bit"]) for s in manifest.split(split)]
        counts = [cells.count(c) for c in itertools.product((0, 1), repeat=2)]
        assert max(counts) - min(counts) <= 1


def test_correlated_noiseless_templates_are_separable(tmp_path):
    gen_synthetic(tmp_path, "correlated", 60, 3, 1, pixel_noise=0.0, token_noise=0.0)
    _, records = read_records(tmp_path)
    templates = [template(k, 16, 16) for k in range(3)]
    for rec in records.values():
        img = read_pgm(tmp_path / rec["image"])[..., 0]
        nearest = int(np.argmin([np.abs(img - t).sum() for t in templates]))
        assert nearest == rec["label"]
        assert all(w.startswith(f"c{rec['label']}w") for w in rec["text"].split())


def test_templates_distinct():
    for h, w in ((4, 4), (16, 16), (8, 12)):
        pats = [template(k, h, w) for k in range(7)]
        for a, b in itertools.combinations(pats, 2):
            assert not np.array_equal(a, b)


def test_generator_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    gen_synthetic(a, "correlated", 40, 7, 9)
    gen_synthetic(b, "correlated", 40, 7, 9)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_generator_rejects_bad_config(tmp_path):
    for args in (("correlated", 10, 4), ("xor", 10, 3), ("bogus", 10, 2), ("xor", 0, 2)):
        with pytest.raises(ConfigError):
            gen_synthetic(tmp_path, *args, seed=0)


# ---------------------------------------------------------------- loading


def test_load_round_trip_counts(tmp_path):
    manifest = gen_synthetic(tmp_path, "correlated", 90, 3, 2)
    cfg = RunConfig()
    vocab = Vocab.build(split_texts(tmp_path), cfg.vocab_size)
    ds = load_dataset(tmp_path, vocab, cfg)
    for split in SPLITS:
        counts = np.bincount([s.label for s in ds[split]], minlength=3).tolist()
        assert counts == manifest.class_counts[split]
        assert [s.id for s in ds[split]] == manifest.split(split)
    threaded = load_dataset(tmp_path, vocab, cfg, threads=4)
    for split in SPLITS:
        for a, b in zip(ds[split], threaded[split]):
            assert a.id == b.id and np.array_equal(a.image, b.image) and np.array_equal(a.ids, b.ids)


def test_batching_and_order(tmp_path):
    gen_synthetic(tmp_path, "correlated", 41, 3, 2)
    cfg = RunConfig()
    ds = load_dataset(tmp_path, Vocab.build(split_texts(tmp_path), 100), cfg)
    train = ds["train"]
    assert len(train) == 33
    order = epoch_order(len(train), 5, 1)
    batches = list(iterate_batches(train, 16, order))
    assert [len(b) for b in batches] == [16, 16, 1]
    seen = [sid for b in batches for sid in b.sample_ids]
    assert sorted(seen) == sorted(s.id for s in train)
    assert epoch_order(33, 5, 1) == order
    assert epoch_order(33, 5, 2) != order
    assert batches[0].images.shape == (16, 16, 16, 1) and batches[0].ids.shape == (16, cfg.max_seq_len)


def test_loader_errors_name_the_line(tmp_path):
    gen_synthetic(tmp_path, "correlated", 12, 3, 2)
    lines = (tmp_path / "data.jsonl").read_text().splitlines()
    rec = json.loads(lines[4])
    rec["label"] = 5
    lines[4] = json.dumps(rec)
    (tmp_path / "data.jsonl").write_text("\n".join(lines) + "\n")
    vocab = Vocab.build([], 10)
    with pytest.raises(DataError, match=r"data\.jsonl:5"):
        load_dataset(tmp_path, vocab, RunConfig())
    (tmp_path / "data.jsonl").write_text("{not json\n")
    with pytest.raises(DataError, match=r"data\.jsonl:1"):
        read_records(tmp_path)


def test_loader_rejects_wrong_image_size(tmp_path):
    gen_synthetic(tmp_path, "correlated", 12, 3, 2, image_size=(8, 8))
    with pytest.raises(DataError, match="does not match config"):
        load_dataset(tmp_path, Vocab.build([], 10), RunConfig())
