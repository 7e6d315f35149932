"""Dataset curation and IO.

A dataset directory holds::

    manifest.json   split ids, seed and per-class counts
    data.jsonl      one record per line: id, text, image, label
    images/*.pgm    binary PGM rasters referenced by ``image``
"""
from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .config import RunConfig
from .errors import ConfigError, DataError
from .image import read_pgm, write_pgm
from .model import Batch
from .rng import Rng
from .text import Vocab, tokenize

log = logging.getLogger(__name__)

NEGATIVE, NEUTRAL, POSITIVE = 0, 1, 2
SENTIMENT_NAMES = ("negative", "neutral", "positive")
SPLITS = ("train", "val", "test")

# ---------------------------------------------------------------- text normalisation

_EMOJI_RANGES = (
    "\U0001F300-\U0001F5FF"  # symbols & pictographs
    "\U0001F600-\U0001F64F"  # emoticons
    "\U0001F680-\U0001F6FF"  # transport & map
    "\U0001F780-\U0001F7FF"  # geometric shapes extended
    "\U0001F900-\U0001F9FF"  # supplemental symbols & pictographs
    "\U0001FA70-\U0001FAFF"  # symbols & pictographs extended-A
    "\U0001F1E6-\U0001F1FF"  # regional indicators
    "\u2600-\u26FF"  # miscellaneous symbols
    "\u2700-\u27BF"  # dingbats
)
# zero-width joiner, emoji variation selector, skin-tone modifiers
_EMOJI_JOINERS = re.compile("[\u200d\ufe0f\U0001F3FB-\U0001F3FF]")
_EMOJI = re.compile(f"[{_EMOJI_RANGES}]")
_URL = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_MENTION = re.compile(r"@+\w+")
_HASHTAG = re.compile(r"#+(\w+)")
_REPEATED_PUNCT = re.compile(r"([!?.,;:])\1+")


def load_hashtag_lexicon(path: str | Path | None = None) -> frozenset[str]:
    if path is None:
        text = resources.files("dtcn").joinpath("resources/sentiment_hashtags.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    words = (line.split("#", 1)[0].strip().lower() for line in text.splitlines())
    return frozenset(w for w in words if w)


SENTIMENT_HASHTAGS = load_hashtag_lexicon()


def _normalize_once(text: str, lexicon: frozenset[str]) -> str:
    text = _URL.sub(" HTTPURL ", text)
    text = _EMOJI_JOINERS.sub("", text)
    text = _EMOJI.sub(" EMOJI ", text)
    text = _HASHTAG.sub(lambda m: "" if m.group(1).lower() in lexicon else m.group(1), text)
    text = _MENTION.sub("@USER", text)
    text = _REPEATED_PUNCT.sub(r"\1", text)
    return " ".join(text.split())


def normalize_text(raw: str, lexicon: frozenset[str] | None = None) -> str:
    """Tweet-style cleanup.

    URLs become ``HTTPURL``, mentions ``@USER``, emoji ``EMOJI``; sentiment
    hashtags are deleted, other hashtags lose their ``#``; runs of the same
    punctuation mark collapse to one; whitespace is collapsed.  The rules are
    applied until nothing changes, so the result is idempotent.
    """
    lexicon = SENTIMENT_HASHTAGS if lexicon is None else lexicon
    text = raw
    for _ in range(16):
        new = _normalize_once(text, lexicon)
        if new == text:
            break
        text = new
    return text


# ---------------------------------------------------------------- label reconciliation


def parse_sentiment(value) -> int:
    if isinstance(value, str):
        v = value.strip().lower()
        if v in SENTIMENT_NAMES:
            return SENTIMENT_NAMES.index(v)
        try:
            value = int(v)
        except ValueError:
            raise DataError(f"unknown sentiment label {value!r}") from None
    if value not in (NEGATIVE, NEUTRAL, POSITIVE):
        raise DataError(f"sentiment label {value!r} outside {{0, 1, 2}}")
    return int(value)


def reconcile_mvsa(text_label, image_label) -> int | None:
    """Merge per-modality labels: agreement keeps the label, neutral defers to
    the other modality, positive against negative is discarded (``None``)."""
    t, i = parse_sentiment(text_label), parse_sentiment(image_label)
    if t == i:
        return t
    if t == NEUTRAL:
        return i
    if i == NEUTRAL:
        return t
    return None


# ---------------------------------------------------------------- splitting


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int
    class_counts: dict[str, list[int]] = field(default_factory=dict)

    def split(self, name: str) -> list[str]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "train": self.train,
            "val": self.val,
            "test": self.test,
            "class_counts": self.class_counts,
        }
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str, where: str = "manifest") -> "SplitManifest":
        try:
            obj = json.loads(text)
            return cls(
                train=list(obj["train"]),
                val=list(obj["val"]),
                test=list(obj["test"]),
                seed=int(obj["seed"]),
                class_counts={k: list(v) for k, v in obj.get("class_counts", {}).items()},
            )
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"{where}: malformed manifest ({e})") from e


def largest_remainder(n: int, ratios: Sequence[int]) -> list[int]:
    """Apportion ``n`` by integer ``ratios``; ties go to the earlier slot."""
    total = sum(ratios)
    quotas = [Fraction(n * r, total) for r in ratios]
    counts = [q.numerator // q.denominator for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(
    ids: Sequence[str],
    labels: Sequence[int],
    seed: int,
    ratios: Sequence[int] = (8, 1, 1),
    num_classes: int | None = None,
    strata: Sequence | None = None,
) -> SplitManifest:
    """Per-stratum shuffle then cut by largest-remainder rounding.

    Strata default to the labels.  Within each split ids keep their input order.
    """
    if len(ids) != len(labels):
        raise DataError("ids and labels differ in length")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate sample ids")
    labels = [int(y) for y in labels]
    k = num_classes if num_classes is not None else (max(labels) + 1 if labels else 0)
    if any(not 0 <= y < k for y in labels):
        raise DataError(f"label outside [0, {k})")
    for c in range(k):
        if labels.count(c) == 0:
            raise DataError(f"class {c} has no samples")
    strata = labels if strata is None else list(strata)
    position = {sid: i for i, sid in enumerate(ids)}
    groups: dict = {}
    for sid, key in zip(ids, strata):
        groups.setdefault(key, []).append(sid)
    chosen: list[list[str]] = [[] for _ in ratios]
    for key in sorted(groups, key=repr):
        members = groups[key]
        if len(members) < 10:
            log.warning("stratum %r has only %d samples; proportional rounding may be coarse", key, len(members))
        Rng(seed).spawn(f"split/{key!r}").shuffle(members)
        start = 0
        for part, count in zip(chosen, largest_remainder(len(members), ratios)):
            part.extend(members[start : start + count])
            start += count
    parts = [sorted(p, key=position.__getitem__) for p in chosen]
    label_of = dict(zip(ids, labels))
    counts = {}
    for name, part in zip(SPLITS, parts):
        per = [0] * k
        for sid in part:
            per[label_of[sid]] += 1
        counts[name] = per
    return SplitManifest(parts[0], parts[1], parts[2], seed, counts)


# ---------------------------------------------------------------- raw MVSA input

MVSA_COLUMNS = ("id", "text", "text_label", "image_label", "image_path")


@dataclass
class RawPair:
    id: str
    text: str
    image_path: str
    text_label: int | None = None
    image_label: int | None = None
    unified_label: int | None = None


def read_mvsa_tsv(path: str | Path) -> list[RawPair]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"{path}: {e.strerror}") from e
    if not lines:
        raise DataError(f"{path}: empty input")
    header = lines[0].split("\t")
    if tuple(h.strip() for h in header) != MVSA_COLUMNS:
        raise DataError(f"{path}:1: header must be {' '.join(MVSA_COLUMNS)}")
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(MVSA_COLUMNS):
            raise DataError(f"{path}:{lineno}: expected {len(MVSA_COLUMNS)} tab-separated fields, got {len(cols)}")
        sid, text, tl, il, img = cols
        try:
            pairs.append(RawPair(sid, text, img, parse_sentiment(tl), parse_sentiment(il)))
        except DataError as e:
            raise DataError(f"{path}:{lineno}: {e}") from None
    if not pairs:
        raise DataError(f"{path}: no data rows")
    return pairs


@dataclass
class CurationReport:
    kept: int
    discarded: int
    class_counts: list[int]
    manifest: SplitManifest


def preprocess(raw_path: str | Path, out_dir: str | Path, seed: int) -> CurationReport:
    """Normalise, reconcile and split an MVSA-style TSV into a dataset directory."""
    raw_path, out = Path(raw_path), Path(out_dir)
    pairs = read_mvsa_tsv(raw_path)
    kept_records = []
    discarded = 0
    for pair in pairs:
        label = reconcile_mvsa(pair.text_label, pair.image_label)
        if label is None:
            discarded += 1
            continue
        image = Path(pair.image_path)
        if not image.is_absolute():
            image = raw_path.parent / image
        kept_records.append(
            {"id": pair.id, "text": normalize_text(pair.text), "image": os.path.relpath(image, out), "label": label}
        )
    if not kept_records:
        raise DataError(f"{raw_path}: every pair was discarded")
    manifest = stratified_split([r["id"] for r in kept_records], [r["label"] for r in kept_records], seed, num_classes=3)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "data.jsonl", kept_records)
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    counts = [0, 0, 0]
    for r in kept_records:
        counts[r["label"]] += 1
    return CurationReport(len(kept_records), discarded, counts, manifest)


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- synthetic data

FILLER_WORDS = (
    "the", "a", "this", "that", "is", "was", "my", "our", "today", "photo",
    "look", "at", "with", "and", "so", "very", "just", "new", "here", "there",
)
WORDS_PER_SET = 8
TEXT_LENGTH = (5, 10)
TEMPLATE_NAMES = ("hstripes", "vstripes", "checker", "diagonal", "frame", "square", "cross")


def template(kind: int, height: int, width: int) -> np.ndarray:
    """Binary ``(H, W)`` pattern number ``kind`` (see ``TEMPLATE_NAMES``)."""
    r, c = np.mgrid[0:height, 0:width]
    name = TEMPLATE_NAMES[kind]
    # both equal their 16x16 values (4 and 2) and stay distinct down to 4x4
    cell = max(1, min(height, width) // 4)
    border = max(1, min(height, width) // 8)
    if name == "hstripes":
        img = (r // 2) % 2 == 0
    elif name == "vstripes":
        img = (c // 2) % 2 == 0
    elif name == "checker":
        img = ((r // cell) + (c // cell)) % 2 == 0
    elif name == "diagonal":
        img = np.abs(r * width - c * height) <= max(height, width) * 1.5
    elif name == "frame":
        img = (r < border) | (r >= height - border) | (c < border) | (c >= width - border)
    elif name == "square":
        img = (np.abs(r - (height - 1) / 2) < height / 4) & (np.abs(c - (width - 1) / 2) < width / 4)
    else:
        img = (np.abs(r - (height - 1) / 2) < 1.5) | (np.abs(c - (width - 1) / 2) < 1.5)
    return img.astype(np.float64)


def _signal_words(prefix: str, n_sets: int) -> list[list[str]]:
    return [[f"{prefix}{k}w{j}" for j in range(WORDS_PER_SET)] for k in range(n_sets)]


def gen_synthetic(
    out_dir: str | Path,
    mode: str,
    n: int,
    num_classes: int,
    seed: int,
    image_size: tuple[int, int] = (16, 16),
    pixel_noise: float = 0.1,
    token_noise: float = 0.1,
) -> SplitManifest:
    """Write a synthetic image-text dataset.

    ``correlated``: class ``k`` draws its words from word set ``k`` and its
    image from template ``k``, so either modality alone determines the label.
    ``xor``: the text picks one of two word sets (bit ``a``), the image one of
    two templates (bit ``b``), and the label is ``a ^ b``.  Cells are balanced
    and the split is stratified by cell, so neither bit alone carries signal.

    Token noise replaces each word, with that probability, by a word drawn
    uniformly from every word the generator knows; pixel noise is Gaussian with
    standard deviation ``pixel_noise`` before clipping and 8-bit quantisation.
    """
    if mode not in ("correlated", "xor"):
        raise ConfigError(f"mode must be correlated|xor, got {mode!r}")
    if mode == "correlated" and num_classes not in (3, 7):
        raise ConfigError(f"correlated mode supports 3 or 7 classes, got {num_classes}")
    if mode == "xor" and num_classes != 2:
        raise ConfigError(f"xor mode needs exactly 2 classes, got {num_classes}")
    h, w = image_size
    if h < 4 or w < 4:
        raise ConfigError(f"image_size {h}x{w} too small (need >= 4x4)")
    if n < 1:
        raise ConfigError("n must be >= 1")
    if not 0.0 <= token_noise <= 1.0 or pixel_noise < 0:
        raise ConfigError("noise levels out of range")

    rng = Rng(seed).spawn("synthetic")
    n_sets = num_classes if mode == "correlated" else 2
    word_sets = _signal_words("c" if mode == "correlated" else "a", n_sets)
    pool = list(FILLER_WORDS) + [word for ws in word_sets for word in ws]
    if mode == "correlated":
        templates = [template(k, h, w) for k in range(num_classes)]
        cells = [i % num_classes for i in range(n)]
    else:
        templates = [template(0, h, w), template(1, h, w)]
        cells = [i % 4 for i in range(n)]
    rng.shuffle(cells)

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records, labels = [], []
    width = len(str(n - 1))
    for i, cell in enumerate(cells):
        if mode == "correlated":
            text_set = image_kind = label = cell
            meta = None
        else:
            text_set, image_kind = cell >> 1, cell & 1
            label = text_set ^ image_kind
            meta = {"text_bit": text_set, "image_bit": image_kind}
        length = TEXT_LENGTH[0] + rng.below(TEXT_LENGTH[1] - TEXT_LENGTH[0] + 1)
        words = []
        for _ in range(length):
            if rng.random(1)[0] < token_noise:
                words.append(pool[rng.below(len(pool))])
            else:
                words.append(word_sets[text_set][rng.below(WORDS_PER_SET)])
        pixels = templates[image_kind] + rng.normal((h, w), pixel_noise) if pixel_noise > 0 else templates[image_kind]
        pixels = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
        sid = f"s{i:0{width}d}"
        write_pgm(out / "images" / f"{sid}.pgm", pixels)
        rec = {"id": sid, "text": " ".join(words), "image": f"images/{sid}.pgm", "label": label}
        if meta is not None:
            rec["meta"] = meta
        records.append(rec)
        labels.append(label)
    ids = [r["id"] for r in records]
    manifest = stratified_split(ids, labels, seed, num_classes=num_classes, strata=cells)
    _write_jsonl(out / "data.jsonl", records)
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


# ---------------------------------------------------------------- loading


@dataclass
class Sample:
    id: str
    ids: np.ndarray
    mask: np.ndarray
    image: np.ndarray
    label: int


def read_records(data_dir: str | Path) -> tuple[SplitManifest, dict[str, dict]]:
    data_dir = Path(data_dir)
    mpath = data_dir / "manifest.json"
    try:
        manifest = SplitManifest.from_json(mpath.read_text(encoding="utf-8"), str(mpath))
    except OSError as e:
        raise DataError(f"{mpath}: {e.strerror}") from e
    jpath = data_dir / "data.jsonl"
    records: dict[str, dict] = {}
    try:
        fh = open(jpath, encoding="utf-8")
    except OSError as e:
        raise DataError(f"{jpath}: {e.strerror}") from e
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, text, image, label = rec["id"], rec["text"], rec["image"], rec["label"]
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"{jpath}:{lineno}: malformed record ({e})") from None
            if not isinstance(label, int) or isinstance(label, bool):
                raise DataError(f"{jpath}:{lineno}: label must be an integer")
            rec["_line"] = lineno
            records[str(sid)] = rec
    for name in SPLITS:
        for sid in manifest.split(name):
            if sid not in records:
                raise DataError(f"{mpath}: id {sid!r} in split {name} has no record in data.jsonl")
    return manifest, records


def split_texts(data_dir: str | Path, split: str = "train") -> list[str]:
    manifest, records = read_records(data_dir)
    return [records[sid]["text"] for sid in manifest.split(split)]


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DTCN_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Dataset:
    manifest: SplitManifest
    splits: dict[str, list[Sample]]

    def __getitem__(self, split: str) -> list[Sample]:
        return self.splits[split]


def load_dataset(data_dir: str | Path, vocab: Vocab, cfg: RunConfig, threads: int | None = None) -> Dataset:
    """Decode every sample named in the manifest.  Decoding may be spread over
    ``DTCN_THREADS`` workers; results always come back in manifest order."""
    data_dir = Path(data_dir)
    manifest, records = read_records(data_dir)
    jpath = data_dir / "data.jsonl"
    h, w = cfg.image_size

    def decode(sid: str) -> Sample:
        rec = records[sid]
        where = f"{jpath}:{rec['_line']}"
        if not 0 <= rec["label"] < cfg.num_classes:
            raise DataError(f"{where}: label {rec['label']} outside [0, {cfg.num_classes})")
        img_path = Path(rec["image"])
        if not img_path.is_absolute():
            img_path = data_dir / img_path
        if not img_path.exists():
            raise DataError(f"{where}: missing image file {img_path}")
        img = read_pgm(img_path, cfg.patch_size)
        if img.shape != (h, w, cfg.channels):
            raise DataError(f"{where}: image {img.shape[:2]} x{img.shape[2]} does not match config {h}x{w} x{cfg.channels}")
        ids, mask = tokenize(rec["text"], vocab, cfg.max_seq_len)
        return Sample(sid, ids, mask, img, int(rec["label"]))

    workers = threads if threads is not None else worker_count()
    splits = {}
    for name in SPLITS:
        sids = manifest.split(name)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                splits[name] = list(pool.map(decode, sids))
        else:
            splits[name] = [decode(sid) for sid in sids]
    return Dataset(manifest, splits)


def make_batch(samples: Sequence[Sample]) -> Batch:
    return Batch(
        ids=np.stack([s.ids for s in samples]),
        mask=np.stack([s.mask for s in samples]),
        images=np.stack([s.image for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        sample_ids=[s.id for s in samples],
    )


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    return Rng(seed).spawn(f"shuffle/{epoch}").permutation(n)


def iterate_batches(samples: Sequence[Sample], batch_size: int, order: Sequence[int] | None = None) -> Iterator[Batch]:
    """Fixed-size batches in ``order`` (default: as given); the last may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    idx = list(range(len(samples))) if order is None else list(order)
    for start in range(0, len(idx), batch_size):
        yield make_batch([samples[i] for i in idx[start : start + batch_size]])
