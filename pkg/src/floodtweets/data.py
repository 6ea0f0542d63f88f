"""Tweet corpus schema, loading/writing, and a synthetic corpus generator."""

from __future__ import annotations

import csv
import enum
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import DataError

log = logging.getLogger(__name__)

FIELDS = ("tweet_id", "text", "image_path", "label", "split")
REQUIRED = ("tweet_id", "text", "split")


class Label(str, enum.Enum):
    NOT_RELEVANT = "not_relevant"
    RELEVANT = "relevant"

    @property
    def index(self) -> int:
        return LABEL_TO_INDEX[self]


class Split(str, enum.Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


# persisted in every checkpoint
LABEL_TO_INDEX = {Label.NOT_RELEVANT: 0, Label.RELEVANT: 1}
INDEX_TO_LABEL = {v: k for k, v in LABEL_TO_INDEX.items()}


@dataclass(frozen=True)
class TweetRecord:
    tweet_id: str
    text: str
    image_path: Optional[str] = None
    label: Optional[Label] = None
    split: Split = Split.TRAIN

    def to_json(self) -> dict:
        return {
            "tweet_id": self.tweet_id,
            "text": self.text,
            "image_path": self.image_path,
            "label": None if self.label is None else self.label.value,
            "split": self.split.value,
        }


@dataclass(frozen=True)
class DatasetSplit:
    records: tuple[TweetRecord, ...]
    class_counts: dict = field(compare=False, default_factory=dict)

    def __post_init__(self):
        records = tuple(sorted(self.records, key=lambda r: r.tweet_id))
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "class_counts", tally(records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labels(self) -> list[Optional[Label]]:
        return [r.label for r in self.records]

    def by_split(self, split: Split) -> "DatasetSplit":
        return DatasetSplit(tuple(r for r in self.records if r.split == split))

    def with_images(self) -> "DatasetSplit":
        return DatasetSplit(tuple(r for r in self.records if r.image_path))


def tally(records: Iterable[TweetRecord]) -> dict[Label, int]:
    c = Counter(r.label for r in records if r.label is not None)
    return {lab: c.get(lab, 0) for lab in Label}


def _parse_enum(kind, value, row: int, name: str):
    try:
        return kind(value)
    except ValueError:
        allowed = ", ".join(m.value for m in kind)
        raise DataError(f"row {row}: field {name!r} has invalid value {value!r} (expected one of {allowed})")


def _record_from_row(row: dict, index: int, root: Path) -> TweetRecord:
    for name in REQUIRED:
        if name not in row or row[name] is None:
            raise DataError(f"row {index}: missing required field {name!r}")
    unknown = set(row) - set(FIELDS) - {"clean_text"}
    if unknown:
        raise DataError(f"row {index}: unknown field(s) {sorted(unknown)}")
    image = row.get("image_path") or None
    if image is not None:
        image = str((root / image).resolve())
    label = row.get("label")
    label = None if label in (None, "") else _parse_enum(Label, label, index, "label")
    split = _parse_enum(Split, row["split"], index, "split")
    if label is None and split != Split.TEST:
        raise DataError(f"row {index}: missing required field 'label' for split {split.value!r}")
    return TweetRecord(str(row["tweet_id"]), str(row["text"]), image, label, split)


def _image_ok(path: str) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def read_rows(path: Path, format: str) -> list[dict]:
    if format == "jsonl":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"row {i}: not valid JSON ({exc.msg})") from exc
                if not isinstance(row, dict):
                    raise DataError(f"row {i}: expected a JSON object")
                rows.append(row)
        return rows
    if format == "csv":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise DataError(f"{path}: CSV header row is mandatory")
            missing = [f for f in REQUIRED if f not in reader.fieldnames]
            if missing:
                raise DataError(f"{path}: CSV header lacks column(s) {missing}")
            return [dict(r) for r in reader]
    raise DataError(f"unsupported dataset format {format!r}")


def infer_format(path: Path) -> str:
    return "csv" if Path(path).suffix.lower() == ".csv" else "jsonl"


def load_dataset(path, format: Optional[str] = None, check_images: bool = True) -> DatasetSplit:
    """Load and validate a tweet dataset.

    Relative ``image_path`` values resolve against the file's directory and
    are stored as absolute paths. Records come back sorted by ``tweet_id``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    format = format or infer_format(path)
    rows = read_rows(path, format)
    root = path.parent
    records, seen = [], set()
    for i, row in enumerate(rows, 1):
        rec = _record_from_row(row, i, root)
        if rec.tweet_id in seen:
            raise DataError(f"duplicate tweet_id {rec.tweet_id!r} at row {i}")
        seen.add(rec.tweet_id)
        records.append(rec)
    if check_images:
        bad = [r.tweet_id for r in records if r.image_path and not _image_ok(r.image_path)]
        if bad:
            raise DataError(f"unresolvable image_path for tweet_id(s): {', '.join(bad)}")
    return DatasetSplit(tuple(records))


def write_dataset(ds: DatasetSplit | Sequence[TweetRecord], path, format: Optional[str] = None,
                  extra: Optional[dict[str, dict]] = None) -> Path:
    """Write records; ``extra`` maps tweet_id -> additional fields (e.g. clean_text)."""
    path = Path(path)
    format = format or infer_format(path)
    records = ds.records if isinstance(ds, DatasetSplit) else tuple(ds)
    extra = extra or {}
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "jsonl":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r in records:
                row = {**r.to_json(), **extra.get(r.tweet_id, {})}
                fh.write(json.dumps(row, ensure_ascii=False, sort_keys=False) + "\n")
    elif format == "csv":
        extra_cols = sorted({k for v in extra.values() for k in v})
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(FIELDS) + extra_cols)
            w.writeheader()
            for r in records:
                row = {k: ("" if v is None else v) for k, v in r.to_json().items()}
                w.writerow({**row, **extra.get(r.tweet_id, {})})
    else:
        raise DataError(f"unsupported dataset format {format!r}")
    return path


# ---------------------------------------------------------------------------
# synthetic corpus

FLOOD_WORDS = (
    "alluvione", "acqua", "allagamento", "esondazione", "fiume", "pioggia",
    "maltempo", "fango", "piena", "argine", "nubifragio", "allerta",
    "soccorsi", "evacuati", "inondazione", "torrente", "diga", "frana",
    "temporale", "sommerso",
)
OTHER_WORDS = (
    "calcio", "partita", "concerto", "pizza", "vacanza", "spiaggia",
    "musica", "film", "cena", "treno", "mercato", "moda", "festa",
    "libro", "teatro", "gelato", "museo", "sole", "gita", "caffe",
)
FILLER_WORDS = ("oggi", "la", "in", "a", "che", "molto", "di", "ancora", "qui", "ora")
PLACES = ("Venezia", "Genova", "Roma", "Milano", "Napoli", "Torino")

IMAGE_SIZE = 64


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_relevant: int
    n_irrelevant: int
    text_vocab_separability: float = 1.0
    image_blob_separability: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_relevant < 0 or self.n_irrelevant < 0:
            raise ValueError("record counts must be >= 0")
        for name in ("text_vocab_separability", "image_blob_separability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def _own_pool_threshold(separability: float) -> int:
    # integer threshold keeps generation free of float-dependent branching
    return int(round((1.0 + separability) / 2.0 * 10_000))


def _synthetic_text(rng: np.random.Generator, relevant: bool, threshold: int) -> str:
    own, other = (FLOOD_WORDS, OTHER_WORDS) if relevant else (OTHER_WORDS, FLOOD_WORDS)
    words = []
    for _ in range(int(rng.integers(5, 10))):
        pool = own if rng.integers(0, 10_000) < threshold else other
        w = pool[int(rng.integers(0, len(pool)))]
        if rng.integers(0, 5) == 0:
            w = "#" + w
        words.append(w)
        if rng.integers(0, 3) == 0:
            words.append(FILLER_WORDS[int(rng.integers(0, len(FILLER_WORDS)))])
    if rng.integers(0, 3) == 0:
        words.insert(0, "@utente" + str(int(rng.integers(0, 100))))
    if rng.integers(0, 2) == 0:
        words.append("#" + PLACES[int(rng.integers(0, len(PLACES)))])
    if rng.integers(0, 2) == 0:
        words.append("https://t.co/" + "".join(chr(97 + int(c)) for c in rng.integers(0, 26, 8)))
    text = " ".join(words)
    if rng.integers(0, 4) == 0:
        k = int(rng.integers(1, len(text)))
        text = text[:k] + "\u200b" + text[k:]
    return text


def _synthetic_image(rng: np.random.Generator, water: bool) -> np.ndarray:
    """Integer-only drawing: water family = blue horizontal bands, dry = warm square blobs."""
    s = IMAGE_SIZE
    img = rng.integers(90, 140, size=(s, s, 3), dtype=np.int64)
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(int(rng.integers(2, 5))):
        if water:
            y0 = int(rng.integers(0, s - 8))
            h = int(rng.integers(4, 12))
            band = (yy >= y0) & (yy < y0 + h)
            color = (int(rng.integers(0, 40)), int(rng.integers(60, 120)), int(rng.integers(180, 256)))
            img[band] = color
        else:
            cy, cx = int(rng.integers(8, s - 8)), int(rng.integers(8, s - 8))
            r = int(rng.integers(4, 10))
            blob = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
            color = (int(rng.integers(180, 256)), int(rng.integers(100, 180)), int(rng.integers(0, 50)))
            img[blob] = color
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec, out_dir, split: Split = Split.TRAIN) -> DatasetSplit:
    """Write ``<split>.jsonl`` plus PNG images under ``out_dir`` and load it back.

    Output is a pure function of ``(spec, split)``; manifests store image paths
    relative to ``out_dir``.
    """
    split = Split(split)
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence([spec.rng_seed, list(Split).index(split)])
    rng = np.random.Generator(np.random.PCG64(ss))
    t_thr = _own_pool_threshold(spec.text_vocab_separability)
    i_thr = _own_pool_threshold(spec.image_blob_separability)

    labels = [Label.RELEVANT] * spec.n_relevant + [Label.NOT_RELEVANT] * spec.n_irrelevant
    order = rng.permutation(len(labels))
    records = []
    for i, j in enumerate(order):
        label = labels[int(j)]
        relevant = label is Label.RELEVANT
        tweet_id = f"{split.value}-{i:05d}"
        text = _synthetic_text(rng, relevant, t_thr)
        water = relevant if rng.integers(0, 10_000) < i_thr else not relevant
        name = f"{tweet_id}.png"
        Image.fromarray(_synthetic_image(rng, water), mode="RGB").save(img_dir / name, format="PNG")
        records.append(TweetRecord(tweet_id, text, f"images/{name}", label, split))

    manifest = out_dir / f"{split.value}.jsonl"
    write_dataset(records, manifest, "jsonl")
    log.info("synthetic %s split: %d records -> %s", split.value, len(records), manifest)
    return load_dataset(manifest, "jsonl")
