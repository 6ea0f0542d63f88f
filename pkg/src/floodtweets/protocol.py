"""Training protocol, run manifests, best-on-dev selection and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import random
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Protocol, Sequence

import numpy as np
import torch

from .data import INDEX_TO_LABEL
from .errors import ConfigError, TrainingError

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("seed", "epoch", "dev_micro_f1", "wall_seconds", "status")


@dataclass(frozen=True)
class TrainingProtocol:
    learning_rate: float = 1e-5
    epochs: int = 10
    seeds: tuple[int, ...] = tuple(range(10))
    batch_size: int = 32
    optimizer: str = "adam"
    max_sequence_length: int = 128
    # freshly initialised heads on frozen or fine-tuned image backbones
    head_learning_rate: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.learning_rate > 0 or not self.head_learning_rate > 0:
            raise ConfigError("learning rates must be > 0")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seed list has duplicates: {list(self.seeds)}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer != "adam":
            raise ConfigError(f"optimizer must be 'adam', got {self.optimizer!r}")
        if self.max_sequence_length < 2:
            raise ConfigError("max_sequence_length must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class ManifestRow:
    seed: int
    epoch: int
    dev_micro_f1: float
    wall_seconds: float = 0.0
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok" and math.isfinite(self.dev_micro_f1)


def selection_key(row: ManifestRow):
    """Higher score wins; ties go to the lower seed, then the earlier epoch."""
    return (row.dev_micro_f1, -row.seed, -row.epoch)


def select_best(rows: Sequence[ManifestRow]) -> ManifestRow:
    ok = [r for r in rows if r.ok]
    if not ok:
        raise TrainingError("no successful (seed, epoch) rows to select from")
    return max(ok, key=selection_key)


def write_manifest(path, rows: Sequence[ManifestRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            score = "" if not math.isfinite(r.dev_micro_f1) else repr(r.dev_micro_f1)
            w.writerow([r.seed, r.epoch, score, f"{r.wall_seconds:.3f}", r.status])
    return path


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            ManifestRow(
                int(r["seed"]),
                int(r["epoch"]),
                float(r["dev_micro_f1"]) if r["dev_micro_f1"] else float("nan"),
                float(r["wall_seconds"]),
                r.get("status") or "ok",
            )
            for r in csv.DictReader(fh)
        ]


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


class SeedRun(Protocol):
    def fit_epoch(self, epoch: int) -> float: ...
    def score(self) -> float: ...
    def state_dict(self) -> dict: ...


@dataclass
class SelectionResult:
    state: dict
    best: ManifestRow
    manifest: list[ManifestRow]


def train_seeds(cfg: TrainingProtocol, make_run: Callable[[int], SeedRun]) -> SelectionResult:
    """Train one model per seed, scoring on dev after every epoch.

    Only the running best state is retained. A seed whose loss goes
    non-finite is abandoned with a ``nonfinite_loss`` manifest row.
    """
    manifest: list[ManifestRow] = []
    best_row: Optional[ManifestRow] = None
    best_state = None
    for seed in cfg.seeds:
        seed_everything(seed)
        run = make_run(seed)
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            loss = run.fit_epoch(epoch)
            if not math.isfinite(loss):
                manifest.append(ManifestRow(seed, epoch, float("nan"), time.perf_counter() - t0, "nonfinite_loss"))
                log.warning("seed %d: non-finite loss at epoch %d; abandoning seed", seed, epoch)
                break
            score = run.score()
            row = ManifestRow(seed, epoch, score, time.perf_counter() - t0)
            manifest.append(row)
            log.info("seed %d epoch %d loss %.4f dev micro-F1 %.4f", seed, epoch, loss, score)
            if best_row is None or selection_key(row) > selection_key(best_row):
                best_row = row
                best_state = {k: v.detach().clone() for k, v in run.state_dict().items()}
    if best_row is None:
        raise TrainingError("every seed failed; see manifest")
    return SelectionResult(best_state, best_row, manifest)


@dataclass
class Checkpoint:
    kind: str
    config: dict
    state: dict
    seed: int
    epoch: int
    dev_score: float
    label_map: dict = field(default_factory=lambda: {str(k): v.value for k, v in INDEX_TO_LABEL.items()})
    tokenizer: Any = None

    def save(self, out_dir) -> Path:
        """Write config.json, weights.pt, devscore.txt (+ tokenizer/) atomically."""
        out_dir = Path(out_dir)
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
        try:
            meta = {
                "kind": self.kind,
                "config": self.config,
                "seed": self.seed,
                "epoch": self.epoch,
                "dev_score": self.dev_score,
                "label_map": self.label_map,
            }
            (tmp / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            torch.save(self.state, tmp / "weights.pt")
            (tmp / "devscore.txt").write_text(f"{self.dev_score!r}\n", encoding="utf-8")
            if self.tokenizer is not None:
                self.tokenizer.save_pretrained(tmp / "tokenizer")
            if out_dir.exists():
                shutil.rmtree(out_dir)
            os.replace(tmp, out_dir)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return out_dir

    @classmethod
    def load(cls, path, expected_kind: Optional[str] = None) -> "Checkpoint":
        path = Path(path)
        try:
            meta = json.loads((path / "config.json").read_text(encoding="utf-8"))
            state = torch.load(path / "weights.pt", map_location="cpu", weights_only=True)
        except (OSError, ValueError, RuntimeError) as exc:
            raise TrainingError(f"cannot load checkpoint {path}: {exc}") from exc
        if expected_kind and meta["kind"] != expected_kind:
            raise TrainingError(f"checkpoint {path} is a {meta['kind']!r} model, expected {expected_kind!r}")
        tokenizer = None
        if (path / "tokenizer").is_dir():
            from transformers import AutoTokenizer

            tokenizer = AutoTokenizer.from_pretrained(path / "tokenizer")
        return cls(meta["kind"], meta["config"], state, meta["seed"], meta["epoch"], meta["dev_score"],
                   meta["label_map"], tokenizer)
