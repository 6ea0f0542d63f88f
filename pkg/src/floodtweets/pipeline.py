"""Orchestrates one of the four runs end to end from a RunConfig."""

from __future__ import annotations

import contextlib
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig
from .data import DatasetSplit, TweetRecord, load_dataset, write_dataset
from .errors import FloodTweetsError, TrainingError
from .metrics import EvaluationReport, evaluate
from .preprocess import clean
from .protocol import Checkpoint, write_manifest

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@contextlib.contextmanager
def run_log(path: Path):
    """Mirror package logging into ``path`` for the duration of a run."""
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger("floodtweets")
    old_level = root.level
    root.addHandler(handler)
    if root.getEffectiveLevel() > logging.INFO:
        root.setLevel(logging.INFO)
    try:
        yield
    finally:
        root.removeHandler(handler)
        root.setLevel(old_level)
        handler.close()


@contextlib.contextmanager
def stage(name: str):
    log.info("stage %s: start", name)
    try:
        yield
    except FloodTweetsError as exc:
        raise type(exc)(f"stage {name}: {exc}") from exc
    except Exception as exc:
        raise TrainingError(f"stage {name}: {type(exc).__name__}: {exc}") from exc
    log.info("stage %s: done", name)


def predict_records(records: Sequence[TweetRecord], ckpt: Checkpoint):
    """Dispatch on checkpoint kind; ``None`` marks records the model cannot score."""
    if ckpt.kind == "text":
        from .text import predict_text

        strip = ckpt.config.get("strip_mentions", True)
        return predict_text([clean(r.text, strip) for r in records], ckpt)
    if ckpt.kind.startswith("image_"):
        from .vision import predict_images

        return predict_images([r.image_path for r in records], ckpt)
    if ckpt.kind == "multimodal":
        from .multimodal import predict_multimodal

        return predict_multimodal(records, ckpt)
    raise TrainingError(f"unknown checkpoint kind {ckpt.kind!r}")


def write_predictions(path: Path, records: Sequence[TweetRecord], preds) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r, p in zip(records, preds):
            row = {"tweet_id": r.tweet_id, "label": None, "confidence": None}
            if p is not None:
                row.update(label=p[0].value, confidence=round(p[1], 6))
            fh.write(json.dumps(row) + "\n")
    return path


def _train(cfg: RunConfig, train: DatasetSplit, dev: DatasetSplit):
    run_id, protocol = cfg.run_id, cfg.protocol
    if run_id == "run2_text":
        from .text import load_encoder, train_text_classifier

        strip = cfg["text.strip_mentions"]
        handle = load_encoder(cfg["text.encoder"], [clean(r.text, strip) for r in train])
        return train_text_classifier(train, dev, handle, protocol, strip)
    if run_id in ("run3_scene", "run4_fused"):
        from .vision import train_image_classifier

        obj, scene = cfg.backbone_specs()
        mode = "scene_finetune" if run_id == "run3_scene" else "fused_head"
        ckpt, result, _ = train_image_classifier(train, dev, mode, protocol, cfg.smote, obj, scene,
                                                 cfg["image.finetune_corpus"])
        return ckpt, result
    from .multimodal import train_multimodal
    from .text import load_encoder

    setup = cfg.multimodal_setup
    handle = load_encoder(cfg["text.encoder"], [clean(r.text, setup.strip_mentions) for r in train])
    return train_multimodal(train, dev, handle, protocol, setup)


def run_experiment(cfg: RunConfig, out_dir: Optional[Path] = None) -> EvaluationReport:
    """preprocess -> train (features/oversampling inside) -> evaluate on dev.

    Writes config.resolved, preprocessed/, checkpoint/, manifest.csv,
    dev_predictions.jsonl, report.json and run.log under the output directory.
    Artifacts written before a failing stage are left in place.
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with run_log(out / "run.log"):
        (out / "config.resolved").write_text(cfg.to_text(), encoding="utf-8")
        log.info("run %s -> %s", cfg.run_id, out)
        fmt = None if cfg["data.format"] == "auto" else cfg["data.format"]
        with stage("load"):
            train = load_dataset(cfg["data.train"], fmt)
            dev = load_dataset(cfg["data.dev"], fmt)
            log.info("train %d records %s; dev %d records %s", len(train),
                     {k.value: v for k, v in train.class_counts.items()}, len(dev),
                     {k.value: v for k, v in dev.class_counts.items()})
        with stage("preprocess"):
            strip = cfg["text.strip_mentions"]
            for name, ds in (("train", train), ("dev", dev)):
                extra = {r.tweet_id: {"clean_text": clean(r.text, strip)} for r in ds}
                write_dataset(ds, out / "preprocessed" / f"{name}.jsonl", "jsonl", extra)
        with stage("train"):
            ckpt, result = _train(cfg, train, dev)
            write_manifest(out / "manifest.csv", result.manifest)
            ckpt.save(out / "checkpoint")
            log.info("selected seed %d epoch %d (dev micro-F1 %.4f)", ckpt.seed, ckpt.epoch, ckpt.dev_score)
        with stage("evaluate"):
            preds = predict_records(dev.records, ckpt)
            write_predictions(out / "dev_predictions.jsonl", dev.records, preds)
            report = evaluate(cfg.run_id, [None if p is None else p[0] for p in preds], dev.labels)
            report.save(out / "report.json")
            log.info("dev micro-F1 %.4f (%d evaluated, %d skipped)",
                     report.micro_f1, report.n_evaluated, report.n_skipped)
    return report
