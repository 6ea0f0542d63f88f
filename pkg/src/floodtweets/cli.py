"""Command-line entry point. Exit codes: 0 ok, 2 config, 3 data, 4 training."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .errors import ConfigError, FloodTweetsError

log = logging.getLogger("floodtweets")


def _seed_list(n: int) -> tuple[int, ...]:
    if n < 1:
        raise ConfigError("--seeds must be >= 1")
    return tuple(range(n))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose):
    """Flood-related tweet classification toolkit."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@cli.command("gen-synthetic")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--n-relevant", default=32, show_default=True)
@click.option("--n-irrelevant", default=32, show_default=True)
@click.option("--dev-relevant", default=16, show_default=True)
@click.option("--dev-irrelevant", default=16, show_default=True)
@click.option("--text-sep", default=1.0, show_default=True, help="Vocabulary separability in [0, 1].")
@click.option("--image-sep", default=1.0, show_default=True, help="Image blob separability in [0, 1].")
@click.option("--seed", default=0, show_default=True)
def gen_synthetic(out_dir, n_relevant, n_irrelevant, dev_relevant, dev_irrelevant, text_sep, image_sep, seed):
    """Write train.jsonl, dev.jsonl and images/ for a synthetic corpus."""
    from .data import Split, SyntheticCorpusSpec, generate_synthetic_corpus

    for split, nr, ni in ((Split.TRAIN, n_relevant, n_irrelevant), (Split.DEV, dev_relevant, dev_irrelevant)):
        try:
            spec = SyntheticCorpusSpec(nr, ni, text_sep, image_sep, seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        ds = generate_synthetic_corpus(spec, out_dir, split)
        click.echo(f"{split.value}: {len(ds)} records -> {Path(out_dir) / (split.value + '.jsonl')}")


@cli.command()
@click.option("--in", "in_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--keep-mentions", is_flag=True, help="Do not strip @-mentions.")
def preprocess(in_path, out_path, keep_mentions):
    """Add a clean_text field to every record."""
    from .data import load_dataset, write_dataset
    from .preprocess import clean_batch

    ds = load_dataset(in_path, check_images=False)
    extra = {tid: {"clean_text": text} for tid, text in clean_batch(ds.records, not keep_mentions)}
    write_dataset(ds, out_path, "jsonl", extra)
    click.echo(f"{len(ds)} records -> {out_path}")


@cli.command("extract-features")
@click.option("--corpus", type=click.Choice(["object", "scene"]), required=True)
@click.option("--in", "in_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--arch", default="vgg16", show_default=True)
@click.option("--weights", default=None, help="state_dict file of the pretrained network.")
@click.option("--init-seed", default=0, show_default=True)
def extract_features_cmd(corpus, in_path, out_path, arch, weights, init_seed):
    """Backbone features for every record with an image (binary, or CSV by extension)."""
    from .data import load_dataset
    from .smote import LabeledFeatureSet, write_features
    from .vision import BackboneSpec, extract_batch, load_backbone, load_images

    spec = BackboneSpec(arch, corpus, weights, init_seed)
    backbone = load_backbone(spec)
    ds = load_dataset(in_path).with_images()
    feats = extract_batch(backbone, load_images([r.image_path for r in ds], spec.input_size))
    labels = [-1 if r.label is None else r.label.index for r in ds]
    write_features(out_path, LabeledFeatureSet(feats.reshape(len(ds), spec.feature_dim), labels))
    click.echo(f"{len(ds)} x {spec.feature_dim} features -> {out_path}")


@cli.command()
@click.option("--features", required=True, type=click.Path(dir_okay=False))
@click.option("--factor", default=3, show_default=True)
@click.option("--k", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def oversample(features, factor, k, seed, out_path):
    """SMOTE-inflate the minority class of a feature file."""
    from .smote import SmoteConfig, oversample as smote, read_features, write_features

    fs = read_features(features)
    out = smote(fs, SmoteConfig(k_neighbors=k, inflation_factor=factor, rng_seed=seed))
    write_features(out_path, out)
    click.echo(f"{fs.counts()} -> {out.counts()} -> {out_path}")


def _protocol(lr, epochs, seeds, batch_size, max_len=128, head_lr=1e-4):
    from .protocol import TrainingProtocol

    return TrainingProtocol(learning_rate=lr, epochs=epochs, seeds=_seed_list(seeds), batch_size=batch_size,
                            max_sequence_length=max_len, head_learning_rate=head_lr)


def _finish(ckpt, result, out):
    from .protocol import write_manifest

    ckpt.save(out)
    write_manifest(Path(out) / "manifest.csv", result.manifest)
    click.echo(f"best seed {ckpt.seed} epoch {ckpt.epoch}: dev micro-F1 {ckpt.dev_score:.4f} -> {out}")


@cli.command("train-text")
@click.option("--train", "train_path", required=True, type=click.Path(dir_okay=False))
@click.option("--dev", "dev_path", required=True, type=click.Path(dir_okay=False))
@click.option("--encoder", default="dbmdz/bert-base-italian-uncased", show_default=True,
              help="Hub id, local directory, or tiny-random[:opts].")
@click.option("--lr", default=1e-5, show_default=True)
@click.option("--epochs", default=10, show_default=True)
@click.option("--seeds", default=10, show_default=True, help="Number of seeds (0..N-1).")
@click.option("--batch-size", default=32, show_default=True)
@click.option("--max-len", default=128, show_default=True)
@click.option("--keep-mentions", is_flag=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def train_text(train_path, dev_path, encoder, lr, epochs, seeds, batch_size, max_len, keep_mentions, out):
    """Run 2: fine-tune a transformer on cleaned tweet text."""
    from .data import load_dataset
    from .preprocess import clean
    from .text import load_encoder, train_text_classifier

    train, dev = load_dataset(train_path, check_images=False), load_dataset(dev_path, check_images=False)
    handle = load_encoder(encoder, [clean(r.text, not keep_mentions) for r in train])
    cfg = _protocol(lr, epochs, seeds, batch_size, max_len)
    _finish(*train_text_classifier(train, dev, handle, cfg, not keep_mentions), out)


@cli.command("train-image")
@click.option("--mode", type=click.Choice(["scene", "fused"]), required=True)
@click.option("--train", "train_path", required=True, type=click.Path(dir_okay=False))
@click.option("--dev", "dev_path", required=True, type=click.Path(dir_okay=False))
@click.option("--arch", default="vgg16", show_default=True)
@click.option("--object-weights", default=None)
@click.option("--scene-weights", default=None)
@click.option("--init-seed", default=0, show_default=True)
@click.option("--finetune-corpus", type=click.Choice(["scene", "object"]), default="scene", show_default=True)
@click.option("--lr", default=1e-5, show_default=True, help="Backbone learning rate (scene mode).")
@click.option("--head-lr", default=1e-4, show_default=True)
@click.option("--epochs", default=10, show_default=True)
@click.option("--seeds", default=10, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--smote/--no-smote", default=True, show_default=True)
@click.option("--factor", default=3, show_default=True)
@click.option("--k", default=5, show_default=True)
@click.option("--smote-seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def train_image(mode, train_path, dev_path, arch, object_weights, scene_weights, init_seed, finetune_corpus,
                lr, head_lr, epochs, seeds, batch_size, smote, factor, k, smote_seed, out):
    """Runs 3 and 4: scene-backbone fine-tuning or fused-feature head."""
    from .data import load_dataset
    from .smote import SmoteConfig
    from .vision import default_specs, train_image_classifier

    train, dev = load_dataset(train_path), load_dataset(dev_path)
    obj, scene = default_specs(arch, init_seed, object_weights, scene_weights)
    smote_cfg = SmoteConfig(k, factor, smote_seed) if smote else None
    cfg = _protocol(lr, epochs, seeds, batch_size, head_lr=head_lr)
    full_mode = "scene_finetune" if mode == "scene" else "fused_head"
    ckpt, result, _ = train_image_classifier(train, dev, full_mode, cfg, smote_cfg, obj, scene, finetune_corpus)
    _finish(ckpt, result, out)


@cli.command("train-mm")
@click.option("--train", "train_path", required=True, type=click.Path(dir_okay=False))
@click.option("--dev", "dev_path", required=True, type=click.Path(dir_okay=False))
@click.option("--encoder", default="dbmdz/bert-base-italian-uncased", show_default=True)
@click.option("--image-mode", type=click.Choice(["dualvgg", "resnet"]), default="dualvgg", show_default=True)
@click.option("--n-image-tokens", default=1, show_default=True)
@click.option("--arch", default="vgg16", show_default=True, help="VGG architecture for dualvgg mode.")
@click.option("--object-weights", default=None)
@click.option("--scene-weights", default=None)
@click.option("--residual-arch", default="resnet152", show_default=True)
@click.option("--residual-weights", default=None)
@click.option("--init-seed", default=0, show_default=True)
@click.option("--lr", default=1e-5, show_default=True)
@click.option("--epochs", default=10, show_default=True)
@click.option("--seeds", default=10, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--max-len", default=128, show_default=True)
@click.option("--keep-mentions", is_flag=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def train_mm(train_path, dev_path, encoder, image_mode, n_image_tokens, arch, object_weights, scene_weights,
             residual_arch, residual_weights, init_seed, lr, epochs, seeds, batch_size, max_len, keep_mentions, out):
    """Run 1: multimodal bitransformer over text tokens and image tokens."""
    from .data import load_dataset
    from .multimodal import MultimodalSetup, train_multimodal
    from .preprocess import clean
    from .text import load_encoder
    from .vision import BackboneSpec, default_specs

    train, dev = load_dataset(train_path), load_dataset(dev_path)
    obj, scene = default_specs(arch, init_seed, object_weights, scene_weights)
    setup = MultimodalSetup(
        "dual_vgg_features" if image_mode == "dualvgg" else "residual_backbone", n_image_tokens, obj, scene,
        BackboneSpec(residual_arch, "object", residual_weights, init_seed), not keep_mentions,
    )
    handle = load_encoder(encoder, [clean(r.text, not keep_mentions) for r in train])
    _finish(*train_multimodal(train, dev, handle, _protocol(lr, epochs, seeds, batch_size, max_len), setup), out)


@cli.command()
@click.option("--model", "model_dir", required=True, type=click.Path(file_okay=False))
@click.option("--in", "in_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def predict(model_dir, in_path, out_path):
    """Write {"tweet_id", "label", "confidence"} per input record."""
    from .data import load_dataset
    from .pipeline import predict_records, write_predictions
    from .protocol import Checkpoint

    ckpt = Checkpoint.load(model_dir)
    ds = load_dataset(in_path)
    write_predictions(Path(out_path), ds.records, predict_records(ds.records, ckpt))
    click.echo(f"{len(ds)} predictions -> {out_path}")


@cli.command("evaluate")
@click.option("--pred", "pred_path", required=True, type=click.Path(dir_okay=False))
@click.option("--gold", "gold_path", required=True, type=click.Path(dir_okay=False))
@click.option("--run-id", required=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def evaluate_cmd(pred_path, gold_path, run_id, out_path):
    """Score a predictions file against a labeled dataset."""
    from .data import load_dataset
    from .errors import DataError
    from .metrics import evaluate

    gold = load_dataset(gold_path, check_images=False)
    preds = {}
    with open(pred_path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if line.strip():
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{pred_path} row {i}: invalid JSON ({exc.msg})") from exc
                if "tweet_id" not in row:
                    raise DataError(f"{pred_path} row {i}: missing field 'tweet_id'")
                preds[str(row["tweet_id"])] = row.get("label")
    report = evaluate(run_id, [preds.get(r.tweet_id) for r in gold], gold.labels)
    report.save(out_path)
    click.echo(f"{run_id}: micro-F1 {report.micro_f1:.3f} ({report.n_evaluated} evaluated, "
               f"{report.n_skipped} skipped) -> {out_path}")


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--out-dir", default=None, type=click.Path(file_okay=False), help="Override output_dir.")
def run(config_path, out_dir):
    """Full pipeline for one run from a config file."""
    from .config import validate_config
    from .pipeline import run_experiment

    cfg = validate_config(config_path)
    report = run_experiment(cfg, Path(out_dir) if out_dir else None)
    click.echo(f"{report.run_id}: dev micro-F1 {report.micro_f1:.3f}")


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="floodtweets", standalone_mode=False)
    except FloodTweetsError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
