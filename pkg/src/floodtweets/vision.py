"""Convolutional backbones, image features, early fusion and the image runs.

``scene_finetune`` fine-tunes one scene-pretrained backbone end to end;
``fused_head`` trains a 2-way head on concatenated object + scene features
from two frozen backbones.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import pickle
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .data import INDEX_TO_LABEL, DatasetSplit, Label
from .errors import ConfigError, DataError, TrainingError
from .protocol import Checkpoint, SelectionResult, TrainingProtocol, train_seeds
from .smote import LabeledFeatureSet, SmoteConfig, duplicate_indices, oversample
from .text import batch_order, check_trainable, dev_micro_f1

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# architecture -> (feature width, canonical input side)
ARCHITECTURES = {
    "vgg16": (4096, 224),
    "vgg19": (4096, 224),
    "resnet152": (2048, 224),
    "tiny_vgg": (64, 32),
    "tiny_resnet": (32, 32),
}
CORPORA = ("object", "scene")
MODES = ("scene_finetune", "fused_head")


@dataclass(frozen=True)
class BackboneSpec:
    """A pretrained convolutional network cut at its last fully connected feature layer.

    ``weights`` is a torch state_dict file for the full network (its original
    classifier included). Without it the network is randomly initialised from
    ``init_seed``, which keeps the pipeline runnable offline.
    """

    architecture: str = "vgg16"
    pretrain_corpus: str = "scene"
    weights: Optional[str] = None
    init_seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; expected one of {sorted(ARCHITECTURES)}")
        if self.pretrain_corpus not in CORPORA:
            raise ConfigError(f"pretrain_corpus must be one of {CORPORA}, got {self.pretrain_corpus!r}")

    @property
    def feature_dim(self) -> int:
        return ARCHITECTURES[self.architecture][0]

    @property
    def input_size(self) -> int:
        return ARCHITECTURES[self.architecture][1]

    @property
    def feature_layer(self) -> str:
        if self.architecture.endswith("resnet") or self.architecture.startswith("resnet"):
            return "avgpool"
        return "classifier.4"  # ReLU after the second 4096-wide FC layer

    def to_dict(self) -> dict:
        return asdict(self)


class TinyVGG(nn.Module):
    """VGG-shaped stand-in: conv features, avgpool, FC-ReLU-Dropout-FC-ReLU-Dropout-FC."""

    def __init__(self, num_classes: int = 1000, width: int = 64):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2),
        )
        self.avgpool = nn.AdaptiveAvgPool2d((2, 2))
        self.classifier = nn.Sequential(
            nn.Linear(64, width), nn.ReLU(True), nn.Dropout(),
            nn.Linear(width, width), nn.ReLU(True), nn.Dropout(),
            nn.Linear(width, num_classes),
        )
        # He init keeps random-weight features at O(1) scale
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)


class TinyResNet(nn.Module):
    def __init__(self, num_classes: int = 1000, width: int = 32):
        from torchvision.models.resnet import BasicBlock

        super().__init__()
        down = nn.Sequential(nn.Conv2d(16, width, 1, stride=2, bias=False), nn.BatchNorm2d(width))
        self.body = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1, bias=False), nn.BatchNorm2d(16), nn.ReLU(inplace=True),
            BasicBlock(16, 16), BasicBlock(16, width, stride=2, downsample=down),
        )
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(width, num_classes)

    def forward(self, x):
        return self.fc(torch.flatten(self.avgpool(self.body(x)), 1))


def _build_network(architecture: str, num_classes: int) -> nn.Module:
    from torchvision import models

    if architecture == "vgg16":
        return models.vgg16(weights=None, num_classes=num_classes)
    if architecture == "vgg19":
        return models.vgg19(weights=None, num_classes=num_classes)
    if architecture == "resnet152":
        return models.resnet152(weights=None, num_classes=num_classes)
    if architecture == "tiny_vgg":
        return TinyVGG(num_classes)
    return TinyResNet(num_classes)


def _classifier_width(state: dict) -> int:
    for key in ("classifier.6.weight", "fc.weight"):
        if key in state:
            return state[key].shape[0]
    raise TrainingError("weights file lacks the original classifier layer")


class FeatureExtractor(nn.Module):
    """Backbone truncated at its feature layer; output shape (batch, feature_dim)."""

    def __init__(self, net: nn.Module, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        if hasattr(net, "classifier"):
            self.body = nn.Sequential(net.features, net.avgpool, nn.Flatten(1), *list(net.classifier)[:5])
        else:
            net.fc = nn.Identity()
            self.body = net

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def load_backbone(spec: BackboneSpec) -> FeatureExtractor:
    """Build the feature extractor; weight problems surface here, before any inference."""
    if spec.weights:
        try:
            state = torch.load(spec.weights, map_location="cpu", weights_only=True)
            if not isinstance(state, dict):
                raise TypeError("not a state_dict")
            net = _build_network(spec.architecture, _classifier_width(state))
            net.load_state_dict(state)
        except (OSError, RuntimeError, TypeError, ValueError, EOFError, pickle.UnpicklingError) as exc:
            raise TrainingError(f"cannot load {spec.architecture} weights from {spec.weights}: {exc}") from exc
    else:
        log.debug("no weights for %s/%s; random init from seed %d",
                  spec.architecture, spec.pretrain_corpus, spec.init_seed)
        with torch.random.fork_rng():
            torch.manual_seed(2 * spec.init_seed + CORPORA.index(spec.pretrain_corpus))
            net = _build_network(spec.architecture, 1000)
    return FeatureExtractor(net, spec).eval()


@functools.lru_cache(maxsize=4)
def _cached_backbone(spec: BackboneSpec) -> FeatureExtractor:
    return load_backbone(spec)


def preprocess_image(path, size: int = 224) -> torch.Tensor:
    """Decode, convert to RGB (grey replicated), resize to ``size`` square, normalise."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    x = torch.from_numpy(np.asarray(im, dtype=np.float32) / 255.0).permute(2, 0, 1)
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


def load_images(paths: Sequence[str], size: int) -> torch.Tensor:
    if not paths:
        return torch.empty((0, 3, size, size))
    return torch.stack([preprocess_image(p, size) for p in paths])


@torch.no_grad()
def extract_batch(backbone: FeatureExtractor, images: torch.Tensor, batch_size: int = 16) -> np.ndarray:
    backbone.eval()
    out = [backbone(images[s: s + batch_size]).numpy() for s in range(0, len(images), batch_size)]
    if not out:
        return np.empty((0, backbone.spec.feature_dim), dtype=np.float32)
    return np.concatenate(out).astype(np.float32)


def extract_features(image: torch.Tensor, spec: BackboneSpec) -> np.ndarray:
    """Feature vector of one preprocessed image (3 x H x W)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected a 3 x H x W image tensor, got shape {tuple(image.shape)}")
    return extract_batch(_cached_backbone(spec), image.unsqueeze(0))[0]


@dataclass(frozen=True)
class FusedFeature:
    vector: np.ndarray
    object_span: tuple[int, int]
    scene_span: tuple[int, int]


def fuse_early(obj, scene) -> FusedFeature:
    """Concatenate object-level then scene-level features."""
    obj = np.asarray(obj, dtype=np.float32).reshape(-1)
    scene = np.asarray(scene, dtype=np.float32).reshape(-1)
    if not (np.all(np.isfinite(obj)) and np.all(np.isfinite(scene))):
        raise DataError("cannot fuse non-finite features")
    n = len(obj)
    return FusedFeature(np.concatenate([obj, scene]), (0, n), (n, n + len(scene)))


def fused_matrix(obj: np.ndarray, scene: np.ndarray) -> np.ndarray:
    if len(obj) != len(scene):
        raise DataError("object and scene feature rows disagree")
    return np.concatenate([obj, scene], axis=1).astype(np.float32)


def state_fingerprint(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ClassifierHead(nn.Sequential):
    def __init__(self, dim: int, dropout: float = 0.5):
        super().__init__(nn.Dropout(dropout), nn.Linear(dim, 2))


class ImageClassifier(nn.Module):
    def __init__(self, backbone: FeatureExtractor):
        super().__init__()
        self.backbone = backbone
        self.head = ClassifierHead(backbone.spec.feature_dim)

    def forward(self, x):
        return self.head(self.backbone(x))


def _drop_imageless(ds: DatasetSplit, name: str) -> DatasetSplit:
    kept = ds.with_images()
    if len(kept) < len(ds):
        log.info("%s: excluded %d record(s) without an image", name, len(ds) - len(kept))
    return kept


def _labels(ds: DatasetSplit) -> np.ndarray:
    return np.array([r.label.index for r in ds.records], dtype=np.int64)


def _log_counts(labels: np.ndarray, prefix: str) -> dict[str, int]:
    counts = {lab.value: int(np.sum(labels == lab.index)) for lab in Label}
    log.info("%s effective counts: %d relevant / %d not_relevant",
             prefix, counts["relevant"], counts["not_relevant"])
    return counts


class _HeadSeedRun:
    def __init__(self, seed, cfg, x_tr, y_tr, x_dev, y_dev):
        self.head = ClassifierHead(x_tr.shape[1])
        self.opt = torch.optim.Adam(self.head.parameters(), lr=cfg.head_learning_rate)
        self.gen = torch.Generator().manual_seed(seed)
        self.cfg = cfg
        self.x_tr, self.y_tr, self.x_dev, self.y_dev = x_tr, y_tr, x_dev, y_dev

    def fit_epoch(self, epoch):
        self.head.train()
        total = 0.0
        for idx in batch_order(len(self.x_tr), self.cfg.batch_size, self.gen):
            loss = F.cross_entropy(self.head(self.x_tr[idx]), self.y_tr[idx])
            if not torch.isfinite(loss):
                return float("nan")
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            total += loss.item() * len(idx)
        return total / len(self.x_tr)

    @torch.no_grad()
    def score(self):
        self.head.eval()
        return dev_micro_f1(self.head(self.x_dev).argmax(1).tolist(), self.y_dev.tolist())

    def state_dict(self):
        return self.head.state_dict()


class _FinetuneSeedRun:
    def __init__(self, seed, cfg, spec, x_tr, y_tr, flip, x_dev, y_dev):
        self.model = ImageClassifier(load_backbone(spec))
        self.opt = torch.optim.Adam([
            {"params": self.model.backbone.parameters(), "lr": cfg.learning_rate},
            {"params": self.model.head.parameters(), "lr": cfg.head_learning_rate},
        ])
        self.gen = torch.Generator().manual_seed(seed)
        self.cfg = cfg
        self.x_tr, self.y_tr, self.flip, self.x_dev, self.y_dev = x_tr, y_tr, flip, x_dev, y_dev

    def fit_epoch(self, epoch):
        self.model.train()
        total = 0.0
        for idx in batch_order(len(self.x_tr), self.cfg.batch_size, self.gen):
            x = self.x_tr[idx]
            # duplicated minority rows are augmented with a horizontal flip
            f = self.flip[idx]
            if f.any():
                x = x.clone()
                x[f] = torch.flip(x[f], dims=[3])
            loss = F.cross_entropy(self.model(x), self.y_tr[idx])
            if not torch.isfinite(loss):
                return float("nan")
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            total += loss.item() * len(idx)
        return total / len(self.x_tr)

    @torch.no_grad()
    def score(self):
        self.model.eval()
        preds = torch.cat([self.model(self.x_dev[s: s + 32]).argmax(1) for s in range(0, len(self.x_dev), 32)])
        return dev_micro_f1(preds.tolist(), self.y_dev.tolist())

    def state_dict(self):
        return self.model.state_dict()


@dataclass
class ImageTrainingInfo:
    n_excluded: int
    effective_counts: dict[str, int]
    backbone_fingerprints: dict[str, tuple[str, str]]


def default_specs(architecture: str = "vgg16", init_seed: int = 0,
                  object_weights: Optional[str] = None,
                  scene_weights: Optional[str] = None) -> tuple[BackboneSpec, BackboneSpec]:
    return (
        BackboneSpec(architecture, "object", object_weights, init_seed),
        BackboneSpec(architecture, "scene", scene_weights, init_seed),
    )


def train_image_classifier(train: DatasetSplit, dev: DatasetSplit, mode: str,
                           cfg: TrainingProtocol = TrainingProtocol(),
                           smote: Optional[SmoteConfig] = None,
                           object_spec: Optional[BackboneSpec] = None,
                           scene_spec: Optional[BackboneSpec] = None,
                           finetune_corpus: str = "scene",
                           ) -> tuple[Checkpoint, SelectionResult, ImageTrainingInfo]:
    """Run 3 (``scene_finetune``) or run 4 (``fused_head``) under the seed protocol.

    ``finetune_corpus="object"`` swaps in the object-level backbone for the
    scene_finetune ablation.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    default_obj, default_scene = default_specs()
    object_spec = object_spec or default_obj
    scene_spec = scene_spec or default_scene
    n_before = len(train) + len(dev)
    train, dev = _drop_imageless(train, "train"), _drop_imageless(dev, "dev")
    check_trainable(train, dev)
    n_excluded = n_before - len(train) - len(dev)
    y_tr, y_dev = _labels(train), _labels(dev)

    if mode == "fused_head":
        obj_bb, scene_bb = load_backbone(object_spec), load_backbone(scene_spec)
        for bb in (obj_bb, scene_bb):
            bb.requires_grad_(False)
        before = {"object": state_fingerprint(obj_bb), "scene": state_fingerprint(scene_bb)}

        def features(ds):
            return fused_matrix(
                extract_batch(obj_bb, load_images([r.image_path for r in ds], object_spec.input_size)),
                extract_batch(scene_bb, load_images([r.image_path for r in ds], scene_spec.input_size)),
            )

        x_tr, x_dev = features(train), features(dev)
        if smote is not None:
            fs = oversample(LabeledFeatureSet(x_tr, y_tr), smote)
            x_tr, y_tr = fs.vectors, fs.labels
        counts = _log_counts(y_tr, "fused_head")
        xt, yt = torch.from_numpy(x_tr), torch.from_numpy(y_tr)
        xd, yd = torch.from_numpy(x_dev), torch.from_numpy(y_dev)
        result = train_seeds(cfg, lambda seed: _HeadSeedRun(seed, cfg, xt, yt, xd, yd))
        after = {"object": state_fingerprint(obj_bb), "scene": state_fingerprint(scene_bb)}
        fingerprints = {k: (before[k], after[k]) for k in before}
        config = {"mode": mode, "object_spec": object_spec.to_dict(), "scene_spec": scene_spec.to_dict()}
    else:
        if finetune_corpus not in CORPORA:
            raise ConfigError(f"finetune_corpus must be one of {CORPORA}, got {finetune_corpus!r}")
        spec = scene_spec if finetune_corpus == "scene" else object_spec
        order = list(range(len(y_tr)))
        if smote is not None:
            if smote.strategy == "smote_features":
                log.info("scene_finetune trains end to end; using duplicate resampling instead of feature SMOTE")
            order = duplicate_indices(y_tr, smote)
        flip = torch.tensor([i >= len(y_tr) for i in range(len(order))])
        x_all = load_images([r.image_path for r in train], spec.input_size)
        xt, yt = x_all[order], torch.from_numpy(y_tr[order])
        counts = _log_counts(y_tr[order], "scene_finetune")
        xd = load_images([r.image_path for r in dev], spec.input_size)
        yd = torch.from_numpy(y_dev)
        result = train_seeds(cfg, lambda seed: _FinetuneSeedRun(seed, cfg, spec, xt, yt, flip, xd, yd))
        fingerprints = {}
        config = {"mode": mode, "spec": spec.to_dict()}

    config["protocol"] = cfg.to_dict()
    config["smote"] = None if smote is None else asdict(smote)
    ckpt = Checkpoint(
        kind=f"image_{mode}",
        config=config,
        state=result.state,
        seed=result.best.seed,
        epoch=result.best.epoch,
        dev_score=result.best.dev_micro_f1,
    )
    return ckpt, result, ImageTrainingInfo(n_excluded, counts, fingerprints)


def load_image_model(ckpt: Checkpoint):
    """Rebuild (model, input sizes) from an image checkpoint."""
    if ckpt.kind == "image_fused_head":
        obj = BackboneSpec(**ckpt.config["object_spec"])
        scene = BackboneSpec(**ckpt.config["scene_spec"])
        head = ClassifierHead(obj.feature_dim + scene.feature_dim)
        head.load_state_dict(ckpt.state)
        return (load_backbone(obj), load_backbone(scene), head.eval())
    if ckpt.kind == "image_scene_finetune":
        spec = BackboneSpec(**ckpt.config["spec"])
        model = ImageClassifier(load_backbone(replace(spec, weights=None)))
        try:
            model.load_state_dict(ckpt.state)
        except RuntimeError as exc:
            raise TrainingError(f"checkpoint weights do not match its config: {exc}") from exc
        return (model.eval(),)
    raise TrainingError(f"not an image checkpoint: {ckpt.kind!r}")


@torch.no_grad()
def predict_images(paths: Sequence[Optional[str]], ckpt: Checkpoint) -> list[Optional[tuple[Label, float]]]:
    """Label/confidence per image path; ``None`` where the record has no image."""
    parts = load_image_model(ckpt)
    have = [i for i, p in enumerate(paths) if p]
    out: list[Optional[tuple[Label, float]]] = [None] * len(paths)
    if not have:
        return out
    chosen = [paths[i] for i in have]
    if ckpt.kind == "image_fused_head":
        obj_bb, scene_bb, head = parts
        x = fused_matrix(extract_batch(obj_bb, load_images(chosen, obj_bb.spec.input_size)),
                         extract_batch(scene_bb, load_images(chosen, scene_bb.spec.input_size)))
        logits = head(torch.from_numpy(x))
    else:
        (model,) = parts
        images = load_images(chosen, model.backbone.spec.input_size)
        logits = torch.cat([model(images[s: s + 32]) for s in range(0, len(images), 32)])
    conf, idx = F.softmax(logits, dim=-1).max(dim=1)
    for i, c, k in zip(have, conf.tolist(), idx.tolist()):
        out[i] = (INDEX_TO_LABEL[k], float(c))
    return out
