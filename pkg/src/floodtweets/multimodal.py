"""Multimodal bitransformer: projected image features become encoder tokens.

Sequence layout per record::

    [CLS] img_1 .. img_k  text tokens  [SEP]  <pad>

Image tokens carry segment id 1, everything else segment id 0. The class
scores come from the pooled [CLS] state through a 2-way head.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import INDEX_TO_LABEL, DatasetSplit, Label, TweetRecord
from .errors import ConfigError, DataError, TrainingError
from .preprocess import clean
from .protocol import Checkpoint, SelectionResult, TrainingProtocol, train_seeds
from .text import (EncoderHandle, batch_order, check_trainable, dev_micro_f1, encode_texts,
                   handle_from_checkpoint, labels_tensor, pad_batch, pooled)
from .vision import (BackboneSpec, FeatureExtractor, default_specs, extract_batch, fuse_early,
                     fused_matrix, load_backbone, load_images)

log = logging.getLogger(__name__)

IMAGE_MODES = ("dual_vgg_features", "residual_backbone")


@dataclass
class MultimodalBatch:
    token_ids: list[list[int]]
    has_image: torch.Tensor
    image_features: Optional[torch.Tensor] = None
    images: Optional[torch.Tensor] = None
    labels: Optional[torch.Tensor] = None
    record_ids: Optional[list[str]] = None

    def __len__(self) -> int:
        return len(self.token_ids)


class ImageTokenProjection(nn.Module):
    """Maps one image feature vector to ``n_tokens`` embeddings of the encoder width."""

    def __init__(self, input_dim: int, n_tokens: int, output_dim: int):
        super().__init__()
        if n_tokens < 1:
            raise ConfigError("n_image_tokens must be >= 1")
        self.input_dim, self.n_tokens, self.output_dim = input_dim, n_tokens, output_dim
        self.linear = nn.Linear(input_dim, n_tokens * output_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(x).view(-1, self.n_tokens, self.output_dim)


class MultimodalBitransformer(nn.Module):
    def __init__(self, encoder: nn.Module, hidden_dim: int, image_dim: int, n_image_tokens: int = 1,
                 backbone: Optional[FeatureExtractor] = None, dropout: float = 0.1):
        super().__init__()
        self.encoder = encoder
        self.backbone = backbone
        self.projection = ImageTokenProjection(image_dim, n_image_tokens, hidden_dim)
        self.missing_image = nn.Parameter(torch.randn(n_image_tokens, hidden_dim) * 0.02)
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(hidden_dim, 2)
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    @property
    def n_image_tokens(self) -> int:
        return self.projection.n_tokens

    @property
    def max_positions(self) -> int:
        return self.encoder.config.max_position_embeddings

    def image_tokens(self, batch: MultimodalBatch) -> torch.Tensor:
        if self.backbone is not None:
            if batch.images is None:
                raise DataError("residual_backbone mode needs image tensors in the batch")
            feats = self.backbone(batch.images)
        else:
            if batch.image_features is None:
                raise DataError("batch carries no image features")
            feats = batch.image_features
        tokens = self.projection(feats)
        keep = batch.has_image.view(-1, 1, 1)
        return torch.where(keep, tokens, self.missing_image.unsqueeze(0).expand_as(tokens))

    def encoder_inputs(self, batch: MultimodalBatch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(inputs_embeds, attention_mask, token_type_ids) fed to the encoder."""
        k = self.n_image_tokens
        for i, ids in enumerate(batch.token_ids):
            if len(ids) + k > self.max_positions:
                name = batch.record_ids[i] if batch.record_ids else f"#{i}"
                raise DataError(
                    f"record {name}: {len(ids)} text tokens + {k} image tokens exceed "
                    f"{self.max_positions} encoder positions"
                )
        pad_id = self.encoder.config.pad_token_id or 0
        ids, mask = pad_batch(batch.token_ids, pad_id)
        words = self.encoder.get_input_embeddings()(ids)
        img = self.image_tokens(batch)
        b = len(batch)
        embeds = torch.cat([words[:, :1], img, words[:, 1:]], dim=1)
        attn = torch.cat([mask[:, :1], torch.ones(b, k, dtype=mask.dtype), mask[:, 1:]], dim=1)
        types = torch.zeros_like(attn)
        types[:, 1: 1 + k] = 1
        return embeds, attn, types

    def forward(self, batch: MultimodalBatch) -> torch.Tensor:
        embeds, attn, types = self.encoder_inputs(batch)
        out = self.encoder(inputs_embeds=embeds, attention_mask=attn, token_type_ids=types)
        return self.head(self.dropout(pooled(out)))


def forward_multimodal(batch: MultimodalBatch, model: MultimodalBitransformer) -> torch.Tensor:
    """Class scores, shape (batch, 2)."""
    return model(batch)


def build_image_features_mm(image: torch.Tensor, mode: str = "dual_vgg_features",
                            object_spec: Optional[BackboneSpec] = None,
                            scene_spec: Optional[BackboneSpec] = None,
                            residual_spec: Optional[BackboneSpec] = None) -> np.ndarray:
    """Image feature for the projection: residual pooled features or fused VGG features."""
    from .vision import extract_features

    if mode == "residual_backbone":
        return extract_features(image, residual_spec or BackboneSpec("resnet152", "object"))
    if mode == "dual_vgg_features":
        obj, scene = default_specs()
        return fuse_early(extract_features(image, object_spec or obj),
                          extract_features(image, scene_spec or scene)).vector
    raise ConfigError(f"unknown multimodal image mode {mode!r}; expected one of {IMAGE_MODES}")


def training_step(model: MultimodalBitransformer, opt: torch.optim.Optimizer, batch: MultimodalBatch) -> float:
    model.train()
    loss = F.cross_entropy(model(batch), batch.labels)
    if not torch.isfinite(loss):
        return float("nan")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


@dataclass
class _Encoded:
    """Everything a batch needs, precomputed for one split."""

    token_ids: list[list[int]]
    has_image: torch.Tensor
    features: Optional[torch.Tensor]
    images: Optional[torch.Tensor]
    labels: Optional[torch.Tensor]
    record_ids: list[str]

    def batch(self, idx) -> MultimodalBatch:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return MultimodalBatch(
            token_ids=[self.token_ids[i] for i in idx.tolist()],
            has_image=self.has_image[idx],
            image_features=None if self.features is None else self.features[idx],
            images=None if self.images is None else self.images[idx],
            labels=None if self.labels is None else self.labels[idx],
            record_ids=[self.record_ids[i] for i in idx.tolist()],
        )

    def __len__(self):
        return len(self.token_ids)


@dataclass(frozen=True)
class MultimodalSetup:
    image_mode: str = "dual_vgg_features"
    n_image_tokens: int = 1
    object_spec: BackboneSpec = BackboneSpec("vgg16", "object")
    scene_spec: BackboneSpec = BackboneSpec("vgg16", "scene")
    residual_spec: BackboneSpec = BackboneSpec("resnet152", "object")
    strip_mentions: bool = True

    def __post_init__(self):
        if self.image_mode not in IMAGE_MODES:
            raise ConfigError(f"unknown multimodal image mode {self.image_mode!r}; expected one of {IMAGE_MODES}")
        if self.n_image_tokens < 1:
            raise ConfigError("n_image_tokens must be >= 1")

    @property
    def image_dim(self) -> int:
        if self.image_mode == "residual_backbone":
            return self.residual_spec.feature_dim
        return self.object_spec.feature_dim + self.scene_spec.feature_dim

    def to_dict(self) -> dict:
        return {
            "image_mode": self.image_mode,
            "n_image_tokens": self.n_image_tokens,
            "object_spec": self.object_spec.to_dict(),
            "scene_spec": self.scene_spec.to_dict(),
            "residual_spec": self.residual_spec.to_dict(),
            "strip_mentions": self.strip_mentions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MultimodalSetup":
        return cls(d["image_mode"], d["n_image_tokens"], BackboneSpec(**d["object_spec"]),
                   BackboneSpec(**d["scene_spec"]), BackboneSpec(**d["residual_spec"]), d["strip_mentions"])


class _FrozenDualFeatures:
    def __init__(self, setup: MultimodalSetup):
        self.obj = load_backbone(setup.object_spec).requires_grad_(False)
        self.scene = load_backbone(setup.scene_spec).requires_grad_(False)
        self.setup = setup

    def __call__(self, paths: Sequence[str]) -> np.ndarray:
        return fused_matrix(
            extract_batch(self.obj, load_images(paths, self.setup.object_spec.input_size)),
            extract_batch(self.scene, load_images(paths, self.setup.scene_spec.input_size)),
        )


def encode_records(records: Sequence[TweetRecord], handle: EncoderHandle, cfg: TrainingProtocol,
                   setup: MultimodalSetup, dual: Optional[_FrozenDualFeatures] = None) -> _Encoded:
    texts = [clean(r.text, setup.strip_mentions) for r in records]
    token_ids = encode_texts(texts, handle, max(2, cfg.max_sequence_length - setup.n_image_tokens))
    has_image = torch.tensor([bool(r.image_path) for r in records], dtype=torch.bool)
    with_img = [i for i, r in enumerate(records) if r.image_path]
    paths = [records[i].image_path for i in with_img]
    features = images = None
    if setup.image_mode == "dual_vgg_features":
        features = torch.zeros((len(records), setup.image_dim))
        if with_img:
            features[with_img] = torch.from_numpy((dual or _FrozenDualFeatures(setup))(paths))
    else:
        size = setup.residual_spec.input_size
        images = torch.zeros((len(records), 3, size, size))
        if with_img:
            images[with_img] = load_images(paths, size)
    labels = None
    if all(r.label is not None for r in records):
        labels = torch.tensor([r.label.index for r in records], dtype=torch.long)
    return _Encoded(token_ids, has_image, features, images, labels, [r.tweet_id for r in records])


def new_model(handle: EncoderHandle, setup: MultimodalSetup, encoder: Optional[nn.Module] = None,
              pretrained_backbone: bool = True) -> MultimodalBitransformer:
    backbone = None
    if setup.image_mode == "residual_backbone":
        spec = setup.residual_spec if pretrained_backbone else BackboneSpec(
            setup.residual_spec.architecture, setup.residual_spec.pretrain_corpus, None, setup.residual_spec.init_seed)
        backbone = load_backbone(spec)
    return MultimodalBitransformer(
        encoder if encoder is not None else handle.new_encoder(),
        handle.hidden_dim, setup.image_dim, setup.n_image_tokens, backbone,
        getattr(handle.config, "hidden_dropout_prob", 0.1),
    )


class _MultimodalSeedRun:
    def __init__(self, seed, handle, cfg, setup, train_enc, dev_enc):
        self.model = new_model(handle, setup)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate)
        self.gen = torch.Generator().manual_seed(seed)
        self.cfg, self.train_enc, self.dev_enc = cfg, train_enc, dev_enc

    def fit_epoch(self, epoch):
        total = 0.0
        for idx in batch_order(len(self.train_enc), self.cfg.batch_size, self.gen):
            loss = training_step(self.model, self.opt, self.train_enc.batch(idx))
            if loss != loss:
                return float("nan")
            total += loss * len(idx)
        return total / len(self.train_enc)

    def score(self):
        probs = predict_proba(self.model, self.dev_enc, self.cfg.batch_size)
        return dev_micro_f1(probs.argmax(1).tolist(), self.dev_enc.labels.tolist())

    def state_dict(self):
        return self.model.state_dict()


@torch.no_grad()
def predict_proba(model: MultimodalBitransformer, enc: _Encoded, batch_size: int = 32) -> torch.Tensor:
    model.eval()
    out = [F.softmax(model(enc.batch(range(s, min(s + batch_size, len(enc))))), dim=-1)
           for s in range(0, len(enc), batch_size)]
    return torch.cat(out) if out else torch.empty((0, 2))


def train_multimodal(train: DatasetSplit, dev: DatasetSplit, handle: EncoderHandle,
                     cfg: TrainingProtocol = TrainingProtocol(),
                     setup: MultimodalSetup = MultimodalSetup()) -> tuple[Checkpoint, SelectionResult]:
    """End-to-end training of encoder, image projection and head under the seed protocol.

    In ``dual_vgg_features`` mode the two VGG backbones stay frozen and their
    features are computed once; in ``residual_backbone`` mode the residual
    network is fine-tuned with everything else.
    """
    check_trainable(train, dev)
    dual = _FrozenDualFeatures(setup) if setup.image_mode == "dual_vgg_features" else None
    train_enc = encode_records(train.records, handle, cfg, setup, dual)
    dev_enc = encode_records(dev.records, handle, cfg, setup, dual)
    n_missing = int((~train_enc.has_image).sum() + (~dev_enc.has_image).sum())
    log.info("multimodal training: %d train / %d dev, %s, %d record(s) use the missing-image embedding",
             len(train), len(dev), setup.image_mode, n_missing)
    result = train_seeds(cfg, lambda seed: _MultimodalSeedRun(seed, handle, cfg, setup, train_enc, dev_enc))
    ckpt = Checkpoint(
        kind="multimodal",
        config={
            "encoder": handle.identifier,
            "encoder_config": handle.config.to_dict(),
            "protocol": cfg.to_dict(),
            "setup": setup.to_dict(),
        },
        state=result.state,
        seed=result.best.seed,
        epoch=result.best.epoch,
        dev_score=result.best.dev_micro_f1,
        tokenizer=handle.tokenizer,
    )
    return ckpt, result


def load_multimodal_model(ckpt: Checkpoint) -> tuple[MultimodalBitransformer, EncoderHandle, MultimodalSetup]:
    from transformers import AutoModel

    if ckpt.kind != "multimodal":
        raise TrainingError(f"expected a multimodal checkpoint, got {ckpt.kind!r}")
    handle = handle_from_checkpoint(ckpt)
    setup = MultimodalSetup.from_dict(ckpt.config["setup"])
    model = new_model(handle, setup, AutoModel.from_config(handle.config), pretrained_backbone=False)
    try:
        model.load_state_dict(ckpt.state)
    except RuntimeError as exc:
        raise TrainingError(f"checkpoint weights do not match its config: {exc}") from exc
    return model.eval(), handle, setup


def predict_multimodal(records: Sequence[TweetRecord], ckpt: Checkpoint) -> list[tuple[Label, float]]:
    if not records:
        return []
    model, handle, setup = load_multimodal_model(ckpt)
    cfg = TrainingProtocol(**{**ckpt.config["protocol"], "seeds": [0]})
    enc = encode_records(records, handle, cfg, setup)
    conf, idx = predict_proba(model, enc).max(dim=1)
    return [(INDEX_TO_LABEL[int(i)], float(c)) for i, c in zip(idx, conf)]
