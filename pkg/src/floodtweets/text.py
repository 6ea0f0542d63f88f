"""Transformer text classifier fine-tuned under the multi-seed dev protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import INDEX_TO_LABEL, DatasetSplit, Label
from .errors import DataError, TrainingError
from .metrics import confusion, micro_f1
from .preprocess import clean
from .protocol import Checkpoint, SelectionResult, TrainingProtocol, train_seeds

log = logging.getLogger(__name__)

DEFAULT_ENCODER = "dbmdz/bert-base-italian-uncased"
TINY_PREFIX = "tiny-random"
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
TINY_DEFAULTS = {"hidden": 32, "layers": 2, "heads": 2, "intermediate": 64, "positions": 160}


def parse_tiny(identifier: str) -> dict[str, int]:
    """``tiny-random`` or ``tiny-random:hidden=64,layers=1`` -> size dict."""
    dims = dict(TINY_DEFAULTS)
    _, _, opts = identifier.partition(":")
    for item in filter(None, opts.split(",")):
        key, _, value = item.partition("=")
        if key not in dims:
            raise ValueError(f"unknown tiny encoder option {key!r}")
        dims[key] = int(value)
    return dims


@dataclass
class EncoderHandle:
    """A tokenizer plus the recipe for building its matching encoder."""

    identifier: str
    tokenizer: Any
    config: Any

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_size

    @property
    def max_positions(self) -> int:
        return self.config.max_position_embeddings

    @property
    def is_tiny(self) -> bool:
        return self.identifier.startswith(TINY_PREFIX)

    def new_encoder(self) -> nn.Module:
        from transformers import AutoModel

        if self.is_tiny:
            return AutoModel.from_config(self.config)
        return AutoModel.from_pretrained(self.identifier)


def _tiny_tokenizer(texts: Sequence[str]):
    from transformers import BertTokenizer

    probe = BertTokenizer(vocab={t: i for i, t in enumerate(SPECIAL_TOKENS)}, do_lower_case=True)
    backend = probe.backend_tokenizer
    words = set()
    for t in texts:
        norm = backend.normalizer.normalize_str(t)
        words.update(w for w, _ in backend.pre_tokenizer.pre_tokenize_str(norm))
    vocab = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
    for w in sorted(words - set(vocab)):
        vocab[w] = len(vocab)
    return BertTokenizer(vocab=vocab, do_lower_case=True)


def load_encoder(identifier: str = DEFAULT_ENCODER, texts: Optional[Sequence[str]] = None) -> EncoderHandle:
    """Resolve an encoder identifier.

    ``tiny-random[:opts]`` builds a small randomly initialised BERT whose
    word-level vocabulary is collected from ``texts``; anything else is handed
    to ``transformers`` (hub id or local directory).
    """
    from transformers import AutoConfig, AutoTokenizer, BertConfig

    if identifier.startswith(TINY_PREFIX):
        if texts is None:
            raise ValueError("a tiny-random encoder needs texts to build its vocabulary")
        dims = parse_tiny(identifier)
        tok = _tiny_tokenizer(texts)
        config = BertConfig(
            vocab_size=len(tok.get_vocab()),
            hidden_size=dims["hidden"],
            num_hidden_layers=dims["layers"],
            num_attention_heads=dims["heads"],
            intermediate_size=dims["intermediate"],
            max_position_embeddings=dims["positions"],
            type_vocab_size=2,
        )
        return EncoderHandle(identifier, tok, config)
    try:
        tok = AutoTokenizer.from_pretrained(identifier)
        config = AutoConfig.from_pretrained(identifier)
    except OSError as exc:
        raise TrainingError(f"cannot load encoder {identifier!r}: {exc}") from exc
    return EncoderHandle(identifier, tok, config)


def handle_from_checkpoint(ckpt: Checkpoint) -> EncoderHandle:
    from transformers import AutoConfig

    enc = dict(ckpt.config["encoder_config"])
    config = AutoConfig.for_model(enc.pop("model_type"), **enc)
    return EncoderHandle(ckpt.config["encoder"], ckpt.tokenizer, config)


def tokenize(text: str, handle: EncoderHandle, max_len: int) -> tuple[list[int], list[int]]:
    """Token ids with begin/end specials, right-truncated to ``max_len``."""
    enc = handle.tokenizer(text, truncation=True, max_length=max_len)
    return list(enc["input_ids"]), list(enc["attention_mask"])


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = 1
    return ids, mask


def pooled(out) -> torch.Tensor:
    p = getattr(out, "pooler_output", None)
    return p if p is not None else out.last_hidden_state[:, 0]


class TextClassifier(nn.Module):
    def __init__(self, encoder: nn.Module, hidden_dim: int, dropout: float = 0.1):
        super().__init__()
        self.encoder = encoder
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(hidden_dim, 2)
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, input_ids, attention_mask):
        out = self.encoder(input_ids=input_ids, attention_mask=attention_mask)
        return self.head(self.dropout(pooled(out)))


def labels_tensor(ds: DatasetSplit) -> torch.Tensor:
    return torch.tensor([r.label.index for r in ds.records], dtype=torch.long)


def check_trainable(train: DatasetSplit, dev: DatasetSplit) -> None:
    if min(train.class_counts.values()) == 0:
        raise DataError(f"training split must contain both classes, got {train.class_counts}")
    if len(dev) == 0:
        raise DataError("dev split is empty")
    if any(r.label is None for r in (*train.records, *dev.records)):
        raise DataError("train/dev records must all carry labels")


def batch_order(n: int, batch_size: int, generator: torch.Generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    return [perm[s: s + batch_size] for s in range(0, n, batch_size)]


def dev_micro_f1(pred_idx: Sequence[int], gold_idx: Sequence[int]) -> float:
    counts = confusion([INDEX_TO_LABEL[int(p)] for p in pred_idx], [INDEX_TO_LABEL[int(g)] for g in gold_idx])
    return micro_f1(counts)


class _TextSeedRun:
    def __init__(self, seed, handle, cfg, train_seqs, train_y, dev_seqs, dev_y):
        self.model = TextClassifier(handle.new_encoder(), handle.hidden_dim,
                                    getattr(handle.config, "hidden_dropout_prob", 0.1))
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate)
        self.gen = torch.Generator().manual_seed(seed)
        self.cfg, self.pad = cfg, handle.tokenizer.pad_token_id
        self.train_seqs, self.train_y = train_seqs, train_y
        self.dev_seqs, self.dev_y = dev_seqs, dev_y

    def fit_epoch(self, epoch: int) -> float:
        self.model.train()
        total, n = 0.0, 0
        for idx in batch_order(len(self.train_seqs), self.cfg.batch_size, self.gen):
            ids, mask = pad_batch([self.train_seqs[i] for i in idx], self.pad)
            loss = F.cross_entropy(self.model(ids, mask), self.train_y[idx])
            if not torch.isfinite(loss):
                return float("nan")
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        return total / n

    def score(self) -> float:
        probs = predict_proba(self.model, self.dev_seqs, self.pad, self.cfg.batch_size)
        return dev_micro_f1(probs.argmax(1).tolist(), self.dev_y.tolist())

    def state_dict(self):
        return self.model.state_dict()


@torch.no_grad()
def predict_proba(model: TextClassifier, seqs, pad_id: int, batch_size: int = 64) -> torch.Tensor:
    model.eval()
    out = []
    for s in range(0, len(seqs), batch_size):
        ids, mask = pad_batch(seqs[s: s + batch_size], pad_id)
        out.append(F.softmax(model(ids, mask), dim=-1))
    return torch.cat(out) if out else torch.empty((0, 2))


def encode_texts(texts: Sequence[str], handle: EncoderHandle, max_len: int) -> list[list[int]]:
    return [tokenize(t, handle, max_len)[0] for t in texts]


def train_text_classifier(train: DatasetSplit, dev: DatasetSplit, handle: EncoderHandle,
                          cfg: TrainingProtocol = TrainingProtocol(),
                          strip_mentions: bool = True) -> tuple[Checkpoint, SelectionResult]:
    """Fine-tune encoder + head once per seed; keep the best (seed, epoch) on dev."""
    check_trainable(train, dev)
    train_seqs = encode_texts([clean(r.text, strip_mentions) for r in train], handle, cfg.max_sequence_length)
    dev_seqs = encode_texts([clean(r.text, strip_mentions) for r in dev], handle, cfg.max_sequence_length)
    train_y, dev_y = labels_tensor(train), labels_tensor(dev)
    log.info("text training: %d train / %d dev records, encoder %s", len(train), len(dev), handle.identifier)

    result = train_seeds(cfg, lambda seed: _TextSeedRun(seed, handle, cfg, train_seqs, train_y, dev_seqs, dev_y))
    ckpt = Checkpoint(
        kind="text",
        config={
            "encoder": handle.identifier,
            "encoder_config": handle.config.to_dict(),
            "protocol": cfg.to_dict(),
            "strip_mentions": strip_mentions,
        },
        state=result.state,
        seed=result.best.seed,
        epoch=result.best.epoch,
        dev_score=result.best.dev_micro_f1,
        tokenizer=handle.tokenizer,
    )
    return ckpt, result


def load_text_model(ckpt: Checkpoint) -> tuple[TextClassifier, EncoderHandle]:
    from transformers import AutoModel

    if ckpt.kind != "text":
        raise TrainingError(f"expected a text checkpoint, got {ckpt.kind!r}")
    handle = handle_from_checkpoint(ckpt)
    model = TextClassifier(AutoModel.from_config(handle.config), handle.hidden_dim)
    try:
        model.load_state_dict(ckpt.state)
    except RuntimeError as exc:
        raise TrainingError(f"checkpoint weights do not match its config: {exc}") from exc
    return model.eval(), handle


def predict_text(texts: Sequence[str], ckpt: Checkpoint) -> list[tuple[Label, float]]:
    """Label and softmax confidence per cleaned text, order preserved."""
    if not texts:
        return []
    model, handle = load_text_model(ckpt)
    max_len = ckpt.config["protocol"]["max_sequence_length"]
    probs = predict_proba(model, encode_texts(texts, handle, max_len), handle.tokenizer.pad_token_id)
    conf, idx = probs.max(dim=1)
    return [(INDEX_TO_LABEL[int(i)], float(c)) for i, c in zip(idx, conf)]
