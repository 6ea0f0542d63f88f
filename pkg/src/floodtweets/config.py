"""Run configuration: flat ``section.key = value`` files (or JSON), fully defaulted."""

from __future__ import annotations

import difflib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from .errors import ConfigError
from .multimodal import IMAGE_MODES, MultimodalSetup
from .protocol import TrainingProtocol
from .smote import STRATEGIES, SmoteConfig
from .text import DEFAULT_ENCODER
from .vision import ARCHITECTURES, CORPORA, BackboneSpec

RUN_IDS = ("run1_multimodal", "run2_text", "run3_scene", "run4_fused")
_REQUIRED = object()
_IMAGE_RUNS = ("run3_scene", "run4_fused")


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("true", "yes", "1", "on"):
        return True
    if s in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected a boolean")


def _int(v) -> int:
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ValueError("expected an integer")
    return int(v)


def _float(v) -> float:
    if isinstance(v, bool):
        raise ValueError("expected a number")
    return float(v)


def _int_list(v) -> list[int]:
    if isinstance(v, str):
        v = v.strip()
        v = json.loads(v) if v.startswith("[") else [x for x in v.split(",") if x.strip()]
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = [v]
    return [_int(x) for x in v]


def _str(v) -> str:
    if not isinstance(v, (str, int, float)) or isinstance(v, bool):
        raise ValueError("expected a string")
    return str(v).strip()


def _choice(*allowed) -> Callable[[Any], str]:
    def parse(v):
        v = _str(v)
        if v not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}")
        return v
    return parse


def _positive(parse):
    def check(v):
        v = parse(v)
        if v <= 0:
            raise ValueError("must be > 0")
        return v
    return check


def _at_least_one(v):
    v = _int(v)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


# key -> (parser, default); None defaults are resolved per run_id
SCHEMA: dict[str, tuple[Callable, Any]] = {
    "run_id": (_choice(*RUN_IDS), _REQUIRED),
    "data.train": (_str, _REQUIRED),
    "data.dev": (_str, _REQUIRED),
    "data.format": (_choice("auto", "jsonl", "csv"), "auto"),
    "output_dir": (_str, None),
    "rng_seed": (_int, 0),
    "protocol.learning_rate": (_positive(_float), 1e-5),
    "protocol.head_learning_rate": (_positive(_float), 1e-4),
    "protocol.epochs": (_at_least_one, 10),
    "protocol.seeds": (_int_list, list(range(10))),
    "protocol.batch_size": (_at_least_one, 32),
    "protocol.optimizer": (_choice("adam"), "adam"),
    "protocol.max_sequence_length": (_positive(_int), 128),
    "text.encoder": (_str, DEFAULT_ENCODER),
    "text.strip_mentions": (_bool, True),
    "image.architecture": (_choice(*ARCHITECTURES), "vgg16"),
    "image.object_weights": (_str, ""),
    "image.scene_weights": (_str, ""),
    "image.finetune_corpus": (_choice(*CORPORA), "scene"),
    "smote.enabled": (_bool, None),
    "smote.k_neighbors": (_at_least_one, 5),
    "smote.inflation_factor": (_at_least_one, 3),
    "smote.seed": (_int, None),
    "smote.strategy": (_choice(*STRATEGIES), "smote_features"),
    "mm.image_mode": (_choice(*IMAGE_MODES), "dual_vgg_features"),
    "mm.n_image_tokens": (_at_least_one, 1),
    "mm.residual_architecture": (_choice(*ARCHITECTURES), "resnet152"),
    "mm.residual_weights": (_str, ""),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def run_id(self) -> str:
        return self.values["run_id"]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output_dir"])

    @property
    def protocol(self) -> TrainingProtocol:
        v = self.values
        return TrainingProtocol(
            learning_rate=v["protocol.learning_rate"],
            epochs=v["protocol.epochs"],
            seeds=tuple(v["protocol.seeds"]),
            batch_size=v["protocol.batch_size"],
            optimizer=v["protocol.optimizer"],
            max_sequence_length=v["protocol.max_sequence_length"],
            head_learning_rate=v["protocol.head_learning_rate"],
        )

    @property
    def smote(self) -> Optional[SmoteConfig]:
        v = self.values
        if not v["smote.enabled"]:
            return None
        return SmoteConfig(v["smote.k_neighbors"], v["smote.inflation_factor"], v["smote.seed"],
                           "euclidean", v["smote.strategy"])

    def backbone_specs(self) -> tuple[BackboneSpec, BackboneSpec]:
        v = self.values
        arch, seed = v["image.architecture"], v["rng_seed"]
        return (BackboneSpec(arch, "object", v["image.object_weights"] or None, seed),
                BackboneSpec(arch, "scene", v["image.scene_weights"] or None, seed))

    @property
    def multimodal_setup(self) -> MultimodalSetup:
        v = self.values
        obj, scene = self.backbone_specs()
        residual = BackboneSpec(v["mm.residual_architecture"], "object", v["mm.residual_weights"] or None,
                                v["rng_seed"])
        return MultimodalSetup(v["mm.image_mode"], v["mm.n_image_tokens"], obj, scene, residual,
                               v["text.strip_mentions"])

    def to_text(self) -> str:
        """Every effective value, in the flat file format."""
        lines = []
        for key in SCHEMA:
            value = self.values[key]
            if isinstance(value, list):
                value = ",".join(str(x) for x in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_flat(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"line {n}: key {key!r} given twice")
        raw[key] = value.strip()
    return raw


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def resolve(raw: dict[str, Any], base_dir: Optional[Path] = None, check_paths: bool = True) -> RunConfig:
    """Type-check, range-check and default a raw key/value mapping."""
    unknown = [k for k in raw if k not in SCHEMA]
    if unknown:
        key = unknown[0]
        hint = difflib.get_close_matches(key, SCHEMA, n=1)
        msg = f"unknown config key {key!r}"
        raise ConfigError(msg + (f" (did you mean {hint[0]!r}?)" if hint else ""))
    values: dict[str, Any] = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config key {key!r}: bad value {raw[key]!r} ({exc})") from None
        elif default is _REQUIRED:
            raise ConfigError(f"config key {key!r} is required")
        else:
            values[key] = default

    run_id = values["run_id"]
    if values["output_dir"] is None:
        values["output_dir"] = f"runs/{run_id}"
    if values["smote.enabled"] is None:
        values["smote.enabled"] = run_id in _IMAGE_RUNS
    elif values["smote.enabled"] and run_id not in _IMAGE_RUNS:
        raise ConfigError(f"config key 'smote.enabled': oversampling applies only to {', '.join(_IMAGE_RUNS)}")
    if values["smote.seed"] is None:
        values["smote.seed"] = values["rng_seed"]
    if not values["protocol.seeds"]:
        raise ConfigError("config key 'protocol.seeds': expected a non-empty list of integers")
    if len(set(values["protocol.seeds"])) != len(values["protocol.seeds"]):
        raise ConfigError("config key 'protocol.seeds': seeds must be distinct")

    base_dir = base_dir or Path.cwd()
    path_keys = ["data.train", "data.dev", "image.object_weights", "image.scene_weights",
                 "mm.residual_weights", "output_dir"]
    for key in path_keys:
        if values[key]:
            p = Path(values[key])
            values[key] = str(p if p.is_absolute() else (base_dir / p).resolve())
    if check_paths:
        for key in path_keys[:-1]:
            if values[key] and not Path(values[key]).is_file():
                raise ConfigError(f"config key {key!r}: file not found: {values[key]}")
    return RunConfig(values)


def validate_config(path) -> RunConfig:
    """Read a flat ``key = value`` file or a JSON file (nested sections allowed)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            raw = _flatten(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    else:
        raw = parse_flat(text)
    return resolve(raw, base_dir=path.parent)
