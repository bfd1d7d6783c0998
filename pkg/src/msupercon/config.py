"""Run configuration: one JSON document covering data generation, model and training.

Unknown keys are rejected and every value is schema-checked before any work
starts. Missing keys take the defaults below, which mirror the dataclass
defaults of the individual modules.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from .data import AugmentPolicy, SyntheticSpec
from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .training import OptimizerConfig, TrainConfig

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}


def _obj(props: dict, **extra) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, **extra}


_OPTIMIZER = _obj({
    "kind": {"enum": ["adam", "sgd"]},
    "learning_rate": _NONNEG,
    "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "eps": {"type": "number", "exclusiveMinimum": 0},
})

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "data": _obj({
        "num_samples": _obj({s: _POS_INT for s in ("train", "val", "test")}),
        "class_proportions": {"type": "array", "items": _NONNEG, "minItems": 2},
        "image_size": _POS_INT,
        "aux_size": _POS_INT,
        "separation": {"type": "number", "exclusiveMinimum": 0},
        "aux_informativeness": {"oneOf": [_UNIT, {"type": "array", "items": _UNIT, "minItems": 4, "maxItems": 4}]},
        "noise": _NONNEG,
    }),
    "model": _obj({
        "encoder_kind": {"enum": ["small_cnn", "mlp"]},
        "rep_dim": _POS_INT,
        "proj_hidden": _POS_INT,
        "proj_out": _POS_INT,
        "aux_feature_dim": _POS_INT,
        "aux_dense": {"type": "boolean"},
        "classifier_hidden": {"type": "array", "items": _POS_INT},
        "num_aux": {"enum": [0, 1, 2, 4]},
        "conv_channels": {"type": "array", "items": _POS_INT, "minItems": 1},
        "mlp_hidden": _POS_INT,
    }),
    "loss": _obj({
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "alpha": {"oneOf": [_UNIT, {"type": "array", "items": _UNIT}]},
        "gamma": _NONNEG,
    }),
    "train": _obj({
        "epochs_stage1": _POS_INT,
        "epochs_stage2": _POS_INT,
        "batch_size": {"type": "integer", "minimum": 2},
        "classification_loss": {"enum": ["focal", "cross_entropy"]},
        "two_view": {"type": "boolean"},
        "optimizer_stage1": _OPTIMIZER,
        "optimizer_stage2": _OPTIMIZER,
    }),
    "augment": _obj({
        "hflip_p": _UNIT,
        "rotate": {"type": "boolean"},
        "elastic": {"type": "boolean"},
        "elastic_magnitude": _NONNEG,
        "elastic_radius": {"type": "number", "exclusiveMinimum": 0},
    }),
    "paths": _obj({
        "data": {"type": ["string", "null"]},
        "out": {"type": ["string", "null"]},
    }),
})


def _defaults() -> dict:
    spec = SyntheticSpec()
    model = asdict(ModelConfig())
    model.pop("image_shape")
    model.pop("num_classes")  # derived from data.class_proportions
    train = TrainConfig()
    return {
        "seed": 0,
        "data": {
            "num_samples": dict(spec.num_samples),
            "class_proportions": list(spec.class_proportions),
            "image_size": spec.image_size,
            "aux_size": spec.aux_size,
            "separation": spec.separation,
            "aux_informativeness": spec.aux_informativeness,
            "noise": spec.noise,
        },
        "model": {k: list(v) if isinstance(v, tuple) else v for k, v in model.items()},
        "loss": asdict(LossConfig()),
        "train": {
            "epochs_stage1": train.epochs_stage1,
            "epochs_stage2": train.epochs_stage2,
            "batch_size": train.batch_size,
            "classification_loss": train.classification_loss,
            "two_view": train.two_view,
            "optimizer_stage1": asdict(OptimizerConfig()),
            "optimizer_stage2": asdict(OptimizerConfig()),
        },
        "augment": asdict(AugmentPolicy()),
        "paths": {"data": None, "out": None},
    }


DEFAULTS = _defaults()


# replaced as a whole rather than merged key by key
_ATOMIC = {"num_samples"}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in _ATOMIC:
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, assignments: Sequence[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    doc = copy.deepcopy(doc)
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(value)
    return doc


def validate(doc: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            where = ".".join([*map(str, err.absolute_path), extra[0]]) if extra else where
            raise ConfigError(f"{where}: unknown key")
        raise ConfigError(f"{where}: {err.message}")


@dataclass
class RunConfig:
    doc: dict

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def num_classes(self) -> int:
        return len(self.doc["data"]["class_proportions"])

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.doc["data"]
        lam = d["aux_informativeness"]
        try:
            return SyntheticSpec(
                num_samples=dict(d["num_samples"]),
                class_proportions=tuple(d["class_proportions"]),
                image_size=d["image_size"],
                aux_size=d["aux_size"],
                separation=d["separation"],
                aux_informativeness=tuple(lam) if isinstance(lam, list) else lam,
                noise=d["noise"],
                seed=self.seed,
            )
        except ConfigError as exc:
            raise ConfigError(f"data: {exc}") from None

    def train_config(self, image_shape: tuple[int, int, int] | None = None) -> TrainConfig:
        t, m = self.doc["train"], dict(self.doc["model"])
        size = self.doc["data"]["image_size"]
        m["image_shape"] = tuple(image_shape) if image_shape is not None else (3, size, size)
        m["num_classes"] = self.num_classes
        alpha = self.doc["loss"]["alpha"]
        try:
            return TrainConfig(
                epochs_stage1=t["epochs_stage1"],
                epochs_stage2=t["epochs_stage2"],
                batch_size=t["batch_size"],
                seed=self.seed,
                loss=LossConfig(tau=self.doc["loss"]["tau"], alpha=tuple(alpha) if isinstance(alpha, list) else alpha,
                                gamma=self.doc["loss"]["gamma"]),
                model=ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in m.items()}),
                optimizer_stage1=OptimizerConfig(**t["optimizer_stage1"]),
                optimizer_stage2=OptimizerConfig(**t["optimizer_stage2"]),
                augment=AugmentPolicy(**self.doc["augment"]),
                classification_loss=t["classification_loss"],
                two_view=t["two_view"],
            )
        except ConfigError as exc:
            raise ConfigError(f"train/model/loss: {exc}") from None


def load_run_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read (optional) JSON, apply ``--set`` overrides, validate, fill defaults."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be an object")
    doc = apply_overrides(doc, overrides)
    validate(doc)
    merged = _merge(DEFAULTS, doc)
    validate(merged)
    cfg = RunConfig(merged)
    # surface cross-field errors (proportion sums, alpha length) before any work
    cfg.synthetic_spec()
    cfg.train_config()
    if isinstance(merged["loss"]["alpha"], list):
        LossConfig(alpha=tuple(merged["loss"]["alpha"])).alpha_vector(cfg.num_classes)
    return cfg
