"""Network components: encoder, projection head, auxiliary featurizer, fusion, classifier.

All forward functions accept a single sample or a batch along a leading axis.
Parameters live in a :class:`ModelParams` partitioned into four freezable
groups; the classifier reads the encoder representation, never the projection.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, replace
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import CheckpointError, ConfigError, ShapeError, UsageError
from .numerics import Tensor

CANONICAL_AUX = ("slope", "altitude", "aspect", "gain")
GROUPS = ("encoder", "projection", "aux_featurizer", "classifier")
ENCODER_KINDS = ("small_cnn", "mlp")
AUX_STAT_DIM = 4  # mean, std, min, max
# fixed input standardization for [0, 1] images
PIXEL_CENTER = 0.5
PIXEL_SCALE = 0.25

CHECKPOINT_MAGIC = b"MSCN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    encoder_kind: str = "small_cnn"
    image_shape: tuple[int, int, int] = (3, 64, 64)
    rep_dim: int = 48
    proj_hidden: int = 64
    proj_out: int = 32
    aux_feature_dim: int = 4
    aux_dense: bool = True
    classifier_hidden: tuple[int, ...] = (256, 128)
    num_classes: int = 4
    num_aux: int = 0
    conv_channels: tuple[int, ...] = (8, 16, 32)
    mlp_hidden: int = 128

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "classifier_hidden", tuple(int(v) for v in self.classifier_hidden))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder_kind must be one of {ENCODER_KINDS}, got {self.encoder_kind!r}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"image_shape must be positive (C, H, W), got {self.image_shape}")
        for key in ("rep_dim", "proj_hidden", "proj_out", "aux_feature_dim", "num_classes", "mlp_hidden"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.proj_out > self.proj_hidden:
            raise ConfigError(f"proj_out ({self.proj_out}) must not exceed proj_hidden ({self.proj_hidden})")
        if self.num_aux not in (0, 1, 2, 4):
            raise ConfigError(f"num_aux must be one of 0, 1, 2, 4, got {self.num_aux}")
        if not self.aux_dense and self.aux_feature_dim != AUX_STAT_DIM:
            raise ConfigError(f"without the dense aux layer aux_feature_dim must be {AUX_STAT_DIM}")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ConfigError(f"conv_channels must be positive, got {self.conv_channels}")
        if any(w < 1 for w in self.classifier_hidden):
            raise ConfigError(f"classifier_hidden widths must be positive, got {self.classifier_hidden}")

    @property
    def aux_names(self) -> tuple[str, ...]:
        return CANONICAL_AUX[: self.num_aux]

    @property
    def classifier_in_dim(self) -> int:
        return self.rep_dim + self.num_aux * self.aux_feature_dim


class ModelParams:
    """Named tensors in the groups encoder / projection / aux_featurizer / classifier."""

    def __init__(self, config: ModelConfig, groups: Mapping[str, Mapping[str, Tensor]]):
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise UsageError(f"unknown parameter groups {sorted(unknown)}")
        self.config = config
        self.groups: dict[str, dict[str, Tensor]] = {g: dict(groups.get(g, {})) for g in GROUPS}

    def __getitem__(self, full_name: str) -> Tensor:
        group, _, name = full_name.partition("/")
        try:
            return self.groups[group][name]
        except KeyError:
            raise KeyError(full_name) from None

    def __contains__(self, full_name: str) -> bool:
        group, _, name = full_name.partition("/")
        return name in self.groups.get(group, {})

    def group(self, name: str) -> dict[str, Tensor]:
        if name not in self.groups:
            raise UsageError(f"unknown parameter group {name!r}; expected one of {GROUPS}")
        return self.groups[name]

    def named(self, groups: Sequence[str] | None = None) -> Iterator[tuple[str, Tensor]]:
        for g in groups or GROUPS:
            for name, t in self.group(g).items():
                yield f"{g}/{name}", t

    def freeze(self, group: str) -> "ModelParams":
        for t in self.group(group).values():
            t.freeze()
        return self

    def unfreeze(self, group: str) -> "ModelParams":
        for t in self.group(group).values():
            t.unfreeze()
        return self

    def is_frozen(self, group: str) -> bool:
        tensors = self.group(group).values()
        return bool(tensors) and all(t.frozen for t in tensors)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named() if not t.frozen]

    def checksum(self, groups: Sequence[str] | None = None) -> str:
        h = hashlib.sha256()
        for name, t in self.named(groups):
            h.update(name.encode())
            h.update(t.data.astype("<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParams":
        out = ModelParams(self.config, {
            g: {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name) for n, t in ts.items()}
            for g, ts in self.groups.items()
        })
        for g in GROUPS:
            for n, t in self.groups[g].items():
                out.groups[g][n].frozen = t.frozen
        return out

    def num_parameters(self, groups: Sequence[str] | None = None) -> int:
        return sum(t.size for _, t in self.named(groups))


def freeze_group(params: ModelParams, group: str) -> ModelParams:
    return params.freeze(group)


# -------------------------------------------------------------- initialization


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _dense(rng, prefix: str, n_in: int, n_out: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.w": Tensor(_glorot(rng, (n_in, n_out), n_in, n_out), requires_grad=True),
        f"{prefix}.b": Tensor(np.zeros(n_out), requires_grad=True),
    }


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights and zero biases.

    Each group draws from its own stream, so the encoder and projection do
    not depend on the auxiliary or classifier settings.
    """
    rngs = {g: np.random.default_rng([seed, i]) for i, g in enumerate(GROUPS)}
    c, h, w = config.image_shape

    enc: dict[str, Tensor] = {}
    rng = rngs["encoder"]
    if config.encoder_kind == "small_cnn":
        c_in = c
        for i, c_out in enumerate(config.conv_channels, start=1):
            shape = (c_out, c_in, 3, 3)
            enc[f"conv{i}.w"] = Tensor(_glorot(rng, shape, c_in * 9, c_out * 9), requires_grad=True)
            enc[f"conv{i}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
            c_in = c_out
        enc.update(_dense(rng, "fc", c_in, config.rep_dim))
    else:
        enc.update(_dense(rng, "fc1", c * h * w, config.mlp_hidden))
        enc.update(_dense(rng, "fc2", config.mlp_hidden, config.rep_dim))

    proj: dict[str, Tensor] = {}
    proj.update(_dense(rngs["projection"], "fc1", config.rep_dim, config.proj_hidden))
    proj.update(_dense(rngs["projection"], "fc2", config.proj_hidden, config.proj_out))

    aux: dict[str, Tensor] = {}
    if config.aux_dense:
        for name in config.aux_names:
            aux.update(_dense(rngs["aux_featurizer"], name, AUX_STAT_DIM, config.aux_feature_dim))

    clf: dict[str, Tensor] = {}
    dims = [config.classifier_in_dim, *config.classifier_hidden, config.num_classes]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        clf.update(_dense(rngs["classifier"], f"fc{i}", a, b))

    return ModelParams(config, {"encoder": enc, "projection": proj, "aux_featurizer": aux, "classifier": clf})


# --------------------------------------------------------------------- forward


def _batched(x, trailing_rank: int) -> tuple[Tensor, bool]:
    x = nx.as_tensor(x)
    if x.ndim == trailing_rank:
        return nx.reshape(x, (1, *x.shape)), True
    if x.ndim == trailing_rank + 1:
        return x, False
    raise ShapeError(f"expected rank {trailing_rank} or {trailing_rank + 1} input, got shape {x.shape}")


def _unbatch(y: Tensor, single: bool) -> Tensor:
    return nx.reshape(y, y.shape[1:]) if single else y


def encoder_forward(images, params: ModelParams) -> Tensor:
    """Image(s) (C,H,W) or (N,C,H,W) -> representation (d_r,) or (N, d_r)."""
    cfg = params.config
    x, single = _batched(images, 3)
    x = (x - PIXEL_CENTER) * (1.0 / PIXEL_SCALE)
    c, h, w = cfg.image_shape
    enc = params.groups["encoder"]
    if cfg.encoder_kind == "small_cnn":
        if x.shape[1] != c:
            raise ShapeError(f"encoder expects {c} channels, got image shape {x.shape[1:]}")
        for i in range(1, len(cfg.conv_channels) + 1):
            x = nx.relu(nx.conv2d(x, enc[f"conv{i}.w"], enc[f"conv{i}.b"], stride=2, padding=1))
        pooled = nx.mean(x, axis=(2, 3))
        rep = nx.linear(pooled, enc["fc.w"], enc["fc.b"])
    else:
        if x.shape[1:] != (c, h, w):
            raise ShapeError(f"encoder expects images of shape {(c, h, w)}, got {x.shape[1:]}")
        flat = nx.reshape(x, (x.shape[0], c * h * w))
        hidden = nx.relu(nx.linear(flat, enc["fc1.w"], enc["fc1.b"]))
        rep = nx.linear(hidden, enc["fc2.w"], enc["fc2.b"])
    return _unbatch(rep, single)


def projection_forward(representation, params: ModelParams) -> Tensor:
    """Two dense layers with ReLU between, then L2 normalization."""
    cfg = params.config
    r, single = _batched(representation, 1)
    if r.shape[1] != cfg.rep_dim:
        raise ShapeError(f"projection expects representations of dim {cfg.rep_dim}, got {r.shape[1]}")
    proj = params.groups["projection"]
    hidden = nx.relu(nx.linear(r, proj["fc1.w"], proj["fc1.b"]))
    z = nx.l2_normalize(nx.linear(hidden, proj["fc2.w"], proj["fc2.b"]), axis=-1)
    return _unbatch(z, single)


def aux_statistics(aux) -> np.ndarray:
    """(mean, std, min, max) of a raster; a scalar v maps to (v, 0, v, v)."""
    a = np.asarray(aux, dtype=np.float64)
    if a.ndim == 0:
        v = float(a)
        if not math.isfinite(v):
            raise ValueError("auxiliary value is not finite")
        return np.array([v, 0.0, v, v])
    if a.size == 0:
        raise ShapeError(f"empty auxiliary raster of shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("auxiliary raster contains non-finite values")
    return np.array([a.mean(), a.std(), a.min(), a.max()])


def featurize_stats(stats, params: ModelParams, name: str) -> Tensor:
    """Map summary statistics (4,) or (N, 4) to auxiliary features."""
    s = nx.as_tensor(stats)
    if s.shape[-1] != AUX_STAT_DIM:
        raise ShapeError(f"auxiliary statistics must have {AUX_STAT_DIM} entries, got {s.shape}")
    if not params.config.aux_dense:
        return s
    aux = params.groups["aux_featurizer"]
    if f"{name}.w" not in aux:
        raise ConfigError(f"no featurizer weights for auxiliary {name!r}")
    return nx.linear(s, aux[f"{name}.w"], aux[f"{name}.b"])


def aux_featurize(aux, params: ModelParams, name: str) -> Tensor:
    """Features of one auxiliary raster (or scalar) for the named auxiliary."""
    return featurize_stats(aux_statistics(aux), params, name)


def fuse(representation, aux_features: Sequence, num_aux: int | None = None) -> Tensor:
    """Concatenate the representation with auxiliary features, in that order."""
    rep = nx.as_tensor(representation)
    if num_aux is not None and len(aux_features) != num_aux:
        raise ConfigError(f"expected {num_aux} auxiliary feature vectors, got {len(aux_features)}")
    if not aux_features:
        return rep
    return nx.concat([rep, *aux_features], axis=-1)


def classifier_logits(fused, params: ModelParams) -> Tensor:
    cfg = params.config
    x, single = _batched(fused, 1)
    if x.shape[1] != cfg.classifier_in_dim:
        raise ShapeError(f"classifier expects input dim {cfg.classifier_in_dim}, got {x.shape[1]}")
    clf = params.groups["classifier"]
    n_layers = len(cfg.classifier_hidden) + 1
    for i in range(1, n_layers + 1):
        x = nx.linear(x, clf[f"fc{i}.w"], clf[f"fc{i}.b"])
        if i < n_layers:
            x = nx.relu(x)
    return _unbatch(x, single)


def classifier_forward(fused, params: ModelParams) -> Tensor:
    """Class probabilities from the fused representation."""
    return nx.softmax(classifier_logits(fused, params), axis=-1)


def fused_features(images, aux_stats: Mapping[str, np.ndarray], params: ModelParams) -> Tensor:
    """Encoder output concatenated with each configured auxiliary's features.

    ``aux_stats[name]`` holds the (N, 4) summary statistics of that auxiliary.
    """
    rep = encoder_forward(images, params)
    names = params.config.aux_names
    missing = [n for n in names if n not in aux_stats]
    if missing:
        raise ConfigError(f"missing auxiliary inputs {missing}")
    feats = [featurize_stats(aux_stats[n], params, n) for n in names]
    return fuse(rep, feats, params.config.num_aux)


# ------------------------------------------------------------------ checkpoint


def _meta_records(config: ModelConfig) -> list[tuple[str, np.ndarray]]:
    return [("meta/image_shape", np.asarray(config.image_shape, dtype=np.float64))]


def serialize(params: ModelParams) -> bytes:
    """Binary checkpoint; frozen flags are not stored."""
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    records = _meta_records(params.config) + [(n, t.data) for n, t in params.named()]
    for name, arr in records:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def deserialize(blob: bytes) -> ModelParams:
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an MSCN checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    records: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt tensor name") from exc
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        if name in records:
            raise CheckpointError(f"duplicate tensor {name!r}")
        records[name] = values

    groups: dict[str, dict[str, Tensor]] = {g: {} for g in GROUPS}
    meta: dict[str, np.ndarray] = {}
    for full, arr in records.items():
        group, sep, name = full.partition("/")
        if not sep:
            raise CheckpointError(f"tensor name {full!r} lacks a group prefix")
        if group == "meta":
            meta[name] = arr
        elif group in groups:
            groups[group][name] = Tensor(arr, requires_grad=True)
        else:
            raise CheckpointError(f"unknown parameter group in {full!r}")
    config = _infer_config(groups, meta)
    params = ModelParams(config, groups)
    _check_layout(params)
    return params


def _infer_config(groups: dict[str, dict[str, Tensor]], meta: dict[str, np.ndarray]) -> ModelConfig:
    try:
        enc, proj, aux, clf = (groups[g] for g in GROUPS)
        image_shape = tuple(int(v) for v in meta["image_shape"])
        kw: dict = {"image_shape": image_shape}
        if "conv1.w" in enc:
            kw["encoder_kind"] = "small_cnn"
            n_conv = sum(1 for k in enc if k.startswith("conv") and k.endswith(".w"))
            kw["conv_channels"] = tuple(enc[f"conv{i}.w"].shape[0] for i in range(1, n_conv + 1))
            kw["rep_dim"] = enc["fc.w"].shape[1]
        else:
            kw["encoder_kind"] = "mlp"
            kw["mlp_hidden"] = enc["fc1.w"].shape[1]
            kw["rep_dim"] = enc["fc2.w"].shape[1]
        kw["proj_hidden"] = proj["fc1.w"].shape[1]
        kw["proj_out"] = proj["fc2.w"].shape[1]
        n_clf = sum(1 for k in clf if k.endswith(".w"))
        widths = [clf[f"fc{i}.w"].shape[1] for i in range(1, n_clf + 1)]
        kw["classifier_hidden"] = tuple(widths[:-1])
        kw["num_classes"] = widths[-1]
        aux_w = [k for k in aux if k.endswith(".w")]
        kw["aux_feature_dim"] = aux[aux_w[0]].shape[1] if aux_w else AUX_STAT_DIM
        extra = clf["fc1.w"].shape[0] - kw["rep_dim"]
        if extra % kw["aux_feature_dim"]:
            raise CheckpointError("classifier input width is inconsistent with the auxiliary features")
        kw["num_aux"] = extra // kw["aux_feature_dim"]
        # a model without auxiliaries keeps the default dense setting
        kw["aux_dense"] = bool(aux_w) or kw["num_aux"] == 0
        return ModelConfig(**kw)
    except (KeyError, IndexError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"checkpoint does not describe a complete model: {exc}") from exc


def _check_layout(params: ModelParams) -> None:
    reference = init_params(params.config, seed=0)
    for g in GROUPS:
        want = {n: t.shape for n, t in reference.groups[g].items()}
        have = {n: t.shape for n, t in params.groups[g].items()}
        if want != have:
            raise CheckpointError(f"group {g!r} layout {have} does not match {want}")


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(params))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def with_num_aux(params: ModelParams, num_aux: int, seed: int = 0) -> ModelParams:
    """Copy of ``params`` whose aux featurizer and classifier are re-initialized for ``num_aux``."""
    config = replace(params.config, num_aux=num_aux)
    fresh = init_params(config, seed)
    out = params.copy()
    out.config = config
    out.groups["aux_featurizer"] = fresh.groups["aux_featurizer"]
    out.groups["classifier"] = fresh.groups["classifier"]
    return out
