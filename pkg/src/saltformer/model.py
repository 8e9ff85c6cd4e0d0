"""Classifier assembly, parameter registry and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import DENSE, PARTITIONED, AttentionWeights, dense, full_mha, linformer_attention, lpp_mha
from .errors import CheckpointError, ConfigError, DataError, DimensionError
from .jets import SortKey, partition_bounds
from .tensor import Tensor

VARIANTS = ("salt", "linformer", "transformer")
PARTITION_MODES = ("both", "key", "value", "none")
DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor shared by the model builder and the profiler.

    The ablation switches ``conv``, ``partition`` and ``share_ef`` only apply
    to the ``salt`` variant; ``None`` means "variant default".
    """

    variant: str = "salt"
    n: int = 150
    d: int = 16
    heads: int = 4
    proj: int = 4
    filters: tuple[int, ...] = (1, 3, 5)
    layers: int = 1
    classes: int = 5
    sort_key: str = "kt"
    dtype: str = "f64"
    seed: int = 0
    conv: bool | None = None
    partition: str | None = None
    share_ef: bool | None = None
    partition_rule: str = "ceil"

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(h) for h in self.filters))
        object.__setattr__(self, "variant", str(self.variant).lower())
        object.__setattr__(self, "sort_key", SortKey.parse(self.sort_key).value)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("n", "d", "heads", "proj"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.layers not in (1, 2):
            raise ConfigError(f"layers must be 1 or 2, got {self.layers}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.partition is not None and self.partition not in PARTITION_MODES:
            raise ConfigError(f"partition must be one of {PARTITION_MODES}, got {self.partition!r}")
        if self.variant != "transformer" and self.proj > self.n:
            raise ConfigError(f"proj={self.proj} exceeds n={self.n}")
        if self.variant == "transformer":
            for name in ("conv", "partition", "share_ef"):
                if getattr(self, name) not in (None, False, "none"):
                    raise ConfigError(f"transformer variant does not accept {name}={getattr(self, name)!r}")
        if self.variant == "linformer":
            if self.conv:
                raise ConfigError("linformer variant does not accept conv=True; use salt with partition='none'")
            if self.partition not in (None, "none"):
                raise ConfigError(f"linformer variant does not accept partition={self.partition!r}")
            if self.share_ef:
                raise ConfigError("linformer variant does not accept share_ef=True")
        if self.variant == "salt":
            if self.use_conv:
                if not self.filters:
                    raise ConfigError("conv needs at least one filter height")
                for h in self.filters:
                    if h < 1 or h % 2 == 0:
                        raise ConfigError(f"filter heights must be odd and positive, got {h}")
            if self.share_ef and self.partition_mode in ("key", "value"):
                raise ConfigError("share_ef cannot be combined with a key-only or value-only partition")
            if self.partition_mode != "none":
                partition_bounds(self.n, self.proj, self.partition_rule)

    @property
    def use_conv(self) -> bool:
        return self.variant == "salt" and (True if self.conv is None else bool(self.conv))

    @property
    def partition_mode(self) -> str:
        if self.variant != "salt":
            return "none"
        return "both" if self.partition is None else self.partition

    @property
    def shares_ef(self) -> bool:
        return self.variant == "salt" and bool(self.share_ef)

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def out_dim(self) -> int:
        """Width of the output layer; two-class tasks use one logit."""
        return 1 if self.classes == 2 else self.classes

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def bounds(self) -> list[tuple[int, int]]:
        return partition_bounds(self.n, self.proj, self.partition_rule)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


PRESETS = {
    "salt": dict(variant="salt"),
    "salt-no-conv": dict(variant="salt", conv=False),
    "salt-no-partition": dict(variant="salt", partition="none"),
    "salt-partition-key-only": dict(variant="salt", partition="key"),
    "salt-partition-value-only": dict(variant="salt", partition="value"),
    "salt-share-ef": dict(variant="salt", share_ef=True),
    "linformer": dict(variant="linformer"),
    "transformer": dict(variant="transformer"),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


# ---------------------------------------------------------------- model


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise CheckpointError(f"missing tensor {k!r}")
            if state[k].shape != v.shape:
                raise CheckpointError(f"tensor {k!r} has shape {state[k].shape}, expected {v.shape}")
            v.data = np.array(state[k], dtype=v.dtype, copy=True)

    def attention_weights(self, layer: int) -> AttentionWeights:
        cfg = self.config
        p = self.params
        pre = f"layer{layer}."
        w = AttentionWeights(
            heads=cfg.heads,
            w_q=p[pre + "q.w"], b_q=p[pre + "q.b"],
            w_k=p[pre + "k.w"], b_k=p[pre + "k.b"],
            w_v=p[pre + "v.w"], b_v=p[pre + "v.b"],
            w_o=p[pre + "o.w"], b_o=p[pre + "o.b"],
        )
        if cfg.variant == "transformer":
            return w
        mode = cfg.partition_mode
        w.e_mode = PARTITIONED if mode in ("both", "key") else DENSE
        w.f_mode = PARTITIONED if mode in ("both", "value") else DENSE
        w.bounds = cfg.bounds() if mode != "none" else None
        w.e = p[pre + "e"]
        w.f = p[pre + "e"] if cfg.shares_ef else p[pre + "f"]
        if cfg.use_conv:
            w.kernels = [p[f"{pre}conv.k{i}"] for i in range(len(cfg.filters))]
            w.conv_bias = p[pre + "conv.b"]
        return w

    def forward(self, batch, trace: list | None = None) -> Tensor:
        return forward(self, batch, trace)

    __call__ = forward


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return T.parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def _layer_spec(cfg: ModelConfig, layer: int) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every parameter of one attention block."""
    d, h, p = cfg.d, cfg.heads, cfg.proj
    pre = f"layer{layer}."
    spec = []
    for name in ("q", "k", "v", "o"):
        spec.append((f"{pre}{name}.w", (d, d), d))
        spec.append((f"{pre}{name}.b", (d,), d))
    if cfg.variant != "transformer":
        mode = cfg.partition_mode
        width = max(b - a for a, b in cfg.bounds()) if mode != "none" else cfg.n
        e_width = width if mode in ("both", "key") else cfg.n
        f_width = width if mode in ("both", "value") else cfg.n
        spec.append((pre + "e", (h, p, e_width), e_width))
        if not cfg.shares_ef:
            spec.append((pre + "f", (h, p, f_width), f_width))
        if cfg.use_conv:
            for i, fh in enumerate(cfg.filters):
                spec.append((f"{pre}conv.k{i}", (fh, p), fh * p))
            spec.append((pre + "conv.b", (len(cfg.filters),), max(cfg.filters) * p))
    spec.append((pre + "dyt.alpha", (d,), 0))
    spec.append((pre + "dyt.gamma", (d,), 0))
    spec.append((pre + "dyt.beta", (d,), 0))
    spec.append((pre + "ffn1.w", (d, d), d))
    spec.append((pre + "ffn1.b", (d,), d))
    spec.append((pre + "ffn2.w", (d, d), d))
    spec.append((pre + "ffn2.b", (d,), d))
    return spec


def parameter_spec(cfg: ModelConfig) -> list[tuple[str, tuple, int]]:
    """Ordered (name, shape, fan_in) list; fan_in 0 marks fixed-value inits."""
    d = cfg.d
    spec = [("embed.w", (3, d), 3), ("embed.b", (d,), 3)]
    for layer in range(cfg.layers):
        spec.extend(_layer_spec(cfg, layer))
    spec += [
        ("head1.w", (d, d), d),
        ("head1.b", (d,), d),
        ("head2.w", (d, cfg.out_dim), d),
        ("head2.b", (cfg.out_dim,), d),
    ]
    return spec


DYT_ALPHA0 = 0.5


def build_model(cfg: ModelConfig) -> Model:
    """Seeded uniform(+-1/sqrt(fan_in)) init; DyT starts at alpha=0.5, gamma=1, beta=0."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dtype = cfg.np_dtype
    params: dict[str, Tensor] = {}
    for name, shape, fan_in in parameter_spec(cfg):
        if name.endswith("dyt.alpha"):
            params[name] = T.parameter(np.full(shape, DYT_ALPHA0), dtype=dtype)
        elif name.endswith("dyt.gamma"):
            params[name] = T.parameter(np.ones(shape), dtype=dtype)
        elif name.endswith("dyt.beta"):
            params[name] = T.parameter(np.zeros(shape), dtype=dtype)
        else:
            params[name] = _uniform(rng, shape, fan_in, dtype)
    return Model(cfg, params)


def count_params(model: Model) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def attention_block(model: Model, h: Tensor, layer: int, trace: list | None = None) -> Tensor:
    cfg = model.config
    w = model.attention_weights(layer)
    if cfg.variant == "transformer":
        return full_mha(h, w)
    if cfg.variant == "linformer":
        return linformer_attention(h, w)
    out, tr = lpp_mha(h, w)
    if trace is not None:
        trace.append(tr)
    return out


def forward(model: Model, batch, trace: list | None = None) -> Tensor:
    """Map ``(B, n, 3)`` padded jets to ``(B, out_dim)`` logits."""
    cfg = model.config
    p = model.params
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=cfg.np_dtype))
    if x.ndim != 3 or x.shape[2] != 3:
        raise DimensionError(f"expected batch of shape (B, n, 3), got {x.shape}")
    if x.shape[1] != cfg.n:
        raise DimensionError(f"expected sequence length n={cfg.n}, got {x.shape[1]}")
    if x.dtype != cfg.np_dtype:
        x = Tensor(x.data.astype(cfg.np_dtype))
    h = dense(x, p["embed.w"], p["embed.b"])
    for layer in range(cfg.layers):
        pre = f"layer{layer}."
        h = attention_block(model, h, layer, trace)
        h = T.dyt(h, p[pre + "dyt.alpha"], p[pre + "dyt.gamma"], p[pre + "dyt.beta"])
        h = T.relu(dense(h, p[pre + "ffn1.w"], p[pre + "ffn1.b"]))
        h = dense(h, p[pre + "ffn2.w"], p[pre + "ffn2.b"])
    pooled = T.max_over_sequence(h)
    hidden = T.relu(dense(pooled, p["head1.w"], p["head1.b"]))
    return dense(hidden, p["head2.w"], p["head2.b"])


def loss_fn(cfg: ModelConfig, logits: Tensor, labels) -> Tensor:
    if cfg.out_dim == 1:
        return T.sigmoid_binary_cross_entropy(logits, labels)
    return T.softmax_cross_entropy(logits, labels)


def logits_to_scores(cfg: ModelConfig, logits: np.ndarray) -> np.ndarray:
    """Per-class probabilities ``(B, classes)`` from raw logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if cfg.out_dim == 1:
        s = 1.0 / (1.0 + np.exp(-logits[:, 0]))
        return np.column_stack([1.0 - s, s])
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_scores(model: Model, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward(model, x[i:i + batch_size]).data)
    return logits_to_scores(model.config, np.concatenate(out, axis=0))


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SALTCKPT"


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Header JSON (config, tensor order, payload digest) followed by raw tensor blocks."""
    blocks = b"".join(T.encode_tensor(t.data) for t in model.params.values())
    header = {
        "config": model.config.to_dict(),
        "tensors": list(model.params),
        "sha256": hashlib.sha256(blocks).hexdigest(),
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(raw)) + raw + blocks)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        (hlen,) = struct.unpack_from("<I", buf, len(CKPT_MAGIC))
        start = len(CKPT_MAGIC) + 4
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: truncated or corrupt header") from None
    blocks = buf[start + hlen:]
    if hashlib.sha256(blocks).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: payload digest mismatch (truncated or corrupt)")
    tensors = {}
    offset = 0
    try:
        for name in header["tensors"]:
            tensors[name], offset = T.decode_tensor(blocks, offset)
    except DataError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if offset != len(blocks):
        raise CheckpointError(f"{path}: trailing bytes after tensor blocks")
    return header, tensors


def load_checkpoint(path, expect: ModelConfig | None = None) -> Model:
    """Rebuild the model stored at ``path``.

    When ``expect`` is given, every config field must agree with the stored
    one; the first disagreeing field is named in the error.
    """
    header, tensors = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid stored config ({exc})") from None
    if expect is not None:
        for name, value in expect.to_dict().items():
            stored = cfg.to_dict()[name]
            if stored != value:
                raise CheckpointError(f"config field '{name}' mismatch: checkpoint has {stored!r}, expected {value!r}")
    model = build_model(cfg)
    if list(tensors) != list(model.params):
        raise CheckpointError(f"{path}: tensor names do not match the config's registry")
    model.load_state(tensors)
    return model
