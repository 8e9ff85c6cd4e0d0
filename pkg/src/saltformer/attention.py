"""Full, low-rank and partitioned multi-head attention kernels.

All kernels accept ``x`` as ``(n, d)`` or ``(B, n, d)`` tensors and return
the same rank. Per-head sequence projections are stored as ``(H, p, width)``
tensors: ``width == n`` for dense projections, and for partitioned
projections row ``i`` holds the weights of partition ``i`` left-aligned
(entries past the partition's length are unused).
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

DENSE = "dense"
PARTITIONED = "partitioned"


@dataclass
class AttentionWeights:
    """Weights of one attention layer.

    ``e``/``f`` are the key/value sequence projections (``None`` for full
    attention); ``e_mode``/``f_mode`` say whether each one is dense or
    partitioned. Sharing is expressed by passing the same tensor twice.
    """

    heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor | None = None
    b_k: Tensor | None = None
    b_v: Tensor | None = None
    b_o: Tensor | None = None
    e: Tensor | None = None
    f: Tensor | None = None
    e_mode: str = DENSE
    f_mode: str = DENSE
    bounds: list[tuple[int, int]] | None = None
    kernels: list[Tensor] = field(default_factory=list)
    conv_bias: Tensor | None = None

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_head(self) -> int:
        return self.d_k // self.heads

    def validate(self, n: int) -> None:
        if self.d_k % self.heads:
            raise ConfigError(f"projection width {self.d_k} is not divisible by {self.heads} heads")
        for name in ("w_k", "w_v"):
            if getattr(self, name).shape != self.w_q.shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {self.w_q.shape}")
        if self.w_o.shape != (self.d_k, self.d_model):
            raise DimensionError(f"w_o has shape {self.w_o.shape}, expected {(self.d_k, self.d_model)}")
        for proj, mode in ((self.e, self.e_mode), (self.f, self.f_mode)):
            if proj is None:
                continue
            if mode == DENSE and proj.shape[-1] != n:
                raise DimensionError(f"dense projection width {proj.shape[-1]} does not match sequence length {n}")
            if mode == PARTITIONED:
                if self.bounds is None:
                    raise ConfigError("partitioned projection needs partition bounds")
                widest = max(b - a for a, b in self.bounds)
                if proj.shape[-2] != len(self.bounds) or proj.shape[-1] < widest:
                    raise ConfigError(
                        f"partitioned projection {proj.shape} cannot hold {len(self.bounds)} partitions of width {widest}"
                    )
                if self.bounds[-1][1] != n:
                    raise DimensionError(f"partitions cover {self.bounds[-1][1]} rows but sequence has {n}")


@dataclass
class AttentionTrace:
    """Per-head ``n x p`` score maps captured during one forward pass."""

    logits_pre_conv: np.ndarray
    logits_post_conv: np.ndarray
    weights_post_softmax: np.ndarray

    STAGES = ("pre_conv", "post_conv", "post_softmax")

    def stage(self, name: str) -> np.ndarray:
        return {
            "pre_conv": self.logits_pre_conv,
            "post_conv": self.logits_post_conv,
            "post_softmax": self.weights_post_softmax,
        }[name]

    def write_csv(self, out_dir, jet: int = 0, prefix: str = "attn") -> list[str]:
        """Write one CSV per (head, stage); returns the file paths."""
        paths = []
        maps = {s: self.stage(s) for s in self.STAGES}
        if maps["pre_conv"].ndim == 4:
            maps = {s: m[jet] for s, m in maps.items()}
        heads, _, p = maps["pre_conv"].shape
        for h in range(heads):
            for s in self.STAGES:
                path = os.path.join(out_dir, f"{prefix}_head{h}_{s}.csv")
                with open(path, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow([f"head{h}_{s}_row"] + [f"col{j}" for j in range(p)])
                    for i, row in enumerate(maps[s][h]):
                        w.writerow([i] + [repr(float(v)) for v in row])
                paths.append(path)
        return paths


# ---------------------------------------------------------------- helpers


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"attention input must be (n, d) or (B, n, d), got {x.shape}")
    return x, False


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"dense layer expects {w.shape[0]} input features, got {x.shape}")
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, dk = t.shape
    return T.transpose(T.reshape(t, (b, n, heads, dk // heads)), (0, 2, 1, 3))


def merge_heads(t: Tensor) -> Tensor:
    b, h, n, dh = t.shape
    return T.reshape(T.transpose(t, (0, 2, 1, 3)), (b, n, h * dh))


def _qkv(x: Tensor, w: AttentionWeights) -> tuple[Tensor, Tensor, Tensor]:
    if x.shape[-1] != w.d_model:
        raise DimensionError(f"input feature size {x.shape[-1]} does not match d={w.d_model}")
    q = split_heads(dense(x, w.w_q, w.b_q), w.heads)
    k = split_heads(dense(x, w.w_k, w.b_k), w.heads)
    v = split_heads(dense(x, w.w_v, w.b_v), w.heads)
    return q, k, v


def _finish(out_heads: Tensor, w: AttentionWeights, squeeze: bool) -> Tensor:
    out = dense(merge_heads(out_heads), w.w_o, w.b_o)
    return T.reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------- kernels


def full_mha(x: Tensor, w: AttentionWeights) -> Tensor:
    """Standard multi-head self-attention with 1/sqrt(d_h) scaling."""
    x, squeeze = _batched(x)
    q, k, v = _qkv(x, w)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(w.d_head))
    return _finish(T.matmul(T.softmax_lastdim(scores), v), w, squeeze)


def linformer_attention(x: Tensor, w: AttentionWeights, e: Tensor | None = None, f: Tensor | None = None) -> Tensor:
    """Low-rank attention: keys and values are compressed along the sequence.

    ``e``/``f`` may be ``(p, n)`` (shared by all heads) or ``(H, p, n)``;
    they default to ``w.e``/``w.f``.
    """
    x, squeeze = _batched(x)
    e = w.e if e is None else e
    f = w.f if f is None else f
    n = x.shape[1]
    for name, m in (("e", e), ("f", f)):
        if m is None:
            raise ConfigError(f"linformer attention needs projection {name}")
        if m.shape[-1] != n:
            raise DimensionError(f"projection {name} has width {m.shape[-1]}, sequence length is {n}")
    q, k, v = _qkv(x, w)
    kp = T.matmul(e, k)
    vp = T.matmul(f, v)
    scores = T.mul(T.matmul(q, T.transpose(kp, (0, 1, 3, 2))), 1.0 / math.sqrt(w.d_head))
    return _finish(T.matmul(T.softmax_lastdim(scores), vp), w, squeeze)


def lpp_project(seq: Tensor, bounds: Sequence[tuple[int, int]], rows: Sequence[Tensor | None]) -> Tensor:
    """Project each partition of ``seq[..., n, d_h]`` onto one output row.

    ``rows[i]`` has trailing extent equal to the length of ``bounds[i]``
    (leading extents broadcast against ``seq``). Row ``i`` of the result is
    ``rows[i] @ seq[..., a_i:b_i, :]`` so it mixes only that partition's
    tokens. An empty partition yields a zero row and its entry may be ``None``.
    """
    if len(bounds) != len(rows):
        raise ConfigError(f"{len(bounds)} partitions but {len(rows)} projection rows")
    n = seq.shape[-2]
    if bounds and bounds[-1][1] > n:
        raise ConfigError(f"partitions reach row {bounds[-1][1]} but sequence has {n} rows")
    parts: list[Tensor | None] = []
    for (a, b), r in zip(bounds, rows):
        if b == a:
            parts.append(None)
            continue
        if r is None or r.shape[-1] != b - a:
            width = None if r is None else r.shape[-1]
            raise ConfigError(f"partition [{a},{b}) has {b - a} rows but its projection has width {width}")
        r2 = T.reshape(r, r.shape[:-1] + (1, r.shape[-1]))
        parts.append(T.matmul(r2, seq[..., a:b, :]))
    real = [t for t in parts if t is not None]
    if not real:
        raise ConfigError("every partition is empty")
    zero_shape = real[0].shape
    parts = [Tensor(np.zeros(zero_shape, dtype=seq.dtype)) if t is None else t for t in parts]
    return T.concat(parts, axis=-2)


def packed_rows(packed: Tensor, bounds: Sequence[tuple[int, int]]) -> list[Tensor | None]:
    """Slice an ``(H, p, width)`` partitioned projection into per-partition rows."""
    return [packed[..., i, : b - a] if b > a else None for i, (a, b) in enumerate(bounds)]


def build_block_diagonal(bounds: Sequence[tuple[int, int]], rows, n: int | None = None) -> Tensor:
    """Dense ``(p, n)`` matrix equal to ``rows[i]`` inside ``bounds[i]`` and zero elsewhere."""
    if len(bounds) != len(rows):
        raise ConfigError(f"{len(bounds)} partitions but {len(rows)} projection rows")
    n = bounds[-1][1] if n is None else n
    arrays = [np.asarray(r.data if isinstance(r, Tensor) else r, dtype=np.float64) for r in rows]
    m = np.zeros((len(bounds), n), dtype=arrays[0].dtype if arrays else np.float64)
    for i, ((a, b), r) in enumerate(zip(bounds, arrays)):
        if r.shape != (b - a,):
            raise DimensionError(f"row {i} has shape {r.shape}, partition [{a},{b}) needs ({b - a},)")
        m[i, a:b] = r
    return Tensor(m)


def block_diagonal_from_packed(packed, bounds, n: int) -> np.ndarray:
    """Expand an ``(H, p, width)`` partitioned projection to dense ``(H, p, n)``."""
    arr = np.asarray(packed.data if isinstance(packed, Tensor) else packed)
    out = np.zeros(arr.shape[:-1] + (n,), dtype=arr.dtype)
    for i, (a, b) in enumerate(bounds):
        out[..., i, a:b] = arr[..., i, : b - a]
    return out


def project_sequence(seq: Tensor, proj: Tensor, mode: str, bounds) -> Tensor:
    if mode == DENSE:
        return T.matmul(proj, seq)
    if mode == PARTITIONED:
        return lpp_project(seq, bounds, packed_rows(proj, bounds))
    raise ConfigError(f"unknown projection mode {mode!r}")


def lpp_mha(x: Tensor, w: AttentionWeights) -> tuple[Tensor, AttentionTrace]:
    """Partitioned low-rank attention with convolution over the ``n x p`` logits.

    Per head: ``softmax(conv(Q_h K^P_h^T / sqrt(d_h))) V^P_h``. The conv stage
    is skipped when ``w.kernels`` is empty.
    """
    x, squeeze = _batched(x)
    n = x.shape[1]
    w.validate(n)
    if w.e is None or w.f is None:
        raise ConfigError("partitioned attention needs key and value projections")
    q, k, v = _qkv(x, w)
    kp = project_sequence(k, w.e, w.e_mode, w.bounds)
    vp = project_sequence(v, w.f, w.f_mode, w.bounds)
    logits = T.mul(T.matmul(q, T.transpose(kp, (0, 1, 3, 2))), 1.0 / math.sqrt(w.d_head))
    mixed = T.depthwise_conv2d_same_avg(logits, w.kernels, w.conv_bias) if w.kernels else logits
    attn = T.softmax_lastdim(mixed)
    out = _finish(T.matmul(attn, vp), w, squeeze)
    pick = (lambda a: a[0]) if squeeze else (lambda a: a)
    trace = AttentionTrace(pick(logits.data), pick(mixed.data), pick(attn.data))
    return out, trace
