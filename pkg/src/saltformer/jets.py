"""Jet and particle data model, orderings, padding, scaling and file IO."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

MORTON_BITS = 10


class SortKey(str, Enum):
    PT_DESC = "pt"
    KT_DESC = "kt"
    DR_DESC = "dr"
    MORTON = "morton"

    @classmethod
    def parse(cls, value) -> "SortKey":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown sort key {value!r}; expected one of {choices}") from None


def wrap_phi(dphi):
    """Map angles into the half-open interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(dphi, dtype=np.float64), 2.0 * np.pi)


@dataclass(frozen=True)
class Particle:
    pt: float
    deta: float
    dphi: float

    @property
    def dr(self) -> float:
        return math.hypot(self.deta, self.dphi)

    @property
    def kt(self) -> float:
        return self.pt * self.dr


def derive_features(pt: float, deta: float, dphi: float) -> Particle:
    values = (pt, deta, dphi)
    if not all(math.isfinite(v) for v in values):
        raise DataError(f"non-finite particle features {values}")
    if pt < 0:
        raise DataError(f"pt must be non-negative, got {pt}")
    return Particle(float(pt), float(deta), float(wrap_phi(dphi)))


@dataclass
class Jet:
    """A labelled point cloud; ``particles`` is a (k, 3) array of (pt, deta, dphi)."""

    particles: np.ndarray
    label: int = 0

    def __post_init__(self):
        arr = np.asarray(self.particles, dtype=np.float64)
        if arr.size == 0:
            arr = np.zeros((0, 3))
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise DataError(f"particles must have shape (k, 3), got {arr.shape}")
        self.particles = arr
        self.label = int(self.label)

    @classmethod
    def from_particles(cls, particles: Iterable[Particle], label: int = 0) -> "Jet":
        rows = [(p.pt, p.deta, p.dphi) for p in particles]
        return cls(np.array(rows, dtype=np.float64).reshape(-1, 3), label)

    def __len__(self) -> int:
        return self.particles.shape[0]

    @property
    def pt(self) -> np.ndarray:
        return self.particles[:, 0]

    @property
    def dr(self) -> np.ndarray:
        return np.hypot(self.particles[:, 1], self.particles[:, 2])

    @property
    def kt(self) -> np.ndarray:
        return self.pt * self.dr

    @property
    def pad_mask(self) -> np.ndarray:
        return ~self.particles.any(axis=1)

    @property
    def multiplicity(self) -> int:
        return int((~self.pad_mask).sum())

    def as_particles(self) -> list[Particle]:
        return [Particle(*map(float, row)) for row in self.particles]

    def has_pad_suffix(self) -> bool:
        """True when pad rows, if any, form one contiguous block at the end."""
        mask = self.pad_mask
        if not mask.any():
            return True
        first = int(np.argmax(mask))
        return bool(mask[first:].all())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Jet):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.particles, other.particles)


# ---------------------------------------------------------------- ordering


def morton_codes(points, bits: int = MORTON_BITS) -> np.ndarray:
    """Interleaved z-order codes; axis 0 occupies the lowest bit of each triple."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"morton points must have shape (k, 3), got {pts.shape}")
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(pts)):
        raise DataError("morton points must be finite")
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    scale = np.where(span > 0, span, 1.0)
    levels = 1 << bits
    q = np.floor((pts - lo) / scale * levels).astype(np.int64)
    q = np.clip(q, 0, levels - 1)
    codes = np.zeros(pts.shape[0], dtype=np.int64)
    for b in range(bits):
        for axis in range(3):
            codes |= ((q[:, axis] >> b) & 1) << (3 * b + axis)
    return codes


def morton_sort(points) -> np.ndarray:
    """Stable ascending permutation of ``points`` by Morton code."""
    return np.argsort(morton_codes(points), kind="stable")


def _order(rows: np.ndarray, key: SortKey) -> np.ndarray:
    pt, deta, dphi = rows[:, 0], rows[:, 1], rows[:, 2]
    ties = (-dphi, -deta, -pt)
    if key is SortKey.MORTON:
        codes = morton_codes(np.column_stack([deta, dphi, np.zeros_like(pt)]))
        return np.lexsort(ties + (codes,))
    dr = np.hypot(deta, dphi)
    primary = {SortKey.PT_DESC: pt, SortKey.KT_DESC: pt * dr, SortKey.DR_DESC: dr}[key]
    return np.lexsort(ties + (-primary,))


def sort_jet(jet: Jet, key=SortKey.KT_DESC) -> Jet:
    """Canonical ordering of the real particles, pad rows kept at the end.

    Descending keys break ties by pt, then deta, then dphi (all descending),
    so the result does not depend on the input order.
    """
    key = SortKey.parse(key)
    mask = jet.pad_mask
    real = jet.particles[~mask]
    ordered = real[_order(real, key)] if len(real) else real
    pads = np.zeros((int(mask.sum()), 3))
    return Jet(np.concatenate([ordered, pads], axis=0), jet.label)


def truncate_pad(jet: Jet, n: int, pt_min: float = 1.0) -> Jet:
    """Keep the ``n`` hardest particles above ``pt_min`` and zero-pad to ``n`` rows."""
    if n < 1:
        raise ConfigError(f"capacity n must be >= 1, got {n}")
    if pt_min < 0:
        raise ConfigError(f"pt_min must be >= 0, got {pt_min}")
    rows = jet.particles[jet.pt > pt_min]
    if len(rows) > n:
        keep = np.sort(np.argsort(-rows[:, 0], kind="stable")[:n])
        rows = rows[keep]
    out = np.zeros((n, 3))
    out[: len(rows)] = rows
    return Jet(out, jet.label)


# ---------------------------------------------------------------- scaling


@dataclass(frozen=True)
class PtScaler:
    q05: float
    q95: float

    def __post_init__(self):
        if not self.q95 > self.q05:
            raise DataError(f"degenerate pt quantiles q05={self.q05}, q95={self.q95}")

    def transform(self, pt):
        return (np.asarray(pt, dtype=np.float64) - self.q05) / (self.q95 - self.q05)


def fit_pt_scaler(train_jets: Sequence[Jet]) -> PtScaler:
    """Fit 5%/95% quantiles of nonzero pt pooled over the training jets."""
    pts = [j.pt[~j.pad_mask] for j in train_jets]
    pooled = np.concatenate(pts) if pts else np.zeros(0)
    pooled = pooled[pooled != 0]
    if np.unique(pooled).size < 2:
        raise DataError("need at least two distinct nonzero pt values to fit the scaler")
    q05, q95 = np.quantile(pooled, [0.05, 0.95], method="linear")
    return PtScaler(float(q05), float(q95))


def apply_pt_scaler(scaler: PtScaler, jet: Jet) -> Jet:
    out = jet.particles.copy()
    real = ~jet.pad_mask
    out[real, 0] = scaler.transform(out[real, 0])
    return Jet(out, jet.label)


# ---------------------------------------------------------------- partitions


def partition_bounds(n: int, p: int, rule: str = "floor") -> list[tuple[int, int]]:
    """Split ``[0, n)`` into ``p`` contiguous half-open ranges.

    ``"floor"`` gives the first ``p - 1`` ranges ``n // p`` rows and the last
    one the remainder. ``"ceil"`` uses a fixed width ``ceil(n / p)`` for every
    range and clips at ``n``, so trailing ranges may be short or empty.
    Either way the tail of the sequence, where padding lives, ends up in the
    last partition(s).
    """
    if p < 1:
        raise ConfigError(f"partition count must be >= 1, got {p}")
    if p > n:
        raise ConfigError(f"partition count p={p} exceeds sequence capacity n={n}")
    if rule == "floor":
        s = n // p
        edges = [i * s for i in range(p)] + [n]
    elif rule == "ceil":
        s = -(-n // p)
        edges = [min(i * s, n) for i in range(p + 1)]
    else:
        raise ConfigError(f"unknown partition rule {rule!r}; expected 'floor' or 'ceil'")
    return [(edges[i], edges[i + 1]) for i in range(p)]


def partition_width(n: int, p: int, rule: str = "floor") -> int:
    """Widest range produced by :func:`partition_bounds`."""
    return max(b - a for a, b in partition_bounds(n, p, rule))


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    x: np.ndarray  # (N, n, 3)
    y: np.ndarray  # (N,)
    multiplicity: np.ndarray  # (N,) real particles per jet

    def __post_init__(self):
        if self.x.ndim != 3 or self.x.shape[2] != 3:
            raise DataError(f"dataset features must be (N, n, 3), got {self.x.shape}")
        if len(self.y) != len(self.x) or len(self.multiplicity) != len(self.x):
            raise DataError("features, labels and multiplicities disagree in length")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.multiplicity[idx])


def prepare_jets(jets: Sequence[Jet], n: int, sort_key=SortKey.KT_DESC, pt_min: float = 1.0) -> list[Jet]:
    """Truncate/pad then sort each jet on raw kinematics."""
    return [sort_jet(truncate_pad(j, n, pt_min), sort_key) for j in jets]


def to_dataset(jets: Sequence[Jet], scaler: PtScaler | None = None) -> Dataset:
    """Stack prepared jets into arrays, scaling pt when a scaler is given."""
    if not jets:
        raise DataError("cannot build a dataset from zero jets")
    n = len(jets[0])
    if any(len(j) != n for j in jets):
        raise DataError("jets must share one padded length; run prepare_jets first")
    if scaler is not None:
        jets = [apply_pt_scaler(scaler, j) for j in jets]
    x = np.stack([j.particles for j in jets])
    y = np.array([j.label for j in jets], dtype=np.int64)
    mult = np.array([j.multiplicity for j in jets], dtype=np.int64)
    return Dataset(x, y, mult)


# ---------------------------------------------------------------- file IO


def _f32(v: float) -> float:
    return float(np.float32(v))


def write_jets(path, jets: Iterable[Jet]) -> None:
    """One JSON object per line: ``{"label": int, "particles": [[pt, deta, dphi], ...]}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for jet in jets:
            rows = [[_f32(v) for v in row] for row in jet.particles]
            fh.write(json.dumps({"label": int(jet.label), "particles": rows}) + "\n")


def _parse_record(line: str, lineno: int) -> Jet:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise DataError(f"line {lineno}: expected an object")
    for name in ("label", "particles"):
        if name not in rec:
            raise DataError(f"line {lineno}: missing field '{name}'")
    label = rec["label"]
    if isinstance(label, bool) or not isinstance(label, int) or label < 0:
        raise DataError(f"line {lineno}: label must be a non-negative integer, got {label!r}")
    parts = rec["particles"]
    if not isinstance(parts, list):
        raise DataError(f"line {lineno}: particles must be a list")
    try:
        arr = np.array(parts, dtype=np.float64).reshape(-1, 3) if parts else np.zeros((0, 3))
    except (ValueError, TypeError):
        raise DataError(f"line {lineno}: particles must be [pt, deta, dphi] triples") from None
    if len(parts) and np.asarray(parts, dtype=object).shape != (len(parts), 3):
        raise DataError(f"line {lineno}: particles must be [pt, deta, dphi] triples")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"line {lineno}: non-finite particle values")
    if np.any(arr[:, 0] < 0):
        raise DataError(f"line {lineno}: negative pt")
    arr[:, 2] = wrap_phi(arr[:, 2])
    return Jet(arr, label)


def read_jets(path) -> list[Jet]:
    jets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                jets.append(_parse_record(line, lineno))
    return jets


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class ProngSpec:
    """Generator settings for one class.

    Every jet has a soft core prong of ``core_particles`` on the axis and
    ``prongs - 1`` hard satellite prongs spaced evenly in azimuth around it at
    roughly ``prong_radius``. A satellite is a Gaussian cluster of
    ``prong_particles`` sharing ``prong_pt``. Because satellites are spread
    evenly their positions sum to about zero, so single particles and linear
    sums look alike across classes and only the number of wide, hard particles
    tells them apart. ``noise_particles`` are low-pt uniform fill.
    """

    prongs: int
    core_particles: int = 14
    core_pt: float = 100.0
    core_spread: float = 0.01
    prong_particles: int = 1
    prong_pt: float = 16.0
    prong_radius: float = 0.35
    prong_spread: float = 0.03
    angle_jitter: float = 0.15
    noise_particles: int = 10
    noise_pt: float = 1.0
    noise_radius: float = 0.6

    def validate(self) -> None:
        if self.prongs < 1:
            raise ConfigError(f"prong count must be >= 1, got {self.prongs}")
        for name in ("core_pt", "core_spread", "prong_pt", "prong_radius", "prong_spread", "angle_jitter",
                     "noise_pt", "noise_radius"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.core_particles < 1 or self.prong_particles < 1:
            raise ConfigError("core and satellite prongs need at least one particle")
        if self.noise_particles < 0:
            raise ConfigError("noise particle count must be non-negative")


DEFAULT_CLASSES = (ProngSpec(prongs=3), ProngSpec(prongs=4))


def _cluster(rng, count, total_pt, centre, spread) -> np.ndarray:
    pts = rng.dirichlet(np.ones(count)) * total_pt * rng.uniform(0.7, 1.3)
    return np.column_stack([pts, centre + rng.normal(0.0, spread, size=(count, 2))])


def _synth_jet(rng: np.random.Generator, spec: ProngSpec) -> np.ndarray:
    core = max(2, rng.poisson(spec.core_particles))
    rows = [_cluster(rng, core, spec.core_pt, np.zeros(2), spec.core_spread)]
    satellites = spec.prongs - 1
    base = rng.uniform(0, 2 * np.pi)
    for k in range(satellites):
        ang = base + 2 * np.pi * k / satellites + rng.normal(0, spec.angle_jitter)
        rad = spec.prong_radius * rng.uniform(0.8, 1.2)
        centre = rad * np.array([np.cos(ang), np.sin(ang)])
        rows.append(_cluster(rng, spec.prong_particles, spec.prong_pt, centre, spec.prong_spread))
    if spec.noise_particles:
        count = rng.poisson(spec.noise_particles)
        r = spec.noise_radius * np.sqrt(rng.uniform(size=count))
        phi = rng.uniform(0, 2 * np.pi, size=count)
        rows.append(np.column_stack([rng.exponential(spec.noise_pt, size=count), r * np.cos(phi), r * np.sin(phi)]))
    arr = np.concatenate(rows, axis=0)
    arr[:, 2] = wrap_phi(arr[:, 2])
    return arr[rng.permutation(len(arr))]


def generate_synthetic(seed: int, n_jets: int, class_spec: Sequence[ProngSpec] = DEFAULT_CLASSES) -> list[Jet]:
    """Seeded toy jets whose class is carried by prong count and angular spread."""
    specs = list(class_spec)
    if len(specs) < 2:
        raise ConfigError(f"need at least two classes, got {len(specs)}")
    for s in specs:
        s.validate()
    if n_jets < 0:
        raise ConfigError(f"n_jets must be >= 0, got {n_jets}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_jets) % len(specs))
    return [Jet(_synth_jet(rng, specs[c]), int(c)) for c in labels]


def count_prongs(jet: Jet, link: float = 0.15, min_pt_fraction: float = 0.05) -> int:
    """Single-linkage clusters in (deta, dphi) carrying a sizeable pt share.

    Used as an independent, model-free classifier of the synthetic data.
    """
    rows = jet.particles[~jet.pad_mask]
    if len(rows) == 0:
        return 0
    xy = rows[:, 1:]
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    parent = np.arange(len(rows))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in zip(*np.nonzero(np.triu(d < link, k=1))):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri
    roots = np.array([find(i) for i in range(len(rows))])
    total = rows[:, 0].sum()
    shares = np.array([rows[roots == r, 0].sum() for r in np.unique(roots)])
    return int((shares >= min_pt_fraction * total).sum())
