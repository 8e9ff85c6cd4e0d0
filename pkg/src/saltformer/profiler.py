"""Analytic FLOP, parameter and activation-memory model plus a latency benchmark.

FLOPs are counted on a per-jet basis by walking a flat plan of the forward
graph. What each primitive costs is governed by :class:`FlopConvention`;
:data:`FROZEN` is the convention fixed by :func:`calibrate` against the
reference totals in :data:`REFERENCE_FLOPS`.
"""

from __future__ import annotations

import csv
import itertools
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError
from .model import ModelConfig, build_model, preset

# ---------------------------------------------------------------- conventions


@dataclass(frozen=True)
class FlopConvention:
    mac: int = 2  # cost of one multiply-accumulate
    bias: bool = True  # count bias additions in dense layers
    scale: int = 1  # per attention score, for the 1/sqrt(d_h) multiply
    softmax: int = 5  # per element (max, sub, exp, sum, div)
    dyt: int = 3  # per element, tanh itself is free
    relu: int = 0
    seq_proj: bool = False  # count the n -> p key/value compression matmuls
    conv_bias: bool = True
    conv_avg: bool = True  # one op per filter per element for the averaging
    head_softmax: bool = True  # softmax on the classifier output


FROZEN = FlopConvention()

# (preset, overrides) -> expected per-jet FLOPs
REFERENCE_FLOPS: list[tuple[str, dict, int]] = [
    ("salt", dict(n=150), 739_918),
    ("linformer", dict(n=150), 552_718),
    ("transformer", dict(n=150), 2_479_918),
    ("salt-no-conv", dict(n=150), 552_718),
    ("salt-no-partition", dict(n=150), 739_918),
    ("salt", dict(n=150, proj=1), 527_518),
    ("salt", dict(n=150, proj=2), 576_718),
    ("salt", dict(n=150, proj=8), 1_325_518),
    ("salt", dict(n=150, proj=16), 3_533_518),
    ("salt", dict(n=16), 79_566),
    ("salt", dict(n=32), 158_414),
    ("linformer", dict(n=16), 59_598),
    ("linformer", dict(n=32), 118_478),
    ("transformer", dict(n=16), 76_494),
    ("transformer", dict(n=32), 197_326),
    ("salt", dict(n=150, filters=(1, 5, 7)), 816_718),
    ("salt", dict(n=150, filters=(1, 3, 5, 7)), 879_118),
    ("salt", dict(n=150, filters=(1, 3, 5, 7, 9)), 1_056_718),
    ("salt", dict(n=150, filters=(3, 3, 3)), 739_918),
    ("salt", dict(n=150, filters=(5, 5, 5)), 855_118),
    ("salt", dict(n=150, filters=(3, 5, 7)), 855_118),
    ("salt", dict(n=150, filters=(7, 7, 7)), 970_318),
    ("salt", dict(n=150, filters=(3, 5, 7, 9)), 1_032_718),
]

# absolute parameter totals at C=5 that the builder is compared against
REFERENCE_PARAMS: list[tuple[str, dict, int]] = [
    ("salt", dict(n=150), 3_264),
    ("linformer", dict(n=150), 6_809),
    ("transformer", dict(n=150), 2_009),
    ("salt-no-conv", dict(n=150), 3_225),
    ("salt-no-partition", dict(n=150), 6_848),
    ("salt-no-partition", dict(n=16), 2_560),
    ("salt-no-partition", dict(n=32), 3_072),
    ("salt-share-ef", dict(n=150), 2_656),
    ("salt-share-ef", dict(n=16), 2_112),
    ("salt-share-ef", dict(n=32), 2_176),
    ("salt-partition-value-only", dict(n=150), 5_056),
    ("salt-partition-value-only", dict(n=16), 2_368),
    ("salt-partition-value-only", dict(n=32), 2_688),
]


# ---------------------------------------------------------------- layer plan


@dataclass
class Op:
    name: str
    flops: int
    params: int
    out_elems: int
    inputs: tuple[str, ...] = ()


@dataclass
class CostReport:
    flops: int
    params: int
    activation_bytes: int
    config: dict = field(default_factory=dict)


def _dense(name, rows, fin, fout, src, conv: FlopConvention, act_cost: int = 0) -> Op:
    flops = rows * (conv.mac * fin * fout + (fout if conv.bias else 0) + act_cost * fout)
    return Op(name, flops, fin * fout + fout, rows * fout, (src,))


def layer_plan(cfg: ModelConfig, conv: FlopConvention = FROZEN) -> list[Op]:
    """Flat, topologically ordered list of forward ops for one jet."""
    n, d, h, dh = cfg.n, cfg.d, cfg.heads, cfg.d_head
    ops = [Op("input", 0, 0, n * 3)]
    ops.append(_dense("embed", n, 3, d, "input", conv))
    src = "embed"
    for layer in range(cfg.layers):
        pre = f"l{layer}."
        for m in "qkv":
            ops.append(_dense(pre + m, n, d, d, src, conv))
        q, k, v = pre + "q", pre + "k", pre + "v"
        if cfg.variant == "transformer":
            length = n
        else:
            length = cfg.proj
            mode = cfg.partition_mode
            width = max(b - a for a, b in cfg.bounds()) if mode != "none" else n
            e_w = width if mode in ("both", "key") else n
            f_w = width if mode in ("both", "value") else n
            proj_flops = conv.mac * n * length * dh * h if conv.seq_proj else 0
            ops.append(Op(pre + "kp", proj_flops, h * length * e_w, h * length * dh, (k,)))
            f_params = 0 if cfg.shares_ef else h * length * f_w
            ops.append(Op(pre + "vp", proj_flops, f_params, h * length * dh, (v,)))
            k, v = pre + "kp", pre + "vp"
        scores = h * n * length
        ops.append(Op(pre + "scores", scores * (conv.mac * dh + conv.scale), 0, scores, (q, k)))
        s = pre + "scores"
        if cfg.use_conv:
            nf = len(cfg.filters)
            per = sum(conv.mac * fh * cfg.proj for fh in cfg.filters)
            per += nf * int(conv.conv_bias) + nf * int(conv.conv_avg)
            ops.append(Op(pre + "conv", scores * per, sum(cfg.filters) * cfg.proj + nf, scores, (s,)))
            s = pre + "conv"
        ops.append(Op(pre + "softmax", scores * conv.softmax, 0, scores, (s,)))
        ops.append(Op(pre + "attend", scores * conv.mac * dh, 0, n * d, (pre + "softmax", v)))
        ops.append(_dense(pre + "o", n, d, d, pre + "attend", conv))
        ops.append(Op(pre + "dyt", n * d * conv.dyt, 3 * d, n * d, (pre + "o",)))
        ops.append(_dense(pre + "ffn1", n, d, d, pre + "dyt", conv, conv.relu))
        ops.append(_dense(pre + "ffn2", n, d, d, pre + "ffn1", conv))
        src = pre + "ffn2"
    ops.append(Op("pool", 0, 0, d, (src,)))
    ops.append(_dense("head1", 1, d, d, "pool", conv, conv.relu))
    c = cfg.out_dim
    ops.append(_dense("head2", 1, d, c, "head1", conv))
    if c > 1 and conv.head_softmax:
        ops.append(Op("output", conv.softmax * c, 0, c, ("head2",)))
    return ops


def flops_estimate(cfg: ModelConfig, conv: FlopConvention = FROZEN) -> int:
    return int(sum(op.flops for op in layer_plan(cfg, conv)))


def params_estimate(cfg: ModelConfig) -> int:
    return int(sum(op.params for op in layer_plan(cfg)))


def peak_live_elements(ops: list[Op]) -> int:
    """Peak of the summed sizes of live tensors while executing ``ops`` in order.

    A tensor is live from the op that produces it until the last op that reads
    it has produced its own output. The final output stays live.
    """
    last_use = {op.name: i for i, op in enumerate(ops)}
    for i, op in enumerate(ops):
        for src in op.inputs:
            last_use[src] = max(last_use[src], i)
    last_use[ops[-1].name] = len(ops)
    live: dict[str, int] = {}
    peak = 0
    for i, op in enumerate(ops):
        live[op.name] = op.out_elems
        peak = max(peak, sum(live.values()))
        for name in [k for k, end in last_use.items() if end == i and k in live]:
            del live[name]
    return peak


def attention_buffer_elems(cfg: ModelConfig) -> int:
    """Size of one head-stacked score map: ``H * n * n`` or ``H * n * p``."""
    length = cfg.n if cfg.variant == "transformer" else cfg.proj
    return cfg.heads * cfg.n * length


def activation_memory(cfg: ModelConfig, batch: int = 1) -> int:
    """Analytic inference-time peak activation bytes for ``batch`` jets."""
    itemsize = np.dtype(cfg.np_dtype).itemsize
    return int(batch * peak_live_elements(layer_plan(cfg)) * itemsize)


def cost_report(cfg: ModelConfig, batch: int = 1) -> CostReport:
    return CostReport(flops_estimate(cfg), params_estimate(cfg), activation_memory(cfg, batch), cfg.to_dict())


# ---------------------------------------------------------------- calibration


def _reference_configs(rows):
    return [(preset(name, **over), value) for name, over, value in rows]


def calibrate(rows=REFERENCE_FLOPS) -> list[FlopConvention]:
    """Grid-search convention knobs; return every convention that hits all rows."""
    grid = dict(
        mac=[1, 2],
        bias=[False, True],
        scale=[0, 1],
        softmax=[0, 1, 3, 4, 5],
        dyt=[0, 1, 2, 3, 4],
        seq_proj=[False, True],
        conv_bias=[False, True],
        conv_avg=[False, True],
        head_softmax=[False, True],
    )
    cases = _reference_configs(rows)
    keys = list(grid)
    hits = []
    for values in itertools.product(*(grid[k] for k in keys)):
        conv = FlopConvention(**dict(zip(keys, values)))
        if all(flops_estimate(cfg, conv) == want for cfg, want in cases):
            hits.append(conv)
    return hits


# ---------------------------------------------------------------- tables


def flops_scaling_table(variant: str, n_list, **overrides) -> list[tuple[int, int]]:
    ns = list(n_list)
    if ns != sorted(ns):
        raise ContractError(f"n_list must be ascending, got {ns}")
    return [(n, flops_estimate(preset(variant, n=n, **overrides))) for n in ns]


def write_scaling_csv(path, variants, n_list, **overrides) -> None:
    """Columns: n, then one FLOP column per variant."""
    tables = {v: dict(flops_scaling_table(v, n_list, **overrides)) for v in variants}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n"] + [f"flops_{v}" for v in variants])
        for n in n_list:
            w.writerow([n] + [tables[v][n] for v in variants])


def write_cost_csv(path, configs: dict[str, ModelConfig], batch: int = 1) -> None:
    """Columns: name, variant, n, proj, filters, layers, flops, params, activation_bytes."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "variant", "n", "proj", "filters", "layers", "flops", "params", "activation_bytes"])
        for name, cfg in configs.items():
            r = cost_report(cfg, batch)
            filters = "-".join(map(str, cfg.filters)) if cfg.use_conv else ""
            w.writerow([name, cfg.variant, cfg.n, cfg.proj, filters, cfg.layers, r.flops, r.params, r.activation_bytes])


# ---------------------------------------------------------------- latency


@dataclass
class LatencyReport:
    mean_us: float
    std_us: float
    reps: int
    batch: int
    warmup: int
    dtype: str

    def as_dict(self) -> dict:
        return asdict(self)


def latency_bench(model, batch: int = 256, reps: int = 30, warmup: int = 5, seed: int = 0) -> LatencyReport:
    """Per-jet forward latency on one thread, gradient tape disabled."""
    from threadpoolctl import threadpool_limits

    from .model import forward
    from .tensor import Tensor, no_grad

    if reps < 30:
        raise ContractError(f"reps must be >= 30, got {reps}")
    if warmup < 5:
        raise ContractError(f"warmup must be >= 5, got {warmup}")
    if batch < 1:
        raise ContractError(f"batch must be >= 1, got {batch}")
    cfg = model.config
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(batch, cfg.n, 3)).astype(cfg.np_dtype))
    times = np.empty(reps)
    with threadpool_limits(limits=1), no_grad():
        for _ in range(warmup):
            forward(model, x)
        for i in range(reps):
            t0 = time.perf_counter()
            forward(model, x)
            times[i] = time.perf_counter() - t0
    per_jet = times / batch * 1e6
    return LatencyReport(float(per_jet.mean()), float(per_jet.std(ddof=1)), reps, batch, warmup, cfg.dtype)


def bench_variant(variant: str, n: int = 150, batch: int = 256, reps: int = 30, warmup: int = 5, **overrides):
    model = build_model(preset(variant, n=n, dtype="f32", **overrides))
    return latency_bench(model, batch=batch, reps=reps, warmup=warmup)
