"""FLOP formulas for the attention variants and a wall-clock scaling bench.

The closed forms count only the attention products and the reduction
projection, the same accounting under which the gated and ungated linear
variants cost exactly the same. ``full_cost`` adds the remaining terms.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .attention import AttentionConfig, AttentionParams, GateParams, GridLayout, apply
from .errors import ContractError, MeasurementError

CSV_HEADER = "kind,N,h,w,d,param,flops,median_ns,alpha"
# smallest median accepted, as a multiple of the timer's resolution
MIN_TICKS = 1000
# each timing sample loops the call until it spans at least this long
SAMPLE_NS = 5_000_000


@dataclass(frozen=True)
class FlopsReport:
    kind: str
    h: int
    w: int
    d: int
    param: int  # R for SRA, p for the pooled variants, 0 for Full
    flops: int
    formula_id: str
    note: str = ""

    def recompute(self) -> int:
        return {
            "sra": lambda: flops_sra(self.h, self.w, self.d, self.param).flops,
            "linear": lambda: flops_linear(self.h, self.w, self.param, self.d, self.kind).flops,
            "full": lambda: flops_full(self.h, self.w, self.d).flops,
        }[self.formula_id]()


def _positive(**kw):
    for name, v in kw.items():
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ContractError(f"{name} must be a positive integer, got {v!r}")


def flops_sra(h: int, w: int, d: int, R: int) -> FlopsReport:
    """``2 h^2 w^2 d / R^2 + h w d^2 R^2``."""
    _positive(h=h, w=w, d=d, R=R)
    hw2 = (h * w) ** 2
    if hw2 % (R * R):
        raise ContractError(f"R^2={R * R} does not divide (hw)^2={hw2}; flops would not be an integer")
    return FlopsReport("SRA", h, w, d, R, 2 * hw2 * d // (R * R) + h * w * d * d * R * R, "sra")


def flops_linear(h: int, w: int, p: int, d: int, kind: str = "LinearSRA") -> FlopsReport:
    """``2 h w p^2 d``, shared by the gated variant."""
    _positive(h=h, w=w, p=p, d=d)
    if kind not in ("LinearSRA", "GatedLinearSRA"):
        raise ContractError(f"flops_linear covers LinearSRA and GatedLinearSRA, not {kind!r}")
    note = "gate MLP cost excluded" if kind == "GatedLinearSRA" else ""
    return FlopsReport(kind, h, w, d, p, 2 * h * w * p * p * d, "linear", note)


def flops_full(h: int, w: int, d: int) -> FlopsReport:
    """Standard self-attention: ``2 (hw)^2 d`` products plus ``4 hw d^2`` projections."""
    _positive(h=h, w=w, d=d)
    n = h * w
    return FlopsReport("Full", h, w, d, 0, 2 * n * n * d + 4 * n * d * d, "full")


def flops(kind: str, h: int, w: int, d: int, param: int) -> FlopsReport:
    if kind == "Full":
        return flops_full(h, w, d)
    if kind == "SRA":
        return flops_sra(h, w, d, param)
    return flops_linear(h, w, param, d, kind)


def full_cost(kind: str, h: int, w: int, d: int, param: int, n_fusion: int = 0, gate_hidden: int | None = None) -> int:
    """Multiply-adds including projections, softmax, norms and the gate MLP.

    Not comparable to the closed forms above; meant for honest reporting.
    """
    _positive(h=h, w=w, d=d)
    n = h * w + n_fusion
    total = 4 * 2 * n * d * d  # q, k, v, output projections
    if kind == "Full":
        n_kv = n
    elif kind == "SRA":
        m = (h // param) * (w // param)
        n_kv = m + n_fusion
        total += 2 * 2 * m * param * param * d * d + 2 * 5 * m * d  # shared reduction on k and v, plus norm
    else:
        n_kv = param * param + n_fusion
        total += 2 * 2 * param * param * h * w * d  # pooling matmul on k and v
        if kind == "GatedLinearSRA":
            hidden = gate_hidden or d
            total += 2 * n_fusion * d * hidden + 2 * hidden * param * param * d + param * param * d
    total += 2 * 2 * n * n_kv * d + 3 * n * n_kv  # scores, weighted sum, softmax
    return total


@dataclass
class ScalingFit:
    kind: str
    lengths: list
    medians_ns: list
    alpha: float
    residual: float
    rows: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.lengths) < 5 or self.lengths[-1] < 16 * self.lengths[0]:
            raise ContractError("a scaling fit needs >= 5 lengths spanning >= 16x")
        if not math.isfinite(self.alpha):
            raise MeasurementError(f"fitted exponent is not finite for {self.kind}")

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(CSV_HEADER + "\n")
        for r in self.rows:
            out.write(",".join(str(r[k]) for k in CSV_HEADER.split(",")) + "\n")
        out.write(self.summary() + "\n")
        return out.getvalue()

    def summary(self) -> str:
        return (f"# kind={self.kind} alpha={self.alpha:.4f} residual={self.residual:.4f} "
                f"N={self.lengths[0]}..{self.lengths[-1]}")


def fit_exponent(lengths, times) -> tuple:
    """Least-squares slope of log t against log N and the RMS residual."""
    x, y = np.log(np.asarray(lengths, float)), np.log(np.asarray(times, float))
    A = np.stack([x, np.ones_like(x)], axis=1)
    (alpha, c), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (alpha * x + c)
    return float(alpha), float(np.sqrt(np.mean(resid**2)))


def grid_for(n: int) -> tuple:
    """Most nearly square ``(h, w)`` with ``h * w == n`` and ``h <= w``."""
    h = math.isqrt(n)
    while n % h:
        h -= 1
    return h, n // h


def bench_config(kind: str, d: int = 128, n_heads: int = 1, p: int = 7, R: int = 2, n_fusion: int = 2) -> AttentionConfig:
    return AttentionConfig(kind, n_heads, d, R=R, p=p, n_fusion=n_fusion if kind == "GatedLinearSRA" else 0)


def bench_inputs(kind: str, config: AttentionConfig, n: int, seed: int = 0):
    """Deterministic ``(cfg, x, params, gate, layout)`` for one sequence length."""
    h, w = grid_for(n)
    cfg = replace(config, kind=kind, h=h, w=w)
    rng = np.random.default_rng([seed, n])
    params = AttentionParams.init(rng, cfg)
    gate = GateParams.init(rng, cfg) if kind == "GatedLinearSRA" else None
    n_fusion = cfg.n_fusion if kind != "Full" else 0
    layout = GridLayout(h, w, n_fusion=n_fusion) if kind != "Full" else None
    x = T.Tensor(rng.standard_normal((n + n_fusion, cfg.d)))
    return cfg, x, params, gate, layout


def _time_once(cfg, x, params, gate, layout, loops: int = 1) -> float:
    t0 = time.perf_counter_ns()
    for _ in range(loops):
        apply(cfg, x, params, gate, layout)
    return (time.perf_counter_ns() - t0) / loops


def bench(kind: str, config: AttentionConfig, lengths, repeats: int = 5, seed: int = 0, warmup: int = 2) -> ScalingFit:
    """Median forward wall-time per length, single-threaded, and the fitted exponent.

    Warmup calls are discarded and also size the inner loop count, so every
    one of the ``repeats`` samples spans at least ``SAMPLE_NS``.
    """
    lengths = [int(n) for n in lengths]
    if any(b <= a for a, b in zip(lengths, lengths[1:])) or lengths[0] < 1:
        raise ContractError(f"lengths must be positive and strictly increasing, got {lengths}")
    if repeats < 5:
        raise ContractError(f"repeats must be >= 5, got {repeats}")
    if len(lengths) < 5 or lengths[-1] < 16 * lengths[0]:
        raise ContractError(f"need >= 5 lengths spanning >= 16x, got {lengths}")
    resolution_ns = time.get_clock_info("perf_counter").resolution * 1e9
    medians, rows = [], []
    with threadpool_limits(limits=1), T.no_grad():
        for n in lengths:
            inputs = bench_inputs(kind, config, n, seed)
            warm = min([_time_once(*inputs) for _ in range(max(warmup, 1))])
            loops = max(1, math.ceil(SAMPLE_NS / max(warm, 1.0)))
            med = int(np.median([_time_once(*inputs, loops=loops) for _ in range(repeats)]))
            if med < MIN_TICKS * max(resolution_ns, 1.0):
                raise MeasurementError(
                    f"median {med} ns at N={n} is too close to the timer resolution ({resolution_ns:g} ns); use larger sizes"
                )
            medians.append(med)
            cfg = inputs[0]
            param = {"Full": 0, "SRA": cfg.R}.get(kind, cfg.p)
            rows.append(dict(kind=kind, N=n, h=cfg.h, w=cfg.w, d=cfg.d, param=param,
                             flops=flops(kind, cfg.h, cfg.w, cfg.d, param).flops, median_ns=med))
    alpha, residual = fit_exponent(lengths, medians)
    for r in rows:
        r["alpha"] = f"{alpha:.4f}"
    return ScalingFit(kind, lengths, medians, alpha, residual, rows)
