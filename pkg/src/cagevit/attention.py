"""Full, spatial-reduction, pooled and gated-pooled multi-head attention.

All four variants take ``(..., N, d)`` tokens and return the same shape.
Queries are always full length; the reduced variants shrink only the key
and value sets:

* ``SRA``: each ``R x R`` block of the token grid is flattened to one row,
  projected back to ``d`` and layer-normed.
* ``LinearSRA``: adaptive average pooling to a fixed ``p x p`` grid.
* ``GatedLinearSRA``: as ``LinearSRA`` with the pooled values multiplied
  elementwise by a sigmoid gate computed from the fusion-token values.

A :class:`GridLayout` says which rows of the sequence live on the ``h x w``
grid. Grid rows may be a partial, reordered subset (the major tokens);
they are scattered back to their grid cells with zeros in vacant cells
before reduction. Trailing fusion rows never enter the grid; they join the
reduced key/value set as ordinary rows and, for the gated kind, feed the
gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

KINDS = ("Full", "SRA", "LinearSRA", "GatedLinearSRA")


@dataclass(frozen=True)
class AttentionConfig:
    kind: str
    n_heads: int
    d: int
    h: int = 0
    w: int = 0
    R: int = 1
    p: int = 1
    gate_hidden: int | None = None
    n_fusion: int = 0
    sr_norm: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        if self.n_heads < 1 or self.d < 1 or self.d % self.n_heads:
            raise ContractError(f"width d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.R < 1 or self.p < 1:
            raise ContractError(f"R and p must be >= 1, got R={self.R}, p={self.p}")
        if self.kind == "GatedLinearSRA" and self.n_fusion < 1:
            raise ContractError("GatedLinearSRA needs n_fusion >= 1 fusion tokens for its gate")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


@dataclass(frozen=True)
class GridLayout:
    """Placement of sequence rows on an ``h x w`` grid.

    The first ``n_grid`` rows are grid tokens located at ``grid_index``
    (``(n_grid,)`` or ``(B, n_grid)``; ``None`` means all ``h*w`` cells in
    row-major order). The remaining ``n_fusion`` rows are fusion tokens.
    """

    h: int
    w: int
    grid_index: np.ndarray | None = None
    n_fusion: int = 0

    @property
    def n_grid(self) -> int:
        return self.h * self.w if self.grid_index is None else self.grid_index.shape[-1]

    @classmethod
    def dense(cls, h, w):
        return cls(h, w)


@dataclass(eq=False)
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    sr_w: Tensor | None = None  # (R*R*d, d), SRA only
    sr_gain: Tensor | None = None
    sr_bias: Tensor | None = None

    @classmethod
    def init(cls, rng, cfg: AttentionConfig, dtype=np.float64, std=0.02):
        d = cfg.d

        def w(shape):
            return T.trunc_normal(rng, shape, std, dtype)

        p = cls(
            w((d, d)), T.param_zeros((d,), dtype),
            w((d, d)), T.param_zeros((d,), dtype),
            w((d, d)), T.param_zeros((d,), dtype),
            w((d, d)), T.param_zeros((d,), dtype),
        )
        if cfg.kind == "SRA":
            p.sr_w = w((cfg.R * cfg.R * d, d))
            if cfg.sr_norm:
                p.sr_gain = T.param_ones((d,), dtype)
                p.sr_bias = T.param_zeros((d,), dtype)
        return p


@dataclass(eq=False)
class GateParams:
    """Two-layer MLP ``(N_f * d) -> hidden -> (p*p * d)``."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, cfg: AttentionConfig, dtype=np.float64, std=0.02):
        hidden = cfg.gate_hidden or cfg.d
        return cls(
            T.trunc_normal(rng, (cfg.n_fusion * cfg.d, hidden), std, dtype),
            T.param_zeros((hidden,), dtype),
            T.trunc_normal(rng, (hidden, cfg.p * cfg.p * cfg.d), std, dtype),
            T.param_zeros((cfg.p * cfg.p * cfg.d,), dtype),
        )


# ----------------------------------------------------------------------------
# core pieces


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic ``softmax(q k^T / sqrt(d_h))`` with ``d_h = q.shape[-1]``."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    return T.softmax(scores, axis=-1)


def attention(q: Tensor, k: Tensor, v: Tensor, trace: dict | None = None) -> Tensor:
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    a = attention_weights(q, k)
    if trace is not None:
        trace.setdefault("weights", []).append(a)
        trace.setdefault("values", []).append(v)
    return T.matmul(a, v)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``(..., N, d)`` -> ``(..., H, N, d/H)``."""
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, n_heads, d // n_heads))
    return T.swapaxes(x, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    x = T.swapaxes(x, -2, -3)
    return T.reshape(x, (*lead, n, h * dh))


def _linear(x, w, b):
    return T.matmul(x, w) + b


def _check_input(x: Tensor, d: int) -> None:
    if x.ndim < 2 or x.shape[-1] != d:
        raise DimensionError(f"attention input must be (..., N, {d}), got {x.shape}")


def _heads(q, k, v, params: AttentionParams, n_heads: int, trace) -> Tensor:
    mixed = merge_heads(attention(split_heads(q, n_heads), split_heads(k, n_heads), split_heads(v, n_heads), trace))
    if trace is not None:
        trace["mixed"] = mixed
    return _linear(mixed, params.wo, params.bo)


def mha(x: Tensor, params: AttentionParams, n_heads: int, trace: dict | None = None) -> Tensor:
    """Full multi-head self-attention with output projection."""
    d = params.wq.shape[0]
    _check_input(x, d)
    if d % n_heads:
        raise ContractError(f"width d={d} is not divisible by n_heads={n_heads}")
    q = _linear(x, params.wq, params.bq)
    k = _linear(x, params.wk, params.bk)
    v = _linear(x, params.wv, params.bv)
    return _heads(q, k, v, params, n_heads, trace)


def spatial_reduce(x: Tensor, h: int, w: int, R: int, w_s: Tensor, gain=None, bias=None, norm: bool = True) -> Tensor:
    """Merge each ``R x R`` block of an ``(..., h*w, d)`` grid into one row.

    Block features are concatenated in row-major pixel order, projected by
    ``w_s`` of shape ``(R*R*d, d)`` and layer-normed over the channel axis.
    """
    if h % R or w % R:
        raise DimensionError(f"reduction ratio {R} does not divide grid {h}x{w}")
    *lead, n, d = x.shape
    if n != h * w:
        raise DimensionError(f"spatial_reduce: {n} rows do not form a {h}x{w} grid")
    if w_s.shape != (R * R * d, d):
        raise DimensionError(f"reduction projection has shape {w_s.shape}, expected {(R * R * d, d)}")
    k = len(lead)
    g = T.reshape(x, (*lead, h // R, R, w // R, R, d))
    g = T.transpose(g, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    g = T.reshape(g, (*lead, (h // R) * (w // R), R * R * d))
    y = T.matmul(g, w_s)
    return T.layer_norm(y, gain, bias) if norm else y


def _grid(x: Tensor, layout: GridLayout) -> Tensor:
    """Project grid rows of ``x`` onto the dense ``h*w`` grid."""
    lead = x.shape[:-2]
    d = x.shape[-1]
    n_cells = layout.h * layout.w
    if layout.n_grid == 0:
        return T.Tensor._wrap(np.zeros((*lead, n_cells, d), dtype=x.dtype))
    rows = T.narrow(x, -2, 0, layout.n_grid) if layout.n_fusion else x
    if layout.grid_index is None:
        if layout.n_grid != n_cells:
            raise DimensionError(f"{layout.n_grid} grid rows do not fill a {layout.h}x{layout.w} grid")
        return rows
    return T.scatter_rows(rows, layout.grid_index, n_cells)


def _fusion_rows(x: Tensor, layout: GridLayout):
    if not layout.n_fusion:
        return None
    return T.narrow(x, -2, layout.n_grid, layout.n_grid + layout.n_fusion)


def _resolve_layout(x: Tensor, cfg: AttentionConfig, layout: GridLayout | None) -> GridLayout:
    if layout is None:
        layout = GridLayout(cfg.h, cfg.w)
    if layout.n_grid + layout.n_fusion != x.shape[-2]:
        raise DimensionError(
            f"layout describes {layout.n_grid} grid + {layout.n_fusion} fusion rows but input has {x.shape[-2]}"
        )
    return layout


def _reduced_attention(x, params, cfg, layout, reduce, gate_fn=None, trace=None) -> Tensor:
    _check_input(x, cfg.d)
    layout = _resolve_layout(x, cfg, layout)
    q = _linear(x, params.wq, params.bq)
    k = _linear(x, params.wk, params.bk)
    v = _linear(x, params.wv, params.bv)
    k_red = reduce(_grid(k, layout), layout)
    v_red = reduce(_grid(v, layout), layout)
    k_f, v_f = _fusion_rows(k, layout), _fusion_rows(v, layout)
    if gate_fn is not None:
        gate_values = gate_fn(v_f)
        if gate_values.shape[-2:] != v_red.shape[-2:]:
            raise ContractError(f"gate shape {gate_values.shape} does not match pooled values {v_red.shape}")
        if trace is not None:
            trace["gate"] = gate_values
        v_red = T.mul(v_red, gate_values)
    if k_f is not None:
        k_red = T.concat([k_red, k_f], axis=-2)
        v_red = T.concat([v_red, v_f], axis=-2)
    return _heads(q, k_red, v_red, params, cfg.n_heads, trace)


def sra(x: Tensor, params: AttentionParams, cfg: AttentionConfig, layout: GridLayout | None = None, trace=None) -> Tensor:
    def reduce(g, lay):
        return spatial_reduce(g, lay.h, lay.w, cfg.R, params.sr_w, params.sr_gain, params.sr_bias, norm=cfg.sr_norm)

    if params.sr_w is None:
        raise ContractError("SRA parameters are missing the spatial-reduction projection")
    return _reduced_attention(x, params, cfg, layout, reduce, trace=trace)


def _pool(p):
    def reduce(g, lay):
        lead = g.shape[:-2]
        return T.avg_pool_2d(T.reshape(g, (*lead, lay.h, lay.w, g.shape[-1])), p)

    return reduce


def linear_sra(x: Tensor, params: AttentionParams, cfg: AttentionConfig, layout: GridLayout | None = None, trace=None) -> Tensor:
    return _reduced_attention(x, params, cfg, layout, _pool(cfg.p), trace=trace)


def gate_forward(fusion_values: Tensor, gate: GateParams, p: int) -> Tensor:
    """``sigmoid(MLP2(gelu(MLP1(concat(V^f)))))`` reshaped to ``(..., p*p, d)``."""
    *lead, n_f, d = fusion_values.shape
    if gate.w1.shape[0] != n_f * d or gate.w2.shape[1] != p * p * d:
        raise ContractError(
            f"gate maps {gate.w1.shape[0]} -> {gate.w2.shape[1]} features but needs {n_f * d} -> {p * p * d}"
        )
    flat = T.reshape(fusion_values, (*lead, n_f * d)) if lead else T.reshape(fusion_values, (1, n_f * d))
    hidden = T.gelu(_linear(flat, gate.w1, gate.b1))
    g = T.sigmoid(_linear(hidden, gate.w2, gate.b2))
    return T.reshape(g, (*lead, p * p, d))


def gated_linear_sra(
    x: Tensor,
    fusion_values: Tensor | None,
    params: AttentionParams,
    gate: GateParams | None,
    cfg: AttentionConfig,
    layout: GridLayout | None = None,
    gate_values: Tensor | None = None,
    trace=None,
) -> Tensor:
    """Pooled attention with gated values.

    ``fusion_values`` defaults to the value projections of the layout's
    fusion rows. ``gate_values`` bypasses the gate MLP with a fixed
    ``(p*p, d)`` multiplier.
    """
    if gate_values is not None:
        fixed = gate_values

        def gate_fn(v_f):
            return fixed

    else:
        if gate is None:
            raise ContractError("gated attention needs GateParams or explicit gate_values")

        def gate_fn(v_f):
            src = fusion_values if fusion_values is not None else v_f
            if src is None:
                raise ContractError("no fusion rows in the layout and no fusion_values given")
            return gate_forward(src, gate, cfg.p)

    return _reduced_attention(x, params, cfg, layout, _pool(cfg.p), gate_fn=gate_fn, trace=trace)


def apply(cfg: AttentionConfig, x: Tensor, params: AttentionParams, gate: GateParams | None = None,
          layout: GridLayout | None = None, trace=None) -> Tensor:
    """Dispatch to the variant named by ``cfg.kind``."""
    if cfg.kind == "Full":
        return mha(x, params, cfg.n_heads, trace)
    if cfg.kind == "SRA":
        return sra(x, params, cfg, layout, trace)
    if cfg.kind == "LinearSRA":
        return linear_sra(x, params, cfg, layout, trace)
    return gated_linear_sra(x, None, params, gate, cfg, layout, trace=trace)
