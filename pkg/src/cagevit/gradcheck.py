"""Central finite-difference gradient checks.

:func:`check` compares the analytic gradient of a function against
``(f(x + h) - f(x - h)) / 2h`` entry by entry. Non-scalar outputs are
reduced to a scalar with a fixed random projection so every output entry
contributes. The reported error per entry is ``|a - n| / max(|a|, |n|, floor)``;
the floor (default 1e-5) keeps entries whose true gradient is exactly 0
(e.g. key biases under softmax shift invariance) from dividing roundoff by
roundoff. With a loss of order 10 and step 1e-5, central-difference
roundoff is ~1e-10, so the floor bounds that noise at ~1e-5 relative.

:data:`SUITE` holds the named checks used by the test-suite and the
``gradcheck`` command, grouped by module.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-5


def check(fn: Callable, inputs, seed: int = 0, eps: float = STEP, floor: float = 1e-5,
          max_entries: int | None = None, wrt=None) -> float:
    """Worst relative error between analytic and numeric gradients.

    ``fn`` maps Tensors to a Tensor. ``inputs`` are float arrays; those
    listed in ``wrt`` (default: all) are differentiated. With
    ``max_entries`` only that many randomly chosen entries per input are
    probed numerically.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    leaves = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)
    T.backward(T.tsum(T.mul(out, Tensor._wrap(proj))))

    def value(arrs):
        with T.no_grad():
            return float((fn(*[Tensor._wrap(a) for a in arrs]).data * proj).sum())

    worst = 0.0
    for i in wrt:
        grad = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        n = flat.size
        picks = range(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        for j in picks:
            keep = flat[j]
            flat[j] = keep + eps
            up = value(arrays)
            flat[j] = keep - eps
            down = value(arrays)
            flat[j] = keep
            numeric = (up - down) / (2 * eps)
            analytic = grad.reshape(-1)[j]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def check_params(loss_fn: Callable, tensors: dict, seed: int = 0, eps: float = STEP,
                 floor: float = 1e-5, max_entries: int | None = 24) -> dict:
    """Finite-difference check of a scalar loss against named parameter tensors.

    Returns the worst relative error per parameter name. ``tensors`` must
    be float64 and ``requires_grad``; they are perturbed in place and restored.
    """
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    T.backward(loss)
    worst = {}
    for name, t in tensors.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        data = t.data.copy()
        flat = data.reshape(-1)
        t.data = data
        n = flat.size
        picks = range(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        err_max = 0.0
        for j in picks:
            keep = flat[j]
            with T.no_grad():
                flat[j] = keep + eps
                up = loss_fn().item()
                flat[j] = keep - eps
                down = loss_fn().item()
            flat[j] = keep
            numeric = (up - down) / (2 * eps)
            analytic = grad.reshape(-1)[j]
            err_max = max(err_max, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
        worst[name] = err_max
    return worst


# ----------------------------------------------------------------------------
# the suite


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _tensor_checks(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    out["matmul"] = check(T.matmul, [_rand(rng, 3, 4), _rand(rng, 4, 5)], seed)
    out["matmul_batched"] = check(T.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 4, 5)], seed)
    out["softmax"] = check(lambda x: T.softmax(x, -1), [_rand(rng, 4, 6)], seed)
    out["add_broadcast"] = check(T.add, [_rand(rng, 2, 3, 4), _rand(rng, 4)], seed)
    out["mul"] = check(T.mul, [_rand(rng, 3, 5), _rand(rng, 3, 5)], seed)
    out["scale"] = check(lambda x: T.scale(x, -1.7), [_rand(rng, 4)], seed)
    out["gelu"] = check(T.gelu, [_rand(rng, 64)], seed)
    out["sigmoid"] = check(T.sigmoid, [_rand(rng, 16)], seed)
    out["layer_norm"] = check(lambda x, g, b: T.layer_norm(x, g, b), [_rand(rng, 4, 8), _rand(rng, 8), _rand(rng, 8)], seed)
    out["avg_pool_2d"] = check(lambda x: T.avg_pool_2d(x, 3), [_rand(rng, 7, 8, 2)], seed)
    out["reshape_transpose"] = check(lambda x: T.transpose(T.reshape(x, (3, 2, 4)), (2, 0, 1)), [_rand(rng, 6, 4)], seed)
    out["concat_narrow"] = check(
        lambda a, b: T.narrow(T.concat([a, b], axis=-2), -2, 1, 5), [_rand(rng, 2, 3, 4), _rand(rng, 2, 3, 4)], seed
    )
    idx = np.array([[2, 0, 3], [1, 1, 0]])
    out["gather_scatter"] = check(lambda x: T.scatter_rows(T.gather_rows(x, idx), np.array([[0, 2, 4], [1, 3, 5]]), 6),
                                  [_rand(rng, 2, 4, 3)], seed)
    out["sum_mean"] = check(lambda x: T.mean(x, axis=1) + T.tsum(x, axis=1), [_rand(rng, 3, 4, 2)], seed)
    labels = np.array([0, 2, 1])
    out["cross_entropy"] = check(lambda z: T.cross_entropy(z, labels), [_rand(rng, 3, 4)], seed)

    def mlp(x, w1, b1, w2, b2):
        return T.matmul(T.gelu(T.matmul(x, w1) + b1), w2) + b2

    out["mlp"] = check(mlp, [_rand(rng, 5, 4), _rand(rng, 4, 8), _rand(rng, 8), _rand(rng, 8, 3), _rand(rng, 3)], seed)
    return out


def _pipeline_checks(seed: int) -> dict:
    from .pipeline import FusionHead, FusionParams, assemble, embed, multi_head_fusion

    rng = np.random.default_rng(seed)
    out = {}
    out["embed"] = check(embed, [_rand(rng, 6, 5), _rand(rng, 5, 4)], seed)
    n_m, d, dh, n_f = 3, 4, 5, 2

    def fusion(minor, w1a, w1b, w2a, w2b):
        heads = [FusionHead(w1a, T.zeros((dh,)) + 0.1, w2a, T.zeros((d,))),
                 FusionHead(w1b, T.zeros((dh,)) - 0.1, w2b, T.zeros((d,)))]
        params = FusionParams(heads, T.zeros((6, d)), T.zeros((n_f, d)), n_m)
        return multi_head_fusion(minor, params)

    out["multi_head_fusion"] = check(
        fusion, [_rand(rng, 2, n_m, d), _rand(rng, n_m * d, dh), _rand(rng, n_m * d, dh), _rand(rng, dh, d), _rand(rng, dh, d)], seed
    )
    major_idx = np.array([[4, 0], [2, 5]])

    def assembled(major, fused, pos, fus):
        heads = [FusionHead(None, T.zeros((1,)), T.zeros((1, d)), T.zeros((d,)))] * n_f
        params = FusionParams(heads, pos, fus, 0)
        return assemble(major, fused, (major_idx, np.zeros((2, 0), dtype=int)), params).tokens

    out["assemble"] = check(assembled, [_rand(rng, 2, 2, d), _rand(rng, 2, n_f, d), _rand(rng, 6, d), _rand(rng, n_f, d)], seed)
    return out


def _attention_params(rng, d):
    return [_rand(rng, d, d) * 0.5 if i % 2 == 0 else _rand(rng, d) * 0.1 for i in range(8)]


def _attention_checks(seed: int) -> dict:
    from .attention import AttentionConfig, AttentionParams, GateParams, GridLayout, apply, attention, spatial_reduce

    rng = np.random.default_rng(seed)
    out = {}
    out["attention"] = check(attention, [_rand(rng, 5, 4), _rand(rng, 6, 4), _rand(rng, 6, 4)], seed)
    out["spatial_reduce"] = check(
        lambda x, w, g, b: spatial_reduce(x, 4, 4, 2, w, g, b), [_rand(rng, 16, 3), _rand(rng, 12, 3), _rand(rng, 3), _rand(rng, 3)], seed
    )
    d, h, w, n_f = 4, 4, 4, 2
    grid_index = np.array([[0, 5, 10, 3, 15, 6], [1, 2, 8, 9, 12, 14]])
    layout = GridLayout(h, w, grid_index, n_f)
    for kind in ("Full", "SRA", "LinearSRA", "GatedLinearSRA"):
        cfg = AttentionConfig(kind, n_heads=2, d=d, h=h, w=w, R=2, p=2, n_fusion=n_f)
        n_extra = {"SRA": 3, "GatedLinearSRA": 4}.get(kind, 0)
        shapes = {"SRA": [(4 * d, d), (d,), (d,)], "GatedLinearSRA": [(n_f * d, d), (d,), (d, 4 * d), (4 * d,)]}.get(kind, [])
        arrays = [_rand(rng, 2, 6 + n_f, d)] + _attention_params(rng, d) + [_rand(rng, *s) * 0.5 for s in shapes]

        def run(x, *ps, kind=kind, cfg=cfg):
            base = AttentionParams(*ps[:8])
            gate = None
            if kind == "SRA":
                base.sr_w, base.sr_gain, base.sr_bias = ps[8:11]
            if kind == "GatedLinearSRA":
                gate = GateParams(*ps[8:12])
            return apply(cfg, x, base, gate, layout)

        assert len(arrays) == 9 + n_extra
        out[kind] = check(run, arrays, seed)
    return out


def _model_checks(seed: int) -> dict:
    from .attention import GridLayout
    from .model import VariantConfig, build, encoder_layer, forward_batch
    from .salience import select_and_rearrange
    from .tensor import cross_entropy

    rng = np.random.default_rng(seed)
    out = {}
    cfg = VariantConfig(L=2, d=8, D=8, p=2, N_h=2, N_f=2, K=1, rho=0.5, n_classes=3, rows=2, cols=4,
                        ph=2, pw=2, C=1)
    params = build(cfg, seed)
    # break the symmetric initialisation so every path carries signal
    for t in params.named().values():
        t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    images = rng.random((2, *cfg.image_shape))
    parts = [select_and_rearrange(rng.random(cfg.n_tokens), cfg.rho) for _ in range(2)]
    labels = np.array([0, 2])
    worst = check_params(lambda: cross_entropy(forward_batch(params, images, parts), labels), params.named(), seed)
    out["full_model"] = max(worst.values())

    layer = params.layers[0]
    major_idx = np.stack([p.major for p in parts])
    layout = GridLayout(cfg.rows, cfg.cols, major_idx, cfg.N_f)
    x = T.Tensor(rng.standard_normal((2, cfg.n_major + cfg.N_f, cfg.d)), requires_grad=True)
    tensors = {"x": x, **{f"layer.{k}": v for k, v in _named(layer).items()}}
    proj = rng.standard_normal(x.shape)
    worst = check_params(
        lambda: T.tsum(T.mul(encoder_layer(x, layer, cfg.attention_config(), layout), T.Tensor._wrap(proj))), tensors, seed
    )
    out["encoder_layer"] = max(worst.values())
    return out


def _named(obj):
    from .params import named_tensors

    return named_tensors(obj)


SUITE = {
    "tensor": _tensor_checks,
    "pipeline": _pipeline_checks,
    "attention": _attention_checks,
    "model": _model_checks,
}


def run_suite(modules=None, seed: int = 0) -> dict:
    """``{module: {op: worst relative error}}`` for the selected modules."""
    modules = list(SUITE) if modules is None else list(modules)
    unknown = [m for m in modules if m not in SUITE]
    if unknown:
        raise KeyError(f"unknown gradcheck module(s) {unknown}; choose from {sorted(SUITE)}")
    return {m: SUITE[m](seed) for m in modules}


def worst_error(results: dict) -> float:
    return max((e for ops in results.values() for e in ops.values()), default=0.0)


def passed(results: dict, tol: float = TOLERANCE) -> bool:
    return math.isfinite(worst_error(results)) and worst_error(results) < tol
