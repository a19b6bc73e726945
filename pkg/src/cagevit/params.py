"""Flatten nested parameter dataclasses to ``name -> Tensor`` dicts and back."""

from __future__ import annotations

from dataclasses import fields, is_dataclass

from .errors import ContractError
from .tensor import Tensor


def named_tensors(obj, prefix: str = "") -> dict:
    if isinstance(obj, Tensor):
        return {prefix: obj}
    out = {}
    if is_dataclass(obj):
        items = ((f.name, getattr(obj, f.name)) for f in fields(obj))
    elif isinstance(obj, (list, tuple)):
        items = ((str(i), v) for i, v in enumerate(obj))
    else:
        return out
    for name, value in items:
        if value is None:
            continue
        out.update(named_tensors(value, f"{prefix}.{name}" if prefix else name))
    return out


def load_state(obj, state: dict) -> None:
    """Copy ``state`` values into the tensors of ``obj``, checking names and shapes."""
    own = named_tensors(obj)
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise ContractError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in own.items():
        src = state[name]
        src = src.data if isinstance(src, Tensor) else src
        if src.shape != t.shape:
            raise ContractError(f"{name}: stored shape {src.shape} != expected {t.shape}")
        t.data = src.astype(t.dtype, copy=True)


def count(obj) -> int:
    return sum(t.size for t in named_tensors(obj).values())
