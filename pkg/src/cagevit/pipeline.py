"""Patch tokens, minor-token fusion and sequence assembly.

Images become row-major patch tokens, tokens are linearly embedded, the
minor tokens are compressed into ``N_f`` fusion tokens by independent
per-head MLPs over their concatenation, and the encoder input is the major
tokens (plus positional embeddings looked up by original patch index)
followed by the fusion tokens (plus per-head fusion embeddings).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .salience import TokenPartition
from .tensor import Tensor


@dataclass(eq=False)
class FusionHead:
    w1: Tensor | None  # (N_m * d, d_h); None when there are no minor tokens
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass(eq=False)
class FusionParams:
    heads: list
    pos: Tensor  # (N_total, d)
    fus: Tensor  # (N_f, d)
    n_minor: int = field(default=0)

    def __post_init__(self):
        if not self.heads:
            raise ContractError("fusion needs at least one head")
        if self.heads[0].b1.shape[0] <= 0:
            raise ContractError("fusion hidden width must be positive")

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def d(self) -> int:
        return self.pos.shape[1]

    @classmethod
    def init(cls, rng, n_total: int, n_minor: int, d: int, n_fusion: int, hidden: int | None = None, dtype=np.float64):
        hidden = d if hidden is None else hidden
        heads = [
            FusionHead(
                w1=T.trunc_normal(rng, (n_minor * d, hidden), dtype=dtype) if n_minor else None,
                b1=T.param_zeros((hidden,), dtype),
                w2=T.trunc_normal(rng, (hidden, d), dtype=dtype),
                b2=T.param_zeros((d,), dtype),
            )
            for _ in range(n_fusion)
        ]
        pos = T.trunc_normal(rng, (n_total, d), dtype=dtype)
        fus = T.trunc_normal(rng, (n_fusion, d), dtype=dtype)
        return cls(heads, pos, fus, n_minor)


@dataclass(eq=False)
class TokenSequence:
    """Encoder input: ``n_major`` major tokens followed by ``n_fusion`` fusion tokens.

    ``major_index`` holds the original patch index of each major token,
    shape ``(n_major,)`` or ``(B, n_major)`` for a batch.
    """

    tokens: Tensor
    major_index: np.ndarray
    n_fusion: int

    @property
    def n_major(self) -> int:
        return self.major_index.shape[-1]

    @property
    def origin(self) -> list:
        if self.major_index.ndim != 1:
            raise ContractError("origin tags are defined per sample, not for a batch")
        return [("major", int(i)) for i in self.major_index] + [("fusion", j) for j in range(self.n_fusion)]


def patchify(image, ph: int, pw: int) -> Tensor:
    """``(..., H, W, C)`` image -> ``(..., N, ph * pw * C)`` row-major patch rows."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim < 3:
        raise DimensionError(f"patchify expects (..., H, W, C), got {image.shape}")
    *lead, H, W, C = image.shape
    if H % ph or W % pw:
        raise DimensionError(f"patch {ph}x{pw} does not divide image {H}x{W}")
    rows, cols = H // ph, W // pw
    n = len(lead)
    x = T.reshape(image, (*lead, rows, ph, cols, pw, C))
    x = T.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return T.reshape(x, (*lead, rows * cols, ph * pw * C))


def unpatchify(patches, grid: tuple, ph: int, pw: int, channels: int) -> Tensor:
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    rows, cols = grid
    *lead, N, f = patches.shape
    if N != rows * cols or f != ph * pw * channels:
        raise DimensionError(f"{patches.shape} patches do not fit a {rows}x{cols} grid of {ph}x{pw}x{channels}")
    n = len(lead)
    x = T.reshape(patches, (*lead, rows, cols, ph, pw, channels))
    x = T.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return T.reshape(x, (*lead, rows * ph, cols * pw, channels))


def embed(tokens: Tensor, w: Tensor) -> Tensor:
    if tokens.shape[-1] != w.shape[0]:
        raise DimensionError(f"embed: token width {tokens.shape[-1]} vs projection {w.shape}")
    return T.matmul(tokens, w)


def multi_head_fusion(minor, params: FusionParams, activation=T.gelu) -> Tensor:
    """Compress ``(..., N_m, d)`` minor tokens into ``(..., N_f, d)`` fusion tokens.

    Pass ``minor=None`` when there are no minor tokens; each head then
    emits its bias-only response.
    """
    if minor is None:
        if params.n_minor != 0:
            raise ContractError(f"fusion expects {params.n_minor} minor tokens, got none")
        outs = [T.matmul(T.reshape(activation(h.b1), (1, -1)), h.w2) + h.b2 for h in params.heads]
        return T.reshape(T.concat(outs, axis=0), (params.n_heads, params.d))
    *lead, n_m, d = minor.shape
    if n_m != params.n_minor or d != params.d:
        raise ContractError(f"fusion was built for {params.n_minor} minor tokens of width {params.d}, got {n_m}x{d}")
    flat = T.reshape(minor, (-1, n_m * d))
    outs = [T.matmul(activation(T.matmul(flat, h.w1) + h.b1), h.w2) + h.b2 for h in params.heads]
    fused = T.stack(outs, axis=1)
    return T.reshape(fused, (*lead, params.n_heads, d))


def split_tokens(emb: Tensor, partition) -> tuple:
    """Gather ``(major, minor)`` rows from embedded tokens.

    ``partition`` is a :class:`TokenPartition` for a single sample or a
    ``(major_index, minor_index)`` pair of ``(B, n)`` arrays for a batch.
    Either side is ``None`` when empty.
    """
    major_idx, minor_idx = _indices(partition)
    major = T.gather_rows(emb, major_idx) if major_idx.shape[-1] else None
    minor = T.gather_rows(emb, minor_idx) if minor_idx.shape[-1] else None
    return major, minor


def _indices(partition) -> tuple:
    if isinstance(partition, TokenPartition):
        return partition.major, partition.minor
    major_idx, minor_idx = partition
    return np.asarray(major_idx, dtype=np.intp), np.asarray(minor_idx, dtype=np.intp)


def assemble(major_emb, fusion_tokens: Tensor, partition, params: FusionParams) -> TokenSequence:
    major_idx, _ = _indices(partition)
    if fusion_tokens.shape[-2:] != params.fus.shape:
        raise DimensionError(f"fusion tokens {fusion_tokens.shape} do not match fusion table {params.fus.shape}")
    fused = fusion_tokens + params.fus
    if major_idx.shape[-1] == 0:
        return TokenSequence(fused, major_idx, params.n_heads)
    if major_idx.size and major_idx.max() >= params.pos.shape[0]:
        raise ContractError(f"patch index {int(major_idx.max())} exceeds positional table of {params.pos.shape[0]}")
    if major_emb is None or major_emb.shape[-1] != params.d or major_emb.shape[:-1] != major_idx.shape:
        shape = None if major_emb is None else major_emb.shape
        raise DimensionError(f"major tokens {shape} do not match index {major_idx.shape} / width {params.d}")
    majors = major_emb + T.gather_rows(params.pos, major_idx)
    return TokenSequence(T.concat([majors, fused], axis=-2), major_idx, params.n_heads)
