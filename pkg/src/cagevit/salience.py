"""Activation-guided token selection.

Per-class activation maps are blended by classifier confidence into one
salience map, summed per patch, and the patches are split into a ranked
set of major tokens and an index-ordered set of minor tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, ParseError
from .serialization import decode_tnsr, encode_tnsr
from .tensor import Tensor

BUNDLE_HEADER = b"CAGA-BUNDLE v1"


@dataclass(frozen=True, eq=False)
class SalienceBundle:
    """``K`` activation maps with their confidences and class labels."""

    maps: np.ndarray
    confidences: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        maps = np.asarray(self.maps)
        conf = np.asarray(self.confidences, dtype=np.float64)
        ids = np.asarray(self.class_ids, dtype=np.int64)
        if maps.ndim != 3:
            raise DimensionError(f"maps must be a (K, H, W) stack, got shape {maps.shape}")
        if maps.shape[0] == 0:
            raise ContractError("a salience bundle needs at least one map")
        if not (conf.shape == ids.shape == (maps.shape[0],)):
            raise ContractError(
                f"{maps.shape[0]} maps, {conf.size} confidences and {ids.size} class ids do not line up"
            )
        if not np.all(conf > 0) or not np.all(np.isfinite(conf)):
            raise ContractError("confidences must be finite and strictly positive")
        if not np.all(np.isfinite(maps)) or np.any(maps < 0):
            raise ContractError("activation maps must be finite and nonnegative")
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "confidences", conf)
        object.__setattr__(self, "class_ids", ids)

    @classmethod
    def from_list(cls, maps, confidences, class_ids):
        shapes = {np.shape(m) for m in maps}
        if len(shapes) > 1:
            raise DimensionError(f"activation maps have mismatched shapes {sorted(shapes)}")
        if not maps:
            raise ContractError("a salience bundle needs at least one map")
        return cls(np.stack([np.asarray(m) for m in maps]), confidences, class_ids)

    @property
    def k(self) -> int:
        return self.maps.shape[0]

    @property
    def hw(self) -> tuple:
        return self.maps.shape[1:]

    def top_k(self, k: int) -> "SalienceBundle":
        """Keep the ``k`` most confident entries (stable on ties)."""
        if k < 1:
            raise ContractError(f"top_k needs k >= 1, got {k}")
        order = np.argsort(-self.confidences, kind="stable")[:k]
        return SalienceBundle(self.maps[order], self.confidences[order], self.class_ids[order])


@dataclass(frozen=True, eq=False)
class SalienceMap:
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class TokenPartition:
    """Major indices (descending score) and minor indices (ascending index)."""

    major: np.ndarray
    minor: np.ndarray
    n_total: int
    rho: float

    @property
    def permutation(self) -> np.ndarray:
        return np.concatenate([self.major, self.minor])


def weighted_salience(bundle: SalienceBundle) -> SalienceMap:
    z = bundle.confidences
    w = z / z.sum()
    return SalienceMap(np.tensordot(w, bundle.maps.astype(np.float64), axes=1))


def patch_scores(s, grid: tuple, patch: tuple) -> Tensor:
    """Sum salience inside each patch of a ``rows x cols`` grid, row-major."""
    values = s.values if isinstance(s, SalienceMap) else np.asarray(s)
    rows, cols = grid
    ph, pw = patch
    H, W = values.shape
    if rows * ph != H or cols * pw != W:
        raise DimensionError(f"{rows}x{cols} grid of {ph}x{pw} patches does not tile a {H}x{W} map")
    blocks = values.reshape(rows, ph, cols, pw)
    return Tensor(blocks.sum(axis=(1, 3)).reshape(-1))


def minor_count(n: int, rho: float) -> int:
    """``floor(n * (1 - rho))`` evaluated on the decimal value of ``rho``.

    ``rho`` is read as the nearest fraction with denominator at most 10**6,
    so 0.9 means 9/10 and not the binary float just below it.
    """
    if not 0.0 <= rho <= 1.0:
        raise ContractError(f"rho must lie in [0, 1], got {rho}")
    r = Fraction(rho).limit_denominator(10**6)
    return math.floor(n * (1 - r))


def select_and_rearrange(scores, rho: float) -> TokenPartition:
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    s = s.reshape(-1)
    n = s.size
    if n < 1:
        raise ContractError("cannot partition an empty score vector")
    if np.isnan(s).any():
        raise ContractError("patch scores contain NaN")
    n_minor = minor_count(n, rho)
    order = np.lexsort((np.arange(n), -s))
    major = order[: n - n_minor]
    minor = np.sort(order[n - n_minor :])
    return TokenPartition(major.astype(np.intp), minor.astype(np.intp), n, float(rho))


# ----------------------------------------------------------------------------
# bundle files


def encode_bundle(bundle: SalienceBundle) -> bytes:
    k, (h, w) = bundle.k, bundle.hw
    out = [BUNDLE_HEADER + b"\n", f"{k} {h} {w}\n".encode()]
    for m, z, c in zip(bundle.maps, bundle.confidences, bundle.class_ids):
        out.append(f"{int(c)} {float(z)!r}\n".encode())
        out.append(encode_tnsr(np.asarray(m, dtype=np.float32)))
    return b"".join(out)


def write_bundle(path, bundle: SalienceBundle) -> None:
    Path(path).write_bytes(encode_bundle(bundle))


def _read_line(buf: bytes, pos: int) -> tuple:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise ParseError("unterminated header line", pos)
    return buf[pos:end], end + 1


def decode_bundle(buf: bytes) -> SalienceBundle:
    """Parse a bundle; entries with zero confidence are dropped."""
    line, pos = _read_line(buf, 0)
    if line.strip() != BUNDLE_HEADER:
        raise ParseError("missing CAGA-BUNDLE v1 header", 0)
    start = pos
    line, pos = _read_line(buf, pos)
    try:
        k, h, w = (int(v) for v in line.split())
    except ValueError:
        raise ParseError(f"expected 'K H W', got {line!r}", start) from None
    if k < 1 or h < 1 or w < 1:
        raise ParseError(f"K, H, W must be positive, got {k} {h} {w}", start)
    maps, confs, ids = [], [], []
    for _ in range(k):
        start = pos
        line, pos = _read_line(buf, pos)
        try:
            cid_txt, conf_txt = line.split()
            cid, conf = int(cid_txt), float(conf_txt)
        except ValueError:
            raise ParseError(f"expected 'class_id confidence', got {line!r}", start) from None
        if not math.isfinite(conf) or conf < 0:
            raise ParseError(f"confidence must be finite and nonnegative, got {conf}", start)
        blob_at = pos
        arr, pos = decode_tnsr(buf, pos)
        if arr.shape != (h, w):
            raise ParseError(f"map shape {arr.shape} does not match header {h}x{w}", blob_at)
        if arr.dtype != np.float32:
            raise ParseError(f"bundle maps must be float32, got {arr.dtype}", blob_at + 5)
        if conf > 0:
            maps.append(arr)
            confs.append(conf)
            ids.append(cid)
    if pos != len(buf):
        raise ParseError("trailing bytes after last bundle record", pos)
    if not maps:
        raise ContractError("every confidence in the bundle is zero")
    return SalienceBundle(np.stack(maps), np.array(confs), np.array(ids))


def ingest_bundle(path) -> SalienceBundle:
    return decode_bundle(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# synthetic bundles


def synth_salience(seed, hot_patches, grid: tuple, noise: float = 0.0, patch: tuple = (14, 14), n_maps: int = 1):
    """Bundle whose first map lights up ``hot_patches`` on a patch grid.

    Returns ``(bundle, hot)`` where ``hot`` is the set of hot patch indices.
    Extra maps (``n_maps > 1``) are pure noise with lower confidence.
    """
    rows, cols = grid
    ph, pw = patch
    hot = {int(i) for i in hot_patches}
    if any(i < 0 or i >= rows * cols for i in hot):
        raise ContractError(f"hot patches {sorted(hot)} fall outside a {rows}x{cols} grid")
    rng = np.random.default_rng(seed)
    mask = np.zeros(rows * cols)
    mask[list(hot)] = 1.0
    base = np.kron(mask.reshape(rows, cols), np.ones((ph, pw)))
    maps = [base + noise * rng.random(base.shape)]
    for _ in range(n_maps - 1):
        maps.append(noise * rng.random(base.shape))
    conf = np.linspace(1.0, 0.5, n_maps) / n_maps
    bundle = SalienceBundle(np.stack(maps).astype(np.float32), conf, np.arange(n_maps))
    return bundle, hot
