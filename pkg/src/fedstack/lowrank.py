"""Low-rank adapter algebra.

An adapter stores a factored weight update for one layer: a wide `down`
factor (rank x d_in), a tall `up` factor (d_out x rank), and a scalar
`alpha`. The dense update it represents is

    delta = (alpha / rank) * up @ down

Everything else in the package manipulates adapters through the operations
here: applying deltas to base weights, aligning mismatched ranks by zero
padding or optimal truncation, averaging factors, stacking several adapters
into one wider adapter whose delta is an exact weighted sum, and reading
singular-value energy off deltas for layer-wise comparisons.

Rank alignment and averaging normalise alpha to the common rank, so the
alpha/rank prefactor of every emitted adapter is 1. That convention removes
scale ambiguity when factors from different clients are mixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import DimensionError, NumericError, RankOverflowError

__all__ = [
    "LoraAdapter",
    "AdapterSet",
    "EnergyProfile",
    "adapter_from_delta",
    "apply_delta",
    "median_rank",
    "align_rank",
    "average_adapters",
    "stack_adapters",
    "svd",
    "energy_trace",
    "snt_profile",
    "snt_distance",
]

_MAX_SIDE = 256


@dataclass(frozen=True)
class LoraAdapter:
    """Factored update for one layer. Treat instances as immutable."""

    layer_id: str
    rank: int
    down: np.ndarray
    up: np.ndarray
    alpha: float

    def __post_init__(self):
        down = np.asarray(self.down, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)
        object.__setattr__(self, "down", down)
        object.__setattr__(self, "up", up)
        if down.ndim != 2 or up.ndim != 2:
            raise DimensionError(f"{self.layer_id}: factors must be 2-d")
        if self.rank < 1:
            raise ValueError(f"{self.layer_id}: rank must be >= 1, got {self.rank}")
        if down.shape[0] != self.rank or up.shape[1] != self.rank:
            raise DimensionError(
                f"{self.layer_id}: factor shapes {up.shape}/{down.shape} "
                f"do not match rank {self.rank}"
            )
        if self.rank > min(self.d_in, self.d_out):
            raise RankOverflowError(
                f"{self.layer_id}: rank {self.rank} exceeds "
                f"min(d_in={self.d_in}, d_out={self.d_out})"
            )
        if not (np.all(np.isfinite(down)) and np.all(np.isfinite(up))):
            raise NumericError(f"{self.layer_id}: non-finite factor entries")
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise ValueError(f"{self.layer_id}: alpha must be finite and > 0")

    @property
    def d_in(self) -> int:
        return self.down.shape[1]

    @property
    def d_out(self) -> int:
        return self.up.shape[0]

    @property
    def delta(self) -> np.ndarray:
        """Dense update this adapter represents."""
        return (self.alpha / self.rank) * (self.up @ self.down)


class AdapterSet:
    """Adapters for the adaptable layers of one model, keyed by layer id.

    Canonical layer order is sorted key order; that order fixes energy
    profile entries and serialization layout.
    """

    def __init__(self, adapters: Mapping[str, LoraAdapter]):
        if not adapters:
            raise ValueError("an adapter set cannot be empty")
        for key, adapter in adapters.items():
            if key != adapter.layer_id:
                raise ValueError(f"key {key!r} does not match layer id {adapter.layer_id!r}")
        self._adapters = {k: adapters[k] for k in sorted(adapters)}

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(self._adapters)

    def __getitem__(self, layer_id: str) -> LoraAdapter:
        return self._adapters[layer_id]

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._adapters

    def __iter__(self) -> Iterator[str]:
        return iter(self._adapters)

    def __len__(self) -> int:
        return len(self._adapters)

    def items(self):
        return self._adapters.items()

    def values(self):
        return self._adapters.values()

    def replace(self, **adapters: LoraAdapter) -> "AdapterSet":
        merged = dict(self._adapters)
        for key, adapter in adapters.items():
            if key not in merged:
                raise KeyError(key)
            merged[key] = adapter
        return AdapterSet(merged)

    def validate_shapes(self, layer_shapes: Mapping[str, tuple[int, int]]) -> None:
        """Check the key set and factor shapes against (d_out, d_in) specs."""
        if set(self._adapters) != set(layer_shapes):
            raise DimensionError(
                f"layer ids {sorted(self._adapters)} do not cover {sorted(layer_shapes)}"
            )
        for key, (d_out, d_in) in layer_shapes.items():
            adapter = self._adapters[key]
            if (adapter.d_out, adapter.d_in) != (d_out, d_in):
                raise DimensionError(
                    f"{key}: adapter is {adapter.d_out}x{adapter.d_in}, "
                    f"layer is {d_out}x{d_in}"
                )

    @staticmethod
    def capped_rank(rank: int, d_out: int, d_in: int) -> int:
        """Largest legal rank for a layer, given a declared rank."""
        return min(rank, d_out, d_in)

    @classmethod
    def init_lora(
        cls,
        layer_shapes: Mapping[str, tuple[int, int]],
        rank: int,
        rng: np.random.Generator,
    ) -> "AdapterSet":
        """Fresh trainable adapters: random down, zero up, so delta is 0."""
        adapters = {}
        for key in sorted(layer_shapes):
            d_out, d_in = layer_shapes[key]
            r = cls.capped_rank(rank, d_out, d_in)
            down = rng.standard_normal((r, d_in)) / np.sqrt(d_in)
            up = np.zeros((d_out, r))
            adapters[key] = LoraAdapter(key, r, down, up, float(r))
        return cls(adapters)

    @classmethod
    def random(
        cls,
        layer_shapes: Mapping[str, tuple[int, int]],
        rank: int,
        rng: np.random.Generator,
        scale: float = 1.0,
    ) -> "AdapterSet":
        """Both factors random. Used by tests and fixtures, not training."""
        adapters = {}
        for key in sorted(layer_shapes):
            d_out, d_in = layer_shapes[key]
            r = cls.capped_rank(rank, d_out, d_in)
            down = scale * rng.standard_normal((r, d_in))
            up = scale * rng.standard_normal((d_out, r))
            adapters[key] = LoraAdapter(key, r, down, up, float(r))
        return cls(adapters)


@dataclass(frozen=True)
class EnergyProfile:
    """Per-layer squared-singular-value mass of an adapter set's deltas."""

    layer_ids: tuple[str, ...]
    raw: np.ndarray
    normalized: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        normalized = np.asarray(self.normalized, dtype=np.float64)
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "normalized", normalized)
        if raw.shape != (len(self.layer_ids),) or normalized.shape != raw.shape:
            raise DimensionError("profile lengths do not match layer ids")
        if np.any(raw < 0):
            raise ValueError("raw energies must be nonnegative")
        if abs(float(normalized.sum()) - 1.0) > 1e-9:
            raise ValueError("normalized profile must sum to 1")


def apply_delta(base: np.ndarray, adapter: LoraAdapter, scale: float) -> np.ndarray:
    """Return base + scale * delta without mutating the base matrix."""
    base = np.asarray(base, dtype=np.float64)
    if base.shape != (adapter.d_out, adapter.d_in):
        raise DimensionError(
            f"{adapter.layer_id}: base is {base.shape}, "
            f"adapter expects {(adapter.d_out, adapter.d_in)}"
        )
    if not np.isfinite(scale):
        raise ValueError("scale must be finite")
    return base + scale * adapter.delta


def median_rank(ranks: Sequence[int]) -> int:
    """Median of a rank list; ties on even counts resolve to the lower middle."""
    if len(ranks) == 0:
        raise ValueError("empty rank list")
    if any(r < 1 for r in ranks):
        raise ValueError(f"ranks must be >= 1: {list(ranks)}")
    ordered = sorted(int(r) for r in ranks)
    return ordered[(len(ordered) - 1) // 2]


def _normalised_factors(adapter: LoraAdapter) -> tuple[np.ndarray, np.ndarray]:
    # Fold alpha/rank into up so the pair represents delta with prefactor 1.
    prefactor = adapter.alpha / adapter.rank
    if prefactor == 1.0:
        return adapter.up, adapter.down
    return adapter.up * prefactor, adapter.down


def adapter_from_delta(layer_id: str, delta: np.ndarray, rank: int) -> LoraAdapter:
    """Best rank-`rank` adapter for a dense delta, via the SVD."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 2:
        raise DimensionError("delta must be 2-d")
    if rank > min(delta.shape):
        raise RankOverflowError(
            f"{layer_id}: rank {rank} exceeds min{delta.shape}"
        )
    u, s, v = svd(delta)
    up = u[:, :rank] * s[:rank]
    down = v[:, :rank].T
    return LoraAdapter(layer_id, rank, down, up, float(rank))


def align_rank(adapter: LoraAdapter, target_rank: int) -> LoraAdapter:
    """Re-express an adapter at a new rank.

    Padding to a larger rank appends zero rows to down and zero columns to
    up, which leaves delta exactly unchanged. Shrinking truncates the SVD of
    delta, the best Frobenius approximation at the target rank. Either way
    the result carries alpha == rank.
    """
    if target_rank < 1:
        raise ValueError(f"target rank must be >= 1, got {target_rank}")
    if target_rank > min(adapter.d_in, adapter.d_out):
        raise RankOverflowError(
            f"{adapter.layer_id}: target rank {target_rank} exceeds "
            f"min(d_in={adapter.d_in}, d_out={adapter.d_out})"
        )
    if target_rank == adapter.rank and adapter.alpha == float(adapter.rank):
        return adapter
    if target_rank >= adapter.rank:
        up, down = _normalised_factors(adapter)
        pad = target_rank - adapter.rank
        up = np.hstack([up, np.zeros((adapter.d_out, pad))])
        down = np.vstack([down, np.zeros((pad, adapter.d_in))])
        return LoraAdapter(adapter.layer_id, target_rank, down, up, float(target_rank))
    return adapter_from_delta(adapter.layer_id, adapter.delta, target_rank)


def average_adapters(
    adapters: Sequence[LoraAdapter], weights: Sequence[float]
) -> LoraAdapter:
    """Factor-wise weighted mean of same-rank adapters for one layer.

    Factors are brought to the alpha == rank convention first, so adapters
    with different alphas average consistently. Opposing factors cancel
    here; that is the point of comparing this with stack_adapters.
    """
    if not adapters:
        raise ValueError("nothing to average")
    if len(weights) != len(adapters):
        raise ValueError("one weight per adapter required")
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and nonnegative")
    if abs(float(weights.sum()) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {weights.sum()!r}")
    first = adapters[0]
    for other in adapters[1:]:
        if other.layer_id != first.layer_id:
            raise ValueError(f"mixed layers: {other.layer_id!r} vs {first.layer_id!r}")
        if other.rank != first.rank:
            raise DimensionError(
                f"{first.layer_id}: ranks differ ({other.rank} vs {first.rank}); "
                "align before averaging"
            )
        if (other.d_out, other.d_in) != (first.d_out, first.d_in):
            raise DimensionError(f"{first.layer_id}: layer shapes differ")
    up = np.zeros((first.d_out, first.rank))
    down = np.zeros((first.rank, first.d_in))
    for w, adapter in zip(weights, adapters):
        a_up, a_down = _normalised_factors(adapter)
        up += w * a_up
        down += w * a_down
    return LoraAdapter(first.layer_id, first.rank, down, up, float(first.rank))


def stack_adapters(
    adapters: Sequence[LoraAdapter], coefficients: Sequence[float]
) -> LoraAdapter:
    """Concatenate adapters into one whose delta is sum_i c_i * delta_i, exactly.

    Down factors stack as new rows; each up block is scaled by its
    coefficient times its alpha/rank prefactor. No member information is
    lost to cancellation, unlike averaging.
    """
    if not adapters:
        raise ValueError("nothing to stack")
    if len(coefficients) != len(adapters):
        raise ValueError("one coefficient per adapter required")
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if not np.all(np.isfinite(coefficients)) or np.any(coefficients < 0):
        raise ValueError("coefficients must be finite and nonnegative")
    first = adapters[0]
    for other in adapters[1:]:
        if other.layer_id != first.layer_id:
            raise ValueError(f"mixed layers: {other.layer_id!r} vs {first.layer_id!r}")
        if (other.d_out, other.d_in) != (first.d_out, first.d_in):
            raise DimensionError(f"{first.layer_id}: layer shapes differ")
    rank_out = int(sum(a.rank for a in adapters))
    if rank_out > min(first.d_in, first.d_out):
        raise RankOverflowError(
            f"{first.layer_id}: stacked rank {rank_out} exceeds "
            f"min(d_in={first.d_in}, d_out={first.d_out})"
        )
    up_blocks = []
    down_blocks = []
    for c, adapter in zip(coefficients, adapters):
        prefactor = c * adapter.alpha / adapter.rank
        up_blocks.append(prefactor * adapter.up)
        down_blocks.append(adapter.down)
    up = np.hstack(up_blocks)
    down = np.vstack(down_blocks)
    return LoraAdapter(first.layer_id, rank_out, down, up, float(rank_out))


def _complete_basis(u: np.ndarray, have: int) -> None:
    # Fill columns have..n-1 with unit vectors orthogonal to the rest.
    m, n = u.shape
    col = have
    for candidate in range(m):
        if col >= n:
            return
        vec = np.zeros(m)
        vec[candidate] = 1.0
        for _ in range(2):  # twice for numerical orthogonality
            vec -= u[:, :col] @ (u[:, :col].T @ vec)
        norm = np.linalg.norm(vec)
        if norm > 0.5:
            u[:, col] = vec / norm
            col += 1
    while col < n:
        # Nearly spanned: every coordinate vector projects close to the
        # basis, so take whichever keeps the most residual mass.
        best_vec = None
        best_norm = 0.0
        for candidate in range(m):
            vec = np.zeros(m)
            vec[candidate] = 1.0
            for _ in range(2):
                vec -= u[:, :col] @ (u[:, :col].T @ vec)
            norm = np.linalg.norm(vec)
            if norm > best_norm:
                best_vec, best_norm = vec, norm
        if best_norm <= 1e-8:
            raise NumericError("could not complete an orthonormal basis")
        u[:, col] = best_vec / best_norm
        col += 1


def svd(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD by one-sided Jacobi rotations.

    Returns (u, s, v) with matrix ~= u @ diag(s) @ v.T, singular values
    descending, and both factors column-orthonormal. Columns of the working
    copy are rotated pairwise until every pair is orthogonal relative to a
    1e-13 threshold; rank-deficient directions get an explicit orthonormal
    completion so the factors stay orthonormal even for the zero matrix.
    Intended for the small dense matrices this package works with.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError("svd expects a 2-d matrix")
    if not np.all(np.isfinite(a)):
        raise NumericError("svd input has non-finite entries")
    rows, cols = a.shape
    if rows == 0 or cols == 0:
        raise DimensionError("svd input must be nonempty")
    if max(rows, cols) > _MAX_SIDE:
        raise ValueError(f"matrix side exceeds {_MAX_SIDE}")
    if rows < cols:
        u, s, v = svd(a.T)
        return v, s, u

    v = np.eye(cols)
    tol = 1e-13
    for _ in range(100):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                ap = a[:, p]
                aq = a[:, q]
                app = float(ap @ ap)
                aqq = float(aq @ aq)
                apq = float(ap @ aq)
                if apq * apq <= tol * tol * app * aqq:
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s_ = t * c
                a[:, p], a[:, q] = c * ap - s_ * aq, s_ * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s_ * vq
                v[:, q] = s_ * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericError("jacobi sweep limit reached without convergence")

    norms = np.linalg.norm(a, axis=0)
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    a = a[:, order]
    v = v[:, order]
    u = np.zeros((rows, cols))
    cutoff = max(rows, cols) * np.finfo(np.float64).eps * (norms[0] if norms.size else 0.0)
    solid = 0
    for j in range(cols):
        if norms[j] > cutoff and norms[j] > 0.0:
            u[:, j] = a[:, j] / norms[j]
            solid = j + 1
        else:
            norms[j] = 0.0
    if solid < cols:
        _complete_basis(u, solid)
    return u, norms, v


def energy_trace(adapter: LoraAdapter) -> float:
    """Total squared singular value mass of delta (its squared Frobenius norm)."""
    delta = adapter.delta
    return float(np.sum(delta * delta))


def snt_profile(adapters: AdapterSet) -> EnergyProfile:
    """Layer-wise energy distribution of an adapter set.

    Raw energies are normalised across layers to sum to 1. An all-zero set
    has no distribution to speak of; it gets a uniform profile with the
    degenerate flag raised.
    """
    layer_ids = adapters.layer_ids
    raw = np.array([energy_trace(adapters[k]) for k in layer_ids])
    total = float(raw.sum())
    if total <= 0.0:
        uniform = np.full(len(layer_ids), 1.0 / len(layer_ids))
        return EnergyProfile(layer_ids, raw, uniform, degenerate=True)
    return EnergyProfile(layer_ids, raw, raw / total, degenerate=False)


def snt_distance(profile_a: EnergyProfile, profile_b: EnergyProfile) -> float:
    """Total-variation distance between two normalised energy profiles."""
    if profile_a.layer_ids != profile_b.layer_ids:
        raise DimensionError("profiles cover different layers")
    dist = 0.5 * float(np.abs(profile_a.normalized - profile_b.normalized).sum())
    return min(max(dist, 0.0), 1.0)
