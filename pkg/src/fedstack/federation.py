"""Aggregation-server logic: domain encoding, clustering, and the global merge.

The training server never touches raw samples or plaintext style names. It
works from uploaded adapter sets and unit-vector domain embeddings, groups
clients by embedding similarity, averages within a group at the median rank,
and builds one multi-style adapter across groups by stacking. FedAvg and
per-layer geometric-median aggregators are kept alongside as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .diffusion import Denoiser, DiffusionSchedule, SampleBatch, StyleToken, training_step
from .errors import DimensionError, FedstackError, NumericError
from .lowrank import (
    AdapterSet,
    EnergyProfile,
    LoraAdapter,
    adapter_from_delta,
    align_rank,
    average_adapters,
    median_rank,
    snt_distance,
    snt_profile,
    stack_adapters,
)
from .rng import stream

EMBED_DIM = 16
ALLOWED_RANKS = (4, 8, 16, 64, 128)

_TINY = 1e-12


@dataclass(frozen=True)
class DomainEmbedding:
    """Unit vector standing in for a client's style, deliberately opaque.

    client_id is None for derived vectors (centroids, references). fallback
    marks embeddings produced by the zero-projection escape hatch.
    """

    vector: np.ndarray
    client_id: int | None = None
    fallback: bool = False

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1:
            raise DimensionError("embedding must be a 1-d vector")
        if abs(float(np.linalg.norm(vec)) - 1.0) > 1e-9:
            raise DimensionError("embedding must have unit norm")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class ClusterAssignment:
    by_client: Mapping[int, int]
    members: Mapping[int, tuple[int, ...]]
    centroids: Mapping[int, DomainEmbedding]

    def __post_init__(self):
        listed = sorted(c for ms in self.members.values() for c in ms)
        if listed != sorted(self.by_client) or len(set(listed)) != len(listed):
            raise ValueError("cluster members must partition the client set")
        if set(self.members) != set(self.centroids):
            raise ValueError("every cluster needs a centroid")

    @property
    def cluster_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.members))

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ClusterCoefficient:
    cluster_id: int
    ded: float
    snt_dist: float
    weight: float
    filtered: bool


@dataclass(frozen=True)
class AggregationCoefficients:
    """Per-cluster mixing weights for the global merge, plus warning flags."""

    entries: tuple[ClusterCoefficient, ...]
    all_filtered: bool = False
    degenerate_snt: bool = False

    def __post_init__(self):
        live = sum(e.weight for e in self.entries if not e.filtered)
        if abs(live - 1.0) > 1e-9:
            raise ValueError(f"surviving weights must sum to 1, got {live!r}")
        for entry in self.entries:
            if entry.weight < 0:
                raise ValueError("weights must be nonnegative")
            if entry.filtered and entry.weight != 0.0:
                raise ValueError("filtered clusters carry weight exactly 0")

    def weight_for(self, cluster_id: int) -> float:
        for entry in self.entries:
            if entry.cluster_id == cluster_id:
                return entry.weight
        raise KeyError(cluster_id)


@dataclass(frozen=True)
class ClientProfile:
    """One client's federated state. Server-side views null out token and data."""

    client_id: int
    rank: int
    adapters: AdapterSet
    token: StyleToken | None
    embedding: DomainEmbedding
    n_samples: int
    data: SampleBatch | None = None
    encoder_salt: int = 0

    def __post_init__(self):
        if self.rank not in ALLOWED_RANKS:
            raise ValueError(
                f"rank must be one of {ALLOWED_RANKS}, got {self.rank}"
            )
        for adapter in self.adapters.values():
            expected = AdapterSet.capped_rank(self.rank, adapter.d_out, adapter.d_in)
            if adapter.rank != expected:
                raise DimensionError(
                    f"client {self.client_id}, layer {adapter.layer_id}: "
                    f"rank {adapter.rank} does not match declared {self.rank}"
                )
        if self.n_samples < 1:
            raise ValueError("sample count must be positive")
        if self.data is not None and len(self.data) != self.n_samples:
            raise ValueError("sample count disagrees with the attached data")


def encode_domain(token: StyleToken, salt: int,
                  client_id: int | None = None) -> DomainEmbedding:
    """Map a style token to a unit vector via a salt-keyed random projection.

    The projection has no published inverse, so the server learns only
    relative geometry. Equal tokens give equal embeddings. An all-zero
    projection (the neutral token) is perturbed by a salt-keyed direction and
    renormalized, with the fallback flag raised.
    """
    vec = np.asarray(token.vector, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise ValueError("token must be finite")
    proj = stream(int(salt), "domain-encoder", vec.size).standard_normal(
        (EMBED_DIM, vec.size)
    )
    out = proj @ vec
    fallback = False
    if float(np.linalg.norm(out)) < _TINY:
        out = out + stream(int(salt), "domain-encoder", "fallback").standard_normal(
            EMBED_DIM
        )
        fallback = True
    return DomainEmbedding(out / np.linalg.norm(out), client_id, fallback)


def cluster_clients(embeddings: Sequence[DomainEmbedding],
                    tau_c: float) -> ClusterAssignment:
    """Average-linkage agglomeration on cosine similarity, no preset count.

    Merging continues while some pair of clusters has mean pairwise cosine
    similarity >= tau_c; ties go to the pair containing the lowest client id.
    Cluster ids are the minimum member id, which makes relabeling stable.
    """
    if not embeddings:
        raise ValueError("nothing to cluster")
    if not 0.0 < tau_c < 1.0:
        raise ValueError(f"tau_c must lie in (0, 1), got {tau_c}")
    ids = [e.client_id for e in embeddings]
    if any(i is None for i in ids) or len(set(ids)) != len(ids):
        raise ValueError("embeddings must carry distinct client ids")
    vecs = np.array([e.vector for e in embeddings])
    sim = vecs @ vecs.T

    groups: list[list[int]] = [[i] for i in range(len(ids))]
    while len(groups) > 1:
        best_key = None
        best_pair = None
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                s = float(np.mean(sim[np.ix_(groups[a], groups[b])]))
                ga = min(ids[i] for i in groups[a])
                gb = min(ids[i] for i in groups[b])
                key = (-s, min(ga, gb), max(ga, gb))
                if best_key is None or key < best_key:
                    best_key = key
                    best_pair = (a, b)
        if -best_key[0] < tau_c:
            break
        a, b = best_pair
        groups[a] = groups[a] + groups[b]
        del groups[b]

    by_client: dict[int, int] = {}
    members: dict[int, tuple[int, ...]] = {}
    centroids: dict[int, DomainEmbedding] = {}
    for group in groups:
        cids = tuple(sorted(ids[i] for i in group))
        cluster_id = cids[0]
        members[cluster_id] = cids
        for c in cids:
            by_client[c] = cluster_id
        mean = vecs[group].mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < _TINY:
            # antipodal members wash out; fall back to the lowest-id member
            mean = vecs[min(group, key=lambda i: ids[i])]
            norm = 1.0
        centroids[cluster_id] = DomainEmbedding(mean / norm, None)
    return ClusterAssignment(by_client, members, centroids)


def _aligned_factor_average(sets: Sequence[AdapterSet], target_rank: int,
                            weights: np.ndarray) -> AdapterSet:
    out = {}
    for layer in sets[0].layer_ids:
        adapters = [s[layer] for s in sets]
        first = adapters[0]
        rank = AdapterSet.capped_rank(target_rank, first.d_out, first.d_in)
        aligned = [align_rank(a, rank) for a in adapters]
        out[layer] = average_adapters(aligned, weights)
    return AdapterSet(out)


def intra_cluster_aggregate(members: Sequence[ClientProfile],
                            weights: Sequence[float] | None = None) -> AdapterSet:
    """Average a cluster at its median rank: pad up, truncate down, then mean."""
    if not members:
        raise ValueError("empty cluster")
    if len(members) == 1:
        return members[0].adapters
    if weights is None:
        w = np.full(len(members), 1.0 / len(members))
    else:
        w = np.asarray(weights, dtype=np.float64)
        total = float(w.sum())
        if total <= 0:
            raise ValueError("weights must have positive mass")
        w = w / total
    target = median_rank([m.rank for m in members])
    return _aligned_factor_average([m.adapters for m in members], target, w)


def ded(cluster_centroid: DomainEmbedding, reference: DomainEmbedding) -> float:
    """Domain distance 1 - cos, in [0, 2]. Zero means on-reference."""
    cos = float(cluster_centroid.vector @ reference.vector)
    return max(0.0, 1.0 - cos)


def _mean_profile(profiles: Sequence[EnergyProfile],
                  indices: Sequence[int]) -> EnergyProfile:
    mean = np.mean([profiles[i].normalized for i in indices], axis=0)
    return EnergyProfile(profiles[0].layer_ids, mean, mean)


def compute_coefficients(clusters: Sequence[tuple[AdapterSet, DomainEmbedding]],
                         tau_ded: float,
                         lambda_snt: float) -> AggregationCoefficients:
    """Per-cluster mixing weights: hard domain gating, then energy softmax.

    Clusters farther than tau_ded from the cohort reference (the normalized
    mean of all centroids) get weight 0. Survivors are weighted by
    softmax(-lambda_snt * d) where d is the total-variation distance between
    a cluster's layer-energy profile and the survivors' mean profile. If the
    gate removes everyone, weights fall back to uniform over all clusters and
    the all_filtered flag is raised; the filtered markers are cleared in that
    case so the weights remain usable downstream.
    """
    if not clusters:
        raise ValueError("no clusters to weight")
    if lambda_snt < 0:
        raise ValueError("lambda_snt must be nonnegative")
    centroids = [c for _, c in clusters]
    mean = np.mean([c.vector for c in centroids], axis=0)
    norm = float(np.linalg.norm(mean))
    reference = (DomainEmbedding(mean / norm) if norm >= _TINY else centroids[0])

    deds = [ded(c, reference) for c in centroids]
    keep = [i for i, d in enumerate(deds) if d <= tau_ded]
    all_filtered = not keep
    if all_filtered:
        keep = list(range(len(clusters)))

    profiles = [snt_profile(adapters) for adapters, _ in clusters]
    degenerate = any(p.degenerate for p in profiles)
    center = _mean_profile(profiles, keep)
    dists = [snt_distance(p, center) for p in profiles]

    weights = np.zeros(len(clusters))
    if all_filtered:
        weights[:] = 1.0 / len(clusters)
        filtered = [False] * len(clusters)
    else:
        scores = np.array([-lambda_snt * dists[i] for i in keep])
        soft = np.exp(scores - scores.max())
        weights[keep] = soft / soft.sum()
        filtered = [i not in keep for i in range(len(clusters))]

    entries = []
    for i, (centroid, d) in enumerate(zip(centroids, deds)):
        cluster_id = centroid.client_id if centroid.client_id is not None else i
        entries.append(ClusterCoefficient(cluster_id, d, dists[i],
                                          float(weights[i]), filtered[i]))
    return AggregationCoefficients(tuple(entries), all_filtered, degenerate)


def inter_cluster_aggregate(
    clusters: Sequence[tuple[AdapterSet, DomainEmbedding]],
    coefficients: AggregationCoefficients,
) -> tuple[AdapterSet, tuple[str, ...]]:
    """Stack surviving clusters into one multi-style adapter set.

    Per layer the output delta equals the weight-combined sum of member
    deltas. When the combined rank would exceed what the layer can hold, that
    layer collapses to a dense sum refactored at the layer bound (lossless,
    since the bound is the maximal rank of the shape) and its id is reported
    so the round can flag the overflow.
    """
    if len(clusters) != len(coefficients.entries):
        raise DimensionError("one coefficient entry per cluster required")
    live = [(adapters, entry.weight)
            for (adapters, _), entry in zip(clusters, coefficients.entries)
            if not entry.filtered]
    out = {}
    truncated: list[str] = []
    for layer in live[0][0].layer_ids:
        members = [adapters[layer] for adapters, _ in live]
        weights = [w for _, w in live]
        bound = min(members[0].d_out, members[0].d_in)
        if sum(m.rank for m in members) <= bound:
            out[layer] = stack_adapters(members, weights)
        else:
            dense = sum(w * m.delta for m, w in zip(members, weights))
            out[layer] = adapter_from_delta(layer, dense, bound)
            truncated.append(layer)
    return AdapterSet(out), tuple(truncated)


def fedavg_aggregate(profiles: Sequence[ClientProfile]) -> AdapterSet:
    """Baseline: sample-count-weighted factor average at the global median rank."""
    if not profiles:
        raise ValueError("no profiles")
    counts = np.array([p.n_samples for p in profiles], dtype=np.float64)
    target = median_rank([p.rank for p in profiles])
    return _aligned_factor_average(
        [p.adapters for p in profiles], target, counts / counts.sum()
    )


def _weiszfeld(points: np.ndarray, tol: float,
               max_iter: int) -> tuple[np.ndarray, bool]:
    y = points.mean(axis=0)
    for _ in range(max_iter):
        dist = np.linalg.norm(points - y, axis=1)
        dist = np.maximum(dist, _TINY)  # anchor coincidence guard
        inv = 1.0 / dist
        shifted = (points * inv[:, None]).sum(axis=0) / inv.sum()
        step = float(np.linalg.norm(shifted - y))
        y = shifted
        if step < tol:
            return y, True
    return y, False


def geomed_aggregate(profiles: Sequence[ClientProfile], tol: float = 1e-9,
                     max_iter: int = 1000) -> tuple[AdapterSet, bool]:
    """Baseline: per-layer geometric median of concatenated (up, down) factors.

    Requires pre-aligned ranks. Returns the aggregate and whether every
    layer's Weiszfeld iteration converged within max_iter.
    """
    if not profiles:
        raise ValueError("no profiles")
    if len({p.rank for p in profiles}) != 1:
        raise DimensionError("geometric median needs pre-aligned ranks")
    out = {}
    converged = True
    for layer in profiles[0].adapters.layer_ids:
        members = [p.adapters[layer] for p in profiles]
        if len({m.alpha for m in members}) != 1:
            raise DimensionError(f"{layer}: mixed alphas cannot be combined pointwise")
        points = np.array(
            [np.concatenate([m.up.ravel(), m.down.ravel()]) for m in members]
        )
        median, ok = _weiszfeld(points, tol, max_iter)
        converged = converged and ok
        first = members[0]
        split = first.up.size
        out[layer] = LoraAdapter(
            layer,
            first.rank,
            median[split:].reshape(first.down.shape),
            median[:split].reshape(first.up.shape),
            first.alpha,
        )
    return AdapterSet(out), converged


def local_finetune(profile: ClientProfile, denoiser: Denoiser, epochs: int,
                   learning_rate: float, schedule: DiffusionSchedule,
                   rng: np.random.Generator, batch_size: int = 2) -> ClientProfile:
    """Client-side pass: adapter + token training, then a fresh embedding.

    Runs epochs x ceil(n / batch_size) steps with both parameter groups
    trainable, shuffling each epoch from the per-client stream. The returned
    profile carries the updated adapters, token, and a recomputed domain
    embedding; everything else is untouched.
    """
    if profile.data is None or len(profile.data) == 0:
        raise ValueError(f"client {profile.client_id}: no local data")
    if profile.token is None:
        raise ValueError(f"client {profile.client_id}: no trainable token")
    adapters, token = profile.adapters, profile.token
    points = profile.data.points
    try:
        for _ in range(epochs):
            order = rng.permutation(len(points))
            for lo in range(0, len(points), batch_size):
                chunk = SampleBatch(points[order[lo:lo + batch_size]],
                                    profile.data.style)
                loss, adapters, token = training_step(
                    denoiser, adapters, token, chunk, "both", learning_rate,
                    schedule, rng,
                )
                if not np.isfinite(loss):
                    raise NumericError("training loss diverged")
    except (FedstackError, ArithmeticError, FloatingPointError) as exc:
        raise NumericError(f"client {profile.client_id}: {exc}") from exc
    embedding = encode_domain(token, profile.encoder_salt, profile.client_id)
    return replace(profile, adapters=adapters, token=token, embedding=embedding)
