"""Canonical byte encodings for everything that crosses a channel.

Little-endian throughout: u32 length-prefixed utf-8 strings, matrices as a
(rows, cols) u32 preamble followed by row-major f64 values, vectors as a u32
count plus f64 values. Sizes are therefore exact arithmetic in the dims,
which the communication-accounting checks recompute independently.
"""

from __future__ import annotations

import struct

import numpy as np

from .diffusion import Denoiser, DenoiserLayer
from .errors import ProtocolError
from .federation import (
    AggregationCoefficients,
    ClusterCoefficient,
    DomainEmbedding,
)
from .lowrank import AdapterSet, LoraAdapter

_NO_CLIENT = -1


class Cursor:
    """Forward-only reader over a byte buffer with hard bounds checks."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError(
                f"truncated payload: wanted {n} bytes at offset {self.pos}"
            )
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> bool:
        return self.pos == len(self.data)


def pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def read_str(cur: Cursor) -> str:
    (length,) = cur.unpack("<I")
    return cur.take(length).decode("utf-8")


def pack_vector(vec: np.ndarray) -> bytes:
    vec = np.ascontiguousarray(vec, dtype="<f8")
    return struct.pack("<I", vec.size) + vec.tobytes()


def read_vector(cur: Cursor) -> np.ndarray:
    (size,) = cur.unpack("<I")
    return np.frombuffer(cur.take(8 * size), dtype="<f8").copy()


def pack_matrix(mat: np.ndarray) -> bytes:
    mat = np.ascontiguousarray(mat, dtype="<f8")
    if mat.ndim != 2:
        raise ProtocolError(f"matrices must be 2-d, got shape {mat.shape}")
    rows, cols = mat.shape
    return struct.pack("<II", rows, cols) + mat.tobytes()


def read_matrix(cur: Cursor) -> np.ndarray:
    rows, cols = cur.unpack("<II")
    body = cur.take(8 * rows * cols)
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()


def pack_adapter(adapter: LoraAdapter) -> bytes:
    return b"".join([
        pack_str(adapter.layer_id),
        struct.pack("<I", adapter.rank),
        struct.pack("<d", adapter.alpha),
        pack_matrix(adapter.up),
        pack_matrix(adapter.down),
    ])


def read_adapter(cur: Cursor) -> LoraAdapter:
    layer_id = read_str(cur)
    (rank,) = cur.unpack("<I")
    (alpha,) = cur.unpack("<d")
    up = read_matrix(cur)
    down = read_matrix(cur)
    return LoraAdapter(layer_id, rank, down, up, alpha)


def pack_adapter_set(adapters: AdapterSet) -> bytes:
    parts = [struct.pack("<I", len(adapters.layer_ids))]
    for layer in adapters.layer_ids:
        parts.append(pack_adapter(adapters[layer]))
    return b"".join(parts)


def read_adapter_set(cur: Cursor) -> AdapterSet:
    (count,) = cur.unpack("<I")
    return AdapterSet({a.layer_id: a for a in (read_adapter(cur) for _ in range(count))})


def pack_embedding(emb: DomainEmbedding) -> bytes:
    client = _NO_CLIENT if emb.client_id is None else emb.client_id
    return (struct.pack("<i", client)
            + struct.pack("<B", int(emb.fallback))
            + pack_vector(emb.vector))


def read_embedding(cur: Cursor) -> DomainEmbedding:
    (client,) = cur.unpack("<i")
    (fallback,) = cur.unpack("<B")
    vec = read_vector(cur)
    return DomainEmbedding(vec, None if client == _NO_CLIENT else client,
                           bool(fallback))


def pack_coefficients(coeffs: AggregationCoefficients) -> bytes:
    parts = [struct.pack("<I", len(coeffs.entries))]
    for e in coeffs.entries:
        parts.append(struct.pack("<idddB", e.cluster_id, e.ded, e.snt_dist,
                                 e.weight, int(e.filtered)))
    parts.append(struct.pack("<BB", int(coeffs.all_filtered),
                             int(coeffs.degenerate_snt)))
    return b"".join(parts)


def read_coefficients(cur: Cursor) -> AggregationCoefficients:
    (count,) = cur.unpack("<I")
    entries = []
    for _ in range(count):
        cluster_id, d, s, w, filtered = cur.unpack("<idddB")
        entries.append(ClusterCoefficient(cluster_id, d, s, w, bool(filtered)))
    all_filtered, degenerate = cur.unpack("<BB")
    return AggregationCoefficients(tuple(entries), bool(all_filtered),
                                   bool(degenerate))


def serialize_denoiser(denoiser: Denoiser) -> bytes:
    """Full base-model bytes; the reference mass for overhead comparisons."""
    parts = [struct.pack("<I", len(denoiser.layers))]
    for layer in denoiser.layers:
        parts.append(pack_str(layer.name))
        parts.append(pack_str(layer.activation))
        parts.append(pack_matrix(layer.weight))
        parts.append(pack_vector(layer.bias))
    parts.append(struct.pack("<I", len(denoiser.adaptable)))
    for name in denoiser.adaptable:
        parts.append(pack_str(name))
    parts.append(struct.pack("<III", denoiser.point_dim, denoiser.time_dim,
                             denoiser.token_dim))
    return b"".join(parts)


def parse_denoiser(data: bytes) -> Denoiser:
    cur = Cursor(data)
    (count,) = cur.unpack("<I")
    layers = []
    for _ in range(count):
        name = read_str(cur)
        activation = read_str(cur)
        weight = read_matrix(cur)
        bias = read_vector(cur)
        layers.append(DenoiserLayer(name, weight, bias, activation))
    (n_adapt,) = cur.unpack("<I")
    adaptable = tuple(read_str(cur) for _ in range(n_adapt))
    point_dim, time_dim, token_dim = cur.unpack("<III")
    if not cur.done():
        raise ProtocolError("trailing bytes after denoiser payload")
    return Denoiser(tuple(layers), adaptable, point_dim, time_dim, token_dim)
