"""Message schema and the round/inference flows between the three roles.

Clients talk to the training server in adapters and embeddings only; the
training server never holds samples or base weights, and the inference
server receives exactly one adapter-bearing message kind: the stacked
global set. Isolation is a property of the schema first (message types have
no fields that could carry the forbidden payloads to the wrong role) and is
double-checked by an audit walk over the log.

Addresses: clients are their nonnegative ids; the two servers and the
broadcast target use reserved negatives.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .diffusion import (
    Denoiser,
    DenoiserLayer,
    DiffusionSchedule,
    SampleBatch,
    StyleToken,
    ddpm_sample,
)
from .errors import ConfigError, ProtocolError
from .federation import (
    AdapterSet,
    AggregationCoefficients,
    ClientProfile,
    ClusterAssignment,
    DomainEmbedding,
    cluster_clients,
    compute_coefficients,
    encode_domain,
    inter_cluster_aggregate,
    intra_cluster_aggregate,
    local_finetune,
)
from .lowrank import align_rank
from .rng import stream, stream_from_id, stream_id
from . import wire

TES = -1
IES = -2
ALL_CLIENTS = -3

_HEADER = struct.Struct("<BIii")  # variant, round, sender, receiver
HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class RoundStart:
    round_index: int
    sender: int
    receiver: int


@dataclass(frozen=True)
class RoundEnd:
    round_index: int
    sender: int
    receiver: int


@dataclass(frozen=True)
class AdapterUpload:
    round_index: int
    sender: int
    receiver: int
    client_id: int
    adapters: AdapterSet
    embedding: DomainEmbedding


@dataclass(frozen=True)
class ClusterModelDown:
    round_index: int
    sender: int
    receiver: int
    cluster_id: int
    adapters: AdapterSet


@dataclass(frozen=True)
class GlobalLoraToIES:
    round_index: int
    sender: int
    receiver: int
    adapters: AdapterSet
    coefficients: AggregationCoefficients


@dataclass(frozen=True)
class InferRequest:
    round_index: int
    sender: int
    receiver: int
    encoded_token: DomainEmbedding
    rho: float
    mix_loras: float
    n_samples: int
    stream_ident: int


@dataclass(frozen=True)
class LatentHandoff:
    round_index: int
    sender: int
    receiver: int
    latent: np.ndarray
    resume_step: int
    stream_ident: int


Message = (RoundStart | RoundEnd | AdapterUpload | ClusterModelDown
           | GlobalLoraToIES | InferRequest | LatentHandoff)

_VARIANTS: tuple[type, ...] = (RoundStart, AdapterUpload, ClusterModelDown,
                               GlobalLoraToIES, InferRequest, LatentHandoff,
                               RoundEnd)
_CODE_OF = {cls: i + 1 for i, cls in enumerate(_VARIANTS)}


def _encode_payload(msg: Message) -> bytes:
    if isinstance(msg, (RoundStart, RoundEnd)):
        return b""
    if isinstance(msg, AdapterUpload):
        return (struct.pack("<i", msg.client_id)
                + wire.pack_adapter_set(msg.adapters)
                + wire.pack_embedding(msg.embedding))
    if isinstance(msg, ClusterModelDown):
        return struct.pack("<i", msg.cluster_id) + wire.pack_adapter_set(msg.adapters)
    if isinstance(msg, GlobalLoraToIES):
        return wire.pack_adapter_set(msg.adapters) + wire.pack_coefficients(
            msg.coefficients
        )
    if isinstance(msg, InferRequest):
        return (wire.pack_embedding(msg.encoded_token)
                + struct.pack("<dd", msg.rho, msg.mix_loras)
                + struct.pack("<I", msg.n_samples)
                + struct.pack("<Q", msg.stream_ident))
    if isinstance(msg, LatentHandoff):
        return (wire.pack_matrix(msg.latent)
                + struct.pack("<I", msg.resume_step)
                + struct.pack("<Q", msg.stream_ident))
    raise ProtocolError(f"unknown message type {type(msg).__name__}")


def serialize_message(msg: Message) -> bytes:
    header = _HEADER.pack(_CODE_OF[type(msg)], msg.round_index, msg.sender,
                          msg.receiver)
    return header + _encode_payload(msg)


def parse_message(data: bytes) -> Message:
    if len(data) < HEADER_SIZE:
        raise ProtocolError("message shorter than its header")
    code, round_index, sender, receiver = _HEADER.unpack(data[:HEADER_SIZE])
    try:
        cls = _VARIANTS[code - 1]
    except IndexError:
        raise ProtocolError(f"unknown variant code {code}") from None
    cur = wire.Cursor(data[HEADER_SIZE:])
    head = (round_index, sender, receiver)
    if cls in (RoundStart, RoundEnd):
        msg = cls(*head)
    elif cls is AdapterUpload:
        (client_id,) = cur.unpack("<i")
        msg = AdapterUpload(*head, client_id, wire.read_adapter_set(cur),
                            wire.read_embedding(cur))
    elif cls is ClusterModelDown:
        (cluster_id,) = cur.unpack("<i")
        msg = ClusterModelDown(*head, cluster_id, wire.read_adapter_set(cur))
    elif cls is GlobalLoraToIES:
        msg = GlobalLoraToIES(*head, wire.read_adapter_set(cur),
                              wire.read_coefficients(cur))
    elif cls is InferRequest:
        token = wire.read_embedding(cur)
        rho, mix = cur.unpack("<dd")
        (n,) = cur.unpack("<I")
        (sid,) = cur.unpack("<Q")
        msg = InferRequest(*head, token, rho, mix, n, sid)
    else:
        latent = wire.read_matrix(cur)
        (resume,) = cur.unpack("<I")
        (sid,) = cur.unpack("<Q")
        msg = LatentHandoff(*head, latent, resume, sid)
    if not cur.done():
        raise ProtocolError("trailing bytes after message payload")
    return msg


def message_size(msg: Message) -> int:
    """Exact length of the canonical serialization."""
    return len(serialize_message(msg))


def _validate_routing(msg: Message) -> None:
    kind = type(msg).__name__
    if isinstance(msg, AdapterUpload):
        if msg.sender < 0 or msg.receiver != TES:
            raise ProtocolError(f"{kind} must go client -> training server")
    elif isinstance(msg, ClusterModelDown):
        if msg.sender != TES or msg.receiver < 0:
            raise ProtocolError(f"{kind} must go training server -> one client")
    elif isinstance(msg, GlobalLoraToIES):
        if msg.sender != TES or msg.receiver != IES:
            raise ProtocolError(f"{kind} must go training -> inference server")
    elif isinstance(msg, InferRequest):
        if msg.sender < 0 or msg.receiver != IES:
            raise ProtocolError(f"{kind} must go client -> inference server")
    elif isinstance(msg, LatentHandoff):
        if msg.sender != IES or msg.receiver != ALL_CLIENTS:
            raise ProtocolError(f"{kind} must be an inference-server broadcast")
    elif isinstance(msg, (RoundStart, RoundEnd)):
        if msg.sender != TES or msg.receiver != ALL_CLIENTS:
            raise ProtocolError(f"{kind} must be a training-server broadcast")


@dataclass(frozen=True)
class LogEntry:
    round_index: int
    sender: int
    receiver: int
    variant: str
    n_bytes: int
    message: Message


class MessageLog:
    """Append-only transport record; every append validates routing."""

    def __init__(self):
        self.entries: list[LogEntry] = []

    def append(self, msg: Message) -> int:
        _validate_routing(msg)
        size = message_size(msg)
        self.entries.append(LogEntry(msg.round_index, msg.sender, msg.receiver,
                                     type(msg).__name__, size, msg))
        return size

    def __len__(self) -> int:
        return len(self.entries)

    def to_lines(self) -> list[str]:
        # one record per message: round, sender, receiver, variant, bytes
        return [
            f"{e.round_index},{e.sender},{e.receiver},{e.variant},{e.n_bytes}"
            for e in self.entries
        ]

    def total_bytes(self) -> int:
        return sum(e.n_bytes for e in self.entries)


def _is_server(address: int) -> bool:
    return address in (TES, IES)


def _split_totals(entries) -> tuple[int, int, int]:
    uplink = downlink = interserver = 0
    for e in entries:
        if e.sender >= 0 and _is_server(e.receiver):
            uplink += e.n_bytes
        elif _is_server(e.sender) and _is_server(e.receiver):
            interserver += e.n_bytes
        elif _is_server(e.sender):
            downlink += e.n_bytes
    return uplink, downlink, interserver


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    assignment: ClusterAssignment
    coefficients: AggregationCoefficients
    message_bytes: tuple[tuple[str, int], ...]
    uplink_bytes: int
    downlink_bytes: int
    interserver_bytes: int
    truncated_layers: tuple[str, ...]
    flags: Mapping[str, bool]


@dataclass(frozen=True)
class RoundConfig:
    epochs: int = 1
    learning_rate: float = 0.05
    batch_size: int = 2
    tau_c: float = 0.5
    tau_ded: float = 0.8
    lambda_snt: float = 4.0
    weight_by_samples: bool = False


@dataclass
class World:
    """Single-process simulation state for all three roles.

    clients holds device-side truth (data and tokens present); tes_profiles
    holds the training server's stripped views of the same clients.
    """

    denoiser: Denoiser
    schedule: DiffusionSchedule
    salt: int
    clients: dict[int, ClientProfile]
    log: MessageLog = field(default_factory=MessageLog)
    tes_profiles: dict[int, ClientProfile] = field(default_factory=dict)
    cluster_models: dict[int, AdapterSet] = field(default_factory=dict)
    assignment: ClusterAssignment | None = None
    ies_global: AdapterSet | None = None
    ies_coefficients: AggregationCoefficients | None = None
    rounds_completed: int = 0


def _adopt(client: ClientProfile, model: AdapterSet) -> ClientProfile:
    # replace-on-receive, re-expressed at the device's declared capability
    adopted = {}
    for layer in model.layer_ids:
        adapter = model[layer]
        rank = AdapterSet.capped_rank(client.rank, adapter.d_out, adapter.d_in)
        adopted[layer] = align_rank(adapter, rank)
    return replace(client, adapters=AdapterSet(adopted))


def run_training_round(world: World, config: RoundConfig) -> RoundReport:
    """One federated round: tune, upload, cluster, aggregate, distribute."""
    r = world.rounds_completed + 1
    mark = len(world.log)
    world.log.append(RoundStart(r, TES, ALL_CLIENTS))

    for cid in sorted(world.clients):
        updated = local_finetune(
            world.clients[cid], world.denoiser, config.epochs,
            config.learning_rate, world.schedule,
            stream(world.salt, "round", r, "client", cid), config.batch_size,
        )
        world.clients[cid] = updated
        world.log.append(AdapterUpload(r, cid, TES, cid, updated.adapters,
                                       updated.embedding))
        world.tes_profiles[cid] = replace(updated, token=None, data=None)

    ordered = [world.tes_profiles[cid] for cid in sorted(world.tes_profiles)]
    assignment = cluster_clients([p.embedding for p in ordered], config.tau_c)

    cluster_models: dict[int, AdapterSet] = {}
    for cluster_id in assignment.cluster_ids:
        members = [world.tes_profiles[c] for c in assignment.members[cluster_id]]
        weights = ([p.n_samples for p in members]
                   if config.weight_by_samples else None)
        cluster_models[cluster_id] = intra_cluster_aggregate(members, weights)

    pairs = [
        (cluster_models[cluster_id],
         DomainEmbedding(assignment.centroids[cluster_id].vector, cluster_id))
        for cluster_id in assignment.cluster_ids
    ]
    coefficients = compute_coefficients(pairs, config.tau_ded, config.lambda_snt)
    global_lora, truncated = inter_cluster_aggregate(pairs, coefficients)

    for cluster_id in assignment.cluster_ids:
        model = cluster_models[cluster_id]
        for member in assignment.members[cluster_id]:
            world.log.append(ClusterModelDown(r, TES, member, cluster_id, model))
            world.clients[member] = _adopt(world.clients[member], model)

    world.log.append(GlobalLoraToIES(r, TES, IES, global_lora, coefficients))
    world.ies_global = global_lora
    world.ies_coefficients = coefficients
    world.log.append(RoundEnd(r, TES, ALL_CLIENTS))

    world.assignment = assignment
    world.cluster_models = cluster_models
    world.rounds_completed = r

    entries = world.log.entries[mark:]
    uplink, downlink, interserver = _split_totals(entries)
    return RoundReport(
        round_index=r,
        assignment=assignment,
        coefficients=coefficients,
        message_bytes=tuple((e.variant, e.n_bytes) for e in entries),
        uplink_bytes=uplink,
        downlink_bytes=downlink,
        interserver_bytes=interserver,
        truncated_layers=truncated,
        flags={
            "rank_overflow": bool(truncated),
            "degenerate_snt": coefficients.degenerate_snt,
            "all_filtered_fallback": coefficients.all_filtered,
        },
    )


@dataclass(frozen=True)
class HybridConfig:
    """Knobs for one split-inference pass over all clients."""

    rho: float
    mix_loras: float = 1.0
    local_scale: float | Mapping[int, float] = 0.95
    n_samples: int = 100
    use_global_lora: bool = True
    stream_label: object = "hybrid"

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        if not 0.7 <= self.mix_loras <= 1.0:
            raise ConfigError(f"mix_loras must lie in [0.7, 1.0], got {self.mix_loras}")
        scales = (self.local_scale.values()
                  if isinstance(self.local_scale, Mapping) else [self.local_scale])
        for scale in scales:
            if not 0.75 <= scale <= 0.95:
                raise ConfigError(f"local scale must lie in [0.75, 0.95], got {scale}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")

    def scale_for(self, client_id: int) -> float:
        if isinstance(self.local_scale, Mapping):
            return float(self.local_scale[client_id])
        return float(self.local_scale)


def server_steps(rho: float, total_steps: int) -> int:
    """How many early denoising steps the inference server takes."""
    s = math.ceil(rho * total_steps)
    if s >= total_steps:
        raise ConfigError(f"split ratio {rho} leaves no client steps")
    return s


def hybrid_infer(world: World,
                 config: HybridConfig) -> dict[int, SampleBatch]:
    """Split sampling: server runs the first steps once, clients finish.

    Every client files an identical request (the style stays on the device);
    the server answers with one broadcast latent at the split step plus the
    stream id, and each client resumes with its own adapters, scale, and
    token. Clients rebuild the stream and burn the server's draws, so the
    joined trajectory is bitwise identical to an unsplit run.
    """
    T = world.schedule.steps
    point_dim = world.denoiser.point_dim
    s = server_steps(config.rho, T)
    n = config.n_samples
    r = world.rounds_completed
    sid = stream_id(world.salt, "infer", config.stream_label, config.rho,
                    config.mix_loras, n)

    generic = StyleToken.neutral(world.denoiser.token_dim)
    encoded = encode_domain(generic, world.salt)
    requests = []
    for cid in sorted(world.clients):
        req = InferRequest(r, cid, IES, encoded, config.rho, config.mix_loras,
                           n, sid)
        world.log.append(req)
        requests.append(req)

    payloads = {serialize_message(m)[HEADER_SIZE:] for m in requests}
    if len(payloads) > 1:
        raise ProtocolError("inference requests must be identical across clients")

    if config.use_global_lora:
        if world.ies_global is None:
            raise ProtocolError("inference server holds no global adapter set")
        server_adapters, server_scale = world.ies_global, config.mix_loras
    else:
        server_adapters, server_scale = None, 0.0

    if s > 0:
        gen = stream_from_id(sid)
        latent = ddpm_sample(world.denoiser, server_adapters, server_scale,
                             generic, n, world.schedule, gen, stop=T - s)
        handoff = LatentHandoff(r, IES, ALL_CLIENTS, latent.points, T - s, sid)
    else:
        # nothing to run server-side; the sentinel step T means "from scratch"
        handoff = LatentHandoff(r, IES, ALL_CLIENTS,
                                np.zeros((0, point_dim)), T, sid)
    world.log.append(handoff)

    results: dict[int, SampleBatch] = {}
    for cid in sorted(world.clients):
        client = world.clients[cid]
        gen = stream_from_id(handoff.stream_ident)
        if handoff.resume_step == T:
            out = ddpm_sample(world.denoiser, client.adapters,
                              config.scale_for(cid), client.token, n,
                              world.schedule, gen)
        else:
            burned = 1 + (T - handoff.resume_step)
            for _ in range(burned):
                gen.standard_normal((n, point_dim))
            out = ddpm_sample(world.denoiser, client.adapters,
                              config.scale_for(cid), client.token, n,
                              world.schedule, gen,
                              start=(handoff.latent, handoff.resume_step))
        results[cid] = out
    return results


def _walk(obj, depth=0):
    yield obj
    if depth > 6:
        return
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), depth + 1)
    elif isinstance(obj, Mapping):
        for v in obj.values():
            yield from _walk(v, depth + 1)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _walk(v, depth + 1)


def isolation_audit(log: MessageLog) -> tuple[str, ...]:
    """Scan a transport log for role violations. Empty result means clean.

    Checks both payload content (no sample batches or base-model weights
    anywhere in any message) and addressing (client adapters only ever reach
    the training server; the inference server's only adapter-bearing inbox
    is the global set).
    """
    findings = []
    for i, entry in enumerate(log.entries):
        msg = entry.message
        for obj in _walk(msg):
            if isinstance(obj, SampleBatch):
                findings.append(f"entry {i}: {entry.variant} carries raw samples")
            if isinstance(obj, (Denoiser, DenoiserLayer)):
                findings.append(f"entry {i}: {entry.variant} carries base weights")
            if isinstance(obj, StyleToken):
                findings.append(f"entry {i}: {entry.variant} carries a plaintext token")
        if entry.receiver == TES and entry.variant != "AdapterUpload":
            findings.append(f"entry {i}: training server received {entry.variant}")
        if entry.variant == "AdapterUpload" and entry.receiver != TES:
            findings.append(f"entry {i}: client upload addressed to {entry.receiver}")
        carries_adapters = any(isinstance(o, AdapterSet) for o in _walk(msg))
        if (entry.receiver == IES and carries_adapters
                and entry.variant != "GlobalLoraToIES"):
            findings.append(
                f"entry {i}: inference server received adapters via {entry.variant}"
            )
    return tuple(findings)
