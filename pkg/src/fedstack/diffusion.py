"""Toy conditional denoising diffusion at desk scale.

The backbone is a small MLP that predicts the noise added to 2-d points.
Its input is the noisy point concatenated with a sinusoidal embedding of
the step index and a conditioning token. The two hidden weight matrices
are the designated adaptable layers; biases and the output layer stay
fixed. Training never touches base weights, only adapter factors and the
token, which is what lets federated runs treat the backbone as frozen.

Gradients are analytic (plain backprop through tanh layers) and are
verified against central finite differences in the test suite.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, NumericError
from .lowrank import AdapterSet, LoraAdapter, apply_delta

__all__ = [
    "DiffusionSchedule",
    "Denoiser",
    "DenoiserLayer",
    "StyleToken",
    "SampleBatch",
    "STYLES",
    "time_embedding",
    "make_style_dataset",
    "forward_diffuse",
    "predict_noise",
    "denoising_loss",
    "denoising_loss_and_grads",
    "training_step",
    "ddpm_sample",
    "learn_style_token",
    "pretrain_backbone",
]

STYLES = ("ring", "spiral", "moons", "grid")

_STYLE_CENTERS = {
    "ring": (-1.0, -1.0),
    "spiral": (1.0, -1.0),
    "moons": (-1.0, 1.0),
    "grid": (1.0, 1.0),
}

TRAINABLE_MASKS = ("adapters", "token", "both")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule. Index 0 of the arrays corresponds to t = 1."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        if betas.ndim != 1 or betas.size < 1:
            raise DimensionError("betas must be a nonempty 1-d array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(betas) <= 0.0):
            raise ValueError("betas must be strictly increasing")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        object.__setattr__(self, "_alphas", alphas)
        object.__setattr__(self, "_alpha_bars", alpha_bars)
        if alpha_bars[-1] >= 0.05:
            raise ValueError(
                f"terminal alpha_bar {alpha_bars[-1]:.4f} >= 0.05; "
                "the forward process must end close to pure noise"
            )

    @classmethod
    def linear(cls, steps: int = 50, beta_start: float = 1e-4,
               beta_end: float = 0.13) -> "DiffusionSchedule":
        if steps < 2:
            raise ValueError("need at least 2 steps")
        return cls(np.linspace(beta_start, beta_end, steps))

    @property
    def steps(self) -> int:
        return int(self.betas.size)

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.steps):
            raise ValueError(f"step index out of range 1..{self.steps}")
        return t

    def beta(self, t):
        return self.betas[self._check(t) - 1]

    def alpha(self, t):
        return self._alphas[self._check(t) - 1]

    def alpha_bar(self, t):
        return self._alpha_bars[self._check(t) - 1]

    def alpha_bar_prev(self, t):
        # alpha_bar at t-1, with alpha_bar_0 defined as 1
        t = self._check(t)
        return np.where(t > 1, self._alpha_bars[np.maximum(t - 2, 0)], 1.0)

    def posterior_variance(self, t):
        t = self._check(t)
        return (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t)) * self.beta(t)


@dataclass(frozen=True)
class StyleToken:
    """Conditioning vector. The neutral token is the zero vector."""

    vector: np.ndarray
    provenance: str = "neutral"

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float64)
        object.__setattr__(self, "vector", vector)
        if vector.ndim != 1:
            raise DimensionError("token vector must be 1-d")
        if not np.all(np.isfinite(vector)):
            raise NumericError("token vector has non-finite entries")
        if self.provenance not in ("neutral", "learned", "assigned"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "neutral" and np.any(vector != 0.0):
            raise ValueError("a neutral token must be exactly zero")

    @classmethod
    def neutral(cls, dim: int = 8) -> "StyleToken":
        return cls(np.zeros(dim), "neutral")


@dataclass(frozen=True)
class SampleBatch:
    """A set of 2-d points, optionally tagged with the style that made them."""

    points: np.ndarray
    style: str | None = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", points)
        if points.ndim != 2 or points.shape[1] != 2:
            raise DimensionError(f"points must be (n, 2), got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise NumericError("batch has non-finite points")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class DenoiserLayer:
    name: str
    weight: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise DimensionError(f"{self.name}: bad weight/bias shapes")
        if self.activation not in ("tanh", "linear"):
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")


@dataclass(frozen=True)
class Denoiser:
    """Frozen noise-prediction MLP. Adapters ride on the `adaptable` layers."""

    layers: tuple[DenoiserLayer, ...]
    adaptable: tuple[str, ...]
    point_dim: int = 2
    time_dim: int = 8
    token_dim: int = 8

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer names")
        missing = set(self.adaptable) - set(names)
        if missing:
            raise ValueError(f"adaptable layers not present: {sorted(missing)}")
        expect = self.point_dim + self.time_dim + self.token_dim
        if self.layers[0].weight.shape[1] != expect:
            raise DimensionError(
                f"first layer expects input {self.layers[0].weight.shape[1]}, "
                f"model input is {expect}"
            )
        if self.layers[-1].weight.shape[0] != self.point_dim:
            raise DimensionError("last layer must produce a point-sized output")

    @classmethod
    def create(cls, rng: np.random.Generator, hidden: Sequence[int] = (128, 128),
               point_dim: int = 2, time_dim: int = 8, token_dim: int = 8) -> "Denoiser":
        """Xavier-initialised weights, zero biases, tanh hidden layers."""
        dims = [point_dim + time_dim + token_dim, *hidden, point_dim]
        layers = []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / (fan_in + fan_out))
            last = i == len(dims) - 2
            name = "out" if last else f"h{i + 1}"
            layers.append(DenoiserLayer(name, w, np.zeros(fan_out),
                                        "linear" if last else "tanh"))
        adaptable = tuple(layer.name for layer in layers[:-1])
        return cls(tuple(layers), adaptable, point_dim, time_dim, token_dim)

    @property
    def input_dim(self) -> int:
        return self.point_dim + self.time_dim + self.token_dim

    @property
    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """Shapes (d_out, d_in) of the adaptable layers."""
        by_name = {layer.name: layer for layer in self.layers}
        return {name: by_name[name].weight.shape for name in self.adaptable}

    def checksum(self) -> str:
        """Digest over all base parameters; used to prove the base stays frozen."""
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(layer.name.encode())
            h.update(np.ascontiguousarray(layer.weight).tobytes())
            h.update(np.ascontiguousarray(layer.bias).tobytes())
        return h.hexdigest()


def time_embedding(t, dim: int = 8) -> np.ndarray:
    """Sinusoidal embedding of integer step indices, rows of shape (dim,)."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def make_style_dataset(style: str, n: int, rng: np.random.Generator) -> SampleBatch:
    """Deterministic 2-d point cloud for one named style.

    Each style occupies its own corner of the plane with a distinct shape,
    so fitted Gaussians are well separated between any two styles.
    """
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}, choose from {STYLES}")
    if n < 1:
        raise ValueError("need at least one sample")
    cx, cy = _STYLE_CENTERS[style]
    if style == "ring":
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        radius = 0.7 * (1.0 + 0.07 * rng.standard_normal(n))
        pts = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
    elif style == "spiral":
        u = rng.uniform(0.0, 1.0, n)
        angle = 3.0 * np.pi * u
        radius = 0.75 * u
        pts = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
        pts += 0.03 * rng.standard_normal((n, 2))
    elif style == "moons":
        upper = rng.random(n) < 0.5
        theta = rng.uniform(0.0, np.pi, n)
        pts = np.empty((n, 2))
        pts[upper] = np.column_stack(
            [0.55 * np.cos(theta[upper]) - 0.28, 0.55 * np.sin(theta[upper]) - 0.15]
        )
        pts[~upper] = np.column_stack(
            [0.55 * np.cos(theta[~upper]) + 0.28, -0.55 * np.sin(theta[~upper]) + 0.15]
        )
        pts += 0.05 * rng.standard_normal((n, 2))
    else:  # grid
        cells = rng.integers(0, 3, size=(n, 2))
        pts = 0.55 * (cells - 1.0) + 0.06 * rng.standard_normal((n, 2))
    pts[:, 0] += cx
    pts[:, 1] += cy
    return SampleBatch(pts, style)


def forward_diffuse(batch: SampleBatch, t, noise: np.ndarray,
                    schedule: DiffusionSchedule) -> SampleBatch:
    """Closed-form forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != batch.points.shape:
        raise DimensionError("noise must match the batch shape")
    ab = np.atleast_1d(schedule.alpha_bar(t)).astype(np.float64)
    if ab.size not in (1, len(batch)):
        raise DimensionError("t must be a scalar or one step per point")
    ab = ab.reshape(-1, 1)
    points = np.sqrt(ab) * batch.points + np.sqrt(1.0 - ab) * noise
    return SampleBatch(points, batch.style)


def _effective_weights(denoiser: Denoiser, adapters: AdapterSet | None,
                       scale: float) -> dict[str, np.ndarray]:
    weights = {}
    for layer in denoiser.layers:
        if adapters is not None and layer.name in denoiser.adaptable and layer.name in adapters:
            weights[layer.name] = apply_delta(layer.weight, adapters[layer.name], scale)
        else:
            weights[layer.name] = layer.weight
    return weights


def _assemble_input(denoiser: Denoiser, x_t: np.ndarray, t,
                    token: StyleToken) -> np.ndarray:
    n = x_t.shape[0]
    temb = time_embedding(t, denoiser.time_dim)
    if temb.shape[0] == 1 and n > 1:
        temb = np.repeat(temb, n, axis=0)
    if temb.shape[0] != n:
        raise DimensionError("t must be a scalar or one step per point")
    tok = np.repeat(token.vector[None, :], n, axis=0)
    return np.concatenate([x_t, temb, tok], axis=1)


def _forward(denoiser: Denoiser, weights: Mapping[str, np.ndarray],
             z: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    hidden = [z]
    h = z
    for layer in denoiser.layers:
        a = h @ weights[layer.name].T + layer.bias
        h = np.tanh(a) if layer.activation == "tanh" else a
        hidden.append(h)
    return h, hidden


def predict_noise(denoiser: Denoiser, adapters: AdapterSet | None,
                  adapter_scale: float, x_t: np.ndarray, t,
                  token: StyleToken) -> np.ndarray:
    """Noise estimate for each row of x_t at step t.

    Passing no adapters, a zero scale, or adapters with all-zero up factors
    all produce the bare backbone's prediction.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 2 or x_t.shape[1] != denoiser.point_dim:
        raise DimensionError(f"x_t must be (n, {denoiser.point_dim})")
    if token.vector.shape != (denoiser.token_dim,):
        raise DimensionError("token dimension does not match the denoiser")
    if not np.isfinite(adapter_scale):
        raise ValueError("adapter scale must be finite")
    if np.any(np.asarray(t) < 1):
        raise ValueError("step indices start at 1")
    if adapters is not None:
        adapters.validate_shapes(denoiser.layer_shapes)
    weights = _effective_weights(denoiser, adapters, adapter_scale)
    z = _assemble_input(denoiser, x_t, t, token)
    out, _ = _forward(denoiser, weights, z)
    return out


def denoising_loss_and_grads(
    denoiser: Denoiser,
    adapters: AdapterSet | None,
    token: StyleToken,
    x0: SampleBatch,
    t: np.ndarray,
    noise: np.ndarray,
    schedule: DiffusionSchedule,
    adapter_scale: float = 1.0,
):
    """Mean-squared noise-prediction error and its analytic gradients.

    The loss is the mean over all n * point_dim entries of
    (prediction - noise)^2 with the noisy input built by forward_diffuse.
    Returns (loss, {layer: (grad_up, grad_down)}, grad_token). Base weights
    and biases receive no gradient by construction.
    """
    noisy = forward_diffuse(x0, t, noise, schedule)
    weights = _effective_weights(denoiser, adapters, adapter_scale)
    z = _assemble_input(denoiser, noisy.points, t, token)
    out, hidden = _forward(denoiser, weights, z)

    residual = out - noise
    loss = float(np.mean(residual**2))

    d_h = 2.0 * residual / residual.size
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    d_input = None
    for idx in range(len(denoiser.layers) - 1, -1, -1):
        layer = denoiser.layers[idx]
        h_out = hidden[idx + 1]
        h_in = hidden[idx]
        g = d_h * (1.0 - h_out**2) if layer.activation == "tanh" else d_h
        if adapters is not None and layer.name in adapters:
            adapter = adapters[layer.name]
            d_w = g.T @ h_in
            prefactor = adapter_scale * adapter.alpha / adapter.rank
            grads[layer.name] = (
                prefactor * (d_w @ adapter.down.T),
                prefactor * (adapter.up.T @ d_w),
            )
        d_h = g @ weights[layer.name]
        if idx == 0:
            d_input = d_h
    token_cols = slice(denoiser.point_dim + denoiser.time_dim, denoiser.input_dim)
    grad_token = d_input[:, token_cols].sum(axis=0)
    return loss, grads, grad_token


def denoising_loss(denoiser, adapters, token, x0, t, noise, schedule,
                   adapter_scale: float = 1.0) -> float:
    loss, _, _ = denoising_loss_and_grads(
        denoiser, adapters, token, x0, t, noise, schedule, adapter_scale
    )
    return loss


def training_step(
    denoiser: Denoiser,
    adapters: AdapterSet | None,
    token: StyleToken,
    batch: SampleBatch,
    trainable_mask: str,
    learning_rate: float,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
) -> tuple[float, AdapterSet | None, StyleToken]:
    """One SGD step on the denoising loss.

    Fresh step indices and noise are drawn per point (indices first, then
    noise, a fixed order the reproducibility contract depends on). Only the
    groups named by the mask move; the returned loss is pre-update.
    """
    if trainable_mask not in TRAINABLE_MASKS:
        raise ValueError(f"mask must be one of {TRAINABLE_MASKS}")
    if adapters is None and trainable_mask != "token":
        raise ValueError("adapters are required unless only the token trains")
    if len(batch) < 1:
        raise ValueError("empty batch")
    if not np.isfinite(learning_rate) or learning_rate < 0:
        raise ValueError("learning rate must be finite and >= 0")
    t = rng.integers(1, schedule.steps + 1, size=len(batch))
    noise = rng.standard_normal((len(batch), denoiser.point_dim))
    loss, grads, grad_token = denoising_loss_and_grads(
        denoiser, adapters, token, batch, t, noise, schedule
    )
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss!r}")

    new_adapters = adapters
    if trainable_mask in ("adapters", "both"):
        updated = {}
        for name, (g_up, g_down) in grads.items():
            adapter = adapters[name]
            updated[name] = LoraAdapter(
                adapter.layer_id,
                adapter.rank,
                adapter.down - learning_rate * g_down,
                adapter.up - learning_rate * g_up,
                adapter.alpha,
            )
        new_adapters = adapters.replace(**updated)

    new_token = token
    if trainable_mask in ("token", "both"):
        new_token = StyleToken(token.vector - learning_rate * grad_token, "learned")
    return loss, new_adapters, new_token


def ddpm_sample(
    denoiser: Denoiser,
    adapters: AdapterSet | None,
    adapter_scale: float,
    token: StyleToken,
    n: int,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    start: tuple[np.ndarray, int] | None = None,
    stop: int = 0,
) -> SampleBatch:
    """Ancestral sampling through the reverse chain.

    Without `start`, draws the initial latent from the stream and iterates
    t = T..1. With `start` = (latent, step), resumes from that latent at the
    given step; `stop` > 0 halts early and returns the latent at that step.
    Noise draws happen in a fixed order (initial latent, then one draw per
    step above 1), so a run split at any step and resumed on the same
    stream is bitwise identical to the unsplit run.
    """
    T = schedule.steps
    if start is None:
        first = T
        x = rng.standard_normal((n, denoiser.point_dim))
    else:
        latent, step = start
        latent = np.asarray(latent, dtype=np.float64)
        if not 0 < step < T:
            raise ValueError(f"resume step must satisfy 0 < step < {T}")
        if latent.shape != (n, denoiser.point_dim):
            raise DimensionError("latent shape does not match n")
        if not np.all(np.isfinite(latent)):
            raise NumericError("latent has non-finite entries")
        first = int(step)
        x = latent.copy()
    if not 0 <= stop < first:
        raise ValueError(f"stop must satisfy 0 <= stop < {first}")

    for t in range(first, stop, -1):
        eps = predict_noise(denoiser, adapters, adapter_scale, x, t, token)
        ab = float(schedule.alpha_bar(t))
        mean = (x - schedule.beta(t) / np.sqrt(1.0 - ab) * eps) / np.sqrt(schedule.alpha(t))
        if t > 1:
            sigma = np.sqrt(float(schedule.posterior_variance(t)))
            x = mean + sigma * rng.standard_normal((n, denoiser.point_dim))
        else:
            x = mean
    if not np.all(np.isfinite(x)):
        raise NumericError("sampling diverged to non-finite values")
    return SampleBatch(x)


def learn_style_token(
    denoiser: Denoiser,
    batch: SampleBatch,
    epochs: int,
    learning_rate: float,
    rng: np.random.Generator,
    adapters: AdapterSet | None = None,
    schedule: DiffusionSchedule | None = None,
    history: list | None = None,
) -> StyleToken:
    """Fit a conditioning token to a dataset with everything else frozen.

    Starts from the neutral token and runs one full-batch step per epoch.
    With zero epochs the neutral token comes back as is. Per-step losses
    are appended to `history` when a list is supplied.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    token = StyleToken.neutral(denoiser.token_dim)
    if epochs == 0:
        return token
    if schedule is None:
        schedule = DiffusionSchedule.linear()
    for _ in range(epochs):
        loss, _, token = training_step(
            denoiser, adapters, token, batch, "token", learning_rate, schedule, rng
        )
        if history is not None:
            history.append(loss)
    return token


def pretrain_backbone(
    denoiser: Denoiser,
    data: SampleBatch,
    epochs: int,
    learning_rate: float,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    batch_size: int = 128,
) -> Denoiser:
    """Produce a generically competent frozen backbone.

    training_step never touches base weights, so pre-training works by
    fitting full-capacity adapters on the generic data with a neutral token
    and then merging their deltas into the base. The result is a new
    Denoiser whose weights absorbed the adapters; downstream code treats it
    as frozen.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    shapes = denoiser.layer_shapes
    full_rank = max(min(s) for s in shapes.values())
    adapters = AdapterSet.init_lora(shapes, full_rank, rng)
    token = StyleToken.neutral(denoiser.token_dim)
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            chunk = SampleBatch(data.points[order[lo:lo + batch_size]], data.style)
            _, adapters, _ = training_step(
                denoiser, adapters, token, chunk, "adapters",
                learning_rate, schedule, rng,
            )
    merged = []
    for layer in denoiser.layers:
        if layer.name in adapters:
            merged.append(
                DenoiserLayer(
                    layer.name,
                    apply_delta(layer.weight, adapters[layer.name], 1.0),
                    layer.bias,
                    layer.activation,
                )
            )
        else:
            merged.append(layer)
    return Denoiser(tuple(merged), denoiser.adaptable, denoiser.point_dim,
                    denoiser.time_dim, denoiser.token_dim)
