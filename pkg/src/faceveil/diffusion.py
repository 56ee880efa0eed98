"""Variance schedule, Gaussian forward noising, deterministic reverse chain,
and the denoising (score-matching) objective.

The reverse chain is the deterministic DDIM update: no fresh noise is drawn
after the initial forward transition, so the whole edit is a differentiable
function of the score-network parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .nets import TrainableMlp
from .tensorcore import Node

TIME_EMBED_DIM = 8

CHECKPOINT_FORMAT_VERSION = 1


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class VarianceSchedule:
    """Linear beta schedule with cumulative products alpha_bar.

    ``alphas_bar`` has length T+1: index tau gives the product over the
    first tau betas, with the empty product alphas_bar[0] == 1.
    """

    betas: np.ndarray
    alphas_bar: np.ndarray

    @property
    def t_total(self) -> int:
        return len(self.betas)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abar = np.asarray(self.alphas_bar, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ScheduleError("betas must be a non-empty vector")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ScheduleError("betas must lie strictly inside (0, 1)")
        if len(abar) != len(betas) + 1 or abar[0] != 1.0:
            raise ScheduleError("alphas_bar must start at 1 and have length T+1")
        if np.any(np.diff(abar) >= 0.0):
            raise ScheduleError("alphas_bar must be strictly decreasing")


def make_schedule(t_total: int, beta_start: float, beta_end: float) -> VarianceSchedule:
    if t_total < 1:
        raise ScheduleError("t_total must be at least 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, t_total)
    alphas_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return VarianceSchedule(betas=betas, alphas_bar=alphas_bar)


def time_embedding(t: int, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding; injective over the step counts used here."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class ScoreNetwork:
    """Noise predictor built around a 3-hidden-layer tanh MLP on the
    flattened image concatenated with a sinusoidal timestep embedding.

    The MLP core regresses the clean image; the returned noise prediction
    is derived from it by the exact transition arithmetic
    (x - sqrt(abar_t) * clean) / sqrt(1 - abar_t).  This keeps the map the
    chain needs (amplification at low noise levels) out of the learned
    weights, which plain SGD handles poorly.  Inputs pass through a fixed
    affine standardization baked at construction.
    """

    INPUT_SHIFT = 0.31
    INPUT_SCALE = 2.1

    def __init__(self, rng: np.random.Generator, image_dim: int, sched: "VarianceSchedule",
                 hidden: tuple[int, ...] = (48, 48, 48)):
        if len(hidden) != 3:
            raise ValueError("score network uses exactly 3 hidden layers")
        self.image_dim = image_dim
        self.hidden = tuple(hidden)
        self.sched = sched
        self.mlp = TrainableMlp(rng, [image_dim + TIME_EMBED_DIM, *hidden, image_dim],
                                layer_prefix="score_h",
                                output_offset=np.full(image_dim, self.INPUT_SHIFT))

    @property
    def params(self) -> tc.ParamStore:
        return self.mlp.params

    def clone(self) -> "ScoreNetwork":
        other = ScoreNetwork(np.random.default_rng(0), self.image_dim, self.sched, self.hidden)
        other.params.load_state(self.params.state())
        return other

    def clean_estimate(self, x, t: int) -> Node:
        """The MLP's clean-image regression for inputs at noise level t."""
        x = tc.as_node(x)
        if x.value.ndim != 2 or x.value.shape[1] != self.image_dim:
            raise tc.ShapeError(f"score network expects (n, {self.image_dim}) inputs, got {x.value.shape}")
        n = x.value.shape[0]
        std = tc.scale(tc.add(x, tc.const(np.full(self.image_dim, -self.INPUT_SHIFT))), self.INPUT_SCALE)
        emb = np.tile(time_embedding(t), (n, 1))
        return self.mlp.forward(tc.hstack(std, tc.const(emb)))

    def forward(self, x, t: int) -> Node:
        if not (1 <= t <= self.sched.t_total):
            raise ScheduleError(f"timestep {t} outside [1, {self.sched.t_total}]")
        x = tc.as_node(x)
        clean = self.clean_estimate(x, t)
        a = self.sched.alphas_bar[t]
        return tc.scale(tc.sub(x, tc.scale(clean, np.sqrt(a))), 1.0 / np.sqrt(1.0 - a))


def forward_noise(x_o: np.ndarray, tau: int, r: np.ndarray, sched: VarianceSchedule) -> np.ndarray:
    """Gaussian transition to noise level tau:
    sqrt(abar_tau) * x_o + sqrt(1 - abar_tau) * r."""
    x_o = np.asarray(x_o, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if x_o.shape != r.shape:
        raise tc.ShapeError(f"forward_noise: x {x_o.shape} vs noise {r.shape}")
    if not (0 <= tau <= sched.t_total):
        raise ScheduleError(f"tau={tau} outside [0, {sched.t_total}]")
    a = sched.alphas_bar[tau]
    return np.sqrt(a) * x_o + np.sqrt(1.0 - a) * r


def ddim_step(x_tau, tau: int, net, sched: VarianceSchedule) -> Node:
    """One deterministic reverse step from level tau to tau-1."""
    if tau < 1:
        raise ScheduleError("ddim_step needs tau >= 1")
    if tau > sched.t_total:
        raise ScheduleError(f"tau={tau} above schedule length {sched.t_total}")
    x = tc.as_node(x_tau)
    eps = net.forward(x, tau)
    a_t = sched.alphas_bar[tau]
    a_prev = sched.alphas_bar[tau - 1]
    x0 = tc.scale(tc.sub(x, tc.scale(eps, np.sqrt(1.0 - a_t))), 1.0 / np.sqrt(a_t))
    return tc.add(tc.scale(x0, np.sqrt(a_prev)), tc.scale(eps, np.sqrt(1.0 - a_prev)))


def reverse_chain(x_o: np.ndarray, tau: int, r: np.ndarray, net, sched: VarianceSchedule) -> Node:
    """Noise once to level tau, then walk the deterministic chain back to 0.
    Gradient flows to the network parameters through every step."""
    if tau > sched.t_total:
        raise ScheduleError(f"tau={tau} above schedule length {sched.t_total}")
    x = tc.const(forward_noise(x_o, tau, r, sched))
    for t in range(tau, 0, -1):
        x = ddim_step(x, t, net, sched)
    return x


def score_matching_loss(batch: np.ndarray, net, sched: VarianceSchedule, tau: int,
                        noise: np.ndarray) -> Node:
    """Denoising objective: sum over t=1..tau of the batch-mean l2 norm of
    the residual between the injected noise and the network's prediction.

    ``noise`` supplies one draw per (t, sample): shape (tau, n, dim).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise tc.ShapeError("score_matching_loss needs a non-empty (n, dim) batch")
    if tau < 1 or tau > sched.t_total:
        raise ScheduleError(f"tau={tau} outside [1, {sched.t_total}]")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (tau, *batch.shape):
        raise tc.ShapeError(f"noise must have shape {(tau, *batch.shape)}, got {noise.shape}")
    total = None
    for t in range(1, tau + 1):
        eps = noise[t - 1]
        x_t = forward_noise(batch, t, eps, sched)
        pred = net.forward(tc.const(x_t), t)
        term = tc.amean(tc.rownorm(tc.sub(tc.const(eps), pred)))
        total = term if total is None else tc.add(total, term)
    return total


# ---------------------------------------------------------------------------
# checkpoint file format (versioned key-value arrays)


def save_network(path, net: ScoreNetwork, sched: VarianceSchedule) -> None:
    payload = {
        "format_version": np.asarray(CHECKPOINT_FORMAT_VERSION),
        "image_dim": np.asarray(net.image_dim),
        "hidden": np.asarray(net.hidden),
        "schedule/betas": sched.betas,
    }
    for key, v in net.params.state().items():
        payload[f"param/{key}"] = v
    np.savez(path, **payload)


def load_network(path) -> tuple[ScoreNetwork, VarianceSchedule]:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        betas = data["schedule/betas"]
        sched = VarianceSchedule(betas=betas, alphas_bar=np.concatenate([[1.0], np.cumprod(1.0 - betas)]))
        net = ScoreNetwork(np.random.default_rng(0), int(data["image_dim"]), sched,
                           tuple(int(h) for h in data["hidden"]))
        state = {key[len("param/"):]: data[key] for key in data.files if key.startswith("param/")}
        net.params.load_state(state)
    return net, sched
