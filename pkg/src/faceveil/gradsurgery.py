"""Layer-wise gradient surgery between the identity and expression losses.

Each loss keeps an exponential-moving-average estimate of its full-dataset
gradient per layer.  At every step, a minibatch gradient that opposes the
*other* loss's EMA direction loses its parallel component; the EMAs are then
advanced with the raw (unprojected) minibatch gradients.  Projection uses
the previous step's EMA so the update rule is not self-referential.

Also houses the empirical harnesses for the two supporting guarantees: the
EMA tracking-error trend in the step size, and the log(T)/sqrt(T) envelope
on the running mean gradient norm under a 1/sqrt(t) step-size schedule.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

PROJECT_EPS = 1e-12


class ConstantsError(ValueError):
    """Theorem constants produce a decay factor outside (0, 1)."""


class RunTooShortError(ValueError):
    pass


def ema_update(prev: np.ndarray, raw_grad: np.ndarray, decay: float) -> np.ndarray:
    """m_t = decay * m_{t-1} + (1 - decay) * g_t."""
    prev = np.asarray(prev, dtype=np.float64)
    raw_grad = np.asarray(raw_grad, dtype=np.float64)
    if prev.shape != raw_grad.shape:
        raise ValueError(f"ema_update: shapes {prev.shape} != {raw_grad.shape}")
    return decay * prev + (1.0 - decay) * raw_grad


def project(g: np.ndarray, m_ref: np.ndarray, eps: float = PROJECT_EPS) -> np.ndarray:
    """Drop the component of g that opposes the reference direction.

    With u = m_ref / ||m_ref||:  g - min(0, <g, u>) * u.  While the
    reference is still effectively zero (bootstrap), g passes through
    unchanged.  Agreement (<g, u> >= 0) is a strict no-op.
    """
    g = np.asarray(g, dtype=np.float64)
    m_ref = np.asarray(m_ref, dtype=np.float64)
    if g.shape != m_ref.shape:
        raise ValueError(f"project: shapes {g.shape} != {m_ref.shape}")
    ref_norm = float(np.linalg.norm(m_ref))
    if ref_norm <= eps:
        return g.copy()
    u = m_ref / ref_norm
    c = float(g @ u)
    if c >= 0.0:
        return g.copy()
    return g - c * u


def _cosine(a: np.ndarray, b: np.ndarray, eps: float = PROJECT_EPS) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na <= eps or nb <= eps:
        return 0.0
    return float(a @ b) / (na * nb)


@dataclass
class LayerProjection:
    cosine_a: float
    conflict_a: bool
    retained_a: float
    cosine_e: float
    conflict_e: bool
    retained_e: float


@dataclass
class ProjectionReport:
    """Per-layer diagnostics for one surgery step.  Covers exactly the two
    projected gradient streams; the perceptual gradients never pass here."""

    layers: dict[str, LayerProjection] = field(default_factory=dict)

    @property
    def conflict_rate_a(self) -> float:
        if not self.layers:
            return 0.0
        return sum(l.conflict_a for l in self.layers.values()) / len(self.layers)

    @property
    def conflict_rate_e(self) -> float:
        if not self.layers:
            return 0.0
        return sum(l.conflict_e for l in self.layers.values()) / len(self.layers)


class GradientLedger:
    """Per-layer EMA gradient estimates for the two projected losses."""

    def __init__(self, layer_sizes: dict[str, int], decay: float):
        if not (0.0 <= decay < 1.0):
            raise ValueError("decay must lie in [0, 1)")
        self.decay = float(decay)
        self.m_a = {layer: np.zeros(size) for layer, size in layer_sizes.items()}
        self.m_e = {layer: np.zeros(size) for layer, size in layer_sizes.items()}
        self.t = 0

    def _check(self, grads: dict[str, np.ndarray]) -> None:
        for layer, m in self.m_a.items():
            if layer not in grads:
                raise ValueError(f"missing gradient for layer '{layer}'")
            if grads[layer].shape != m.shape:
                raise ValueError(f"gradient length mismatch on layer '{layer}'")

    def step_update(self, grads_a: dict[str, np.ndarray], grads_e: dict[str, np.ndarray]) -> None:
        """Advance both EMAs with raw minibatch gradients; one step count."""
        self._check(grads_a)
        self._check(grads_e)
        for layer in self.m_a:
            self.m_a[layer] = ema_update(self.m_a[layer], grads_a[layer], self.decay)
            self.m_e[layer] = ema_update(self.m_e[layer], grads_e[layer], self.decay)
        self.t += 1

    def state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"t": np.asarray(self.t), "decay": np.asarray(self.decay)}
        for layer, v in self.m_a.items():
            out[f"a/{layer}"] = v.copy()
        for layer, v in self.m_e.items():
            out[f"e/{layer}"] = v.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        self.decay = float(state["decay"])
        for layer in self.m_a:
            self.m_a[layer] = np.asarray(state[f"a/{layer}"], dtype=np.float64).copy()
            self.m_e[layer] = np.asarray(state[f"e/{layer}"], dtype=np.float64).copy()


def surgery_step(ledger: GradientLedger, grads_a: dict[str, np.ndarray],
                 grads_e: dict[str, np.ndarray], *, project_enabled: bool = True,
                 use_ema: bool = True) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], ProjectionReport]:
    """Project each loss's minibatch gradient against the other loss's
    reference direction, then advance the EMAs with the raw gradients.

    ``project_enabled=False`` passes gradients through untouched (ablation);
    ``use_ema=False`` projects against the other loss's *current* minibatch
    gradient instead of its EMA (ablation).
    """
    ledger._check(grads_a)
    ledger._check(grads_e)
    out_a: dict[str, np.ndarray] = {}
    out_e: dict[str, np.ndarray] = {}
    report = ProjectionReport()
    for layer in ledger.m_a:
        ga, ge = grads_a[layer], grads_e[layer]
        ref_for_a = ledger.m_e[layer] if use_ema else ge
        ref_for_e = ledger.m_a[layer] if use_ema else ga
        cos_a = _cosine(ga, ref_for_a)
        cos_e = _cosine(ge, ref_for_e)
        if project_enabled:
            pa = project(ga, ref_for_a)
            pe = project(ge, ref_for_e)
        else:
            pa, pe = ga.copy(), ge.copy()
        na, ne = float(np.linalg.norm(ga)), float(np.linalg.norm(ge))
        report.layers[layer] = LayerProjection(
            cosine_a=cos_a,
            conflict_a=cos_a < 0.0,
            retained_a=float(np.linalg.norm(pa)) / na if na > 0 else 1.0,
            cosine_e=cos_e,
            conflict_e=cos_e < 0.0,
            retained_e=float(np.linalg.norm(pe)) / ne if ne > 0 else 1.0,
        )
        out_a[layer] = pa
        out_e[layer] = pe
    ledger.step_update(grads_a, grads_e)
    return out_a, out_e, report


# ---------------------------------------------------------------------------
# decay factor from the tracking-error guarantee


@dataclass(frozen=True)
class TheoremConstants:
    grad_bound: float        # G: bound on the full-gradient norm
    lipschitz: float         # L: Lipschitz constant of the stochastic gradients
    variance_bound: float    # M: bound on the minibatch-gradient variance
    failure_prob: float      # delta
    learning_rate: float     # eta

    def __post_init__(self):
        for name in ("grad_bound", "lipschitz", "variance_bound", "learning_rate"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.failure_prob < 1.0):
            raise ValueError("failure_prob must lie in (0, 1)")


def lambda_from_constants(c: TheoremConstants) -> float:
    """decay = 1 - (sqrt(M) / (L G))^(2/3) * eta^(2/3)."""
    lam = 1.0 - (math.sqrt(c.variance_bound) / (c.lipschitz * c.grad_bound)) ** (2.0 / 3.0) \
        * c.learning_rate ** (2.0 / 3.0)
    if not (0.0 < lam < 1.0):
        raise ConstantsError(f"constants give decay {lam!r} outside (0, 1)")
    return lam


# ---------------------------------------------------------------------------
# dual-objective toy problem with an exact full-batch gradient oracle


class DualQuadraticToy:
    """Two quadratic objectives over shared weights with per-sample noise.

    Per-sample gradients are H_x (w - w*_x) + z_i where the noise vectors
    z_i are centered to sum exactly to zero, so the full-dataset gradient is
    available in closed form each step.  ``shared_optimum=True`` makes both
    objectives vanish at the same point (the convergence harness); otherwise
    the optima differ and the losses genuinely fight (the momentum harness).
    """

    def __init__(self, rng: np.random.Generator, dim: int = 10, n_samples: int = 200,
                 shared_optimum: bool = False, noise: float = 1.0, cond: float = 8.0):
        self.dim = dim
        self.n_samples = n_samples
        self.h_a = self._random_spd(rng, dim, cond)
        self.h_e = self._random_spd(rng, dim, cond)
        self.wstar_a = rng.normal(size=dim)
        self.wstar_e = self.wstar_a if shared_optimum else rng.normal(size=dim)
        za = rng.normal(0.0, noise, size=(n_samples, dim))
        ze = rng.normal(0.0, noise, size=(n_samples, dim))
        self.z_a = za - za.mean(axis=0)
        self.z_e = ze - ze.mean(axis=0)
        self.w0 = self.wstar_a + rng.normal(0.0, 1.0, size=dim)

    @staticmethod
    def _random_spd(rng, dim, cond):
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        eigs = np.geomspace(1.0, cond, dim)
        return q @ np.diag(eigs) @ q.T

    def full_grad_a(self, w: np.ndarray) -> np.ndarray:
        return self.h_a @ (w - self.wstar_a)

    def full_grad_e(self, w: np.ndarray) -> np.ndarray:
        return self.h_e @ (w - self.wstar_e)

    def batch_grad_a(self, w: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self.full_grad_a(w) + self.z_a[idx].mean(axis=0)

    def batch_grad_e(self, w: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self.full_grad_e(w) + self.z_e[idx].mean(axis=0)


def estimate_constants(problem: DualQuadraticToy, rng: np.random.Generator, eta: float,
                       batch: int = 16, n_probe: int = 24, delta: float = 0.05) -> TheoremConstants:
    """Empirical G / L / M estimates from probe points around the start.
    Nothing is assumed: max observed norms, max pairwise Lipschitz ratios,
    and sampled minibatch variance."""
    probes = [problem.w0 + rng.normal(0.0, 0.5, size=problem.dim) for _ in range(n_probe)]
    grads = []
    for w in probes:
        grads.append((w, problem.full_grad_a(w), problem.full_grad_e(w)))
    g_bound = max(max(np.linalg.norm(ga), np.linalg.norm(ge)) for _, ga, ge in grads)
    lip = 0.0
    for i in range(len(grads)):
        for j in range(i + 1, len(grads)):
            wi, gai, gei = grads[i]
            wj, gaj, gej = grads[j]
            dw = float(np.linalg.norm(wi - wj))
            if dw < 1e-9:
                continue
            lip = max(lip, float(np.linalg.norm(gai - gaj)) / dw, float(np.linalg.norm(gei - gej)) / dw)
    var = 0.0
    for w, ga, ge in grads[: max(4, n_probe // 4)]:
        devs_a, devs_e = [], []
        for _ in range(16):
            idx = rng.integers(0, problem.n_samples, size=batch)
            devs_a.append(np.linalg.norm(problem.batch_grad_a(w, idx) - ga) ** 2)
            devs_e.append(np.linalg.norm(problem.batch_grad_e(w, idx) - ge) ** 2)
        var = max(var, float(np.mean(devs_a)), float(np.mean(devs_e)))
    return TheoremConstants(grad_bound=g_bound, lipschitz=lip, variance_bound=var,
                            failure_prob=delta, learning_rate=eta)


def momentum_error_harness(problem: DualQuadraticToy, etas, seeds, *, c_prime: float = 10.0,
                           batch: int = 16, decay_override: float | None = None,
                           out_csv=None) -> list[dict]:
    """Terminal EMA tracking error per (step size, seed).

    For each step size the decay comes from ``lambda_from_constants`` (or an
    explicit override) and the run length is ceil(c_prime * eta^(-2/3)).
    The recorded error is the worse of the two losses' ||m_T - full_grad||.
    """
    rows = []
    for eta in etas:
        const_rng = np.random.default_rng(12345)
        constants = estimate_constants(problem, const_rng, eta, batch=batch)
        lam = decay_override if decay_override is not None else lambda_from_constants(constants)
        t_run = int(math.ceil(c_prime * eta ** (-2.0 / 3.0)))
        for seed in seeds:
            rng = np.random.default_rng(seed)
            w = problem.w0.copy()
            ledger = GradientLedger({"w": problem.dim}, decay=lam)
            for _ in range(t_run):
                idx = rng.integers(0, problem.n_samples, size=batch)
                ga = problem.batch_grad_a(w, idx)
                ge = problem.batch_grad_e(w, idx)
                pa, pe, _ = surgery_step(ledger, {"w": ga}, {"w": ge})
                w = w - eta * (pa["w"] + pe["w"])
            err_a = float(np.linalg.norm(ledger.m_a["w"] - problem.full_grad_a(w)))
            err_e = float(np.linalg.norm(ledger.m_e["w"] - problem.full_grad_e(w)))
            rows.append({"eta": eta, "lambda": lam, "seed": int(seed), "T": t_run,
                         "terminal_error": max(err_a, err_e)})
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["eta", "lambda", "seed", "T", "terminal_error"])
            writer.writeheader()
            writer.writerows(rows)
    return rows


@dataclass
class ConvergenceFit:
    c: float
    residual_slope: float
    passed: bool
    running_mean: np.ndarray


def convergence_harness(grad_norm_log, *, min_steps: int = 500) -> ConvergenceFit:
    """Fit C in  running_mean(T) <= C log(T)/sqrt(T)  over the second half
    of a run and check the fit stays valid: the residual (envelope minus
    observed running mean) must not trend downward.

    A run whose gradient norms plateau (for example under a constant step
    size) produces a negative residual slope and is flagged as failed.
    """
    norms = np.asarray(grad_norm_log, dtype=np.float64)
    t_run = len(norms)
    if t_run < min_steps:
        raise RunTooShortError(f"need at least {min_steps} steps, got {t_run}")
    steps = np.arange(1, t_run + 1)
    running = np.cumsum(norms) / steps
    half = t_run // 2
    t2 = steps[half:]
    s2 = running[half:]
    envelope = np.log(t2) / np.sqrt(t2)
    denom = float(envelope @ envelope)
    c_fit = float(s2 @ envelope) / denom if denom > 0 else 0.0
    resid = c_fit * envelope - s2
    slope = float(np.polyfit(t2.astype(float), resid, 1)[0])
    passed = bool(np.all(norms == 0.0)) or slope >= 0.0
    return ConvergenceFit(c=c_fit, residual_slope=slope, passed=passed, running_mean=running)


def run_convergence_toy(steps: int = 5000, eta0: float = 0.4, seed: int = 0, *,
                        schedule: str = "sqrt_decay", batch: int = 16,
                        out_csv=None) -> tuple[dict[str, np.ndarray], dict[str, ConvergenceFit]]:
    """Drive the shared-optimum toy with projected SGD and log the exact
    full-gradient norms, then envelope-fit both losses."""
    rng = np.random.default_rng(seed)
    problem = DualQuadraticToy(rng, shared_optimum=True)
    ledger = GradientLedger({"w": problem.dim}, decay=0.95)
    w = problem.w0.copy()
    log_a, log_e, conflicts = [], [], []
    for t in range(1, steps + 1):
        eta_t = eta0 / math.sqrt(t) if schedule == "sqrt_decay" else eta0
        idx = rng.integers(0, problem.n_samples, size=batch)
        ga = problem.batch_grad_a(w, idx)
        ge = problem.batch_grad_e(w, idx)
        pa, pe, report = surgery_step(ledger, {"w": ga}, {"w": ge})
        w = w - eta_t * (pa["w"] + pe["w"])
        log_a.append(float(np.linalg.norm(problem.full_grad_a(w))))
        log_e.append(float(np.linalg.norm(problem.full_grad_e(w))))
        conflicts.append(report.conflict_rate_a)
    logs = {"a": np.asarray(log_a), "e": np.asarray(log_e)}
    fits = {name: convergence_harness(vals) for name, vals in logs.items()}
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t", "grad_norm_A", "grad_norm_E", "conflict_rate"])
            for i in range(steps):
                writer.writerow([i + 1, log_a[i], log_e[i], conflicts[i]])
    return logs, fits
