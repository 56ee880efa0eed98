"""End-to-end fine-tuning loop.

Every non-alternation step builds one shared reverse chain, runs separate
backward passes for the identity and expression losses (surgery needs their
per-layer gradients individually), applies one more backward pass for the
perceptual group, and takes an SGD step under the 1/sqrt(t) schedule.
Alternation steps optimize the score-matching term alone.  All randomness
flows through a single seeded generator whose state is checkpointed, so a
resumed run is bit-identical to an uninterrupted one.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffusion, gradsurgery, objectives, tensorcore as tc
from .landmarks import LandmarkRegressor, Triangulation, laplacian_loss_node
from .objectives import EmotionDirection, EncoderSet, LossWeights, PerceptualNet
from .nets import FrozenMlp

CHECKPOINT_FORMAT_VERSION = 1


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, diagnostics: dict):
        super().__init__(f"non-finite loss at step {step}; diagnostics attached")
        self.step = step
        self.diagnostics = diagnostics


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    eta0: float = 2e-3
    epochs: int = 10
    batch_size: int = 4
    alternation_period: int = 2
    tau: int = 25
    ema_decay: float = 0.95
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    lr_mode: str = "sqrt_decay"          # or "constant"
    projection: bool = True
    use_ema: bool = True

    def __post_init__(self):
        if self.eta0 <= 0.0:
            raise ValueError("eta0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.alternation_period < 1:
            raise ValueError("alternation_period must be at least 1")
        if self.lr_mode not in ("sqrt_decay", "constant"):
            raise ValueError(f"unknown lr_mode '{self.lr_mode}'")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class FrozenModels:
    """Everything the loop treats as fixed: surrogate encoders, the vision
    encoder and its expression direction, the landmark regressor, and the
    perceptual feature net."""

    surrogates: EncoderSet
    vis_encoder: FrozenMlp
    direction: EmotionDirection
    regressor: LandmarkRegressor
    perceptual: PerceptualNet


@dataclass
class TrainData:
    """Training split plus per-image landmark fixtures (original landmarks
    and their triangulations, computed once before fine-tuning)."""

    images: np.ndarray                      # (n, dim)
    target_image: np.ndarray                # (dim,)
    landmark_points: list[np.ndarray]       # per image, (K, 2)
    triangulations: list[Triangulation]
    selected: tuple[int, ...]


class MetricsLog:
    """Append-only per-step records with strictly increasing step indices."""

    FIELDS = ["step", "lr", "loss_a", "loss_e", "loss_lpips", "loss_l1", "loss_ls",
              "loss_d", "grad_norm_a", "grad_norm_e", "grad_norm_perc",
              "conflict_rate_a", "conflict_rate_e", "emotion_skips"]

    def __init__(self, rows: list[dict] | None = None):
        self.rows: list[dict] = list(rows) if rows else []

    def append(self, **kw) -> None:
        if self.rows and kw["step"] <= self.rows[-1]["step"]:
            raise ValueError("step indices must be strictly increasing")
        self.rows.append({f: kw.get(f, float("nan")) for f in self.FIELDS})

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self.FIELDS)
            writer.writeheader()
            writer.writerows(self.rows)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        if not isinstance(other, MetricsLog) or len(self) != len(other):
            return False
        for a, b in zip(self.rows, other.rows):
            for f in self.FIELDS:
                va, vb = a[f], b[f]
                if isinstance(va, float) and isinstance(vb, float) and math.isnan(va) and math.isnan(vb):
                    continue
                if va != vb:
                    return False
        return True


@dataclass
class Checkpoint:
    params_state: dict[str, np.ndarray]
    ledger_state: dict[str, np.ndarray]
    step: int
    config_hash: str
    rng_state: dict
    metrics_rows: list[dict]

    def save(self, path) -> None:
        payload = {
            "format_version": np.asarray(CHECKPOINT_FORMAT_VERSION),
            "step": np.asarray(self.step),
            "meta": np.asarray(json.dumps({
                "config_hash": self.config_hash,
                "rng_state": self.rng_state,
                "metrics_rows": self.metrics_rows,
            })),
        }
        for key, v in self.params_state.items():
            payload[f"param/{key}"] = v
        for key, v in self.ledger_state.items():
            payload[f"ledger/{key}"] = v
        np.savez(path, **payload)

    @staticmethod
    def load(path) -> "Checkpoint":
        with np.load(path) as data:
            version = int(data["format_version"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint format version {version}")
            meta = json.loads(str(data["meta"]))
            params_state = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
            ledger_state = {k[len("ledger/"):]: data[k] for k in data.files if k.startswith("ledger/")}
            return Checkpoint(
                params_state=params_state,
                ledger_state=ledger_state,
                step=int(data["step"]),
                config_hash=meta["config_hash"],
                rng_state=meta["rng_state"],
                metrics_rows=meta["metrics_rows"],
            )


def sgd_step(params: tc.ParamStore, grads: tc.GradientMap, eta: float) -> None:
    """w <- w - eta * g, layer by layer."""
    for layer in params.layer_ids:
        g = grads[layer]
        if g.shape != (params.layer_size(layer),):
            raise tc.ShapeError(f"gradient shape mismatch on layer '{layer}'")
        if not np.all(np.isfinite(g)):
            raise tc.NonFiniteError(f"non-finite gradient on layer '{layer}'")
        params.set_flat(layer, params.flat(layer) - eta * g)


def lr_schedule(t: int, eta0: float, mode: str = "sqrt_decay") -> float:
    if t < 1:
        raise ValueError("step index starts at 1")
    if mode == "sqrt_decay":
        return eta0 / math.sqrt(t)
    if mode == "constant":
        return eta0
    raise ValueError(f"unknown lr_mode '{mode}'")


def _laplacian_batch_loss(x_p, idx, data: TrainData, regressor: LandmarkRegressor):
    """Per-sample smoothness terms under each sample's own triangulation."""
    coords = regressor.coords_node(x_p)
    n = coords.value.shape[0]
    total = None
    for row, sample in enumerate(idx):
        pick = np.zeros((1, n))
        pick[0, row] = 1.0
        row_coords = tc.matmul(tc.const(pick), coords)
        term = laplacian_loss_node(data.landmark_points[sample], row_coords,
                                   data.triangulations[sample], data.selected)
        total = term if total is None else tc.add(total, term)
    return tc.scale(total, 1.0 / n)


def _steps_per_epoch(n_images: int, batch: int) -> int:
    return max(1, n_images // batch)


def fine_tune(config: TrainConfig, data: TrainData, models: FrozenModels,
              net: diffusion.ScoreNetwork, sched: diffusion.VarianceSchedule,
              resume_from: Checkpoint | None = None,
              epoch_checkpoint_dir=None) -> tuple[Checkpoint, MetricsLog]:
    if not models.surrogates.all_surrogate():
        raise ValueError("fine_tune accepts surrogate-tagged encoders only")
    w = config.weights
    n_images = len(data.images)
    dim = data.images.shape[1]
    steps_per_epoch = _steps_per_epoch(n_images, config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    cfg_hash = config.config_hash()

    rng = np.random.default_rng(config.seed)
    ledger = gradsurgery.GradientLedger(net.params.layer_sizes(), decay=config.ema_decay)
    log = MetricsLog()
    start = 0
    if resume_from is not None:
        if resume_from.config_hash != cfg_hash:
            raise ConfigMismatchError("checkpoint was produced under a different configuration")
        net.params.load_state(resume_from.params_state)
        ledger.load_state(resume_from.ledger_state)
        rng.bit_generator.state = resume_from.rng_state
        log = MetricsLog(resume_from.metrics_rows)
        start = resume_from.step

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            params_state=net.params.state(),
            ledger_state=ledger.state(),
            step=step,
            config_hash=cfg_hash,
            rng_state=rng.bit_generator.state,
            metrics_rows=list(log.rows),
        )

    for t in range(start + 1, total_steps + 1):
        eta_t = lr_schedule(t, config.eta0, config.lr_mode)
        idx = rng.integers(0, n_images, size=config.batch_size)
        batch = data.images[idx]
        try:
            if t % config.alternation_period == 0:
                noise = rng.standard_normal((config.tau, config.batch_size, dim))
                if w.gamma_d > 0.0:
                    loss_d = diffusion.score_matching_loss(batch, net, sched, config.tau, noise)
                    g = tc.backward(loss_d, net.params)
                    sgd_step(net.params, tc.combine_gradient_maps([(w.gamma_d, g)]), eta_t)
                    loss_d_val = float(loss_d.value)
                else:
                    loss_d_val = float("nan")
                log.append(step=t, lr=eta_t, loss_d=loss_d_val, emotion_skips=0)
            else:
                r = rng.standard_normal((config.batch_size, dim))
                x_p = diffusion.reverse_chain(batch, config.tau, r, net, sched)

                if w.gamma_a > 0.0:
                    l_a = objectives.angular_loss(x_p, data.target_image, models.surrogates)
                    g_a = tc.backward(l_a, net.params)
                    loss_a_val = float(l_a.value)
                else:
                    g_a = tc.zero_gradient_map(net.params)
                    loss_a_val = float("nan")

                skips = 0
                if w.gamma_e > 0.0:
                    try:
                        l_e, skips = objectives.emotion_loss(x_p, batch, models.vis_encoder,
                                                             models.direction)
                        g_e = tc.backward(l_e, net.params)
                        loss_e_val = float(l_e.value)
                    except tc.DegenerateVectorError:
                        skips = config.batch_size
                        g_e = tc.zero_gradient_map(net.params)
                        loss_e_val = float("nan")
                else:
                    g_e = tc.zero_gradient_map(net.params)
                    loss_e_val = float("nan")

                proj_a, proj_e, report = gradsurgery.surgery_step(
                    ledger, g_a, g_e,
                    project_enabled=config.projection, use_ema=config.use_ema)

                perceptual_terms: dict[str, tc.Node | None] = {}
                if w.gamma_lpips > 0.0:
                    perceptual_terms["lpips"] = objectives.lpips_proxy_loss(x_p, batch, models.perceptual)
                if w.gamma_l1 > 0.0:
                    perceptual_terms["l1"] = objectives.l1_loss(x_p, tc.const(batch))
                if w.gamma_ls > 0.0:
                    perceptual_terms["smoothness"] = _laplacian_batch_loss(x_p, idx, data, models.regressor)
                if perceptual_terms:
                    perc_total, perc_report = objectives.combined_loss(perceptual_terms, w)
                    g_perc = tc.backward(perc_total, net.params)
                else:
                    perc_report = objectives.LossReport()
                    g_perc = tc.zero_gradient_map(net.params)

                g = tc.combine_gradient_maps([
                    (w.gamma_a, proj_a), (w.gamma_e, proj_e), (1.0, g_perc)])
                sgd_step(net.params, g, eta_t)

                log.append(
                    step=t, lr=eta_t,
                    loss_a=loss_a_val, loss_e=loss_e_val,
                    loss_lpips=perc_report.terms.get("lpips", float("nan")),
                    loss_l1=perc_report.terms.get("l1", float("nan")),
                    loss_ls=perc_report.terms.get("smoothness", float("nan")),
                    grad_norm_a=tc.gradient_map_norm(g_a),
                    grad_norm_e=tc.gradient_map_norm(g_e),
                    grad_norm_perc=tc.gradient_map_norm(g_perc),
                    conflict_rate_a=report.conflict_rate_a,
                    conflict_rate_e=report.conflict_rate_e,
                    emotion_skips=skips,
                )
        except tc.NonFiniteError as exc:
            raise TrainingAborted(t, {
                "error": str(exc),
                "last_rows": log.rows[-5:],
                "param_norms": {layer: float(np.linalg.norm(net.params.flat(layer)))
                                for layer in net.params.layer_ids},
            }) from exc

        if epoch_checkpoint_dir is not None and t % steps_per_epoch == 0:
            snapshot(t).save(f"{epoch_checkpoint_dir}/epoch_{t // steps_per_epoch:03d}.npz")

    return snapshot(total_steps), log


def resume(checkpoint: Checkpoint, config: TrainConfig, data: TrainData, models: FrozenModels,
           net: diffusion.ScoreNetwork, sched: diffusion.VarianceSchedule,
           epoch_checkpoint_dir=None) -> tuple[Checkpoint, MetricsLog]:
    """Continue a checkpointed run to completion; the next step after the
    checkpoint is bit-identical to an uninterrupted run."""
    return fine_tune(config, data, models, net, sched, resume_from=checkpoint,
                     epoch_checkpoint_dir=epoch_checkpoint_dir)
