"""Experiment front door: manifest parsing, the prep / train / protect /
eval stages, ablation batches, and the theorem harness drivers.

A manifest (flat ``key = value`` text) fully determines a run; its hash is
echoed into every output so reports are traceable and byte-reproducible.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import diffusion, gradsurgery, tensorcore as tc
from ..landmarks import delaunay
from ..objectives import EncoderSet, LossWeights, lpips_proxy_loss, l1_loss
from ..trainer import Checkpoint, FrozenModels, MetricsLog, TrainConfig, TrainData, fine_tune
from .evalmetrics import (Gallery, PSRReport, azimuthal_spectrum_full, cosine_to_reference,
                          far_threshold, high_freq_fraction, pair_cosines, psr_rank_n,
                          psr_verification, threshold_from_scores)
from .frozen import GateReport, train_frozen_models
from .synth import EXPRESSION_SELECTED, SyntheticDataset, synth_dataset


class ManifestError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


MANIFEST_DEFAULTS: dict[str, object] = {
    "seed": 0,
    "n_identities": 20,
    "images_per_identity": 10,
    "image_size": 32,
    "target_identity": 0,
    "blackbox_index": 3,
    "train_images": 140,
    "eval_probes": 50,
    # diffusion
    "t_total": 50,
    "beta_start": 1e-4,
    "beta_end": 0.02,
    "tau": 25,
    "pretrain_steps": 2000,
    "pretrain_lr": 2e-4,
    "pretrain_batch": 4,
    # fine-tune
    "eta0": 2e-3,
    "epochs": 10,
    "batch_size": 4,
    "alternation_period": 2,
    "ema_decay": 0.95,
    "lr_mode": "sqrt_decay",
    "gamma_a": 0.5,
    "gamma_e": 0.08,
    "gamma_lpips": 0.1,
    "gamma_l1": 0.5,
    "gamma_ls": 4.0,
    "gamma_d": 0.05,
    # ablation switches
    "projection": True,
    "use_ema": True,
    "emotion": True,
    "smoothness": True,
    # evaluation
    "far_values": "0.1,0.01,0.001",
    "impostor_pairs": 4000,
    "rank_ns": "1,5",
    "spectrum_cut_divisor": 8,
    "control_brightness": 0.1,
}

_BOOL_KEYS = {"projection", "use_ema", "emotion", "smoothness"}
_INT_KEYS = {"seed", "n_identities", "images_per_identity", "image_size", "target_identity",
             "blackbox_index", "train_images", "eval_probes", "t_total", "tau",
             "pretrain_steps", "pretrain_batch", "epochs", "batch_size",
             "alternation_period", "impostor_pairs", "spectrum_cut_divisor"}
_STR_KEYS = {"lr_mode", "far_values", "rank_ns"}


def _coerce(key: str, raw: str):
    if key in _BOOL_KEYS:
        low = raw.strip().lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ManifestError(f"key '{key}' expects a boolean, got '{raw}'")
    if key in _INT_KEYS:
        return int(raw)
    if key in _STR_KEYS:
        return raw.strip()
    return float(raw)


def parse_manifest(path=None, overrides: dict[str, str] | None = None) -> dict:
    manifest = dict(MANIFEST_DEFAULTS)
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ManifestError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in MANIFEST_DEFAULTS:
                raise ManifestError(f"{path}:{lineno}: unknown key '{key}'")
            manifest[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in MANIFEST_DEFAULTS:
            raise ManifestError(f"override: unknown key '{key}'")
        manifest[key] = _coerce(key, str(raw))
    return manifest


def manifest_hash(manifest: dict) -> str:
    blob = "\n".join(f"{k} = {manifest[k]}" for k in sorted(manifest))
    return hashlib.sha256(blob.encode()).hexdigest()


def manifest_echo(manifest: dict) -> str:
    lines = [f"{k} = {manifest[k]}" for k in sorted(manifest)]
    lines.append(f"# manifest_hash = {manifest_hash(manifest)}")
    return "\n".join(lines) + "\n"


def train_config_from(manifest: dict) -> TrainConfig:
    weights = LossWeights(
        gamma_a=manifest["gamma_a"],
        gamma_e=manifest["gamma_e"] if manifest["emotion"] else 0.0,
        gamma_lpips=manifest["gamma_lpips"],
        gamma_l1=manifest["gamma_l1"],
        gamma_ls=manifest["gamma_ls"] if manifest["smoothness"] else 0.0,
        gamma_d=manifest["gamma_d"],
    )
    return TrainConfig(
        eta0=manifest["eta0"],
        epochs=manifest["epochs"],
        batch_size=manifest["batch_size"],
        alternation_period=manifest["alternation_period"],
        tau=manifest["tau"],
        ema_decay=manifest["ema_decay"],
        weights=weights,
        seed=manifest["seed"],
        lr_mode=manifest["lr_mode"],
        projection=manifest["projection"],
        use_ema=manifest["use_ema"],
    )


# ---------------------------------------------------------------------------
# stages


@dataclass
class PrepArtifacts:
    dataset: SyntheticDataset
    models: FrozenModels
    encoders: EncoderSet
    gates: GateReport
    net: diffusion.ScoreNetwork
    sched: diffusion.VarianceSchedule
    splits: dict[str, np.ndarray]


def _splits(manifest: dict, dataset: SyntheticDataset) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([manifest["seed"], 0x5B117])
    target = manifest["target_identity"]
    non_target = np.nonzero(dataset.labels != target)[0]
    perm = rng.permutation(non_target)
    n_train = manifest["train_images"]
    n_eval = manifest["eval_probes"]
    if n_train + n_eval > len(non_target):
        raise ManifestError("train_images + eval_probes exceeds available non-target images")
    return {
        "train": np.sort(perm[:n_train]),
        "eval": np.sort(perm[n_train : n_train + n_eval]),
        "target": np.nonzero(dataset.labels == target)[0],
    }


def pretrain_score_network(manifest: dict, dataset: SyntheticDataset,
                           sched: diffusion.VarianceSchedule) -> diffusion.ScoreNetwork:
    """Denoising-only warm-up for a fixed step budget with constant-rate SGD."""
    rng = np.random.default_rng([manifest["seed"], 0xD1FF])
    net = diffusion.ScoreNetwork(rng, dataset.images.shape[1], sched)
    batch = manifest["pretrain_batch"]
    tau = manifest["tau"]
    lr = manifest["pretrain_lr"]
    dim = dataset.images.shape[1]
    for _ in range(manifest["pretrain_steps"]):
        idx = rng.integers(0, len(dataset.images), size=batch)
        noise = rng.standard_normal((tau, batch, dim))
        loss = diffusion.score_matching_loss(dataset.images[idx], net, sched, tau, noise)
        grads = tc.backward(loss, net.params)
        for layer in net.params.layer_ids:
            net.params.set_flat(layer, net.params.flat(layer) - lr * grads[layer])
    return net


def run_prep(manifest: dict) -> PrepArtifacts:
    try:
        dataset = synth_dataset(manifest["n_identities"], manifest["images_per_identity"],
                                seed=manifest["seed"], image_size=manifest["image_size"])
        models, encoders, gates = train_frozen_models(dataset, seed=manifest["seed"],
                                                      blackbox_index=manifest["blackbox_index"])
        sched = diffusion.make_schedule(manifest["t_total"], manifest["beta_start"],
                                        manifest["beta_end"])
        net = pretrain_score_network(manifest, dataset, sched)
        return PrepArtifacts(dataset=dataset, models=models, encoders=encoders, gates=gates,
                             net=net, sched=sched, splits=_splits(manifest, dataset))
    except Exception as exc:
        raise StageError("prep", exc) from exc


def build_train_data(manifest: dict, prep: PrepArtifacts) -> TrainData:
    dataset = prep.dataset
    train_idx = prep.splits["train"]
    target_image = dataset.images[prep.splits["target"][0]]
    points, tris = [], []
    for i in train_idx:
        coords = prep.models.regressor.coords_np(dataset.images[i])[0].reshape(-1, 2)
        points.append(coords)
        tris.append(delaunay(coords))
    return TrainData(
        images=dataset.images[train_idx],
        target_image=target_image,
        landmark_points=points,
        triangulations=tris,
        selected=EXPRESSION_SELECTED,
    )


def run_train(manifest: dict, prep: PrepArtifacts) -> tuple[Checkpoint, MetricsLog, diffusion.ScoreNetwork]:
    """Fine-tune a copy of the pretrained network, leaving the prep
    artifacts untouched so they can be shared across ablation variants."""
    try:
        config = train_config_from(manifest)
        data = build_train_data(manifest, prep)
        net = prep.net.clone()
        checkpoint, metrics = fine_tune(config, data, prep.models, net, prep.sched)
        return checkpoint, metrics, net
    except Exception as exc:
        raise StageError("train", exc) from exc


def run_protect(manifest: dict, prep: PrepArtifacts, net: diffusion.ScoreNetwork) -> np.ndarray:
    """Apply the fine-tuned reverse chain to the evaluation split, one seeded
    noise draw per probe."""
    try:
        rng = np.random.default_rng([manifest["seed"], 0x9207EC7])
        eval_images = prep.dataset.images[prep.splits["eval"]]
        r = rng.standard_normal(eval_images.shape)
        protected = diffusion.reverse_chain(eval_images, manifest["tau"], r, net, prep.sched)
        return protected.value
    except Exception as exc:
        raise StageError("protect", exc) from exc


def _impostor_pairs(manifest: dict, dataset: SyntheticDataset) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([manifest["seed"], 0x1A125])
    n = manifest["impostor_pairs"]
    lhs, rhs = [], []
    while len(lhs) < n:
        a, b = rng.integers(0, len(dataset.images), size=2)
        if dataset.labels[a] != dataset.labels[b]:
            lhs.append(a)
            rhs.append(b)
    return dataset.images[np.asarray(lhs)], dataset.images[np.asarray(rhs)]


def run_eval(manifest: dict, prep: PrepArtifacts, protected: np.ndarray,
             metrics: MetricsLog) -> tuple[PSRReport, dict[str, np.ndarray]]:
    try:
        dataset = prep.dataset
        blackbox = prep.encoders.blackbox().net
        eval_idx = prep.splits["eval"]
        originals = dataset.images[eval_idx]
        x_t = dataset.images[prep.splits["target"][0]]

        fars = [float(v) for v in manifest["far_values"].split(",")]
        lhs, rhs = _impostor_pairs(manifest, dataset)
        impostor_scores = pair_cosines(blackbox, lhs, rhs)
        thresholds = {f"{far:g}": threshold_from_scores(impostor_scores, far) for far in fars}

        psr = {key: psr_verification(protected, x_t, blackbox, thr)
               for key, thr in thresholds.items()}
        clean_scores = cosine_to_reference(blackbox, originals, x_t)
        clean_psr = {key: float((clean_scores > thr).mean()) for key, thr in thresholds.items()}

        gallery_idx = np.asarray([np.nonzero(dataset.labels == lab)[0][1]
                                  for lab in range(dataset.n_identities)])
        gallery = Gallery(images=dataset.images[gallery_idx],
                          labels=dataset.labels[gallery_idx],
                          target_label=manifest["target_identity"])
        ranks = {str(n): psr_rank_n(protected, gallery, blackbox, n)
                 for n in (int(v) for v in manifest["rank_ns"].split(","))}

        protected_scores = cosine_to_reference(blackbox, protected, x_t)

        l1_vals = np.abs(protected - originals).mean()
        lpips_vals = float(np.mean([
            float(lpips_proxy_loss(tc.const(protected[i : i + 1]), originals[i : i + 1],
                                   prep.models.perceptual).value)
            for i in range(len(protected))
        ]))

        size = manifest["image_size"]
        cut = size / manifest["spectrum_cut_divisor"]
        edit_fracs, control_fracs = [], []
        edit_profiles, control_profiles = [], []
        for i in range(len(protected)):
            diff = (protected[i] - originals[i]).reshape(size, size)
            control = np.full((size, size), manifest["control_brightness"])
            edit_fracs.append(high_freq_fraction(diff, cut))
            control_fracs.append(high_freq_fraction(control, cut))
            edit_profiles.append(azimuthal_spectrum_full(diff)[0])
            control_profiles.append(azimuthal_spectrum_full(control)[0])

        skips = int(sum(row["emotion_skips"] for row in metrics.rows
                        if not math.isnan(row["emotion_skips"])))
        report = PSRReport(
            config_hash=manifest_hash(manifest),
            far_thresholds=thresholds,
            psr_verification=psr,
            psr_rank=ranks,
            mean_blackbox_cosine=float(protected_scores.mean()),
            clean_mean_blackbox_cosine=float(clean_scores.mean()),
            clean_psr=clean_psr,
            quality_l1=float(l1_vals),
            quality_lpips_proxy=lpips_vals,
            skipped_emotion_terms=skips,
            spectrum_edit_high_freq=float(np.mean(edit_fracs)),
            spectrum_control_high_freq=float(np.mean(control_fracs)),
            ablation={key: bool(manifest[key]) for key in sorted(_BOOL_KEYS)},
        )
        spectra = {
            "edit_profile": np.mean(edit_profiles, axis=0),
            "control_profile": np.mean(control_profiles, axis=0),
        }
        return report, spectra
    except Exception as exc:
        raise StageError("eval", exc) from exc


def write_spectra_csv(path, spectra: dict[str, np.ndarray]) -> None:
    edit, control = spectra["edit_profile"], spectra["control_profile"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["radius", "edit_profile", "control_profile"])
        for r in range(len(edit)):
            writer.writerow([r, repr(float(edit[r])), repr(float(control[r]))])


def run_experiment(manifest: dict, out_dir, prep: PrepArtifacts | None = None) -> PSRReport:
    """prep -> train -> protect -> eval; writes report.json, metrics.csv,
    spectra.csv, checkpoint.npz and the manifest echo into ``out_dir``.
    Fully reproducible from the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.txt").write_text(manifest_echo(manifest))
    if prep is None:
        prep = run_prep(manifest)
    checkpoint, metrics, net = run_train(manifest, prep)
    protected = run_protect(manifest, prep, net)
    report, spectra = run_eval(manifest, prep, protected, metrics)
    checkpoint.save(out / "checkpoint.npz")
    metrics.to_csv(out / "metrics.csv")
    write_spectra_csv(out / "spectra.csv", spectra)
    np.savez(out / "protected.npz", protected=protected,
             eval_indices=prep.splits["eval"], originals=prep.dataset.images[prep.splits["eval"]])
    (out / "report.json").write_text(report.to_json())
    return report


ABLATION_VARIANTS = {
    "baseline": {},
    "no_projection": {"projection": "false"},
    "no_ema": {"use_ema": "false"},
    "no_smoothness": {"smoothness": "false"},
    "no_emotion": {"emotion": "false"},
}


def run_ablation(manifest: dict, out_dir, seeds, variants=("baseline", "no_projection", "no_smoothness")) -> dict:
    """Seeded ablation batch.  Preparation artifacts are shared within a
    seed (every variant fine-tunes from the same pretrained network and
    frozen models), so differences isolate the ablation switch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: dict[str, dict[str, PSRReport]] = {}
    for seed in seeds:
        seed_manifest = dict(manifest)
        seed_manifest["seed"] = int(seed)
        prep = run_prep(seed_manifest)
        for variant in variants:
            var_manifest = dict(seed_manifest)
            for key, raw in ABLATION_VARIANTS[variant].items():
                var_manifest[key] = _coerce(key, raw)
            report = run_experiment(var_manifest, out / f"seed{seed}" / variant, prep=prep)
            results.setdefault(variant, {})[str(seed)] = report
    summary_rows = []
    for variant, by_seed in results.items():
        for seed, report in sorted(by_seed.items()):
            summary_rows.append({
                "variant": variant,
                "seed": seed,
                "psr_far_0.01": report.psr_verification.get("0.01"),
                "mean_bb_cosine": report.mean_blackbox_cosine,
                "lpips_proxy": report.quality_lpips_proxy,
                "l1": report.quality_l1,
            })
    with open(out / "summary.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["variant", "seed", "psr_far_0.01",
                                               "mean_bb_cosine", "lpips_proxy", "l1"])
        writer.writeheader()
        writer.writerows(summary_rows)
    return results


def run_theorem_harnesses(out_dir, *, etas=(1e-1, 1e-2, 1e-3), seeds=range(10),
                          convergence_steps=5000) -> dict:
    """Momentum tracking-error table and convergence envelope fit, written
    as CSV next to a small JSON summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = gradsurgery.DualQuadraticToy(np.random.default_rng(7), shared_optimum=False)
    rows = gradsurgery.momentum_error_harness(problem, etas, seeds,
                                              out_csv=out / "momentum_error.csv")
    by_eta: dict[float, list[float]] = {}
    for row in rows:
        by_eta.setdefault(row["eta"], []).append(row["terminal_error"])
    medians = {f"{eta:g}": float(np.median(v)) for eta, v in by_eta.items()}

    logs, fits = gradsurgery.run_convergence_toy(steps=convergence_steps,
                                                 out_csv=out / "convergence_log.csv")
    summary = {
        "momentum_median_terminal_error": medians,
        "convergence": {name: {"c": fit.c, "residual_slope": fit.residual_slope,
                               "passed": fit.passed} for name, fit in fits.items()},
    }
    (out / "theorems.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary
