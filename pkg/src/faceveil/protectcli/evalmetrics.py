"""Evaluation protocol: FAR-calibrated verification thresholds, protection
success rates, rank-N identification, and the azimuthal frequency profile.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..nets import FrozenMlp


class InsufficientPairsError(ValueError):
    pass


def embed_unit(encoder: FrozenMlp, images: np.ndarray) -> np.ndarray:
    emb = encoder.embed_np(np.atleast_2d(images))
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def cosine_to_reference(encoder: FrozenMlp, images: np.ndarray, reference: np.ndarray) -> np.ndarray:
    z = embed_unit(encoder, images)
    z_ref = embed_unit(encoder, reference)[0]
    return z @ z_ref


def pair_cosines(encoder: FrozenMlp, lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return (embed_unit(encoder, lhs) * embed_unit(encoder, rhs)).sum(axis=1)


def threshold_from_scores(scores: np.ndarray, far: float) -> float:
    """Smallest observed score such that the fraction of impostor scores
    strictly above it does not exceed ``far``; at far == 0 the maximum plus
    a hair, so nothing is accepted."""
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    n = len(scores)
    if n == 0:
        raise InsufficientPairsError("no impostor scores")
    if far <= 0.0:
        return float(scores[-1]) + 1e-12
    if far < 1.0 and n < int(np.ceil(1.0 / far)):
        raise InsufficientPairsError(f"{n} impostor pairs cannot resolve FAR={far}")
    frac_above = (n - np.searchsorted(scores, scores, side="right")) / n
    ok = np.nonzero(frac_above <= far)[0]
    return float(scores[ok[0]])


def far_threshold(encoder: FrozenMlp, pairs: tuple[np.ndarray, np.ndarray], far: float) -> float:
    """Calibrate the verification threshold on impostor pairs scored by the
    given encoder."""
    lhs, rhs = pairs
    return threshold_from_scores(pair_cosines(encoder, lhs, rhs), far)


def psr_verification(protected: np.ndarray, x_t: np.ndarray, encoder: FrozenMlp,
                     threshold: float) -> float:
    """Fraction of protected images the encoder matches to the target above
    the calibrated threshold."""
    protected = np.atleast_2d(protected)
    if len(protected) == 0:
        raise ValueError("empty protected set")
    scores = cosine_to_reference(encoder, protected, x_t)
    return float((scores > threshold).mean())


@dataclass
class Gallery:
    images: np.ndarray
    labels: np.ndarray
    target_label: int


def psr_rank_n(protected: np.ndarray, gallery: Gallery, encoder: FrozenMlp, n: int) -> float:
    """Fraction of probes whose top-n gallery matches include the target
    identity."""
    protected = np.atleast_2d(protected)
    if n > len(gallery.images):
        raise ValueError(f"rank {n} exceeds gallery size {len(gallery.images)}")
    probe_z = embed_unit(encoder, protected)
    gal_z = embed_unit(encoder, gallery.images)
    scores = probe_z @ gal_z.T
    hits = 0
    for row in scores:
        top = np.argsort(-row, kind="mergesort")[:n]
        if np.any(gallery.labels[top] == gallery.target_label):
            hits += 1
    return hits / len(protected)


# ---------------------------------------------------------------------------
# azimuthal frequency profile


def _radial_bins(size: int) -> np.ndarray:
    half = size // 2
    ys, xs = np.mgrid[0:size, 0:size]
    return np.round(np.hypot(ys - half, xs - half)).astype(int)


def azimuthal_spectrum_full(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean fft-shifted DFT magnitude per integer-radius annulus, over every
    annulus out to the corners, plus the annulus pixel counts."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"azimuthal spectrum needs a square image, got {img.shape}")
    mag = np.abs(np.fft.fftshift(np.fft.fft2(img)))
    radii = _radial_bins(img.shape[0])
    n_bins = int(radii.max()) + 1
    counts = np.bincount(radii.ravel(), minlength=n_bins)
    sums = np.bincount(radii.ravel(), weights=mag.ravel(), minlength=n_bins)
    return sums / np.maximum(counts, 1), counts


def azimuthal_spectrum(image: np.ndarray) -> np.ndarray:
    """Radial profile truncated to the non-aliased radii (length size // 2)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"azimuthal spectrum needs a square image, got {img.shape}")
    profile, _ = azimuthal_spectrum_full(img)
    return profile[: img.shape[0] // 2]


def high_freq_fraction(image: np.ndarray, cut_radius: float) -> float:
    """Share of total spectral magnitude sitting above the cut radius."""
    profile, counts = azimuthal_spectrum_full(image)
    mass = profile * counts
    total = float(mass.sum())
    if total <= 0.0:
        return 0.0
    radii = np.arange(len(profile))
    return float(mass[radii > cut_radius].sum()) / total


# ---------------------------------------------------------------------------
# report


@dataclass
class PSRReport:
    config_hash: str
    far_thresholds: dict[str, float]
    psr_verification: dict[str, float]
    psr_rank: dict[str, float]
    mean_blackbox_cosine: float
    clean_mean_blackbox_cosine: float
    clean_psr: dict[str, float]
    quality_l1: float
    quality_lpips_proxy: float
    skipped_emotion_terms: int
    spectrum_edit_high_freq: float
    spectrum_control_high_freq: float
    ablation: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for name, table in (("psr_verification", self.psr_verification),
                            ("psr_rank", self.psr_rank), ("clean_psr", self.clean_psr)):
            for key, v in table.items():
                if not (0.0 <= v <= 1.0):
                    raise ValueError(f"{name}[{key}]={v} outside [0, 1]")
        fars = sorted(self.far_thresholds, key=float)
        thr = [self.far_thresholds[k] for k in fars]
        if any(thr[i] < thr[i + 1] for i in range(len(thr) - 1)):
            raise ValueError("thresholds must be non-increasing in FAR")

    def to_json(self) -> str:
        import json

        payload = {
            "config_hash": self.config_hash,
            "far_thresholds": self.far_thresholds,
            "psr_verification": self.psr_verification,
            "psr_rank": self.psr_rank,
            "mean_blackbox_cosine": self.mean_blackbox_cosine,
            "clean_mean_blackbox_cosine": self.clean_mean_blackbox_cosine,
            "clean_psr": self.clean_psr,
            "quality": {"l1": self.quality_l1, "lpips_proxy": self.quality_lpips_proxy},
            "skipped": {"emotion_terms": self.skipped_emotion_terms},
            "spectrum": {
                "edit_high_freq_fraction": self.spectrum_edit_high_freq,
                "control_high_freq_fraction": self.spectrum_control_high_freq,
            },
            "ablation": self.ablation,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "PSRReport":
        import json

        d = json.loads(text)
        return PSRReport(
            config_hash=d["config_hash"],
            far_thresholds=d["far_thresholds"],
            psr_verification=d["psr_verification"],
            psr_rank=d["psr_rank"],
            mean_blackbox_cosine=d["mean_blackbox_cosine"],
            clean_mean_blackbox_cosine=d["clean_mean_blackbox_cosine"],
            clean_psr=d["clean_psr"],
            quality_l1=d["quality"]["l1"],
            quality_lpips_proxy=d["quality"]["lpips_proxy"],
            skipped_emotion_terms=d["skipped"]["emotion_terms"],
            spectrum_edit_high_freq=d["spectrum"]["edit_high_freq_fraction"],
            spectrum_control_high_freq=d["spectrum"]["control_high_freq_fraction"],
            ablation=d.get("ablation", {}),
        )
