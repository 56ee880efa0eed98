"""Synthetic face generator: deterministic, differentiable-in-landmarks
renders of Gaussian-bump faces on a smooth base head.

An identity is a jittered landmark template plus a per-region intensity
vector; one scalar expression parameter displaces brow and mouth landmarks
along fixed axes (brow raise + mouth open).  Ground-truth landmarks are
exactly the bump centers used for rendering.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_LANDMARKS = 17

# index layout
JAW = (0, 1, 2, 3, 4)
LEFT_BROW = (5, 6)
RIGHT_BROW = (7, 8)
EYES = (9, 10)
NOSE = (11,)
MOUTH = (12, 13, 14, 15)
FOREHEAD = (16,)

# smoothness loss is applied to the expression-bearing subset
EXPRESSION_SELECTED = LEFT_BROW + RIGHT_BROW + EYES + MOUTH

_REGIONS = (JAW, LEFT_BROW + RIGHT_BROW, EYES, NOSE, MOUTH, FOREHEAD)

# canonical template on a 32x32 canvas (x right, y down)
BASE_TEMPLATE = np.array([
    [8.0, 26.0], [11.5, 28.2], [16.0, 29.0], [20.5, 28.2], [24.0, 26.0],   # jaw
    [13.3, 10.8], [10.2, 11.3],                                            # left brow in/out
    [18.7, 10.8], [21.8, 11.3],                                            # right brow in/out
    [12.0, 14.0], [20.0, 14.0],                                            # eyes
    [16.0, 18.5],                                                          # nose
    [12.8, 22.8], [19.2, 22.8], [16.0, 21.8], [16.0, 23.8],                # mouth l/r/top/bottom
    [16.0, 6.5],                                                           # forehead
])

# displacement per unit expression intensity
EXPRESSION_AXES = np.zeros((N_LANDMARKS, 2))
EXPRESSION_AXES[5] = (0.0, -3.5)
EXPRESSION_AXES[6] = (0.0, -2.6)
EXPRESSION_AXES[7] = (0.0, -3.5)
EXPRESSION_AXES[8] = (0.0, -2.6)
EXPRESSION_AXES[12] = (-1.1, 0.7)
EXPRESSION_AXES[13] = (1.1, 0.7)
EXPRESSION_AXES[14] = (0.0, -0.9)
EXPRESSION_AXES[15] = (0.0, 4.4)

# per-landmark base bump amplitudes (identity-independent)
BASE_AMPLITUDE = np.array([0.5] * 5 + [0.9] * 4 + [1.0] * 2 + [0.7] + [0.9] * 4 + [0.4])

BUMP_SIGMA = 1.6


@dataclass(frozen=True)
class IdentityParams:
    template: np.ndarray           # (17, 2) jittered landmark template
    region_intensity: np.ndarray   # (6,) multiplier per region


@dataclass
class SyntheticDataset:
    images: np.ndarray             # (N, size*size)
    landmarks: np.ndarray          # (N, 17, 2)
    labels: np.ndarray             # (N,) identity index
    expressions: np.ndarray        # (N,)
    identities: list[IdentityParams]
    image_size: int
    seed: int
    images_per_identity: int

    @property
    def n_identities(self) -> int:
        return len(self.identities)

    def __len__(self):
        return len(self.images)


def _amplitudes(identity: IdentityParams) -> np.ndarray:
    amps = BASE_AMPLITUDE.copy()
    for region, mult in zip(_REGIONS, identity.region_intensity):
        for k in region:
            amps[k] *= mult
    return amps


def expression_landmarks(identity: IdentityParams, e: float,
                         jitter: np.ndarray | None = None, image_size: int = 32) -> np.ndarray:
    pts = identity.template + float(e) * EXPRESSION_AXES * (image_size / 32.0)
    if jitter is not None:
        pts = pts + jitter
    return np.clip(pts, 1.5, image_size - 2.5)


def render_face(landmarks: np.ndarray, amplitudes: np.ndarray, image_size: int = 32) -> np.ndarray:
    """Sum of isotropic Gaussian bumps over a smooth base head; deterministic
    and smooth in the landmark coordinates."""
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    cx, cy = image_size / 2.0, image_size * 0.53
    base = 0.3 * np.exp(-(((xs - cx) / (0.24 * image_size)) ** 2
                          + ((ys - cy) / (0.30 * image_size)) ** 2) / 2.0)
    img = base
    s2 = 2.0 * (BUMP_SIGMA * image_size / 32.0) ** 2
    for (px, py), a in zip(landmarks, amplitudes):
        img = img + a * np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / s2)
    return img.ravel()


def render_identity_image(identity: IdentityParams, e: float,
                          jitter: np.ndarray | None = None,
                          image_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    pts = expression_landmarks(identity, e, jitter, image_size)
    return render_face(pts, _amplitudes(identity), image_size), pts


def sample_identity(rng: np.random.Generator, image_size: int = 32) -> IdentityParams:
    template = BASE_TEMPLATE * (image_size / 32.0) + rng.normal(0.0, 0.6, size=(N_LANDMARKS, 2))
    region = rng.uniform(0.65, 1.3, size=len(_REGIONS))
    return IdentityParams(template=template, region_intensity=region)


def synth_dataset(n_identities: int, images_per_id: int, seed: int,
                  image_size: int = 32) -> SyntheticDataset:
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    rng = np.random.default_rng([seed, 0xFACE])
    identities = [sample_identity(rng, image_size) for _ in range(n_identities)]
    images, marks, labels, exprs = [], [], [], []
    for ident_idx, identity in enumerate(identities):
        for _ in range(images_per_id):
            e = float(rng.uniform(0.0, 1.0))
            jitter = rng.normal(0.0, 0.25, size=(N_LANDMARKS, 2))
            img, pts = render_identity_image(identity, e, jitter, image_size)
            images.append(img)
            marks.append(pts)
            labels.append(ident_idx)
            exprs.append(e)
    return SyntheticDataset(
        images=np.asarray(images),
        landmarks=np.asarray(marks),
        labels=np.asarray(labels, dtype=np.int64),
        expressions=np.asarray(exprs),
        identities=identities,
        image_size=image_size,
        seed=seed,
        images_per_identity=images_per_id,
    )
