"""Preparation-stage training of every frozen component: the surrogate and
held-out identity encoders, the expression encoder and its direction vector,
the landmark regressor, and the (untrained) perceptual net.

All learned frozen models are pretrained on an auxiliary corpus of fresh
identities from the same generator family, never on the protocol dataset
itself; every accuracy gate is then measured on the protocol dataset, which
is entirely held out.  Gate failures raise GateError instead of limping on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensorcore as tc
from ..landmarks import LandmarkRegressor
from ..nets import FrozenMlp, TrainableMlp
from ..objectives import BLACK_BOX, SURROGATE, EmotionDirection, Encoder, EncoderSet, PerceptualNet
from ..trainer import FrozenModels
from .synth import N_LANDMARKS, SyntheticDataset, render_identity_image, sample_identity, synth_dataset

ENCODER_DIM = 16
ENCODER_HIDDEN = (24, 32, 40, 48)

AUX_SEED_OFFSET = 100003
AUX_IDENTITIES = 150
AUX_IMAGES_PER_ID = 8

AUC_GATE = 0.9
R2_GATE = 0.8
PX_GATE = 1.5


class GateError(RuntimeError):
    """A frozen model failed its accuracy gate during preparation."""


@dataclass
class GateReport:
    encoder_auc: list[float]
    expression_r2: float
    landmark_px_error: float


def auxiliary_corpus(dataset: SyntheticDataset) -> SyntheticDataset:
    """Pretraining corpus with identities disjoint from the protocol set."""
    return synth_dataset(AUX_IDENTITIES, AUX_IMAGES_PER_ID,
                         seed=dataset.seed + AUX_SEED_OFFSET, image_size=dataset.image_size)


def _sample_pairs(rng, labels, idx_pool, n_pairs, genuine: bool):
    by_label: dict[int, np.ndarray] = {}
    for i in idx_pool:
        by_label.setdefault(int(labels[i]), []).append(i)
    by_label = {k: np.asarray(v) for k, v in by_label.items()}
    labels_avail = sorted(by_label)
    lhs, rhs = [], []
    while len(lhs) < n_pairs:
        if genuine:
            lab = labels_avail[rng.integers(0, len(labels_avail))]
            pool = by_label[lab]
            if len(pool) < 2:
                continue
            a, b = rng.choice(pool, size=2, replace=False)
        else:
            la, lb = rng.choice(len(labels_avail), size=2, replace=False)
            a = rng.choice(by_label[labels_avail[la]])
            b = rng.choice(by_label[labels_avail[lb]])
        lhs.append(a)
        rhs.append(b)
    return np.asarray(lhs), np.asarray(rhs)


def train_identity_encoder(corpus: SyntheticDataset, hidden: int, seed: int, *,
                           steps: int = 800, lr: float = 0.2, batch: int = 48) -> FrozenMlp:
    """Identity classification over the auxiliary corpus; the 16-dim tanh
    bottleneck before the class readout is the embedding, so the metric
    transfers to identities the encoder never saw."""
    rng = np.random.default_rng([seed, 0x1D])
    n_cls = int(corpus.labels.max()) + 1
    mlp = TrainableMlp(rng, [corpus.images.shape[1], hidden, ENCODER_DIM, n_cls], layer_prefix="enc")
    onehot = np.eye(n_cls)
    for t in range(1, steps + 1):
        idx = rng.choice(len(corpus), size=batch)
        pred = mlp.forward(corpus.images[idx])
        loss = tc.amean(tc.square(tc.sub(pred, tc.const(onehot[corpus.labels[idx]]))))
        grads = tc.backward(loss, mlp.params)
        eta = lr / np.sqrt(t)
        for layer in mlp.params.layer_ids:
            mlp.params.set_flat(layer, mlp.params.flat(layer) - eta * grads[layer])
    return mlp.freeze(embed_layer=1)


def verification_auc(encoder: FrozenMlp, dataset: SyntheticDataset, seed: int,
                     n_pairs: int = 500) -> float:
    """Rank-based AUC of genuine-vs-impostor cosine scores on pairs drawn
    from the (held-out) protocol dataset."""
    rng = np.random.default_rng([seed, 0xA0C])
    idx_pool = np.arange(len(dataset))
    g_l, g_r = _sample_pairs(rng, dataset.labels, idx_pool, n_pairs, genuine=True)
    i_l, i_r = _sample_pairs(rng, dataset.labels, idx_pool, n_pairs, genuine=False)

    def cosines(lhs, rhs):
        e1 = encoder.embed_np(dataset.images[lhs])
        e2 = encoder.embed_np(dataset.images[rhs])
        e1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = e2 / np.linalg.norm(e2, axis=1, keepdims=True)
        return (e1 * e2).sum(axis=1)

    genuine = cosines(g_l, g_r)
    impostor = cosines(i_l, i_r)
    scores = np.concatenate([genuine, impostor])
    order = scores.argsort(kind="mergesort")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    r_genuine = ranks[: len(genuine)].sum()
    n_g, n_i = len(genuine), len(impostor)
    return float((r_genuine - n_g * (n_g + 1) / 2.0) / (n_g * n_i))


def train_expression_encoder(corpus: SyntheticDataset, dataset: SyntheticDataset, seed: int, *,
                             steps: int = 3000, lr: float = 0.1, batch: int = 48) -> tuple[FrozenMlp, float]:
    """Regress the expression intensity; the penultimate tanh layer is the
    embedding the direction vector lives in.  Returns (encoder, R^2 on the
    held-out protocol dataset)."""
    rng = np.random.default_rng([seed, 0xE])
    mlp = TrainableMlp(rng, [corpus.images.shape[1], 64, ENCODER_DIM, 1], layer_prefix="vis")
    targets = corpus.expressions
    for t in range(1, steps + 1):
        idx = rng.choice(len(corpus), size=batch)
        pred = mlp.forward(corpus.images[idx])
        loss = tc.amean(tc.square(tc.sub(pred, tc.const(targets[idx][:, None]))))
        grads = tc.backward(loss, mlp.params)
        eta = lr / np.sqrt(t)
        for layer in mlp.params.layer_ids:
            mlp.params.set_flat(layer, mlp.params.flat(layer) - eta * grads[layer])
    frozen = mlp.freeze(embed_layer=1)
    pred = frozen.forward_np(dataset.images).ravel()
    truth = dataset.expressions
    ss_res = float(((pred - truth) ** 2).sum())
    ss_tot = float(((truth - truth.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot
    return frozen, r2


def train_landmark_regressor(corpus: SyntheticDataset, dataset: SyntheticDataset, seed: int, *,
                             steps: int = 1500, lr: float = 0.05, batch: int = 32) -> tuple[LandmarkRegressor, float]:
    """Residual regression from the corpus-mean landmark vector; the gate is
    the mean per-landmark pixel error on the protocol dataset."""
    rng = np.random.default_rng([seed, 0x2E6])
    coords = corpus.landmarks.reshape(len(corpus), -1)
    offset = coords.mean(axis=0)
    mlp = TrainableMlp(rng, [corpus.images.shape[1], 64, 2 * N_LANDMARKS],
                       layer_prefix="reg", output_offset=offset)
    for t in range(1, steps + 1):
        idx = rng.choice(len(corpus), size=batch)
        pred = mlp.forward(corpus.images[idx])
        loss = tc.amean(tc.square(tc.sub(pred, tc.const(coords[idx]))))
        grads = tc.backward(loss, mlp.params)
        eta = lr / np.sqrt(t)
        for layer in mlp.params.layer_ids:
            mlp.params.set_flat(layer, mlp.params.flat(layer) - eta * grads[layer])
    frozen = mlp.freeze()
    pred = frozen.forward_np(dataset.images).reshape(len(dataset), N_LANDMARKS, 2)
    err = float(np.linalg.norm(pred - dataset.landmarks, axis=2).mean())
    return LandmarkRegressor(frozen, N_LANDMARKS, trained_px_error=err), err


def emotion_direction_from(vis_encoder: FrozenMlp, seed: int, image_size: int,
                           n_holdout: int = 8) -> EmotionDirection:
    """Normalized mean embedding difference between expression-on and
    expression-off renders of fresh identities never placed in any corpus."""
    rng = np.random.default_rng([seed, 0xD12])
    on, off = [], []
    for _ in range(n_holdout):
        ident = sample_identity(rng, image_size)
        img_on, _ = render_identity_image(ident, 1.0, image_size=image_size)
        img_off, _ = render_identity_image(ident, 0.0, image_size=image_size)
        on.append(img_on)
        off.append(img_off)
    emb_on = vis_encoder.embed_np(np.asarray(on)).mean(axis=0)
    emb_off = vis_encoder.embed_np(np.asarray(off)).mean(axis=0)
    return EmotionDirection(direction=tc.unit(emb_on - emb_off))


def train_frozen_models(dataset: SyntheticDataset, seed: int, *,
                        blackbox_index: int = 3) -> tuple[FrozenModels, EncoderSet, GateReport]:
    """Train all M+1 identity encoders (surrogates plus one held-out black
    box) with different seeds and widths, the expression encoder, and the
    landmark regressor; draw the perceptual net.  Raises GateError when
    anything misses its gate."""
    if not (0 <= blackbox_index < len(ENCODER_HIDDEN)):
        raise ValueError("blackbox_index out of range")
    corpus = auxiliary_corpus(dataset)
    encoders, aucs, failures = [], [], []
    for i, hidden in enumerate(ENCODER_HIDDEN):
        net = train_identity_encoder(corpus, hidden, seed + 101 * (i + 1))
        auc = verification_auc(net, dataset, seed + 11 * (i + 1))
        aucs.append(auc)
        role = BLACK_BOX if i == blackbox_index else SURROGATE
        encoders.append(Encoder(net=net, role=role, name=f"encoder{i}_h{hidden}"))
        if auc < AUC_GATE:
            failures.append(f"encoder{i} verification AUC {auc:.3f} < {AUC_GATE}")
    vis, r2 = train_expression_encoder(corpus, dataset, seed)
    if r2 < R2_GATE:
        failures.append(f"expression R2 {r2:.3f} < {R2_GATE}")
    regressor, px = train_landmark_regressor(corpus, dataset, seed)
    if px > PX_GATE:
        failures.append(f"landmark error {px:.2f}px > {PX_GATE}px")
    if failures:
        raise GateError("; ".join(failures))
    direction = emotion_direction_from(vis, seed, dataset.image_size)
    perceptual = PerceptualNet(np.random.default_rng([seed, 0x9E2]), dataset.images.shape[1])
    all_encoders = EncoderSet(encoders)
    models = FrozenModels(
        surrogates=all_encoders.surrogates(),
        vis_encoder=vis,
        direction=direction,
        regressor=regressor,
        perceptual=perceptual,
    )
    return models, all_encoders, GateReport(encoder_auc=aucs, expression_r2=r2, landmark_px_error=px)
