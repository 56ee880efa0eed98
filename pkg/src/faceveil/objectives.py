"""Loss terms applied in data space: identity alignment across a surrogate
encoder ensemble, directional expression shift in a frozen vision-embedding
space, pixel l1, a frozen-feature perceptual proxy, and their weighted sum.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .nets import FrozenMlp
from .tensorcore import DegenerateVectorError, Node

SURROGATE = "surrogate"
BLACK_BOX = "black-box"


@dataclass(frozen=True)
class Encoder:
    """An identity-embedding network with its evaluation role."""

    net: FrozenMlp
    role: str
    name: str

    def __post_init__(self):
        if self.role not in (SURROGATE, BLACK_BOX):
            raise ValueError(f"unknown encoder role '{self.role}'")


class EncoderSet:
    def __init__(self, encoders: list[Encoder]):
        if not encoders:
            raise ValueError("EncoderSet needs at least one encoder")
        dims = {e.net.out_dim for e in encoders if e.role == SURROGATE}
        if len(dims) > 1:
            raise ValueError("surrogate encoders must share an embedding dimension")
        self.encoders = list(encoders)

    def __len__(self):
        return len(self.encoders)

    def surrogates(self) -> "EncoderSet":
        return EncoderSet([e for e in self.encoders if e.role == SURROGATE])

    def blackbox(self) -> Encoder:
        held_out = [e for e in self.encoders if e.role == BLACK_BOX]
        if len(held_out) != 1:
            raise ValueError(f"expected exactly one black-box encoder, found {len(held_out)}")
        return held_out[0]

    def all_surrogate(self) -> bool:
        return all(e.role == SURROGATE for e in self.encoders)


@dataclass(frozen=True)
class EmotionDirection:
    """Unit direction in the frozen vision-embedding space along which the
    expression edit is pushed."""

    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if d.ndim != 1:
            raise ValueError("direction must be a flat vector")
        if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
            raise ValueError("direction must be unit norm")
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class LossWeights:
    gamma_a: float = 0.5
    gamma_e: float = 0.08
    gamma_lpips: float = 0.1
    gamma_l1: float = 0.5
    gamma_ls: float = 4.0
    gamma_d: float = 0.05

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if v < 0.0:
                raise ValueError(f"negative loss weight {name}={v}")

    def as_dict(self) -> dict[str, float]:
        return {
            "gamma_a": self.gamma_a,
            "gamma_e": self.gamma_e,
            "gamma_lpips": self.gamma_lpips,
            "gamma_l1": self.gamma_l1,
            "gamma_ls": self.gamma_ls,
            "gamma_d": self.gamma_d,
        }


class PerceptualNet:
    """Frozen randomly initialized two-hidden-layer feature extractor backing
    the perceptual-distance proxy.  Fixed by the experiment seed, never
    trained."""

    def __init__(self, rng: np.random.Generator, image_dim: int, hidden: tuple[int, int] = (32, 16)):
        sizes = [image_dim, hidden[0], hidden[1], 1]
        weights = []
        for i in range(len(sizes) - 1):
            weights.append((rng.normal(0.0, sizes[i] ** -0.5, size=(sizes[i], sizes[i + 1])), np.zeros(sizes[i + 1])))
        self.net = FrozenMlp(weights)

    def hidden_node(self, x: Node) -> list[Node]:
        return self.net.hidden_node(x)

    def hidden_np(self, x: np.ndarray) -> list[np.ndarray]:
        return self.net.hidden_np(x)


def _as_batch(x) -> Node:
    node = tc.as_node(x)
    if node.value.ndim == 1:
        raise tc.ShapeError("losses expect (n, dim) batches; got a flat vector")
    return node


def angular_loss(x_p, x_t: np.ndarray, surrogates: EncoderSet) -> Node:
    """Mean over encoders of (1 - cosine) between protected and target
    embeddings, averaged over the batch.  Range [0, 2]."""
    x_p = _as_batch(x_p)
    n = x_p.value.shape[0]
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    total = None
    for enc in surrogates.encoders:
        z_p = tc.normalize(enc.net.embed_node(x_p))
        z_t = tc.unit(enc.net.embed_np(x_t)[0])
        cos_rows = tc.rowsum(tc.mul(z_p, tc.const(np.tile(z_t, (n, 1)))))
        term = tc.add(tc.const(1.0), tc.scale(tc.amean(cos_rows), -1.0))
        total = term if total is None else tc.add(total, term)
    return tc.scale(total, 1.0 / len(surrogates.encoders))


def emotion_loss(x_p, x_o: np.ndarray, vis_encoder: FrozenMlp,
                 direction: EmotionDirection) -> tuple[Node, int]:
    """Directional loss 1 - <direction, normalized embedding shift>, averaged
    over the batch rows whose shift is non-degenerate.

    Returns the loss node and the number of skipped (degenerate) rows.
    Raises DegenerateVectorError when every row is degenerate, so the caller
    can drop the term for this step.
    """
    x_p = _as_batch(x_p)
    x_o = np.atleast_2d(np.asarray(x_o, dtype=np.float64))
    emb_o = vis_encoder.embed_np(x_o)
    delta = tc.sub(vis_encoder.embed_node(x_p), tc.const(emb_o))
    norms = np.linalg.norm(delta.value, axis=1)
    good = np.nonzero(norms >= tc.NORM_EPS)[0]
    skipped = delta.value.shape[0] - len(good)
    if len(good) == 0:
        raise DegenerateVectorError("emotion_loss: embedding shift degenerate for every sample")
    if skipped:
        sel = np.zeros((len(good), delta.value.shape[0]))
        sel[np.arange(len(good)), good] = 1.0
        delta = tc.matmul(tc.const(sel), delta)
    u = tc.normalize(delta)
    cos_rows = tc.rowsum(tc.mul(u, tc.const(np.tile(direction.direction, (len(good), 1)))))
    loss = tc.add(tc.const(1.0), tc.scale(tc.amean(cos_rows), -1.0))
    return loss, skipped


def l1_loss(x_p, x_o) -> Node:
    x_p = tc.as_node(x_p)
    x_o = tc.as_node(x_o)
    if x_p.value.shape != x_o.value.shape:
        raise tc.ShapeError(f"l1_loss: shapes {x_p.value.shape} != {x_o.value.shape}")
    return tc.amean(tc.absval(tc.sub(x_p, x_o)))


def lpips_proxy_loss(x_p, x_o: np.ndarray, pnet: PerceptualNet) -> Node:
    """Feature-space distance proxy: for each of the two frozen hidden
    layers, the batch-mean squared distance between row-unit-normalized
    activations; the two layer terms are summed."""
    x_p = _as_batch(x_p)
    x_o = np.atleast_2d(np.asarray(x_o, dtype=np.float64))
    if x_p.value.shape[0] != x_o.shape[0]:
        raise tc.ShapeError("lpips_proxy_loss: batch sizes differ")
    acts_p = pnet.hidden_node(x_p)
    acts_o = pnet.hidden_np(x_o)
    total = None
    for a_p, a_o in zip(acts_p, acts_o):
        n_p = tc.normalize(a_p)
        n_o = a_o / np.linalg.norm(a_o, axis=1, keepdims=True)
        term = tc.amean(tc.rowsum(tc.square(tc.sub(n_p, tc.const(n_o)))))
        total = term if total is None else tc.add(total, term)
    return total


@dataclass
class LossReport:
    """Unweighted values of every contributing term."""

    terms: dict[str, float] = field(default_factory=dict)

    def value(self, name: str) -> float:
        return self.terms[name]


_TERM_WEIGHTS = {
    "angular": "gamma_a",
    "emotion": "gamma_e",
    "lpips": "gamma_lpips",
    "l1": "gamma_l1",
    "smoothness": "gamma_ls",
    "score_matching": "gamma_d",
}


def combined_loss(terms: dict[str, Node | None], weights: LossWeights) -> tuple[Node, LossReport]:
    """Weighted sum of the supplied loss nodes.  Terms set to None (for
    example the alternated score-matching term, or a degenerate emotion
    term) contribute nothing but are reported as absent."""
    unknown = set(terms) - set(_TERM_WEIGHTS)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    report = LossReport()
    total = tc.const(0.0)
    wdict = weights.as_dict()
    for name, node in terms.items():
        if node is None:
            report.terms[name] = float("nan")
            continue
        if node.value.size != 1 or not np.isfinite(node.value):
            raise tc.NonFiniteError(f"loss term '{name}' is not a finite scalar")
        report.terms[name] = float(node.value)
        total = tc.add(total, tc.scale(node, wdict[_TERM_WEIGHTS[name]]))
    return total, report
