"""Small dense networks shared across the pipeline.

TrainableMlp owns its parameters in a ParamStore (tanh hidden layers, linear
output); FrozenMlp is an immutable numpy snapshot whose weights enter tapes
as constants, so gradients flow through it but never into it.
"""
from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .tensorcore import Node


class TrainableMlp:
    def __init__(self, rng: np.random.Generator, sizes: list[int], layer_prefix: str = "layer",
                 output_offset: np.ndarray | None = None):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.params = tc.ParamStore()
        self.layer_ids = []
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            layer = f"{layer_prefix}{i + 1}"
            self.params.add(layer, "w", rng.normal(0.0, fan_in ** -0.5, size=(fan_in, fan_out)))
            self.params.add(layer, "b", np.zeros(fan_out))
            self.layer_ids.append(layer)
        self.output_offset = None if output_offset is None else np.asarray(output_offset, dtype=np.float64).copy()

    def forward(self, x) -> Node:
        h = tc.as_node(x)
        leaves = self.params.leaves()
        last = len(self.layer_ids) - 1
        for i, layer in enumerate(self.layer_ids):
            h = tc.add(tc.matmul(h, leaves[layer]["w"]), leaves[layer]["b"])
            if i < last:
                h = tc.tanh(h)
        if self.output_offset is not None:
            h = tc.add(h, tc.const(self.output_offset))
        return h

    def freeze(self, embed_layer: int | None = None) -> "FrozenMlp":
        weights = [(self.params.get(l, "w").copy(), self.params.get(l, "b").copy()) for l in self.layer_ids]
        return FrozenMlp(weights, output_offset=self.output_offset, embed_layer=embed_layer)


class FrozenMlp:
    """Frozen tanh MLP.  ``embed_layer`` selects a hidden activation (0-based)
    as the embedding; None means the final linear output is the embedding."""

    def __init__(self, weights: list[tuple[np.ndarray, np.ndarray]],
                 output_offset: np.ndarray | None = None, embed_layer: int | None = None):
        self.weights = [(np.asarray(w, dtype=np.float64).copy(), np.asarray(b, dtype=np.float64).copy())
                        for w, b in weights]
        self.output_offset = None if output_offset is None else np.asarray(output_offset, dtype=np.float64).copy()
        self.embed_layer = embed_layer

    @property
    def out_dim(self) -> int:
        if self.embed_layer is not None:
            return self.weights[self.embed_layer][0].shape[1]
        return self.weights[-1][0].shape[1]

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(self.weights):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
        if self.output_offset is not None:
            h = h + self.output_offset
        return h

    def hidden_np(self, x: np.ndarray) -> list[np.ndarray]:
        h = np.asarray(x, dtype=np.float64)
        acts = []
        for w, b in self.weights[:-1]:
            h = np.tanh(h @ w + b)
            acts.append(h)
        return acts

    def embed_np(self, x: np.ndarray) -> np.ndarray:
        if self.embed_layer is None:
            return self.forward_np(x)
        return self.hidden_np(x)[self.embed_layer]

    def forward_node(self, x: Node) -> Node:
        h = tc.as_node(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(self.weights):
            h = tc.add(tc.matmul(h, tc.const(w)), tc.const(b))
            if i < last:
                h = tc.tanh(h)
        if self.output_offset is not None:
            h = tc.add(h, tc.const(self.output_offset))
        return h

    def hidden_node(self, x: Node) -> list[Node]:
        h = tc.as_node(x)
        acts = []
        for w, b in self.weights[:-1]:
            h = tc.tanh(tc.add(tc.matmul(h, tc.const(w)), tc.const(b)))
            acts.append(h)
        return acts

    def embed_node(self, x: Node) -> Node:
        if self.embed_layer is None:
            return self.forward_node(x)
        return self.hidden_node(x)[self.embed_layer]

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.weights):
            out[f"w{i}"] = w.copy()
            out[f"b{i}"] = b.copy()
        if self.output_offset is not None:
            out["offset"] = self.output_offset.copy()
        return out
