"""Service topology and graph-attention layers.

A :class:`Topology` is an ordered service list plus a binary adjacency
matrix, symmetrized and with self-loops enforced at construction.  A
:class:`GatLayer` computes attention-weighted node embeddings over the
adjacency mask; forward passes accept arbitrary leading batch dimensions,
so applying a layer to every time slice of a window is a single call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError

__all__ = ["Topology", "GatLayer", "gat_forward", "gat_forward_sequence"]


@dataclass
class Topology:
    services: list[str]
    adjacency: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(set(self.services)) != len(self.services):
            raise ValueError("service names must be unique")
        a = np.asarray(self.adjacency)
        n = len(self.services)
        if a.shape != (n, n):
            raise DimensionError(
                f"adjacency shape {a.shape} does not match {n} services"
            )
        if not np.isin(a, (0, 1)).all():
            raise ValueError("adjacency entries must be 0 or 1")
        a = a.astype(np.uint8)
        a = np.maximum(a, a.T)  # undirected
        np.fill_diagonal(a, 1)  # self-loops
        self.adjacency = a

    @property
    def n(self) -> int:
        return len(self.services)

    def index(self, service: str) -> int:
        return self.services.index(service)

    def neighbors(self, service: str) -> list[str]:
        i = self.index(service)
        return [s for j, s in enumerate(self.services) if self.adjacency[i, j] and j != i]

    @classmethod
    def from_edges(cls, services: list[str], edges: list[tuple[str, str]]) -> "Topology":
        n = len(services)
        idx = {s: i for i, s in enumerate(services)}
        a = np.zeros((n, n), dtype=np.uint8)
        for src, dst in edges:
            if src not in idx or dst not in idx:
                raise ValueError(f"edge ({src}, {dst}) references unknown service")
            a[idx[src], idx[dst]] = 1
        return cls(list(services), a)

    def edges(self) -> list[tuple[str, str]]:
        """Directed edge list excluding self-loops (upper triangle only,
        since the matrix is symmetric)."""
        out = []
        for i in range(self.n):
            for j in range(i + 1, self.n):
                if self.adjacency[i, j]:
                    out.append((self.services[i], self.services[j]))
        return out

    @classmethod
    def from_json(cls, path) -> "Topology":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_edges(doc["services"], [tuple(e) for e in doc["edges"]])

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {"services": self.services, "edges": [list(e) for e in self.edges()]},
                fh,
                indent=2,
            )


class GatLayer:
    """Single graph-attention layer.

    Attention logits for edge (i, j) are
    ``LeakyReLU(a_src . W h_i + a_dst . W h_j)``; they are normalized with a
    masked softmax over each node's neighbor set (self-loop included) and the
    output embedding is the attention-weighted sum of transformed neighbors,
    passed through ``activation`` ("elu" or "identity").
    """

    def __init__(self, in_dim, out_dim, rng, num_heads=1, head_merge="concat",
                 negative_slope=0.2, activation="elu"):
        if head_merge not in ("concat", "average"):
            raise ValueError(f"unknown head_merge {head_merge!r}")
        if head_merge == "concat" and out_dim % num_heads != 0:
            raise DimensionError(
                f"out_dim {out_dim} not divisible by num_heads {num_heads}"
            )
        if activation not in ("elu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.num_heads = num_heads
        self.head_merge = head_merge
        self.negative_slope = negative_slope
        self.activation = activation
        head_dim = out_dim // num_heads if head_merge == "concat" else out_dim
        self.head_dim = head_dim
        scale = np.sqrt(2.0 / (in_dim + head_dim))
        self.weight = Tensor(
            rng.normal(0.0, scale, size=(num_heads, in_dim, head_dim)),
            requires_grad=True,
        )
        self.att_src = Tensor(
            rng.normal(0.0, scale, size=(num_heads, head_dim, 1)), requires_grad=True
        )
        self.att_dst = Tensor(
            rng.normal(0.0, scale, size=(num_heads, head_dim, 1)), requires_grad=True
        )

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.weight": self.weight,
            f"{prefix}.att_src": self.att_src,
            f"{prefix}.att_dst": self.att_dst,
        }


def gat_forward(layer: GatLayer, x: Tensor, topo: Topology) -> Tensor:
    """Apply a GAT layer to node features ``x`` of shape (..., n, in_dim)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    n = topo.n
    if x.shape[-2] != n:
        raise DimensionError(
            f"input has {x.shape[-2]} node rows but topology has {n} services"
        )
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(
            f"input feature dim {x.shape[-1]} != layer in_dim {layer.in_dim}"
        )
    mask = topo.adjacency
    head_outputs = []
    for head in range(layer.num_heads):
        w = layer.weight[head]
        h = ad.matmul(x, w)  # (..., n, head_dim)
        s_src = ad.matmul(h, layer.att_src[head])  # (..., n, 1)
        s_dst = ad.matmul(h, layer.att_dst[head])
        logits = s_src + s_dst.swapaxes(-1, -2)  # (..., n, n)
        logits = ad.leaky_relu(logits, layer.negative_slope)
        alpha = ad.masked_softmax(logits, mask)
        head_outputs.append(ad.matmul(alpha, h))
    if layer.num_heads == 1:
        out = head_outputs[0]
    elif layer.head_merge == "concat":
        out = ad.concatenate(head_outputs, axis=-1)
    else:
        out = head_outputs[0]
        for ho in head_outputs[1:]:
            out = out + ho
        out = out / layer.num_heads
    if layer.activation == "elu":
        out = ad.elu(out)
    return out


def gat_forward_sequence(layer: GatLayer, x: Tensor, topo: Topology) -> Tensor:
    """Apply ``layer`` independently to each time slice of (t, n, k) input
    with shared weights.  Forward batching makes this a single call."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"expected (t, n, k) input, got shape {x.shape}")
    return gat_forward(layer, x, topo)
