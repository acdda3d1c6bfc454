"""First-order graph attention and two-level shortest-path attention layers.

Projection matrices are stored input-major (F x F'), so ``h' = h @ W``.
Attention vectors have 2F' rows and score ``<a, q || k>``. Heads are the
outer loop: each head runs both aggregation levels in its own F'-wide space
and the head outputs are merged afterwards (concat or mean).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import SegmentIndex, Tensor
from .graph import SparseGraph, neighbor_segments
from .paths import Path, PathBucket, PathSet

LEAKY_SLOPE = 0.2


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def _activation(name: str) -> Callable[[Tensor], Tensor]:
    if name == "elu":
        return ad.elu
    if name in ("identity", "none"):
        return lambda t: t
    raise ValueError(f"unknown activation {name!r}")


def merge_heads(outputs: list[Tensor], mode: str) -> Tensor:
    if mode == "concat":
        return outputs[0] if len(outputs) == 1 else ad.concat_cols(outputs)
    if mode == "mean":
        total = outputs[0]
        for o in outputs[1:]:
            total = ad.add(total, o)
        return ad.scale(total, 1.0 / len(outputs)) if len(outputs) > 1 else total
    raise ValueError(f"unknown merge mode {mode!r}")


def project(x: Tensor, weights: list[Tensor]) -> list[Tensor]:
    """Per-head ``x @ W_k`` computed as one product against the stacked weights."""
    if len(weights) == 1:
        return [ad.matmul(x, weights[0])]
    f = weights[0].cols
    h = ad.matmul(x, ad.concat_cols(weights))
    return [ad.slice_cols(h, k * f, (k + 1) * f) for k in range(len(weights))]


@dataclass
class DropoutState:
    """Training flag, keep probability and RNG shared by one forward pass."""

    training: bool = False
    keep_prob: float = 1.0
    rng: np.random.Generator | None = None

    def __call__(self, t: Tensor) -> Tensor:
        return ad.dropout(t, self.keep_prob, self.training, self.rng)


EVAL = DropoutState()


# ---------------------------------------------------------------------------
# Shared attention primitive
# ---------------------------------------------------------------------------


def attention_scores(queries: Tensor, keys: Tensor, theta: Tensor, groups: SegmentIndex) -> Tensor:
    """softmax over each group of leaky_relu(<theta, q || k>). Rows of q/k are elements."""
    if queries.shape != keys.shape:
        raise ad.DimensionError(f"query {queries.shape} vs key {keys.shape}")
    if theta.shape != (2 * queries.cols, 1):
        raise ad.DimensionError(f"attention vector {theta.shape} for width {queries.cols}")
    logits = ad.leaky_relu(ad.matmul(ad.concat_cols([queries, keys]), theta), LEAKY_SLOPE)
    return ad.segment_softmax(logits, groups)


# ---------------------------------------------------------------------------
# GAT layer
# ---------------------------------------------------------------------------


@dataclass
class GatLayerParams:
    weights: list[Tensor]
    attn: list[Tensor]
    merge: str = "concat"
    activation: str = "elu"

    @property
    def heads(self) -> int:
        return len(self.weights)

    @property
    def out_per_head(self) -> int:
        return self.weights[0].cols

    @property
    def out_width(self) -> int:
        return self.heads * self.out_per_head if self.merge == "concat" else self.out_per_head

    def tensors(self) -> list[Tensor]:
        return [*self.weights, *self.attn]

    @classmethod
    def init(cls, rng, in_dim: int, out_dim: int, heads: int, merge="concat", activation="elu",
             dtype=np.float64) -> "GatLayerParams":
        if min(in_dim, out_dim, heads) < 1:
            raise ValueError("layer widths and head count must be positive")
        ws = [glorot(rng, in_dim, out_dim, (in_dim, out_dim), dtype) for _ in range(heads)]
        at = [glorot(rng, 2 * out_dim, 1, (2 * out_dim, 1), dtype) for _ in range(heads)]
        return cls(ws, at, merge, activation)


def gat_layer_forward(features: Tensor, graph: SparseGraph, params: GatLayerParams,
                      drop: DropoutState = EVAL):
    """Returns (output, pairs, per-head attention columns aligned to ``pairs``)."""
    pairs, seg = neighbor_segments(graph, include_self=True)
    x = drop(features)
    outs, attention = [], []
    for h, a in zip(project(x, params.weights), params.attn):
        neigh = ad.gather_rows(h, pairs[:, 1])
        alpha = attention_scores(ad.gather_rows(h, pairs[:, 0]), neigh, a, seg)
        attention.append(alpha.value[:, 0].copy())
        agg = ad.segment_sum(ad.mul(neigh, drop(alpha)), seg)
        outs.append(agg)
    act = _activation(params.activation)
    return act(merge_heads(outs, params.merge)), pairs, attention


# ---------------------------------------------------------------------------
# Path attention
# ---------------------------------------------------------------------------


def path_feature(path: Path, projected: np.ndarray) -> np.ndarray:
    """Mean of the projected features along the stored sequence; the self-path maps to its center."""
    nodes = list(path.sequence) or [path.center]
    return np.asarray(projected)[nodes].mean(axis=0)


@dataclass
class BucketIndex:
    """Precomputed gather/segment indices for one path length."""

    length: int
    centers: np.ndarray          # element -> center node
    flat_nodes: np.ndarray       # sequence nodes, flattened
    flat_owner: SegmentIndex     # flat node -> element
    groups: SegmentIndex         # element -> compact center slot
    present: np.ndarray          # compact slot -> node id

    @classmethod
    def build(cls, bucket: PathBucket, num_nodes: int, with_self: bool) -> "BucketIndex":
        centers, seqs = bucket.centers, bucket.sequences
        if with_self:
            if bucket.length != 2:
                raise ValueError("the self-path joins the length-2 bucket only")
            nodes = np.arange(num_nodes)
            centers = np.concatenate([centers, nodes])
            targets = np.concatenate([bucket.targets, nodes])
            # the self-path has an empty sequence; its feature is the center's own
            seqs = np.concatenate([seqs, nodes[:, None]])
            order = np.lexsort((targets, centers))
            centers, seqs = centers[order], seqs[order]
        width = seqs.shape[1]
        owner = SegmentIndex(np.repeat(np.arange(len(centers)), width), len(centers))
        present, slot = np.unique(centers, return_inverse=True)
        return cls(bucket.length, centers, seqs.ravel(), owner, SegmentIndex(slot, present.size), present)


def path_features(projected: Tensor, idx: BucketIndex) -> Tensor:
    return ad.segment_mean(ad.gather_rows(projected, idx.flat_nodes), idx.flat_owner)


def first_level_aggregate(projected: Tensor, idx: BucketIndex, theta: Tensor,
                          drop: DropoutState = EVAL):
    """Attention-weighted sum of path features per center for one length.

    Returns (aggregate with one row per ``idx.present`` node, attention column).
    """
    phi = path_features(projected, idx)
    query = ad.gather_rows(projected, idx.centers)
    alpha = attention_scores(query, phi, theta, idx.groups)
    return ad.segment_sum(ad.mul(phi, drop(alpha)), idx.groups), alpha


def second_level_aggregate(projected: Tensor, levels: list[tuple[np.ndarray, Tensor]], theta: Tensor,
                           drop: DropoutState = EVAL, fixed: bool = False):
    """Attend over the per-length aggregates of each node.

    ``levels`` holds (node ids, aggregate rows) per available length; every
    node must appear in at least one. Returns (N x F' result, beta column).
    ``fixed`` replaces the learned beta with a plain mean over lengths.
    """
    n = projected.rows
    nodes = np.concatenate([ids for ids, _ in levels])
    keys = ad.concat_rows([agg for _, agg in levels]) if len(levels) > 1 else levels[0][1]
    seg = SegmentIndex(nodes, n)
    if np.any(seg.counts == 0):
        raise ad.DegenerateGroupError("a node has no path aggregate at any length")
    if len(levels) == 1 and np.array_equal(nodes, np.arange(n)):
        return keys, None
    if fixed:
        return ad.segment_mean(keys, seg), None
    beta = attention_scores(ad.gather_rows(projected, nodes), keys, theta, seg)
    return ad.segment_sum(ad.mul(keys, drop(beta)), seg), beta


@dataclass
class SpaganLayerParams:
    weights: list[Tensor]
    attn_alpha: dict[tuple[int, int], Tensor]   # (head, c) -> 2F' x 1
    attn_beta: list[Tensor]
    max_len: int
    merge: str = "concat"
    activation: str = "elu"
    fix_beta: bool = False

    @property
    def heads(self) -> int:
        return len(self.weights)

    @property
    def out_per_head(self) -> int:
        return self.weights[0].cols

    @property
    def out_width(self) -> int:
        return self.heads * self.out_per_head if self.merge == "concat" else self.out_per_head

    def tensors(self) -> list[Tensor]:
        alpha = [self.attn_alpha[k] for k in sorted(self.attn_alpha)]
        return [*self.weights, *alpha, *self.attn_beta]

    @classmethod
    def init(cls, rng, in_dim: int, out_dim: int, heads: int, max_len: int, merge="concat",
             activation="elu", fix_beta=False, dtype=np.float64) -> "SpaganLayerParams":
        if min(in_dim, out_dim, heads) < 1:
            raise ValueError("layer widths and head count must be positive")
        if max_len < 2:
            raise ValueError("max path length must be >= 2")
        ws = [glorot(rng, in_dim, out_dim, (in_dim, out_dim), dtype) for _ in range(heads)]
        alpha = {(k, c): glorot(rng, 2 * out_dim, 1, (2 * out_dim, 1), dtype)
                 for k in range(heads) for c in range(2, max_len + 1)}
        beta = [glorot(rng, 2 * out_dim, 1, (2 * out_dim, 1), dtype) for _ in range(heads)]
        return cls(ws, alpha, beta, max_len, merge, activation, fix_beta)

    @classmethod
    def from_gat(cls, gat: GatLayerParams, rng=None) -> "SpaganLayerParams":
        """Share W and a with a GAT layer; a_beta is unused at max length 2."""
        rng = np.random.default_rng(rng)
        dtype = gat.weights[0].dtype
        f = gat.out_per_head
        beta = [glorot(rng, 2 * f, 1, (2 * f, 1), dtype) for _ in gat.weights]
        alpha = {(k, 2): a for k, a in enumerate(gat.attn)}
        return cls(list(gat.weights), alpha, beta, 2, gat.merge, gat.activation)


@dataclass
class LayerPaths:
    """Index structures for one layer, derived from a PathSet."""

    pathset: PathSet
    buckets: list[BucketIndex] = field(default_factory=list)

    @classmethod
    def build(cls, pathset: PathSet) -> "LayerPaths":
        idx = [BucketIndex.build(pathset.bucket(c), pathset.num_nodes, with_self=(c == 2))
               for c in pathset.lengths()]
        return cls(pathset, [b for b in idx if len(b.centers)])


def spagan_layer_forward(features: Tensor, paths: LayerPaths | PathSet, params: SpaganLayerParams,
                         drop: DropoutState = EVAL):
    """Returns (output, per-head c=2 attention columns, per-head beta columns).

    The c=2 attention is aligned with ``paths.buckets[0]`` elements.
    """
    if isinstance(paths, PathSet):
        paths = LayerPaths.build(paths)
    if paths.pathset.max_len > params.max_len:
        raise ValueError(f"path set has length {paths.pathset.max_len} > layer max {params.max_len}")
    x = drop(features)
    # a layer with a single length has beta == 1 identically; no second-level dropout there
    beta_drop = drop if params.max_len > 2 else EVAL
    outs, first_attn, betas = [], [], []
    for k, h in enumerate(project(x, params.weights)):
        levels = []
        for idx in paths.buckets:
            agg, alpha = first_level_aggregate(h, idx, params.attn_alpha[(k, idx.length)], drop)
            if idx.length == 2:
                first_attn.append(alpha.value[:, 0].copy())
            levels.append((idx.present, agg))
        out, beta = second_level_aggregate(h, levels, params.attn_beta[k], beta_drop, params.fix_beta)
        betas.append(None if beta is None else beta.value[:, 0].copy())
        outs.append(out)
    act = _activation(params.activation)
    return act(merge_heads(outs, params.merge)), first_attn, betas


def node_attention(features: Tensor, graph: SparseGraph, params: SpaganLayerParams):
    """Per-head length-2 attention over every neighbor plus self (no sampling, no dropout).

    Returns (pairs, (E_with_self, heads) array). Used to derive edge costs.
    """
    pairs, seg = neighbor_segments(graph, include_self=True)
    cols = []
    with ad.no_grad():
        for k, h in enumerate(project(features, params.weights)):
            alpha = attention_scores(ad.gather_rows(h, pairs[:, 0]), ad.gather_rows(h, pairs[:, 1]),
                                     params.attn_alpha[(k, 2)], seg)
            cols.append(alpha.value[:, 0])
    return pairs, np.stack(cols, axis=1)
