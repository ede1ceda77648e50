"""Metric classifiers over episode embeddings and the episode loss.

The prototypical head is the reference configuration; matching and relation
heads are provided for head-comparison experiments.  All heads expose
log-probabilities over the episode's classes so the same negative
log-likelihood loss applies; the relation head additionally exposes its raw
pair scores, which is what its native mean-squared-error training uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, ShapeError

__all__ = [
    "prototypes",
    "protonet_logp",
    "protonet_logp_batch",
    "matchingnet_logp",
    "matchingnet_logp_batch",
    "RelationParams",
    "init_relation_params",
    "relationnet_scores",
    "relation_mse_loss",
    "metric_classification_loss",
]


def _class_mean_matrix(labels: np.ndarray, n_way: int) -> np.ndarray:
    """(n_way, S) averaging matrix; row n averages the supports of class n."""
    labels = np.asarray(labels)
    m = np.zeros((n_way, labels.shape[0]))
    for n in range(n_way):
        idx = np.flatnonzero(labels == n)
        if idx.size == 0:
            raise ContractViolation(f"prototypes: class {n} has no support samples")
        m[n, idx] = 1.0 / idx.size
    return m


def prototypes(support: Tensor, labels: np.ndarray, n_way: int) -> Tensor:
    """Class means of the support embeddings: (S, E) -> (n_way, E)."""
    support = support if isinstance(support, Tensor) else Tensor(support)
    return ad.matmul(Tensor(_class_mean_matrix(labels, n_way)), support)


def protonet_logp_batch(queries: Tensor, protos: Tensor) -> Tensor:
    """Log-probabilities from negative squared Euclidean distances.

    queries: (Q, E); protos: (N, E) -> (Q, N).
    """
    queries = queries if isinstance(queries, Tensor) else Tensor(queries)
    protos = protos if isinstance(protos, Tensor) else Tensor(protos)
    if queries.shape[1] != protos.shape[1]:
        raise ShapeError(
            f"protonet: embedding dims differ, {queries.shape} vs {protos.shape}"
        )
    q2 = ad.sum_axes(ad.mul(queries, queries), axes=1, keepdims=True)  # (Q,1)
    p2 = ad.reshape(
        ad.sum_axes(ad.mul(protos, protos), axes=1), (1, protos.shape[0])
    )  # (1,N)
    cross = ad.matmul(queries, ad.moveaxis(protos, 0, 1))  # (Q,N)
    d2 = ad.add(ad.add(q2, p2), ad.mul(cross, -2.0))
    return ad.log_softmax(ad.mul(d2, -1.0))


def protonet_logp(query_vec: Tensor, protos: Tensor) -> Tensor:
    """Single query: (E,), (N, E) -> (N,)."""
    query_vec = query_vec if isinstance(query_vec, Tensor) else Tensor(query_vec)
    out = protonet_logp_batch(ad.reshape(query_vec, (1, query_vec.shape[0])), protos)
    return ad.reshape(out, (out.shape[1],))


def _row_normalize(x: Tensor) -> Tensor:
    """L2-normalize rows; zero rows stay zero (their similarities become 0)."""
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    safe = np.where(norms < 1e-12, 1.0, norms)
    keep = (norms >= 1e-12).astype(float)
    return ad.mul(x, Tensor(keep / safe))


def matchingnet_logp_batch(
    queries: Tensor, support: Tensor, labels: np.ndarray, n_way: int
) -> Tensor:
    """Cosine-attention nearest-neighbour head: (Q, E) -> (Q, N).

    Attention over supports is a softmax of cosine similarities; class
    probability is the attention mass landing on that class.
    """
    queries = queries if isinstance(queries, Tensor) else Tensor(queries)
    support = support if isinstance(support, Tensor) else Tensor(support)
    sims = ad.matmul(_row_normalize(queries), ad.moveaxis(_row_normalize(support), 0, 1))
    att = _exp(ad.log_softmax(sims))  # (Q, S)
    labels = np.asarray(labels)
    onehot = np.zeros((support.shape[0], n_way))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return ad.log(ad.matmul(att, Tensor(onehot)))


def _exp(t: Tensor) -> Tensor:
    data = np.exp(t.data)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * data)

    return Tensor._result(data, (t,), backward)


def matchingnet_logp(
    query_vec: Tensor, support: Tensor, labels: np.ndarray, n_way: int
) -> Tensor:
    query_vec = query_vec if isinstance(query_vec, Tensor) else Tensor(query_vec)
    out = matchingnet_logp_batch(
        ad.reshape(query_vec, (1, query_vec.shape[0])), support, labels, n_way
    )
    return ad.reshape(out, (out.shape[1],))


# ---------------------------------------------------------------------------
# relation head: a small conv + fully-connected comparator over map pairs


@dataclass
class RelationParams:
    conv_w: Tensor  # (R, 2C, 3, 3)
    conv_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    def named_parameters(self, prefix: str = "relation") -> dict[str, Tensor]:
        return {
            f"{prefix}.conv_w": self.conv_w,
            f"{prefix}.conv_b": self.conv_b,
            f"{prefix}.fc1_w": self.fc1_w,
            f"{prefix}.fc1_b": self.fc1_b,
            f"{prefix}.fc2_w": self.fc2_w,
            f"{prefix}.fc2_b": self.fc2_b,
        }


def init_relation_params(
    channels: int, rng: np.random.Generator, hidden_channels: int = 8, fc_hidden: int = 8
) -> RelationParams:
    c2 = 2 * channels
    b1 = float(np.sqrt(1.0 / (c2 * 9)))
    bf1 = float(np.sqrt(1.0 / hidden_channels))
    bf2 = float(np.sqrt(1.0 / fc_hidden))
    return RelationParams(
        conv_w=Tensor(rng.uniform(-b1, b1, (hidden_channels, c2, 3, 3)), requires_grad=True),
        conv_b=Tensor(np.zeros(hidden_channels), requires_grad=True),
        fc1_w=Tensor(rng.uniform(-bf1, bf1, (hidden_channels, fc_hidden)), requires_grad=True),
        fc1_b=Tensor(np.zeros(fc_hidden), requires_grad=True),
        fc2_w=Tensor(rng.uniform(-bf2, bf2, (fc_hidden, 1)), requires_grad=True),
        fc2_b=Tensor(np.zeros(1), requires_grad=True),
    )


def relationnet_scores(
    query_map: Tensor, class_maps: Tensor, params: RelationParams
) -> Tensor:
    """Similarity scores in (0,1) for one query against N class-mean maps.

    query_map: (C, H, W); class_maps: (N, C, H, W) -> (N,).
    Each pair is concatenated channel-wise, run through conv3x3 -> ReLU ->
    global average pool -> two fully-connected layers -> sigmoid.
    """
    query_map = query_map if isinstance(query_map, Tensor) else Tensor(query_map)
    class_maps = class_maps if isinstance(class_maps, Tensor) else Tensor(class_maps)
    n, c, h, w = class_maps.shape
    if query_map.shape != (c, h, w):
        raise ShapeError(
            f"relation: query map {query_map.shape} does not match class maps "
            f"{class_maps.shape}"
        )
    q = ad.mul(ad.reshape(query_map, (1, c, h, w)), Tensor(np.ones((n, 1, 1, 1))))
    pairs = ad.concat([q, class_maps], axis=1)  # (N, 2C, H, W)
    x = ad.moveaxis(pairs, 1, 3)
    y = ad.relu(ad.conv2d_cl(x, params.conv_w, params.conv_b, pad=1))
    pooled = ad.reshape(ad.global_pool_cl(y, "avg"), (n, y.shape[3]))
    hdn = ad.relu(ad.add(ad.matmul(pooled, params.fc1_w), params.fc1_b))
    out = ad.add(ad.matmul(hdn, params.fc2_w), params.fc2_b)
    return ad.reshape(ad.sigmoid(out), (n,))


def relation_logp(scores: Tensor) -> Tensor:
    """Log of renormalized scores, for the shared NLL interface."""
    total = ad.sum_axes(scores)
    return ad.log(ad.mul(scores, ad.powc(total, -1.0)))


def relation_mse_loss(scores: Tensor, label: int) -> Tensor:
    """Native relation-head objective: squared error against one-hot."""
    onehot = np.zeros(scores.shape[0])
    onehot[label] = 1.0
    diff = ad.sub(scores, Tensor(onehot))
    return ad.sum_axes(ad.mul(diff, diff))


def metric_classification_loss(
    logp: Tensor, labels: np.ndarray, reduction: str = "sum"
) -> Tensor:
    """Negative log-probability of the true class, summed over queries.

    ``reduction="mean"`` exists for conditioning experiments; the episode
    objective uses the sum.
    """
    logp = logp if isinstance(logp, Tensor) else Tensor(logp)
    labels = np.asarray(labels)
    q, n = logp.shape
    if labels.shape[0] != q:
        raise ShapeError(f"loss: {q} rows of logp but {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= n:
        raise ContractViolation(f"loss: labels must lie in [0, {n})")
    onehot = np.zeros((q, n))
    onehot[np.arange(q), labels] = 1.0
    picked = ad.sum_axes(ad.mul(logp, Tensor(onehot)))
    loss = ad.mul(picked, -1.0)
    if reduction == "mean":
        return ad.mul(loss, 1.0 / q)
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss
