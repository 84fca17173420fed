"""The four few-shot classification heads over adapted embedding vectors.

Every head shares the same episode interface: a differentiable loss for
training (built on the diffcore tape) and plain-numpy class scores for
inference. Ties in the argmax always break to the lowest class index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import diffcore as dc
from .diffcore import COSINE_EPS, PROB_FLOOR, stable_softmax

if TYPE_CHECKING:  # pragma: no cover
    from .episodic import Episode

HEAD_IDS = ("protonet", "simpleshot", "relationnet", "matchingnet")


class UnknownHead(ValueError):
    pass


class EmptyClass(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class DegenerateVector(ValueError):
    """A vector with norm below 1e-12 reached a cosine-based head."""


class MissingRelationParams(ValueError):
    pass


@dataclass
class AdapterParams:
    """Trainable linear map applied to every vector before any head.

    Plays the role of the fine-tunable feature extractor: base embeddings
    stay frozen and this map (weight D x d, optional bias d) is what episodic
    training optimizes.
    """

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)

    @classmethod
    def identity(
        cls, in_dim: int, out_dim: int | None = None, with_bias: bool = False
    ) -> "AdapterParams":
        """Padded/truncated identity weight (scale 1.0), optional zero bias."""
        out_dim = in_dim if out_dim is None else out_dim
        weight = np.eye(in_dim, out_dim)
        bias = np.zeros(out_dim) if with_bias else None
        return cls(weight=weight, bias=bias)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        out = np.asarray(vectors, dtype=np.float64) @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


@dataclass
class RelationParams:
    """Two-layer scorer: concat(prototype, query) -> hidden ReLU -> sigmoid."""

    w1: np.ndarray  # (2d, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, 1)
    b2: np.ndarray  # (1,)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)

    @classmethod
    def init(cls, feat_dim: int, hidden: int, rng: np.random.Generator) -> "RelationParams":
        w1 = rng.normal(0.0, np.sqrt(2.0 / (2 * feat_dim)), (2 * feat_dim, hidden))
        w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, 1))
        return cls(w1=w1, b1=np.zeros(hidden), w2=w2, b2=np.zeros(1))


@dataclass(frozen=True)
class EpisodeScores:
    """Per-query class scores plus argmax predictions (ties -> lowest index)."""

    scores: np.ndarray  # (num_queries, way)
    predictions: np.ndarray  # (num_queries,)

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> "EpisodeScores":
        scores = np.asarray(scores, dtype=np.float64)
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        return cls(scores=scores, predictions=np.argmax(scores, axis=1))


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatch(f"dims disagree: {a.shape[-1]} vs {b.shape[-1]}")


def _check_norms(vectors: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1)
    if np.any(norms < COSINE_EPS):
        raise DegenerateVector(f"{what} vector with norm < {COSINE_EPS}")
    return norms


def compute_prototypes(vectors: np.ndarray, labels: np.ndarray, way: int) -> np.ndarray:
    """Arithmetic mean of each class's support vectors, one row per class."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    protos = np.empty((way, vectors.shape[1]))
    for c in range(way):
        mask = labels == c
        if not mask.any():
            raise EmptyClass(f"class {c} has no support vectors")
        protos[c] = vectors[mask].mean(axis=0)
    return protos


def proto_scores(prototypes: np.ndarray, queries: np.ndarray) -> EpisodeScores:
    """Negative squared L2 distance to each prototype."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    _check_dims(queries, prototypes)
    diff = queries[:, None, :] - prototypes[None, :, :]
    return EpisodeScores.from_scores(-np.einsum("ijk,ijk->ij", diff, diff))


def _cosine(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    qn = _check_norms(queries, "query")
    pn = _check_norms(prototypes, "prototype")
    return (queries @ prototypes.T) / (qn[:, None] * pn[None, :])


def simpleshot_scores(
    prototypes: np.ndarray, queries: np.ndarray, centering: bool = False
) -> EpisodeScores:
    """Cosine similarity to class centroids, optionally after support-mean centering.

    Centering subtracts the support-set mean (equal to the prototype mean in
    balanced episodes) from prototypes and queries alike; it is off by default.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    _check_dims(queries, prototypes)
    if centering:
        center = prototypes.mean(axis=0)
        prototypes = prototypes - center
        queries = queries - center
    return EpisodeScores.from_scores(_cosine(queries, prototypes))


def relation_scores(
    prototypes: np.ndarray, queries: np.ndarray, relation: RelationParams
) -> EpisodeScores:
    """Learned relation score in (0,1) for each (prototype, query) pair."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    _check_dims(queries, prototypes)
    way, d = prototypes.shape
    if relation.w1.shape[0] != 2 * d:
        raise DimensionMismatch(
            f"relation input width {relation.w1.shape[0]} != 2*{d}"
        )
    pairs = np.concatenate(
        [np.tile(prototypes, (len(queries), 1)), np.repeat(queries, way, axis=0)],
        axis=1,
    )
    hidden = np.maximum(pairs @ relation.w1 + relation.b1, 0.0)
    raw = hidden @ relation.w2 + relation.b2
    return EpisodeScores.from_scores(dc._sigmoid(raw).reshape(len(queries), way))


def matching_scores(
    support_vectors: np.ndarray,
    support_labels: np.ndarray,
    queries: np.ndarray,
    way: int | None = None,
) -> EpisodeScores:
    """Attention over support items; class score = summed attention mass.

    Attention is a softmax over cosine similarities to every support vector,
    so per-query scores are positive and sum to one.
    """
    support_vectors = np.asarray(support_vectors, dtype=np.float64)
    support_labels = np.asarray(support_labels, dtype=np.int64)
    queries = np.asarray(queries, dtype=np.float64)
    _check_dims(queries, support_vectors)
    if way is None:
        way = int(support_labels.max()) + 1
    attention = stable_softmax(_cosine(queries, support_vectors), axis=1)
    onehot = np.zeros((len(support_labels), way))
    onehot[np.arange(len(support_labels)), support_labels] = 1.0
    return EpisodeScores.from_scores(attention @ onehot)


def matching_attention(
    support_vectors: np.ndarray, support_labels: np.ndarray, queries: np.ndarray
) -> np.ndarray:
    """Raw per-query attention weights over support items (rows sum to 1)."""
    support_vectors = np.asarray(support_vectors, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    return stable_softmax(_cosine(queries, support_vectors), axis=1)


# ---------------------------------------------------------------------------
# episode-level loss and scores


def _proto_matrix(labels: np.ndarray, way: int) -> np.ndarray:
    """Constant (way, n_support) matrix averaging each class's support rows."""
    labels = np.asarray(labels, dtype=np.int64)
    m = np.zeros((way, len(labels)))
    for c in range(way):
        mask = labels == c
        count = int(mask.sum())
        if count == 0:
            raise EmptyClass(f"class {c} has no support vectors")
        m[c, mask] = 1.0 / count
    return m


def _adapter_nodes(tape: dc.Tape, adapter: AdapterParams):
    w = tape.param(adapter.weight)
    b = tape.param(adapter.bias) if adapter.bias is not None else None
    return w, b


def _adapt(x: dc.Node, w: dc.Node, b: dc.Node | None) -> dc.Node:
    out = dc.matmul(x, w)
    if b is not None:
        out = dc.add(out, dc.reshape(b, (1, -1)))
    return out


def build_episode_loss(
    tape: dc.Tape,
    head: str,
    episode: "Episode",
    weight: dc.Node,
    bias: dc.Node | None = None,
    relation_nodes: dict[str, dc.Node] | None = None,
    simpleshot_centering: bool = False,
) -> dc.Node:
    """Construct the head's scalar loss on an existing tape.

    Shared by episode_loss and by gradient-check harnesses that need to
    rebuild the same graph at perturbed parameter values.
    """
    way = episode.way
    q_labels = np.asarray(episode.query_labels, dtype=np.int64)
    s_labels = np.asarray(episode.support_labels, dtype=np.int64)
    support = _adapt(tape.const(np.asarray(episode.support_vectors, np.float64)), weight, bias)
    queries = _adapt(tape.const(np.asarray(episode.query_vectors, np.float64)), weight, bias)

    if head == "protonet":
        protos = dc.matmul(tape.const(_proto_matrix(s_labels, way)), support)
        logits = dc.scale(dc.pairwise_sqdist(queries, protos), -1.0)
        return dc.mean(dc.softmax_nll(logits, q_labels))
    if head == "simpleshot":
        if simpleshot_centering:
            n = episode.support_vectors.shape[0]
            center = dc.matmul(tape.const(np.full((1, n), 1.0 / n)), support)
            support = dc.add(support, dc.scale(center, -1.0))
            queries = dc.add(queries, dc.scale(center, -1.0))
        protos = dc.matmul(tape.const(_proto_matrix(s_labels, way)), support)
        sims = dc.pairwise_cosine(queries, protos)
        return dc.mean(dc.softmax_nll(sims, q_labels))
    if head == "relationnet":
        rw1, rb1 = relation_nodes["relation.w1"], relation_nodes["relation.b1"]
        rw2, rb2 = relation_nodes["relation.w2"], relation_nodes["relation.b2"]
        protos = dc.matmul(tape.const(_proto_matrix(s_labels, way)), support)
        pairs = dc.concat_pairs(protos, queries)
        hidden = dc.relu(dc.add(dc.matmul(pairs, rw1), dc.reshape(rb1, (1, -1))))
        raw = dc.add(dc.matmul(hidden, rw2), dc.reshape(rb2, (1, -1)))
        scores = dc.reshape(dc.sigmoid(raw), (len(q_labels), way))
        onehot = np.zeros((len(q_labels), way))
        onehot[np.arange(len(q_labels)), q_labels] = 1.0
        return dc.mse_loss(scores, onehot)
    # matchingnet
    sims = dc.pairwise_cosine(queries, support)
    attention = dc.softmax_rows(sims)
    onehot = np.zeros((len(s_labels), way))
    onehot[np.arange(len(s_labels)), s_labels] = 1.0
    class_mass = dc.matmul(attention, tape.const(onehot))
    return dc.mean(dc.nll_from_probs(class_mass, q_labels, floor=PROB_FLOOR))


def episode_loss(
    head: str,
    episode: "Episode",
    adapter: AdapterParams,
    relation: RelationParams | None = None,
    simpleshot_centering: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """Head loss averaged over queries, plus gradients for every parameter.

    The adapter is applied to support and query vectors before any head math.
    Gradient keys: "adapter.weight", "adapter.bias" (when present), and
    "relation.w1" / "relation.b1" / "relation.w2" / "relation.b2" for the
    relation head.
    """
    if head not in HEAD_IDS:
        raise UnknownHead(f"head must be one of {HEAD_IDS}, got {head!r}")
    if head == "relationnet" and relation is None:
        raise MissingRelationParams("relationnet requires relation parameters")
    if head != "relationnet" and relation is not None:
        raise MissingRelationParams(f"{head} does not take relation parameters")

    tape = dc.Tape()
    w, b = _adapter_nodes(tape, adapter)
    param_nodes: dict[str, dc.Node] = {"adapter.weight": w}
    if b is not None:
        param_nodes["adapter.bias"] = b
    relation_nodes = None
    if head == "relationnet":
        if relation.w1.shape[0] != 2 * adapter.out_dim:
            raise DimensionMismatch(
                f"relation input width {relation.w1.shape[0]} != 2*{adapter.out_dim}"
            )
        relation_nodes = {
            "relation.w1": tape.param(relation.w1),
            "relation.b1": tape.param(relation.b1),
            "relation.w2": tape.param(relation.w2),
            "relation.b2": tape.param(relation.b2),
        }
        param_nodes.update(relation_nodes)

    loss = build_episode_loss(
        tape, head, episode, w, b, relation_nodes, simpleshot_centering
    )
    grads = dc.backward(tape, loss)
    return float(loss.value), {name: grads[node] for name, node in param_nodes.items()}


def episode_scores(
    head: str,
    episode: "Episode",
    adapter: AdapterParams,
    relation: RelationParams | None = None,
    simpleshot_centering: bool = False,
) -> EpisodeScores:
    """Inference-path scores for an episode (plain numpy, no tape)."""
    if head not in HEAD_IDS:
        raise UnknownHead(f"head must be one of {HEAD_IDS}, got {head!r}")
    support = adapter.apply(episode.support_vectors)
    queries = adapter.apply(episode.query_vectors)
    s_labels = np.asarray(episode.support_labels, dtype=np.int64)
    if head == "protonet":
        return proto_scores(compute_prototypes(support, s_labels, episode.way), queries)
    if head == "simpleshot":
        protos = compute_prototypes(support, s_labels, episode.way)
        return simpleshot_scores(protos, queries, centering=simpleshot_centering)
    if head == "relationnet":
        if relation is None:
            raise MissingRelationParams("relationnet requires relation parameters")
        protos = compute_prototypes(support, s_labels, episode.way)
        return relation_scores(protos, queries, relation)
    return matching_scores(support, s_labels, queries, way=episode.way)


def pack_params(
    adapter: AdapterParams, relation: RelationParams | None = None
) -> dict[str, np.ndarray]:
    params = {"adapter.weight": adapter.weight}
    if adapter.bias is not None:
        params["adapter.bias"] = adapter.bias
    if relation is not None:
        params.update(
            {
                "relation.w1": relation.w1,
                "relation.b1": relation.b1,
                "relation.w2": relation.w2,
                "relation.b2": relation.b2,
            }
        )
    return params


def unpack_params(
    params: dict[str, np.ndarray], has_relation: bool
) -> tuple[AdapterParams, RelationParams | None]:
    adapter = AdapterParams(params["adapter.weight"], params.get("adapter.bias"))
    relation = None
    if has_relation:
        relation = RelationParams(
            params["relation.w1"],
            params["relation.b1"],
            params["relation.w2"],
            params["relation.b2"],
        )
    return adapter, relation
