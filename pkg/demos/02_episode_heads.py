"""One hand-built episode through all four classification heads.

Reproduces the worked micro-examples: prototype distances, cosine scores,
a relation module collapsed to a single linear-sigmoid layer, and matching
attention weights.
"""
import numpy as np

from fslkit.diffcore import stable_softmax
from fslkit.heads import (
    RelationParams,
    compute_prototypes,
    matching_attention,
    matching_scores,
    proto_scores,
    relation_scores,
    simpleshot_scores,
)

print("== prototypes ==")
support = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 4.0], [0.0, 6.0]])
labels = np.array([0, 0, 1, 1])
protos = compute_prototypes(support, labels, way=2)
print(f"class means: {protos.tolist()}")

print("\n== prototypical head ==")
p = np.array([[1.0, 0.0], [0.0, 5.0]])
q = np.array([[1.0, 1.0]])
scores = proto_scores(p, q)
print(f"negative squared distances: {scores.scores[0].tolist()} -> class {scores.predictions[0]}")
print(f"softmax certainty: {stable_softmax(scores.scores)[0, 0]:.9f}")

print("\n== cosine (simpleshot) head ==")
scores = simpleshot_scores(np.array([[2.0, 0.0], [0.0, 3.0]]), np.array([[1.0, 0.0]]))
print(f"cosine similarities: {scores.scores[0].tolist()} -> class {scores.predictions[0]}")

print("\n== relation head (single-layer reduction) ==")
relation = RelationParams(
    w1=np.eye(4), b1=np.zeros(4),
    w2=np.array([[1.0], [0.0], [1.0], [0.0]]), b2=np.zeros(1),
)
scores = relation_scores(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0]]), relation)
print(f"relation scores: {np.round(scores.scores[0], 6).tolist()} -> class {scores.predictions[0]}")

print("\n== matching head ==")
sup = np.array([[1.0, 0.0], [0.0, 1.0]])
sup_labels = np.array([0, 1])
query = np.array([[1.0, 0.0]])
att = matching_attention(sup, sup_labels, query)
print(f"attention over support: {np.round(att[0], 6).tolist()} (sums to {att[0].sum():.6f})")
scores = matching_scores(sup, sup_labels, query)
print(f"class mass: {np.round(scores.scores[0], 6).tolist()} -> class {scores.predictions[0]}")
