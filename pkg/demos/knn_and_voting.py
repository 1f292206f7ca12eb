"""Nearest-neighbour classification on embeddings, then the two image-level
voting rules. Uses synthetic clustered embeddings so the mechanics are easy
to see without training a model first."""

import numpy as np

from tilevote.aggregate import TileScores, majority_vote, probability_vote
from tilevote.knn import build_index, classify

NUM_CLASSES = 4


def clustered_embeddings(rng, per_class, dim=16, spread=0.6):
    centers = rng.standard_normal((NUM_CLASSES, dim)) * 3.0
    emb, labels = [], []
    for c in range(NUM_CLASSES):
        emb.append(centers[c] + spread * rng.standard_normal((per_class, dim)))
        labels += [c] * per_class
    return np.concatenate(emb), np.array(labels), centers


def knn_demo(rng):
    emb, labels, centers = clustered_embeddings(rng, per_class=50)
    ids = [f"t{i:03d}" for i in range(len(labels))]
    index = build_index(emb, labels, ids)

    queries = centers + 0.4 * rng.standard_normal(centers.shape)
    res = classify(index, queries, k=5)
    print("one query near each class center:")
    for c in range(NUM_CLASSES):
        print(f"  true={c} pred={res.pred[c]} scores={res.scores[c]}")
    return res


def voting_demo():
    # one image, five tiles: class 1 wins on count
    scores = np.array([
        [0.7, 0.1, 0.1, 0.1],
        [0.1, 0.6, 0.2, 0.1],
        [0.2, 0.5, 0.2, 0.1],
        [0.1, 0.8, 0.0, 0.1],
        [0.3, 0.2, 0.4, 0.1],
    ])
    ts = TileScores(tile_ids=[f"t{i}" for i in range(5)],
                    source_ids=["img_a"] * 5,
                    labels=np.ones(5, dtype=int),
                    tile_preds=scores.argmax(axis=1),
                    scores=scores)
    maj = majority_vote(ts)[0]
    prob = probability_vote(ts)[0]
    print("\nfive tiles of one image:")
    print(f"  per-tile preds {ts.tile_preds.tolist()}")
    print(f"  majority vote    -> {maj.pred} (class mass {np.round(maj.class_scores, 2)})")
    print(f"  probability vote -> {prob.pred} (summed scores {np.round(prob.class_scores, 2)})")

    # a 2-2 count tie resolved by which side carries more score mass
    tie = np.zeros((4, NUM_CLASSES))
    tie[0, 0] = tie[1, 0] = 0.95
    tie[2, 1] = tie[3, 1] = 0.55
    ts_tie = TileScores([f"t{i}" for i in range(4)], ["img_b"] * 4,
                        np.zeros(4, dtype=int), tie.argmax(axis=1), tie)
    print(f"  2-2 count tie, class 0 more confident -> majority gives "
          f"{majority_vote(ts_tie)[0].pred}")


if __name__ == "__main__":
    rng = np.random.default_rng(3)
    knn_demo(rng)
    voting_demo()
