"""Alignment objectives: diversity-weighted contrastive losses and prototypes.

The contrastive family shares one direction primitive: a margin-shifted
log-sum-exp over negatives minus the log-shifted positive, averaged over
anchors and scaled by the temperature. The diversity-aware variant
divides each anchor's negative exponent by ``temperature * div(anchor)``
where ``div`` measures how spread out the anchor's negative similarities
are; anchors whose negatives all sit at the same distance get a sharper
effective temperature and therefore a harder penalty.

Diversity scores are always computed from detached similarity values and
enter the losses as constants: the batch-max normalization they include
is not differentiable at ties.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Matrix
from .representation import MemoryBank


@dataclass
class SimilarityMatrix:
    """Similarity scores [N x Q] plus each anchor's positive column (or None).

    ``positive_index[n]`` names anchor n's matching candidate; ``None``
    means every candidate is a negative (memory-bank case).
    """

    scores: Matrix
    positive_index: np.ndarray | None

    def transposed(self) -> "SimilarityMatrix":
        if self.positive_index is None or self.scores.rows != self.scores.cols:
            raise ValueError("transposed() needs a square matrix with diagonal positives")
        if not np.array_equal(self.positive_index, np.arange(self.scores.rows)):
            raise ValueError("transposed() needs diagonal positives")
        return SimilarityMatrix(nm.transpose(self.scores), self.positive_index.copy())


def cosine_matrix(a: Matrix, b: Matrix, positive_index="auto") -> SimilarityMatrix:
    """All-pairs cosine similarities; equals the dot product for unit rows.

    With ``positive_index="auto"`` a square result is assumed to pair
    anchor n with candidate n.
    """
    if a.cols != b.cols:
        raise ValueError(f"embedding dims differ: {a.cols} vs {b.cols}")
    scores = nm.l2_normalize_rows(a) @ nm.l2_normalize_rows(b).T
    if isinstance(positive_index, str) and positive_index == "auto":
        positive_index = np.arange(a.rows) if a.rows == b.rows else None
    elif positive_index is not None:
        positive_index = np.asarray(positive_index, dtype=np.int64)
    return SimilarityMatrix(scores, positive_index)


# ---------------------------------------------------------------------------
# diversity estimation
# ---------------------------------------------------------------------------

@dataclass
class DiversityScores:
    """Per-anchor diversity weights in (0, 1] with their raw ingredients."""

    values: np.ndarray
    pre_norm: np.ndarray
    spread: np.ndarray
    estimator: str


def _negative_rows(sim: SimilarityMatrix) -> list[np.ndarray]:
    vals = sim.scores.value
    rows = []
    for n in range(vals.shape[0]):
        if sim.positive_index is None:
            negs = vals[n]
        else:
            negs = np.delete(vals[n], sim.positive_index[n])
        if negs.size == 0:
            raise ValueError(f"anchor {n} has no negative candidates")
        rows.append(negs)
    return rows


def _sigmoid_vec(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _weights_from_spread(spread: np.ndarray, eps: float, estimator: str) -> DiversityScores:
    # zero spread is the limit eps/spread -> inf, where the weight is 1
    pre = np.where(spread > 0.0, 1.0 / _sigmoid_vec(eps / np.where(spread > 0.0, spread, 1.0)), 1.0)
    return DiversityScores(pre / pre.max(), pre, spread, estimator)


def diversity_std(sim: SimilarityMatrix, eps: float = 0.1) -> DiversityScores:
    """Diversity from the population standard deviation of negative similarities."""
    if not eps > 0.0:
        raise ValueError("eps must be positive")
    spread = np.array([
        np.sqrt(max(float(np.mean(negs ** 2) - np.mean(negs) ** 2), 0.0))
        for negs in _negative_rows(sim)
    ])
    return _weights_from_spread(spread, eps, "std")


def diversity_entropy(sim: SimilarityMatrix, eps: float = 0.1) -> DiversityScores:
    """Diversity from the base-2 entropy of the softmax over negative similarities."""
    if not eps > 0.0:
        raise ValueError("eps must be positive")
    spread = []
    for negs in _negative_rows(sim):
        z = negs - negs.max()
        p = np.exp(z) / np.exp(z).sum()
        spread.append(float(-(p * np.log2(np.where(p > 0, p, 1.0))).sum()))
    return _weights_from_spread(np.array(spread), eps, "entropy")


# ---------------------------------------------------------------------------
# contrastive losses
# ---------------------------------------------------------------------------

def _contrastive_direction(scores: Matrix, positives: Matrix, neg_mask: np.ndarray | None,
                           div: np.ndarray | None, mu: float, gamma: float) -> Matrix:
    """(mu/N) * sum_n [log(sum_negs exp((s - gamma)/(mu*div_n)) + 1) - log(pos_n + 1)]."""
    n = scores.rows
    if div is None:
        div = np.ones(n)
    div = np.asarray(div, dtype=np.float64)
    if div.shape != (n,):
        raise ValueError(f"need one diversity value per anchor, got {div.shape} for {n} anchors")
    if np.any(div <= 0.0):
        raise ValueError("diversity weights must be positive")
    if np.any(positives.value <= -1.0):
        raise ValueError("a positive similarity is at or below -1; its log term is undefined")
    inv_temp = Matrix((1.0 / (mu * div)).reshape(n, 1))
    z = nm.exp((scores - gamma) * inv_temp)
    if neg_mask is not None:
        z = z * Matrix(neg_mask)
    per_anchor = nm.log(nm.row_sum(z) + 1.0) - nm.log(positives + 1.0)
    return nm.sum_all(per_anchor) * (mu / n)


def _check_square_diagonal(sim: SimilarityMatrix) -> int:
    n = sim.scores.rows
    if sim.scores.cols != n:
        raise ValueError("need a square similarity matrix")
    if sim.positive_index is None or not np.array_equal(sim.positive_index, np.arange(n)):
        raise ValueError("need diagonal positives")
    return n


def _diag_column(scores: Matrix) -> Matrix:
    eye = np.eye(scores.rows)
    return nm.row_sum(scores * Matrix(eye))


def dcl_i_loss(sim: SimilarityMatrix, mu: float, gamma: float) -> Matrix:
    """Diversity-insensitive bidirectional contrastive loss on in-batch pairs."""
    if not mu > 0.0:
        raise ValueError("temperature mu must be positive")
    n = _check_square_diagonal(sim)
    off_diag = 1.0 - np.eye(n)
    fwd = _contrastive_direction(sim.scores, _diag_column(sim.scores), off_diag, None, mu, gamma)
    flipped = nm.transpose(sim.scores)
    bwd = _contrastive_direction(flipped, _diag_column(flipped), off_diag, None, mu, gamma)
    return fwd + bwd


def dcl_loss(sim: SimilarityMatrix, div_anchor_fwd: DiversityScores,
             div_anchor_bwd: DiversityScores, mu: float, gamma: float) -> Matrix:
    """Bidirectional contrastive loss with per-anchor diversity temperatures.

    Forward anchors (rows) use ``div_anchor_fwd``; the transposed
    direction uses ``div_anchor_bwd``. With all-ones diversity this
    reduces exactly to :func:`dcl_i_loss`.
    """
    if not mu > 0.0:
        raise ValueError("temperature mu must be positive")
    n = _check_square_diagonal(sim)
    off_diag = 1.0 - np.eye(n)
    fwd = _contrastive_direction(sim.scores, _diag_column(sim.scores), off_diag,
                                 div_anchor_fwd.values, mu, gamma)
    flipped = nm.transpose(sim.scores)
    bwd = _contrastive_direction(flipped, _diag_column(flipped), off_diag,
                                 div_anchor_bwd.values, mu, gamma)
    return fwd + bwd


def _estimate(sim: SimilarityMatrix, estimator: str, eps: float) -> DiversityScores:
    if estimator == "std":
        return diversity_std(sim, eps)
    if estimator == "entropy":
        return diversity_entropy(sim, eps)
    raise ValueError(f"unknown diversity estimator {estimator!r}")


def _batch_level_diversity(batch_a: Matrix, batch_b: Matrix, estimator: str, eps: float) -> np.ndarray:
    # a single-pair batch has no in-batch negatives; use the limit weight 1
    if batch_a.rows == 1:
        return np.ones(1)
    sim = cosine_matrix(Matrix(batch_a.value), Matrix(batch_b.value))
    return _estimate(sim, estimator, eps).values


def m_dcl_loss(batch_v: Matrix, batch_w: Matrix, momentum_pos_v, momentum_pos_w,
               bank_v: MemoryBank, bank_w: MemoryBank, mu: float, gamma: float,
               *, estimator: str = "std", eps: float = 0.1,
               fixed_diversity: tuple[np.ndarray, np.ndarray] | None = None) -> Matrix:
    """Contrastive loss of in-batch anchors against memory-bank negatives.

    Each anchor's positive is the momentum-encoded embedding of its own
    cross-modal counterpart; every bank row is a negative. Only in-batch
    rows act as anchors. Per anchor, the diversity weight is the mean of
    the in-batch estimate and the bank-level estimate. No gradient flows
    into bank rows, momentum positives, or diversity weights;
    ``fixed_diversity`` pins the per-direction weights outright, which the
    finite-difference checks rely on.
    """
    if not mu > 0.0:
        raise ValueError("temperature mu must be positive")
    if len(bank_v) == 0 or len(bank_w) == 0:
        raise ValueError("memory banks must be non-empty")
    if batch_v.rows != batch_w.rows:
        raise ValueError(f"batch sizes differ: {batch_v.rows} vs {batch_w.rows}")

    def one_direction(anchors: Matrix, counterpart: Matrix, momentum_pos, bank: MemoryBank,
                      pinned_div: np.ndarray | None) -> Matrix:
        anchors_unit = nm.l2_normalize_rows(anchors)
        bank_rows = np.asarray(bank.view(), dtype=np.float64)
        bank_unit = bank_rows / np.linalg.norm(bank_rows, axis=1, keepdims=True)
        pos_rows = momentum_pos.value if isinstance(momentum_pos, Matrix) else np.asarray(momentum_pos)
        pos_unit = pos_rows / np.linalg.norm(pos_rows, axis=1, keepdims=True)
        if pos_unit.shape != (anchors.rows, anchors.cols):
            raise ValueError("momentum positives must match the anchor batch shape")

        bank_sims = anchors_unit @ Matrix(bank_unit).T
        positives = nm.row_sum(anchors_unit * Matrix(pos_unit))

        if pinned_div is None:
            div_batch = _batch_level_diversity(anchors, counterpart, estimator, eps)
            div_bank = _estimate(SimilarityMatrix(Matrix(bank_sims.value), None), estimator, eps).values
            div = (div_batch + div_bank) / 2.0
        else:
            div = pinned_div
        return _contrastive_direction(bank_sims, positives, None, div, mu, gamma)

    pin_v = fixed_diversity[0] if fixed_diversity is not None else None
    pin_w = fixed_diversity[1] if fixed_diversity is not None else None
    return (one_direction(batch_v, batch_w, momentum_pos_w, bank_w, pin_v)
            + one_direction(batch_w, batch_v, momentum_pos_v, bank_v, pin_w))


# ---------------------------------------------------------------------------
# prototypes and pseudo-label classification
# ---------------------------------------------------------------------------

@dataclass
class PrototypeState:
    """K-means output used as pseudo labels, plus the classifier that predicts them."""

    k: int
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    inertia_path: list[float] = field(default_factory=list)
    classifier: Matrix | None = None


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: sample a few candidates per step, keep the best one."""
    m = points.shape[0]
    n_candidates = 2 + int(np.log2(k)) if k > 1 else 1
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(m))]
    dist_sq = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = dist_sq.sum()
        if total > 0.0:
            candidates = rng.choice(m, size=n_candidates, p=dist_sq / total)
        else:
            candidates = rng.integers(m, size=n_candidates)
        best_idx, best_cost, best_dist = -1, np.inf, dist_sq
        for idx in candidates:
            trial = np.minimum(dist_sq, ((points - points[int(idx)]) ** 2).sum(axis=1))
            cost = trial.sum()
            if cost < best_cost:
                best_idx, best_cost, best_dist = int(idx), cost, trial
        centroids[i] = points[best_idx]
        dist_sq = best_dist
    return centroids


def _lloyd(pts: np.ndarray, k: int, centroids: np.ndarray, max_iters: int):
    m = pts.shape[0]
    labels = np.full(m, -1, dtype=np.int64)
    inertia_path: list[float] = []
    inertia = 0.0
    for _ in range(max(max_iters, 1)):
        dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        point_cost = dists[np.arange(m), new_labels]
        inertia = float(point_cost.sum())
        inertia_path.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = pts[labels == j]
            if members.shape[0] > 0:
                centroids[j] = members.mean(axis=0)
            else:
                far = int(point_cost.argmax())
                centroids[j] = pts[far]
                point_cost = point_cost.copy()
                point_cost[far] = 0.0
    return centroids, labels, inertia, inertia_path


def kmeans_cluster(points, k: int, max_iters: int = 100, seed: int = 0,
                   n_init: int = 10) -> PrototypeState:
    """Best of ``n_init`` seeded k-means++ starts, each run to a fixpoint.

    Every restart draws its initial centroids from a stream derived from
    ``seed``, runs Lloyd iterations until the assignment stops changing
    (or ``max_iters``), and the lowest-inertia run wins. Empty clusters
    are reseeded to the point currently farthest from its assigned
    centroid. ``inertia_path`` records the winning run's inertia after
    each assignment step.
    """
    pts = points.value if isinstance(points, Matrix) else np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-D array")
    m = pts.shape[0]
    if k < 1:
        raise ValueError("cluster count must be at least 1")
    if k > m:
        raise ValueError(f"cannot form {k} clusters from {m} points")

    best: PrototypeState | None = None
    for restart in range(max(n_init, 1)):
        rng = nm.rng_from_seed(seed, 77, restart)
        centroids, labels, inertia, path = _lloyd(pts, k, _plusplus_init(pts, k, rng), max_iters)
        if best is None or inertia < best.inertia:
            best = PrototypeState(k, centroids, labels, inertia, path)
    return best


def pgc_loss(vc: Matrix, wc: Matrix, classifier: Matrix, labels) -> Matrix:
    """Mean cross-entropy of both modalities' class scores against pseudo labels.

    ``classifier`` is [K, F]; logits are embedding . classifier_row. The
    labels are constants; gradients reach the embeddings and classifier.
    """
    z = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = vc.rows, classifier.rows
    if wc.rows != n:
        raise ValueError("both modality batches must have the same size")
    if z.shape[0] != n:
        raise ValueError(f"need one label per pair, got {z.shape[0]} for batch {n}")
    if z.size and (z.min() < 0 or z.max() >= k):
        bad = int(z[(z < 0) | (z >= k)][0])
        raise ValueError(f"label {bad} outside [0, {k})")
    one_hot = np.zeros((n, k))
    one_hot[np.arange(n), z] = 1.0
    pick = Matrix(one_hot)

    def ce(embeds: Matrix) -> Matrix:
        logits = embeds @ classifier.T
        return nm.sum_all(nm.log_softmax_rows(logits) * pick) * (-1.0 / n)

    return ce(vc) + ce(wc)


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    """Scalar components of one training step and the combined graph node."""

    l_dcl_i: float
    l_mdcl: float
    l_dcl_c: float
    l_pgc: float
    lambda_weight: float
    total: Matrix


def total_loss(l_dcl_i: Matrix | None, l_mdcl: Matrix | None, l_dcl_c: Matrix | None,
               l_pgc: Matrix | None, lambda_weight: float) -> LossReport:
    """lambda * in-batch instance loss + memory loss + concept loss + label loss."""
    zero = Matrix([[0.0]])
    a = l_dcl_i if l_dcl_i is not None else zero
    b = l_mdcl if l_mdcl is not None else zero
    c = l_dcl_c if l_dcl_c is not None else zero
    d = l_pgc if l_pgc is not None else zero
    total = a * lambda_weight + b + c + d
    return LossReport(a.item(), b.item(), c.item(), d.item(), lambda_weight, total)
