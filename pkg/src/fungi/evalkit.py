"""Evaluation protocols over feature banks.

Everything here is deterministic: neighbor ties break by sample order, vote
ties by summed inverse distance then class id, and all stochastic steps
(few-shot subsets, k-means init, probe splits) take explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# ---------------------------------------------------------------------------
# k-nearest-neighbor classification
# ---------------------------------------------------------------------------


@dataclass
class KnnIndex:
    features: np.ndarray
    labels: np.ndarray
    k: int = 20

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or len(self.features) == 0:
            raise ValueError("index needs a non-empty (n, d) feature matrix")
        if len(self.labels) != len(self.features):
            raise ValueError("labels do not match feature rows")
        if self.k < 1:
            raise ValueError("k must be at least 1")


def _vote(neighbor_labels, neighbor_dists):
    """Majority vote; ties by larger summed inverse distance, then class id."""
    classes, counts = np.unique(neighbor_labels, return_counts=True)
    winners = classes[counts == counts.max()]
    if len(winners) == 1:
        return winners[0]
    inv = 1.0 / (neighbor_dists + 1e-12)
    weights = {c: inv[neighbor_labels == c].sum() for c in winners}
    best = max(weights.values())
    tied = sorted(c for c, w in weights.items() if w == best)
    return tied[0]


def knn_classify(index, queries, k=None):
    """Predicted label per query by majority vote over the k nearest rows.

    Distances are exact Euclidean; neighbor ties at equal distance resolve
    to the lower row id (stable sort).
    """
    k = index.k if k is None else k
    if k > len(index.features):
        raise ValueError(f"k={k} exceeds index size {len(index.features)}")
    queries = np.asarray(queries, dtype=np.float64)
    single = queries.ndim == 1
    if single:
        queries = queries[None]
    preds = np.empty(len(queries), dtype=index.labels.dtype)
    for qi, q in enumerate(queries):
        dists = np.sqrt(np.sum((index.features - q) ** 2, axis=1))
        order = np.argsort(dists, kind="stable")[:k]
        preds[qi] = _vote(index.labels[order], dists[order])
    return preds[0] if single else preds


def few_shot_subset(labels, shots=5, seed=0):
    """Indices of a seeded stratified subset with `shots` rows per class."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    picked = []
    for cls in np.unique(labels):
        rows = np.flatnonzero(labels == cls)
        if len(rows) < shots:
            raise ValueError(f"class {cls} has {len(rows)} samples, needs {shots}")
        picked.append(rng.choice(rows, size=shots, replace=False))
    return np.sort(np.concatenate(picked))


def per_class_accuracy(preds, labels):
    """Recall per class present in the labels."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    return {
        int(c): float(np.mean(preds[labels == c] == c)) for c in np.unique(labels)
    }


def accuracy(preds, labels, mode="top1"):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if len(preds) != len(labels):
        raise ValueError("prediction/label length mismatch")
    if len(preds) == 0:
        raise ValueError("empty input")
    if mode == "top1":
        return float(np.mean(preds == labels))
    if mode == "mean_per_class":
        return float(np.mean(list(per_class_accuracy(preds, labels).values())))
    raise ValueError(f"unknown accuracy mode {mode!r}")


def per_class_delta(per_class_a, per_class_b):
    """Per-class accuracy differences a - b; class sets must agree."""
    if set(per_class_a) != set(per_class_b):
        raise ValueError("per-class reports cover different class sets")
    return {c: per_class_a[c] - per_class_b[c] for c in sorted(per_class_a)}


# ---------------------------------------------------------------------------
# representation similarity
# ---------------------------------------------------------------------------


def linear_cka(x, y):
    """Linear centered kernel alignment between two feature matrices."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("CKA expects (n, p) and (n, q) matrices")
    if x.shape[0] < 2:
        raise ValueError("CKA needs at least 2 rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    hsic = np.linalg.norm(yc.T @ xc) ** 2
    nx = np.linalg.norm(xc.T @ xc)
    ny = np.linalg.norm(yc.T @ yc)
    if nx == 0 or ny == 0:
        raise ValueError("zero-variance input to CKA")
    return float(hsic / (nx * ny))


# ---------------------------------------------------------------------------
# clustering and assignment
# ---------------------------------------------------------------------------


@dataclass
class KmeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int


def _plusplus_init(x, n_clusters, rng):
    n = len(x)
    centroids = np.empty((n_clusters, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for i in range(1, n_clusters):
        total = d2.sum()
        if total == 0:
            centroids[i] = x[rng.integers(n)]
            continue
        centroids[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centroids[i]) ** 2, axis=1))
    return centroids


def kmeans(x, n_clusters, seed=0, max_iter=300, tol=1e-6):
    """Lloyd iterations from a seeded k-means++ start.

    Empty clusters are reseeded from the point farthest from its centroid.
    Stops when the largest centroid shift falls below tol.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n_clusters > n:
        raise ValueError("more clusters than points")
    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(x, n_clusters, rng)
    x_sq = np.sum(x * x, axis=1)
    assignments = np.zeros(n, dtype=np.int64)
    for iteration in range(1, max_iter + 1):
        d2 = x_sq[:, None] - 2.0 * (x @ centroids.T) + np.sum(centroids**2, axis=1)
        assignments = np.argmin(d2, axis=1)
        new_centroids = centroids.copy()
        point_d2 = d2[np.arange(n), assignments]
        for c in range(n_clusters):
            members = assignments == c
            if members.any():
                new_centroids[c] = x[members].mean(axis=0)
            else:
                farthest = int(np.argmax(point_d2))
                new_centroids[c] = x[farthest]
                point_d2[farthest] = 0.0
        shift = np.sqrt(np.max(np.sum((new_centroids - centroids) ** 2, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    d2 = x_sq[:, None] - 2.0 * (x @ centroids.T) + np.sum(centroids**2, axis=1)
    assignments = np.argmin(d2, axis=1)
    inertia = float(np.sum((x - centroids[assignments]) ** 2))
    return KmeansResult(
        assignments=assignments,
        centroids=centroids,
        inertia=inertia,
        n_iter=iteration,
    )


def hungarian(cost):
    """Minimum-cost assignment via the potentials (Jonker-Volgenant) method.

    Accepts any rectangular matrix; it is padded to square with zeros.
    Returns (row_to_col, total_cost) where entries assigned to padding
    columns are -1.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n_rows, n_cols = cost.shape
    size = max(n_rows, n_cols)
    padded = np.zeros((size, size))
    padded[:n_rows, :n_cols] = cost

    u = np.zeros(size + 1)
    v = np.zeros(size + 1)
    col_row = np.zeros(size + 1, dtype=np.int64)  # col j (1-based) -> row
    way = np.zeros(size + 1, dtype=np.int64)
    for row in range(1, size + 1):
        col_row[0] = row
        j0 = 0
        minv = np.full(size + 1, np.inf)
        used = np.zeros(size + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            cur = padded[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:] = np.where(better, cur, minv[1:])
            way[1:] = np.where(better, j0, way[1:])
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[col_row[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if col_row[j0] == 0:
                break
        while j0:
            j_prev = way[j0]
            col_row[j0] = col_row[j_prev]
            j0 = j_prev

    row_to_col = np.full(size, -1, dtype=np.int64)
    for j in range(1, size + 1):
        if col_row[j] > 0:
            row_to_col[col_row[j] - 1] = j - 1
    row_to_col = row_to_col[:n_rows]
    total = 0.0
    for r, c in enumerate(row_to_col):
        if 0 <= c < n_cols:
            total += cost[r, c]
        else:
            row_to_col[r] = -1
    return row_to_col, float(total)


def cluster_overlap(assignments, labels):
    """Fraction of points whose cluster maps to their class under the
    optimal cluster/class matching (cost = -overlap)."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    clusters = np.unique(assignments)
    classes = np.unique(labels)
    contingency = np.zeros((len(clusters), len(classes)))
    for ci, c in enumerate(clusters):
        member_labels = labels[assignments == c]
        for ki, k in enumerate(classes):
            contingency[ci, ki] = np.sum(member_labels == k)
    mapping, _ = hungarian(-contingency)
    matched = sum(
        contingency[ci, col] for ci, col in enumerate(mapping) if col >= 0
    )
    return float(matched / len(labels))


# ---------------------------------------------------------------------------
# logistic probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeModel:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    classes: np.ndarray

    def predict(self, x):
        scores = np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias
        return self.classes[np.argmax(scores, axis=1)]

    def predict_proba(self, x):
        scores = np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        return e / e.sum(axis=1, keepdims=True)


def probe_loss_and_grad(wb, x, y_index, n_classes, lam):
    """Mean cross-entropy + 0.5 * lam * ||W||^2 (bias unpenalized).

    wb is the flat concatenation of W (C, D) and b (C,). Returns
    (loss, gradient) for the full batch.
    """
    n, dim = x.shape
    w = wb[: n_classes * dim].reshape(n_classes, dim)
    b = wb[n_classes * dim :]
    scores = x @ w.T + b
    scores -= scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(scores).sum(axis=1))
    ce = float(np.mean(log_z - scores[np.arange(n), y_index]))
    loss = ce + 0.5 * lam * float(np.sum(w * w))
    probs = np.exp(scores - log_z[:, None])
    probs[np.arange(n), y_index] -= 1.0
    gw = probs.T @ x / n + lam * w
    gb = probs.sum(axis=0) / n
    return loss, np.concatenate([gw.ravel(), gb])


def _train_logreg(x, y_index, n_classes, lam, max_epochs, grad_tol=1e-8):
    dim = x.shape[1]
    wb = np.zeros(n_classes * dim + n_classes)
    loss, grad = probe_loss_and_grad(wb, x, y_index, n_classes, lam)
    step = 1.0
    for _ in range(max_epochs):
        if np.max(np.abs(grad)) < grad_tol:
            break
        g2 = float(np.sum(grad * grad))
        improved = False
        while step > 1e-12:
            candidate = wb - step * grad
            new_loss, new_grad = probe_loss_and_grad(candidate, x, y_index, n_classes, lam)
            if new_loss <= loss - 0.5 * step * g2:
                improved = True
                break
            step *= 0.5
        if not improved:
            break  # at the numerical limit of the line search
        wb, loss, grad = candidate, new_loss, new_grad
        step = min(step * 2.0, 1e6)
    return wb, loss


def _stratified_split(labels, val_fraction, seed):
    rng = np.random.default_rng(seed)
    train_rows, val_rows = [], []
    for cls in np.unique(labels):
        rows = np.flatnonzero(labels == cls)
        rows = rows[rng.permutation(len(rows))]
        n_val = max(1, int(round(len(rows) * val_fraction)))
        val_rows.append(rows[:n_val])
        train_rows.append(rows[n_val:])
    return np.sort(np.concatenate(train_rows)), np.sort(np.concatenate(val_rows))


@dataclass
class ProbeResult:
    model: ProbeModel
    best_lambda: float
    val_accuracy: float
    lambda_grid: np.ndarray


def logistic_probe(
    train_x,
    train_y,
    val_x=None,
    val_y=None,
    lambda_grid=None,
    max_epochs=300,
    seed=0,
):
    """L2-regularized multinomial logistic regression with grid-searched
    regularization strength.

    The best lambda is chosen by validation accuracy (an 80/20 stratified
    split of the training set is generated when no validation split is
    given); the returned model is refit on the full training set.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    classes = np.unique(train_y)
    if len(classes) < 2:
        raise ValueError("probe needs at least two classes")
    if lambda_grid is None:
        lambda_grid = np.linspace(5e-6, 5e-4, 5)
    lambda_grid = np.asarray(lambda_grid, dtype=np.float64)

    class_index = {c: i for i, c in enumerate(classes)}
    y_index = np.array([class_index[c] for c in train_y])

    if val_x is None:
        fit_rows, val_rows = _stratified_split(train_y, 0.2, seed)
        fit_x, fit_y = train_x[fit_rows], y_index[fit_rows]
        sel_x, sel_y = train_x[val_rows], y_index[val_rows]
    else:
        fit_x, fit_y = train_x, y_index
        sel_x = np.asarray(val_x, dtype=np.float64)
        sel_y = np.array([class_index[c] for c in np.asarray(val_y)])

    best = None
    for lam in lambda_grid:
        wb, _ = _train_logreg(fit_x, fit_y, len(classes), lam, max_epochs)
        dim = train_x.shape[1]
        w = wb[: len(classes) * dim].reshape(len(classes), dim)
        b = wb[len(classes) * dim :]
        preds = np.argmax(sel_x @ w.T + b, axis=1)
        acc = float(np.mean(preds == sel_y))
        if best is None or acc > best[0]:
            best = (acc, float(lam))

    val_acc, best_lambda = best
    wb, _ = _train_logreg(train_x, y_index, len(classes), best_lambda, max_epochs)
    dim = train_x.shape[1]
    model = ProbeModel(
        weights=wb[: len(classes) * dim].reshape(len(classes), dim),
        bias=wb[len(classes) * dim :],
        classes=classes,
    )
    return ProbeResult(
        model=model,
        best_lambda=best_lambda,
        val_accuracy=val_acc,
        lambda_grid=lambda_grid,
    )


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


def average_precision(ranked_relevant):
    """AP of a ranked 0/1 relevance vector."""
    ranked_relevant = np.asarray(ranked_relevant, dtype=bool)
    n_rel = int(ranked_relevant.sum())
    if n_rel == 0:
        return 0.0
    hits = np.cumsum(ranked_relevant)
    ranks = np.arange(1, len(ranked_relevant) + 1)
    return float(np.sum((hits / ranks)[ranked_relevant]) / n_rel)


def retrieval_map(query_features, gallery_features, relevance, skip_empty=True):
    """Mean average precision of cosine-ranked galleries.

    relevance[i] is the set (or array) of gallery row ids relevant to query
    i. Queries with no relevant items are skipped when skip_empty is set,
    otherwise they contribute an AP of zero.
    """
    gallery = np.asarray(gallery_features, dtype=np.float64)
    queries = np.asarray(query_features, dtype=np.float64)
    if gallery.size == 0:
        raise ValueError("empty gallery")
    gallery_n = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    queries_n = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    aps = []
    for qi in range(len(queries_n)):
        rel = np.zeros(len(gallery), dtype=bool)
        ids = np.asarray(sorted(relevance[qi]), dtype=np.int64)
        if ids.size:
            rel[ids] = True
        if not rel.any():
            if skip_empty:
                continue
            aps.append(0.0)
            continue
        sims = gallery_n @ queries_n[qi]
        order = np.argsort(-sims, kind="stable")
        aps.append(average_precision(rel[order]))
    if not aps:
        raise ValueError("no query had relevant gallery items")
    return float(np.mean(aps)), aps


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    metric: str
    value: float
    per_class: dict = None
    config: dict = field(default_factory=dict)

    def csv_rows(self):
        rows = [("metric", "class", "value")]
        rows.append((self.metric, "", f"{self.value:.6f}"))
        if self.per_class:
            for cls in sorted(self.per_class):
                rows.append((self.metric, str(cls), f"{self.per_class[cls]:.6f}"))
        return rows


def write_csv(path, reports, config_lines=()):
    with open(path, "w", encoding="utf-8") as fh:
        for line in config_lines:
            fh.write(f"# {line}\n")
        fh.write("metric,class,value\n")
        for report in reports:
            for metric, cls, value in report.csv_rows()[1:]:
                fh.write(f"{metric},{cls},{value}\n")


def render_table(rows, header):
    """Aligned-text table for terminal output."""
    rows = [[str(c) for c in row] for row in rows]
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)
