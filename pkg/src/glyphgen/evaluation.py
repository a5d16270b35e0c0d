"""Quantitative evaluation: feature-space Fréchet distance with the frozen
teacher as feature extractor, linear probing of representations, k-means
cluster purity, and attribute-level grading of conditional samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data
from . import tokenizer as tok


# ------------------------------------------------------------- Fréchet


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian summary of a feature set: mean, covariance, sample count."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    @staticmethod
    def from_features(features: np.ndarray) -> "FeatureStats":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"features must be (M, d), got shape {x.shape}")
        m = x.shape[0]
        if m < 2:
            raise ValueError("need at least 2 samples for a covariance")
        mu = x.mean(axis=0)
        d = x - mu
        cov = d.T @ d / (m - 1)
        cov = 0.5 * (cov + cov.T)
        return FeatureStats(mean=mu, cov=cov, count=m)


def _clipped_eigh(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition with tiny negative eigenvalues clipped.

    Eigenvalues of a PSD matrix can come out slightly negative in floats;
    anything above -1e-8 (relative to the largest eigenvalue) is treated as
    rounding noise and clipped to zero.
    """
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    scale = max(float(vals.max(initial=0.0)), 1.0)
    floor = -1e-8 * scale
    if vals.min(initial=0.0) < floor:
        raise ValueError("covariance has a significantly negative eigenvalue; "
                         "input is not a valid feature covariance")
    return np.maximum(vals, 0.0), vecs


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||μ_A − μ_B||² + tr(Σ_A + Σ_B − 2 (Σ_A Σ_B)^{1/2}).

    The product square-root trace is computed as tr((Σ_A^{1/2} Σ_B
    Σ_A^{1/2})^{1/2}), whose inner matrix is symmetric PSD, via symmetric
    eigendecomposition — stable at small feature dimensions.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0  # exact answer; skips eigendecomposition round-off
    va, ua = _clipped_eigh(a.cov)
    root_a = (ua * np.sqrt(va)) @ ua.T
    inner = root_a @ b.cov @ root_a
    vm, _ = _clipped_eigh(inner)
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov)
               - 2.0 * np.sqrt(vm).sum())
    # The exact value is ≥ 0; eigendecomposition noise can leave a tiny
    # negative residue when the stats are (nearly) identical.
    return max(fd, 0.0)


def feature_stats(teacher: tok.TeacherClassifier, images: np.ndarray,
                  batch: int = 64) -> FeatureStats:
    """Gaussian summary of the teacher's mean-pooled features of images."""
    feats = []
    for i in range(0, images.shape[0], batch):
        feats.append(teacher.features(images[i:i + batch]))
    return FeatureStats.from_features(np.concatenate(feats, axis=0))


# --------------------------------------------------------- linear probe


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(features: np.ndarray, labels: np.ndarray, folds: int = 5,
                 steps: int = 400, lr: float = 0.5) -> float:
    """Cross-validated accuracy of multinomial logistic regression trained
    by full-batch gradient descent on frozen features.

    Features are standardized with training-fold statistics; folds are
    contiguous chunks of a fixed seeded shuffle, so the result is
    deterministic for fixed inputs.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("expected features (M, d) and labels (M,)")
    classes = np.unique(y)
    n_classes = classes.size
    m = x.shape[0]
    if m < folds * n_classes:
        raise ValueError(f"need at least folds*classes = {folds * n_classes} "
                         f"samples, got {m}")
    y_idx = np.searchsorted(classes, y)
    order = np.random.default_rng(12345).permutation(m)
    fold_sizes = np.full(folds, m // folds)
    fold_sizes[: m % folds] += 1
    bounds = np.concatenate([[0], np.cumsum(fold_sizes)])
    hits = 0
    for f in range(folds):
        val_rows = order[bounds[f]:bounds[f + 1]]
        train_rows = np.concatenate([order[:bounds[f]], order[bounds[f + 1]:]])
        ytr = y_idx[train_rows]
        if np.unique(ytr).size < 2:
            raise ValueError("degenerate single-class training fold")
        mu = x[train_rows].mean(axis=0)
        sd = x[train_rows].std(axis=0)
        sd = np.maximum(sd, 1e-8)
        xtr = (x[train_rows] - mu) / sd
        xva = (x[val_rows] - mu) / sd
        w = np.zeros((x.shape[1], n_classes))
        bias = np.zeros(n_classes)
        onehot = np.eye(n_classes)[ytr]
        inv_n = 1.0 / xtr.shape[0]
        for _ in range(steps):
            delta = (_softmax_rows(xtr @ w + bias) - onehot) * inv_n
            w -= lr * (xtr.T @ delta)
            bias -= lr * delta.sum(axis=0)
        pred = np.argmax(xva @ w + bias, axis=1)
        hits += int((pred == y_idx[val_rows]).sum())
    return hits / m


# -------------------------------------------------------- cluster purity


def _kmeans_once(x: np.ndarray, k: int, rng) -> tuple[np.ndarray, float]:
    centers = x[rng.choice(x.shape[0], size=k, replace=False)].copy()
    assign = np.full(x.shape[0], -1)
    for _ in range(100):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            rows = assign == c
            if rows.any():
                centers[c] = x[rows].mean(axis=0)
    inertia = float(((x - centers[assign]) ** 2).sum())
    return assign, inertia


def cluster_purity(features: np.ndarray, labels: np.ndarray, k: int,
                   restarts: int = 20, seed: int = 0) -> float:
    """Purity of the best-inertia k-means clustering over fixed restarts:
    each cluster votes its majority label; purity = fraction covered."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("expected features (M, d) and labels (M,)")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > x.shape[0]:
        raise ValueError(f"k = {k} exceeds the number of samples {x.shape[0]}")
    rng = np.random.default_rng(seed)
    best_assign, best_inertia = None, np.inf
    for _ in range(restarts):
        assign, inertia = _kmeans_once(x, k, rng)
        if inertia < best_inertia:
            best_assign, best_inertia = assign, inertia
    covered = 0
    for c in range(k):
        rows = y[best_assign == c]
        if rows.size:
            covered += int(np.bincount(rows).max())
    return covered / x.shape[0]


# --------------------------------------------- conditional sample grading


def grade_conditional_samples(samples, teacher: tok.TeacherClassifier) -> dict:
    """Attribute-level accuracy of conditional samples under the teacher.

    samples: iterable of (cond_id, image) pairs. Returns the fraction of
    samples whose predicted (shape, color, position) matches the
    conditioning class, per attribute and overall.
    """
    pairs = list(samples)
    if not pairs:
        raise ValueError("no samples to grade")
    cond = np.asarray([int(c) for c, _ in pairs])
    images = np.stack([np.asarray(img, dtype=np.float32) for _, img in pairs])
    pred = teacher.predict(images)
    want = np.stack(data.decompose_class(cond), axis=1)
    got = np.stack(data.decompose_class(pred), axis=1)
    match = want == got
    return {
        "overall": float(match.all(axis=1).mean()),
        "shape": float(match[:, 0].mean()),
        "color": float(match[:, 1].mean()),
        "position": float(match[:, 2].mean()),
    }
