"""Neighbor-preserving 2D embedding for latent-space plots.

A compact exact-affinity embedder in the stochastic-neighbor family:
Gaussian input affinities with per-point bandwidth calibrated to a fixed
perplexity, a heavy-tailed low-dimensional kernel, and momentum gradient
descent from a PCA start with seeded tie-break jitter.  The contract is
neighborhood preservation (quantified by k-NN overlap), not parity with
any particular off-the-shelf algorithm.
"""

from __future__ import annotations

import numpy as np

PERPLEXITY = 15.0
ITERATIONS = 400
LEARNING_RATE = 100.0
MOMENTUM = 0.8
EARLY_EXAGGERATION = 4.0
EXAGGERATION_ITERS = 80
JITTER = 1e-4


class EmbeddingError(Exception):
    """Invalid embedding input."""


def _pairwise_sq_dists(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def _calibrate_affinities(d2: np.ndarray, perplexity: float) -> np.ndarray:
    """Per-row Gaussian affinities whose entropy matches log(perplexity),
    found by bisection on the bandwidth."""
    n = d2.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        row = np.delete(d2[i], i)
        lo, hi = 1e-20, 1e20
        beta = 1.0
        for _ in range(60):
            p = np.exp(-row * beta)
            total = p.sum()
            if total <= 0:
                entropy = 0.0
                p = np.zeros_like(p)
            else:
                p = p / total
                nz = p[p > 0]
                entropy = float(-(nz * np.log(nz)).sum())
            if abs(entropy - target) < 1e-7:
                break
            if entropy > target:
                lo = beta
                beta = beta * 2 if hi >= 1e20 else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = beta / 2 if lo <= 1e-20 else 0.5 * (beta + lo)
        P[i, np.arange(n) != i] = p
    P = (P + P.T) / (2.0 * n)
    return np.maximum(P, 1e-14)


def _pca_2d(X: np.ndarray) -> np.ndarray:
    centered = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:2].T
    if coords.shape[1] < 2:
        coords = np.column_stack([coords, np.zeros(len(coords))])
    return coords


def embed_2d(vectors: np.ndarray, seed: int = 0, iterations: int = ITERATIONS) -> np.ndarray:
    """Deterministic 2D embedding of >= 3 row vectors.

    Identical input rows stay coincident up to the declared jitter
    epsilon (1e-4 scale noise added to break exact ties at the start).
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise EmbeddingError("embedding needs at least 3 row vectors")
    n = X.shape[0]
    perplexity = min(PERPLEXITY, (n - 1) / 3.0)
    perplexity = max(perplexity, 1.01)

    d2 = _pairwise_sq_dists(X)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE3BD]))
    if d2.max() <= 0.0:
        # fully degenerate input: keep all points coincident up to jitter
        return rng.normal(0.0, JITTER, size=(n, 2))

    P = _calibrate_affinities(d2, perplexity)
    Y = _pca_2d(X)
    scale = np.std(Y)
    Y = Y / (scale if scale > 0 else 1.0) * 1e-2
    Y = Y + rng.normal(0.0, JITTER, size=Y.shape)

    velocity = np.zeros_like(Y)
    for it in range(iterations):
        d2 = _pairwise_sq_dists(Y)
        w = 1.0 / (1.0 + d2)
        np.fill_diagonal(w, 0.0)
        Q = np.maximum(w / w.sum(), 1e-14)
        exaggeration = EARLY_EXAGGERATION if it < EXAGGERATION_ITERS else 1.0
        PQ = (exaggeration * P - Q) * w
        grad = 4.0 * ((np.diag(PQ.sum(axis=1)) - PQ) @ Y)
        velocity = MOMENTUM * velocity - LEARNING_RATE * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
    return Y


def knn_overlap(X: np.ndarray, Y: np.ndarray, k: int = 10) -> float:
    """Mean fraction of each point's k nearest neighbors preserved by the
    embedding; the embedder's declared quality statistic."""
    n = X.shape[0]
    k = min(k, n - 1)
    dx = _pairwise_sq_dists(np.asarray(X, dtype=np.float64))
    dy = _pairwise_sq_dists(np.asarray(Y, dtype=np.float64))
    np.fill_diagonal(dx, np.inf)
    np.fill_diagonal(dy, np.inf)
    overlaps = []
    for i in range(n):
        nx = set(np.argsort(dx[i], kind="stable")[:k].tolist())
        ny = set(np.argsort(dy[i], kind="stable")[:k].tolist())
        overlaps.append(len(nx & ny) / k)
    return float(np.mean(overlaps))


def write_coordinates(path, utterance_ids, coords: np.ndarray, severities=None, text_ids=None) -> None:
    """Delimited 2D coordinates, one row per utterance."""
    with open(path, "w") as fh:
        header = ["utterance_id", "x", "y"]
        if severities is not None:
            header.append("severity")
        if text_ids is not None:
            header.append("text_id")
        fh.write("\t".join(header) + "\n")
        for i, utt_id in enumerate(utterance_ids):
            cells = [utt_id, f"{coords[i, 0]:.12g}", f"{coords[i, 1]:.12g}"]
            if severities is not None:
                cells.append(str(int(severities[i])))
            if text_ids is not None:
                cells.append(str(int(text_ids[i])))
            fh.write("\t".join(cells) + "\n")
