"""
Exact t-SNE for projecting penultimate-layer embeddings into three dimensions.

The O(N²) formulation is used throughout: desk-scale embedding sets stay in
the low thousands of points.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist, squareform
from sklearn.metrics import silhouette_score

from .errors import ConfigurationError, InputError, InsufficientInputError
from .labels import Target
from .workspace import atomic_output

log = logging.getLogger(__name__)

MACHINE_EPSILON = np.finfo(np.double).eps
PERPLEXITY_TOLERANCE = 1e-5
MAX_BISECTION_STEPS = 200

N_COMPONENTS = 3
EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
LEARNING_RATE = 200.0
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
MIN_GAIN = 0.01
INIT_STD = 1e-4
KL_EVERY = 10


@dataclass(frozen=True, eq=False)
class TSNEResult:
    points: np.ndarray
    labels: np.ndarray | None
    perplexities: np.ndarray
    kl_history: tuple[tuple[int, float], ...]
    initial_kl: float
    final_kl: float


def _conditional_row(sqdist: np.ndarray, perplexity: float) -> tuple[np.ndarray, float]:
    # shifting by the minimum keeps exp() in range and cancels in the entropy
    shifted = sqdist - sqdist.min()
    beta, lo, hi = 1.0, 0.0, np.inf
    for _ in range(MAX_BISECTION_STEPS):
        p = np.exp(-shifted * beta)
        total = p.sum()
        p /= total
        achieved = float(np.exp(np.log(total) + beta * np.dot(shifted, p)))
        if abs(achieved - perplexity) <= PERPLEXITY_TOLERANCE:
            break
        if achieved > perplexity:
            lo = beta
            beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
        else:
            hi = beta
            beta = beta / 2.0 if lo == 0.0 else (beta + lo) / 2.0
    return p, achieved


def conditional_probabilities(X: np.ndarray, perplexity: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Row-stochastic Gaussian neighbour probabilities ``p(j|i)``.

    Each row's precision is bisected until the perplexity ``exp(H(P_i))`` is
    within ``PERPLEXITY_TOLERANCE`` of the target. Returns the matrix and the
    perplexity each row achieved.
    """
    sqdist = squareform(pdist(X, "sqeuclidean"))
    n = X.shape[0]
    P = np.zeros((n, n))
    achieved = np.empty(n)
    others = ~np.eye(n, dtype=bool)
    for i in range(n):
        P[i, others[i]], achieved[i] = _conditional_row(sqdist[i, others[i]], perplexity)

    missed = np.flatnonzero(np.abs(achieved - perplexity) > PERPLEXITY_TOLERANCE)
    if missed.size:
        log.warning("%d points did not reach perplexity %.1f (duplicate inputs?)", missed.size, perplexity)
    return P, achieved


def _joint_probabilities(P_conditional: np.ndarray) -> np.ndarray:
    P = P_conditional + P_conditional.T
    P /= np.maximum(P.sum(), MACHINE_EPSILON)
    return np.maximum(P, MACHINE_EPSILON)


def _kl_and_gradient(Y: np.ndarray, P: np.ndarray) -> tuple[float, np.ndarray]:
    num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), MACHINE_EPSILON)

    off = ~np.eye(P.shape[0], dtype=bool)
    kl = float(np.sum(P[off] * np.log(P[off] / Q[off])))

    PQd = (P - Q) * num
    grad = 4.0 * (np.diag(PQd.sum(axis=1)) - PQd) @ Y
    return kl, grad


def tsne_3d(
    X: np.ndarray,
    labels: np.ndarray | None = None,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
) -> TSNEResult:
    """
    Embed ``X`` (N×E) into three dimensions.

    Gradient descent with per-coordinate gains runs with early exaggeration
    of ``P`` and momentum 0.5 for the first 250 iterations, then with the
    true ``P`` and momentum 0.8. ``initial_kl`` is the divergence when the
    exaggeration is lifted.

    Raises:
        InsufficientInputError: fewer than ``3 * perplexity + 1`` points
        InputError: non-finite embeddings
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError(f"Expected an N×E matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise InputError("Embeddings contain NaN or infinite values")
    if X.shape[0] <= 3 * perplexity:
        raise InsufficientInputError(
            f"{X.shape[0]} points are too few for perplexity {perplexity}; need more than {3 * perplexity:g}"
        )
    if iterations <= EXAGGERATION_ITERS:
        raise ConfigurationError(f"iterations must exceed the {EXAGGERATION_ITERS} exaggeration iterations, got {iterations}")

    P_conditional, achieved = conditional_probabilities(X, perplexity)
    P = _joint_probabilities(P_conditional)

    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, INIT_STD, size=(X.shape[0], N_COMPONENTS))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history: list[tuple[int, float]] = []
    initial_kl = np.nan

    for it in range(iterations):
        early = it < EXAGGERATION_ITERS
        kl, grad = _kl_and_gradient(Y, P * EXAGGERATION if early else P)
        if not early:
            if it == EXAGGERATION_ITERS:
                initial_kl = kl
            if it % KL_EVERY == 0:
                history.append((it, kl))

        inc = update * grad < 0.0
        gains[inc] += 0.2
        gains[~inc] *= 0.8
        np.clip(gains, MIN_GAIN, None, out=gains)
        update = (MOMENTUM_EARLY if early else MOMENTUM_LATE) * update - LEARNING_RATE * gains * grad
        Y = Y + update

    final_kl, _ = _kl_and_gradient(Y, P)
    history.append((iterations, final_kl))
    log.info("t-SNE on %d points: KL %.4f -> %.4f", X.shape[0], initial_kl, final_kl)
    return TSNEResult(
        points=Y,
        labels=None if labels is None else np.asarray(labels),
        perplexities=achieved,
        kl_history=tuple(history),
        initial_kl=initial_kl,
        final_kl=final_kl,
    )


def separation_score(result: TSNEResult) -> float:
    """Silhouette score of the projected points under their labels."""
    if result.labels is None or np.unique(result.labels).size < 2:
        raise InputError("Separation needs at least two distinct labels")
    return float(silhouette_score(result.points, result.labels))


def save_points(path: Path, result: TSNEResult) -> Path:
    frame = pd.DataFrame(result.points, columns=["x", "y", "z"])
    frame["label"] = result.labels if result.labels is not None else ""
    with atomic_output(path) as tmp:
        frame.to_csv(tmp, index=False)
    return path


def plot_points(path: Path, result: TSNEResult) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig = plt.figure(figsize=(7, 6))
    ax = fig.add_subplot(projection="3d")
    labels = result.labels if result.labels is not None else np.zeros(len(result.points), dtype=int)
    for value in np.unique(labels):
        mask = labels == value
        name = Target(int(value)).word if np.issubdtype(labels.dtype, np.integer) and 0 <= value < len(Target) else str(value)
        ax.scatter(*result.points[mask].T, s=6, label=name)
    ax.legend(loc="upper right", markerscale=3)
    with atomic_output(path) as tmp:
        fig.savefig(tmp, format="png", dpi=120)
    plt.close(fig)
    return path
