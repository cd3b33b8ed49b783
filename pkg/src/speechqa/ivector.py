"""Total-variability front-end: GMM-UBM, Baum-Welch statistics, i-vectors.

The mean supervector of an utterance is modeled as the UBM supervector plus a
low-rank term, M = m + T w, with a standard-normal prior on w; the i-vector is
the posterior mean of w given the utterance's sufficient statistics.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import container
from .errors import DataError

VARIANCE_FLOOR = 1e-4


@dataclass
class GmmModel:
    """Diagonal-covariance GMM: weights (K,), means (K, F), variances (K, F)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-10:
            raise DataError("GMM weights must sum to 1")
        if np.any(self.variances < VARIANCE_FLOOR - 1e-12):
            raise DataError("GMM variances below the floor")

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def log_responsibilities(self, frames):
        """Per-frame log posteriors over components, shape (T, K)."""
        frames = np.atleast_2d(frames)
        diff = frames[:, None, :] - self.means[None, :, :]          # (T, K, F)
        log_p = -0.5 * np.sum(diff * diff / self.variances[None], axis=2)
        log_p -= 0.5 * np.sum(np.log(2 * np.pi * self.variances), axis=1)[None, :]
        log_p += np.log(self.weights)[None, :]
        return log_p - logsumexp(log_p, axis=1, keepdims=True), log_p

    def log_likelihood(self, frames):
        _, log_p = self.log_responsibilities(frames)
        return float(np.sum(logsumexp(log_p, axis=1)))


@dataclass
class SufficientStats:
    """Zeroth-order counts and UBM-centered first-order sums of one utterance."""

    n: np.ndarray        # (K,)
    f: np.ndarray        # (K, F), sum_t gamma_tk (o_t - m_k)
    n_frames: int


@dataclass
class TvMatrix:
    """Total-variability subspace plus the UBM supervector it centers on."""

    t: np.ndarray                 # (K*F, D)
    ubm: GmmModel

    @property
    def dim(self):
        return self.t.shape[1]


def _kmeanspp_init(frames, k, rng):
    """k-means++ seeding for the EM means."""
    n = len(frames)
    centers = [frames[rng.integers(n)]]
    d2 = np.sum((frames - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        probs = d2 / max(d2.sum(), 1e-300)
        centers.append(frames[rng.choice(n, p=probs)])
        d2 = np.minimum(d2, np.sum((frames - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def train_ubm(frames, n_components, iterations=20, rng=None, history=None):
    """EM training of the UBM with k-means++ initialization.

    The total log-likelihood is nondecreasing across iterations (appended to
    `history` when given); variances are floored at 1e-4.
    """
    rng = rng or np.random.default_rng()
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    n, dim = frames.shape
    if n_components < 1 or n_components > n:
        raise DataError(f"need 1 <= K <= {n} frames, got K={n_components}")

    means = _kmeanspp_init(frames, n_components, rng)
    variances = np.tile(np.maximum(frames.var(axis=0), VARIANCE_FLOOR),
                        (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)
    gmm = GmmModel(weights, means, variances)

    for _ in range(iterations):
        log_gamma, log_p = gmm.log_responsibilities(frames)
        if history is not None:
            history.append(float(np.sum(logsumexp(log_p, axis=1))))
        gamma = np.exp(log_gamma)
        nk = gamma.sum(axis=0) + 1e-12
        means = (gamma.T @ frames) / nk[:, None]
        second = (gamma.T @ (frames * frames)) / nk[:, None]
        variances = np.maximum(second - means * means, VARIANCE_FLOOR)
        weights = nk / nk.sum()
        gmm = GmmModel(weights, means, variances)
    if history is not None:
        history.append(gmm.log_likelihood(frames))
    return gmm


def baum_welch_stats(gmm, frames):
    """Soft-count statistics of one utterance under the UBM."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.size == 0:
        raise DataError("empty utterance")
    if frames.shape[1] != gmm.dim:
        raise DataError(f"frame dim {frames.shape[1]} != GMM dim {gmm.dim}")
    log_gamma, _ = gmm.log_responsibilities(frames)
    gamma = np.exp(log_gamma)
    n = gamma.sum(axis=0)
    f = gamma.T @ frames - n[:, None] * gmm.means
    return SufficientStats(n, f, len(frames))


def _posterior(tv, stats):
    """Posterior precision, mean, and data-dependent log-evidence terms of w."""
    k, dim = tv.ubm.means.shape
    t = tv.t
    sigma_inv = (1.0 / tv.ubm.variances).reshape(k * dim)
    n_expanded = np.repeat(stats.n, dim)
    f_vec = stats.f.reshape(k * dim)
    tsi = t * sigma_inv[:, None]                        # Sigma^-1-weighted rows
    precision = np.eye(tv.dim) + t.T @ (tsi * n_expanded[:, None])
    b = tsi.T @ f_vec
    mean = np.linalg.solve(precision, b)
    return precision, mean, b


def extract_ivector(tv, stats):
    """Posterior mean of w: (I + T' Sigma^-1 N T)^-1 T' Sigma^-1 f."""
    if not (np.all(np.isfinite(stats.n)) and np.all(np.isfinite(stats.f))):
        raise DataError("non-finite sufficient statistics")
    _, mean, _ = _posterior(tv, stats)
    return mean


def _tv_objective(precision, mean, b):
    """T-dependent part of the marginal log-likelihood of one utterance."""
    sign, logdet = np.linalg.slogdet(precision)
    return -0.5 * sign * logdet + 0.5 * float(b @ mean)


def train_tv(stats_list, ubm, dim, iterations=10, rng=None, history=None):
    """EM estimation of the total-variability matrix.

    E-step: posterior of w per utterance. M-step: per-component row solves.
    The summed marginal-likelihood objective is nondecreasing (appended to
    `history` when given). Near-singular M-step systems get a 1e-6 ridge.
    """
    rng = rng or np.random.default_rng()
    if dim < 1:
        raise DataError("i-vector dimension must be >= 1")
    k, f_dim = ubm.means.shape
    t = 0.1 * rng.standard_normal((k * f_dim, dim))
    tv = TvMatrix(t, ubm)

    for _ in range(iterations):
        a = np.zeros((k, dim, dim))            # sum_i N_ik E[w w']
        c = np.zeros((k * f_dim, dim))         # sum_i f_i E[w]'
        objective = 0.0
        for stats in stats_list:
            precision, mean, b = _posterior(tv, stats)
            objective += _tv_objective(precision, mean, b)
            cov = np.linalg.inv(precision)
            ww = cov + np.outer(mean, mean)
            a += stats.n[:, None, None] * ww[None, :, :]
            c += np.outer(stats.f.reshape(-1), mean)
        if history is not None:
            history.append(objective)
        t_new = np.empty_like(tv.t)
        for comp in range(k):
            a_k = a[comp]
            if np.linalg.cond(a_k) > 1e12:
                a_k = a_k + 1e-6 * np.eye(dim)
            rows = slice(comp * f_dim, (comp + 1) * f_dim)
            t_new[rows] = np.linalg.solve(a_k, c[rows].T).T
        tv = TvMatrix(t_new, ubm)

    if history is not None:
        objective = 0.0
        for stats in stats_list:
            precision, mean, b = _posterior(tv, stats)
            objective += _tv_objective(precision, mean, b)
        history.append(objective)
    return tv


# ---------------------------------------------------------------------------
# Serialization


def save_tv(path, tv):
    container.write_archive(path, {
        "ubm.weights": tv.ubm.weights,
        "ubm.means": tv.ubm.means,
        "ubm.variances": tv.ubm.variances,
        "tv.t": tv.t,
    })


def load_tv(path):
    entries = container.read_archive(path)
    ubm = GmmModel(entries["ubm.weights"], entries["ubm.means"],
                   entries["ubm.variances"])
    return TvMatrix(entries["tv.t"], ubm)
