"""Gaussian mixture over joint configurations: EM fitting and action refinement."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

log = logging.getLogger(__name__)

REFINE_MODES = ("nearest", "aggregate")


@dataclass(frozen=True)
class GmmParams:
    priors: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covariances: np.ndarray  # (K, D, D)

    def __post_init__(self):
        priors = np.asarray(self.priors, dtype=np.float64)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covariances, dtype=np.float64)
        k, d = means.shape
        if priors.shape != (k,) or covs.shape != (k, d, d):
            raise ValueError(f"inconsistent shapes: priors {priors.shape}, means {means.shape}, covariances {covs.shape}")
        if np.any(priors <= 0) or abs(priors.sum() - 1.0) > 1e-12:
            raise ValueError("priors must be positive and sum to 1")
        if not np.allclose(covs, covs.transpose(0, 2, 1), rtol=0, atol=1e-12 * max(1.0, np.abs(covs).max())):
            raise ValueError("covariances must be symmetric")
        for i, c in enumerate(covs):
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                raise ValueError(f"covariance {i} is not positive definite") from None
        for name, arr in (("priors", priors), ("means", means), ("covariances", covs)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _cholesky(covs: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(covs)


def component_log_densities(x: np.ndarray, theta: GmmParams) -> np.ndarray:
    """log N(x_i | mu_k, Sigma_k) as an (N, K) array."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = theta.dim
    out = np.empty((x.shape[0], theta.n_components))
    for k, (mu, chol) in enumerate(zip(theta.means, _cholesky(theta.covariances))):
        z = solve_triangular(chol, (x - mu).T, lower=True)
        maha = np.sum(z * z, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, k] = -0.5 * (d * np.log(2 * np.pi) + logdet + maha)
    return out


def gmm_log_density(x, theta: GmmParams) -> np.ndarray:
    return logsumexp(component_log_densities(x, theta) + np.log(theta.priors), axis=1)


def gmm_density(x, theta: GmmParams):
    """Mixture density at one point (scalar) or at each row of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    dens = np.exp(gmm_log_density(x, theta))
    return float(dens[0]) if x.ndim == 1 else dens


def responsibilities(x: np.ndarray, theta: GmmParams) -> tuple[np.ndarray, np.ndarray]:
    """Posterior component probabilities and per-sample log-likelihood."""
    weighted = component_log_densities(x, theta) + np.log(theta.priors)
    ll = logsumexp(weighted, axis=1)
    return np.exp(weighted - ll[:, None]), ll


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding (several candidates per step, keep the best)."""
    n = x.shape[0]
    trials = 2 + int(np.log(k))
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            cand = rng.integers(n, size=trials)
        else:
            cand = rng.choice(n, size=trials, p=d2 / total)
        best, best_pot, best_d2 = None, np.inf, None
        for c in cand:
            nd2 = np.minimum(d2, np.sum((x - x[c]) ** 2, axis=1))
            pot = nd2.sum()
            if pot < best_pot:
                best, best_pot, best_d2 = c, pot, nd2
        centers.append(x[best])
        d2 = best_d2
    return np.array(centers)


def _m_step(x, gamma, ridge):
    n, d = x.shape
    nk = gamma.sum(axis=0)
    priors = nk / n
    means = (gamma.T @ x) / nk[:, None]
    covs = np.empty((gamma.shape[1], d, d))
    for k in range(gamma.shape[1]):
        diff = x - means[k]
        c = (gamma[:, k, None] * diff).T @ diff / nk[k]
        covs[k] = 0.5 * (c + c.T) + ridge * np.eye(d)
    return priors, means, covs


def em_fit(
    x,
    k: int = 6,
    seed: int = 0,
    ridge: float = 1e-6,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> tuple[GmmParams, list[float]]:
    """Fit a K-component mixture by expectation-maximisation.

    The trace holds the mean per-sample log-likelihood of the data under the
    parameters of each iteration; iteration stops once its change drops below
    ``tol``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    if n < k:
        raise ValueError(f"need at least K={k} samples, got N={n}")
    if tol <= 0 or ridge < 0 or max_iter < 1:
        raise ValueError("tol must be > 0, ridge >= 0, max_iter >= 1")
    rng = np.random.default_rng(seed)
    data_cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True)) + ridge * np.eye(d)
    theta = GmmParams(np.full(k, 1.0 / k), _kmeanspp(x, k, rng), np.repeat(data_cov[None], k, axis=0))
    trace: list[float] = []
    for _ in range(max_iter):
        gamma, ll = responsibilities(x, theta)
        trace.append(float(ll.mean()))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            break
        priors, means, covs = _m_step(x, gamma, ridge)
        dead = np.flatnonzero(priors * n < 1e-8)
        if dead.size:
            worst = np.argsort(ll)
            for j, comp in enumerate(dead):
                log.warning("EM component %d collapsed; re-seeding from sample %d", comp, worst[j])
                means[comp] = x[worst[j]]
                covs[comp] = data_cov
                priors[comp] = 1.0 / n
            priors = priors / priors.sum()
        theta = GmmParams(priors / priors.sum(), means, covs)
    return theta, trace


# ---------------------------------------------------------------- scoring

def mahalanobis_distance(a_in, theta: GmmParams, k: int) -> float:
    if not 0 <= k < theta.n_components:
        raise IndexError(f"component {k} out of range for K={theta.n_components}")
    diff = np.asarray(a_in, dtype=np.float64) - theta.means[k]
    factor = cho_factor(theta.covariances[k], lower=True)
    return float(np.sqrt(max(diff @ cho_solve(factor, diff), 0.0)))


def mahalanobis_all(a_in, theta: GmmParams) -> np.ndarray:
    return np.array([mahalanobis_distance(a_in, theta, k) for k in range(theta.n_components)])


def select_nearest(a_in, theta: GmmParams) -> np.ndarray:
    """Mean of the component closest in Mahalanobis distance (lowest index on ties)."""
    return theta.means[int(np.argmin(mahalanobis_all(a_in, theta)))].copy()


def consistency_weights(a_in, theta: GmmParams) -> np.ndarray:
    """Priors re-weighted by exp(-l_k) and renormalised."""
    logits = np.log(theta.priors) - mahalanobis_all(a_in, theta)
    return np.exp(logits - logsumexp(logits))


def conditional_aggregate(a_in, theta: GmmParams) -> tuple[np.ndarray, np.ndarray]:
    weights = consistency_weights(a_in, theta)
    mean = weights @ theta.means
    cov = np.einsum("k,kij->ij", weights ** 2, theta.covariances)
    return mean, cov


def refine(a_in, theta: GmmParams, mode: str = "nearest") -> np.ndarray:
    if mode == "nearest":
        return select_nearest(a_in, theta)
    if mode == "aggregate":
        return conditional_aggregate(a_in, theta)[0]
    raise ValueError(f"mode must be one of {REFINE_MODES}, got {mode!r}")
