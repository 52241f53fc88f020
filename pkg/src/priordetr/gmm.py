"""2-D Gaussian mixture over (aspect ratio h/w, log width) and its EM fit."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import _kernels

logger = logging.getLogger(__name__)

COV_FLOOR = 1e-6
W_BOUNDS = (0.1, 2.0)
R_BOUNDS = (0.2, 5.0)
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class GmmPrior2D:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    w_ref: float = 1.0
    ll_trace: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        cov = np.asarray(self.covs, dtype=np.float64).reshape(-1, 2, 2)
        if not (len(w) == len(mu) == len(cov)) or len(w) == 0:
            raise ValueError(
                f"component counts differ: {len(w)} weights, {len(mu)} means, "
                f"{len(cov)} covariances"
            )
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must lie on the simplex, got {w}")
        if not np.allclose(cov, cov.transpose(0, 2, 1), atol=1e-12):
            raise ValueError("covariances must be symmetric")
        if (np.linalg.eigvalsh(cov) < -1e-12).any():
            raise ValueError("covariances must be positive semi-definite")
        if not self.w_ref > 0:
            raise ValueError(f"w_ref must be positive, got {self.w_ref}")
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GmmPrior2D):
            return NotImplemented
        return (np.array_equal(self.weights, other.weights)
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.covs, other.covs)
                and self.w_ref == other.w_ref)

    __hash__ = None

    @property
    def M(self) -> int:
        return len(self.weights)

    def mixture_mean(self) -> np.ndarray:
        return self.weights @ self.means

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "w_ref": float(self.w_ref),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmPrior2D":
        prior = cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["covs"]),
                    float(d.get("w_ref", 1.0)))
        if "M" in d and int(d["M"]) != prior.M:
            raise ValueError(f"M={d['M']} but {prior.M} components stored")
        return prior


@dataclass(frozen=True)
class PriorFactors:
    """Normalized modulation factors, broadcastable arrays."""

    r_tilde: np.ndarray
    w_tilde: np.ndarray


def save_prior(path: Union[str, os.PathLike], prior: GmmPrior2D) -> None:
    with open(path, "w") as fh:
        json.dump(prior.to_dict(), fh, indent=2)


def load_prior(path: Union[str, os.PathLike]) -> GmmPrior2D:
    with open(path) as fh:
        return GmmPrior2D.from_dict(json.load(fh))


def boxes_to_samples(widths, heights) -> np.ndarray:
    """(r = h / w, log w) coordinates for boxes given in pixels."""
    w = np.asarray(widths, dtype=np.float64)
    h = np.asarray(heights, dtype=np.float64)
    return np.stack([h / w, np.log(w)], axis=-1)


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------

def _component_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    diff = np.linalg.solve(chol, (x - mean).T)
    maha = (diff * diff).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (2 * _LOG_2PI + logdet + maha)


def weighted_log_densities(prior: GmmPrior2D, samples) -> np.ndarray:
    """(n, M) array of log(pi_m) + log N(x; mu_m, Sigma_m)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    return np.stack(
        [logw[m] + _component_logpdf(x, prior.means[m], prior.covs[m])
         for m in range(prior.M)], axis=1)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    top = a.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return (top + np.log(np.exp(a - top).sum(axis=axis, keepdims=True))).squeeze(axis)


def log_density(prior: GmmPrior2D, samples) -> np.ndarray:
    return _logsumexp(weighted_log_densities(prior, samples), axis=1)


def log_likelihood(prior: GmmPrior2D, samples) -> float:
    """Mean per-sample log density."""
    return float(log_density(prior, samples).mean())


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------

def floor_covariance(cov: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def fit_em(samples, M: int = 3, max_iter: int = 200, tol: float = 1e-8,
           seed: int = 0, cov_floor: float = COV_FLOOR,
           w_ref: float = 1.0) -> GmmPrior2D:
    """Fit an M-component mixture by expectation-maximization.

    Means start from k-means++ seeds, weights start uniform.  Iteration stops
    once the mean log-likelihood improves by less than ``tol`` or after
    ``max_iter`` iterations; the trace (initial value first) is kept on the
    returned prior as ``ll_trace``.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if len(x) < 10 * M:
        raise ValueError(f"need at least {10 * M} samples for M={M}, got {len(x)}")
    if not np.isfinite(x).all():
        raise ValueError("samples contain non-finite values")
    if (x[:, 0] <= 0).any():
        raise ValueError("aspect ratios must be positive")

    if np.ptp(x, axis=0).max() == 0.0:
        logger.warning("all %d samples identical; returning a point-mass prior", len(x))
        return GmmPrior2D(np.ones(1), x[:1].copy(), cov_floor * np.eye(2)[None], w_ref,
                          ll_trace=())

    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, M, rng)
    assign = ((x[:, None, :] - centers[None]) ** 2).sum(-1).argmin(axis=1)
    global_cov = floor_covariance(np.cov(x.T, bias=True), cov_floor)
    covs = []
    for m in range(M):
        pts = x[assign == m]
        cov = np.cov(pts.T, bias=True) if len(pts) > 2 else global_cov
        covs.append(floor_covariance(cov, cov_floor))
    prior = GmmPrior2D(np.full(M, 1.0 / M), centers, np.array(covs), w_ref)

    trace = [log_likelihood(prior, x)]
    for _ in range(max_iter):
        wl = weighted_log_densities(prior, x)
        resp = np.exp(wl - _logsumexp(wl, axis=1)[:, None])
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / nk.sum()
        means = (resp.T @ x) / nk[:, None]
        covs = []
        for m in range(M):
            d = x - means[m]
            covs.append(floor_covariance((resp[:, m, None] * d).T @ d / nk[m], cov_floor))
        prior = GmmPrior2D(weights, means, np.array(covs), w_ref)
        trace.append(log_likelihood(prior, x))
        if trace[-1] - trace[-2] < tol:
            break
    return GmmPrior2D(prior.weights, prior.means, prior.covs, w_ref, ll_trace=tuple(trace))


# ---------------------------------------------------------------------------
# sampling and normalization
# ---------------------------------------------------------------------------

def sample(prior: GmmPrior2D, rng: np.random.Generator, G: int) -> np.ndarray:
    """Draw G pairs (r_prior, w_prior); w_prior stays in log-width space."""
    if G < 1:
        raise ValueError(f"G must be >= 1, got {G}")
    comp = rng.choice(prior.M, size=G, p=prior.weights)
    z = rng.standard_normal((G, 2))
    vals, vecs = np.linalg.eigh(prior.covs)
    roots = vecs * np.sqrt(np.maximum(vals, 0.0))[:, None, :]
    return prior.means[comp] + np.einsum("gij,gj->gi", roots[comp], z)


def normalize_factors(r_prior, w_prior, w_ref: float,
                      w_bounds: Sequence[float] = W_BOUNDS,
                      r_bounds: Sequence[float] = R_BOUNDS) -> PriorFactors:
    """Map sampled (r, log w) to clipped modulation factors.

    w_tilde = clip(exp(w_prior) / w_ref), r_tilde = clip(r_prior).
    """
    r = np.asarray(r_prior, dtype=np.float64)
    w = np.asarray(w_prior, dtype=np.float64)
    if not (np.isfinite(r).all() and np.isfinite(w).all()):
        raise ValueError("prior samples must be finite")
    if not w_ref > 0:
        raise ValueError(f"w_ref must be positive, got {w_ref}")
    with np.errstate(over="ignore"):
        w_t = np.exp(w) / w_ref
    return PriorFactors(np.clip(r, *r_bounds), np.clip(w_t, *w_bounds))


def align_components(estimated: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Permutation ``perm`` such that ``estimated[perm]`` lines up with ``truth``."""
    cost = np.linalg.norm(truth[:, None, :] - estimated[None, :, :], axis=-1)
    rows, cols = _kernels.linear_sum_assignment(cost)
    perm = np.empty(len(truth), dtype=np.int64)
    perm[rows] = cols
    return perm


def random_prior(rng: np.random.Generator, M: int = 3) -> GmmPrior2D:
    """A random well-conditioned prior, used by property tests."""
    w = rng.dirichlet(np.ones(M))
    means = np.column_stack([rng.uniform(0.5, 1.8, M), rng.uniform(1.5, 3.5, M)])
    covs = []
    for _ in range(M):
        a = rng.normal(size=(2, 2)) * 0.1
        covs.append(a @ a.T + 0.01 * np.eye(2))
    return GmmPrior2D(w, means, np.array(covs))
