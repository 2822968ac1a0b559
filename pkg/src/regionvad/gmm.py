"""Gaussian mixture numerics.

EM fitting with k-means++ initialisation, exact mixture log-densities, BIC
model selection, seeded sampling and plug-in symmetric KL estimates between
mixtures.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from regionvad import kernels

logger = logging.getLogger(__name__)

COVARIANCE_MODES = ("full", "diagonal", "spherical", "tied")

# components whose total responsibility falls below this are re-seeded
_MIN_RESPONSIBILITY = 1e-8


@dataclass(frozen=True)
class EmConfig:
    """Settings for :func:`fit_em`.

    ``rel_tolerance`` is compared against the relative change of the training
    log-likelihood between iterations; ``ridge`` is added to every covariance
    diagonal in every M-step.
    """

    max_iterations: int = 200
    rel_tolerance: float = 1e-4
    ridge: float = 1e-6
    n_restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be > 0")
        if not self.ridge >= 0:
            raise ValueError("ridge must be >= 0")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    covariance: np.ndarray


def _freeze(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _as_full(covariances, mode, k, dim):
    if mode == "full":
        return covariances
    if mode == "diagonal":
        return np.stack([np.diag(c) for c in covariances])
    if mode == "spherical":
        return np.stack([np.eye(dim) * c for c in covariances])
    return np.broadcast_to(covariances, (k, dim, dim))


def _factorize(covariances, mode, k, dim):
    """Cholesky factors of the covariances and upper-triangular precision factors."""
    if mode in ("diagonal", "spherical"):
        var = covariances if mode == "diagonal" else np.repeat(covariances[:, None], dim, axis=1)
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise np.linalg.LinAlgError("non-positive variance")
        sd = np.sqrt(var)
        chol = np.stack([np.diag(s) for s in sd])
        prec = np.stack([np.diag(1.0 / s) for s in sd])
        log_det_prec = -np.sum(np.log(sd), axis=1)
        return chol, prec, log_det_prec
    mats = covariances[None] if mode == "tied" else covariances
    if not np.all(np.isfinite(mats)):
        raise np.linalg.LinAlgError("covariance has non-finite entries")
    L = np.linalg.cholesky(mats)
    diag = np.diagonal(L, axis1=1, axis2=2)
    if np.any(diag <= 0):
        raise np.linalg.LinAlgError("covariance is not positive definite")
    eye = np.broadcast_to(np.eye(dim), L.shape)
    prec = np.swapaxes(np.linalg.solve(L, eye), 1, 2)
    logdet = -np.sum(np.log(diag), axis=1)
    if mode == "tied":
        return np.repeat(L, k, axis=0), np.repeat(prec, k, axis=0), np.repeat(logdet, k)
    return L, prec, logdet

class GaussianMixture:
    """An immutable fitted (or hand-built) Gaussian mixture.

    Parameters
    ----------
    weights : array of shape (k,)
    means : array of shape (k, D)
    covariances : array
        Shape depends on ``covariance_mode``: ``full`` (k, D, D), ``diagonal``
        (k, D), ``spherical`` (k,), ``tied`` (D, D).
    covariance_mode : str
    fit_metadata : dict, optional
    """

    def __init__(self, weights, means, covariances, covariance_mode="full", fit_metadata=None):
        if covariance_mode not in COVARIANCE_MODES:
            raise ValueError(f"unknown covariance mode {covariance_mode!r}")
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k, dim = means.shape
        if weights.shape != (k,):
            raise ValueError("weights and means disagree on the number of components")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ValueError("component weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1")
        covariances = np.asarray(covariances, dtype=np.float64)
        expected = {"full": (k, dim, dim), "diagonal": (k, dim), "spherical": (k,),
                    "tied": (dim, dim)}[covariance_mode]
        if covariances.shape != expected:
            raise ValueError(f"{covariance_mode} covariances must have shape {expected}, "
                             f"got {covariances.shape}")
        if not np.all(np.isfinite(means)) or not np.all(np.isfinite(covariances)):
            raise ValueError("mixture parameters must be finite")
        if covariance_mode in ("full", "tied"):
            mats = covariances.reshape(-1, dim, dim)
            if not np.allclose(mats, np.swapaxes(mats, 1, 2), rtol=0, atol=1e-12 * max(1.0, np.abs(mats).max())):
                raise ValueError("covariance matrices must be symmetric")
        self.covariance_mode = covariance_mode
        self.weights = _freeze(weights)
        self.means = _freeze(means)
        self.covariances = _freeze(covariances)
        chol, prec, log_det_prec = _factorize(self.covariances, covariance_mode, k, dim)
        self._chol = _freeze(chol)
        self._prec_chol = _freeze(prec)
        self._log_det_prec = _freeze(log_det_prec)
        self._log_weights = _freeze(np.log(weights))
        self.fit_metadata = dict(fit_metadata or {})

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dimension(self):
        return self.means.shape[1]

    @property
    def components(self):
        full = _as_full(self.covariances, self.covariance_mode, self.n_components, self.dimension)
        return [GaussianComponent(float(w), m, c) for w, m, c in zip(self.weights, self.means, full)]

    def full_covariances(self):
        """(k, D, D) covariance matrices regardless of mode."""
        return np.array(_as_full(self.covariances, self.covariance_mode, self.n_components,
                                 self.dimension))

    def _check_x(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.dimension:
            raise ValueError(f"expected vectors of dimension {self.dimension}, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("inputs must be finite")
        return X

    def component_log_prob(self, X):
        """Unweighted per-component log-densities, shape (N, k)."""
        X = self._check_x(X)
        return kernels.component_log_prob(X, self.means, self._prec_chol, self._log_det_prec)

    def weighted_log_prob(self, X):
        return self.component_log_prob(X) + self._log_weights

    def score_samples(self, X):
        """Mixture log-density of every row of ``X``."""
        return logsumexp(self.weighted_log_prob(X), axis=1)

    def predict_proba(self, X):
        lp = self.weighted_log_prob(X)
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))

    def predict(self, X):
        return np.argmax(self.weighted_log_prob(X), axis=1)

    def mahalanobis_sq(self, X, component):
        """Squared Mahalanobis distance of rows of ``X`` to one component."""
        X = self._check_x(X)
        z = (X - self.means[component]) @ self._prec_chol[component]
        return np.einsum("ij,ij->i", z, z)

    def to_dict(self):
        full = self.full_covariances()
        return {
            "dimension": int(self.dimension),
            "covariance_mode": self.covariance_mode,
            "components": [
                {"weight": float(w), "mean": [float(v) for v in m],
                 "covariance_row_major": [float(v) for v in c.ravel()]}
                for w, m, c in zip(self.weights, self.means, full)
            ],
            "fit_metadata": _plain(self.fit_metadata),
        }

    @classmethod
    def from_dict(cls, doc):
        dim = int(doc["dimension"])
        mode = doc["covariance_mode"]
        comps = doc["components"]
        if not comps:
            raise ValueError("mixture document has no components")
        weights = np.array([c["weight"] for c in comps], dtype=np.float64)
        means = np.array([c["mean"] for c in comps], dtype=np.float64).reshape(len(comps), dim)
        full = np.array([c["covariance_row_major"] for c in comps], dtype=np.float64)
        if full.shape != (len(comps), dim * dim):
            raise ValueError("covariance_row_major has the wrong length")
        full = full.reshape(len(comps), dim, dim)
        if mode == "full":
            cov = full
        elif mode == "diagonal":
            cov = np.stack([np.diag(c) for c in full])
        elif mode == "spherical":
            cov = full[:, 0, 0].copy()
        elif mode == "tied":
            if not np.array_equal(full, np.broadcast_to(full[0], full.shape)):
                raise ValueError("tied mixture with differing covariances")
            cov = full[0]
        else:
            raise ValueError(f"unknown covariance mode {mode!r}")
        return cls(weights, means, cov, mode, doc.get("fit_metadata") or {})

    def __repr__(self):
        return (f"GaussianMixture(k={self.n_components}, D={self.dimension}, "
                f"mode={self.covariance_mode!r})")


def _plain(obj):
    """Convert numpy scalars/arrays inside metadata to plain Python objects."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def n_parameters(k, dim, mode):
    """Free-parameter count of a k-component mixture in ``dim`` dimensions."""
    if mode == "full":
        cov = k * dim * (dim + 1) // 2
    elif mode == "diagonal":
        cov = k * dim
    elif mode == "spherical":
        cov = k
    elif mode == "tied":
        cov = dim * (dim + 1) // 2
    else:
        raise ValueError(f"unknown covariance mode {mode!r}")
    return (k - 1) + k * dim + cov


def _logsumexp_rows(a):
    top = a.max(axis=1)
    top = np.where(np.isfinite(top), top, 0.0)
    return np.log(np.exp(a - top[:, None]).sum(axis=1)) + top


def _check_samples(samples):
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError(f"samples must be an N x D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("samples contain non-finite entries")
    return X


# -- k-means ------------------------------------------------------------------

def _sq_dist(X, centers):
    d = (np.einsum("ij,ij->i", X, X)[:, None] - 2.0 * X @ centers.T
         + np.einsum("ij,ij->i", centers, centers)[None, :])
    return np.maximum(d, 0.0)


def _kmeans_plusplus(X, k, rng):
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = _sq_dist(X, X[idx])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            nxt = int(rng.integers(n))
        else:
            cdf = np.cumsum(d2)
            nxt = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dist(X, X[nxt:nxt + 1])[:, 0])
    return X[idx].copy()


def _lloyd(X, centers, max_iter):
    labels = None
    for _ in range(max_iter):
        new = np.argmin(_sq_dist(X, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(centers.shape[0]):
            members = labels == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
    d = _sq_dist(X, centers)
    labels = np.argmin(d, axis=1)
    return centers, labels, float(d[np.arange(X.shape[0]), labels].sum())


def kmeans(samples, k, seed=0, n_restarts=3, max_iter=100):
    """Seeded k-means++ / Lloyd clustering; returns (centers, labels, inertia)."""
    X = _check_samples(samples)
    if k < 1 or X.shape[0] < k:
        raise ValueError(f"kmeans needs 1 <= k <= N (k={k}, N={X.shape[0]})")
    best = None
    for ss in np.random.SeedSequence(seed).spawn(n_restarts):
        rng = np.random.default_rng(ss)
        res = _lloyd(X, _kmeans_plusplus(X, k, rng), max_iter)
        if best is None or res[2] < best[2]:
            best = res
    return best


# -- EM -----------------------------------------------------------------------

def _global_covariance(X, mode, ridge):
    n, dim = X.shape
    diff = X - X.mean(axis=0)
    cov = diff.T @ diff / n
    if mode in ("full", "tied"):
        return cov + ridge * np.eye(dim)
    if mode == "diagonal":
        return np.diag(cov) + ridge
    return np.mean(np.diag(cov)) + ridge


def _m_step(X, resp, mode, ridge, reseed_order):
    """Maximisation step; empty components are re-seeded at ``reseed_order`` samples."""
    n, dim = X.shape
    k = resp.shape[1]
    nk = resp.sum(axis=0)
    dead = np.flatnonzero(nk < _MIN_RESPONSIBILITY)
    safe = np.where(nk < _MIN_RESPONSIBILITY, 1.0, nk)
    means = (resp.T @ X) / safe[:, None]
    eye = np.eye(dim)
    if mode == "full":
        cov = np.empty((k, dim, dim))
        for j in range(k):
            diff = X - means[j]
            c = (resp[:, j, None] * diff).T @ diff / safe[j]
            cov[j] = 0.5 * (c + c.T) + ridge * eye
    elif mode == "tied":
        c = np.zeros((dim, dim))
        for j in range(k):
            diff = X - means[j]
            c += (resp[:, j, None] * diff).T @ diff
        c /= n
        cov = 0.5 * (c + c.T) + ridge * eye
    else:
        var = np.empty((k, dim))
        for j in range(k):
            diff = X - means[j]
            var[j] = resp[:, j] @ (diff * diff) / safe[j]
        cov = var + ridge if mode == "diagonal" else var.mean(axis=1) + ridge
    reseeded = []
    if dead.size:
        fallback = _global_covariance(X, mode, ridge)
        for slot, j in enumerate(dead):
            src = int(reseed_order[slot % len(reseed_order)])
            means[j] = X[src]
            if mode != "tied":
                cov[j] = fallback
            nk[j] = 1.0
            reseeded.append((int(j), src))
    weights = nk / nk.sum()
    return weights, means, cov, reseeded


def _e_step(X, weights, means, cov, mode):
    k, dim = means.shape
    _, prec, log_det_prec = _factorize(cov, mode, k, dim)
    lp = kernels.component_log_prob(X, means, prec, log_det_prec) + np.log(weights)
    per_sample = _logsumexp_rows(lp)
    return lp - per_sample[:, None], float(per_sample.sum()), per_sample


@dataclass
class _Run:
    weights: np.ndarray
    means: np.ndarray
    cov: np.ndarray
    log_likelihood: float
    history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    reseeds: list = field(default_factory=list)


def _run_em(X, k, mode, config, rng):
    centers = _kmeans_plusplus(X, k, rng)
    centers, labels, _ = _lloyd(X, centers, max_iter=10)
    resp = np.zeros((X.shape[0], k))
    resp[np.arange(X.shape[0]), labels] = 1.0
    far = np.argsort(-_sq_dist(X, centers)[np.arange(X.shape[0]), labels], kind="stable")
    weights, means, cov, reseeds = _m_step(X, resp, mode, config.ridge, far)
    run = _Run(weights, means, cov, -np.inf)
    run.reseeds.extend((0, j, s) for j, s in reseeds)
    prev = None
    for it in range(config.max_iterations):
        log_resp, ll, per_sample = _e_step(X, weights, means, cov, mode)
        run.history.append(ll)
        if prev is not None and abs(ll - prev) <= config.rel_tolerance * abs(ll):
            run.converged = True
            break
        prev = ll
        order = np.argsort(per_sample, kind="stable")
        weights, means, cov, reseeds = _m_step(X, np.exp(log_resp), mode, config.ridge, order)
        run.reseeds.extend((it + 1, j, s) for j, s in reseeds)
        run.iterations += 1
    else:
        _, ll, _ = _e_step(X, weights, means, cov, mode)
        run.history.append(ll)
    run.weights, run.means, run.cov, run.log_likelihood = weights, means, cov, ll
    return run


def fit_em(samples, k, mode="full", config=None):
    """Fit a ``k``-component mixture by EM.

    Rows are put into a canonical (lexicographic) order before fitting, so the
    result does not depend on the order of the input rows. Each of the
    ``config.n_restarts`` k-means++ initialisations is refined by EM and the
    run with the highest final log-likelihood is kept.

    Raises
    ------
    ValueError
        If ``N < k``, ``k < 1``, the mode is unknown or samples are not finite.
    """
    config = config or EmConfig()
    X = _check_samples(samples)
    n, dim = X.shape
    if mode not in COVARIANCE_MODES:
        raise ValueError(f"unknown covariance mode {mode!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    X = X[np.lexsort(X.T[::-1])]
    best, best_idx, failures = None, -1, 0
    for r, ss in enumerate(np.random.SeedSequence(config.seed).spawn(config.n_restarts)):
        try:
            run = _run_em(X, k, mode, config, np.random.default_rng(ss))
        except np.linalg.LinAlgError as exc:
            logger.debug("EM restart %d failed: %s", r, exc)
            failures += 1
            continue
        if best is None or run.log_likelihood > best.log_likelihood:
            best, best_idx = run, r
    if best is None:
        raise np.linalg.LinAlgError(f"all {config.n_restarts} EM restarts failed for k={k}")
    meta = {
        "seed": int(config.seed),
        "n_restarts": int(config.n_restarts),
        "best_restart": best_idx,
        "failed_restarts": failures,
        "iterations": best.iterations,
        "converged": best.converged,
        "log_likelihood": best.log_likelihood,
        "log_likelihood_history": list(best.history),
        "reseeded": [list(r) for r in best.reseeds],
        "n_samples": int(n),
    }
    return GaussianMixture(best.weights, best.means, best.cov, mode, meta)


def log_pdf(model, x):
    """Mixture log-density at a single vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("log_pdf expects a single vector")
    return float(model.score_samples(x)[0])


def bic(model, samples):
    """Bayesian information criterion ``p ln N - 2 LL`` (lower is better)."""
    X = _check_samples(samples)
    n = X.shape[0]
    if n == 0:
        raise ValueError("bic needs at least one sample")
    ll = float(model.score_samples(X).sum())
    p = n_parameters(model.n_components, model.dimension, model.covariance_mode)
    return p * math.log(n) - 2.0 * ll


def select_components_bic(samples, k_max, mode="full", config=None):
    """Fit k = 1..min(k_max, N) and return the minimum-BIC mixture.

    Ties go to the smaller k. The BIC table (``None`` for fits that failed) is
    stored under ``fit_metadata['bic_table']``.
    """
    config = config or EmConfig()
    X = _check_samples(samples)
    n = X.shape[0]
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if n < 1:
        raise ValueError("need at least one sample")
    table = []
    best, best_bic = None, math.inf
    for k in range(1, min(k_max, n) + 1):
        try:
            model = fit_em(X, k, mode, config)
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.debug("BIC search: k=%d failed: %s", k, exc)
            table.append([k, None])
            continue
        score = bic(model, X)
        table.append([k, score])
        if score < best_bic:
            best, best_bic = model, score
    if best is None:
        raise np.linalg.LinAlgError("every candidate k failed to fit")
    meta = dict(best.fit_metadata)
    meta["bic_table"] = table
    meta["selected_k"] = best.n_components
    return GaussianMixture(best.weights, best.means, best.covariances, mode, meta)


def sample(model, n, seed=0):
    """Draw ``n`` samples; deterministic for a given seed."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(seed)
    if n == 0:
        return np.empty((0, model.dimension))
    cdf = np.cumsum(model.weights)
    labels = np.searchsorted(cdf / cdf[-1], rng.random(n), side="right")
    labels = np.minimum(labels, model.n_components - 1)
    z = rng.standard_normal((n, model.dimension))
    return model.means[labels] + np.einsum("nij,nj->ni", model._chol[labels], z)


def _kl_plugin(log_p_self, log_p_other):
    return float(np.mean(log_p_self - log_p_other))


def symmetric_kl(model_i, model_j, samples_i, samples_j):
    """Plug-in estimate of KL(P_i||P_j) + KL(P_j||P_i) from the given samples.

    ``KL(P_i||P_j)`` is the mean over ``samples_i`` of ``log p_i - log p_j``;
    no clipping is applied.
    """
    Si, Sj = _check_samples(samples_i), _check_samples(samples_j)
    if Si.shape[0] == 0 or Sj.shape[0] == 0:
        raise ValueError("symmetric_kl needs non-empty sample sets")
    kl_ij = _kl_plugin(model_i.score_samples(Si), model_j.score_samples(Si))
    kl_ji = _kl_plugin(model_j.score_samples(Sj), model_i.score_samples(Sj))
    return kl_ij + kl_ji


def pairwise_kl_matrix(models, samples):
    """Matrix ``M[i, j]`` = plug-in KL(P_i||P_j) over ``samples[i]``."""
    if len(models) != len(samples):
        raise ValueError("models and samples must be aligned")
    K = len(models)
    sets = [_check_samples(s) for s in samples]
    if any(s.shape[0] == 0 for s in sets):
        raise ValueError("every sample set must be non-empty")
    out = np.zeros((K, K))
    for i in range(K):
        own = models[i].score_samples(sets[i])
        for j in range(K):
            if j != i:
                out[i, j] = _kl_plugin(own, models[j].score_samples(sets[i]))
    return out


def mean_pairwise_divergence(models, samples):
    """Average symmetric KL over all ordered pairs ``i != j``."""
    K = len(models)
    if K < 2:
        raise ValueError("need at least two models")
    kl = pairwise_kl_matrix(models, samples)
    total = 0.0
    for i in range(K):
        for j in range(K):
            if i != j:
                total += kl[i, j] + kl[j, i]
    return total / (K * (K - 1))
