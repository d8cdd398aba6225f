"""Per-type Gaussian-process regression of service time.

Zero-mean GP prior with an RBF kernel ``k(x, x') = s2 * exp(-|x - x'|^2 / (2 l^2))``
and observation noise ``alpha``. Posterior mean and variance at a test point are

    mu(x*)     = k*^T (K + alpha I)^-1 y
    sigma2(x*) = k(x*, x*) - k*^T (K + alpha I)^-1 k*

computed through a Cholesky factor of ``K + alpha I``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from .ingest import Dataset, ServiceRequest

log = logging.getLogger(__name__)

SUBSAMPLE_CAP = 2000
LENGTHSCALE_GRID = (0.5, 1.0, 2.0, 4.0)
LOW_CONFIDENCE_COUNT = 10
NEG_VARIANCE_WARN = -1e-6


class GprFitError(np.linalg.LinAlgError):
    pass


def rbf_kernel(A: np.ndarray, B: np.ndarray, lengthscale: float, signal_var: float) -> np.ndarray:
    sq = cdist(np.atleast_2d(A), np.atleast_2d(B), "sqeuclidean")
    return signal_var * np.exp(-0.5 * sq / lengthscale**2)


@dataclass
class GprModel:
    X: np.ndarray
    y: np.ndarray
    lengthscale: float
    signal_var: float
    noise: float
    chol: np.ndarray = field(repr=False, default=None)
    weights: np.ndarray = field(repr=False, default=None)  # (K + alpha I)^-1 y

    @property
    def F(self) -> int:
        return self.X.shape[1]

    def refactor(self) -> "GprModel":
        K = rbf_kernel(self.X, self.X, self.lengthscale, self.signal_var)
        K[np.diag_indices_from(K)] += self.noise
        try:
            self.chol = cholesky(K, lower=True)
        except np.linalg.LinAlgError as exc:
            raise GprFitError(
                f"K + alpha*I is not positive definite (alpha={self.noise:g}); use a larger alpha"
            ) from exc
        self.weights = cho_solve((self.chol, True), self.y)
        return self

    def log_marginal_likelihood(self) -> float:
        L = self.y.shape[0]
        return float(-0.5 * self.y @ self.weights - np.log(np.diag(self.chol)).sum()
                     - 0.5 * L * math.log(2 * math.pi))


@dataclass(frozen=True)
class GprPrediction:
    mean: float
    variance: float
    clamped: bool = False


def subsample_indices(L: int, cap: int = SUBSAMPLE_CAP, seed: int = 0) -> np.ndarray:
    """Rows kept when ``L > cap``: the newest ``cap // 2`` rows plus a seeded uniform
    draw from the older ones. Rows are assumed to be in chronological order."""
    if L <= cap:
        return np.arange(L)
    recent = cap // 2
    older = np.random.default_rng(seed).choice(L - recent, size=cap - recent, replace=False)
    return np.sort(np.concatenate([np.sort(older), np.arange(L - recent, L)]))


def fit_gpr(
    X,
    y,
    lengthscale: float = 1.0,
    signal_var: float | None = None,
    alpha: float | None = None,
    cap: int = SUBSAMPLE_CAP,
    seed: int = 0,
) -> GprModel:
    """Fit a GP to ``L x F`` inputs ``X`` and targets ``y``.

    ``signal_var`` defaults to the sample variance of ``y`` and ``alpha`` to a
    tenth of it. More than ``cap`` rows are thinned by :func:`subsample_indices`.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"need L >= 1 matching rows, got X{X.shape} y{y.shape}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("non-finite training data")
    if X.shape[0] > cap:
        keep = subsample_indices(X.shape[0], cap, seed)
        X, y = X[keep], y[keep]
    if signal_var is None:
        signal_var = float(y.var()) if y.size > 1 else 1.0
        signal_var = max(signal_var, 1e-6)
    if alpha is None:
        alpha = 0.1 * signal_var
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return GprModel(X, y, float(lengthscale), float(signal_var), float(alpha)).refactor()


def predict_many(model: GprModel, Xs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Posterior mean, variance and clamp flags at each row of ``Xs``."""
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    if Xs.shape[1] != model.F:
        raise ValueError(f"feature dimension {Xs.shape[1]} != model dimension {model.F}")
    Ks = rbf_kernel(model.X, Xs, model.lengthscale, model.signal_var)  # (L, S)
    mean = Ks.T @ model.weights
    v = solve_triangular(model.chol, Ks, lower=True, check_finite=False)
    var = model.signal_var - np.einsum("ij,ij->j", v, v)
    if (var < NEG_VARIANCE_WARN).any():
        warnings.warn(f"GP variance {var.min():.3g} < 0; kernel matrix is ill-conditioned",
                      RuntimeWarning, stacklevel=2)
    clamped = var < 0
    return mean, np.maximum(var, 0.0), clamped


def predict_gpr(model: GprModel, x) -> GprPrediction:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict_gpr takes a single feature vector")
    mean, var, clamped = predict_many(model, x[None, :])
    return GprPrediction(float(mean[0]), float(var[0]), bool(clamped[0]))


def select_lengthscale(X, y, grid: Sequence[float] = LENGTHSCALE_GRID, **kw) -> GprModel:
    """Fit once per grid length-scale and keep the highest marginal likelihood."""
    fits = [fit_gpr(X, y, lengthscale=ls, **kw) for ls in grid]
    return max(fits, key=lambda m: m.log_marginal_likelihood())


# ---------------------------------------------------------------------------
# request features and per-type models


@dataclass
class GprFeaturizer:
    """Feature vector per request: region one-hot, weekday one-hot, day-of-year
    angle (sin, cos), same-day citywide demand of the request's type and workload.

    Continuous columns are z-scored with training statistics. ``use_*`` flags
    drop blocks for ablation.
    """

    M: int
    use_region: bool = True
    use_weekday: bool = True
    use_season: bool = True
    use_demand: bool = True
    use_workload: bool = True
    cont_mean: np.ndarray | None = None
    cont_std: np.ndarray | None = None

    @property
    def F(self) -> int:
        return (self.M * self.use_region + 7 * self.use_weekday + 2 * self.use_season
                + self.use_demand + self.use_workload)

    def _raw(self, requests: Sequence[ServiceRequest], demand: np.ndarray):
        n = len(requests)
        region = np.zeros((n, self.M))
        weekday = np.zeros((n, 7))
        cont = np.zeros((n, 4))
        for k, req in enumerate(requests):
            region[k, req.region_id] = 1.0
            weekday[k, req.created_at.weekday()] = 1.0
            ang = 2 * math.pi * (req.created_at.timetuple().tm_yday - 1) / 365.25
            cont[k] = (math.sin(ang), math.cos(ang), demand[k], req.workload or 0.0)
        return region, weekday, cont

    def fit(self, requests: Sequence[ServiceRequest], demand) -> "GprFeaturizer":
        _, _, cont = self._raw(requests, np.asarray(demand, dtype=float))
        self.cont_mean = cont.mean(axis=0) if len(requests) else np.zeros(4)
        self.cont_std = np.maximum(cont.std(axis=0), 1e-6) if len(requests) else np.ones(4)
        return self

    def transform(self, requests: Sequence[ServiceRequest], demand) -> np.ndarray:
        if self.cont_mean is None:
            raise RuntimeError("featurizer not fitted")
        region, weekday, cont = self._raw(requests, np.asarray(demand, dtype=float))
        cont = (cont - self.cont_mean) / self.cont_std
        blocks = []
        if self.use_region:
            blocks.append(region)
        if self.use_weekday:
            blocks.append(weekday)
        if self.use_season:
            blocks.append(cont[:, :2])
        if self.use_demand:
            blocks.append(cont[:, 2:3])
        if self.use_workload:
            blocks.append(cont[:, 3:4])
        return np.hstack(blocks) if blocks else np.zeros((len(requests), 0))

    def state(self) -> dict:
        return {
            "M": self.M, "use_region": self.use_region, "use_weekday": self.use_weekday,
            "use_season": self.use_season, "use_demand": self.use_demand,
            "use_workload": self.use_workload,
            "cont_mean": None if self.cont_mean is None else self.cont_mean.tolist(),
            "cont_std": None if self.cont_std is None else self.cont_std.tolist(),
        }

    @classmethod
    def from_state(cls, s: dict) -> "GprFeaturizer":
        s = dict(s)
        for k in ("cont_mean", "cont_std"):
            s[k] = None if s[k] is None else np.asarray(s[k], dtype=float)
        return cls(**s)


@dataclass
class TypeGpr:
    """GP for one request type, fitted on targets centred by their training mean.

    When the type has no training data ``model`` is ``None`` and predictions are
    the constant fallback ``(offset, fallback_var)``.
    """

    model: GprModel | None
    offset: float
    fallback_var: float
    count: int
    low_confidence: bool = False

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.model is None:
            return np.full(X.shape[0], self.offset), np.full(X.shape[0], self.fallback_var)
        mean, var, _ = predict_many(self.model, X)
        return mean + self.offset, var


def fit_type_gpr(X, y, lengthscale: float = 1.0, grid_search: bool = False, cap: int = SUBSAMPLE_CAP,
                 seed: int = 0, default_mean: float = 0.0, default_var: float = 1.0) -> TypeGpr:
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        return TypeGpr(None, default_mean, default_var, 0, low_confidence=True)
    offset = float(y.mean())
    if grid_search:
        model = select_lengthscale(X, y - offset, cap=cap, seed=seed)
    else:
        model = fit_gpr(X, y - offset, lengthscale=lengthscale, cap=cap, seed=seed)
    return TypeGpr(model, offset, float(y.var()), int(y.size), y.size < LOW_CONFIDENCE_COUNT)


def same_day_demand(requests: Sequence[ServiceRequest], panel, type_vocabulary: Sequence[str]) -> np.ndarray:
    """Citywide count of the request's type on its creation day, from the raw panel."""
    tindex = {t: k for k, t in enumerate(type_vocabulary)}
    out = np.zeros(len(requests))
    for k, req in enumerate(requests):
        t = panel.day_index(req.created_at.date())
        if 0 <= t < panel.D:
            out[k] = panel.r[:, tindex[req.request_type], t].sum()
    return out


def fit_all_types(
    train: Dataset,
    panel,
    workloads: Sequence[float] | None = None,
    featurizer: GprFeaturizer | None = None,
    lengthscale: float = 1.0,
    grid_search: bool = False,
    cap: int = SUBSAMPLE_CAP,
    seed: int = 0,
) -> tuple[dict[str, TypeGpr], GprFeaturizer]:
    """One GP per type in ``train.type_vocabulary``.

    ``workloads`` overrides the workload stored on each request. Types with no
    completed training request fall back to the global training mean and
    variance with a warning.
    """
    reqs = [r for r in train if r.service_time_days is not None]
    if workloads is not None:
        wl = dict(zip((r.request_id for r in train), workloads))
        from dataclasses import replace

        reqs = [replace(r, workload=wl.get(r.request_id, r.workload)) for r in reqs]
    demand = same_day_demand(reqs, panel, train.type_vocabulary)
    featurizer = featurizer or GprFeaturizer(M=panel.M)
    if featurizer.cont_mean is None:
        featurizer.fit(reqs, demand)
    X = featurizer.transform(reqs, demand)
    y = np.array([r.service_time_days for r in reqs])
    g_mean = float(y.mean()) if y.size else 0.0
    g_var = float(y.var()) if y.size > 1 else 1.0
    types = np.array([r.request_type for r in reqs])
    models = {}
    for l, label in enumerate(train.type_vocabulary):
        sel = types == label
        if not sel.any():
            warnings.warn(f"type {label!r} has no training records; using constant predictor",
                          RuntimeWarning, stacklevel=2)
        tg = fit_type_gpr(X[sel], y[sel], lengthscale, grid_search, cap, seed + l, g_mean, g_var)
        if tg.low_confidence and sel.any():
            log.warning("type %r has only %d training records", label, tg.count)
        models[label] = tg
    return models, featurizer
