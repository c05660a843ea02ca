"""Predictions, predictive variances and the metrics reported for them.

A prediction for a test point x uses the kernel row c with c_j = K(x, x_j)
(no 1/γ term, x is not a training point):

    ŷ = cᵀ m + y_mean,    σ_y² = cᵀ P c + σ_r²,

and the ±3σ_y band around ŷ.
"""

from typing import Optional, Tuple

import concurrent.futures
import dataclasses
import functools
import logging
import math
import threading

import numpy as np

from .data import CLASSIFICATION, REGRESSION, Centering, Encoding
from .errors import InvalidArgument
from .kernels import KernelSpec, kernel_vector
from .tt import FULL_CAP, TruncationPolicy, TTMatrix, TTVector, tt_full, tt_inner, tt_quadratic, tt_svd_vector

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class TrainedModel:
    kernel: KernelSpec
    X_train: np.ndarray
    dims: Tuple[int, ...]
    m: TTVector
    P: TTMatrix
    sigma_r2: float
    gamma: float
    centering: Centering = Centering()
    policy_yt: TruncationPolicy = TruncationPolicy()
    task: str = REGRESSION
    has_confidence: bool = True
    iterations: int = 0
    trace: tuple = ()
    encoding: Optional[Encoding] = None

    def __post_init__(self):
        if self.m.dims != tuple(self.dims) or self.P.row_dims != tuple(self.dims) or self.P.col_dims != tuple(self.dims):
            raise InvalidArgument(f"Mean and covariance do not match the tensorization {self.dims}.")
        if self.X_train.shape[0] != self.m.size:
            raise InvalidArgument(f"{self.X_train.shape[0]} training inputs for {self.m.size} dual weights.")
        if not self.sigma_r2 > 0:
            raise InvalidArgument(f"Measurement variance sigma_r2 must be positive, got {self.sigma_r2!r}.")

    @property
    def N(self):
        return self.X_train.shape[0]

    @property
    def f(self):
        return self.X_train.shape[1]

    @property
    def nbytes(self):
        return self.m.nbytes + self.P.nbytes

    @functools.cached_property
    def alpha(self):
        """The dual weights as a dense vector, or `None` past `FULL_CAP`."""
        if self.m.size > FULL_CAP:
            return None
        return tt_full(self.m)

    def test_row(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.size != self.f:
            raise InvalidArgument(f"Test point has {x.size} features, the model expects {self.f}.")
        if self.centering.x_means:
            x = x - np.asarray(self.centering.x_means)
        return kernel_vector(self.kernel, self.X_train, x)


class Diagnostics:
    """Counts negative predictive quadratic forms that were clamped to zero."""

    def __init__(self):
        self._lock = threading.Lock()
        self.clamped = 0

    def record_clamp(self, q):
        with self._lock:
            self.clamped += 1
        logger.warning("Clamped negative predictive variance term %r to zero; eps_P may be too loose", q)


def _mean(model, c, c_tt):
    if model.policy_yt.is_exact and model.alpha is not None:
        return float(c @ model.alpha) + model.centering.y_mean
    return tt_inner(c_tt, model.m) + model.centering.y_mean


def _variance(model, c_tt, diagnostics):
    if not model.has_confidence:
        return math.nan
    q = tt_quadratic(model.P, c_tt)
    if q < 0:
        (diagnostics or Diagnostics()).record_clamp(q)
        q = 0.0
    return q + model.sigma_r2


def _point(model, x, diagnostics):
    c = model.test_row(x)
    c_tt = tt_svd_vector(c, model.dims, model.policy_yt)
    return _mean(model, c, c_tt), _variance(model, c_tt, diagnostics)


def predict_mean(model, x_star):
    c = model.test_row(x_star)
    if model.policy_yt.is_exact and model.alpha is not None:
        return _mean(model, c, None)
    return _mean(model, c, tt_svd_vector(c, model.dims, model.policy_yt))


def predict_variance(model, x_star, diagnostics=None):
    """Return σ_y², or NaN for a model without a covariance."""
    if not model.has_confidence:
        return math.nan
    c_tt = tt_svd_vector(model.test_row(x_star), model.dims, model.policy_yt)
    return _variance(model, c_tt, diagnostics)


def sign(values):
    """Return ±1 elementwise with sign(0) = +1."""
    return np.where(np.asarray(values) >= 0, 1.0, -1.0)


@dataclasses.dataclass(frozen=True)
class Classification:
    label: float
    mean: float
    sigma: float
    confident: bool


def _confident(mean, sigma):
    if math.isnan(sigma):
        return False
    return (mean - 3 * sigma >= 0) == (mean + 3 * sigma >= 0)


def classify(model, x_star, diagnostics=None):
    mean, variance = _point(model, x_star, diagnostics)
    sigma = math.sqrt(variance)
    return Classification(float(sign(mean)), mean, sigma, _confident(mean, sigma))


@dataclasses.dataclass(frozen=True, eq=False)
class Predictions:
    mean: np.ndarray
    sigma: np.ndarray
    clamped: int = 0

    @property
    def lower(self):
        return self.mean - 3 * self.sigma

    @property
    def upper(self):
        return self.mean + 3 * self.sigma

    @property
    def labels(self):
        return sign(self.mean)


def predict_batch(model, X, workers=1):
    """Return `Predictions` for every row of `X`, in order, spread over `workers` threads."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    diagnostics = Diagnostics()
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda x: _point(model, x, diagnostics), X))
    else:
        results = [_point(model, x, diagnostics) for x in X]
    mean = np.array([r[0] for r in results])
    variance = np.array([r[1] for r in results])
    if diagnostics.clamped:
        logger.warning("%d of %d predictive variances were clamped", diagnostics.clamped, len(X))
    return Predictions(mean, np.sqrt(variance), diagnostics.clamped)


def _check(y, *others):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise InvalidArgument("Metrics need at least one point.")
    arrays = [np.asarray(a, dtype=np.float64).reshape(-1) for a in others]
    if any(a.size != y.size for a in arrays):
        raise InvalidArgument("Metric inputs have different lengths.")
    return (y, *arrays)


def metric_rmse(y, y_hat):
    y, y_hat = _check(y, y_hat)
    return math.sqrt(np.mean((y - y_hat) ** 2))


def metric_fit(y, y_hat):
    """Return 100 (1 - ‖y - ŷ‖ / ‖y - mean(ŷ)‖), or `None` when the denominator is zero."""
    y, y_hat = _check(y, y_hat)
    denominator = np.linalg.norm(y - y_hat.mean())
    if denominator == 0:
        return None
    return 100 * (1 - np.linalg.norm(y - y_hat) / denominator)


def metric_labeled(y, y_hat):
    y, y_hat = _check(y, y_hat)
    return 100 * np.count_nonzero(sign(y) == sign(y_hat)) / y.size


def metric_confidence(y, y_hat, sigma):
    """Return the percentage of targets inside ŷ ± 3σ, or `None` without predictive variances."""
    y, y_hat, sigma = _check(y, y_hat, sigma)
    if np.isnan(sigma).any():
        return None
    inside = (y >= y_hat - 3 * sigma) & (y <= y_hat + 3 * sigma)
    return 100 * np.count_nonzero(inside) / y.size


def metric_decisive(y, y_hat, sigma):
    """Return the percentage of points both ŷ - 3σ and ŷ + 3σ label correctly, or `None` without variances."""
    y, y_hat, sigma = _check(y, y_hat, sigma)
    if np.isnan(sigma).any():
        return None
    hits = (sign(y_hat - 3 * sigma) == sign(y)) & (sign(y_hat + 3 * sigma) == sign(y))
    return 100 * np.count_nonzero(hits) / y.size


def summarize(task, y, predictions):
    """Return the metrics reported for `task` as an ordered mapping of name to value (`None` if undefined)."""
    if task == CLASSIFICATION:
        return {
            "labeled": metric_labeled(y, predictions.mean),
            "confidence": metric_confidence(y, predictions.mean, predictions.sigma),
            "decisive": metric_decisive(y, predictions.mean, predictions.sigma),
        }
    return {
        "rmse": metric_rmse(y, predictions.mean),
        "fit": metric_fit(y, predictions.mean),
        "confidence": metric_confidence(y, predictions.mean, predictions.sigma),
    }
