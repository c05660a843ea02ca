"""The tensor-network Kalman filter for the LS-SVM dual problem.

Specification: [TT], [KF]

The dual weights α get the prior N(0, p₀ I) and every row of `C α = y` is
one scalar measurement y_k = c_kᵀ α + r_k with r_k ~ N(0, σ_r²). Mean `m`,
covariance `P`, gain `g` and the rows `c_k` are all tensor trains, rounded
after every update under their own `TruncationPolicy`. One step:

    P⁻ = P / λ
    v  = y_k - c_kᵀ m
    s  = c_kᵀ P⁻ c_k + σ_r²
    g  = round_k(P⁻ c_k / s)
    m  = round_m(m + v g)
    P  = round_P(P⁻ - s g gᵀ)

Costs of one step, with r_c, r_m, r_P, r_g the ranks of the row, mean,
covariance and gain, and n the mode size:

    v           O(d n r_c r_m (r_c + r_m))
    P⁻ c_k      O(d n² r_P² r_c²), ranks r_P r_c before rounding
    g rounding  O(d n (r_P r_c)³)
    m rounding  O(d n (r_m + r_g)³)
    P rounding  O(d n² (r_P + r_g²)³)

The dominant memory is the unrounded covariance update of
(r_P + r_g²)² n² d doubles; `TraceRecord.state_bytes` reports the rounded
cores that stay alive.

[TT]: I. V. Oseledets, "Tensor-Train Decomposition", SIAM J. Sci. Comput. 33(5), 2011.
[KF]: R. E. Kalman, "A New Approach to Linear Filtering and Prediction Problems", J. Basic Eng. 82(1), 1960.
"""

from typing import List, Optional

import contextlib
import csv
import dataclasses
import logging
import math
import time

import numpy as np

from .channel import open_channel
from .data import REGRESSION, Centering, format_float
from .dual import prior_covariance
from .errors import CovarianceCollapse, DataError, InvalidArgument
from .kernels import kernel_vector, row_to_tt, tensorize_dims
from .predict import TrainedModel
from .tt import (
    FULL_CAP,
    TruncationPolicy,
    TTMatrix,
    TTVector,
    tt_add,
    tt_frobenius_norm,
    tt_full,
    tt_inner,
    tt_matvec,
    tt_outer,
    tt_rank1_diag,
    tt_round,
    tt_scale,
    tt_transpose,
    tt_zeros,
)

logger = logging.getLogger(__name__)

ROW_ORDERS = ("natural", "shuffle")

# Relative asymmetry of P above which the symmetrization pass logs a warning.
ASYMMETRY_WARNING = 1e-6


@dataclasses.dataclass(frozen=True)
class EarlyStop:
    p_norm_threshold: float
    p_norm_delta_threshold: float
    patience: int = 5

    def __post_init__(self):
        if self.p_norm_threshold < 0 or self.p_norm_delta_threshold < 0:
            raise InvalidArgument("Early-stop thresholds must be nonnegative.")
        if self.patience < 1:
            raise InvalidArgument(f"Early-stop patience must be at least 1, got {self.patience}.")


@dataclasses.dataclass(frozen=True)
class TNKFConfig:
    gamma: float
    sigma_r2: float
    sigma_e2: Optional[float] = None
    # Forgetting factor; `lambda` is a keyword.
    lam: float = 1.0
    policy_m: TruncationPolicy = TruncationPolicy()
    policy_c: TruncationPolicy = TruncationPolicy()
    policy_P: TruncationPolicy = TruncationPolicy()
    policy_k: TruncationPolicy = TruncationPolicy()
    policy_yt: TruncationPolicy = TruncationPolicy()
    early_stop: Optional[EarlyStop] = None
    max_iterations: Optional[int] = None
    row_order: str = "natural"
    seed: int = 0
    # Symmetrize P every this many iterations; 0 turns it off.
    sym_every: int = 0
    # Record the monitor RMSE every this many iterations; 0 turns it off.
    rmse_every: int = 0

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise InvalidArgument(f"Forgetting factor must be in (0, 1], got {self.lam!r}.")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise InvalidArgument(f"max_iterations must be positive, got {self.max_iterations!r}.")
        if self.row_order not in ROW_ORDERS:
            raise InvalidArgument(f"Unknown row order {self.row_order!r}.")
        if self.sym_every < 0 or self.rmse_every < 0:
            raise InvalidArgument("sym_every and rmse_every must be nonnegative.")
        # Validates gamma, sigma_e2 and sigma_r2.
        prior_covariance(self.gamma, self.sigma_e2, self.sigma_r2)
        if not self.sigma_r2 > 0:
            raise InvalidArgument(f"Measurement variance sigma_r2 must be positive, got {self.sigma_r2!r}.")

    @classmethod
    def for_problem(cls, problem, **options):
        return cls(gamma=problem.gamma, sigma_r2=problem.sigma_r2, sigma_e2=problem.sigma_e2, **options)

    @property
    def prior(self):
        return prior_covariance(self.gamma, self.sigma_e2, self.sigma_r2)


@dataclasses.dataclass(frozen=True)
class TraceRecord:
    k: int
    v: float
    s: float
    p_frobenius: float
    # Change of ‖P‖_F during this step.
    p_delta: float
    max_rank_m: int
    max_rank_P: int
    max_rank_k: int
    elapsed_ms: float
    state_bytes: int
    train_rmse: Optional[float] = None


@dataclasses.dataclass(frozen=True, eq=False)
class TNKFState:
    m: TTVector
    P: TTMatrix
    k: int = 0
    p_norm: float = 0.0
    # The step that produced this state; `None` before the first one.
    record: Optional[TraceRecord] = None


def tnkf_init(N, config):
    dims = tensorize_dims(N)
    prior = config.prior
    return TNKFState(tt_zeros(dims), tt_rank1_diag(prior, dims), 0, prior * math.sqrt(N))


def _symmetrize(P, policy, k):
    transposed = tt_transpose(P)
    norm = tt_frobenius_norm(P)
    if norm > 0:
        asymmetry = tt_frobenius_norm(tt_add(P, tt_scale(transposed, -1))) / norm
        if asymmetry > ASYMMETRY_WARNING:
            logger.warning("Covariance asymmetry %.3g at iteration %d", asymmetry, k)
    return tt_round(tt_scale(tt_add(P, transposed), 0.5), policy)


def tnkf_step(state, c, y, config):
    """
    Return the state after the measurement `y = cᵀ α + r`, carrying its `TraceRecord`.

    Raise `CovarianceCollapse` if the innovation variance is not positive.
    """
    start = time.perf_counter()
    if c.dims != state.m.dims:
        raise InvalidArgument(f"Row dims {c.dims} do not match state dims {state.m.dims}.")
    k = state.k + 1
    P = state.P if config.lam == 1 else tt_scale(state.P, 1 / config.lam)
    v = float(y) - tt_inner(c, state.m)
    Pc = tt_matvec(P, c)
    s = tt_inner(c, Pc) + config.sigma_r2
    if not s > 0:
        raise CovarianceCollapse(k, s)
    g = tt_round(tt_scale(Pc, 1 / s), config.policy_k)
    m = tt_round(tt_add(state.m, tt_scale(g, v)), config.policy_m)
    P = tt_round(tt_add(P, tt_scale(tt_outer(g, g), -s)), config.policy_P)
    if config.sym_every and k % config.sym_every == 0:
        P = _symmetrize(P, config.policy_P, k)
    p_norm = tt_frobenius_norm(P)
    record = TraceRecord(
        k=k,
        v=v,
        s=s,
        p_frobenius=p_norm,
        p_delta=p_norm - state.p_norm,
        max_rank_m=m.max_rank,
        max_rank_P=P.max_rank,
        max_rank_k=g.max_rank,
        elapsed_ms=(time.perf_counter() - start) * 1000,
        state_bytes=m.nbytes + P.nbytes,
    )
    logger.debug("Iteration %d: v = %.6g, s = %.6g, |P| = %.6g, ranks m %d P %d", k, v, s, p_norm, m.max_rank, P.max_rank)
    return TNKFState(m, P, k, p_norm, record)


def early_stop_check(trace, config):
    """Return whether the last `patience` records all have a small and settled ‖P‖_F."""
    rule = config.early_stop
    if rule is None or len(trace) < rule.patience:
        return False
    return all(
        r.p_frobenius < rule.p_norm_threshold and abs(r.p_delta) <= rule.p_norm_delta_threshold
        for r in trace[-rule.patience:]
    )


def row_order(N, config):
    if config.row_order == "shuffle":
        return np.random.default_rng(config.seed).permutation(N)
    return np.arange(N)


def _rows(problem, order, dims, policy):
    for k in order:
        yield int(k), row_to_tt(problem.row(int(k)), dims, policy)


def _monitor_rmse(problem, m, monitor):
    X_eval, y_eval = monitor
    if m.size > FULL_CAP:
        return None
    alpha = tt_full(m)
    y_hat = np.array([kernel_vector(problem.kernel, problem.X, x) @ alpha for x in X_eval])
    return math.sqrt(np.mean((np.asarray(y_eval) - y_hat) ** 2))


def tnkf_train(problem, config, centering=None, task=REGRESSION, encoding=None,
               prefetch=False, progress=None, monitor=None):
    """
    Return a `TrainedModel` after one pass over the rows of `problem`.

    Training stops early after `config.max_iterations` rows or when
    `early_stop_check` fires. With `prefetch` the TT of the next row is built
    on a background thread. `progress(state, total)` is called after every
    step; `monitor` is an `(X, y)` pair of centered points scored every
    `config.rmse_every` iterations.
    """
    if (config.gamma, config.sigma_r2) != (problem.gamma, problem.sigma_r2):
        raise InvalidArgument("Filter configuration and problem disagree on gamma or sigma_r2.")
    state = tnkf_init(problem.N, config)
    dims = state.m.dims
    order = row_order(problem.N, config)
    if config.max_iterations is not None:
        order = order[:config.max_iterations]
    logger.info(
        "Training on %d of %d rows over dims %s: m %s, c %s, P %s, k %s",
        len(order), problem.N, dims, config.policy_m, config.policy_c, config.policy_P, config.policy_k,
    )
    start = time.perf_counter()
    trace: List[TraceRecord] = []
    rows = _rows(problem, order, dims, config.policy_c)
    with (open_channel(rows) if prefetch else contextlib.nullcontext(rows)) as source:
        for k, c in source:
            state = tnkf_step(state, c, problem.y[k], config)
            if monitor is not None and config.rmse_every and state.k % config.rmse_every == 0:
                rmse = _monitor_rmse(problem, state.m, monitor)
                state = dataclasses.replace(state, record=dataclasses.replace(state.record, train_rmse=rmse))
            trace.append(state.record)
            if progress is not None:
                progress(state, len(order))
            if early_stop_check(trace, config):
                logger.info("Early stop after %d of %d rows", state.k, problem.N)
                break
    logger.info("Trained %d iterations in %.3f s, |P| = %.6g", state.k, time.perf_counter() - start, state.p_norm)
    return TrainedModel(
        kernel=problem.kernel,
        X_train=problem.X,
        dims=dims,
        m=state.m,
        P=state.P,
        sigma_r2=config.sigma_r2,
        gamma=config.gamma,
        centering=centering or Centering(),
        policy_yt=config.policy_yt,
        task=task,
        iterations=state.k,
        trace=tuple(trace),
        encoding=encoding,
    )


TRACE_COLUMNS = ["k", "v_k", "s_k", "p_frobenius", "max_rank_m", "max_rank_P", "elapsed_ms"]


def write_trace(trace, path):
    """Write one CSV row per iteration; a `train_rmse` column is added when any record has one."""
    with_rmse = any(r.train_rmse is not None for r in trace)
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(TRACE_COLUMNS + ["train_rmse"] * with_rmse)
            for r in trace:
                row = [r.k, format_float(r.v), format_float(r.s), format_float(r.p_frobenius),
                       r.max_rank_m, r.max_rank_P, "%.3f" % r.elapsed_ms]
                if with_rmse:
                    row.append("" if r.train_rmse is None else format_float(r.train_rmse))
                writer.writerow(row)
    except OSError as exc:
        raise DataError(f"Cannot write {path}: {exc.strerror}.") from exc
