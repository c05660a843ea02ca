"""The LS-SVM dual problem `C α = y` and its dense reference solutions.

`C = Ω + I/γ` with Ω the kernel Gram matrix of the (centered) training inputs.
The dense solvers here are oracles for small problems; they refuse to build
`C` for more than `DENSE_CAP` points.
"""

from typing import Optional

import dataclasses

import numpy as np
import scipy.linalg

from .errors import InvalidArgument, NumericalFailure, ResourceLimitError
from .kernels import KernelSpec, as_inputs, kernel_row

DENSE_CAP = 4096


def prior_covariance(gamma, sigma_e2=None, sigma_r2=None):
    """Return the prior variance `γ² σ_e²`, falling back to `σ_r²` when `σ_e²` is unknown."""
    if not gamma > 0:
        raise InvalidArgument(f"Regularization gamma must be positive, got {gamma!r}.")
    if sigma_e2 is None:
        if sigma_r2 is None or not sigma_r2 > 0:
            raise InvalidArgument("Need sigma_e2, or a positive sigma_r2 to fall back on.")
        return float(sigma_r2)
    if not sigma_e2 > 0:
        raise InvalidArgument(f"Error variance sigma_e2 must be positive, got {sigma_e2!r}.")
    return float(gamma) ** 2 * float(sigma_e2)


@dataclasses.dataclass(frozen=True, eq=False)
class DualProblem:
    X: np.ndarray
    y: np.ndarray
    gamma: float
    kernel: KernelSpec
    sigma_r2: float
    sigma_e2: Optional[float] = None

    def __post_init__(self):
        X = as_inputs(self.X)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if y.size != X.shape[0]:
            raise InvalidArgument(f"Got {X.shape[0]} inputs but {y.size} targets.")
        if not self.gamma > 0:
            raise InvalidArgument(f"Regularization gamma must be positive, got {self.gamma!r}.")
        if not self.sigma_r2 > 0:
            raise InvalidArgument(f"Measurement variance sigma_r2 must be positive, got {self.sigma_r2!r}.")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        # Validates sigma_e2.
        prior_covariance(self.gamma, self.sigma_e2, self.sigma_r2)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def prior(self):
        return prior_covariance(self.gamma, self.sigma_e2, self.sigma_r2)

    def row(self, k):
        return kernel_row(self.kernel, self.X, k, self.gamma)


def assemble_dense(problem, cap=DENSE_CAP):
    """Return `C` by stacking `kernel_row` for every k. Raise `ResourceLimitError` above `cap` points."""
    if problem.N > cap:
        raise ResourceLimitError(f"Refusing to assemble a dense {problem.N}x{problem.N} kernel matrix (cap {cap}).")
    return np.vstack([problem.row(k) for k in range(problem.N)])


def solve_dense_direct(problem, cap=DENSE_CAP):
    """Return `α = C⁻¹ y` through a symmetric factorization."""
    C = assemble_dense(problem, cap)
    try:
        return scipy.linalg.solve(C, problem.y, assume_a="sym")
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"Kernel matrix is singular: {exc}") from exc


def posterior_dense(problem, cap=DENSE_CAP):
    """
    Return the batch posterior `(m, P)` of α under the prior `N(0, p₀ I)` and
    measurements `y = C α + r`, `r ~ N(0, σ_r² I)`:

        P = (I/p₀ + CᵀC/σ_r²)⁻¹,    m = P Cᵀ y / σ_r².
    """
    C = assemble_dense(problem, cap)
    A = np.eye(problem.N) / problem.prior + C.T @ C / problem.sigma_r2
    try:
        factor = scipy.linalg.cho_factor(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"Posterior precision is not positive definite: {exc}") from exc
    m = scipy.linalg.cho_solve(factor, C.T @ problem.y / problem.sigma_r2)
    P = scipy.linalg.cho_solve(factor, np.eye(problem.N))
    return m, (P + P.T) / 2


def solve_dense_bordered(problem, cap=DENSE_CAP):
    """
    Return `(b, α)` solving the bordered system

        [0  1ᵀ] [b]   [0]
        [1  C ] [α] = [y].

    Dense test helper: the filter drops the bias row and centers the targets instead.
    """
    C = assemble_dense(problem, cap)
    N = problem.N
    A = np.zeros((N + 1, N + 1))
    A[0, 1:] = 1
    A[1:, 0] = 1
    A[1:, 1:] = C
    rhs = np.concatenate([[0.0], problem.y])
    try:
        x = scipy.linalg.solve(A, rhs, assume_a="sym")
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"Bordered system is singular: {exc}") from exc
    return float(x[0]), x[1:]
