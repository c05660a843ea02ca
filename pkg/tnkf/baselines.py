"""Nyström low-rank LS-SVM and kernel spectra.

Specification: [WS]

From S uniformly sampled training points with sampled Gram block
`Ω_SS = U Λ Uᵀ`, the top EV eigenpairs are extended to all N points:

    λ̂_i = (N / S) λ_i,    û_i = √(S / N) Ω_NS u_i / λ_i,

so that `Ω ≈ Û Λ̂ Ûᵀ`. The dual weights then follow from the Woodbury identity

    α = γ y - γ² Û (Λ̂⁻¹ + γ ÛᵀÛ)⁻¹ Ûᵀ y,

which only factors EV × EV matrices.

[WS]: C. K. I. Williams and M. Seeger, "Using the Nyström Method to Speed Up Kernel Machines", NIPS 13, 2001.
"""

import dataclasses
import logging

import numpy as np
import scipy.linalg

from .data import REGRESSION, Centering
from .dual import DENSE_CAP
from .errors import InvalidArgument, NumericalFailure, ResourceLimitError
from .kernels import kernel_block, kernel_matrix, tensorize_dims
from .predict import TrainedModel
from .tt import TruncationPolicy, tt_rank1_diag, tt_svd_vector

logger = logging.getLogger(__name__)

# Eigenvalues at or below this fraction of the largest one count as zero.
EIGEN_TOLERANCE = 1e-12

# Largest sampled block `nystrom_factors` will eigendecompose.
SAMPLE_CAP = 2 ** 14

# Rows of the N x S cross block `nystrom_factors` builds at once.
CROSS_CHUNK = 1024


@dataclasses.dataclass(frozen=True)
class NystromConfig:
    S: int
    EV: int
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.EV <= self.S:
            raise InvalidArgument(f"Need 1 <= EV <= S, got EV = {self.EV}, S = {self.S}.")


def uniform_sample(N, S, seed=0):
    """Return `S` distinct sorted indices drawn uniformly from `range(N)`."""
    if not 1 <= S <= N:
        raise InvalidArgument(f"Cannot sample {S} of {N} points.")
    if S == N:
        return np.arange(N)
    return np.sort(np.random.default_rng(seed).choice(N, S, replace=False))


def nystrom_factors(problem, config):
    """Return `(Û, λ̂)` with `Ω ≈ Û diag(λ̂) Ûᵀ`, eigenvalues in descending order."""
    N = problem.N
    if config.S > N:
        raise InvalidArgument(f"Cannot sample {config.S} of {N} points.")
    if config.S > SAMPLE_CAP:
        raise ResourceLimitError(f"Refusing to eigendecompose a {config.S}x{config.S} block (cap {SAMPLE_CAP}).")
    sample = uniform_sample(N, config.S, config.seed)
    block = kernel_matrix(problem.kernel, problem.X[sample])
    eigenvalues, eigenvectors = scipy.linalg.eigh(block)
    eigenvalues, eigenvectors = eigenvalues[::-1][:config.EV], eigenvectors[:, ::-1][:, :config.EV]
    floor = EIGEN_TOLERANCE * max(eigenvalues[0], 0.0)
    for i, value in enumerate(eigenvalues):
        if not value > floor:
            raise NumericalFailure(f"Sampled kernel block is rank deficient at eigenvalue {i} ({value!r}); lower EV.")
    # Ω_NS is never held whole; it is formed `CROSS_CHUNK` rows at a time.
    Z = problem.X[sample]
    U = np.empty((N, config.EV))
    for start in range(0, N, CROSS_CHUNK):
        stop = min(start + CROSS_CHUNK, N)
        U[start:stop] = kernel_block(problem.kernel, problem.X[start:stop], Z) @ eigenvectors
    U *= np.sqrt(config.S / N) / eigenvalues
    return U, (N / config.S) * eigenvalues


def nystrom_alpha(problem, config):
    U, lam = nystrom_factors(problem, config)
    gamma = problem.gamma
    inner = np.diag(1 / lam) + gamma * (U.T @ U)
    try:
        z = scipy.linalg.solve(inner, U.T @ problem.y, assume_a="pos")
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"Nyström inner system is singular: {exc}") from exc
    return gamma * problem.y - gamma ** 2 * (U @ z)


def model_from_alpha(problem, alpha, centering=None, task=REGRESSION, encoding=None):
    """Return a `TrainedModel` carrying the dense weights `alpha` exactly and no covariance."""
    dims = tensorize_dims(problem.N)
    return TrainedModel(
        kernel=problem.kernel,
        X_train=problem.X,
        dims=dims,
        m=tt_svd_vector(alpha, dims, TruncationPolicy.exact()),
        P=tt_rank1_diag(0.0, dims),
        sigma_r2=problem.sigma_r2,
        gamma=problem.gamma,
        centering=centering or Centering(),
        task=task,
        has_confidence=False,
        encoding=encoding,
    )


def nystrom_solve(problem, config, centering=None, task=REGRESSION, encoding=None):
    logger.info("Nyström solve with S = %d, EV = %d, seed %d", config.S, config.EV, config.seed)
    return model_from_alpha(problem, nystrom_alpha(problem, config), centering, task, encoding)


def spectrum(problem, sizes, cap=DENSE_CAP):
    """
    Return `{n: eigenvalues}` of the kernel Gram matrix (without the 1/γ shift)
    on an evenly strided subset of `n` training points, eigenvalues descending.
    """
    result = {}
    for n in sizes:
        n = int(n)
        if n > cap:
            raise ResourceLimitError(f"Refusing to eigendecompose a {n}x{n} kernel matrix (cap {cap}).")
        if not 1 <= n <= problem.N:
            raise InvalidArgument(f"Spectrum size {n} is out of range for {problem.N} points.")
        indices = np.arange(n) * problem.N // n
        result[n] = scipy.linalg.eigh(kernel_matrix(problem.kernel, problem.X[indices]), eigvals_only=True)[::-1]
    return result
