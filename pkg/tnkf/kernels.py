"""Kernel functions and rows of the regularized kernel matrix.

Every row is computed from `kernel_vector`, so row k of `C` equals column k
bit for bit. Dense Gram blocks come from `kernel_block` and agree with the
rows up to rounding.
"""

import dataclasses
import enum

import numpy as np
import scipy.spatial.distance

from .errors import InvalidArgument
from .tt import TruncationPolicy, tt_svd_vector


class KernelKind(enum.Enum):
    RBF = "rbf"
    LINEAR = "linear"
    POLYNOMIAL = "polynomial"


@dataclasses.dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind = KernelKind.RBF
    sigma2: float = 1.0
    degree: int = 2
    offset: float = 1.0

    def __post_init__(self):
        if not isinstance(self.kind, KernelKind):
            raise InvalidArgument(f"Unknown kernel {self.kind!r}.")
        if self.kind is KernelKind.RBF and not self.sigma2 > 0:
            raise InvalidArgument(f"RBF bandwidth sigma2 must be positive, got {self.sigma2!r}.")
        if self.kind is KernelKind.POLYNOMIAL and self.degree < 1:
            raise InvalidArgument(f"Polynomial kernel needs degree >= 1, got {self.degree}.")

    @classmethod
    def rbf(cls, sigma2):
        return cls(KernelKind.RBF, sigma2=float(sigma2))

    @classmethod
    def linear(cls):
        return cls(KernelKind.LINEAR)

    @classmethod
    def polynomial(cls, degree, offset=1.0):
        return cls(KernelKind.POLYNOMIAL, degree=int(degree), offset=float(offset))

    def __str__(self):
        if self.kind is KernelKind.RBF:
            return f"rbf(sigma2={self.sigma2:g})"
        if self.kind is KernelKind.POLYNOMIAL:
            return f"polynomial(degree={self.degree}, offset={self.offset:g})"
        return "linear"


def as_inputs(X):
    """Return `X` as a 2-D float array, one row per point."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidArgument(f"Expected a nonempty (N, f) array of inputs, got shape {X.shape}.")
    return X


def kernel_vector(spec, X, x):
    """Return `[K(X[j], x) for j in range(N)]`."""
    X = as_inputs(X)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != X.shape[1]:
        raise InvalidArgument(f"Point has {x.size} features, training inputs have {X.shape[1]}.")
    if spec.kind is KernelKind.RBF:
        return np.exp(-((X - x) ** 2).sum(axis=1) / spec.sigma2)
    dots = (X * x).sum(axis=1)
    if spec.kind is KernelKind.LINEAR:
        return dots
    return (dots + spec.offset) ** spec.degree


def kernel_eval(spec, x, x2):
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(kernel_vector(spec, x, x2)[0])


def kernel_block(spec, X, Z):
    """Return the Gram block with entry `[i, j] = K(X[i], Z[j])`."""
    X, Z = as_inputs(X), as_inputs(Z)
    if X.shape[1] != Z.shape[1]:
        raise InvalidArgument(f"Inputs have {X.shape[1]} and {Z.shape[1]} features.")
    if spec.kind is KernelKind.RBF:
        return np.exp(-scipy.spatial.distance.cdist(X, Z, "sqeuclidean") / spec.sigma2)
    dots = X @ Z.T
    if spec.kind is KernelKind.LINEAR:
        return dots
    return (dots + spec.offset) ** spec.degree


def kernel_matrix(spec, X):
    """Return the dense Gram matrix Ω with Ω[j, k] = K(X[j], X[k])."""
    return kernel_block(spec, X, X)


def kernel_row(spec, X, k, gamma):
    """
    Return row `k` of `C = Ω + I/γ` as a dense vector.

    Raise `InvalidArgument` if `k` is out of range or `gamma` is not positive.
    """
    X = as_inputs(X)
    if not 0 <= k < X.shape[0]:
        raise InvalidArgument(f"Row index {k} is out of range for {X.shape[0]} training points.")
    if not gamma > 0:
        raise InvalidArgument(f"Regularization gamma must be positive, got {gamma!r}.")
    row = kernel_vector(spec, X, X[k])
    row[k] += 1 / gamma
    return row


def tensorize_dims(N):
    """Return the prime factors of `N` in ascending order; `(1,)` for `N == 1`."""
    N = int(N)
    if N < 1:
        raise InvalidArgument(f"Cannot tensorize {N} points.")
    if N == 1:
        return (1,)
    dims = []
    p = 2
    while p * p <= N:
        while N % p == 0:
            dims.append(p)
            N //= p
        p += 1
    if N > 1:
        dims.append(N)
    return tuple(dims)


def row_to_tt(row, dims, policy=TruncationPolicy()):
    return tt_svd_vector(row, dims, policy)
