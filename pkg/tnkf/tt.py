"""Tensor trains for vectors and matrices.

Specification: [TT]

A `TTVector` stores a vector of length n_1 ⋯ n_d as a chain of cores of shape
(r_{k-1}, n_k, r_k). A `TTMatrix` stores a matrix of shape (m_1 ⋯ m_d, n_1 ⋯ n_d)
as cores of shape (r_{k-1}, m_k, n_k, r_k); row and column indices are
big-endian mixed radix over the modes, and mode k of the matrix pairs row
digit k with column digit k. The boundary ranks r_0 and r_d are always 1.

Everything here is pure: cores are read-only arrays and every operation
returns a new train. For addition, scaling, rounding and norms a matrix core
is treated as a vector core of shape (r_{k-1}, m_k n_k, r_k).

Operation costs, for d cores of mode size n and rank r:

    tt_svd_vector     O(d n r^3) after an O(n^d) first sweep
    tt_round          O(d n r^3)
    tt_add            O(d n r^2), ranks add
    tt_matvec         O(d n^2 r_A^2 r_x^2), ranks multiply
    tt_outer          O(d n^2 r^4), ranks multiply
    tt_inner          O(d n r^3)
    tt_quadratic      O(d n^2 r_x^2 r_A (r_x + r_A))

[TT]: I. V. Oseledets, "Tensor-Train Decomposition", SIAM J. Sci. Comput. 33(5), 2011.
"""

from typing import List, Tuple

import dataclasses
import enum
import math

import numpy as np
import scipy.linalg

from .errors import InvalidArgument, NumericalFailure, ResourceLimitError

# Singular values at or below this fraction of the largest one are treated as zero.
RANK_TOLERANCE = 1e-14

# `tt_full` refuses to materialize more elements than this unless told otherwise.
FULL_CAP = 2 ** 20


class Mode(enum.Enum):
    NONE = "none"
    RELATIVE_ERROR = "relative-error"
    MAX_RANK = "max-rank"


@dataclasses.dataclass(frozen=True)
class TruncationPolicy:
    mode: Mode = Mode.NONE
    epsilon: float = 0.0
    max_rank: int = 1

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise InvalidArgument(f"Truncation epsilon must be nonnegative, got {self.epsilon!r}.")
        if self.max_rank < 1:
            raise InvalidArgument(f"Truncation rank must be at least 1, got {self.max_rank!r}.")

    @classmethod
    def exact(cls):
        return cls()

    @classmethod
    def relative(cls, epsilon):
        """Return a relative-error policy; an `epsilon` of zero means exact."""
        if epsilon == 0:
            return cls()
        return cls(Mode.RELATIVE_ERROR, epsilon=float(epsilon))

    @classmethod
    def rank(cls, max_rank):
        return cls(Mode.MAX_RANK, max_rank=int(max_rank))

    @property
    def is_exact(self):
        return self.mode is Mode.NONE

    def __str__(self):
        if self.mode is Mode.RELATIVE_ERROR:
            return f"eps={self.epsilon:g}"
        if self.mode is Mode.MAX_RANK:
            return f"r={self.max_rank}"
        return "exact"


def _freeze(cores, ndim):
    frozen = []
    for core in cores:
        view = np.asarray(core, dtype=np.float64).view()
        view.flags.writeable = False
        frozen.append(view)
    if not frozen:
        raise InvalidArgument("A tensor train needs at least one core.")
    for k, core in enumerate(frozen):
        if core.ndim != ndim:
            raise InvalidArgument(f"Core {k} has {core.ndim} axes, expected {ndim}.")
        if 0 in core.shape:
            raise InvalidArgument(f"Core {k} has an empty axis: {core.shape}.")
    if frozen[0].shape[0] != 1 or frozen[-1].shape[-1] != 1:
        raise InvalidArgument("Boundary ranks of a tensor train must be 1.")
    for k in range(len(frozen) - 1):
        if frozen[k].shape[-1] != frozen[k + 1].shape[0]:
            raise InvalidArgument(f"Rank mismatch between cores {k} and {k + 1}.")
    return tuple(frozen)


@dataclasses.dataclass(frozen=True, eq=False, repr=False)
class TTVector:
    cores: Tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "cores", _freeze(self.cores, 3))

    @property
    def dims(self):
        return tuple(core.shape[1] for core in self.cores)

    @property
    def ranks(self):
        return (1,) + tuple(core.shape[-1] for core in self.cores)

    @property
    def max_rank(self):
        return max(self.ranks)

    @property
    def size(self):
        return math.prod(self.dims)

    @property
    def nbytes(self):
        return sum(core.nbytes for core in self.cores)

    def __repr__(self):
        return f"TTVector(dims={self.dims}, ranks={self.ranks})"


@dataclasses.dataclass(frozen=True, eq=False, repr=False)
class TTMatrix:
    cores: Tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "cores", _freeze(self.cores, 4))

    @property
    def row_dims(self):
        return tuple(core.shape[1] for core in self.cores)

    @property
    def col_dims(self):
        return tuple(core.shape[2] for core in self.cores)

    @property
    def shape(self):
        return math.prod(self.row_dims), math.prod(self.col_dims)

    @property
    def ranks(self):
        return (1,) + tuple(core.shape[-1] for core in self.cores)

    @property
    def max_rank(self):
        return max(self.ranks)

    @property
    def size(self):
        rows, cols = self.shape
        return rows * cols

    @property
    def nbytes(self):
        return sum(core.nbytes for core in self.cores)

    def __repr__(self):
        return f"TTMatrix(row_dims={self.row_dims}, col_dims={self.col_dims}, ranks={self.ranks})"


def _check_dims(dims):
    dims = tuple(int(n) for n in dims)
    if not dims or any(n < 1 for n in dims):
        raise InvalidArgument(f"Mode sizes must be a nonempty sequence of positive integers, got {dims!r}.")
    return dims


def _flat(tt) -> List[np.ndarray]:
    if isinstance(tt, TTMatrix):
        return [core.reshape(core.shape[0], -1, core.shape[-1]) for core in tt.cores]
    if isinstance(tt, TTVector):
        return list(tt.cores)
    raise InvalidArgument(f"Expected a tensor train, got {type(tt).__name__}.")


def _wrap(like, cores):
    if isinstance(like, TTMatrix):
        return TTMatrix(
            tuple(core.reshape(core.shape[0], m, n, core.shape[-1])
                  for core, m, n in zip(cores, like.row_dims, like.col_dims))
        )
    return TTVector(tuple(cores))


def _same_structure(a, b):
    if type(a) is not type(b):
        raise InvalidArgument(f"Cannot combine a {type(a).__name__} with a {type(b).__name__}.")
    if isinstance(a, TTMatrix):
        if a.row_dims != b.row_dims or a.col_dims != b.col_dims:
            raise InvalidArgument("Tensor-train matrices have different mode sizes.")
    elif a.dims != b.dims:
        raise InvalidArgument(f"Tensor-train vectors have different mode sizes: {a.dims} and {b.dims}.")


def _svd(a):
    try:
        return scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        pass
    except ValueError as exc:
        raise NumericalFailure(f"Cannot take the SVD of a non-finite unfolding: {exc}") from exc
    # gesdd occasionally fails to converge where the slower driver does not.
    try:
        return scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"SVD failed on a {a.shape[0]}x{a.shape[1]} unfolding: {exc}") from exc


def _delta(policy, norm, d):
    if policy.mode is not Mode.RELATIVE_ERROR or d < 2:
        return 0.0
    return policy.epsilon * norm / math.sqrt(d - 1)


def _rank(s, policy, delta):
    if s.size == 0 or not s[0] > 0:
        return 1
    r = int(np.count_nonzero(s > RANK_TOLERANCE * s[0]))
    if policy.mode is Mode.RELATIVE_ERROR:
        # tail[i] is the norm of everything from the i-th singular value on.
        tail = np.sqrt(np.cumsum((s ** 2)[::-1]))[::-1]
        fits = np.flatnonzero(tail <= delta)
        if fits.size:
            r = min(r, int(fits[0]))
    elif policy.mode is Mode.MAX_RANK:
        r = min(r, policy.max_rank)
    return max(r, 1)


def _tt_svd(x, dims, policy):
    d = len(dims)
    delta = _delta(policy, np.linalg.norm(x), d)
    cores = []
    r = 1
    rest = x.reshape(1, -1)
    for n in dims[:-1]:
        u, s, vt = _svd(rest.reshape(r * n, -1))
        rank = _rank(s, policy, delta)
        cores.append(u[:, :rank].reshape(r, n, rank))
        rest = s[:rank, None] * vt[:rank]
        r = rank
    cores.append(rest.reshape(r, dims[-1], 1))
    return cores


def tt_svd_vector(data, dims, policy=TruncationPolicy()):
    """
    Return the TT of the dense vector `data` over mode sizes `dims`.

    With a relative-error policy the result differs from `data` by at most
    `epsilon * ‖data‖` in the 2-norm. Raise `InvalidArgument` if the length of
    `data` is not the product of `dims`.
    """
    dims = _check_dims(dims)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 1 or x.size != math.prod(dims):
        raise InvalidArgument(f"Cannot tensorize an array of shape {x.shape} over dims {dims}.")
    return TTVector(tuple(_tt_svd(x, dims, policy)))


def tt_svd_matrix(data, row_dims, col_dims, policy=TruncationPolicy()):
    """Return the TT-matrix of the dense matrix `data`, pairing row and column digit k in core k."""
    row_dims, col_dims = _check_dims(row_dims), _check_dims(col_dims)
    a = np.asarray(data, dtype=np.float64)
    if len(row_dims) != len(col_dims):
        raise InvalidArgument("Row and column mode sizes must have the same number of modes.")
    if a.shape != (math.prod(row_dims), math.prod(col_dims)):
        raise InvalidArgument(f"Cannot tensorize a matrix of shape {a.shape} over {row_dims} x {col_dims}.")
    d = len(row_dims)
    order = [axis for k in range(d) for axis in (k, d + k)]
    x = a.reshape(row_dims + col_dims).transpose(order).reshape(-1)
    merged = tuple(m * n for m, n in zip(row_dims, col_dims))
    cores = _tt_svd(x, merged, policy)
    return TTMatrix(tuple(core.reshape(core.shape[0], m, n, core.shape[-1])
                          for core, m, n in zip(cores, row_dims, col_dims)))


def tt_round(tt, policy):
    """
    Return `tt` recompressed under `policy`.

    The cores are first orthogonalized right to left with QR, then truncated
    left to right with SVDs; with a relative-error policy the whole sweep
    changes `tt` by at most `epsilon * ‖tt‖_F`. Ranks never grow.
    """
    cores = _flat(tt)
    d = len(cores)
    if d == 1:
        return tt
    for k in range(d - 1, 0, -1):
        r0, n, r1 = cores[k].shape
        q, r = scipy.linalg.qr(cores[k].reshape(r0, n * r1).T, mode="economic")
        cores[k] = q.T.reshape(-1, n, r1)
        cores[k - 1] = np.tensordot(cores[k - 1], r.T, axes=1)
    delta = _delta(policy, np.linalg.norm(cores[0]), d)
    for k in range(d - 1):
        r0, n, r1 = cores[k].shape
        u, s, vt = _svd(cores[k].reshape(r0 * n, r1))
        rank = _rank(s, policy, delta)
        cores[k] = u[:, :rank].reshape(r0, n, rank)
        cores[k + 1] = np.tensordot(s[:rank, None] * vt[:rank], cores[k + 1], axes=1)
    return _wrap(tt, cores)


def tt_add(a, b):
    """Return `a + b`; interior ranks add."""
    _same_structure(a, b)
    ca, cb = _flat(a), _flat(b)
    d = len(ca)
    if d == 1:
        return _wrap(a, [ca[0] + cb[0]])
    cores = []
    for k, (x, y) in enumerate(zip(ca, cb)):
        if k == 0:
            cores.append(np.concatenate([x, y], axis=2))
        elif k == d - 1:
            cores.append(np.concatenate([x, y], axis=0))
        else:
            z = np.zeros((x.shape[0] + y.shape[0], x.shape[1], x.shape[2] + y.shape[2]))
            z[:x.shape[0], :, :x.shape[2]] = x
            z[x.shape[0]:, :, x.shape[2]:] = y
            cores.append(z)
    return _wrap(a, cores)


def tt_scale(tt, scalar):
    cores = _flat(tt)
    cores[0] = cores[0] * float(scalar)
    return _wrap(tt, cores)


def tt_matvec(matrix, vector):
    """Return the TT of `matrix @ vector`; ranks multiply."""
    if matrix.col_dims != vector.dims:
        raise InvalidArgument(f"Column dims {matrix.col_dims} do not match vector dims {vector.dims}.")
    cores = []
    for a, x in zip(matrix.cores, vector.cores):
        z = np.einsum("amnb,cnd->acmbd", a, x)
        cores.append(z.reshape(a.shape[0] * x.shape[0], a.shape[1], a.shape[3] * x.shape[2]))
    return TTVector(tuple(cores))


def tt_matmat(a, b):
    """Return the TT-matrix of `a @ b`; ranks multiply."""
    if a.col_dims != b.row_dims:
        raise InvalidArgument(f"Column dims {a.col_dims} do not match row dims {b.row_dims}.")
    cores = []
    for x, y in zip(a.cores, b.cores):
        z = np.einsum("amnb,cnpd->acmpbd", x, y)
        cores.append(z.reshape(x.shape[0] * y.shape[0], x.shape[1], y.shape[2], x.shape[3] * y.shape[3]))
    return TTMatrix(tuple(cores))


def tt_outer(u, v):
    """Return the TT-matrix of `u vᵀ`."""
    if len(u.dims) != len(v.dims):
        raise InvalidArgument(f"Outer product needs equal numbers of cores, got {len(u.dims)} and {len(v.dims)}.")
    cores = []
    for x, y in zip(u.cores, v.cores):
        z = np.einsum("amb,cnd->acmnbd", x, y)
        cores.append(z.reshape(x.shape[0] * y.shape[0], x.shape[1], y.shape[1], x.shape[2] * y.shape[2]))
    return TTMatrix(tuple(cores))


def _inner(ca, cb):
    w = np.ones((1, 1))
    for x, y in zip(ca, cb):
        w = np.tensordot(np.tensordot(w, x, axes=(0, 0)), y, axes=([0, 1], [0, 1]))
    return float(w[0, 0])


def tt_inner(a, b):
    """Return the Euclidean inner product of two TT vectors with equal dims."""
    if not isinstance(a, TTVector) or not isinstance(b, TTVector):
        raise InvalidArgument("tt_inner takes two TT vectors.")
    _same_structure(a, b)
    return _inner(a.cores, b.cores)


def tt_quadratic(matrix, a, b=None):
    """Return `aᵀ matrix b` (`b` defaults to `a`) without forming `matrix @ b`."""
    b = a if b is None else b
    if matrix.row_dims != a.dims or matrix.col_dims != b.dims:
        raise InvalidArgument("Quadratic form operands have mismatched mode sizes.")
    w = np.ones((1, 1, 1))
    for x, m, y in zip(a.cores, matrix.cores, b.cores):
        t = np.tensordot(w, x, axes=(0, 0))
        t = np.tensordot(t, m, axes=([0, 2], [0, 1]))
        w = np.tensordot(t, y, axes=([0, 2], [0, 1]))
    return float(w.reshape(-1)[0])


def tt_frobenius_norm(tt):
    cores = _flat(tt)
    return math.sqrt(max(_inner(cores, cores), 0.0))


def tt_rank1_diag(value, dims):
    """Return `value * I` over `dims` as a rank-1 TT-matrix."""
    dims = _check_dims(dims)
    cores = [np.eye(n).reshape(1, n, n, 1) for n in dims]
    cores[0] = cores[0] * float(value)
    return TTMatrix(tuple(cores))


def tt_zeros(dims):
    dims = _check_dims(dims)
    return TTVector(tuple(np.zeros((1, n, 1)) for n in dims))


def tt_ones(dims):
    dims = _check_dims(dims)
    return TTVector(tuple(np.ones((1, n, 1)) for n in dims))


def tt_transpose(matrix):
    return TTMatrix(tuple(core.transpose(0, 2, 1, 3) for core in matrix.cores))


def tt_full(tt, cap=FULL_CAP):
    """
    Return `tt` as a dense array: 1-D for a vector, 2-D for a matrix.

    Raise `ResourceLimitError` if the result would hold more than `cap` elements.
    """
    if tt.size > cap:
        raise ResourceLimitError(f"Refusing to materialize {tt.size} elements (cap {cap}).")
    out = np.ones((1, 1))
    for core in _flat(tt):
        out = (out @ core.reshape(core.shape[0], -1)).reshape(-1, core.shape[-1])
    out = out.reshape(-1)
    if isinstance(tt, TTVector):
        return out
    d = len(tt.cores)
    interleaved = [n for pair in zip(tt.row_dims, tt.col_dims) for n in pair]
    order = list(range(0, 2 * d, 2)) + list(range(1, 2 * d, 2))
    return out.reshape(interleaved).transpose(order).reshape(tt.shape)


def random_tt(rng, dims, ranks):
    """Return a TT vector with standard normal cores; `ranks` lists the d - 1 interior ranks."""
    dims = _check_dims(dims)
    ranks = (1,) + tuple(int(r) for r in ranks) + (1,)
    if len(ranks) != len(dims) + 1:
        raise InvalidArgument("Expected one interior rank per pair of adjacent cores.")
    return TTVector(tuple(rng.standard_normal((ranks[k], n, ranks[k + 1])) for k, n in enumerate(dims)))
