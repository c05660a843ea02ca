"""The binary model file.

All integers and floats are little-endian; floats are IEEE-754 doubles, so a
saved model predicts bit for bit like the one it was saved from. Layout:

    header        magic "TNKF", format version (u16)
    kernel        kind, task, has_confidence (u8 each); sigma2, degree, offset
    scalars       gamma, sigma_r2; policy_yt (mode u8, epsilon, max_rank); iterations
    centering     y_mean; feature count (u16) and the feature means
    dims          count (u16), then one i64 per mode
    m, P          d + 1 ranks (i64), then the cores in order, row-major
    encoding      length (u32) of a JSON document, 0 when absent
    inputs        N, f (i64); storage (u8); then either the N x f inputs inline,
                  or a path relative to the model file (u16 length + UTF-8)
                  and the SHA-256 digest of the file at that path

`Header`, `TTBlock` and `InputReference` have `from_bytes`/`to_bytes`
methods; `to_bytes`/`from_bytes` at module level handle whole models.
"""

from typing import ClassVar, Optional

import dataclasses
import hashlib
import logging
import math
import os
import struct

import numpy as np

from .data import TASKS, Centering, Encoding
from .errors import ModelFileError, StaleTrainingData, UnsupportedVersion
from .kernels import KernelKind, KernelSpec
from .predict import TrainedModel
from .tt import Mode, TruncationPolicy, TTMatrix, TTVector

logger = logging.getLogger(__name__)

MAGIC = b"TNKF"
VERSION = 1

INLINE = 0
REFERENCE = 1

_KINDS = list(KernelKind)
_MODES = list(Mode)


class _Reader:
    def __init__(self, raw):
        self._raw = raw
        self._offset = 0

    def _take(self, size):
        if self._offset + size > len(self._raw):
            raise ModelFileError("Model file is truncated.")
        begin = self._offset
        self._offset += size
        return begin

    def unpack(self, fmt):
        begin = self._take(struct.calcsize(fmt))
        return struct.unpack_from(fmt, self._raw, begin)

    def raw(self, size):
        begin = self._take(size)
        return bytes(self._raw[begin : begin + size])

    def doubles(self, count):
        begin = self._take(8 * count)
        return np.frombuffer(self._raw, dtype="<f8", count=count, offset=begin).astype(np.float64)

    def finish(self):
        if self._offset != len(self._raw):
            raise ModelFileError(f"Model file has {len(self._raw) - self._offset} trailing bytes.")


def _doubles(array):
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


@dataclasses.dataclass(frozen=True)
class Header:
    magic: ClassVar[bytes] = MAGIC
    format: ClassVar[str] = "<4sH"
    version: int = VERSION

    @classmethod
    def read(cls, reader):
        magic, version = reader.unpack(cls.format)
        if magic != cls.magic:
            raise ModelFileError("Not a model file (bad magic).")
        if version != VERSION:
            raise UnsupportedVersion(f"Model file format version {version} is not supported (expected {VERSION}).")
        return cls(version)

    @classmethod
    def from_bytes(cls, raw):
        return cls.read(_Reader(raw))

    def to_bytes(self):
        return struct.pack(self.format, self.magic, self.version)


@dataclasses.dataclass(frozen=True, eq=False)
class TTBlock:
    """The ranks and cores of one tensor train over known mode sizes."""

    tt: object  # TTVector or TTMatrix.

    @classmethod
    def read(cls, reader, dims, matrix):
        ranks = reader.unpack(f"<{len(dims) + 1}q")
        if ranks[0] != 1 or ranks[-1] != 1 or min(ranks) < 1:
            raise ModelFileError(f"Corrupt tensor-train ranks {ranks}.")
        cores = []
        for k, n in enumerate(dims):
            shape = (ranks[k], n, n, ranks[k + 1]) if matrix else (ranks[k], n, ranks[k + 1])
            cores.append(reader.doubles(math.prod(shape)).reshape(shape))
        return cls(TTMatrix(tuple(cores)) if matrix else TTVector(tuple(cores)))

    def to_bytes(self):
        ranks = self.tt.ranks
        return struct.pack(f"<{len(ranks)}q", *ranks) + b"".join(_doubles(core) for core in self.tt.cores)


@dataclasses.dataclass(frozen=True)
class InputReference:
    path: str  # Relative to the directory of the model file.
    digest: bytes  # SHA-256 of the referenced file.

    @classmethod
    def read(cls, reader):
        (length,) = reader.unpack("<H")
        path = reader.raw(length).decode("utf-8")
        return cls(path, reader.raw(32))

    def to_bytes(self):
        path = self.path.encode("utf-8")
        return struct.pack("<H", len(path)) + path + self.digest


def to_bytes(model, reference=None):
    """Serialize `model`; with an `InputReference` the training inputs are stored by reference."""
    kernel = model.kernel
    policy = model.policy_yt
    parts = [
        Header().to_bytes(),
        struct.pack("<BBB", _KINDS.index(kernel.kind), TASKS.index(model.task), model.has_confidence),
        struct.pack("<dqd", kernel.sigma2, kernel.degree, kernel.offset),
        struct.pack("<dd", model.gamma, model.sigma_r2),
        struct.pack("<Bdq", _MODES.index(policy.mode), policy.epsilon, policy.max_rank),
        struct.pack("<q", model.iterations),
        struct.pack("<dH", model.centering.y_mean, len(model.centering.x_means)),
        _doubles(model.centering.x_means),
        struct.pack(f"<H{len(model.dims)}q", len(model.dims), *model.dims),
        TTBlock(model.m).to_bytes(),
        TTBlock(model.P).to_bytes(),
    ]
    encoding = b"" if model.encoding is None else model.encoding.to_json().encode("utf-8")
    parts.append(struct.pack("<L", len(encoding)) + encoding)
    parts.append(struct.pack("<qq", *model.X_train.shape))
    if reference is None:
        parts.append(struct.pack("<B", INLINE) + _doubles(model.X_train))
    else:
        parts.append(struct.pack("<B", REFERENCE) + reference.to_bytes())
    return b"".join(parts)


def _read_inputs(path):
    try:
        with open(path, "rb") as file:
            raw = file.read()
    except OSError as exc:
        raise StaleTrainingData(f"Cannot read referenced training inputs {path}: {exc.strerror}.") from exc
    return raw


def from_bytes(raw, base="."):
    """
    Return the `TrainedModel` serialized in `raw`. Referenced inputs are resolved against `base`.

    Raise `ModelFileError` if `raw` is truncated or corrupt, `UnsupportedVersion`
    for another format version and `StaleTrainingData` if referenced inputs
    changed since the model was saved.
    """
    reader = _Reader(raw)
    Header.read(reader)
    try:
        kind, task, has_confidence = reader.unpack("<BBB")
        sigma2, degree, offset = reader.unpack("<dqd")
        gamma, sigma_r2 = reader.unpack("<dd")
        mode, epsilon, max_rank = reader.unpack("<Bdq")
        (iterations,) = reader.unpack("<q")
        y_mean, f_means = reader.unpack("<dH")
        x_means = tuple(float(v) for v in reader.doubles(f_means))
        (d,) = reader.unpack("<H")
        dims = reader.unpack(f"<{d}q")
        if not dims or min(dims) < 1:
            raise ModelFileError(f"Corrupt mode sizes {dims}.")
        m = TTBlock.read(reader, dims, matrix=False).tt
        P = TTBlock.read(reader, dims, matrix=True).tt
        (length,) = reader.unpack("<L")
        encoding = Encoding.from_json(reader.raw(length).decode("utf-8")) if length else None
        N, f = reader.unpack("<qq")
        (storage,) = reader.unpack("<B")
        if storage == INLINE:
            X = reader.doubles(N * f).reshape(N, f)
        elif storage == REFERENCE:
            reference = InputReference.read(reader)
            path = os.path.join(base, reference.path)
            data = _read_inputs(path)
            if hashlib.sha256(data).digest() != reference.digest:
                raise StaleTrainingData(f"Training inputs {path} changed since the model was saved.")
            if len(data) != 8 * N * f:
                raise ModelFileError(f"Training inputs {path} hold {len(data)} bytes, expected {8 * N * f}.")
            X = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(N, f)
        else:
            raise ModelFileError(f"Unknown training-input storage {storage}.")
        reader.finish()
        return TrainedModel(
            kernel=KernelSpec(_KINDS[kind], sigma2=sigma2, degree=degree, offset=offset),
            X_train=X,
            dims=tuple(dims),
            m=m,
            P=P,
            sigma_r2=sigma_r2,
            gamma=gamma,
            centering=Centering(y_mean, x_means),
            policy_yt=TruncationPolicy(_MODES[mode], epsilon, max_rank),
            task=TASKS[task],
            has_confidence=bool(has_confidence),
            iterations=iterations,
            encoding=encoding,
        )
    except ModelFileError:
        raise
    except (IndexError, KeyError, TypeError, UnicodeDecodeError, ValueError) as exc:
        raise ModelFileError(f"Corrupt model file: {exc}") from exc


def save_model(model, path, reference=False):
    """
    Write `model` to `path`.

    With `reference` the training inputs go to a sidecar file `<path>.inputs`
    and the model file stores its name and SHA-256 digest.
    """
    ref: Optional[InputReference] = None
    try:
        if reference:
            data = _doubles(model.X_train)
            sidecar = os.fspath(path) + ".inputs"
            with open(sidecar, "wb") as f:
                f.write(data)
            ref = InputReference(os.path.basename(sidecar), hashlib.sha256(data).digest())
        with open(path, "wb") as f:
            f.write(to_bytes(model, ref))
    except OSError as exc:
        raise ModelFileError(f"Cannot write model file {path}: {exc.strerror}.") from exc
    logger.info("Saved model to %s (%s inputs)", path, "referenced" if reference else "inline")


def load_model(path):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise ModelFileError(f"Cannot read model file {path}: {exc.strerror}.") from exc
    model = from_bytes(raw, os.path.dirname(os.path.abspath(path)))
    logger.info("Loaded model from %s: N = %d, dims %s", path, model.N, model.dims)
    return model
