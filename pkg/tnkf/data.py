"""Datasets: synthetic generators, CSV ingestion, centering and power-size subsets."""

from typing import Dict, List, Optional, Tuple

import csv
import dataclasses
import io
import json
import logging
import math

import numpy as np

from .errors import DataError, InvalidArgument

logger = logging.getLogger(__name__)

REGRESSION = "regression"
CLASSIFICATION = "classification"
TASKS = (REGRESSION, CLASSIFICATION)

# Bases tried by `fit_power_size`, in order of preference on ties.
POWER_BASES = (2, 3, 5, 7)

# Raw label values read as numbers.
NUMERIC_LABELS = ("-1", "1")
# Placeholder for "every value except the positive one".
ANY_OTHER = "*"


@dataclasses.dataclass(frozen=True)
class Centering:
    y_mean: float = 0.0
    x_means: Tuple[float, ...] = ()


@dataclasses.dataclass(frozen=True)
class Encoding:
    """How raw CSV columns map to encoded features and labels."""

    # One entry per kept raw column, in file order: (name, levels); numeric columns have levels None.
    columns: Tuple[Tuple[str, Optional[Tuple[str, ...]]], ...]
    label: str
    task: str = REGRESSION
    # Classification only: (negative, positive) raw label values.
    label_levels: Optional[Tuple[str, str]] = None
    header: bool = True
    ignore: Tuple[str, ...] = ()

    @property
    def n_features(self):
        return sum(1 if levels is None else len(levels) for _, levels in self.columns)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        return cls(
            columns=tuple((name, None if levels is None else tuple(levels)) for name, levels in raw["columns"]),
            label=raw["label"],
            task=raw["task"],
            label_levels=None if raw["label_levels"] is None else tuple(raw["label_levels"]),
            header=raw["header"],
            ignore=tuple(raw["ignore"]),
        )


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    task: str = REGRESSION
    centering: Optional[Centering] = None
    provenance: str = ""
    # Ordered datasets sample along a curve; subsets keep their stride instead of shuffling.
    ordered: bool = False
    encoding: Optional[Encoding] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise InvalidArgument(f"Got {X.shape[0]} input rows but {y.size} targets.")
        if self.task not in TASKS:
            raise InvalidArgument(f"Unknown task {self.task!r}.")
        if self.task == CLASSIFICATION and not np.all(np.abs(y) == 1):
            raise InvalidArgument("Classification labels must be -1 or +1.")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def f(self):
        return self.X.shape[1]

    def subset(self, indices, provenance=None):
        indices = np.asarray(indices, dtype=np.intp)
        return dataclasses.replace(
            self, X=self.X[indices], y=self.y[indices], provenance=provenance or self.provenance
        )


def gen_noisy_sinc(N, noise_sigma=0.1, seed=0, low=-5.0, high=5.0):
    """Return `N` evenly spaced points on [low, high] with targets sin(πx)/(πx) + N(0, noise_sigma²)."""
    if N < 1:
        raise InvalidArgument(f"Need at least one point, got {N}.")
    if noise_sigma < 0:
        raise InvalidArgument(f"Noise level must be nonnegative, got {noise_sigma!r}.")
    if not low < high:
        raise InvalidArgument(f"Need low < high, got [{low!r}, {high!r}].")
    x = np.linspace(low, high, N)
    y = np.sinc(x)
    if noise_sigma > 0:
        y = y + np.random.default_rng(seed).normal(0.0, noise_sigma, N)
    provenance = f"sinc(N={N}, noise={noise_sigma:g}, seed={seed}, x in [{low:g}, {high:g}])"
    return Dataset(x.reshape(-1, 1), y, REGRESSION, provenance=provenance, ordered=True)


def _spiral_arm(t, scale):
    return scale * np.column_stack([t * np.cos(t), t * np.sin(t)])


def gen_two_spiral(N, seed=None, scale=1.0, jitter=0.0):
    """
    Return two interleaved spirals of `N // 2` points each.

    Class +1 is (t cos t, t sin t) for t evenly spaced on [π/2, 7π]; class -1 is
    the same arm rotated by π. The class +1 block comes first. Raise
    `InvalidArgument` if `N` is odd.
    """
    if N < 2 or N % 2:
        raise InvalidArgument(f"Two-spiral data needs an even number of points, got {N}.")
    t = np.linspace(math.pi / 2, 7 * math.pi, N // 2)
    arm = _spiral_arm(t, scale)
    X = np.vstack([arm, -arm])
    if jitter > 0:
        X = X + np.random.default_rng(seed).normal(0.0, jitter, X.shape)
    y = np.concatenate([np.ones(N // 2), -np.ones(N // 2)])
    return Dataset(X, y, CLASSIFICATION, provenance=f"two-spiral(N={N}, scale={scale:g})", ordered=True)


def split_holdout(dataset, stride=4):
    """Return `(train, test)` where `test` holds every `stride`-th point, starting with the first."""
    if stride < 2:
        raise InvalidArgument(f"Holdout stride must be at least 2, got {stride}.")
    held = np.arange(dataset.N) % stride == 0
    return (dataset.subset(np.flatnonzero(~held), dataset.provenance + " train"),
            dataset.subset(np.flatnonzero(held), dataset.provenance + " test"))


def spiral_train_test(n_train, stride=4, scale=1.0):
    """
    Return `(train, test)` two-spiral sets holding out every `stride`-th point of each arm.

    Each arm gets the fewest points that leave exactly `n_train / 2` for training.
    """
    if n_train < 2 or n_train % 2:
        raise InvalidArgument(f"Two-spiral training size must be even, got {n_train}.")
    half = n_train // 2
    M = half
    while M - math.ceil(M / stride) < half:
        M += 1
    t = np.linspace(math.pi / 2, 7 * math.pi, M)
    held = np.arange(M) % stride == 0
    arm = _spiral_arm(t, scale)

    def _pair(mask):
        X = np.vstack([arm[mask], -arm[mask]])
        n = int(mask.sum())
        return X, np.concatenate([np.ones(n), -np.ones(n)])

    provenance = f"two-spiral(M={M}, stride={stride}, scale={scale:g})"
    train = Dataset(*_pair(~held), CLASSIFICATION, provenance=provenance + " train", ordered=True)
    test = Dataset(*_pair(held), CLASSIFICATION, provenance=provenance + " test", ordered=True)
    return train, test


def center(dataset):
    """Return `dataset` with zero-mean features (and targets, for regression), recording the removed means."""
    x_means = dataset.X.mean(axis=0)
    y_mean = float(dataset.y.mean()) if dataset.task == REGRESSION else 0.0
    return dataclasses.replace(
        dataset,
        X=dataset.X - x_means,
        y=dataset.y - y_mean,
        centering=Centering(y_mean, tuple(float(v) for v in x_means)),
    )


def uncenter(dataset):
    if dataset.centering is None:
        return dataset
    x_means = np.asarray(dataset.centering.x_means) if dataset.centering.x_means else 0.0
    return dataclasses.replace(
        dataset, X=dataset.X + x_means, y=dataset.y + dataset.centering.y_mean, centering=None
    )


def _largest_power(N, base):
    d, size = 0, 1
    while size * base <= N:
        size *= base
        d += 1
    return size, d


def is_power_size(N):
    """Return whether `N` is n^d for some base in `POWER_BASES` and d ≥ 1."""
    return any(_largest_power(N, base)[0] == N and N > 1 for base in POWER_BASES)


def fit_power_size(dataset, base=None, seed=0):
    """
    Return `(subset, (n, d))` with the largest n^d ≤ N points over `POWER_BASES`.

    `base` restricts the choice to one base. Ordered datasets keep an evenly
    strided subset; others take a seeded random subset in original order.
    """
    N = dataset.N
    if N < 2:
        raise InvalidArgument(f"Need at least two points, got {N}.")
    bases = POWER_BASES if base is None else (int(base),)
    if any(n < 2 for n in bases):
        raise InvalidArgument(f"Power-size base must be at least 2, got {base!r}.")
    best = None
    for b in bases:
        size, d = _largest_power(N, b)
        if best is None or size > best[0]:
            best = (size, b, d)
    size, n, d = best
    if d == 0:
        raise InvalidArgument(f"{N} points are fewer than the base {n}.")
    if size == N:
        return dataset, (n, d)
    if dataset.ordered:
        indices = np.arange(size) * N // size
    else:
        indices = np.sort(np.random.default_rng(seed).choice(N, size, replace=False))
    logger.info("Using %d = %d^%d of %d points", size, n, d, N)
    return dataset.subset(indices, f"{dataset.provenance} [{n}^{d}]"), (n, d)


@dataclasses.dataclass(frozen=True)
class CsvSchema:
    label: Optional[str] = None
    task: str = REGRESSION
    header: bool = True
    categorical: Tuple[str, ...] = ()
    ignore: Tuple[str, ...] = ()
    positive_label: Optional[str] = None


def _resolve(names, key, line):
    if key in names:
        return names.index(key)
    try:
        index = int(key)
    except ValueError:
        raise DataError(f"No column named {key!r}.", line) from None
    if not -len(names) <= index < len(names):
        raise DataError(f"Column index {index} is out of range for {len(names)} columns.", line)
    return index % len(names)


def _read_rows(path):
    """Return `(line, fields)` for every nonblank CSV record of `path`."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise DataError(f"Cannot read {path}: {exc.strerror}.") from exc
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = data[: exc.start].count(b"\n") + 1
        raise DataError(f"{path}, line {line}: not valid UTF-8 ({exc.reason}).", line) from exc
    reader = csv.reader(io.StringIO(text, newline=""))
    rows = []
    try:
        for row in reader:
            if row and any(v.strip() for v in row):
                rows.append((reader.line_num, row))
    except csv.Error as exc:
        raise DataError(f"{path}, line {reader.line_num}: {exc}.", reader.line_num) from exc
    return rows


def _is_unit(raw):
    try:
        return abs(float(raw)) == 1
    except ValueError:
        return False


def _fit_encoding(names, rows, schema, label_index, kept):
    columns = []
    categorical = {_resolve(names, key, None) for key in schema.categorical}
    for j in kept:
        if j in categorical:
            columns.append((names[j], tuple(sorted({row[j].strip() for _, row in rows}))))
        else:
            columns.append((names[j], None))
    label_levels = None
    if schema.task == CLASSIFICATION:
        values = sorted({row[label_index].strip() for _, row in rows})
        if schema.positive_label is not None:
            label_levels = (ANY_OTHER, schema.positive_label)
        elif all(_is_unit(v) for v in values):
            label_levels = NUMERIC_LABELS
        elif len(values) == 2:
            label_levels = (values[0], values[1])
        else:
            raise DataError(f"Cannot map {len(values)} label values to -1/+1; set positive_label.")
    return Encoding(
        columns=tuple(columns),
        label=names[label_index],
        task=schema.task,
        label_levels=label_levels,
        header=schema.header,
        ignore=tuple(str(key) for key in schema.ignore),
    )


def _label(raw, encoding, line):
    if encoding.task == REGRESSION:
        try:
            return float(raw)
        except ValueError:
            raise DataError(f"Label {raw!r} on line {line} is not a number.", line) from None
    negative, positive = encoding.label_levels
    if encoding.label_levels == NUMERIC_LABELS:
        try:
            value = float(raw)
        except ValueError:
            value = None
        if value in (-1.0, 1.0):
            return value
        raise DataError(f"Label {raw!r} on line {line} is not -1 or +1; is this a regression file?", line)
    if raw == positive:
        return 1.0
    if raw == negative or negative == ANY_OTHER:
        return -1.0
    raise DataError(f"Unknown label {raw!r} on line {line}.", line)


def load_csv(path, schema=CsvSchema(), encoding=None):
    """
    Return the dataset stored at `path`.

    Categorical columns are one-hot encoded. With `encoding` given (from a
    trained model) the file is encoded the same way; unseen categories encode
    as all zeros with a warning. Raise `DataError` naming the line of the first
    malformed row.
    """
    rows = _read_rows(path)
    header = schema.header if encoding is None else encoding.header
    if header:
        if not rows:
            raise DataError(f"{path} is empty.")
        _, names = rows[0]
        names = [name.strip() for name in names]
        rows = rows[1:]
    else:
        names = [str(j) for j in range(len(rows[0][1]))] if rows else []
    if not rows:
        raise DataError(f"{path} has no data rows.")
    width = len(names)
    for n, row in rows:
        if len(row) != width:
            raise DataError(f"Line {n} has {len(row)} fields, expected {width}.", n)

    if encoding is None:
        label_key = schema.label if schema.label is not None else names[-1]
        label_index = _resolve(names, label_key, None)
        ignored = {_resolve(names, key, None) for key in schema.ignore}
        kept = [j for j in range(width) if j != label_index and j not in ignored]
        encoding = _fit_encoding(names, rows, schema, label_index, kept)
    else:
        label_index = _resolve(names, encoding.label, None)
        kept = [_resolve(names, name, None) for name, _ in encoding.columns]

    X = np.empty((len(rows), encoding.n_features))
    y = np.empty(len(rows))
    unseen: Dict[Tuple[str, str], int] = {}
    for i, (n, row) in enumerate(rows):
        features: List[float] = []
        for j, (name, levels) in zip(kept, encoding.columns):
            raw = row[j].strip()
            if levels is None:
                try:
                    features.append(float(raw))
                except ValueError:
                    raise DataError(f"Field {name!r} on line {n} is not a number: {raw!r}.", n) from None
            else:
                onehot = [0.0] * len(levels)
                if raw in levels:
                    onehot[levels.index(raw)] = 1.0
                else:
                    unseen[name, raw] = unseen.get((name, raw), 0) + 1
                features.extend(onehot)
        X[i] = features
        y[i] = _label(row[label_index].strip(), encoding, n)
    for (name, raw), count in unseen.items():
        logger.warning("Unknown category %r in column %r on %d rows; encoded as all zeros", raw, name, count)
    logger.info("Loaded %d rows from %s: %d raw columns, %d encoded features", len(rows), path, width, X.shape[1])
    return Dataset(X, y, encoding.task, provenance=str(path), encoding=encoding)


def save_csv(dataset, path):
    """Write `dataset` as `x0, ..., x{f-1}, y` with round-trip float formatting."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow([f"x{j}" for j in range(dataset.f)] + ["y"])
            for x, y in zip(dataset.X, dataset.y):
                writer.writerow([format_float(v) for v in x] + [format_float(y)])
    except OSError as exc:
        raise DataError(f"Cannot write {path}: {exc.strerror}.") from exc


def format_float(value):
    value = float(value)
    if math.isnan(value):
        return "NA"
    return "%.17g" % value
