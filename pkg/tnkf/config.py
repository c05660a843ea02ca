"""Run configuration.

A config file is flat `key = value` text; `#` starts a comment and blank
lines are ignored:

    kernel = rbf
    sigma2 = 0.005
    gamma = 0.005
    sigma_e2 = 0.01
    eps_c = 0.001
    eps_P = 0.0005
    eps_k = 0.2

Truncation is set per variable (m, c, P, k and the test rows yt) with `eps_X`
for a relative error or `r_X` for a maximum rank; `r_X` wins when both are
given and `eps_X = 0` means exact.
"""

from typing import Dict, Optional, Tuple

import dataclasses

from .data import CLASSIFICATION, TASKS, CsvSchema
from .errors import ConfigError, InvalidArgument
from .kalman import ROW_ORDERS, EarlyStop, TNKFConfig
from .kernels import KernelKind, KernelSpec
from .tt import TruncationPolicy

VARIABLES = ("m", "c", "P", "k", "yt")


def _boolean(text):
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _names(text):
    return tuple(name.strip() for name in text.split(",") if name.strip())


# Key -> (attribute, converter).
_KEYS = {
    "kernel": ("kernel", str),
    "sigma2": ("sigma2", float),
    "degree": ("degree", int),
    "offset": ("offset", float),
    "gamma": ("gamma", float),
    "sigma_e2": ("sigma_e2", float),
    "sigma_r2": ("sigma_r2", float),
    "lambda": ("lam", float),
    **{f"eps_{v}": (f"eps_{v}", float) for v in VARIABLES},
    **{f"r_{v}": (f"r_{v}", int) for v in VARIABLES},
    "p_norm_threshold": ("p_norm_threshold", float),
    "p_norm_delta_threshold": ("p_norm_delta_threshold", float),
    "patience": ("patience", int),
    "max_iterations": ("max_iterations", int),
    "row_order": ("row_order", str),
    "seed": ("seed", int),
    "sym_every": ("sym_every", int),
    "task": ("task", str),
    "label": ("label", str),
    "positive_label": ("positive_label", str),
    "header": ("header", _boolean),
    "categorical": ("categorical", _names),
    "ignore": ("ignore", _names),
    "workers": ("workers", int),
    "rmse_every": ("rmse_every", int),
}

KEYS = tuple(_KEYS)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    kernel: str = "rbf"
    sigma2: float = 1.0
    degree: int = 2
    offset: float = 1.0
    gamma: float = 1.0
    sigma_e2: Optional[float] = None
    sigma_r2: float = 1e-2
    lam: float = 1.0
    eps_m: float = 0.0
    eps_c: float = 0.0
    eps_P: float = 0.0
    eps_k: float = 0.0
    eps_yt: float = 0.0
    r_m: Optional[int] = None
    r_c: Optional[int] = None
    r_P: Optional[int] = None
    r_k: Optional[int] = None
    r_yt: Optional[int] = None
    p_norm_threshold: Optional[float] = None
    p_norm_delta_threshold: float = float("inf")
    patience: int = 5
    max_iterations: Optional[int] = None
    row_order: str = "natural"
    seed: int = 0
    sym_every: int = 0
    task: str = "regression"
    label: Optional[str] = None
    positive_label: Optional[str] = None
    header: bool = True
    categorical: Tuple[str, ...] = ()
    ignore: Tuple[str, ...] = ()
    workers: int = 1
    rmse_every: int = 0

    def validate(self):
        """Return `self`. Raise `ConfigError` naming the first invalid key."""
        checks = [
            ("kernel", self.kernel in {kind.value for kind in KernelKind}),
            ("sigma2", self.sigma2 > 0),
            ("degree", self.degree >= 1),
            ("gamma", self.gamma > 0),
            ("sigma_e2", self.sigma_e2 is None or self.sigma_e2 > 0),
            ("sigma_r2", self.sigma_r2 > 0),
            ("lambda", 0 < self.lam <= 1),
            *((f"eps_{v}", getattr(self, f"eps_{v}") >= 0) for v in VARIABLES),
            *((f"r_{v}", getattr(self, f"r_{v}") is None or getattr(self, f"r_{v}") >= 1) for v in VARIABLES),
            ("p_norm_threshold", self.p_norm_threshold is None or self.p_norm_threshold >= 0),
            ("p_norm_delta_threshold", self.p_norm_delta_threshold >= 0),
            ("patience", self.patience >= 1),
            ("max_iterations", self.max_iterations is None or self.max_iterations >= 1),
            ("row_order", self.row_order in ROW_ORDERS),
            ("sym_every", self.sym_every >= 0),
            ("task", self.task in TASKS),
            ("workers", self.workers >= 1),
            ("rmse_every", self.rmse_every >= 0),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"Invalid value for {key!r}.")
        return self

    def policy(self, variable):
        rank = getattr(self, f"r_{variable}")
        if rank is not None:
            return TruncationPolicy.rank(rank)
        return TruncationPolicy.relative(getattr(self, f"eps_{variable}"))

    def kernel_spec(self):
        kind = KernelKind(self.kernel)
        if kind is KernelKind.RBF:
            return KernelSpec.rbf(self.sigma2)
        if kind is KernelKind.POLYNOMIAL:
            return KernelSpec.polynomial(self.degree, self.offset)
        return KernelSpec.linear()

    def early_stop(self):
        if self.p_norm_threshold is None:
            return None
        return EarlyStop(self.p_norm_threshold, self.p_norm_delta_threshold, self.patience)

    def tnkf_config(self):
        try:
            return TNKFConfig(
                gamma=self.gamma,
                sigma_r2=self.sigma_r2,
                sigma_e2=self.sigma_e2,
                lam=self.lam,
                policy_m=self.policy("m"),
                policy_c=self.policy("c"),
                policy_P=self.policy("P"),
                policy_k=self.policy("k"),
                policy_yt=self.policy("yt"),
                early_stop=self.early_stop(),
                max_iterations=self.max_iterations,
                row_order=self.row_order,
                seed=self.seed,
                sym_every=self.sym_every,
                rmse_every=self.rmse_every,
            )
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from exc

    def schema(self):
        return CsvSchema(
            label=self.label,
            task=self.task,
            header=self.header,
            categorical=self.categorical,
            ignore=self.ignore,
            positive_label=self.positive_label if self.task == CLASSIFICATION else None,
        )


def parse(text):
    """
    Return `{key: (raw value, line number)}` for a config file.

    Raise `ConfigError` on a line without `=`, an unknown key or a repeated key.
    """
    entries: Dict[str, Tuple[str, int]] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"Expected `key = value` on line {n}.", n)
        if key not in _KEYS:
            raise ConfigError(f"Unknown key {key!r} on line {n}.", n)
        if key in entries:
            raise ConfigError(f"Key {key!r} on line {n} was already set on line {entries[key][1]}.", n)
        entries[key] = value, n
    return entries


def load(path):
    try:
        with open(path, encoding="utf-8") as f:
            return parse(f.read())
    except OSError as exc:
        raise ConfigError(f"Cannot read config file {path}: {exc.strerror}.") from exc


def build(entries=None, overrides=None):
    """
    Return a validated `RunConfig` from parsed file `entries` with `overrides` on top.

    `overrides` maps keys to raw strings (from command-line flags); `None` values are skipped.
    """
    values = {}
    sources = {key: (value, line) for key, (value, line) in (entries or {}).items()}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _KEYS:
            raise ConfigError(f"Unknown key {key!r}.")
        sources[key] = (value, None)
    for key, (raw, line) in sources.items():
        attribute, convert = _KEYS[key]
        try:
            values[attribute] = convert(raw)
        except ValueError:
            where = f" on line {line}" if line is not None else ""
            raise ConfigError(f"Cannot parse {key} = {raw!r}{where}.", line) from None
    return RunConfig(**values).validate()
