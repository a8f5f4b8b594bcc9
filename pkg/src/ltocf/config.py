"""Flat ``key = value`` run configuration with validation and manifests."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from pathlib import Path

from .graph import OperatorKind
from .model import TimeGrid
from .solvers import SolverConfig, SolverKind
from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config_text", "read_config", "write_config"]


class ConfigError(ValueError):
    def __init__(self, problems: dict[str, str]):
        self.problems = problems
        detail = "; ".join(f"{key}: {msg}" for key, msg in problems.items())
        super().__init__(f"invalid configuration ({detail})")


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise ValueError(f"expected true/false, got {text!r}") from None


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "none", "default"):
        return None
    return float(text)


@dataclass
class RunConfig:
    train: str = ""
    test: str = ""
    cache: str = ""
    out: str = "run"
    solver: str = "rk4"
    step: float | None = None
    rtol: float = 1e-7
    atol: float = 1e-9
    residual: bool = True
    corrector_iters: int = 10
    corrector_tol: float = 1e-9
    operator: str = "adj"
    dim: int = 64
    k_time: float = 4.0
    t_count: int = 3
    fixed_time: bool = False
    lr: float = 1e-4
    lr_time: float = 1e-6
    lam: float = 1e-4
    batch: int = 2048
    epochs: int = 1000
    patience: int = 10
    eval_every: int = 10
    time_margin: float = 1e-3
    seed: int = 2021
    topk: int = 20

    _CASTS = {
        "step": _opt_float,
        "residual": _parse_bool,
        "fixed_time": _parse_bool,
    }

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build from string or typed values, reporting every bad key at once."""
        known = {f.name: f for f in fields(cls)}
        problems: dict[str, str] = {}
        kwargs = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name == "lambda":
                name = "lam"
            if name not in known:
                problems[key] = "unknown key"
                continue
            default = known[name].default
            cast = cls._CASTS.get(name) or type(default)
            try:
                kwargs[name] = cast(raw)
            except (TypeError, ValueError) as exc:
                problems[key] = str(exc)
        cfg = cls(**kwargs)
        try:
            cfg.validate()
        except ConfigError as exc:
            problems.update(exc.problems)
        if problems:
            raise ConfigError(problems)
        return cfg

    def validate(self) -> None:
        problems: dict[str, str] = {}
        try:
            SolverKind(self.solver)
        except ValueError:
            problems["solver"] = f"unknown solver {self.solver!r} (euler, rk4, adams-moulton, dopri)"
        try:
            OperatorKind.parse(self.operator)
        except ValueError:
            problems["operator"] = f"unknown operator {self.operator!r} (adj, laplacian)"
        positive = ["rtol", "atol", "dim", "k_time", "batch", "epochs", "patience", "eval_every",
                    "time_margin", "topk", "corrector_iters"]
        for key in positive:
            if not getattr(self, key) > 0:
                problems[key] = "must be positive"
        if self.step is not None and not self.step > 0:
            problems["step"] = "must be positive"
        for key in ("lr", "lr_time", "lam", "corrector_tol"):
            if getattr(self, key) < 0:
                problems[key] = "must be non-negative"
        if self.t_count < 0:
            problems["t_count"] = "must be non-negative"
        elif self.k_time > 0 and self.t_count and self.time_margin >= self.k_time / (self.t_count + 1):
            problems["time_margin"] = "must be smaller than the initial segment length"
        if problems:
            raise ConfigError(problems)
        if self.k_time not in (2, 3, 4):
            warnings.warn(f"terminal time K={self.k_time} outside the usual {{2, 3, 4}}", stacklevel=2)
        if self.t_count not in (1, 2, 3):
            warnings.warn(f"interior time count T={self.t_count} outside the usual {{1, 2, 3}}", stacklevel=2)

    # -- component configs --

    def solver_config(self) -> SolverConfig:
        return SolverConfig(SolverKind(self.solver), self.step, self.rtol, self.atol, self.residual,
                            self.corrector_iters, self.corrector_tol)

    def train_config(self) -> TrainConfig:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return TrainConfig(self.lam, self.lr, self.lr_time, self.batch, self.epochs, self.patience,
                               self.seed, self.time_margin, self.eval_every, self.topk)

    def time_grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.k_time, self.t_count, learnable=not self.fixed_time)

    def operator_kind(self) -> OperatorKind:
        return OperatorKind.parse(self.operator)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif value is None:
                text = "none"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError({f"line {lineno}": f"expected key = value, got {line!r}"})
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def read_config(path) -> RunConfig:
    return RunConfig.from_mapping(parse_config_text(Path(path).read_text(encoding="utf-8")))


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_text(), encoding="utf-8")
