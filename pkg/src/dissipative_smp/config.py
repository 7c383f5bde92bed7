"""Experiment configuration files.

Configs are TOML documents with the sections below; every key is optional
unless stated. Unknown sections or keys are rejected.

    [model]            name (required), params (table of model parameters)
    [grid]             h (required), r (number or "auto"), T, tail_tolerance,
                       noise_substeps
    [run]              paths, seed, workers
    [control]          kind = "constant" | "linear" | "riccati", value, gain, offset
    [spike]            t0, epsilon, v, eps (ladder), k
    [adjoint]          basis, degree, truncation, picard_sweeps
    [second_adjoint]   mode, inner_paths, outer_paths, times
    [smp]              times, controls (list of points) or control_low,
                       control_high, control_points; tolerance
    [probe]            p_values, samples, grid_points
    [oracle]           variant_sigma_u, cost_h, cost_halvings, slope_time
    [output]           dir, export_paths (paths written to path-level CSVs)

When T is omitted the grid is the shortest with e^{-rT} <= tail_tolerance.
"auto" discount resolves through recommend_discount before anything is
simulated. ``riccati`` controls use u = -P* x for lq_scalar.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Optional

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

import numpy as np

from .controls import ConstantControl, ControlLaw, LinearFeedback
from .errors import ConfigParseError, InvalidParams, UnknownModel
from .models import ControlModel, ControlSet, builtin_model, recommend_discount, riccati_gain
from .regression import FAMILIES, RegressionBasis
from .sde import DEFAULT_TAIL_TOLERANCE, TimeGrid
from .variation import SpikeSpec

SUBCOMMANDS = ("probe", "simulate", "orders", "adjoint", "second-adjoint", "smp-check", "oracle-lq")


@dataclass
class ModelSection:
    name: str = ""
    params: dict = field(default_factory=dict)


@dataclass
class GridSection:
    h: float = 0.0
    r: object = "auto"
    T: Optional[float] = None
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE
    noise_substeps: int = 1


@dataclass
class RunSection:
    paths: int = 10000
    seed: int = 0
    workers: int = 1


@dataclass
class ControlSection:
    kind: str = "constant"
    value: list = field(default_factory=lambda: [0.0])
    gain: Optional[list] = None
    offset: Optional[list] = None


@dataclass
class SpikeSection:
    t0: float = 1.0
    epsilon: float = 0.1
    v: list = field(default_factory=lambda: [1.0])
    eps: list = field(default_factory=lambda: [0.4, 0.2, 0.1, 0.05])
    k: int = 1


@dataclass
class AdjointSection:
    basis: str = "polynomial_total_degree"
    degree: int = 3
    truncation: Optional[float] = None
    picard_sweeps: int = 1


@dataclass
class SecondAdjointSection:
    mode: str = "regression"
    inner_paths: int = 100
    outer_paths: int = 50
    times: list = field(default_factory=lambda: [0.5, 1.0, 2.0])


@dataclass
class SMPSection:
    times: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    controls: Optional[list] = None
    control_low: Optional[float] = None
    control_high: Optional[float] = None
    control_points: Optional[int] = None
    tolerance: Optional[float] = None


@dataclass
class ProbeSection:
    p_values: list = field(default_factory=lambda: [0.5, 1.0, 1.5])
    samples: int = 20000
    grid_points: int = 6001


@dataclass
class OracleSection:
    variant_sigma_u: float = 0.5
    cost_h: float = 0.2
    cost_halvings: int = 3
    slope_time: float = 1.0


@dataclass
class OutputSection:
    dir: str = "runs/out"
    export_paths: int = 10


SECTIONS = {
    "model": ModelSection,
    "grid": GridSection,
    "run": RunSection,
    "control": ControlSection,
    "spike": SpikeSection,
    "adjoint": AdjointSection,
    "second_adjoint": SecondAdjointSection,
    "smp": SMPSection,
    "probe": ProbeSection,
    "oracle": OracleSection,
    "output": OutputSection,
}

_NUMBER = (int, float)
_TYPES = {
    ("grid", "h"): "positive",
    ("grid", "T"): "positive",
    ("grid", "tail_tolerance"): "positive",
    ("grid", "noise_substeps"): "count",
    ("run", "paths"): "count",
    ("run", "seed"): "int",
    ("run", "workers"): "count",
    ("control", "kind"): ("constant", "linear", "riccati"),
    ("control", "value"): "vector",
    ("control", "gain"): "matrix",
    ("control", "offset"): "vector",
    ("spike", "t0"): "nonneg",
    ("spike", "epsilon"): "positive",
    ("spike", "v"): "vector",
    ("spike", "eps"): "vector",
    ("spike", "k"): "count",
    ("adjoint", "basis"): FAMILIES,
    ("adjoint", "degree"): "count",
    ("adjoint", "truncation"): "positive",
    ("adjoint", "picard_sweeps"): "int",
    ("second_adjoint", "mode"): ("regression", "nested"),
    ("second_adjoint", "inner_paths"): "int",
    ("second_adjoint", "outer_paths"): "count",
    ("second_adjoint", "times"): "vector",
    ("smp", "times"): "vector",
    ("smp", "controls"): "points",
    ("smp", "control_low"): "number",
    ("smp", "control_high"): "number",
    ("smp", "control_points"): "count",
    ("smp", "tolerance"): "nonneg",
    ("probe", "p_values"): "vector",
    ("probe", "samples"): "count",
    ("probe", "grid_points"): "count",
    ("oracle", "variant_sigma_u"): "number",
    ("oracle", "cost_h"): "positive",
    ("oracle", "cost_halvings"): "count",
    ("oracle", "slope_time"): "nonneg",
    ("output", "dir"): "string",
    ("output", "export_paths"): "int",
    ("model", "name"): "string",
    ("model", "params"): "table",
}


@dataclass
class ExperimentConfig:
    """Parsed experiment configuration; ``text`` is the source document."""

    model: ModelSection
    grid: GridSection
    run: RunSection
    control: ControlSection
    spike: SpikeSection
    adjoint: AdjointSection
    second_adjoint: SecondAdjointSection
    smp: SMPSection
    probe: ProbeSection
    oracle: OracleSection
    output: OutputSection
    text: str = ""
    resolved_r: Optional[float] = None

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d["grid"]["r_resolved"] = self.resolved_r
        return d

    # builders -------------------------------------------------------------

    def build_model(self) -> ControlModel:
        try:
            return builtin_model(self.model.name, self.model.params)
        except UnknownModel as exc:
            raise ConfigParseError(str(exc), field="model.name", line=_line_of(self.text, "model", "name"))
        except InvalidParams as exc:
            raise ConfigParseError(str(exc), field="model.params", line=_line_of(self.text, "model.params", None))

    def resolve_discount(self, model: ControlModel) -> float:
        """Configured r, or the recommended discount when r = "auto"."""
        if self.resolved_r is None:
            if self.grid.r == "auto":
                self.resolved_r = float(recommend_discount(model, seed=self.run.seed))
            else:
                self.resolved_r = float(self.grid.r)
        return self.resolved_r

    def build_grid(self, model: ControlModel) -> TimeGrid:
        r = self.resolve_discount(model)
        g = self.grid
        try:
            if g.T is None:
                return TimeGrid.for_tail(r, g.h, g.tail_tolerance, noise_substeps=g.noise_substeps)
            return TimeGrid(g.T, g.h, r, g.tail_tolerance, g.noise_substeps)
        except InvalidParams as exc:
            raise ConfigParseError(str(exc), field="grid", line=_line_of(self.text, "grid", None))

    def build_control(self, model: ControlModel) -> ControlLaw:
        c = self.control
        if c.kind == "constant":
            return ConstantControl(c.value)
        if c.kind == "linear":
            if c.gain is None:
                raise ConfigParseError("linear control needs a gain", field="control.gain",
                                       line=_line_of(self.text, "control", "kind"))
            return LinearFeedback(c.gain, c.offset)
        if model.name != "lq_scalar":
            raise ConfigParseError("riccati control is only defined for lq_scalar", field="control.kind",
                                   line=_line_of(self.text, "control", "kind"))
        a = float(model.params.get("a", -1.0))
        return LinearFeedback([[-riccati_gain(a, self.resolve_discount(model))]])

    def build_spike(self) -> SpikeSpec:
        s = self.spike
        return SpikeSpec(s.t0, s.epsilon, s.v)

    def build_basis(self) -> RegressionBasis:
        return RegressionBasis(self.adjoint.basis, self.adjoint.degree)

    def smp_points(self, model: ControlModel) -> np.ndarray:
        s = self.smp
        if s.controls is not None:
            return np.asarray(s.controls, dtype=float).reshape(len(s.controls), -1)
        if s.control_low is not None or s.control_high is not None or s.control_points is not None:
            if None in (s.control_low, s.control_high, s.control_points):
                raise ConfigParseError("control_low, control_high and control_points go together", field="smp",
                                       line=_line_of(self.text, "smp", None))
            return ControlSet.interval(s.control_low, s.control_high, s.control_points).points
        return model.control_set.points


def _line_of(text: str, section: str, key: Optional[str]) -> Optional[int]:
    """1-based line of ``key`` inside ``[section]`` (or of the header)."""
    if not text:
        return None
    current = None
    header_line = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if current == section:
                header_line = i
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return i
        if key is not None and current is not None and f"{current}.{line.split('=')[0].strip()}" == f"{section}.{key}":
            return i
    return header_line


def _check(value, kind, section, key, text):
    where = f"{section}.{key}"

    def fail(msg):
        raise ConfigParseError(msg, field=where, line=_line_of(text, section, key))

    if isinstance(kind, tuple):
        if value not in kind:
            fail(f"must be one of {list(kind)}, got {value!r}")
        return value
    if kind == "string":
        if not isinstance(value, str) or not value:
            fail("must be a non-empty string")
        return value
    if kind == "table":
        if not isinstance(value, dict):
            fail("must be a table")
        for k, v in value.items():
            if not (isinstance(v, _NUMBER) and not isinstance(v, bool)) and not (
                isinstance(v, list) and all(isinstance(e, _NUMBER) and not isinstance(e, bool) for e in v)
            ):
                raise ConfigParseError("model parameters must be numbers or lists of numbers",
                                       field=f"{where}.{k}", line=_line_of(text, section, k))
        return value
    if kind in ("int", "count"):
        if isinstance(value, bool) or not isinstance(value, int):
            fail(f"must be an integer, got {value!r}")
        if kind == "count" and value < 1:
            fail("must be at least 1")
        return value
    if kind in ("number", "positive", "nonneg"):
        if isinstance(value, bool) or not isinstance(value, _NUMBER) or not math.isfinite(value):
            fail(f"must be a finite number, got {value!r}")
        if kind == "positive" and not value > 0:
            fail("must be positive")
        if kind == "nonneg" and value < 0:
            fail("must be nonnegative")
        return float(value)
    if kind == "vector":
        vals = value if isinstance(value, list) else [value]
        if not vals or any(isinstance(v, bool) or not isinstance(v, _NUMBER) for v in vals):
            fail("must be a number or a non-empty list of numbers")
        return [float(v) for v in vals]
    if kind in ("matrix", "points"):
        if not isinstance(value, list) or not value:
            fail("must be a non-empty list")
        rows = [r if isinstance(r, list) else [r] for r in value]
        if any(isinstance(v, bool) or not isinstance(v, _NUMBER) for r in rows for v in r):
            fail("entries must be numbers")
        if len({len(r) for r in rows}) != 1:
            fail("rows must have equal length")
        return [[float(v) for v in r] for r in rows]
    raise AssertionError(kind)


def parse_config(text: str) -> ExperimentConfig:
    """Parse a config document; raises ConfigParseError with line and field."""
    try:
        raw = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigParseError(f"invalid TOML: {exc}", line=int(m.group(1)) if m else None) from None
    sections = {}
    for name, value in raw.items():
        if name not in SECTIONS:
            raise ConfigParseError(f"unknown section [{name}]", field=name, line=_line_of(text, name, None))
        if not isinstance(value, dict):
            raise ConfigParseError("must be a table", field=name, line=_line_of(text, name, None))
        cls = SECTIONS[name]
        known = cls.__dataclass_fields__
        kwargs = {}
        for key, val in value.items():
            if key not in known:
                raise ConfigParseError(f"unknown key '{key}'", field=f"{name}.{key}", line=_line_of(text, name, key))
            if (name, key) == ("grid", "r"):
                if val != "auto":
                    val = _check(val, "positive", name, key, text)
            else:
                val = _check(val, _TYPES[(name, key)], name, key, text)
            kwargs[key] = val
        sections[name] = cls(**kwargs)
    if "model" not in sections or not sections["model"].name:
        raise ConfigParseError("missing required key", field="model.name", line=_line_of(text, "model", None))
    if "grid" not in sections or not sections["grid"].h:
        raise ConfigParseError("missing required key", field="grid.h", line=_line_of(text, "grid", None))
    for name, cls in SECTIONS.items():
        sections.setdefault(name, cls())
    cfg = ExperimentConfig(text=text, **sections)
    if cfg.spike.eps != sorted(cfg.spike.eps, reverse=True):
        raise ConfigParseError("eps ladder must be decreasing", field="spike.eps", line=_line_of(text, "spike", "eps"))
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config: {exc}") from None
    return parse_config(text)
