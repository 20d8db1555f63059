"""Experiment config files.

Grammar (one assignment per line)::

    line    := blank | comment | key "=" value [comment]
    comment := "#" anything
    key     := name ("." name)*         name := [A-Za-z_][A-Za-z0-9_-]*
    value   := raw text up to the comment, surrounding blanks stripped

The text before the first dot is the section, the remainder (which may
contain further dots, e.g. ``rate.tail.ratio``) is the key within it. Keys
without a dot live in the top-level section ``""``. Values stay raw strings
and are converted by the typed getters, so errors name the offending field
and its line. Lists are comma separated.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .grid import GapGrid, init_density
from .model import (
    RateSpec,
    clamped_affine_rate,
    clamped_lipschitz_rate,
    constant_rate,
    finite_constant_rate,
    geometric_constant_rate,
)
from .particles import (
    common_pair_sampler,
    dirac_sampler,
    exponential_gaps_sampler,
    independent_pair_sampler,
    uniform_gaps_sampler,
)
from .solver import SolverConfig

EXPERIMENTS = ("solve", "steady", "hierarchy", "doeblin", "particles", "couple", "mk-exact", "uniform-limit")
_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_-]*(\.[A-Za-z_][A-Za-z0-9_-]*)*$")


class ParseError(ConfigError):
    pass


def _strip_comment(line):
    pos = line.find("#")
    return line if pos < 0 else line[:pos]


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)  # (section, key) -> raw string
    lines: dict = field(default_factory=dict)  # (section, key) -> line number
    source: str = "<string>"

    # raw access ----------------------------------------------------------
    def has(self, section, key):
        return (section, key) in self.values

    def has_section(self, section):
        return any(s == section for s, _ in self.values)

    def _where(self, section, key):
        name = f"{section}.{key}" if section else key
        line = self.lines.get((section, key))
        return f"{self.source}:{line}: {name}" if line else f"{self.source}: {name}"

    def raw(self, section, key, default=None):
        if (section, key) in self.values:
            return self.values[(section, key)]
        if default is None:
            raise ConfigError(f"{self._where(section, key)}: required field missing")
        return default

    def get_str(self, section, key, default=None):
        return str(self.raw(section, key, default))

    def get_float(self, section, key, default=None):
        v = self.raw(section, key, default)
        try:
            return float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{self._where(section, key)}: expected a number, got {v!r}") from None

    def get_int(self, section, key, default=None):
        v = self.raw(section, key, default)
        try:
            return int(str(v).strip())
        except ValueError:
            raise ConfigError(f"{self._where(section, key)}: expected an integer, got {v!r}") from None

    def get_bool(self, section, key, default=None):
        v = str(self.raw(section, key, default)).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{self._where(section, key)}: expected a boolean, got {v!r}")

    def get_floats(self, section, key, default=None):
        v = self.raw(section, key, default)
        if isinstance(v, (list, tuple)):
            return [float(x) for x in v]
        try:
            return [float(x) for x in str(v).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{self._where(section, key)}: expected a number list, got {v!r}") from None

    def get_ints(self, section, key, default=None):
        """Integer list; ``lo:hi`` denotes the inclusive range."""
        v = str(self.raw(section, key, default))
        if ":" in v:
            try:
                lo, hi = (int(x) for x in v.split(":"))
            except ValueError:
                raise ConfigError(f"{self._where(section, key)}: bad range {v!r}") from None
            return list(range(lo, hi + 1))
        vals = self.get_floats(section, key, default)
        if any(x != int(x) for x in vals):
            raise ConfigError(f"{self._where(section, key)}: expected integers")
        return [int(x) for x in vals]

    # typed blocks ----------------------------------------------------------
    @property
    def kind(self):
        k = self.get_str("", "experiment")
        if k not in EXPERIMENTS:
            raise ConfigError(f"{self._where('', 'experiment')}: unknown experiment {k!r}")
        return k

    def seed(self, override=None):
        if override is not None:
            return int(override)
        return self.get_int("particles", "seed", 0) if self.has("particles", "seed") else self.get_int("", "seed", 0)

    def tol(self, name, default):
        return self.get_float("check", name, default)

    def rate(self) -> RateSpec:
        kind = self.get_str("rate", "kind")
        p = lambda k, d=None: self.get_float("rate", f"params.{k}", d)  # noqa: E731
        if kind == "constant":
            spec = constant_rate(p("value"))
        elif kind == "geometric-constant":
            spec = geometric_constant_rate(self.get_float("rate", "tail.weight", 1.0),
                                           self.get_float("rate", "tail.ratio"))
        elif kind == "finite-constant":
            spec = finite_constant_rate(self.get_floats("rate", "params.values"))
        elif kind == "clamped-lipschitz":
            spec = clamped_lipschitz_rate(p("a_minus"), p("C"), p("beta"), p("f0", 0.0), p("f1", 1.0))
        elif kind == "clamped-affine":
            prefix = self.get_int("rate", "params.prefix") if self.has("rate", "params.prefix") else None
            spec = clamped_affine_rate(self.get_float("rate", "tail.weight", 1.0),
                                       self.get_float("rate", "tail.ratio"),
                                       p("intercept"), p("slope"), p("lo"), p("hi"), prefix)
        else:
            raise ConfigError(f"{self._where('rate', 'kind')}: unknown rate kind {kind!r}")
        if self.has("rate", "a_minus") or self.has("rate", "a_plus"):
            spec = RateSpec(spec.components,
                            self.get_float("rate", "a_minus", spec.a_minus),
                            self.get_float("rate", "a_plus", spec.a_plus),
                            spec.tail, spec.name)
        return spec.validate()

    def grid(self, N=None) -> GapGrid:
        N = self.get_int("grid", "N") if N is None else N
        return GapGrid(N, self.get_float("grid", "h"), self.get_int("grid", "M"))

    def solver(self, grid: GapGrid) -> SolverConfig:
        dt = self.get_float("solver", "dt", grid.h)
        if abs(dt - grid.h) > 1e-12 * grid.h:
            raise ConfigError(f"{self._where('solver', 'dt')}: constraint dt = h violated "
                              f"(dt={dt}, grid.h={grid.h})")
        return SolverConfig(
            dt=dt,
            t_end=self.get_float("solver", "t_end", 0.0),
            snapshot_times=tuple(self.get_floats("solver", "snapshots", "")),
            steady_tol=self.get_float("solver", "steady_tol", 1e-9),
            steady_max_time=self.get_float("solver", "steady_max_time", 400.0),
            record_every=self.get_int("solver", "record_every", 1),
            grid=grid,
        )

    def init_field(self, grid: GapGrid, section="init"):
        kind = self.get_str(section, "kind")
        if kind in ("dirac", "dirac-at"):
            return init_density(grid, kind, ages=self.get_floats(section, "ages"))
        if kind == "product-exponential":
            return init_density(grid, kind, rate=self.get_float(section, "rate"))
        if kind == "uniform-box":
            return init_density(grid, kind, lo=self.get_floats(section, "lo"), hi=self.get_floats(section, "hi"))
        raise ConfigError(f"{self._where(section, 'kind')}: unknown initial density {kind!r}")

    def sampler(self, key):
        """Sampler from ``particles.<key> = <kind> <args>``.

        kinds: ``dirac a1,a2,...``, ``exponential rate``, ``uniform lo hi``.
        """
        text = self.get_str("particles", key).split()
        if not text:
            raise ConfigError(f"{self._where('particles', key)}: empty sampler")
        kind, args = text[0], text[1:]
        try:
            if kind == "dirac":
                return dirac_sampler([float(x) for x in " ".join(args).replace(" ", ",").split(",") if x])
            if kind == "exponential":
                return exponential_gaps_sampler(float(args[0]) if args else 1.0)
            if kind == "uniform":
                return uniform_gaps_sampler(float(args[0]), float(args[1]))
        except (IndexError, ValueError):
            raise ConfigError(f"{self._where('particles', key)}: bad sampler arguments {args}") from None
        raise ConfigError(f"{self._where('particles', key)}: unknown sampler {kind!r}")

    def pair_sampler(self):
        if self.has("particles", "x"):
            return independent_pair_sampler(self.sampler("x"), self.sampler("y"))
        return common_pair_sampler(self.sampler("init"))


def parse_config(text, source="<string>") -> ExperimentConfig:
    cfg = ExperimentConfig(source=source)
    for no, line in enumerate(text.splitlines(), start=1):
        body = _strip_comment(line).strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"{source}:{no}: expected 'key = value', got {body!r}")
        key, value = (part.strip() for part in body.split("=", 1))
        if not _KEY.match(key):
            raise ParseError(f"{source}:{no}: malformed key {key!r}")
        section, _, rest = key.partition(".")
        if not rest:
            section, rest = "", key
        if (section, rest) in cfg.values:
            raise ParseError(f"{source}:{no}: duplicate field {key!r} (first on line {cfg.lines[(section, rest)]})")
        if value == "":
            raise ParseError(f"{source}:{no}: empty value for {key!r}")
        cfg.values[(section, rest)] = value
        cfg.lines[(section, rest)] = no
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))

