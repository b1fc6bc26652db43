"""
Run configuration: one validated, hashable record per run.

Values are layered data/config.json < key=value file < VFMM_* environment
< explicit overrides (the CLI flags).
"""

import dataclasses
import hashlib
import math
from dataclasses import dataclass, fields
from typing import Optional, Tuple

from fmm import expansion as ex
from fmm.constants import EngineDefaults, FlowDefaults, MacKind, Timeouts, TreeLimits
from fmm.engine import FmmConfig
from fmm.errors import ConfigValidationError, InvalidInputError
from fmm.model import FlowParams
from utils.config_manager import get_config_manager

PRECISIONS = ("double", "single")


@dataclass
class RunConfig:
    # problem size
    n_particles: int = 10000
    lattice_n: int = 32
    particles_per_rank: int = 100000
    # engine
    p: int = EngineDefaults.ORDER
    theta: float = EngineDefaults.THETA
    n_crit: int = TreeLimits.DEFAULT_N_CRIT
    max_level: int = TreeLimits.DEFAULT_MAX_LEVEL
    periodic_shells: int = EngineDefaults.PERIODIC_SHELLS
    batch_budget: int = EngineDefaults.BATCH_BUDGET
    mac_kind: str = MacKind.FMM
    threads: int = 1
    overlap: bool = True
    precision: str = "double"
    # flow
    nu: float = 0.02
    dt: float = 0.01
    steps: int = 10
    seed: int = 12345
    reinit_every: int = FlowDefaults.REINIT_EVERY
    overlap_ratio: float = FlowDefaults.OVERLAP_RATIO
    energy: float = 0.5
    target_t_over_T: float = 1.0
    # parallel runs
    ranks: int = 1
    rank_list: Tuple[int, ...] = (1, 2, 4, 8)
    p_list: Tuple[int, ...] = (4, 6, 8, 10, 12, 14)
    timeout: float = Timeouts.RECEIVE
    # output
    output_dir: str = "results"

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def load(cls, key_value_file: Optional[str] = None, overrides: Optional[dict] = None,
             use_environment: bool = True, validate: bool = True):
        """
        Build a config from every source in precedence order.

        Args:
            key_value_file: optional plain key=value file
            overrides: highest-precedence values (None entries are ignored)
            use_environment: apply VFMM_<FIELD> variables
            validate: run validate() before returning

        Returns:
            RunConfig
        """
        manager = get_config_manager()
        names = set(cls.field_names())
        values = {k: v for k, v in manager.get_defaults().items() if k in names}
        values.setdefault("timeout", manager.get_timeout("receive"))
        if key_value_file:
            try:
                from_file = manager.parse_key_value_file(key_value_file)
            except (OSError, ValueError) as e:
                raise ConfigValidationError(f"cannot read config file: {e}") from e
            unknown = sorted(set(from_file) - names)
            if unknown:
                raise ConfigValidationError(f"unknown config keys in {key_value_file}: {', '.join(unknown)}")
            values.update(from_file)
        if use_environment:
            values.update(manager.get_env_overrides(cls.field_names()))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        config = cls.from_dict(values)
        if validate:
            config.validate()
        return config

    @classmethod
    def from_dict(cls, values: dict):
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = _coerce(f.name, values[f.name], f.default)
        return cls(**kwargs)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------------
    # validation
    # ------------------------------------------------------------------

    def validate(self):
        """Raise ConfigValidationError listing every violated constraint."""
        problems = []

        def check(ok, message):
            if not ok:
                problems.append(message)

        check(self.n_particles >= 1, f"n_particles must be >= 1, got {self.n_particles}")
        check(self.lattice_n >= 8 and self.lattice_n & (self.lattice_n - 1) == 0,
              f"lattice_n must be a power of two >= 8, got {self.lattice_n}")
        check(self.particles_per_rank >= 1, f"particles_per_rank must be >= 1, got {self.particles_per_rank}")
        check(self.p >= 1, f"p must be >= 1, got {self.p}")
        check(0.0 < self.theta < 1.0, f"theta must be in (0, 1), got {self.theta}")
        check(self.n_crit >= 1, f"n_crit must be >= 1, got {self.n_crit}")
        check(0 <= self.max_level <= TreeLimits.MAX_MORTON_LEVEL,
              f"max_level must be in [0, {TreeLimits.MAX_MORTON_LEVEL}], got {self.max_level}")
        check(self.periodic_shells >= 0, f"periodic_shells must be >= 0, got {self.periodic_shells}")
        check(self.batch_budget >= 1, f"batch_budget must be >= 1, got {self.batch_budget}")
        check(self.mac_kind in MacKind.ALL, f"mac_kind must be one of {MacKind.ALL}, got {self.mac_kind!r}")
        check(self.threads >= 1, f"threads must be >= 1, got {self.threads}")
        check(self.precision in PRECISIONS, f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        check(self.nu >= 0.0 and math.isfinite(self.nu), f"nu must be finite and >= 0, got {self.nu}")
        check(self.dt > 0.0 and math.isfinite(self.dt), f"dt must be finite and > 0, got {self.dt}")
        check(self.steps >= 0, f"steps must be >= 0, got {self.steps}")
        check(self.reinit_every >= 0, f"reinit_every must be >= 0, got {self.reinit_every}")
        check(self.overlap_ratio >= 1.0, f"overlap_ratio must be >= 1, got {self.overlap_ratio}")
        check(self.energy >= 0.0, f"energy must be >= 0, got {self.energy}")
        check(self.target_t_over_T >= 0.0, f"target_t_over_T must be >= 0, got {self.target_t_over_T}")
        check(self.ranks >= 1, f"ranks must be >= 1, got {self.ranks}")
        check(len(self.rank_list) > 0 and all(r >= 1 for r in self.rank_list),
              f"rank_list must hold positive rank counts, got {self.rank_list}")
        check(len(self.p_list) > 0 and all(p >= 1 for p in self.p_list),
              f"p_list must hold positive orders, got {self.p_list}")
        check(self.timeout > 0, f"timeout must be > 0, got {self.timeout}")
        if problems:
            raise ConfigValidationError("; ".join(problems))
        return self

    # ------------------------------------------------------------------
    # identity
    # ------------------------------------------------------------------

    def canonical_lines(self):
        return [f"{name}={_format(getattr(self, name))}" for name in sorted(self.field_names())]

    def config_hash(self) -> str:
        """First 16 hex digits of SHA-256 over the sorted key=value text."""
        text = "\n".join(self.canonical_lines()).encode("utf-8")
        return hashlib.sha256(text).hexdigest()[:16]

    def to_header_lines(self):
        return [f"config_hash={self.config_hash()}"] + self.canonical_lines()

    # ------------------------------------------------------------------
    # derived objects
    # ------------------------------------------------------------------

    @property
    def precision_policy(self):
        return ex.PrecisionPolicy.single_stabilized() if self.precision == "single" else ex.DOUBLE

    def fmm_config(self, periodic: bool = True, **changes) -> FmmConfig:
        values = dict(
            p=self.p, theta=self.theta, n_crit=self.n_crit, max_level=self.max_level,
            periodic_shells=self.periodic_shells if periodic else 0,
            precision=self.precision_policy, batch_budget=self.batch_budget,
            mac_kind=self.mac_kind, threads=self.threads, overlap=self.overlap,
        )
        values.update(changes)
        try:
            return FmmConfig(**values)
        except InvalidInputError as e:
            raise ConfigValidationError(str(e)) from e

    def flow_params(self) -> FlowParams:
        return FlowParams(nu=self.nu, dt=self.dt)


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name, value, default):
    """Convert a raw (string or JSON) value to the type of the field default."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(value)
                return lowered in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                return tuple(int(v) for v in value.split(",") if v.strip())
            return tuple(int(v) for v in value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigValidationError(f"{name}: cannot convert {value!r} to {type(default).__name__}") from e
