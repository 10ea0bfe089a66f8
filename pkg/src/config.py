import os
import logging
import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple
from dotenv import load_dotenv

from .exceptions import ConfigurationError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


def get_config_value(key: str, default: str = None) -> str:
    """Get config value from environment variables"""
    return os.getenv(key, default)


class Config:
    # Base paths
    BASE_DIR = Path(__file__).parent.parent
    LOGS_DIR = Path(get_config_value("AOPT_LOG_DIR", str(BASE_DIR / "logs")))
    CONFIGS_DIR = BASE_DIR / "configs"

    # Output directory fallback when neither --out nor [output] directory is given
    OUTPUT_DIR = Path(get_config_value("AOPT_OUT", str(BASE_DIR / "output")))

    # Ensure directories exist (only where writable)
    try:
        LOGS_DIR.mkdir(parents=True, exist_ok=True)
    except (OSError, PermissionError):
        pass

    # Processing Configuration
    MAX_WORKERS = int(get_config_value("AOPT_JOBS", "1"))
    RETRY_ATTEMPTS = int(get_config_value("RETRY_ATTEMPTS", "3"))

    # Solver Configuration
    NEWTON_TOL = float(get_config_value("NEWTON_TOL", "1e-10"))
    NEWTON_MAX_ITER = int(get_config_value("NEWTON_MAX_ITER", "25"))
    DEGENERACY_GUARD = float(get_config_value("DEGENERACY_GUARD", "0.1"))
    STEP_RESIDUAL_TOL = float(get_config_value("STEP_RESIDUAL_TOL", "1e-8"))

    # Line search
    MAX_REJECTIONS = int(get_config_value("MAX_REJECTIONS", "20"))

    @classmethod
    def validate(cls):
        errors = []

        if cls.MAX_WORKERS < 1:
            errors.append(f"AOPT_JOBS must be >= 1 (got {cls.MAX_WORKERS})")
        if cls.RETRY_ATTEMPTS < 1:
            errors.append(f"RETRY_ATTEMPTS must be >= 1 (got {cls.RETRY_ATTEMPTS})")
        if not 0.0 < cls.NEWTON_TOL < 1.0:
            errors.append(f"NEWTON_TOL must lie in (0, 1) (got {cls.NEWTON_TOL})")
        if cls.NEWTON_MAX_ITER < 1:
            errors.append(f"NEWTON_MAX_ITER must be >= 1 (got {cls.NEWTON_MAX_ITER})")
        if not 0.0 <= cls.DEGENERACY_GUARD < 1.0:
            errors.append(f"DEGENERACY_GUARD must lie in [0, 1) (got {cls.DEGENERACY_GUARD})")
        if cls.MAX_REJECTIONS < 1:
            errors.append(f"MAX_REJECTIONS must be >= 1 (got {cls.MAX_REJECTIONS})")

        if errors:
            raise ConfigurationError("Configuration errors:\n" + "\n".join(f"  - {e}" for e in errors))

        return True


# ---------------------------------------------------------------------------
# Run configuration (INI experiment files)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeometryConfig:
    Lx: float = 1.0
    H_fix: float = 0.25
    ell0: float = 1.0
    Nx: int = 33
    Nz: int = 41


@dataclass(frozen=True)
class PhysicsConfig:
    c: float = 1.0
    b: float = 0.05
    k: float = 0.1
    rho: float = 1.0
    delta: float = 0.01
    kappa: float = 0.5
    beta_a: float = 1.0
    gamma_a: float = 0.0
    beta_pl: float = 0.0
    gamma_pl: float = 0.0


@dataclass(frozen=True)
class TimeConfig:
    T: float = 1.0
    Nt: int = 64


@dataclass(frozen=True)
class ControlsConfig:
    # Built-in smooth profiles; files override them when given
    g_amplitude: float = 0.0
    h_amplitude: float = 0.0
    ell_amplitude: float = 0.0
    g_file: str = ""
    h_file: str = ""
    ell_file: str = ""


@dataclass(frozen=True)
class ObjectiveConfig:
    targets: str = "manufactured"
    target_g_amplitude: float = 0.5
    target_h_amplitude: float = 0.5
    target_ell_amplitude: float = 0.1
    roi: Tuple[float, ...] = (0.25, 0.75, -0.25, 0.0)
    theta: float = 1e-6
    s_g: float = 0.5
    s_ell: float = 3.0


@dataclass(frozen=True)
class OptimizerSettings:
    max_iters: int = 100
    armijo_c1: float = 1e-4
    step_init: float = 1.0
    step_shrink: float = 0.5
    grad_tol: float = -1.0
    mode: str = "lbfgs"
    memory: int = 5
    smooth_riesz: bool = False


@dataclass(frozen=True)
class ChecksConfig:
    tolerance: float = 1e-2
    n_directions: int = 5
    tau_list: Tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    taylor_taus: Tuple[float, ...] = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4)
    seed: int = 0


@dataclass(frozen=True)
class OutputConfig:
    directory: str = ""
    dump_states: bool = True
    dump_adjoint: bool = True
    dump_operator: bool = False
    monitors: Tuple[float, ...] = (0.5, -0.125)


SECTIONS = {
    "geometry": GeometryConfig,
    "physics": PhysicsConfig,
    "time": TimeConfig,
    "controls": ControlsConfig,
    "objective": ObjectiveConfig,
    "optimizer": OptimizerSettings,
    "checks": ChecksConfig,
    "output": OutputConfig,
}


def format_value(value) -> str:
    """Render a config value so that it re-parses to the identical value"""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def _coerce(raw: str, annotation, key: str):
    text = raw.strip()
    try:
        if annotation is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(f"not a boolean: {text!r}")
            return lowered in ("true", "yes", "1", "on")
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str:
            return text
        # Tuple[float, ...]
        if not text:
            return tuple()
        return tuple(float(part) for part in text.split(","))
    except ValueError as e:
        raise ConfigurationError(f"Invalid value for '{key}': {e}") from e


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    controls: ControlsConfig = field(default_factory=ControlsConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    checks: ChecksConfig = field(default_factory=ChecksConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source: Optional[str] = None

    @classmethod
    def from_ini(cls, path) -> "RunConfig":
        """Parse an INI experiment file, filling unspecified keys with defaults"""
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Config file not found: {path}")

        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.optionxform = str  # keep key case (Lx, H_fix, ...)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigurationError(f"Cannot parse {path}: {e}") from e

        errors = []
        blocks = {}
        for section in parser.sections():
            if section not in SECTIONS:
                errors.append(f"Unknown section [{section}]")
        for name, block_cls in SECTIONS.items():
            types = {f.name: f.type for f in fields(block_cls)}
            values = {}
            if parser.has_section(name):
                for key, raw in parser.items(name):
                    if key not in types:
                        errors.append(f"Unknown key '{key}' in [{name}]")
                        continue
                    try:
                        values[key] = _coerce(raw, types[key], f"{name}.{key}")
                    except ConfigurationError as e:
                        errors.append(str(e))
            blocks[name] = block_cls(**values)

        if errors:
            raise ConfigurationError("Configuration errors:\n" + "\n".join(f"  - {e}" for e in errors))

        config = cls(source=str(path), **blocks)
        config.validate()
        return config

    def to_ini(self) -> str:
        """Effective configuration as INI text (floats at 17 significant digits)"""
        lines = []
        for name in SECTIONS:
            block = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(block):
                lines.append(f"{f.name} = {format_value(getattr(block, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, **sections) -> "RunConfig":
        """Copy with some blocks replaced, e.g. with_overrides(time=TimeConfig(Nt=8))"""
        return replace(self, **sections)

    def resolve_path(self, name: str) -> Optional[Path]:
        if not name:
            return None
        candidate = Path(name)
        if not candidate.is_absolute() and self.source:
            candidate = Path(self.source).parent / candidate
        return candidate

    def validate(self) -> bool:
        errors = []
        geo, phys, tm = self.geometry, self.physics, self.time
        obj, opt, chk = self.objective, self.optimizer, self.checks

        if geo.Lx <= 0:
            errors.append(f"geometry.Lx must be > 0 (got {geo.Lx})")
        if geo.ell0 <= 0:
            errors.append(f"geometry.ell0 must be > 0 (got {geo.ell0})")
        if geo.H_fix < 0:
            errors.append(f"geometry.H_fix must be >= 0 (got {geo.H_fix})")
        if geo.Nx < 5:
            errors.append(f"geometry.Nx must be >= 5 (got {geo.Nx})")
        if geo.Nz < 5:
            errors.append(f"geometry.Nz must be >= 5 (got {geo.Nz})")

        if phys.c <= 0 or phys.b <= 0:
            errors.append(f"physics.c and physics.b must be > 0 (got c={phys.c}, b={phys.b})")
        for key in ("k", "rho", "delta", "kappa", "beta_a", "gamma_a", "beta_pl", "gamma_pl"):
            if getattr(phys, key) < 0:
                errors.append(f"physics.{key} must be >= 0 (got {getattr(phys, key)})")

        if tm.T <= 0:
            errors.append(f"time.T must be > 0 (got {tm.T})")
        if tm.Nt < 2:
            errors.append(f"time.Nt must be >= 2 (got {tm.Nt})")

        if obj.targets not in ("zero", "manufactured", "priors"):
            errors.append(f"objective.targets must be zero|manufactured|priors (got {obj.targets!r})")
        if len(obj.roi) != 4:
            errors.append(f"objective.roi needs x0, x1, z0, z1 (got {len(obj.roi)} values)")
        if obj.theta < 0:
            errors.append(f"objective.theta must be >= 0 (got {obj.theta})")
        # regularity tiers for d = 2: medium needs s_ell > 2, high needs s_g >= 1/2 and s_ell > 5/2
        if obj.s_g < 0 or obj.s_ell <= 2.0:
            errors.append(f"objective exponents below the medium tier (s_g={obj.s_g}, s_ell={obj.s_ell})")
        elif obj.s_g < 0.5 or obj.s_ell <= 2.5:
            logger.warning(f"Exponents satisfy only the medium tier (s_g={obj.s_g}, s_ell={obj.s_ell})")

        if opt.mode not in ("gd", "lbfgs"):
            errors.append(f"optimizer.mode must be gd|lbfgs (got {opt.mode!r})")
        if not 0.0 < opt.armijo_c1 < 1.0:
            errors.append(f"optimizer.armijo_c1 must lie in (0, 1) (got {opt.armijo_c1})")
        if not 0.0 < opt.step_shrink < 1.0:
            errors.append(f"optimizer.step_shrink must lie in (0, 1) (got {opt.step_shrink})")
        if opt.step_init <= 0:
            errors.append(f"optimizer.step_init must be > 0 (got {opt.step_init})")
        if opt.memory < 1:
            errors.append(f"optimizer.memory must be >= 1 (got {opt.memory})")

        if chk.tolerance <= 0:
            errors.append(f"checks.tolerance must be > 0 (got {chk.tolerance})")
        if chk.n_directions < 1:
            errors.append(f"checks.n_directions must be >= 1 (got {chk.n_directions})")
        if not chk.tau_list or any(t <= 0 for t in chk.tau_list):
            errors.append("checks.tau_list must hold positive step sizes")
        if len(chk.taylor_taus) < 2 or any(t <= 0 for t in chk.taylor_taus):
            errors.append("checks.taylor_taus must hold at least two positive step sizes")

        if len(self.output.monitors) % 2:
            errors.append("output.monitors must list x, z pairs")

        for key in ("g_file", "h_file", "ell_file"):
            path = self.resolve_path(getattr(self.controls, key))
            if path is not None and not path.exists():
                errors.append(f"controls.{key} not found: {path}")

        if errors:
            raise ConfigurationError("Configuration errors:\n" + "\n".join(f"  - {e}" for e in errors))

        return True
