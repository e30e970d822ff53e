"""Experiment configuration stored as sectioned INI files.

Every field lives in a fixed ``[section]`` under its own key. Optional
derived quantities (``n0``, ``v0``) may be left empty. A config file may
carry a ``[profile:<name>]`` section whose ``section.key = value`` entries
override the base values when that profile is selected.
"""
import configparser
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from ..closures import NewtonParams
from ..kernels import AggregationConfig, BreakageConfig, KernelSet, VolumeDomain

EXPERIMENTS = ("breakage", "aggregation", "cavity")
CLOSURE_NAMES = ("PN", "MN", "QMOM", "FVS")
PROFILES = ("desk", "paper")


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


def _sec(section, unit=""):
    return {"section": section, "unit": unit}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = field(default="breakage", metadata=_sec("experiment"))
    closure: str = field(default="MN", metadata=_sec("experiment"))
    order: int = field(default=5, metadata=_sec("experiment"))
    final_time: float = field(default=1.0, metadata=_sec("experiment", "s"))
    time_step: float = field(default=0.01, metadata=_sec("experiment", "s"))
    cfl_safety: float = field(default=0.9, metadata=_sec("experiment"))

    d_min: float = field(default=0.001, metadata=_sec("volume", "m, droplet diameter"))
    d_max: float = field(default=0.009, metadata=_sec("volume", "m, droplet diameter"))
    alpha0: float = field(default=0.01, metadata=_sec("volume", "volume fraction"))
    sigma_fraction: float = field(default=0.1, metadata=_sec("volume", "of v_max - v_min"))
    n0: Optional[float] = field(default=None, metadata=_sec("volume", "1/m^3; empty: 2 alpha0 / (v_min + v_max)"))
    v0: Optional[float] = field(default=None, metadata=_sec("volume", "m^3; empty: (v_min + v_max) / 2"))

    n_q: int = field(default=40, metadata=_sec("discretization", "quadrature points"))
    n_v: int = field(default=500, metadata=_sec("discretization", "sectional cells"))
    reference_n_v: Optional[int] = field(default=None, metadata=_sec("discretization", "reference FVS cells; empty: n_v"))
    reference_levels: int = field(default=1, metadata=_sec("discretization", "FVS grids n, 2n, ... combined by Richardson extrapolation"))

    breakage_p: int = field(default=2, metadata=_sec("breakage"))
    breakage_m: int = field(default=2, metadata=_sec("breakage"))
    C1: float = field(default=0.12, metadata=_sec("breakage"))
    C2: float = field(default=0.078, metadata=_sec("breakage"))
    breakage_epsilon: float = field(default=0.004, metadata=_sec("breakage", "m^2/s^3"))
    rho_d: float = field(default=865.6, metadata=_sec("breakage", "kg/m^3"))
    breakage_sigma: float = field(default=0.0361, metadata=_sec("breakage", "N/m"))
    frequency_scale: float = field(default=1.0, metadata=_sec("breakage", "multiplies Gamma"))

    C_omega: float = field(default=41.2, metadata=_sec("aggregation"))
    k_omega: float = field(default=1.33e10, metadata=_sec("aggregation"))
    aggregation_epsilon: float = field(default=0.004, metadata=_sec("aggregation", "m^2/s^3"))
    rho_c: float = field(default=1000.0, metadata=_sec("aggregation", "kg/m^3"))
    aggregation_sigma: float = field(default=0.0361, metadata=_sec("aggregation", "N/m"))
    eta_c: float = field(default=0.001, metadata=_sec("aggregation", "Pa s"))

    k_max: int = field(default=400, metadata=_sec("newton"))
    eps: float = field(default=2.0 ** -52, metadata=_sec("newton"))
    chi: float = field(default=0.6, metadata=_sec("newton"))
    tau: float = field(default=1e-9, metadata=_sec("newton"))
    r_list: Tuple[float, ...] = field(default=NewtonParams().r_list, metadata=_sec("newton"))

    n_x: int = field(default=20, metadata=_sec("spatial"))
    n_y: int = field(default=20, metadata=_sec("spatial"))
    diffusion: float = field(default=0.001, metadata=_sec("spatial", "m^2/s"))
    reynolds: float = field(default=5.0, metadata=_sec("spatial"))
    lid_speed: float = field(default=1.0, metadata=_sec("spatial", "m/s"))
    center_x: float = field(default=0.3, metadata=_sec("spatial", "m"))
    center_y: float = field(default=0.3, metadata=_sec("spatial", "m"))
    width: float = field(default=0.08, metadata=_sec("spatial", "m"))
    velocity_u: Optional[str] = field(default=None, metadata=_sec("spatial", "velocity file for u; empty: solve the cavity flow"))
    velocity_z: Optional[str] = field(default=None, metadata=_sec("spatial", "velocity file for z"))

    output_dir: Optional[str] = field(default=None, metadata=_sec("output"))
    snapshot_every: int = field(default=0, metadata=_sec("output", "macro steps; 0 = final only"))

    def __post_init__(self):
        self.validate()

    # -- derived quantities --
    @property
    def v_min(self):
        return np.pi / 6.0 * self.d_min ** 3

    @property
    def v_max(self):
        return np.pi / 6.0 * self.d_max ** 3

    @property
    def volume_unit(self):
        """Internal volume unit: volumes are solved in multiples of ``v_max``."""
        return self.v_max

    @property
    def domain(self):
        """Volume domain in internal units."""
        return VolumeDomain(self.v_min / self.volume_unit, 1.0)

    @property
    def initial_center(self):
        v0 = self.v0 if self.v0 is not None else 0.5 * (self.v_min + self.v_max)
        return v0 / self.volume_unit

    @property
    def initial_width(self):
        return self.sigma_fraction * self.domain.length

    @property
    def initial_number(self):
        if self.n0 is not None:
            return self.n0
        return 2.0 * self.alpha0 / (self.v_min + self.v_max)

    @property
    def steps(self):
        return int(round(self.final_time / self.time_step))

    @property
    def fvs_cells(self):
        """Coarsest sectional grid of the E2 reference."""
        return self.reference_n_v or self.n_v

    def newton_params(self):
        return NewtonParams(k_max=self.k_max, eps=self.eps, chi=self.chi, tau=self.tau, r_list=self.r_list)

    def kernels(self):
        breakage = aggregation = None
        if self.kind in ("breakage", "cavity") and self.frequency_scale > 0:
            breakage = BreakageConfig(
                p=self.breakage_p, m=self.breakage_m, C1=self.C1 * self.frequency_scale, C2=self.C2,
                alpha_d=self.alpha0, epsilon=self.breakage_epsilon, rho_d=self.rho_d, sigma=self.breakage_sigma,
            )
        if self.kind in ("aggregation", "cavity"):
            aggregation = AggregationConfig(
                C_omega=self.C_omega, k_omega=self.k_omega, alpha_d=self.alpha0, epsilon=self.aggregation_epsilon,
                rho_c=self.rho_c, sigma=self.aggregation_sigma, eta_c=self.eta_c,
            )
        return KernelSet(
            self.domain, breakage=breakage, aggregation=aggregation, volume_unit=self.volume_unit,
            p=self.breakage_p, m=self.breakage_m,
        )

    def validate(self):
        if self.kind not in EXPERIMENTS:
            raise ConfigError(f"experiment kind must be one of {EXPERIMENTS}, got {self.kind!r}")
        if self.closure not in CLOSURE_NAMES:
            raise ConfigError(f"closure must be one of {CLOSURE_NAMES}, got {self.closure!r}")
        positive = ("final_time", "time_step", "d_min", "alpha0", "sigma_fraction", "n_q", "n_v",
                    "n_x", "n_y", "reynolds", "width", "k_max", "chi", "tau", "eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.d_max > self.d_min:
            raise ConfigError("d_max must exceed d_min")
        if (self.velocity_u is None) != (self.velocity_z is None):
            raise ConfigError("velocity_u and velocity_z must be given together")
        if self.reference_levels < 1:
            raise ConfigError("reference_levels must be at least 1")
        if self.order < 0:
            raise ConfigError("order must be nonnegative")
        if self.closure == "QMOM" and self.order < 1:
            raise ConfigError("QMOM needs order >= 1")
        if self.closure == "MN" and self.n_q < self.order + 1:
            raise ConfigError(f"MN needs n_q >= order + 1 ({self.n_q} < {self.order + 1})")
        if self.n_q < 2:
            raise ConfigError("n_q must be at least 2")
        if not 0 < self.cfl_safety <= 1:
            raise ConfigError("cfl_safety must lie in (0, 1]")
        if self.diffusion < 0 or self.frequency_scale < 0 or self.snapshot_every < 0:
            raise ConfigError("diffusion, frequency_scale and snapshot_every must be nonnegative")
        try:
            NewtonParams(k_max=self.k_max, eps=self.eps, chi=self.chi, tau=self.tau, r_list=self.r_list)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def with_(self, **changes):
        try:
            return replace(self, **changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# --- INI conversion -------------------------------------------------------

def _format(value):
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_OPTIONAL = {"n0", "v0", "output_dir", "reference_n_v", "velocity_u", "velocity_z"}
_PATHS = {"output_dir", "velocity_u", "velocity_z"}


def _parse(f, text):
    text = text.strip()
    if f.name in _OPTIONAL and text == "":
        return None
    kind = f.default if f.default is not None else (int if f.name == "reference_n_v" else float)
    kind = kind if isinstance(kind, type) else type(kind)
    try:
        if f.name in _PATHS or kind is str:
            return text.upper() if f.name == "closure" else text
        if kind is tuple:
            return tuple(float(t) for t in text.replace(",", " ").split())
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {text!r}") from exc


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def to_ini(config):
    """Serialise to INI text (units as comments)."""
    lines, current = [], None
    for f in fields(ExperimentConfig):
        sec = f.metadata["section"]
        if sec != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{sec}]")
            current = sec
        unit = f.metadata.get("unit")
        if unit:
            lines.append(f"; {unit}")
        lines.append(f"{f.name} = {_format(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def _parser():
    p = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    p.optionxform = str
    return p


def from_ini(text, profile=None, base=None):
    """Parse INI text; ``profile`` applies the matching ``[profile:<name>]`` overrides."""
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    values = {}
    for sec in parser.sections():
        if sec.startswith("profile:"):
            continue
        for key, raw in parser.items(sec):
            if key not in _FIELDS or _FIELDS[key].metadata["section"] != sec:
                raise ConfigError(f"unknown key [{sec}] {key}")
            values[key] = _parse(_FIELDS[key], raw)
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}")
        name = f"profile:{profile}"
        if parser.has_section(name):
            for dotted, raw in parser.items(name):
                key = dotted.split(".", 1)[-1]
                if key not in _FIELDS:
                    raise ConfigError(f"unknown key {dotted} in [{name}]")
                values[key] = _parse(_FIELDS[key], raw)
    base = base or ExperimentConfig()
    try:
        return replace(base, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def shipped_configs():
    return sorted(p.name[:-4] for p in resources.files(__package__).joinpath("configs").iterdir()
                  if p.name.endswith(".ini"))


def load_config(source, profile=None, **overrides):
    """Load a config from a path or the name of a shipped config (``breakage`` ...)."""
    path = Path(str(source))
    if path.suffix == ".ini" or path.exists():
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
    else:
        res = resources.files(__package__).joinpath("configs", f"{source}.ini")
        if not res.is_file():
            raise ConfigError(f"no config file {source!r} (shipped: {', '.join(shipped_configs())})")
        text = res.read_text()
    cfg = from_ini(text, profile)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.with_(**overrides) if overrides else cfg


def save_config(config, path):
    Path(path).write_text(to_ini(config))
