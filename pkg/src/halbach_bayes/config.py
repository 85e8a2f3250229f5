"""Run configuration: TOML schema, validation, and object builders.

A config file holds up to six tables (``geometry``, ``prior``,
``observable``, ``noise``, ``inference``, ``run``); every key has a
default, so an empty file or no file at all describes the stock 12-ring
magnet with point observations and the conjugate-update path.  Unknown
tables or keys are rejected by name rather than ignored, since a typo
that silently falls back to a default would poison reproducibility.

Seeds are deliberately absent: stochastic entry points take them as
explicit arguments, and the resolved snapshot written next to each run's
outputs records the values used.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .errors import ConfigError
from .geometry import HalbachArray, ParameterLayout, build_default_array
from .harness import SigmaProfile, build_sigma_profile, default_synthetic_prior
from .observables import FieldPoint, FourierCircleSpec, ObservableSpec, PointFieldSpec
from .prior import GaussianDensity, fit_prior, load_helmholtz_csv


@dataclass(frozen=True)
class GeometryConfig:
    inner_radius: float = 0.1
    outer_radius: float = 0.2
    ring_length: float = 0.1
    n_rings: int = 12
    nominal_moment: float = 330.0
    mu_r: float = 1.0
    ring_gap: float = 0.0
    iron_inner: float | None = None
    iron_outer: float | None = None
    n_components: int = 3


@dataclass(frozen=True)
class PriorConfig:
    source: str = "synthetic"
    csv_path: str = ""
    type_seed: int = 20
    draw_seed: int = 21
    n_measured_rings: int = 12
    pooled: bool = False


@dataclass(frozen=True)
class ObservableConfig:
    kind: str = "point"
    radius: float = 0.09
    n_angles: int = 16
    n_z: int = 24
    z_span_factor: float = 1.1
    n_harmonics: int = 8
    n_theta: int = 60


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "scalar"
    sigma: float = 1e-4
    sigma_homogeneous: float = 5e-5
    sigma_fringe: float = 5e-3
    fringe_margin: float = 0.1


@dataclass(frozen=True)
class InferenceConfig:
    mode: str = "linear"
    step_size: float = 1.0 / 80.0
    n_steps: int = 5000
    burn_in_fraction: float = 0.1


@dataclass(frozen=True)
class RunSection:
    out_dir: str = "out"
    n_seeds: int = 10


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometryConfig = GeometryConfig()
    prior: PriorConfig = PriorConfig()
    observable: ObservableConfig = ObservableConfig()
    noise: NoiseConfig = NoiseConfig()
    inference: InferenceConfig = InferenceConfig()
    run: RunSection = RunSection()

    def resolved_dict(self) -> dict:
        """Every effective value, defaults included, for the run snapshot."""
        return {
            name: dataclasses.asdict(getattr(self, name))
            for name in ("geometry", "prior", "observable", "noise", "inference", "run")
        }


_SECTIONS = {
    "geometry": GeometryConfig,
    "prior": PriorConfig,
    "observable": ObservableConfig,
    "noise": NoiseConfig,
    "inference": InferenceConfig,
    "run": RunSection,
}

# keys that accept either of two scalar types
_COERCIONS = {int: float}


def _build_section(name: str, cls, table: dict):
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table, got {type(table).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(fields))
    if unknown:
        raise ConfigError(
            f"unknown key{'s' if len(unknown) > 1 else ''} in [{name}]: "
            f"{', '.join(unknown)} (valid: {', '.join(sorted(fields))})"
        )
    kwargs = {}
    for key, value in table.items():
        expected = fields[key].type
        if expected in ("float", "float | None") and isinstance(value, int) \
                and not isinstance(value, bool):
            value = float(value)
        kwargs[key] = value
    section = cls(**kwargs)
    _check_types(name, cls, section)
    return section


def _check_types(name: str, cls, section) -> None:
    simple = {"int": int, "float": float, "str": str, "bool": bool}
    for f in dataclasses.fields(cls):
        value = getattr(section, f.name)
        if f.type == "float | None":
            ok = value is None or (isinstance(value, float) and not isinstance(value, bool))
        else:
            expected = simple[f.type]
            ok = isinstance(value, expected) and not (
                expected is not bool and isinstance(value, bool)
            )
        if not ok:
            raise ConfigError(
                f"[{name}] {f.name} must be {f.type}, got {value!r}"
            )


def config_from_dict(payload: dict) -> RunConfig:
    unknown = sorted(set(payload) - set(_SECTIONS))
    if unknown:
        raise ConfigError(
            f"unknown config table{'s' if len(unknown) > 1 else ''}: "
            f"{', '.join(unknown)} (valid: {', '.join(sorted(_SECTIONS))})"
        )
    sections = {
        name: _build_section(name, cls, payload.get(name, {}))
        for name, cls in _SECTIONS.items()
    }
    cfg = RunConfig(**sections)
    _validate_semantics(cfg)
    return cfg


def load_config(path=None) -> RunConfig:
    """Parse and validate a TOML config; ``None`` means all defaults."""
    if path is None:
        return config_from_dict({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            payload = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(payload)


def _validate_semantics(cfg: RunConfig) -> None:
    geo, obs, noise, inf = cfg.geometry, cfg.observable, cfg.noise, cfg.inference
    if geo.n_components not in (2, 3):
        raise ConfigError("geometry.n_components must be 2 or 3")
    if (geo.iron_inner is None) != (geo.iron_outer is None):
        raise ConfigError("iron_inner and iron_outer must be given together")
    if obs.kind not in ("point", "fourier"):
        raise ConfigError(f"observable.kind must be 'point' or 'fourier', got {obs.kind!r}")
    if not 0.0 < obs.radius < geo.inner_radius:
        raise ConfigError("observable.radius must lie inside the bore")
    if obs.n_angles < 1 or obs.n_theta < 1 or obs.n_harmonics < 1:
        raise ConfigError("observable counts must be positive")
    if obs.n_z < 1:
        raise ConfigError("observable.n_z must be positive")
    if obs.z_span_factor <= 0:
        raise ConfigError("observable.z_span_factor must be positive")
    if noise.kind not in ("scalar", "profile"):
        raise ConfigError(f"noise.kind must be 'scalar' or 'profile', got {noise.kind!r}")
    if noise.sigma <= 0 or noise.sigma_homogeneous <= 0 or noise.sigma_fringe <= 0:
        raise ConfigError("noise levels must be positive")
    if noise.fringe_margin < 0:
        raise ConfigError("noise.fringe_margin must be nonnegative")
    if inf.mode not in ("linear", "pcn"):
        raise ConfigError(f"inference.mode must be 'linear' or 'pcn', got {inf.mode!r}")
    if inf.n_steps < 1:
        raise ConfigError("inference.n_steps must be positive")
    if not 0.0 < inf.step_size <= 1.0:
        raise ConfigError("inference.step_size must be in (0, 1]")
    if not 0.0 <= inf.burn_in_fraction < 1.0:
        raise ConfigError("inference.burn_in_fraction must be in [0, 1)")
    if cfg.prior.source not in ("synthetic", "csv"):
        raise ConfigError(
            f"prior.source must be 'synthetic' or 'csv', got {cfg.prior.source!r}"
        )
    if cfg.prior.source == "csv" and not cfg.prior.csv_path:
        raise ConfigError("prior.source = 'csv' requires prior.csv_path")
    if cfg.prior.n_measured_rings < 3:
        raise ConfigError("prior.n_measured_rings must be at least 3")
    if cfg.run.n_seeds < 1:
        raise ConfigError("run.n_seeds must be positive")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_array(cfg: RunConfig) -> HalbachArray:
    geo = cfg.geometry
    return build_default_array(
        inner_radius=geo.inner_radius,
        outer_radius=geo.outer_radius,
        ring_length=geo.ring_length,
        n_rings=geo.n_rings,
        nominal_moment=geo.nominal_moment,
        mu_r=geo.mu_r,
        ring_gap=geo.ring_gap,
        iron_inner=geo.iron_inner,
        iron_outer=geo.iron_outer,
    )


def build_layout(cfg: RunConfig) -> ParameterLayout:
    # two components means the 2D cross-section model: one ring of unknowns
    if cfg.geometry.n_components == 2:
        return ParameterLayout(n_rings=1, n_components=2)
    return ParameterLayout(n_rings=cfg.geometry.n_rings, n_components=3)


def _z_grid(cfg: RunConfig, array: HalbachArray) -> np.ndarray:
    span = cfg.observable.z_span_factor * array.half_length
    return np.linspace(-span, span, cfg.observable.n_z)


def build_observable_spec(cfg: RunConfig, array: HalbachArray) -> ObservableSpec:
    obs = cfg.observable
    planar = cfg.geometry.n_components == 2
    th = 2.0 * np.pi * np.arange(obs.n_angles) / obs.n_angles
    ring = obs.radius * np.c_[np.cos(th), np.sin(th)]
    if obs.kind == "point":
        if planar:
            points = tuple(FieldPoint(position=xy) for xy in ring)
            return PointFieldSpec(points=points, components=("Bx", "By"))
        points = tuple(
            FieldPoint(position=np.array([xy[0], xy[1], z]))
            for z in _z_grid(cfg, array)
            for xy in ring
        )
        return PointFieldSpec(points=points, components=("Bx", "By", "Bz"))
    z_positions = (0.0,) if planar else tuple(_z_grid(cfg, array))
    return FourierCircleSpec(
        radius=obs.radius,
        n_harmonics=obs.n_harmonics,
        n_theta=obs.n_theta,
        z_positions=z_positions,
        ndim=2 if planar else 3,
    )


def build_noise(cfg: RunConfig, spec: ObservableSpec,
                array: HalbachArray) -> float | SigmaProfile:
    if cfg.noise.kind == "scalar":
        return cfg.noise.sigma
    z_values = np.unique([z for (_, z, _) in spec.value_rows()])
    return build_sigma_profile(
        z_values,
        magnet_half_length=array.half_length,
        margin=cfg.noise.fringe_margin,
        sigma_homogeneous=cfg.noise.sigma_homogeneous,
        sigma_fringe=cfg.noise.sigma_fringe,
    )


def build_prior(cfg: RunConfig, array: HalbachArray,
                layout: ParameterLayout) -> GaussianDensity:
    pc = cfg.prior
    if pc.source == "csv":
        records = load_helmholtz_csv(pc.csv_path)
        return fit_prior(records, layout, pooled=pc.pooled)
    return default_synthetic_prior(
        array,
        layout,
        type_seed=pc.type_seed,
        draw_seed=pc.draw_seed,
        n_measured_rings=pc.n_measured_rings,
    )
