"""Flux-density observables: pointwise field samples and circular harmonics.

Two observable kinds are supported.  A point-field observable stacks chosen
Cartesian components of B at a fixed list of points, component blocks first
(all Bx values, then all By, then all Bz).  A Fourier observable samples the
radial flux density on a bore circle at uniform angles and returns harmonic
coefficients; for several axial positions the per-circle coefficient blocks
are concatenated in the given z order.

An *evaluator* is any callable mapping an (P, d) array of positions to the
(P, d) array of B vectors; both analytic operators and FE solutions are
wrapped this way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import HalbachError

COMPONENT_ORDER = ("Bx", "By", "Bz")

#: supported harmonic conventions: which of (A_k, B_k) holds the cosine sum
FOURIER_CONVENTIONS = ("cos_is_B", "cos_is_A")


@dataclass(frozen=True)
class FieldPoint:
    """A field evaluation point with a region tag."""

    position: np.ndarray
    tag: str = "air"

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if pos.shape not in ((2,), (3,)):
            raise HalbachError("field point must be 2- or 3-dimensional")
        if self.tag not in ("air", "magnet", "iron"):
            raise HalbachError(f"unknown region tag {self.tag!r}")
        pos = pos.copy()
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class PointFieldSpec:
    """Cartesian B components at fixed points, stacked component-block first."""

    points: tuple[FieldPoint, ...]
    components: tuple[str, ...]

    def __post_init__(self):
        if not self.points:
            raise HalbachError("point-field spec needs at least one point")
        dims = {p.position.shape[0] for p in self.points}
        if len(dims) != 1:
            raise HalbachError("all points must share one dimensionality")
        if any(p.tag != "air" for p in self.points):
            raise HalbachError("observation points must be tagged 'air'")
        if not self.components:
            raise HalbachError("need at least one component")
        if any(c not in COMPONENT_ORDER for c in self.components):
            raise HalbachError(f"components must be among {COMPONENT_ORDER}")
        if list(self.components) != [c for c in COMPONENT_ORDER if c in self.components]:
            raise HalbachError("components must be in Bx, By, Bz order")
        ndim = dims.pop()
        if "Bz" in self.components and ndim != 3:
            raise HalbachError("Bz requires 3D points")

    @property
    def ndim(self) -> int:
        return self.points[0].position.shape[0]

    @property
    def n_values(self) -> int:
        return len(self.components) * len(self.points)

    def eval_points(self) -> np.ndarray:
        return np.array([p.position for p in self.points])

    def values_from_field(self, field: np.ndarray) -> np.ndarray:
        field = _check_field(field, len(self.points), self.ndim)
        cols = [COMPONENT_ORDER.index(c) for c in self.components]
        return np.concatenate([field[:, c] for c in cols])

    def value_rows(self) -> list[tuple[str, float, int]]:
        """(kind, z, index) tuple per value, for serialization."""
        rows = []
        for comp in self.components:
            for k, p in enumerate(self.points):
                z = float(p.position[2]) if self.ndim == 3 else 0.0
                rows.append((f"point_{comp}", z, k))
        return rows


@dataclass(frozen=True)
class FourierCircleSpec:
    """Harmonics of the radial flux density on bore circles.

    Per circle the value block is (A_1..A_K, B_1..B_K).  Under the default
    ``cos_is_B`` convention A_k is the sine sum and B_k the cosine sum; the
    ``cos_is_A`` convention swaps the two blocks.
    """

    radius: float
    n_harmonics: int = 8
    n_theta: int = 60
    z_positions: tuple[float, ...] = (0.0,)
    ndim: int = 3
    convention: str = "cos_is_B"

    def __post_init__(self):
        if self.radius <= 0.0:
            raise HalbachError("circle radius must be positive")
        if self.n_harmonics < 1:
            raise HalbachError("need at least one harmonic")
        if self.n_theta <= 2 * self.n_harmonics:
            raise HalbachError(
                f"n_theta = {self.n_theta} aliases harmonics up to K = "
                f"{self.n_harmonics}; need n_theta > 2K"
            )
        if self.ndim not in (2, 3):
            raise HalbachError("ndim must be 2 or 3")
        if not self.z_positions:
            raise HalbachError("need at least one z position")
        if self.ndim == 2 and tuple(self.z_positions) != (0.0,):
            raise HalbachError("2D circles must use z_positions = (0.0,)")
        if self.convention not in FOURIER_CONVENTIONS:
            raise HalbachError(f"convention must be one of {FOURIER_CONVENTIONS}")
        object.__setattr__(self, "z_positions", tuple(float(z) for z in self.z_positions))

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta

    @property
    def n_values(self) -> int:
        return 2 * self.n_harmonics * len(self.z_positions)

    def eval_points(self) -> np.ndarray:
        th = self.angles
        ring = self.radius * np.c_[np.cos(th), np.sin(th)]
        if self.ndim == 2:
            return ring
        out = np.empty((len(self.z_positions) * self.n_theta, 3))
        for m, z in enumerate(self.z_positions):
            sl = slice(m * self.n_theta, (m + 1) * self.n_theta)
            out[sl, :2] = ring
            out[sl, 2] = z
        return out

    def values_from_field(self, field: np.ndarray) -> np.ndarray:
        n_pts = len(self.z_positions) * self.n_theta
        field = _check_field(field, n_pts, self.ndim)
        th = self.angles
        cos_th, sin_th = np.cos(th), np.sin(th)
        out = np.empty(self.n_values)
        for m in range(len(self.z_positions)):
            sl = slice(m * self.n_theta, (m + 1) * self.n_theta)
            radial = field[sl, 0] * cos_th + field[sl, 1] * sin_th
            coeffs = fourier_coefficients(radial, self.n_harmonics, convention=self.convention)
            out[2 * self.n_harmonics * m : 2 * self.n_harmonics * (m + 1)] = coeffs
        return out

    def value_rows(self) -> list[tuple[str, float, int]]:
        rows = []
        for z in self.z_positions:
            for name in ("fourier_A", "fourier_B"):
                rows.extend((name, float(z), k) for k in range(1, self.n_harmonics + 1))
        return rows


ObservableSpec = PointFieldSpec | FourierCircleSpec


def _check_field(field: np.ndarray, n_points: int, ndim: int) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    if field.shape != (n_points, ndim):
        raise HalbachError(
            f"field array has shape {field.shape}, expected ({n_points}, {ndim})"
        )
    if not np.all(np.isfinite(field)):
        raise HalbachError("field samples contain non-finite values")
    return field


def sample_point_field(evaluator, spec: PointFieldSpec) -> np.ndarray:
    """Evaluate B at the spec points and stack the requested components."""
    field = evaluator(spec.eval_points())
    return spec.values_from_field(field)


def sample_radial_on_circle(evaluator, radius: float, n_theta: int, z: float | None = None) -> np.ndarray:
    """Radial flux density B_r at uniform angles 2 pi m / n_theta on a circle.

    ``z`` selects the circle plane for 3D evaluators; omit it for 2D.
    """
    if radius <= 0.0:
        raise HalbachError("circle radius must be positive")
    if n_theta < 1:
        raise HalbachError("need at least one sample")
    th = 2.0 * np.pi * np.arange(n_theta) / n_theta
    cos_th, sin_th = np.cos(th), np.sin(th)
    pts = radius * np.c_[cos_th, sin_th]
    if z is not None:
        pts = np.c_[pts, np.full(n_theta, float(z))]
    field = np.asarray(evaluator(pts), dtype=float)
    if field.shape != pts.shape:
        raise HalbachError(f"evaluator returned shape {field.shape}, expected {pts.shape}")
    if not np.all(np.isfinite(field)):
        raise HalbachError("field samples contain non-finite values")
    return field[:, 0] * cos_th + field[:, 1] * sin_th


def fourier_coefficients(samples: np.ndarray, n_harmonics: int, convention: str = "cos_is_B") -> np.ndarray:
    """Harmonic coefficients (A_1..A_K, B_1..B_K) of uniform circle samples.

    With ``cos_is_B``: A_k = (2/n) sum_m s_m sin(k theta_m) and
    B_k = (2/n) sum_m s_m cos(k theta_m), theta_m = 2 pi m / n.  Recovers
    trigonometric polynomials of degree <= K exactly when n > 2K.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim != 1:
        raise HalbachError("samples must be one-dimensional")
    n = len(s)
    if n <= 2 * n_harmonics:
        raise HalbachError(f"{n} samples alias harmonics up to K = {n_harmonics}")
    if not np.all(np.isfinite(s)):
        raise HalbachError("samples contain non-finite values")
    if convention not in FOURIER_CONVENTIONS:
        raise HalbachError(f"convention must be one of {FOURIER_CONVENTIONS}")
    th = 2.0 * np.pi * np.arange(n) / n
    k = np.arange(1, n_harmonics + 1)
    sin_sum = (2.0 / n) * (np.sin(np.outer(k, th)) @ s)
    cos_sum = (2.0 / n) * (np.cos(np.outer(k, th)) @ s)
    if convention == "cos_is_B":
        return np.concatenate([sin_sum, cos_sum])
    return np.concatenate([cos_sum, sin_sum])


def observe_fourier(evaluator, spec: FourierCircleSpec) -> np.ndarray:
    """Harmonic observable vector for every circle in the spec."""
    field = evaluator(spec.eval_points())
    return spec.values_from_field(field)


@dataclass(frozen=True)
class Observation:
    """Measured observable values with per-value noise variances.

    ``noise_var`` is the diagonal of the noise covariance in T^2.  A scalar
    broadcasts over all values.  Zero entries are accepted so noise-free
    synthetic observations can be represented; the inference routines reject
    nonpositive variances at the point of use.
    """

    values: np.ndarray
    spec: ObservableSpec
    noise_var: np.ndarray

    def __post_init__(self):
        n = self.spec.n_values
        values = np.asarray(self.values, dtype=float)
        if values.shape != (n,):
            raise HalbachError(
                f"spec describes {n} values, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise HalbachError("observed values contain non-finite entries")
        var = np.asarray(self.noise_var, dtype=float)
        if var.ndim == 0:
            var = np.full(n, float(var))
        if var.shape != (n,):
            raise HalbachError(
                f"noise variances must have shape ({n},), got {var.shape}"
            )
        if not np.all(np.isfinite(var)) or np.any(var < 0.0):
            raise HalbachError("noise variances must be finite and nonnegative")
        values = values.copy()
        values.setflags(write=False)
        var = var.copy()
        var.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "noise_var", var)

    @property
    def n_values(self) -> int:
        return len(self.values)
