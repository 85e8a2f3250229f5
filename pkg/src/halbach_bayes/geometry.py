"""Halbach dipole cross-section geometry and the magnetization parameter layout.

A dipole ring is built from 16 permanent-magnet blocks whose easy axes rotate
twice per revolution.  Block ``i`` (1-based) sits centered at polar angle
``(i - 1) * 22.5`` degrees and carries the nominal magnetization direction
``180 + 2 * (i - 1) * 22.5`` degrees.  A magnet is a stack of such rings; the
unknowns of the inverse problem are the per-block, per-ring magnetization
components, flattened into a single vector whose ordering is fixed by
:class:`ParameterLayout`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import HalbachError

N_BLOCKS = 16
SECTOR_DEG = 360.0 / N_BLOCKS  # 22.5


def nominal_angle_deg(i: int) -> float:
    """Nominal magnetization angle of block ``i`` in degrees, in [0, 360).

    The easy axis rotates twice per revolution: block 1 points at 180 deg,
    each following block adds 45 deg.
    """
    if not 1 <= i <= N_BLOCKS:
        raise HalbachError(f"block index must be in 1..{N_BLOCKS}, got {i}")
    return (180.0 + 2.0 * (i - 1) * SECTOR_DEG) % 360.0


def _signed_area(vertices: np.ndarray) -> float:
    x = vertices[:, 0]
    y = vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_properly_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


@dataclass(frozen=True)
class BlockPolygon:
    """Simple, counterclockwise cross-section polygon of one magnet block."""

    vertices: np.ndarray  # (n, 2) [m]
    block_index: int

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
            raise HalbachError("polygon needs an (n, 2) vertex array with n >= 3")
        verts = verts.copy()
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        if not 1 <= self.block_index <= N_BLOCKS:
            raise HalbachError(f"block index must be in 1..{N_BLOCKS}")
        if _signed_area(verts) <= 0.0:
            raise HalbachError("polygon must be counterclockwise with positive area")
        n = len(verts)
        for a in range(n):
            for b in range(a + 1, n):
                if b == a + 1 or (a == 0 and b == n - 1):
                    continue  # edges sharing a vertex cannot properly intersect
                if _segments_properly_intersect(
                    verts[a], verts[(a + 1) % n], verts[b], verts[(b + 1) % n]
                ):
                    raise HalbachError("polygon is self-intersecting")

    @property
    def area(self) -> float:
        """Cross-section area [m^2] (shoelace)."""
        return _signed_area(self.vertices)

    @property
    def centroid(self) -> np.ndarray:
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        cross = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        c = ((v + w) * cross[:, None]).sum(axis=0) / (6.0 * self.area)
        return c

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Vectorized point-in-polygon test (crossing number, boundary counts in).

        ``tol`` > 0 grows the acceptance region by roughly that distance.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.zeros(len(pts), dtype=bool)
        v = self.vertices
        n = len(v)
        x, y = pts[:, 0], pts[:, 1]
        for a in range(n):
            x1, y1 = v[a]
            x2, y2 = v[(a + 1) % n]
            crosses = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (x < np.where(crosses, xint, np.inf))
        if tol > 0.0:
            inside |= self.edge_distance(pts) <= tol
        return inside

    def edge_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to the nearest polygon edge."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        v = self.vertices
        n = len(v)
        dmin = np.full(len(pts), np.inf)
        for a in range(n):
            p1 = v[a]
            p2 = v[(a + 1) % n]
            e = p2 - p1
            ee = float(e @ e)
            t = np.clip(((pts - p1) @ e) / ee, 0.0, 1.0)
            proj = p1[None, :] + t[:, None] * e[None, :]
            d = np.hypot(pts[:, 0] - proj[:, 0], pts[:, 1] - proj[:, 1])
            dmin = np.minimum(dmin, d)
        return dmin


@dataclass(frozen=True)
class HalbachArray:
    """A Halbach dipole magnet: 16-block cross-section stacked into rings.

    Rings are stacked symmetrically about z = 0; ring ``j`` (1-based) spans
    ``ring_z_span(j)``.  Iron yoke radii are optional (no yoke when absent).
    """

    blocks: tuple[BlockPolygon, ...]
    inner_radius: float
    outer_radius: float
    ring_length: float
    n_rings: int
    nominal_moment: float  # block dipole moment magnitude [A m^2]
    mu_r: float = 1.0
    ring_gap: float = 0.0
    iron_inner: float | None = None
    iron_outer: float | None = None

    def __post_init__(self):
        if len(self.blocks) != N_BLOCKS:
            raise HalbachError(f"expected {N_BLOCKS} blocks, got {len(self.blocks)}")
        for k, blk in enumerate(self.blocks, start=1):
            if blk.block_index != k:
                raise HalbachError("blocks must be ordered by block_index 1..16")
        if not 0.0 < self.inner_radius < self.outer_radius:
            raise HalbachError("need 0 < inner_radius < outer_radius")
        if self.ring_length <= 0.0:
            raise HalbachError("ring_length must be positive")
        if not 12 <= self.n_rings <= 18:
            raise HalbachError(f"n_rings must be in 12..18, got {self.n_rings}")
        if self.nominal_moment <= 0.0:
            raise HalbachError("nominal_moment must be positive")
        if self.mu_r <= 0.0:
            raise HalbachError("mu_r must be positive")
        if self.ring_gap < 0.0:
            raise HalbachError("ring_gap must be nonnegative")
        if (self.iron_inner is None) != (self.iron_outer is None):
            raise HalbachError("iron_inner and iron_outer must be given together")
        if self.iron_inner is not None:
            if not self.outer_radius <= self.iron_inner < self.iron_outer:
                raise HalbachError("need outer_radius <= iron_inner < iron_outer")

    @property
    def has_iron(self) -> bool:
        return self.iron_inner is not None

    @property
    def half_length(self) -> float:
        """Half of the total axial extent of the ring stack."""
        total = self.n_rings * self.ring_length + (self.n_rings - 1) * self.ring_gap
        return 0.5 * total

    def block(self, i: int) -> BlockPolygon:
        if not 1 <= i <= N_BLOCKS:
            raise HalbachError(f"block index must be in 1..{N_BLOCKS}, got {i}")
        return self.blocks[i - 1]

    def ring_z_span(self, j: int) -> tuple[float, float]:
        if not 1 <= j <= self.n_rings:
            raise HalbachError(f"ring index must be in 1..{self.n_rings}, got {j}")
        z0 = -self.half_length + (j - 1) * (self.ring_length + self.ring_gap)
        return z0, z0 + self.ring_length

    def block_volume(self, i: int) -> float:
        """Volume of one block of one ring [m^3]."""
        return self.block(i).area * self.ring_length


def build_default_array(
    inner_radius: float = 0.1,
    outer_radius: float = 0.2,
    ring_length: float = 0.1,
    n_rings: int = 12,
    nominal_moment: float = 330.0,
    mu_r: float = 1.0,
    ring_gap: float = 0.0,
    iron_inner: float | None = None,
    iron_outer: float | None = None,
) -> HalbachArray:
    """Build the zero-clearance trapezoidal-block array.

    Block ``i`` is the trapezoid between the inner and outer radius whose
    straight chords connect the boundary angles ``(i - 1) * 22.5 +- 11.25``
    degrees; block 1 is centered on the +x axis.  Adjacent blocks share their
    radial edges exactly.
    """
    # boundary directions computed once so adjacent blocks share vertices exactly
    bounds = [math.radians(k * SECTOR_DEG - SECTOR_DEG / 2.0) for k in range(N_BLOCKS)]
    units = [np.array([math.cos(t), math.sin(t)]) for t in bounds]
    blocks = []
    for i in range(1, N_BLOCKS + 1):
        u0 = units[i - 1]
        u1 = units[i % N_BLOCKS]
        verts = np.array(
            [inner_radius * u0, outer_radius * u0, outer_radius * u1, inner_radius * u1]
        )
        blocks.append(BlockPolygon(vertices=verts, block_index=i))
    return HalbachArray(
        blocks=tuple(blocks),
        inner_radius=inner_radius,
        outer_radius=outer_radius,
        ring_length=ring_length,
        n_rings=n_rings,
        nominal_moment=nominal_moment,
        mu_r=mu_r,
        ring_gap=ring_gap,
        iron_inner=iron_inner,
        iron_outer=iron_outer,
    )


def nominal_magnetization(array: HalbachArray, i: int) -> np.ndarray:
    """Nominal magnetization vector of block ``i`` [A/m], shape (3,).

    Magnitude is the nominal block moment divided by the block volume; the
    direction is the nominal easy axis, purely transverse.
    """
    alpha = math.radians(nominal_angle_deg(i))
    m = array.nominal_moment / array.block_volume(i)
    return np.array([m * math.cos(alpha), m * math.sin(alpha), 0.0])


@dataclass(frozen=True)
class ParameterLayout:
    """Flat ordering of the magnetization unknowns.

    Component ``c`` of block ``i`` in ring ``j`` (all blocks of a ring are
    contiguous, components of one block are adjacent) lives at flat index
    ``((j - 1) * n_blocks + (i - 1)) * n_components + c``.
    """

    n_rings: int
    n_components: int
    n_blocks: int = N_BLOCKS

    _COMPONENT_NAMES = ("Mx", "My", "Mz")

    def __post_init__(self):
        if self.n_blocks != N_BLOCKS:
            raise HalbachError(f"layout requires {N_BLOCKS} blocks")
        if self.n_rings < 1:
            raise HalbachError("layout needs at least one ring")
        if self.n_components not in (2, 3):
            raise HalbachError("n_components must be 2 (transverse) or 3")

    @property
    def dim(self) -> int:
        return self.n_blocks * self.n_rings * self.n_components

    def flat_index(self, i: int, j: int, c: int) -> int:
        if not 1 <= i <= self.n_blocks:
            raise HalbachError(f"block index out of range: {i}")
        if not 1 <= j <= self.n_rings:
            raise HalbachError(f"ring index out of range: {j}")
        if not 0 <= c < self.n_components:
            raise HalbachError(f"component index out of range: {c}")
        return ((j - 1) * self.n_blocks + (i - 1)) * self.n_components + c

    def block_ring_component(self, k: int) -> tuple[int, int, int]:
        if not 0 <= k < self.dim:
            raise HalbachError(f"flat index out of range: {k}")
        c = k % self.n_components
        br = k // self.n_components
        i = br % self.n_blocks + 1
        j = br // self.n_blocks + 1
        return i, j, c

    def slice_of(self, i: int, j: int) -> slice:
        """Slice of the flat vector holding the components of block (i, j)."""
        k0 = self.flat_index(i, j, 0)
        return slice(k0, k0 + self.n_components)

    def labels(self) -> list[str]:
        out = []
        for k in range(self.dim):
            i, j, c = self.block_ring_component(k)
            out.append(f"b{i:02d}_r{j:02d}_{self._COMPONENT_NAMES[c]}")
        return out


@dataclass(frozen=True)
class ParameterVector:
    """One magnetization state: a flat vector plus its layout (immutable)."""

    values: np.ndarray
    layout: ParameterLayout

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.layout.dim,):
            raise HalbachError(
                f"values shape {vals.shape} does not match layout dim {self.layout.dim}"
            )
        if not np.all(np.isfinite(vals)):
            raise HalbachError("parameter vector contains non-finite entries")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def magnetization(self, i: int, j: int) -> np.ndarray:
        """Magnetization components of block (i, j) [A/m]."""
        return self.values[self.layout.slice_of(i, j)]

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values=values, layout=self.layout)


def nominal_parameter_vector(array: HalbachArray, layout: ParameterLayout) -> ParameterVector:
    """Nominal magnetization state for the given layout (rings identical)."""
    if layout.n_components == 3:
        per_block = [nominal_magnetization(array, i) for i in range(1, N_BLOCKS + 1)]
    else:
        per_block = [nominal_magnetization(array, i)[:2] for i in range(1, N_BLOCKS + 1)]
    ring = np.concatenate(per_block)
    return ParameterVector(values=np.tile(ring, layout.n_rings), layout=layout)
