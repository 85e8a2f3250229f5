"""Structured conforming triangulations of the magnet cross-section.

The 2D domain is a disk: bore, 16 trapezoidal magnet blocks, an optional
iron ring, and air out to a truncation circle.  The mesh is built in warped
polar coordinates: angular lines at fixed multiples of the sector width and
radial levels that interpolate between the region boundaries.  Block chords
are straight lines, so placing every level node on the ray/chord
intersection makes each block boundary an exact union of mesh edges.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import HalbachError
from .geometry import HalbachArray, N_BLOCKS, SECTOR_DEG

REGION_AIR = 0
REGION_IRON = N_BLOCKS + 1

MESH_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Mesh2D:
    """Conforming triangle mesh with a region tag per triangle.

    Tags: 0 air, 1..16 the magnet blocks, 17 iron.  ``boundary_nodes`` is
    the sorted set of nodes on the outer truncation circle, where the
    vector potential is pinned to zero.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    regions: np.ndarray
    boundary_nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        triangles = np.asarray(self.triangles, dtype=np.int32)
        regions = np.asarray(self.regions, dtype=np.int16)
        boundary = np.asarray(self.boundary_nodes, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise HalbachError("nodes must be an (m, 2) array")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise HalbachError("triangles must be a (t, 3) array")
        if regions.shape != (len(triangles),):
            raise HalbachError("need one region tag per triangle")
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(nodes)):
            raise HalbachError("triangle node indices out of range")
        if regions.size and (regions.min() < REGION_AIR or regions.max() > REGION_IRON):
            raise HalbachError(f"region tags must lie in 0..{REGION_IRON}")
        if len(boundary) and (boundary.min() < 0 or boundary.max() >= len(nodes)):
            raise HalbachError("boundary node indices out of range")
        if len(np.unique(boundary)) != len(boundary):
            raise HalbachError("boundary nodes must be unique")
        areas = _signed_areas(nodes, triangles)
        if np.any(areas <= 0.0):
            raise HalbachError("all triangles must have positive (CCW) area")
        boundary = np.sort(boundary)
        for arr, name in (
            (nodes, "nodes"),
            (triangles, "triangles"),
            (regions, "regions"),
            (boundary, "boundary_nodes"),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        return _signed_areas(self.nodes, self.triangles)

    def region_area(self, tag: int) -> float:
        mask = self.regions == tag
        return float(_signed_areas(self.nodes, self.triangles[mask]).sum())


def _signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = nodes[triangles[:, 0]]
    u = nodes[triangles[:, 1]] - a
    v = nodes[triangles[:, 2]] - a
    return 0.5 * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _chord_profile(radius: float, half_sector: float):
    """Radius along a ray hitting the inscribed 16-gon chord at ``radius``.

    The chord of a sector subtending 2*half_sector at corner radius R has
    perpendicular distance R cos(half_sector) from the origin.
    """

    def profile(delta: np.ndarray) -> np.ndarray:
        return radius * math.cos(half_sector) / np.cos(delta)

    return profile


def _circle_profile(radius: float):
    def profile(delta: np.ndarray) -> np.ndarray:
        return np.full_like(delta, radius)

    return profile


def _graded_fractions(width: float, h: float, growth: float = 1.3) -> np.ndarray:
    """Cumulative level fractions for a band whose spacing grows geometrically."""
    if width <= h:
        return np.array([1.0])
    n = max(1, math.ceil(math.log1p(width * (growth - 1.0) / h) / math.log(growth)))
    widths = growth ** np.arange(n)
    return np.cumsum(widths) / widths.sum()


def generate_mesh(
    array: HalbachArray,
    h: float,
    truncation_radius: float | None = None,
) -> Mesh2D:
    """Mesh the cross-section with target edge length ``h``.

    The outermost air band is geometrically graded since the field decays
    there; all other bands are uniform.  With an iron ring present its inner
    radius must clear the magnet corners so the polygon-to-circle transition
    band has positive width everywhere.
    """
    if h <= 0.0:
        raise HalbachError(f"target edge length must be positive, got {h}")
    r_i = array.inner_radius
    r_o = array.outer_radius
    solid_outer = array.iron_outer if array.has_iron else r_o
    if truncation_radius is None:
        truncation_radius = 3.0 * solid_outer
    if truncation_radius <= solid_outer:
        raise HalbachError(
            f"truncation radius {truncation_radius} must exceed the outermost "
            f"solid radius {solid_outer}"
        )
    if array.has_iron and array.iron_inner <= r_o:
        raise HalbachError(
            "meshing needs clearance between the magnet corners and the iron ring"
        )

    half_sector = math.radians(SECTOR_DEG / 2.0)
    sector = math.radians(SECTOR_DEG)
    r_mid = 0.5 * (r_i + r_o)
    m_a = max(2, math.ceil(r_mid * sector / h))
    n_theta = N_BLOCKS * m_a
    theta = -half_sector + sector * np.arange(n_theta) / m_a
    # signed angle to the nearest sector center, the argument of the chord law
    delta = np.mod(theta + half_sector, sector) - half_sector

    poly_i = _chord_profile(r_i, half_sector)
    poly_o = _chord_profile(r_o, half_sector)

    def uniform(width):
        n = max(1, math.ceil(width / h))
        return (np.arange(n) + 1.0) / n

    # bands: (inner profile, outer profile, level fractions, region rule)
    bands = [(lambda d: np.zeros_like(d), poly_i, uniform(r_i * math.cos(half_sector)), "air")]
    bands.append((poly_i, poly_o, uniform(r_o - r_i), "block"))
    if array.has_iron:
        bands.append((poly_o, _circle_profile(array.iron_inner), uniform(array.iron_inner - r_o), "air"))
        bands.append(
            (
                _circle_profile(array.iron_inner),
                _circle_profile(array.iron_outer),
                uniform(array.iron_outer - array.iron_inner),
                "iron",
            )
        )
        bands.append(
            (
                _circle_profile(array.iron_outer),
                _circle_profile(truncation_radius),
                _graded_fractions(truncation_radius - array.iron_outer, h),
                "air",
            )
        )
    else:
        bands.append(
            (
                poly_o,
                _circle_profile(truncation_radius),
                _graded_fractions(truncation_radius - r_o, h),
                "air",
            )
        )

    directions = np.column_stack([np.cos(theta), np.sin(theta)])
    level_radii = []
    level_regions = []  # region rule of the band below each level
    for inner, outer, fractions, region in bands:
        lo = inner(delta)
        hi = outer(delta)
        if np.any(hi <= lo):
            raise HalbachError("mesh bands must have positive width everywhere")
        for t in fractions:
            level_radii.append((1.0 - t) * lo + t * hi)
            level_regions.append(region)
    n_levels = len(level_radii)

    nodes = np.empty((1 + n_levels * n_theta, 2))
    nodes[0] = 0.0
    for ell, radii in enumerate(level_radii):
        nodes[1 + ell * n_theta : 1 + (ell + 1) * n_theta] = radii[:, None] * directions

    def node_index(ell, k):
        # ell = 0 is the center node; levels are 1-based here
        return 1 + (ell - 1) * n_theta + (k % n_theta)

    sector_of = np.arange(n_theta) // m_a  # angular cell k lies in block sector_of[k]+1

    def region_tag(rule, k):
        if rule == "air":
            return REGION_AIR
        if rule == "iron":
            return REGION_IRON
        return int(sector_of[k]) + 1

    triangles = []
    regions = []
    # center fan, inside the bore
    for k in range(n_theta):
        triangles.append((0, node_index(1, k), node_index(1, k + 1)))
        regions.append(region_tag(level_regions[0], k))
    # quad strips between consecutive levels, split along a fixed diagonal
    for ell in range(1, n_levels):
        rule = level_regions[ell]
        for k in range(n_theta):
            a = node_index(ell, k)
            b = node_index(ell, k + 1)
            c = node_index(ell + 1, k + 1)
            d = node_index(ell + 1, k)
            tag = region_tag(rule, k)
            # both CCW, sharing the fixed diagonal a-c
            triangles.append((a, c, b))
            triangles.append((a, d, c))
            regions.append(tag)
            regions.append(tag)

    boundary = np.arange(1 + (n_levels - 1) * n_theta, 1 + n_levels * n_theta)
    return Mesh2D(
        nodes=nodes,
        triangles=np.array(triangles, dtype=np.int32),
        regions=np.array(regions, dtype=np.int16),
        boundary_nodes=boundary,
    )


# ---------------------------------------------------------------------------
# JSON import/export
# ---------------------------------------------------------------------------

def mesh_to_json(mesh: Mesh2D) -> str:
    payload = {
        "format_version": MESH_FORMAT_VERSION,
        "nodes": mesh.nodes.tolist(),
        "triangles": mesh.triangles.tolist(),
        "regions": mesh.regions.tolist(),
        "boundary_nodes": mesh.boundary_nodes.tolist(),
    }
    return json.dumps(payload, separators=(",", ":"))


def mesh_from_json(text: str) -> Mesh2D:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HalbachError(f"invalid mesh JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise HalbachError("mesh JSON must be an object")
    version = payload.get("format_version")
    if version != MESH_FORMAT_VERSION:
        raise HalbachError(f"unsupported mesh format version {version!r}")
    missing = {"nodes", "triangles", "regions", "boundary_nodes"} - payload.keys()
    if missing:
        raise HalbachError(f"mesh JSON missing keys: {sorted(missing)}")
    return Mesh2D(
        nodes=np.array(payload["nodes"], dtype=float),
        triangles=np.array(payload["triangles"], dtype=np.int32),
        regions=np.array(payload["regions"], dtype=np.int16),
        boundary_nodes=np.array(payload["boundary_nodes"], dtype=np.int64),
    )


def save_mesh(mesh: Mesh2D, path) -> None:
    with open(path, "w") as fh:
        fh.write(mesh_to_json(mesh))


def load_mesh(path) -> Mesh2D:
    with open(path) as fh:
        return mesh_from_json(fh.read())
