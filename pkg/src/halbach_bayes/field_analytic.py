"""Closed-form flux density of uniformly magnetized blocks (mu_r = 1).

A uniformly magnetized polygon (2D) or extruded polygon prism (3D) is
replaced by equivalent magnetic surface charge sigma = M . n on its boundary.
The resulting H field has exact antiderivatives: per-edge log/arctangent
terms in 2D, and per-facet edge-log plus solid-angle terms in 3D.  Outside
the block B = mu0 H; inside (only on request) B = mu0 (H + M).

The linear forward model stacks the per-unit-component responses of every
block into a dense matrix acting on the flat magnetization vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import MU0
from .errors import HalbachError
from .geometry import BlockPolygon, HalbachArray, N_BLOCKS, ParameterLayout, ParameterVector
from .observables import FourierCircleSpec, ObservableSpec, PointFieldSpec
from .utils import parallel_map

#: points closer than this to a block surface are rejected [m]
BOUNDARY_TOL = 1e-9


# ---------------------------------------------------------------------------
# 2D kernels
# ---------------------------------------------------------------------------

def _edge_unit_fields_2d(vertices: np.ndarray, points: np.ndarray) -> np.ndarray:
    """H at ``points`` per unit charge density on each polygon edge.

    Returns an (n_edges, n_points, 2) array.  Edge e runs from vertex e to
    vertex e+1; the closed form is
    H = (1 / 2 pi) (t_hat ln(R_A / R_B) + n_hat beta) with beta the signed
    angle subtended by the edge and n_hat the CCW rotation of t_hat.
    """
    v = np.asarray(vertices, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n_edges = len(v)
    out = np.empty((n_edges, len(pts), 2))
    for e in range(n_edges):
        a3 = v[e]
        b3 = v[(e + 1) % n_edges]
        t = b3 - a3
        t = t / np.hypot(*t)
        n_ccw = np.array([-t[1], t[0]])
        ra = a3[None, :] - pts
        rb = b3[None, :] - pts
        Ra = np.hypot(ra[:, 0], ra[:, 1])
        Rb = np.hypot(rb[:, 0], rb[:, 1])
        cross = ra[:, 0] * rb[:, 1] - ra[:, 1] * rb[:, 0]
        dot = ra[:, 0] * rb[:, 0] + ra[:, 1] * rb[:, 1]
        beta = np.arctan2(cross, dot)
        log_ratio = np.log(Ra / Rb)
        out[e] = (log_ratio[:, None] * t[None, :] + beta[:, None] * n_ccw[None, :]) / (2.0 * np.pi)
    return out


def _outward_normals_2d(vertices: np.ndarray) -> np.ndarray:
    """Outward unit normals of a CCW polygon, one per edge."""
    v = np.asarray(vertices, dtype=float)
    t = np.roll(v, -1, axis=0) - v
    t = t / np.hypot(t[:, 0], t[:, 1])[:, None]
    return np.c_[t[:, 1], -t[:, 0]]


def field_2d_block(
    polygon: BlockPolygon,
    magnetization: np.ndarray,
    points: np.ndarray,
    allow_inside: bool = False,
) -> np.ndarray:
    """B [T] of one uniformly magnetized cross-section polygon at 2D points.

    Points within ``BOUNDARY_TOL`` of the boundary are rejected.  Interior
    points are rejected unless ``allow_inside`` is set, in which case the
    interior field B = mu0 (H + M) is returned there.
    """
    M = np.asarray(magnetization, dtype=float)
    if M.shape != (2,):
        raise HalbachError("2D magnetization must have shape (2,)")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    single = np.asarray(points).ndim == 1
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise HalbachError("2D evaluation points must have shape (n, 2)")

    near = polygon.edge_distance(pts) <= BOUNDARY_TOL
    if np.any(near):
        raise HalbachError(
            f"points {np.flatnonzero(near).tolist()} lie on the block boundary"
        )
    inside = polygon.contains(pts)
    if np.any(inside) and not allow_inside:
        raise HalbachError(
            f"points {np.flatnonzero(inside).tolist()} lie inside the block"
        )

    sigma = _outward_normals_2d(polygon.vertices) @ M
    unit = _edge_unit_fields_2d(polygon.vertices, pts)
    H = np.einsum("e,epc->pc", sigma, unit)
    B = MU0 * H
    if np.any(inside):
        B[inside] += MU0 * M
    return B[0] if single else B


# ---------------------------------------------------------------------------
# 3D kernels
# ---------------------------------------------------------------------------

def _solid_angle_triangles(verts: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Signed solid angle of the fan-triangulated planar polygon at points."""
    pts = np.atleast_2d(points)
    omega = np.zeros(len(pts))
    v0 = verts[0]
    for i in range(1, len(verts) - 1):
        a3 = v0[None, :] - pts
        b3 = verts[i][None, :] - pts
        c3 = verts[i + 1][None, :] - pts
        la = np.linalg.norm(a3, axis=1)
        lb = np.linalg.norm(b3, axis=1)
        lc = np.linalg.norm(c3, axis=1)
        num = np.einsum("ij,ij->i", a3, np.cross(b3, c3))
        den = (
            la * lb * lc
            + np.einsum("ij,ij->i", a3, b3) * lc
            + np.einsum("ij,ij->i", a3, c3) * lb
            + np.einsum("ij,ij->i", b3, c3) * la
        )
        omega += 2.0 * np.arctan2(num, den)
    return omega


def _charged_polygon_unit_field(verts: np.ndarray, normal: np.ndarray, points: np.ndarray) -> np.ndarray:
    """H at points per unit charge on a planar polygon (CCW about ``normal``).

    Closed form: 4 pi H = sum_e (t_e x n) ln((R_B + s_B) / (R_A + s_A)) - n Omega.
    """
    verts = np.asarray(verts, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    field = np.zeros_like(pts)
    nv = len(verts)
    for e in range(nv):
        a3 = verts[e]
        b3 = verts[(e + 1) % nv]
        t = b3 - a3
        t = t / np.linalg.norm(t)
        m_out = np.cross(t, normal)
        ra = a3[None, :] - pts
        rb = b3[None, :] - pts
        Ra = np.linalg.norm(ra, axis=1)
        Rb = np.linalg.norm(rb, axis=1)
        sa = ra @ t
        sb = rb @ t
        # (R + s)(R - s) equals the squared distance to the edge line, so the
        # ratio can be rewritten with the conjugate pair.  For points near the
        # supporting line beyond vertex B both R + s terms cancel to ~0; the
        # conjugate form stays exact there.
        both_negative = (sa < 0.0) & (sb < 0.0)
        num = np.where(both_negative, Ra - sa, Rb + sb)
        den = np.where(both_negative, Rb - sb, Ra + sa)
        field += np.log(num / den)[:, None] * m_out[None, :]
    field -= _solid_angle_triangles(verts, pts)[:, None] * normal[None, :]
    return field / (4.0 * np.pi)


def _prism_facets(polygon: BlockPolygon, z0: float, z1: float):
    """Yield (vertices, outward normal) for the six facets of an extruded polygon."""
    v2 = polygon.vertices
    normals = _outward_normals_2d(v2)
    nv = len(v2)
    for e in range(nv):
        a2 = v2[e]
        b2 = v2[(e + 1) % nv]
        quad = np.array(
            [
                [a2[0], a2[1], z0],
                [b2[0], b2[1], z0],
                [b2[0], b2[1], z1],
                [a2[0], a2[1], z1],
            ]
        )
        yield quad, np.array([normals[e, 0], normals[e, 1], 0.0])
    top = np.c_[v2, np.full(nv, z1)]
    bottom = np.c_[v2[::-1], np.full(nv, z0)]
    yield top, np.array([0.0, 0.0, 1.0])
    yield bottom, np.array([0.0, 0.0, -1.0])


def _prism_unit_fields(polygon: BlockPolygon, z0: float, z1: float, points: np.ndarray):
    """Per-facet unit-charge H fields and outward normals of a block prism.

    Returns (normals (F, 3), fields (F, n_points, 3)); the H field for
    magnetization M is then sum_f (M . normal_f) fields_f.
    """
    normals = []
    fields = []
    for verts, normal in _prism_facets(polygon, z0, z1):
        normals.append(normal)
        fields.append(_charged_polygon_unit_field(verts, normal, points))
    return np.array(normals), np.array(fields)


def _classify_prism_points(polygon: BlockPolygon, z0: float, z1: float, pts: np.ndarray):
    """(inside, near_boundary) masks of 3D points relative to the prism."""
    xy = pts[:, :2]
    z = pts[:, 2]
    d_lateral = polygon.edge_distance(xy)
    inside_xy = polygon.contains(xy)
    inside_z = (z > z0) & (z < z1)
    d_z = np.minimum(np.abs(z - z0), np.abs(z - z1))
    inside = inside_xy & inside_z

    lateral_out = np.where(inside_xy, 0.0, d_lateral)
    z_out = np.where(inside_z, 0.0, np.maximum(z0 - z, z - z1))
    outside_dist = np.hypot(lateral_out, z_out)
    inside_dist = np.minimum(d_lateral, d_z)
    dist = np.where(inside, inside_dist, outside_dist)
    return inside, dist <= BOUNDARY_TOL


def field_3d_block(
    polygon: BlockPolygon,
    z_span: tuple[float, float],
    magnetization: np.ndarray,
    points: np.ndarray,
    allow_inside: bool = False,
) -> np.ndarray:
    """B [T] of one uniformly magnetized block prism at 3D points.

    The prism is the cross-section polygon extruded over ``z_span``.  Points
    on the surface are rejected; interior points only pass with
    ``allow_inside`` and then get B = mu0 (H + M).
    """
    M = np.asarray(magnetization, dtype=float)
    if M.shape != (3,):
        raise HalbachError("3D magnetization must have shape (3,)")
    z0, z1 = float(z_span[0]), float(z_span[1])
    if not z0 < z1:
        raise HalbachError("z span must be increasing")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    single = np.asarray(points).ndim == 1
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise HalbachError("3D evaluation points must have shape (n, 3)")

    inside, near = _classify_prism_points(polygon, z0, z1, pts)
    if np.any(near):
        raise HalbachError(
            f"points {np.flatnonzero(near).tolist()} lie on the block surface"
        )
    if np.any(inside) and not allow_inside:
        raise HalbachError(
            f"points {np.flatnonzero(inside).tolist()} lie inside the block"
        )

    normals, unit = _prism_unit_fields(polygon, z0, z1, pts)
    H = np.einsum("f,fpc->pc", normals @ M, unit)
    B = MU0 * H
    if np.any(inside):
        B[inside] += MU0 * M
    return B[0] if single else B


# ---------------------------------------------------------------------------
# linear forward operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearOperator:
    """Dense linear map from flat magnetization vectors to observable values."""

    matrix: np.ndarray
    layout: ParameterLayout
    spec: ObservableSpec

    def __post_init__(self):
        mat = np.ascontiguousarray(np.asarray(self.matrix, dtype=float))
        if mat.ndim != 2 or mat.shape[1] != self.layout.dim:
            raise HalbachError(
                f"operator matrix shape {mat.shape} does not match layout dim"
            )
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def apply(self, params) -> np.ndarray:
        """Observable vector for a parameter state (exact linearity)."""
        if isinstance(params, ParameterVector):
            if params.layout != self.layout:
                raise HalbachError("parameter layout does not match operator layout")
            vals = params.values
        else:
            vals = np.asarray(params, dtype=float)
            if vals.shape != (self.layout.dim,):
                raise HalbachError(
                    f"parameter vector shape {vals.shape} != ({self.layout.dim},)"
                )
        return self.matrix @ vals

    def __call__(self, params) -> np.ndarray:
        return self.apply(params)


def perturbation_response(operator: LinearOperator, delta) -> np.ndarray:
    """Observable change for a magnetization perturbation (directional derivative).

    For a linear forward model the response is exact: H(p + delta) - H(p)
    = H(delta) for every base state p.
    """
    return operator.apply(delta)


def _check_points_in_air(array: HalbachArray, spec: ObservableSpec, ndim: int) -> np.ndarray:
    pts = spec.eval_points()
    if pts.shape[1] != ndim:
        raise HalbachError(
            f"spec points are {pts.shape[1]}D but the layout implies {ndim}D"
        )
    if isinstance(spec, FourierCircleSpec) and spec.radius >= array.inner_radius:
        raise HalbachError(
            f"circle radius {spec.radius} must lie strictly inside the bore "
            f"(inner radius {array.inner_radius})"
        )
    xy = pts[:, :2]
    for i in range(1, N_BLOCKS + 1):
        poly = array.block(i)
        if ndim == 2:
            bad = poly.contains(xy) | (poly.edge_distance(xy) <= BOUNDARY_TOL)
            if np.any(bad):
                raise HalbachError(
                    f"evaluation points {np.flatnonzero(bad).tolist()} intersect block {i}"
                )
        else:
            for j in range(1, array.n_rings + 1):
                z0, z1 = array.ring_z_span(j)
                inside, near = _classify_prism_points(poly, z0, z1, pts)
                bad = inside | near
                if np.any(bad):
                    raise HalbachError(
                        f"evaluation points {np.flatnonzero(bad).tolist()} intersect "
                        f"block {i} of ring {j}"
                    )
    if array.has_iron:
        r = np.hypot(xy[:, 0], xy[:, 1])
        radial_overlap = (r >= array.iron_inner - BOUNDARY_TOL) & (
            r <= array.iron_outer + BOUNDARY_TOL
        )
        if ndim == 3:
            radial_overlap &= np.abs(pts[:, 2]) <= array.half_length + BOUNDARY_TOL
        if np.any(radial_overlap):
            raise HalbachError(
                f"evaluation points {np.flatnonzero(radial_overlap).tolist()} "
                "intersect the iron yoke"
            )
    return pts


def assemble_linear_operator(
    array: HalbachArray, spec: ObservableSpec, layout: ParameterLayout
) -> LinearOperator:
    """Stack per-unit-component block responses into the dense forward matrix.

    Column ``layout.flat_index(i, j, c)`` holds the observable values produced
    by unit magnetization along component c of block i in ring j.  A
    2-component layout selects the 2D cross-section model (single ring); a
    3-component layout uses ring prisms and requires ``layout.n_rings`` to
    match the array.
    """
    if layout.n_components == 2:
        if layout.n_rings != 1:
            raise HalbachError("the 2D cross-section model uses a single-ring layout")
        ndim = 2
    else:
        if layout.n_rings != array.n_rings:
            raise HalbachError(
                f"layout has {layout.n_rings} rings but the array has {array.n_rings}"
            )
        ndim = 3

    pts = _check_points_in_air(array, spec, ndim)
    matrix = np.empty((spec.n_values, layout.dim))

    if ndim == 2:
        def fill_block(i: int) -> None:
            poly = array.block(i)
            sigma_per_comp = _outward_normals_2d(poly.vertices)  # (E, 2)
            unit = _edge_unit_fields_2d(poly.vertices, pts)  # (E, P, 2)
            for c in range(2):
                B = MU0 * np.einsum("e,epq->pq", sigma_per_comp[:, c], unit)
                matrix[:, layout.flat_index(i, 1, c)] = spec.values_from_field(B)

        parallel_map(fill_block, range(1, N_BLOCKS + 1))
    else:
        def fill_prism(ij: tuple[int, int]) -> None:
            i, j = ij
            poly = array.block(i)
            normals, unit = _prism_unit_fields(poly, *array.ring_z_span(j), pts)
            for c in range(3):
                B = MU0 * np.einsum("f,fpq->pq", normals[:, c], unit)
                matrix[:, layout.flat_index(i, j, c)] = spec.values_from_field(B)

        pairs = [(i, j) for j in range(1, array.n_rings + 1) for i in range(1, N_BLOCKS + 1)]
        parallel_map(fill_prism, pairs)

    return LinearOperator(matrix=matrix, layout=layout, spec=spec)
