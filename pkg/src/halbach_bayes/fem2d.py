"""2D magnetostatic finite elements for the magnet cross-section.

Scalar vector-potential formulation: B = (dA/dy, -dA/dx), Galerkin P1 on
the triangulations of :mod:`.mesh`, magnetization as an element-wise source
int M . curl v dx.  Air and magnet regions have constant reluctivity; an
optional iron ring carries a field-dependent reluctivity nu(|B|) handled by
damped Picard iteration.  The Gateaux derivative of the solution map is the
same system linearized with the differential reluctivity tensor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from matplotlib.tri import Triangulation
from scipy.interpolate import PchipInterpolator
from scipy.sparse import coo_matrix, csc_matrix
from scipy.sparse.linalg import splu

from .constants import MU0
from .errors import HalbachError
from .geometry import HalbachArray, N_BLOCKS, ParameterLayout
from .mesh import Mesh2D, REGION_AIR, REGION_IRON
from .observables import FourierCircleSpec, ObservableSpec, PointFieldSpec

NU_AIR = 1.0 / MU0

#: Brauer-curve defaults typical of low-carbon steel; artifact values, not
#: fitted to any specific material
BRAUER_K1 = 0.3774
BRAUER_K2 = 2.97
BRAUER_K3 = 388.33

PICARD_RELAXATION = 0.7
PICARD_TOLERANCE = 1e-8
PICARD_MAX_ITERATIONS = 200


class MaterialCurve:
    """Reluctivity law nu(|B|) of the iron, with its derivative.

    The underlying H(B)-curve is f_HB(s) = nu(s) s; validity requires
    f_HB(0) = 0, f_HB strictly increasing, and nu positive with a finite
    limit at s -> 0.
    """

    def __init__(self, nu, dnu, kind: str, check_to: float = 3.0):
        self._nu = nu
        self._dnu = dnu
        self.kind = kind
        probe = np.linspace(0.0, check_to, 301)
        with np.errstate(all="raise"):
            try:
                nu_probe = self.nu(probe)
                dnu_probe = self.dnu(probe)
            except FloatingPointError as exc:
                raise HalbachError(f"reluctivity curve not evaluable: {exc}") from exc
        if not np.all(np.isfinite(nu_probe)) or not np.all(np.isfinite(dnu_probe)):
            raise HalbachError("reluctivity curve must be finite")
        if np.any(nu_probe <= 0.0):
            raise HalbachError("reluctivity must be positive")
        # dH/dB = nu + s dnu > 0 makes the H(B)-curve strictly increasing
        if np.any(nu_probe + probe * dnu_probe <= 0.0):
            raise HalbachError("H(B)-curve must be strictly increasing")

    def nu(self, s):
        return np.asarray(self._nu(np.asarray(s, dtype=float)), dtype=float)

    def dnu(self, s):
        return np.asarray(self._dnu(np.asarray(s, dtype=float)), dtype=float)

    def f_hb(self, s):
        s = np.asarray(s, dtype=float)
        return self.nu(s) * s

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    @classmethod
    def linear(cls, mu_r: float) -> "MaterialCurve":
        if mu_r <= 0.0:
            raise HalbachError(f"relative permeability must be positive, got {mu_r}")
        nu0 = 1.0 / (MU0 * mu_r)
        return cls(
            nu=lambda s: np.full_like(s, nu0),
            dnu=lambda s: np.zeros_like(s),
            kind="linear",
        )

    @classmethod
    def brauer(
        cls, k1: float = BRAUER_K1, k2: float = BRAUER_K2, k3: float = BRAUER_K3
    ) -> "MaterialCurve":
        """nu(s) = k1 exp(k2 s^2) + k3."""
        if k1 < 0.0 or k2 < 0.0 or k3 <= 0.0:
            raise HalbachError("Brauer coefficients must satisfy k1, k2 >= 0 and k3 > 0")
        return cls(
            nu=lambda s: k1 * np.exp(k2 * s * s) + k3,
            dnu=lambda s: 2.0 * k1 * k2 * s * np.exp(k2 * s * s),
            kind="brauer",
        )

    @classmethod
    def from_samples(cls, b: np.ndarray, h: np.ndarray) -> "MaterialCurve":
        """Monotone-cubic interpolation of sampled (B, H) pairs.

        The curve must start at the origin and be strictly increasing; it is
        extended linearly with the end slope beyond the last sample.
        """
        b = np.asarray(b, dtype=float)
        h = np.asarray(h, dtype=float)
        if b.ndim != 1 or b.shape != h.shape or len(b) < 3:
            raise HalbachError("need matching 1-D B and H arrays with at least 3 samples")
        if b[0] != 0.0 or h[0] != 0.0:
            raise HalbachError("sampled H(B)-curve must start at the origin")
        if np.any(np.diff(b) <= 0.0) or np.any(np.diff(h) <= 0.0):
            raise HalbachError("sampled H(B)-curve must be strictly increasing")
        f = PchipInterpolator(b, h, extrapolate=False)
        df = f.derivative()
        b_max = b[-1]
        h_max = h[-1]
        end_slope = float(df(b_max))
        slope0 = float(df(0.0))
        # nu(0) = H'(0); half the second derivative is the slope of nu there
        curv0 = 0.5 * float(df.derivative()(0.0))
        tiny = 1e-12 * b_max

        def h_of(s):
            inside = s <= b_max
            return np.where(inside, f(np.minimum(s, b_max)), h_max + end_slope * (s - b_max))

        def dh_of(s):
            inside = s <= b_max
            return np.where(inside, df(np.minimum(s, b_max)), end_slope)

        def nu(s):
            s = np.asarray(s, dtype=float)
            safe = np.maximum(s, tiny)
            return np.where(s > tiny, h_of(safe) / safe, slope0)

        def dnu(s):
            s = np.asarray(s, dtype=float)
            safe = np.maximum(s, tiny)
            return np.where(s > tiny, (dh_of(safe) * safe - h_of(safe)) / safe**2, curv0)

        return cls(nu=nu, dnu=dnu, kind="sampled", check_to=2.0 * b_max)


def load_material_csv(path) -> MaterialCurve:
    """Read a sampled H(B)-curve from CSV with header ``B_T,H_A_per_m``."""
    b_vals, h_vals = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise HalbachError(f"{path}: empty file") from None
        if tuple(c.strip() for c in header) != ("B_T", "H_A_per_m"):
            raise HalbachError(f"{path}: bad header {header!r}, expected B_T,H_A_per_m")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise HalbachError(f"{path}: line {line_no}: expected 2 fields")
            try:
                b_vals.append(float(row[0]))
                h_vals.append(float(row[1]))
            except ValueError as exc:
                raise HalbachError(f"{path}: line {line_no}: {exc}") from exc
    return MaterialCurve.from_samples(np.array(b_vals), np.array(h_vals))


@dataclass(frozen=True)
class FemSolution:
    """Nodal A_z values plus the nonlinear solve's convergence record."""

    a_z: np.ndarray
    iterations: int
    final_residual: float
    residual_history: tuple

    def __post_init__(self):
        a_z = np.asarray(self.a_z, dtype=float)
        a_z.setflags(write=False)
        object.__setattr__(self, "a_z", a_z)
        object.__setattr__(self, "residual_history", tuple(self.residual_history))


class FemContext:
    """Mesh plus materials with everything reusable across solves precomputed.

    Holds P1 gradients, the fixed (air + magnet) stiffness part, the sparse
    pattern of the iron part, the magnetization-to-load map, and the bore
    point locator.  With no iron the system matrix is constant and its
    factorization is cached, making repeated solves a single triangular
    back-substitution.  A context is safe to share across threads unless
    ``warm_start`` is enabled, which adds per-context solver state.
    """

    def __init__(
        self,
        mesh: Mesh2D,
        array: HalbachArray,
        layout: ParameterLayout,
        iron_curve: MaterialCurve | None = None,
        warm_start: bool = False,
    ):
        if layout.n_components != 2 or layout.n_rings != 1:
            raise HalbachError("the 2D solver uses a single-ring, 2-component layout")
        has_iron_elements = bool(np.any(mesh.regions == REGION_IRON))
        if has_iron_elements and iron_curve is None:
            raise HalbachError("mesh has iron elements but no material curve was given")
        self.mesh = mesh
        self.array = array
        self.layout = layout
        self.iron_curve = iron_curve if has_iron_elements else None
        self.warm_start = warm_start
        self._last_a = None

        nodes = mesh.nodes
        tris = mesh.triangles
        x = nodes[tris, 0]
        y = nodes[tris, 1]
        # P1 shape gradients: dphi/dx = b/(2A), dphi/dy = c/(2A)
        self.b_coef = np.stack(
            [y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1
        )
        self.c_coef = np.stack(
            [x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1
        )
        self.areas = mesh.triangle_areas()

        boundary = set(mesh.boundary_nodes.tolist())
        self.free = np.array(
            [n for n in range(mesh.n_nodes) if n not in boundary], dtype=np.int64
        )
        pos = np.full(mesh.n_nodes, -1, dtype=np.int64)
        pos[self.free] = np.arange(len(self.free))
        self._free_pos = pos

        iron_mask = mesh.regions == REGION_IRON
        self._iron_elements = np.nonzero(iron_mask)[0]
        nu_fixed = np.where(
            mesh.regions == REGION_AIR, NU_AIR, NU_AIR / array.mu_r
        )
        nu_fixed[iron_mask] = 0.0
        self._k_fixed = self._assemble_isotropic(nu_fixed)
        if self.iron_curve is not None:
            rows, cols, unit = self._element_matrix_pattern(self._iron_elements)
            self._iron_rows = rows
            self._iron_cols = cols
            self._iron_unit = unit
            self._fixed_lu = None
        else:
            self._fixed_lu = splu(self._k_fixed)

        self._rhs_map = self._assemble_rhs_map()
        self._tri_finder = None
        self._node_patch_areas = None

    # -- assembly ----------------------------------------------------------

    def _element_matrix_pattern(self, elements):
        """COO pattern and nu-independent entries of the listed elements.

        The isotropic element stiffness is (b_a b_c + c_a c_c) / (4 area);
        multiplying by a per-element nu and summing duplicate coordinates
        assembles the matrix.
        """
        tris = self.mesh.triangles[elements]
        b = self.b_coef[elements]
        c = self.c_coef[elements]
        inv4a = 1.0 / (4.0 * self.areas[elements])
        entries = (
            b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]
        ) * inv4a[:, None, None]
        rows = self._free_pos[np.repeat(tris, 3, axis=1).ravel()]
        cols = self._free_pos[np.tile(tris, (1, 3)).ravel()]
        data = entries.ravel()
        keep = (rows >= 0) & (cols >= 0)
        return rows[keep], cols[keep], (data[keep], keep)

    def _assemble_isotropic(self, nu_per_element) -> csc_matrix:
        all_elements = np.arange(self.mesh.n_triangles)
        rows, cols, (unit, keep) = self._element_matrix_pattern(all_elements)
        scale = np.repeat(nu_per_element, 9)[keep]
        n = len(self.free)
        return coo_matrix((unit * scale, (rows, cols)), shape=(n, n)).tocsc()

    def _iron_matrix(self, nu_per_iron_element) -> csc_matrix:
        _, keep = self._iron_unit
        scale = np.repeat(nu_per_iron_element, 9)[keep]
        n = len(self.free)
        return coo_matrix(
            (self._iron_unit[0] * scale, (self._iron_rows, self._iron_cols)),
            shape=(n, n),
        ).tocsc()

    def _assemble_rhs_map(self):
        """Sparse map from flat 2D parameters to the free-node load vector.

        Element load from constant magnetization: f_a = (Mx c_a - My b_a)/2.
        """
        rows, cols, data = [], [], []
        for i in range(1, N_BLOCKS + 1):
            elements = np.nonzero(self.mesh.regions == i)[0]
            if len(elements) == 0:
                raise HalbachError(f"mesh has no elements tagged for block {i}")
            tris = self.mesh.triangles[elements]
            free_rows = self._free_pos[tris.ravel()]
            keep = free_rows >= 0
            col_x = self.layout.flat_index(i, 1, 0)
            col_y = self.layout.flat_index(i, 1, 1)
            cx = 0.5 * self.c_coef[elements].ravel()
            bx = -0.5 * self.b_coef[elements].ravel()
            rows.extend([free_rows[keep], free_rows[keep]])
            cols.extend([np.full(keep.sum(), col_x), np.full(keep.sum(), col_y)])
            data.extend([cx[keep], bx[keep]])
        n = len(self.free)
        return coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, self.layout.dim),
        ).tocsr()

    # -- solving -----------------------------------------------------------

    def _element_field(self, a_z: np.ndarray, elements) -> np.ndarray:
        """Per-element constant B = (dA/dy, -dA/dx)."""
        tris = self.mesh.triangles[elements]
        vals = a_z[tris]
        inv2a = 1.0 / (2.0 * self.areas[elements])
        bx = (vals * self.c_coef[elements]).sum(axis=1) * inv2a
        by = -(vals * self.b_coef[elements]).sum(axis=1) * inv2a
        return np.column_stack([bx, by])

    def _expand(self, a_free: np.ndarray) -> np.ndarray:
        a_z = np.zeros(self.mesh.n_nodes)
        a_z[self.free] = a_free
        return a_z

    def solve_magnetostatic(self, p) -> FemSolution:
        """Solve the (possibly nonlinear) magnetostatic problem for p.

        Linear configurations solve once against the cached factorization.
        With iron, damped Picard iteration updates the iron reluctivity from
        the current field until the relative nonlinear residual drops below
        tolerance.
        """
        values = np.asarray(getattr(p, "values", p), dtype=float)
        if values.shape != (self.layout.dim,):
            raise HalbachError(
                f"parameter vector must have shape ({self.layout.dim},), got {values.shape}"
            )
        rhs = self._rhs_map @ values
        rhs_norm = float(np.linalg.norm(rhs))

        if self.iron_curve is None:
            a_free = self._fixed_lu.solve(rhs)
            residual = float(np.linalg.norm(self._k_fixed @ a_free - rhs))
            rel = residual / rhs_norm if rhs_norm > 0.0 else residual
            return FemSolution(
                a_z=self._expand(a_free),
                iterations=1,
                final_residual=rel,
                residual_history=(rel,),
            )

        if self.warm_start and self._last_a is not None:
            a_free = self._last_a.copy()
        else:
            a_free = np.zeros(len(self.free))
        history = []
        converged = False
        for iteration in range(1, PICARD_MAX_ITERATIONS + 1):
            field_iron = self._element_field(self._expand(a_free), self._iron_elements)
            s = np.hypot(field_iron[:, 0], field_iron[:, 1])
            k = self._k_fixed + self._iron_matrix(self.iron_curve.nu(s))
            residual = float(np.linalg.norm(k @ a_free - rhs))
            rel = residual / rhs_norm if rhs_norm > 0.0 else residual
            history.append(rel)
            if rel < PICARD_TOLERANCE:
                converged = True
                break
            a_new = splu(k).solve(rhs)
            a_free = (1.0 - PICARD_RELAXATION) * a_free + PICARD_RELAXATION * a_new
        if not converged:
            raise HalbachError(
                f"Picard iteration did not reach {PICARD_TOLERANCE} in "
                f"{PICARD_MAX_ITERATIONS} iterations; residual history tail: "
                f"{[f'{r:.3e}' for r in history[-5:]]}"
            )
        if self.warm_start:
            self._last_a = a_free.copy()
        return FemSolution(
            a_z=self._expand(a_free),
            iterations=len(history),
            final_residual=history[-1],
            residual_history=tuple(history),
        )

    def solve_sensitivity(self, base: FemSolution, delta_p) -> FemSolution:
        """Directional derivative of the solution map at ``base``.

        The system is linearized with the differential reluctivity tensor
        nu(s) I + (nu'(s)/s) B Bt in the iron, evaluated at the base field;
        elsewhere the matrix is unchanged.  For linear materials this is
        exactly the forward solve applied to the perturbation.
        """
        values = np.asarray(getattr(delta_p, "values", delta_p), dtype=float)
        if values.shape != (self.layout.dim,):
            raise HalbachError(
                f"perturbation must have shape ({self.layout.dim},), got {values.shape}"
            )
        rhs = self._rhs_map @ values
        if self.iron_curve is None:
            return FemSolution(
                a_z=self._expand(self._fixed_lu.solve(rhs)),
                iterations=1,
                final_residual=0.0,
                residual_history=(0.0,),
            )
        field_iron = self._element_field(base.a_z, self._iron_elements)
        s = np.hypot(field_iron[:, 0], field_iron[:, 1])
        k = self._k_fixed + self._iron_tensor_matrix(field_iron, s)
        try:
            a_free = splu(k).solve(rhs)
        except RuntimeError as exc:
            raise HalbachError(f"linearized system is singular: {exc}") from exc
        return FemSolution(
            a_z=self._expand(a_free),
            iterations=1,
            final_residual=0.0,
            residual_history=(0.0,),
        )

    def _iron_tensor_matrix(self, field_iron: np.ndarray, s: np.ndarray) -> csc_matrix:
        """Iron stiffness with the anisotropic differential reluctivity.

        Entry pattern: (curl phi_a)t D (curl phi_c) * area with
        curl phi = (c, -b)/(2 area) and D = nu I + (dnu/s) B Bt; the dyadic
        coefficient is finite at s = 0 because dnu vanishes linearly there.
        """
        nu = self.iron_curve.nu(s)
        dnu = self.iron_curve.dnu(s)
        with np.errstate(invalid="ignore", divide="ignore"):
            dyadic = np.where(s > 0.0, dnu / np.maximum(s, 1e-300), 0.0)
        elements = self._iron_elements
        b = self.b_coef[elements]
        c = self.c_coef[elements]
        inv4a = 1.0 / (4.0 * self.areas[elements])
        bx_, by_ = field_iron[:, 0], field_iron[:, 1]
        d11 = nu + dyadic * bx_ * bx_
        d12 = dyadic * bx_ * by_
        d22 = nu + dyadic * by_ * by_
        # curl phi_a = (c_a, -b_a)/(2A): quadratic form in (c, -b)
        entries = (
            d11[:, None, None] * c[:, :, None] * c[:, None, :]
            - d12[:, None, None] * (c[:, :, None] * b[:, None, :] + b[:, :, None] * c[:, None, :])
            + d22[:, None, None] * b[:, :, None] * b[:, None, :]
        ) * inv4a[:, None, None]
        tris = self.mesh.triangles[elements]
        rows = self._free_pos[np.repeat(tris, 3, axis=1).ravel()]
        cols = self._free_pos[np.tile(tris, (1, 3)).ravel()]
        data = entries.ravel()
        keep = (rows >= 0) & (cols >= 0)
        n = len(self.free)
        return coo_matrix((data[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsc()

    # -- field evaluation ----------------------------------------------------

    def _finder(self):
        if self._tri_finder is None:
            tri = Triangulation(
                self.mesh.nodes[:, 0], self.mesh.nodes[:, 1], self.mesh.triangles
            )
            self._tri_finder = tri.get_trifinder()
        return self._tri_finder

    def _recovered_nodal_field(self, a_z: np.ndarray) -> np.ndarray:
        """Area-weighted patch average of the element fields at the nodes."""
        all_elements = np.arange(self.mesh.n_triangles)
        field_e = self._element_field(a_z, all_elements)
        tris = self.mesh.triangles
        weights = np.repeat(self.areas, 3)
        nodal = np.zeros((self.mesh.n_nodes, 2))
        np.add.at(nodal[:, 0], tris.ravel(), weights * np.repeat(field_e[:, 0], 3))
        np.add.at(nodal[:, 1], tris.ravel(), weights * np.repeat(field_e[:, 1], 3))
        if self._node_patch_areas is None:
            patch = np.zeros(self.mesh.n_nodes)
            np.add.at(patch, tris.ravel(), weights)
            self._node_patch_areas = patch
        return nodal / self._node_patch_areas[:, None]

    def field_at(self, solution: FemSolution, points, recover: bool = True) -> np.ndarray:
        """B at the given 2D points, from P1 gradients of the solution.

        ``recover`` interpolates patch-averaged nodal values (one smoothing
        pass) instead of returning the raw element constant.
        """
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise HalbachError("points must be an (n, 2) array")
        containing = np.asarray(self._finder()(pts[:, 0], pts[:, 1]))
        if np.any(containing < 0):
            bad = pts[containing < 0][0]
            raise HalbachError(f"point {bad.tolist()} lies outside the mesh")
        if not recover:
            all_field = self._element_field(solution.a_z, containing)
            return all_field
        nodal = self._recovered_nodal_field(solution.a_z)
        tris = self.mesh.triangles[containing]
        corners = self.mesh.nodes[tris]
        lam = _barycentric(corners, pts)
        return np.einsum("pk,pkc->pc", lam, nodal[tris])

    def forward(self, spec: ObservableSpec):
        """Observable map p -> q as a plain callable for the samplers."""
        _check_spec_2d(spec)
        eval_points = spec.eval_points()

        def apply(p: np.ndarray) -> np.ndarray:
            solution = self.solve_magnetostatic(p)
            field = self.field_at(solution, eval_points)
            return spec.values_from_field(field)

        return apply


def _barycentric(corners: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    v0 = b - a
    v1 = c - a
    v2 = pts - a
    den = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / den
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / den
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def _check_spec_2d(spec: ObservableSpec) -> None:
    if isinstance(spec, PointFieldSpec) and spec.ndim != 2:
        raise HalbachError("the 2D forward model needs 2D observation points")
    if isinstance(spec, FourierCircleSpec) and spec.ndim != 2:
        raise HalbachError("the 2D forward model needs a 2D Fourier specification")


def fem_forward(p, spec: ObservableSpec, context: FemContext) -> np.ndarray:
    """Observable vector for parameters p under the FE forward model."""
    return context.forward(spec)(np.asarray(getattr(p, "values", p), dtype=float))
