"""Magnetization priors from per-block coil measurements.

Helmholtz-coil measurements give one dipole moment vector per block and ring.
Dividing by block volume yields magnetization samples; per block *type* (the
16 cross-section positions) the sample mean and unbiased sample covariance
over rings define a Gaussian prior which is replicated over rings as a
block-diagonal covariance.  An Anderson-Darling test per type and component
supports the normality assumption.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.stats import norm

from .errors import HalbachError
from .geometry import HalbachArray, N_BLOCKS, ParameterLayout

HELMHOLTZ_HEADER = ("block_i", "ring_j", "mx_Am2", "my_Am2", "mz_Am2", "volume_m3")

#: adjusted Anderson-Darling statistic above this rejects normality at 5%
AD_CRITICAL_5PCT = 0.752


@dataclass(frozen=True)
class HelmholtzRecord:
    """One measured block: dipole moment [A m^2] and volume [m^3]."""

    block_i: int
    ring_j: int
    moment: np.ndarray
    volume: float

    def __post_init__(self):
        if not 1 <= self.block_i <= N_BLOCKS:
            raise HalbachError(f"block index must be in 1..{N_BLOCKS}, got {self.block_i}")
        if self.ring_j < 1:
            raise HalbachError(f"ring index must be >= 1, got {self.ring_j}")
        m = np.asarray(self.moment, dtype=float)
        if m.shape != (3,) or not np.all(np.isfinite(m)):
            raise HalbachError("moment must be a finite 3-vector")
        if not (np.isfinite(self.volume) and self.volume > 0.0):
            raise HalbachError(f"volume must be positive, got {self.volume}")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "moment", m)

    @property
    def magnetization(self) -> np.ndarray:
        """Moment divided by volume [A/m]."""
        return self.moment / self.volume


@dataclass(frozen=True)
class GaussianDensity:
    """A multivariate normal with a cached Cholesky factor of its covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1 or cov.shape != (len(mean), len(mean)):
            raise HalbachError("mean must be (d,) and cov (d, d)")
        scale = np.abs(cov).max()
        if scale == 0.0 or not np.isfinite(scale):
            raise HalbachError("covariance must be finite and nonzero")
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise HalbachError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = cholesky(cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise HalbachError("covariance is not positive definite") from exc
        except Exception as exc:  # scipy raises its own LinAlgError subclass
            raise HalbachError("covariance is not positive definite") from exc
        mean = mean.copy()
        mean.setflags(write=False)
        cov.setflags(write=False)
        chol.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def marginal_std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draws via the cached factor: mean + L xi with xi standard normal."""
        if size is None:
            return self.mean + self.chol @ rng.standard_normal(self.dim)
        xi = rng.standard_normal((size, self.dim))
        return self.mean[None, :] + xi @ self.chol.T

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """Solve L w = x - mean for w (no explicit inverse)."""
        return solve_triangular(self.chol, np.asarray(x, dtype=float) - self.mean, lower=True)

    def log_density_unnormalized(self, x: np.ndarray) -> float:
        w = self.whiten(x)
        return -0.5 * float(w @ w)


# ---------------------------------------------------------------------------
# CSV loading
# ---------------------------------------------------------------------------

def load_helmholtz_csv(path) -> list[HelmholtzRecord]:
    """Read per-block moment measurements from CSV.

    The header must be exactly ``block_i,ring_j,mx_Am2,my_Am2,mz_Am2,volume_m3``.
    All malformed rows are reported together with their line numbers.
    """
    records: list[HelmholtzRecord] = []
    problems: list[str] = []
    seen: dict[tuple[int, int], int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise HalbachError(f"{path}: empty file, expected a header row") from None
        if tuple(h.strip() for h in header) != HELMHOLTZ_HEADER:
            raise HalbachError(
                f"{path}: bad header {header!r}, expected {','.join(HELMHOLTZ_HEADER)}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(HELMHOLTZ_HEADER):
                problems.append(f"line {line_no}: expected {len(HELMHOLTZ_HEADER)} fields")
                continue
            try:
                i = int(row[0])
                j = int(row[1])
                moment = np.array([float(row[2]), float(row[3]), float(row[4])])
                volume = float(row[5])
                record = HelmholtzRecord(block_i=i, ring_j=j, moment=moment, volume=volume)
            except (ValueError, HalbachError) as exc:
                problems.append(f"line {line_no}: {exc}")
                continue
            if (i, j) in seen:
                problems.append(
                    f"line {line_no}: duplicate block/ring ({i}, {j}), "
                    f"first seen on line {seen[(i, j)]}"
                )
                continue
            seen[(i, j)] = line_no
            records.append(record)
    if problems:
        raise HalbachError(f"{path}: " + "; ".join(problems))
    if not records:
        warnings.warn(f"{path}: no data rows", stacklevel=2)
    return records


# ---------------------------------------------------------------------------
# prior fitting
# ---------------------------------------------------------------------------

def _jittered(cov: np.ndarray, mean: np.ndarray, n_samples: int, what: str) -> np.ndarray:
    """Return cov, adding diagonal jitter if its Cholesky fails.

    A sample covariance from n samples has rank at most n-1, so when that is
    below the dimension the matrix is singular by construction and jitter is
    applied without trying a factorization first (rounding can let Cholesky
    slip through).  Jitter is 1e-10 trace/dim; when the trace itself is zero
    (all samples identical) the mean magnitude sets the scale instead so the
    result is still positive definite.
    """
    d = cov.shape[0]
    if n_samples - 1 >= d:
        try:
            cholesky(cov, lower=True)
            return cov
        except Exception:
            pass
    scale = np.trace(cov) / d
    if scale <= 0.0:
        scale = float(mean @ mean) / d
    if scale <= 0.0:
        scale = 1.0
    cov = cov + 1e-10 * scale * np.eye(d)
    try:
        cholesky(cov, lower=True)
    except Exception as exc:
        raise HalbachError(f"{what} is singular even after jitter") from exc
    return cov


def fit_prior(
    records: list[HelmholtzRecord],
    layout: ParameterLayout,
    pooled: bool = False,
) -> GaussianDensity:
    """Per-type Gaussian fit, replicated over rings as a block-diagonal prior.

    Every block type needs at least 3 measured rings.  Covariance blocks that
    are numerically singular (unavoidable when the ring count is at the
    minimum) get a diagonal jitter of 1e-10 trace / dim.  With ``pooled`` the
    per-ring covariance is estimated jointly across all 16 types, capturing
    cross-block correlations; rings stay independent.
    """
    nc = layout.n_components
    by_type: dict[int, list[tuple[int, np.ndarray]]] = {
        i: [] for i in range(1, N_BLOCKS + 1)
    }
    for rec in records:
        by_type[rec.block_i].append((rec.ring_j, rec.magnetization[:nc]))

    means = {}
    stacks = {}
    for i in range(1, N_BLOCKS + 1):
        samples = by_type[i]
        if len(samples) < 3:
            raise HalbachError(
                f"block type {i} has {len(samples)} measurements, need at least 3"
            )
        # sort by ring so the fit is exactly invariant to input record order
        samples.sort(key=lambda item: item[0])
        stack = np.array([mag for _, mag in samples])
        stacks[i] = (np.array([j for j, _ in samples]), stack)
        means[i] = stack.mean(axis=0)

    dim = layout.dim
    mean = np.empty(dim)
    for j in range(1, layout.n_rings + 1):
        for i in range(1, N_BLOCKS + 1):
            mean[layout.slice_of(i, j)] = means[i]

    cov_full = np.zeros((dim, dim))
    if pooled:
        ring_block = _pooled_ring_covariance(stacks, means, nc)
        d = N_BLOCKS * nc
        for j in range(layout.n_rings):
            sl = slice(j * d, (j + 1) * d)
            cov_full[sl, sl] = ring_block
    else:
        for i in range(1, N_BLOCKS + 1):
            _, stack = stacks[i]
            cov = np.atleast_2d(np.cov(stack, rowvar=False, ddof=1))
            cov = _jittered(cov, means[i], len(stack), f"covariance of block type {i}")
            for j in range(1, layout.n_rings + 1):
                sl = layout.slice_of(i, j)
                cov_full[sl, sl] = cov
    return GaussianDensity(mean=mean, cov=cov_full)


def _pooled_ring_covariance(stacks, means, nc: int) -> np.ndarray:
    """Covariance of the full 16-block magnetization vector of one ring.

    Each measured ring that covers all 16 types contributes one sample of
    the 16*nc vector; the per-type means are subtracted first.
    """
    ring_sets = [set(rings.tolist()) for rings, _ in stacks.values()]
    common = sorted(set.intersection(*ring_sets))
    if len(common) < 3:
        raise HalbachError(
            f"pooled covariance needs at least 3 complete rings, found {len(common)}"
        )
    rows = []
    for j in common:
        row = np.empty(N_BLOCKS * nc)
        for i in range(1, N_BLOCKS + 1):
            rings, stack = stacks[i]
            k = int(np.searchsorted(rings, j))
            row[(i - 1) * nc : i * nc] = stack[k] - means[i]
        rows.append(row)
    cov = np.cov(np.array(rows), rowvar=False, ddof=1)
    full_mean = np.concatenate([means[i] for i in range(1, N_BLOCKS + 1)])
    return _jittered(np.atleast_2d(cov), full_mean, len(common), "pooled ring covariance")


# ---------------------------------------------------------------------------
# Anderson-Darling normality test (mean and variance estimated)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AndersonDarlingResult:
    statistic: float
    adjusted_statistic: float
    reject_5pct: bool
    n: int


def anderson_darling(samples: np.ndarray) -> AndersonDarlingResult:
    """A^2 against the normal family, with the small-sample adjustment
    A*^2 = A^2 (1 + 0.75/n + 2.25/n^2); rejection at 5% when A*^2 > 0.752.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1:
        raise HalbachError("samples must be one-dimensional")
    n = len(x)
    if n < 8:
        raise HalbachError(f"need at least 8 samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise HalbachError("samples contain non-finite values")
    std = x.std(ddof=1)
    if std == 0.0:
        raise HalbachError("samples have zero variance")
    w = np.sort((x - x.mean()) / std)
    log_cdf = norm.logcdf(w)
    log_sf = norm.logsf(w)
    k = np.arange(1, n + 1)
    a2 = -n - np.sum((2 * k - 1) * (log_cdf + log_sf[::-1])) / n
    adjusted = a2 * (1.0 + 0.75 / n + 2.25 / n**2)
    return AndersonDarlingResult(
        statistic=float(a2),
        adjusted_statistic=float(adjusted),
        reject_5pct=bool(adjusted > AD_CRITICAL_5PCT),
        n=n,
    )


def normality_by_type(
    records: list[HelmholtzRecord],
) -> dict[tuple[int, str], AndersonDarlingResult]:
    """Anderson-Darling per (block type, magnetization component).

    Types with fewer than 8 measurements are skipped, as are components with
    zero sample variance.
    """
    by_type: dict[int, list[np.ndarray]] = {}
    for rec in records:
        by_type.setdefault(rec.block_i, []).append(rec.magnetization)
    out = {}
    for i in sorted(by_type):
        stack = np.array(by_type[i])
        if len(stack) < 8:
            continue
        for c, name in enumerate(("Mx", "My", "Mz")):
            if stack[:, c].std(ddof=1) == 0.0:
                continue
            out[(i, name)] = anderson_darling(stack[:, c])
    return out


# ---------------------------------------------------------------------------
# synthetic measurement generation
# ---------------------------------------------------------------------------

def synthetic_type_parameters(
    array: HalbachArray,
    seed: int,
    mean_scatter_rel: float = 0.01,
    std_rel: float = 0.005,
) -> tuple[np.ndarray, np.ndarray]:
    """Plausible per-type true means and covariances around the nominal state.

    Type means deviate from nominal by ``mean_scatter_rel`` of the nominal
    magnitude; covariances are diagonal with per-component standard deviations
    near ``std_rel`` of the nominal magnitude.
    """
    from .geometry import nominal_magnetization

    rng = np.random.default_rng(seed)
    means = np.empty((N_BLOCKS, 3))
    covs = np.empty((N_BLOCKS, 3, 3))
    for i in range(1, N_BLOCKS + 1):
        nominal = nominal_magnetization(array, i)
        magnitude = np.linalg.norm(nominal)
        means[i - 1] = nominal + rng.normal(scale=mean_scatter_rel * magnitude, size=3)
        stds = std_rel * magnitude * rng.uniform(0.7, 1.3, size=3)
        covs[i - 1] = np.diag(stds**2)
    return means, covs


def synth_helmholtz(
    array: HalbachArray,
    type_means: np.ndarray,
    type_covs: np.ndarray,
    n_rings: int,
    seed: int,
) -> list[HelmholtzRecord]:
    """Draw per-(block, ring) magnetization from the type Gaussians.

    Means are magnetizations [A/m]; the emitted records carry dipole moments
    (magnetization times block volume).  Deterministic for a fixed seed.
    """
    type_means = np.asarray(type_means, dtype=float)
    type_covs = np.asarray(type_covs, dtype=float)
    if type_means.shape != (N_BLOCKS, 3) or type_covs.shape != (N_BLOCKS, 3, 3):
        raise HalbachError("need a (16, 3) mean array and a (16, 3, 3) covariance array")
    if n_rings < 1:
        raise HalbachError("n_rings must be >= 1")
    rng = np.random.default_rng(seed)
    factors = [_psd_factor(type_covs[i], i + 1) for i in range(N_BLOCKS)]
    records = []
    for j in range(1, n_rings + 1):
        for i in range(1, N_BLOCKS + 1):
            M = type_means[i - 1] + factors[i - 1] @ rng.standard_normal(3)
            vol = array.block_volume(i)
            records.append(
                HelmholtzRecord(block_i=i, ring_j=j, moment=M * vol, volume=vol)
            )
    return records


def _psd_factor(cov: np.ndarray, block_i: int) -> np.ndarray:
    """Square-root factor of a positive semidefinite covariance.

    Semidefinite inputs (a zero covariance pins records at the type mean) are
    allowed, so an eigendecomposition replaces a plain Cholesky.
    """
    if np.abs(cov - cov.T).max() > 1e-12 * max(1.0, np.abs(cov).max()):
        raise HalbachError(f"covariance of block type {block_i} is not symmetric")
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() < -1e-12 * max(1.0, evals.max()):
        raise HalbachError(f"covariance of block type {block_i} is not positive semidefinite")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))
