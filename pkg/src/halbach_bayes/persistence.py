"""Disk formats for matrices, priors, observations, chains, and reports.

One binary container covers every dense matrix (covariances, operator
matrices): a 24-byte header of magic ``HBMX``, format version, row and
column counts, followed by the row-major float64 little-endian payload.
Every binary file gets a sha256 sidecar that loaders verify.

Text outputs are CSV and JSON.  Floating-point values in CSV are printed
with 17 significant digits so parsing restores them bit-exactly; JSON uses
Python's shortest round-trip representation.  Nothing here embeds wall
time, so a rerun with the same config and seed reproduces each file byte
for byte.  Per-run timings belong in the run log, which stays out of the
manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import HalbachError
from .geometry import ParameterLayout
from .harness import ApplicationReport, ValidationReport
from .inference import Chain
from .observables import (
    FieldPoint,
    FourierCircleSpec,
    Observation,
    ObservableSpec,
    PointFieldSpec,
)
from .prior import GaussianDensity, HelmholtzRecord, HELMHOLTZ_HEADER

MATRIX_MAGIC = b"HBMX"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

MANIFEST_NAME = "MANIFEST.json"
RUN_LOG_NAME = "run.log"

OBSERVATION_HEADER = ["kind", "z_m", "index", "value_T", "sigma_T"]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# checksums
# ---------------------------------------------------------------------------

def sha256_of(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_checksum(path) -> Path:
    """Write the shasum-style sidecar ``<path>.sha256``."""
    path = Path(path)
    sidecar = path.with_name(path.name + ".sha256")
    sidecar.write_text(f"{sha256_of(path)}  {path.name}\n")
    return sidecar


def verify_checksum(path) -> None:
    path = Path(path)
    sidecar = path.with_name(path.name + ".sha256")
    if not sidecar.exists():
        raise HalbachError(f"missing checksum sidecar: {sidecar}")
    recorded = sidecar.read_text().split()[0]
    actual = sha256_of(path)
    if recorded != actual:
        raise HalbachError(
            f"checksum mismatch for {path.name}: recorded {recorded[:12]}..., "
            f"file hashes to {actual[:12]}..."
        )


# ---------------------------------------------------------------------------
# binary matrix container
# ---------------------------------------------------------------------------

def save_matrix(path, matrix: np.ndarray) -> Path:
    """Write a 2-D float array with header and checksum sidecar."""
    matrix = np.asarray(matrix, dtype="<f8")
    if matrix.ndim != 2:
        raise HalbachError("only 2-D matrices are persisted")
    path = Path(path)
    header = _HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, *matrix.shape)
    path.write_bytes(header + matrix.tobytes(order="C"))
    write_checksum(path)
    return path


def load_matrix(path, verify: bool = True) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise HalbachError(f"matrix file not found: {path}")
    if verify:
        verify_checksum(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise HalbachError(f"{path.name} is too short to hold a matrix header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise HalbachError(f"{path.name} is not a matrix file (bad magic {magic!r})")
    if version != MATRIX_VERSION:
        raise HalbachError(
            f"{path.name} has format version {version}, this build reads {MATRIX_VERSION}"
        )
    expected = _HEADER.size + 8 * rows * cols
    if len(raw) != expected:
        raise HalbachError(
            f"{path.name} payload is {len(raw)} bytes, header promises {expected}"
        )
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return flat.reshape(rows, cols).astype(float)


# ---------------------------------------------------------------------------
# json helpers
# ---------------------------------------------------------------------------

def _write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise HalbachError(f"file not found: {path}")
    return json.loads(path.read_text())


def _floats_or_nulls(values) -> list:
    return [float(v) if np.isfinite(v) else None for v in np.asarray(values, dtype=float)]


def _nulls_to_nan(values) -> np.ndarray:
    return np.array([np.nan if v is None else float(v) for v in values])


# ---------------------------------------------------------------------------
# gaussian densities
# ---------------------------------------------------------------------------

def save_density(directory, name: str, density: GaussianDensity,
                 layout: ParameterLayout | None = None) -> list[Path]:
    """Write ``<name>.json`` (mean) plus ``<name>_cov.bin`` (covariance)."""
    directory = Path(directory)
    cov_path = save_matrix(directory / f"{name}_cov.bin", density.cov)
    payload = {
        "kind": "gaussian_density",
        "dim": density.dim,
        "mean": [float(v) for v in density.mean],
        "covariance_file": cov_path.name,
        "covariance_sha256": sha256_of(cov_path),
    }
    if layout is not None:
        payload["layout"] = {
            "n_rings": layout.n_rings,
            "n_components": layout.n_components,
        }
    json_path = _write_json(directory / f"{name}.json", payload)
    return [json_path, cov_path]


def load_density(directory, name: str) -> tuple[GaussianDensity, ParameterLayout | None]:
    directory = Path(directory)
    payload = _read_json(directory / f"{name}.json")
    if payload.get("kind") != "gaussian_density":
        raise HalbachError(f"{name}.json does not describe a Gaussian density")
    cov_path = directory / payload["covariance_file"]
    if sha256_of(cov_path) != payload["covariance_sha256"]:
        raise HalbachError(
            f"covariance file {cov_path.name} does not match the hash in {name}.json"
        )
    cov = load_matrix(cov_path)
    mean = np.array(payload["mean"], dtype=float)
    if mean.shape != (payload["dim"],) or cov.shape != (payload["dim"],) * 2:
        raise HalbachError(f"dimensions in {name}.json disagree with the stored arrays")
    layout = None
    if "layout" in payload:
        layout = ParameterLayout(
            n_rings=payload["layout"]["n_rings"],
            n_components=payload["layout"]["n_components"],
        )
    return GaussianDensity(mean=mean, cov=cov), layout


# ---------------------------------------------------------------------------
# helmholtz measurement records
# ---------------------------------------------------------------------------

def save_helmholtz_csv(path, records: list[HelmholtzRecord]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(HELMHOLTZ_HEADER))
        for rec in records:
            writer.writerow(
                [rec.block_i, rec.ring_j]
                + [_fmt(v) for v in rec.moment]
                + [_fmt(rec.volume)]
            )
    return path


# ---------------------------------------------------------------------------
# observable specs and observations
# ---------------------------------------------------------------------------

def spec_to_dict(spec: ObservableSpec) -> dict:
    if isinstance(spec, PointFieldSpec):
        return {
            "kind": "point_field",
            "components": list(spec.components),
            "points": [[float(v) for v in p.position] for p in spec.points],
        }
    if isinstance(spec, FourierCircleSpec):
        return {
            "kind": "fourier_circle",
            "radius": spec.radius,
            "n_harmonics": spec.n_harmonics,
            "n_theta": spec.n_theta,
            "z_positions": list(spec.z_positions),
            "ndim": spec.ndim,
            "convention": spec.convention,
        }
    raise HalbachError(f"cannot serialize spec of type {type(spec).__name__}")


def spec_from_dict(payload: dict) -> ObservableSpec:
    kind = payload.get("kind")
    if kind == "point_field":
        return PointFieldSpec(
            points=tuple(FieldPoint(position=np.array(p, dtype=float))
                         for p in payload["points"]),
            components=tuple(payload["components"]),
        )
    if kind == "fourier_circle":
        return FourierCircleSpec(
            radius=payload["radius"],
            n_harmonics=payload["n_harmonics"],
            n_theta=payload["n_theta"],
            z_positions=tuple(payload["z_positions"]),
            ndim=payload["ndim"],
            convention=payload["convention"],
        )
    raise HalbachError(f"unknown observable spec kind: {kind!r}")


def save_observation(directory, name: str, obs: Observation) -> list[Path]:
    """Write ``<name>.csv`` (one row per value) plus ``<name>_spec.json``."""
    directory = Path(directory)
    csv_path = directory / f"{name}.csv"
    rows = obs.spec.value_rows()
    sigmas = np.sqrt(obs.noise_var)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OBSERVATION_HEADER)
        for (kind, z, index), value, sigma in zip(rows, obs.values, sigmas):
            writer.writerow([kind, _fmt(z), index, _fmt(value), _fmt(sigma)])
    spec_path = _write_json(directory / f"{name}_spec.json", spec_to_dict(obs.spec))
    return [csv_path, spec_path]


def load_observation(directory, name: str) -> Observation:
    directory = Path(directory)
    spec = spec_from_dict(_read_json(directory / f"{name}_spec.json"))
    csv_path = directory / f"{name}.csv"
    if not csv_path.exists():
        raise HalbachError(f"file not found: {csv_path}")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != OBSERVATION_HEADER:
            raise HalbachError(
                f"{csv_path.name} header is {header}, expected {OBSERVATION_HEADER}"
            )
        rows = list(reader)
    expected = spec.value_rows()
    if len(rows) != len(expected):
        raise HalbachError(
            f"{csv_path.name} holds {len(rows)} values, spec needs {len(expected)}"
        )
    values = np.empty(len(rows))
    sigmas = np.empty(len(rows))
    for k, (row, (kind, z, index)) in enumerate(zip(rows, expected)):
        if row[0] != kind or int(row[2]) != index:
            raise HalbachError(
                f"{csv_path.name} row {k + 2}: got ({row[0]}, {row[2]}), "
                f"spec expects ({kind}, {index})"
            )
        values[k] = float(row[3])
        sigmas[k] = float(row[4])
    return Observation(values=values, spec=spec, noise_var=sigmas**2)


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

def save_chain(directory, name: str, chain: Chain) -> list[Path]:
    """Write every visited state to ``<name>.csv`` plus a metadata JSON.

    The first CSV row is the initial state; its ``accepted`` cell is empty
    because no transition leads into it.  Timings are not recorded.
    """
    directory = Path(directory)
    csv_path = directory / f"{name}.csv"
    header = ["accepted", "log_likelihood"] + [f"p_{k}" for k in range(chain.dim)]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for k in range(len(chain.states)):
            accepted = "" if k == 0 else int(chain.accepted[k - 1])
            writer.writerow(
                [accepted, _fmt(chain.log_likelihoods[k])]
                + [_fmt(v) for v in chain.states[k]]
            )
    meta = {
        "kind": "pcn_chain",
        "seed": chain.seed,
        "step_size": chain.step_size,
        "mode": chain.mode,
        "n_steps": chain.n_steps,
        "dim": chain.dim,
        "acceptance_rate": chain.acceptance_rate,
    }
    meta_path = _write_json(directory / f"{name}_meta.json", meta)
    return [csv_path, meta_path]


def load_chain(directory, name: str) -> Chain:
    directory = Path(directory)
    meta = _read_json(directory / f"{name}_meta.json")
    if meta.get("kind") != "pcn_chain":
        raise HalbachError(f"{name}_meta.json does not describe a chain")
    csv_path = directory / f"{name}.csv"
    if not csv_path.exists():
        raise HalbachError(f"file not found: {csv_path}")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        dim = meta["dim"]
        if header != ["accepted", "log_likelihood"] + [f"p_{k}" for k in range(dim)]:
            raise HalbachError(f"{csv_path.name} header disagrees with the metadata")
        states, accepted, logliks = [], [], []
        for row in reader:
            if states:
                accepted.append(bool(int(row[0])))
            logliks.append(float(row[1]))
            states.append([float(v) for v in row[2:]])
    chain = Chain(
        states=np.array(states),
        accepted=np.array(accepted, dtype=bool),
        log_likelihoods=np.array(logliks),
        step_size=meta["step_size"],
        seed=meta["seed"],
        mode=meta["mode"],
    )
    if chain.n_steps != meta["n_steps"]:
        raise HalbachError(
            f"{csv_path.name} holds {chain.n_steps} steps, metadata says {meta['n_steps']}"
        )
    return chain


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def report_to_dict(report: ValidationReport | ApplicationReport) -> dict:
    """JSON-ready dict.  Wall time is dropped so reruns are byte-identical."""
    if isinstance(report, ValidationReport):
        return {
            "kind": "validation_report",
            "seed": report.seed,
            "variant": report.variant,
            "prior_max_deviation": report.prior_max_deviation,
            "posterior_max_deviation": report.posterior_max_deviation,
            "reduction_percent": report.reduction_percent,
            "prior_deviations": [float(v) for v in report.prior_deviations],
            "posterior_deviations": [float(v) for v in report.posterior_deviations],
            "acceptance_rate": report.acceptance_rate,
            "max_variance_ratio": report.max_variance_ratio,
        }
    if isinstance(report, ApplicationReport):
        return {
            "kind": "application_report",
            "seed": report.seed,
            "z_positions": [float(v) for v in report.z_positions],
            "fringe": [bool(v) for v in report.fringe],
            "valid": [bool(v) for v in report.valid],
            "e_rel_prior": _floats_or_nulls(report.e_rel_prior),
            "e_rel_posterior": _floats_or_nulls(report.e_rel_posterior),
            "fraction_improved_homogeneous": report.fraction_improved_homogeneous,
            "median_reduction_factor": report.median_reduction_factor,
        }
    raise HalbachError(f"cannot serialize report of type {type(report).__name__}")


def report_from_dict(payload: dict) -> ValidationReport | ApplicationReport:
    kind = payload.get("kind")
    if kind == "validation_report":
        return ValidationReport(
            seed=payload["seed"],
            variant=payload["variant"],
            prior_max_deviation=payload["prior_max_deviation"],
            posterior_max_deviation=payload["posterior_max_deviation"],
            reduction_percent=payload["reduction_percent"],
            prior_deviations=np.array(payload["prior_deviations"]),
            posterior_deviations=np.array(payload["posterior_deviations"]),
            runtime_seconds=0.0,
            acceptance_rate=payload["acceptance_rate"],
            max_variance_ratio=payload["max_variance_ratio"],
        )
    if kind == "application_report":
        return ApplicationReport(
            seed=payload["seed"],
            z_positions=np.array(payload["z_positions"]),
            fringe=np.array(payload["fringe"], dtype=bool),
            valid=np.array(payload["valid"], dtype=bool),
            e_rel_prior=_nulls_to_nan(payload["e_rel_prior"]),
            e_rel_posterior=_nulls_to_nan(payload["e_rel_posterior"]),
            fraction_improved_homogeneous=payload["fraction_improved_homogeneous"],
            median_reduction_factor=payload["median_reduction_factor"],
            runtime_seconds=0.0,
        )
    raise HalbachError(f"unknown report kind: {kind!r}")


def save_report(path, report: ValidationReport | ApplicationReport) -> Path:
    return _write_json(path, report_to_dict(report))


def load_report(path) -> ValidationReport | ApplicationReport:
    return report_from_dict(_read_json(path))


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------

def write_manifest(out_dir) -> Path:
    """List every file under ``out_dir`` with its checksum.

    The manifest itself and the run log are excluded: the log carries wall
    times, and listing it would make reruns differ.
    """
    out_dir = Path(out_dir)
    entries = []
    for path in sorted(out_dir.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(out_dir).as_posix()
        if rel in (MANIFEST_NAME, RUN_LOG_NAME):
            continue
        entries.append({
            "path": rel,
            "sha256": sha256_of(path),
            "bytes": path.stat().st_size,
        })
    return _write_json(out_dir / MANIFEST_NAME, {"kind": "run_manifest", "files": entries})


def verify_manifest(out_dir) -> None:
    """Re-hash every listed file; raise on missing, changed, or unlisted files."""
    out_dir = Path(out_dir)
    payload = _read_json(out_dir / MANIFEST_NAME)
    listed = {entry["path"]: entry["sha256"] for entry in payload["files"]}
    present = {
        p.relative_to(out_dir).as_posix()
        for p in out_dir.rglob("*")
        if p.is_file() and p.relative_to(out_dir).as_posix() not in (MANIFEST_NAME, RUN_LOG_NAME)
    }
    missing = sorted(set(listed) - present)
    unlisted = sorted(present - set(listed))
    if missing:
        raise HalbachError(f"manifest lists missing files: {', '.join(missing)}")
    if unlisted:
        raise HalbachError(f"files not in manifest: {', '.join(unlisted)}")
    for rel, recorded in sorted(listed.items()):
        actual = sha256_of(out_dir / rel)
        if actual != recorded:
            raise HalbachError(
                f"manifest checksum mismatch for {rel}: recorded {recorded[:12]}..., "
                f"file hashes to {actual[:12]}..."
            )
