import json
import struct

import numpy as np
import pytest

from halbach_bayes.errors import HalbachError
from halbach_bayes.field_analytic import assemble_linear_operator
from halbach_bayes.geometry import ParameterLayout, build_default_array
from halbach_bayes.harness import (
    ApplicationReport,
    ValidationReport,
    default_synthetic_prior,
    make_observation,
)
from halbach_bayes.inference import Chain, run_chain
from halbach_bayes.observables import (
    FieldPoint,
    FourierCircleSpec,
    Observation,
    PointFieldSpec,
)
from halbach_bayes.persistence import (
    MATRIX_MAGIC,
    MATRIX_VERSION,
    load_chain,
    load_density,
    load_matrix,
    load_observation,
    load_report,
    save_chain,
    save_density,
    save_helmholtz_csv,
    save_matrix,
    save_observation,
    save_report,
    sha256_of,
    spec_from_dict,
    spec_to_dict,
    verify_checksum,
    verify_manifest,
    write_checksum,
    write_manifest,
)
from halbach_bayes.prior import GaussianDensity, load_helmholtz_csv, synth_helmholtz
from halbach_bayes.prior import synthetic_type_parameters


def awkward_matrix(rows, cols, seed=0):
    """Values that expose any precision loss in a round trip."""
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(rows, cols))
    m[0, 0] = -0.0
    m[0, 1] = np.nextafter(1.0, 2.0)
    m[1, 0] = 5e-324
    m[1, 1] = 1.7976931348623157e308
    return m


class TestChecksums:
    def test_sidecar_round_trip(self, tmp_path):
        target = tmp_path / "blob.bin"
        target.write_bytes(b"\x00\x01\x02")
        sidecar = write_checksum(target)
        assert sidecar.name == "blob.bin.sha256"
        assert sidecar.read_text().split()[1] == "blob.bin"
        verify_checksum(target)

    def test_corruption_detected(self, tmp_path):
        target = tmp_path / "blob.bin"
        target.write_bytes(b"\x00\x01\x02")
        write_checksum(target)
        target.write_bytes(b"\x00\x01\x03")
        with pytest.raises(HalbachError, match="checksum mismatch"):
            verify_checksum(target)

    def test_missing_sidecar(self, tmp_path):
        target = tmp_path / "blob.bin"
        target.write_bytes(b"x")
        with pytest.raises(HalbachError, match="missing checksum"):
            verify_checksum(target)


class TestMatrixFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        m = awkward_matrix(7, 3)
        path = save_matrix(tmp_path / "m.bin", m)
        back = load_matrix(path)
        assert back.shape == m.shape
        assert np.array_equal(back, m)
        # signed zero survives
        assert np.signbit(back[0, 0])

    def test_header_layout(self, tmp_path):
        m = np.arange(6.0).reshape(2, 3)
        path = save_matrix(tmp_path / "m.bin", m)
        raw = path.read_bytes()
        magic, version, rows, cols = struct.unpack_from("<4sIQQ", raw)
        assert magic == MATRIX_MAGIC == b"HBMX"
        assert version == MATRIX_VERSION == 1
        assert (rows, cols) == (2, 3)
        assert len(raw) == 24 + 48
        assert np.frombuffer(raw, dtype="<f8", offset=24)[3] == 3.0

    def test_save_is_deterministic(self, tmp_path):
        m = awkward_matrix(4, 4, seed=1)
        a = save_matrix(tmp_path / "a.bin", m).read_bytes()
        b = save_matrix(tmp_path / "b.bin", m).read_bytes()
        assert a == b

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"NOPE" + bytes(20))
        write_checksum(path)
        with pytest.raises(HalbachError, match="bad magic"):
            load_matrix(path)

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(struct.pack("<4sIQQ", b"HBMX", 2, 1, 1) + bytes(8))
        write_checksum(path)
        with pytest.raises(HalbachError, match="version 2"):
            load_matrix(path)

    def test_truncated_payload_rejected(self, tmp_path):
        m = np.ones((3, 3))
        path = save_matrix(tmp_path / "m.bin", m)
        path.write_bytes(path.read_bytes()[:-8])
        write_checksum(path)
        with pytest.raises(HalbachError, match="header promises"):
            load_matrix(path)

    def test_corrupted_payload_caught_by_checksum(self, tmp_path):
        path = save_matrix(tmp_path / "m.bin", np.ones((2, 2)))
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(HalbachError, match="checksum mismatch"):
            load_matrix(path)
        # explicit opt-out skips the verification
        loaded = load_matrix(path, verify=False)
        assert loaded.shape == (2, 2)

    def test_non_2d_rejected(self, tmp_path):
        with pytest.raises(HalbachError, match="2-D"):
            save_matrix(tmp_path / "m.bin", np.ones(4))

    def test_missing_file(self, tmp_path):
        with pytest.raises(HalbachError, match="not found"):
            load_matrix(tmp_path / "absent.bin")


class TestDensityPersistence:
    def density(self):
        rng = np.random.default_rng(2)
        A = rng.normal(size=(5, 5))
        return GaussianDensity(mean=rng.normal(size=5), cov=A @ A.T + 5 * np.eye(5))

    def test_round_trip(self, tmp_path):
        d = self.density()
        layout = ParameterLayout(n_rings=1, n_components=2)
        save_density(tmp_path, "prior", d, layout=None)
        back, got_layout = load_density(tmp_path, "prior")
        assert np.array_equal(back.mean, d.mean)
        assert np.array_equal(back.cov, d.cov)
        assert got_layout is None
        save_density(tmp_path, "prior2", d, layout=layout)
        _, got_layout = load_density(tmp_path, "prior2")
        assert got_layout == layout

    def test_tampered_covariance_rejected(self, tmp_path):
        save_density(tmp_path, "prior", self.density())
        cov_path = tmp_path / "prior_cov.bin"
        raw = bytearray(cov_path.read_bytes())
        raw[30] ^= 0x01
        cov_path.write_bytes(bytes(raw))
        write_checksum(cov_path)
        with pytest.raises(HalbachError, match="does not match the hash"):
            load_density(tmp_path, "prior")

    def test_wrong_kind_rejected(self, tmp_path):
        (tmp_path / "prior.json").write_text(json.dumps({"kind": "other"}))
        with pytest.raises(HalbachError, match="Gaussian density"):
            load_density(tmp_path, "prior")


class TestHelmholtzRoundTrip:
    def test_synthetic_records_survive(self, tmp_path):
        array = build_default_array()
        layout = ParameterLayout(n_rings=2, n_components=3)
        means, covs = synthetic_type_parameters(array, seed=3)
        records = synth_helmholtz(array, means, covs, n_rings=2, seed=4)
        path = save_helmholtz_csv(tmp_path / "meas.csv", records)
        back = load_helmholtz_csv(path)
        assert len(back) == len(records) == 32
        for a, b in zip(records, back):
            assert (a.block_i, a.ring_j) == (b.block_i, b.ring_j)
            assert np.array_equal(a.moment, b.moment)
            assert a.volume == b.volume


class TestSpecSerialization:
    def test_point_spec_round_trip(self):
        spec = PointFieldSpec(
            points=tuple(
                FieldPoint(position=np.array([0.01 * k, -0.02, 0.3 * k]))
                for k in range(4)
            ),
            components=("Bx", "Bz"),
        )
        back = spec_from_dict(spec_to_dict(spec))
        assert isinstance(back, PointFieldSpec)
        assert back.components == spec.components
        assert np.array_equal(back.eval_points(), spec.eval_points())

    def test_fourier_spec_round_trip(self):
        spec = FourierCircleSpec(
            radius=0.075, n_harmonics=8, n_theta=60, z_positions=(0.0, 0.1), ndim=3
        )
        assert spec_from_dict(spec_to_dict(spec)) == spec

    def test_unknown_kind_rejected(self):
        with pytest.raises(HalbachError, match="unknown observable spec"):
            spec_from_dict({"kind": "holographic"})


class TestObservationRoundTrip:
    def observation(self):
        array = build_default_array()
        layout = ParameterLayout(n_rings=1, n_components=2)
        prior = default_synthetic_prior(array, layout)
        th = 2 * np.pi * np.arange(8) / 8
        spec = PointFieldSpec(
            points=tuple(
                FieldPoint(position=0.09 * np.array([np.cos(t), np.sin(t)]))
                for t in th
            ),
            components=("Bx", "By"),
        )
        op = assemble_linear_operator(array, spec, layout)
        sigma = np.linspace(1e-5, 1e-4, spec.n_values)
        return make_observation(op, spec, prior.mean, sigma, seed=5)

    def test_round_trip(self, tmp_path):
        obs = self.observation()
        save_observation(tmp_path, "obs", obs)
        back = load_observation(tmp_path, "obs")
        assert np.array_equal(back.values, obs.values)
        assert np.array_equal(back.noise_var, np.sqrt(obs.noise_var) ** 2)
        assert back.spec.value_rows() == obs.spec.value_rows()

    def test_save_load_save_is_idempotent(self, tmp_path):
        obs = self.observation()
        save_observation(tmp_path, "a", obs)
        save_observation(tmp_path, "b", load_observation(tmp_path, "a"))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_fourier_observation_round_trip(self, tmp_path):
        spec = FourierCircleSpec(radius=0.07, n_harmonics=3, n_theta=16, ndim=2)
        obs = Observation(
            values=np.linspace(-1e-3, 1e-3, spec.n_values),
            spec=spec,
            noise_var=4e-12,
        )
        save_observation(tmp_path, "f", obs)
        back = load_observation(tmp_path, "f")
        assert np.array_equal(back.values, obs.values)
        assert back.spec == spec

    def test_header_mismatch_rejected(self, tmp_path):
        obs = self.observation()
        save_observation(tmp_path, "obs", obs)
        csv_path = tmp_path / "obs.csv"
        lines = csv_path.read_text().splitlines()
        lines[0] = "a,b,c"
        csv_path.write_text("\n".join(lines) + "\n")
        with pytest.raises(HalbachError, match="header"):
            load_observation(tmp_path, "obs")

    def test_row_count_mismatch_rejected(self, tmp_path):
        obs = self.observation()
        save_observation(tmp_path, "obs", obs)
        csv_path = tmp_path / "obs.csv"
        lines = csv_path.read_text().splitlines()
        csv_path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(HalbachError, match="holds 15 values"):
            load_observation(tmp_path, "obs")

    def test_row_order_mismatch_rejected(self, tmp_path):
        obs = self.observation()
        save_observation(tmp_path, "obs", obs)
        csv_path = tmp_path / "obs.csv"
        lines = csv_path.read_text().splitlines()
        lines[1], lines[2] = lines[2], lines[1]
        csv_path.write_text("\n".join(lines) + "\n")
        with pytest.raises(HalbachError, match="row 2"):
            load_observation(tmp_path, "obs")


class TestChainRoundTrip:
    def chain(self):
        array = build_default_array()
        layout = ParameterLayout(n_rings=1, n_components=2)
        prior = default_synthetic_prior(array, layout)
        th = 2 * np.pi * np.arange(6) / 6
        spec = PointFieldSpec(
            points=tuple(
                FieldPoint(position=0.08 * np.array([np.cos(t), np.sin(t)]))
                for t in th
            ),
            components=("Bx", "By"),
        )
        op = assemble_linear_operator(array, spec, layout)
        rng = np.random.default_rng(0)
        q = op.apply(prior.sample(rng)) + 1e-4 * rng.standard_normal(spec.n_values)
        return run_chain(op.apply, prior, q, 1e-8, n_steps=40, seed=9, s=0.2)

    def test_round_trip_bit_exact(self, tmp_path):
        chain = self.chain()
        save_chain(tmp_path, "chain", chain)
        back = load_chain(tmp_path, "chain")
        assert np.array_equal(back.states, chain.states)
        assert np.array_equal(back.accepted, chain.accepted)
        assert np.array_equal(back.log_likelihoods, chain.log_likelihoods)
        assert back.step_size == chain.step_size
        assert back.seed == chain.seed
        assert back.mode == chain.mode

    def test_metadata_has_no_timings(self, tmp_path):
        save_chain(tmp_path, "chain", self.chain())
        meta = json.loads((tmp_path / "chain_meta.json").read_text())
        assert set(meta) == {
            "kind", "seed", "step_size", "mode", "n_steps", "dim", "acceptance_rate",
        }

    def test_step_count_mismatch_rejected(self, tmp_path):
        save_chain(tmp_path, "chain", self.chain())
        meta_path = tmp_path / "chain_meta.json"
        meta = json.loads(meta_path.read_text())
        meta["n_steps"] += 1
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(HalbachError, match="metadata says"):
            load_chain(tmp_path, "chain")


class TestReportRoundTrip:
    def test_validation_report(self, tmp_path):
        rep = ValidationReport(
            seed=3,
            variant="pcn_linear",
            prior_max_deviation=4.0,
            posterior_max_deviation=1.5,
            reduction_percent=62.5,
            prior_deviations=np.array([4.0, 2.0]),
            posterior_deviations=np.array([1.5, 0.25]),
            runtime_seconds=12.5,
            acceptance_rate=0.44,
        )
        path = save_report(tmp_path / "rep.json", rep)
        back = load_report(path)
        assert back.variant == rep.variant
        assert np.array_equal(back.posterior_deviations, rep.posterior_deviations)
        assert back.acceptance_rate == rep.acceptance_rate
        # wall time is intentionally not persisted
        assert back.runtime_seconds == 0.0
        assert "runtime" not in path.read_text()

    def test_application_report_with_masked_positions(self, tmp_path):
        rep = ApplicationReport(
            seed=7,
            z_positions=np.array([-0.7, 0.0, 0.7]),
            fringe=np.array([True, False, True]),
            valid=np.array([True, False, True]),
            e_rel_prior=np.array([0.5, np.nan, 0.25]),
            e_rel_posterior=np.array([0.05, np.nan, 0.05]),
            fraction_improved_homogeneous=1.0,
            median_reduction_factor=7.5,
            runtime_seconds=3.0,
        )
        path = save_report(tmp_path / "app.json", rep)
        text = path.read_text()
        assert "NaN" not in text and "null" in text
        back = load_report(path)
        assert np.isnan(back.e_rel_prior[1])
        assert np.array_equal(back.e_rel_prior[[0, 2]], rep.e_rel_prior[[0, 2]])
        assert back.median_reduction_factor == rep.median_reduction_factor

    def test_unknown_kind_rejected(self, tmp_path):
        path = tmp_path / "rep.json"
        path.write_text(json.dumps({"kind": "mystery"}))
        with pytest.raises(HalbachError, match="unknown report kind"):
            load_report(path)


class TestManifest:
    def populate(self, out_dir):
        (out_dir / "sub").mkdir()
        (out_dir / "a.csv").write_text("x\n1\n")
        (out_dir / "sub" / "b.json").write_text("{}\n")
        (out_dir / "run.log").write_text("assembly took 3.2 s\n")

    def test_lists_files_but_not_log(self, tmp_path):
        self.populate(tmp_path)
        path = write_manifest(tmp_path)
        payload = json.loads(path.read_text())
        names = [e["path"] for e in payload["files"]]
        assert names == ["a.csv", "sub/b.json"]
        assert names == sorted(names)
        for entry in payload["files"]:
            assert entry["sha256"] == sha256_of(tmp_path / entry["path"])
        verify_manifest(tmp_path)

    def test_rewrite_is_byte_identical(self, tmp_path):
        self.populate(tmp_path)
        first = write_manifest(tmp_path).read_bytes()
        (tmp_path / "run.log").write_text("different timings\n")
        second = write_manifest(tmp_path).read_bytes()
        assert first == second

    def test_changed_file_detected(self, tmp_path):
        self.populate(tmp_path)
        write_manifest(tmp_path)
        (tmp_path / "a.csv").write_text("x\n2\n")
        with pytest.raises(HalbachError, match="mismatch for a.csv"):
            verify_manifest(tmp_path)

    def test_unlisted_file_detected(self, tmp_path):
        self.populate(tmp_path)
        write_manifest(tmp_path)
        (tmp_path / "extra.csv").write_text("y\n")
        with pytest.raises(HalbachError, match="not in manifest: extra.csv"):
            verify_manifest(tmp_path)

    def test_missing_file_detected(self, tmp_path):
        self.populate(tmp_path)
        write_manifest(tmp_path)
        (tmp_path / "a.csv").unlink()
        with pytest.raises(HalbachError, match="missing files: a.csv"):
            verify_manifest(tmp_path)
