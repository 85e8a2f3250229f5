"""Command-line front end.

Each subcommand reads one TOML config (or pure defaults), writes its
outputs under ``--out``, and finishes by emitting a resolved-config
snapshot plus a checksum manifest of everything in the directory.  Wall
times go to ``run.log`` only, so rerunning a subcommand with the same
config and seed reproduces every CSV/JSON/SVG byte for byte.

Stochastic subcommands require ``--seed``; nothing is ever seeded from
the clock.  ``HALBACH_THREADS`` caps worker parallelism in operator
assembly and multi-chain runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import (
    RunConfig,
    build_array,
    build_layout,
    build_noise,
    build_observable_spec,
    build_prior,
    load_config,
)
from .errors import ConfigError, HalbachError
from .field_analytic import assemble_linear_operator
from .fem2d import MaterialCurve
from .geometry import nominal_angle_deg, nominal_magnetization
from .harness import (
    ApplicationConfig,
    LinearValidationConfig,
    PcnValidationConfig,
    make_observation,
    run_application,
    run_linear_validation,
    run_pcn_validation,
)
from .inference import conjugate_update, run_chain, summarize_chain
from .observables import FieldPoint, Observation, PointFieldSpec
from .persistence import (
    load_density,
    load_observation,
    report_to_dict,
    save_chain,
    save_density,
    save_helmholtz_csv,
    save_observation,
    write_manifest,
)
from .prior import synth_helmholtz, synthetic_type_parameters

STOCHASTIC = ("synth-helmholtz", "observe", "validate", "evaluate")


class _Run:
    """Output-directory bookkeeping shared by every subcommand."""

    def __init__(self, cmd: str, cfg: RunConfig, args: argparse.Namespace):
        self.cmd = cmd
        self.cfg = cfg
        self.t0 = time.perf_counter()
        self.out = Path(args.out if args.out is not None else cfg.run.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.args = {
            k: v for k, v in vars(args).items() if k not in ("config", "out", "cmd")
        }
        self.lines: list[str] = []

    def log(self, message: str) -> None:
        self.lines.append(f"{self.cmd}: {message}")

    def timed(self, label: str, fn):
        t0 = time.perf_counter()
        result = fn()
        self.log(f"{label} in {time.perf_counter() - t0:.3f} s")
        return result

    def finish(self) -> None:
        snapshot = {"subcommand": self.cmd, "arguments": self.args,
                    "config": self.cfg.resolved_dict()}
        path = self.out / f"config_{self.cmd.replace('-', '_')}.json"
        path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        self.log(f"finished in {time.perf_counter() - self.t0:.3f} s")
        with open(self.out / "run.log", "a") as fh:
            fh.writelines(line + "\n" for line in self.lines)
        write_manifest(self.out)


def _json_out(run: _Run, name: str, payload: dict) -> None:
    (run.out / name).write_text(
        json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"
    )
    run.log(f"wrote {name}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_geometry(run: _Run) -> None:
    array = build_array(run.cfg)
    layout = build_layout(run.cfg)
    blocks = []
    for i in range(1, 17):
        blk = array.block(i)
        blocks.append({
            "index": i,
            "nominal_angle_deg": nominal_angle_deg(i),
            "nominal_magnetization_Am": [float(v) for v in nominal_magnetization(array, i)],
            "vertices_m": [[float(x) for x in v] for v in blk.vertices],
            "cross_section_m2": blk.area,
            "volume_m3": array.block_volume(i),
        })
    payload = {
        "kind": "halbach_geometry",
        "inner_radius_m": array.inner_radius,
        "outer_radius_m": array.outer_radius,
        "ring_length_m": array.ring_length,
        "ring_gap_m": array.ring_gap,
        "n_rings": array.n_rings,
        "half_length_m": array.half_length,
        "nominal_moment_Am2": array.nominal_moment,
        "mu_r": array.mu_r,
        "iron_inner_m": array.iron_inner,
        "iron_outer_m": array.iron_outer,
        "ring_z_spans_m": [list(array.ring_z_span(j)) for j in range(1, array.n_rings + 1)],
        "parameter_dim": layout.dim,
        "blocks": blocks,
    }
    _json_out(run, "geometry.json", payload)


def _cmd_synth_helmholtz(run: _Run, seed: int) -> None:
    array = build_array(run.cfg)
    means, covs = synthetic_type_parameters(array, seed=run.cfg.prior.type_seed)
    records = synth_helmholtz(
        array, means, covs, n_rings=run.cfg.prior.n_measured_rings, seed=seed
    )
    save_helmholtz_csv(run.out / "helmholtz.csv", records)
    run.log(f"wrote helmholtz.csv ({len(records)} records)")


def _cmd_fit_prior(run: _Run, measurements: str | None) -> None:
    cfg = run.cfg
    array = build_array(cfg)
    layout = build_layout(cfg)
    csv_path = measurements or cfg.prior.csv_path or str(run.out / "helmholtz.csv")
    if Path(csv_path).exists():
        from .prior import fit_prior, load_helmholtz_csv

        records = load_helmholtz_csv(csv_path)
        prior = run.timed(
            f"fitted prior from {len(records)} records",
            lambda: fit_prior(records, layout, pooled=cfg.prior.pooled),
        )
    elif cfg.prior.source == "synthetic":
        prior = run.timed("fitted prior from synthetic measurements",
                          lambda: build_prior(cfg, array, layout))
    else:
        raise HalbachError(f"measurement file not found: {csv_path}")
    save_density(run.out, "prior", prior, layout=layout)
    run.log("wrote prior.json, prior_cov.bin")


def _load_or_build_prior(run: _Run, array, layout):
    if (run.out / "prior.json").exists():
        prior, stored_layout = load_density(run.out, "prior")
        if stored_layout is not None and stored_layout != layout:
            raise HalbachError(
                "stored prior layout disagrees with the config; "
                "rerun fit-prior or adjust [geometry]"
            )
        run.log("loaded prior from prior.json")
        return prior
    run.log("no stored prior, fitting from config")
    return build_prior(run.cfg, array, layout)


def _cmd_simulate(run: _Run, density: str) -> None:
    cfg = run.cfg
    array = build_array(cfg)
    layout = build_layout(cfg)
    spec = build_observable_spec(cfg, array)
    op = run.timed("assembled operator", lambda: assemble_linear_operator(array, spec, layout))
    if density == "prior":
        source = _load_or_build_prior(run, array, layout)
    else:
        if not (run.out / f"{density}.json").exists():
            raise HalbachError(f"no stored density named {density!r} in {run.out}")
        source, _ = load_density(run.out, density)
    values = op.apply(source.mean)
    save_observation(run.out, "simulated", Observation(values=values, spec=spec, noise_var=0.0))
    run.log(f"wrote simulated.csv from the {density} mean ({spec.n_values} values)")


def _cmd_observe(run: _Run, seed: int) -> None:
    cfg = run.cfg
    array = build_array(cfg)
    layout = build_layout(cfg)
    spec = build_observable_spec(cfg, array)
    op = run.timed("assembled operator", lambda: assemble_linear_operator(array, spec, layout))
    prior = _load_or_build_prior(run, array, layout)
    rng = np.random.default_rng(seed)
    p_true = prior.sample(rng)
    noise = build_noise(cfg, spec, array)
    obs = make_observation(op, spec, p_true, noise=noise, seed=rng)
    save_observation(run.out, "observation", obs)
    _json_out(run, "truth.json", {
        "kind": "ground_truth",
        "seed": seed,
        "values": [float(v) for v in p_true],
    })
    run.log(f"wrote observation.csv ({obs.n_values} values)")


def _cmd_infer(run: _Run, mode: str | None, steps: int | None,
               step_size: float | None, burn_in: float | None,
               seed: int | None) -> None:
    cfg = run.cfg
    inf = cfg.inference
    mode = mode or inf.mode
    if mode not in ("linear", "pcn"):
        raise ConfigError(f"--mode must be 'linear' or 'pcn', got {mode!r}")
    if mode == "pcn" and seed is None:
        raise ConfigError("infer --mode pcn requires --seed")
    array = build_array(cfg)
    layout = build_layout(cfg)
    if not (run.out / "observation.csv").exists():
        raise HalbachError(
            f"no observation found in {run.out}; run 'observe --seed N' first"
        )
    obs = load_observation(run.out, "observation")
    op = run.timed(
        "assembled operator",
        lambda: assemble_linear_operator(array, obs.spec, layout),
    )
    prior = _load_or_build_prior(run, array, layout)

    if mode == "linear":
        post = run.timed(
            "conjugate update",
            lambda: conjugate_update(op, obs.noise_var, obs.values, prior),
        )
        save_density(run.out, "posterior", post, layout=layout)
        run.log("wrote posterior.json, posterior_cov.bin")
        return

    n_steps = steps if steps is not None else inf.n_steps
    s = step_size if step_size is not None else inf.step_size
    burn = burn_in if burn_in is not None else inf.burn_in_fraction
    t0 = time.perf_counter()
    chain = run_chain(
        op.apply, prior, obs.values, obs.noise_var, n_steps=n_steps, seed=seed, s=s
    )
    dt = time.perf_counter() - t0
    run.log(f"ran {n_steps} pCN steps in {dt:.3f} s ({n_steps / dt:.0f} steps/s)")
    summary = summarize_chain(chain, burn_in_fraction=burn)
    save_chain(run.out, "chain", chain)
    _json_out(run, "posterior_summary.json", {
        "kind": "posterior_summary",
        "mean": [float(v) for v in summary.mean],
        "std_error": [float(v) for v in summary.std_error],
        "ess": [float(v) for v in summary.ess],
        "n_retained": summary.n_retained,
        "burn_in_fraction": summary.burn_in_fraction,
        "acceptance_rate": chain.acceptance_rate,
        "step_size": s,
        "seed": seed,
    })


def _point_and_fourier_specs(cfg: RunConfig, array):
    point_cfg = dataclasses.replace(
        cfg, observable=dataclasses.replace(cfg.observable, kind="point")
    )
    fourier_cfg = dataclasses.replace(
        cfg, observable=dataclasses.replace(cfg.observable, kind="fourier")
    )
    return (
        build_observable_spec(point_cfg, array),
        build_observable_spec(fourier_cfg, array),
    )


def _cmd_validate(run: _Run, mode: str | None, n_seeds: int | None, seed: int,
                  forward: str, mesh_h: float, steps: int | None) -> None:
    cfg = run.cfg
    mode = mode or cfg.inference.mode
    if mode not in ("linear", "pcn"):
        raise ConfigError(f"--mode must be 'linear' or 'pcn', got {mode!r}")
    count = n_seeds if n_seeds is not None else cfg.run.n_seeds
    if count < 1:
        raise ConfigError("--seeds must be positive")
    seeds = list(range(seed, seed + count))
    array = build_array(cfg)
    layout = build_layout(cfg)
    prior = build_prior(cfg, array, layout)

    if mode == "linear":
        point_spec, fourier_spec = _point_and_fourier_specs(cfg, array)
        vcfg = LinearValidationConfig(
            array=array,
            layout=layout,
            prior=prior,
            point_spec=point_spec,
            fourier_spec=fourier_spec,
            point_operator=run.timed(
                "assembled point operator",
                lambda: assemble_linear_operator(array, point_spec, layout),
            ),
            fourier_operator=run.timed(
                "assembled harmonic operator",
                lambda: assemble_linear_operator(array, fourier_spec, layout),
            ),
            sigma_point=cfg.noise.sigma,
        )
        variants: dict[str, list] = {"point": [], "fourier": []}
        for sd in seeds:
            reports = run.timed(f"seed {sd}", lambda sd=sd: run_linear_validation(vcfg, sd))
            for name, rep in reports.items():
                variants[name].append(rep)
                _json_out(run, f"validation_{name}_seed{sd:03d}.json", report_to_dict(rep))
    else:
        if forward == "fem" and cfg.geometry.n_components != 2:
            raise ConfigError("--forward fem needs geometry.n_components = 2")
        spec = build_observable_spec(cfg, array)
        operator = None
        if forward == "linear":
            operator = run.timed(
                "assembled operator",
                lambda: assemble_linear_operator(array, spec, layout),
            )
        pcfg = PcnValidationConfig(
            array=array,
            layout=layout,
            prior=prior,
            spec=spec,
            forward_kind=forward,
            operator=operator,
            sigma=cfg.noise.sigma,
            n_steps=steps if steps is not None else cfg.inference.n_steps,
            step_size=cfg.inference.step_size,
            burn_in_fraction=cfg.inference.burn_in_fraction,
            mesh_h=mesh_h,
            iron_curve=MaterialCurve.brauer() if array.has_iron else None,
        )
        variant = f"pcn_{forward}"
        variants = {variant: []}
        for sd in seeds:
            rep = run.timed(f"seed {sd}", lambda sd=sd: run_pcn_validation(pcfg, sd))
            variants[variant].append(rep)
            _json_out(run, f"validation_{variant}_seed{sd:03d}.json", report_to_dict(rep))

    summary = {"kind": "validation_summary", "mode": mode, "seeds": seeds, "variants": {}}
    for name, reports in variants.items():
        reductions = [r.reduction_percent for r in reports]
        entry = {
            "reductions_percent": reductions,
            "median_reduction_percent": float(np.median(reductions)),
            "min_reduction_percent": float(np.min(reductions)),
        }
        ratios = [r.max_variance_ratio for r in reports if r.max_variance_ratio is not None]
        if ratios:
            entry["max_variance_ratio"] = float(np.max(ratios))
        rates = [r.acceptance_rate for r in reports if r.acceptance_rate is not None]
        if rates:
            entry["acceptance_rates"] = rates
        summary["variants"][name] = entry
    _json_out(run, "validation_summary.json", summary)


def _application_config(run: _Run) -> ApplicationConfig:
    cfg = run.cfg
    array = build_array(cfg)
    layout = build_layout(cfg)
    prior = build_prior(cfg, array, layout)
    fourier_cfg = dataclasses.replace(
        cfg, observable=dataclasses.replace(cfg.observable, kind="fourier")
    )
    fourier_spec = build_observable_spec(fourier_cfg, array)
    planar = cfg.geometry.n_components == 2
    if planar:
        axis_points = (FieldPoint(position=np.zeros(2)),)
    else:
        span = cfg.observable.z_span_factor * array.half_length
        axis_z = np.linspace(-span, span, 2 * cfg.observable.n_z + 1)
        axis_points = tuple(FieldPoint(position=np.array([0.0, 0.0, z])) for z in axis_z)
    axis_spec = PointFieldSpec(points=axis_points, components=("Bx",))
    noise_cfg = dataclasses.replace(
        cfg, noise=dataclasses.replace(cfg.noise, kind="profile")
    )
    profile = build_noise(noise_cfg, fourier_spec, array)
    return ApplicationConfig(
        array=array,
        layout=layout,
        prior=prior,
        fourier_spec=fourier_spec,
        fourier_operator=run.timed(
            "assembled harmonic operator",
            lambda: assemble_linear_operator(array, fourier_spec, layout),
        ),
        axis_spec=axis_spec,
        axis_operator=run.timed(
            "assembled axis operator",
            lambda: assemble_linear_operator(array, axis_spec, layout),
        ),
        sigma_profile=profile,
        fringe_margin=cfg.noise.fringe_margin,
    )


def _cmd_evaluate(run: _Run, seed: int) -> None:
    acfg = _application_config(run)
    report = run.timed(f"application run, seed {seed}",
                       lambda: run_application(acfg, seed))
    _json_out(run, "application_report.json", report_to_dict(report))
    run.log(
        f"improved at {100 * report.fraction_improved_homogeneous:.1f}% of "
        f"homogeneous positions, median reduction factor "
        f"{report.median_reduction_factor:.2f}"
    )


def _cmd_report(run: _Run) -> None:
    from . import plots

    written = plots.render_run_directory(run.out)
    if not written:
        raise HalbachError(
            f"nothing to plot in {run.out}; run 'validate' or 'evaluate' first"
        )
    for name in written:
        run.log(f"wrote {name}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="halbach-bayes",
        description="Uncertainty-quantified Halbach magnet models from "
                    "magnetization priors and field observations.",
        epilog="HALBACH_THREADS caps worker parallelism; seeds never come "
               "from the clock.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (defaults used when absent)")
    common.add_argument("--out", help="output directory (default: [run] out_dir)")

    sub = parser.add_subparsers(dest="cmd", required=True, metavar="SUBCOMMAND")

    sub.add_parser("geometry", parents=[common],
                   help="write the resolved magnet geometry as JSON")

    p = sub.add_parser("synth-helmholtz", parents=[common],
                       help="generate synthetic per-block coil measurements")
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("fit-prior", parents=[common],
                       help="fit the Gaussian prior from coil measurements")
    p.add_argument("--measurements", help="measurement CSV (default: config or out dir)")

    p = sub.add_parser("simulate", parents=[common],
                       help="noise-free observables at a stored density's mean")
    p.add_argument("--density", default="prior",
                   help="stored density name to evaluate (default: prior)")

    p = sub.add_parser("observe", parents=[common],
                       help="draw a ground truth and a noisy observation of it")
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("infer", parents=[common],
                       help="posterior from the stored observation")
    p.add_argument("--mode", choices=["linear", "pcn"],
                   help="override [inference] mode")
    p.add_argument("--steps", type=int, help="pCN step count")
    p.add_argument("--step-size", type=float, dest="step_size", help="pCN step size s")
    p.add_argument("--burn-in", type=float, dest="burn_in", help="discarded fraction")
    p.add_argument("--seed", type=int, help="chain seed (required for pcn)")

    p = sub.add_parser("validate", parents=[common],
                       help="truth-recovery study over a block of seeds")
    p.add_argument("--mode", choices=["linear", "pcn"])
    p.add_argument("--seeds", type=int, dest="n_seeds", help="number of seeds")
    p.add_argument("--seed", type=int, required=True, help="first seed of the block")
    p.add_argument("--forward", choices=["linear", "fem"], default="linear",
                   help="pcn forward model (default: linear)")
    p.add_argument("--mesh-h", type=float, dest="mesh_h", default=0.02,
                   help="FE mesh size for --forward fem")
    p.add_argument("--steps", type=int, help="pCN step count")

    p = sub.add_parser("evaluate", parents=[common],
                       help="shifted-prior application run judged on the axis profile")
    p.add_argument("--seed", type=int, required=True)

    sub.add_parser("report", parents=[common],
                   help="render SVG figures from stored reports")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        run = _Run(args.cmd, cfg, args)
        if args.cmd == "geometry":
            _cmd_geometry(run)
        elif args.cmd == "synth-helmholtz":
            _cmd_synth_helmholtz(run, args.seed)
        elif args.cmd == "fit-prior":
            _cmd_fit_prior(run, args.measurements)
        elif args.cmd == "simulate":
            _cmd_simulate(run, args.density)
        elif args.cmd == "observe":
            _cmd_observe(run, args.seed)
        elif args.cmd == "infer":
            _cmd_infer(run, args.mode, args.steps, args.step_size,
                       args.burn_in, args.seed)
        elif args.cmd == "validate":
            _cmd_validate(run, args.mode, args.n_seeds, args.seed,
                          args.forward, args.mesh_h, args.steps)
        elif args.cmd == "evaluate":
            _cmd_evaluate(run, args.seed)
        else:
            _cmd_report(run)
        run.finish()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except HalbachError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
