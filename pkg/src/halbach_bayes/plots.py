"""SVG figures rendered from stored run outputs.

Everything draws from the JSON files a run leaves behind, not from live
objects, so figures can be regenerated long after the run.  The SVG
writer is pinned for reproducibility: fixed hash salt, no embedded
creation date, glyphs as paths.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import HalbachError

_SVG_OPTS = {"format": "svg", "metadata": {"Date": None}}


def _style():
    plt.rcParams["svg.hashsalt"] = "halbach-bayes"
    plt.rcParams["svg.fonttype"] = "path"


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, **_SVG_OPTS)
    plt.close(fig)
    return path


def plot_cross_section(geometry: dict, path) -> Path:
    """Block polygons of one ring, annotated with easy-axis arrows."""
    _style()
    fig, ax = plt.subplots(figsize=(6, 6))
    for blk in geometry["blocks"]:
        verts = np.array(blk["vertices_m"])
        closed = np.vstack([verts, verts[:1]])
        ax.plot(closed[:, 0], closed[:, 1], color="tab:blue", lw=1.0)
        cx, cy = verts.mean(axis=0)
        m = np.array(blk["nominal_magnetization_Am"][:2])
        m = 0.03 * m / np.linalg.norm(m)
        ax.annotate("", xy=(cx + m[0], cy + m[1]), xytext=(cx, cy),
                    arrowprops={"arrowstyle": "->", "color": "tab:red"})
        ax.text(cx, cy, str(blk["index"]), fontsize=7, ha="center", va="center")
    for radius, style in ((geometry["inner_radius_m"], ":"), (geometry["outer_radius_m"], ":")):
        th = np.linspace(0.0, 2.0 * np.pi, 181)
        ax.plot(radius * np.cos(th), radius * np.sin(th), style, color="grey", lw=0.8)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title("Halbach cross-section, nominal easy axes")
    return _finish(fig, path)


def plot_error_profile(report: dict, path) -> Path:
    """Relative field error along the bore axis, prior vs posterior mean."""
    _style()
    z = np.array(report["z_positions"])
    fringe = np.array(report["fringe"], dtype=bool)
    e_prior = np.array([np.nan if v is None else v for v in report["e_rel_prior"]])
    e_post = np.array([np.nan if v is None else v for v in report["e_rel_posterior"]])
    fig, ax = plt.subplots(figsize=(7, 4))
    if fringe.any():
        # shade each contiguous fringe stretch
        starts = np.flatnonzero(fringe & ~np.r_[False, fringe[:-1]])
        ends = np.flatnonzero(fringe & ~np.r_[fringe[1:], False])
        for n, (a, b) in enumerate(zip(starts, ends)):
            ax.axvspan(z[a], z[b], color="0.88", zorder=0,
                       label="fringe" if n == 0 else None)
    ax.semilogy(z, e_prior, "o-", ms=3, label="prior mean", color="tab:orange")
    ax.semilogy(z, e_post, "s-", ms=3, label="posterior mean", color="tab:blue")
    ax.set_xlabel("z [m]")
    ax.set_ylabel("relative field error")
    ax.set_title(f"Axis error profile, seed {report['seed']}")
    ax.legend(loc="upper center")
    ax.grid(True, which="both", alpha=0.3)
    return _finish(fig, path)


def plot_reductions(summary: dict, path) -> Path:
    """Per-seed max-deviation reductions, one bar group per variant."""
    _style()
    seeds = summary["seeds"]
    variants = summary["variants"]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(variants), 1)
    x = np.arange(len(seeds))
    for k, (name, entry) in enumerate(sorted(variants.items())):
        offset = (k - (len(variants) - 1) / 2) * width
        ax.bar(x + offset, entry["reductions_percent"], width=width, label=name)
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels([str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel("max-deviation reduction [%]")
    ax.set_title("Truth recovery across seeds")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    return _finish(fig, path)


def render_run_directory(out_dir) -> list[str]:
    """Render every figure the stored outputs support; return the file names."""
    out_dir = Path(out_dir)
    written: list[str] = []

    def read(name: str) -> dict:
        return json.loads((out_dir / name).read_text())

    if (out_dir / "geometry.json").exists():
        plot_cross_section(read("geometry.json"), out_dir / "cross_section.svg")
        written.append("cross_section.svg")
    if (out_dir / "application_report.json").exists():
        plot_error_profile(read("application_report.json"),
                           out_dir / "error_profile.svg")
        written.append("error_profile.svg")
    if (out_dir / "validation_summary.json").exists():
        plot_reductions(read("validation_summary.json"),
                        out_dir / "validation_reductions.svg")
        written.append("validation_reductions.svg")
    return written
