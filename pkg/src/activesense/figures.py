"""Plot-data exports: delimited files plus rendered figures.

Every export writes a documented CSV and renders the matching PNG next to
it.  The CSV is the contract (cross-implementation comparisons read it); the
figure is a convenience rendering of the same data.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from activesense import baselines as bl
from activesense import channels as chx
from activesense import nn
from activesense import policy
from activesense.config import ExperimentConfig
from activesense.harness import ResultTable, cache_key
from activesense.numerics import RandomStream

logger = logging.getLogger(__name__)

FIGURE_KINDS = ("mse-vs-snr", "gain-vs-t", "beam-pattern", "posterior-trace")


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _aggregate(table: ResultTable) -> dict[tuple[str, float], dict]:
    """Mean metric per (method, sweep value) with across-seed spread."""
    cells: dict[tuple[str, float], list] = {}
    for r in table.rows:
        cells.setdefault((r.method, r.sweep_value), []).append(r)
    out = {}
    for key, rows in cells.items():
        means = np.array([r.metric_mean for r in rows])
        out[key] = {
            "mean": float(means.mean()),
            "seed_spread": float(means.std(ddof=1)) if means.size > 1 else 0.0,
            "std_error": rows[0].std_error,
            "seeds": len(rows),
        }
    return out


def export_mse_vs_snr(results_path, out_dir, units: str = "rad2") -> Path:
    """Fig. 4-style data: AoA MSE against pilot SNR, one row per method/SNR."""
    if units not in ("rad2", "deg2"):
        raise ValueError(f"units must be 'rad2' or 'deg2', got {units!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = ResultTable.read_csv(results_path)
    cells = _aggregate(table)
    deg_factor = np.degrees(1.0) ** 2
    rows = []
    for (method, snr) in sorted(cells, key=lambda k: (k[0], k[1])):
        cell = cells[(method, snr)]
        rows.append([
            method, f"{snr:.17g}",
            f"{cell['mean']:.17g}", f"{cell['mean'] * deg_factor:.17g}",
            "" if cell["std_error"] is None else f"{cell['std_error']:.17g}",
            cell["seeds"],
        ])
    csv_path = out_dir / "mse_vs_snr.csv"
    _write_rows(csv_path, ["method", "snr_db", "mse_rad2", "mse_deg2",
                           "std_error_rad2", "seeds"], rows)

    fig, ax = plt.subplots(figsize=(6, 4.2))
    factor = deg_factor if units == "deg2" else 1.0
    for method in sorted({m for m, _ in cells}):
        pts = sorted((snr, cells[(m2, snr)]["mean"]) for m2, snr in cells if m2 == method)
        ax.semilogy([p[0] for p in pts], [p[1] * factor for p in pts],
                    marker="o", label=method)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("average MSE (deg$^2$)" if units == "deg2" else "average MSE (rad$^2$)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "mse_vs_snr.png", dpi=150)
    plt.close(fig)
    return csv_path


def export_gain_vs_t(results_path, out_dir) -> Path:
    """Fig. 6/9-style data: average beamforming gain against frame count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = ResultTable.read_csv(results_path)
    cells = _aggregate(table)
    rows = []
    for (method, frames) in sorted(cells, key=lambda k: (k[0], k[1])):
        cell = cells[(method, frames)]
        gain_db = 10.0 * np.log10(cell["mean"]) if cell["mean"] > 0 else float("-inf")
        rows.append([
            method, f"{frames:.17g}", f"{cell['mean']:.17g}", f"{gain_db:.17g}",
            "" if cell["std_error"] is None else f"{cell['std_error']:.17g}",
            cell["seeds"],
        ])
    csv_path = out_dir / "gain_vs_t.csv"
    _write_rows(csv_path, ["method", "frames", "gain_mean", "gain_db",
                           "std_error", "seeds"], rows)

    fig, ax = plt.subplots(figsize=(6, 4.2))
    for method in sorted({m for m, _ in cells}):
        pts = sorted((t, cells[(m2, t)]["mean"]) for m2, t in cells if m2 == method)
        ax.plot([p[0] for p in pts], [10 * np.log10(p[1]) for p in pts],
                marker="s", label=method)
    ax.set_xlabel("sensing frames T")
    ax.set_ylabel("average beamforming gain (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "gain_vs_t.png", dpi=150)
    plt.close(fig)
    return csv_path


# ---------------------------------------------------------------------------
# episode replays (trained checkpoint required)


def _load_active(cfg: ExperimentConfig, task, seed: int, cache_dir: Path):
    chan = cfg.channel_config()
    elements = chan.antennas if isinstance(chan, chx.MmWaveConfig) else chan.elements
    paths = chan.paths if isinstance(chan, chx.MmWaveConfig) else 1
    key = cache_key("active", cfg, task, seed)
    path = cache_dir / f"active-{key}.npz"
    if not path.exists():
        raise FileNotFoundError(
            f"no cached checkpoint for seed {seed} at {path}; run the experiment first"
        )
    params = policy.AgentParams.create(
        task, cfg.train_config(seed).arch, elements, paths, RandomStream(seed).child(0)
    )
    arrays, _ = nn.load_params(path)
    params.load_arrays(arrays)
    return params


def _replay_episode(cfg: ExperimentConfig, sweep_value, seed: int, phi: float,
                    episode_seed: int, cache_dir: Path) -> tuple:
    task = cfg.task_at(sweep_value)
    chan = cfg.channel_config()
    if not isinstance(chan, chx.MmWaveConfig):
        raise ValueError("episode replays are defined for the mmWave channel")
    params = _load_active(cfg, task, seed, cache_dir)
    # known unit fading, as in the posterior visualization protocol
    channel = chx.assemble_mmwave(chan, [phi], [1.0])
    record = policy.run_episode(channel, params, task, RandomStream(episode_seed))
    return task, chan, record


def export_beam_pattern(cfg: ExperimentConfig, sweep_value, seed: int, phi: float,
                        episode_seed: int, out_dir, cache_dir=None,
                        grid_points: int = 361) -> Path:
    """Per-frame beam patterns of a replayed episode's sensing vectors."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = Path(cache_dir) if cache_dir else Path(cfg.output_dir) / "cache"
    task, chan, record = _replay_episode(cfg, sweep_value, seed, phi, episode_seed, cache)
    angles = np.linspace(chan.phi_min, chan.phi_max, grid_points)
    rows = []
    patterns = []
    for t, w in enumerate(record.sensing_vectors):
        vec = chx.SensingVector(
            chx.ComplexVector.from_complex(w), task.constraint
        )
        gains = chx.beam_pattern(vec, angles, chan.spacing)
        patterns.append(gains)
        for a, g in zip(angles, gains):
            rows.append([t + 1, f"{a:.17g}", f"{np.degrees(a):.17g}", f"{g:.17g}"])
    csv_path = out_dir / "beam_pattern.csv"
    _write_rows(csv_path, ["frame", "angle_rad", "angle_deg", "gain"], rows)

    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    for t, gains in enumerate(patterns):
        ax.plot(np.degrees(angles), gains, label=f"frame {t + 1}", alpha=0.8)
    ax.axvline(np.degrees(phi), color="k", linestyle="--", linewidth=1,
               label="true AoA")
    ax.set_xlabel("angle (deg)")
    ax.set_ylabel(r"$|w^H a(\phi)|^2$")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(out_dir / "beam_pattern.png", dpi=150)
    plt.close(fig)
    return csv_path


def export_posterior_trace(cfg: ExperimentConfig, sweep_value, seed: int, phi: float,
                           episode_seed: int, out_dir, cache_dir=None) -> Path:
    """Grid-posterior evolution of a replayed episode, fading known (=1)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = Path(cache_dir) if cache_dir else Path(cfg.output_dir) / "cache"
    task, chan, record = _replay_episode(cfg, sweep_value, seed, phi, episode_seed, cache)
    grid = bl.build_grid(chan, cfg.baselines["grid_size"])
    post = bl.Posterior.uniform(grid.size)
    traces = [post.mass.copy()]
    for w, y in zip(record.sensing_vectors, record.measurements):
        post = bl.posterior_update(post, y, w, 1.0, task.pilot_power, 1.0, grid)
        traces.append(post.mass.copy())
    rows = []
    for frame, mass in enumerate(traces):
        for a, m in zip(grid.points, mass):
            rows.append([frame, f"{a:.17g}", f"{np.degrees(a):.17g}", f"{m:.17g}"])
    csv_path = out_dir / "posterior_trace.csv"
    _write_rows(csv_path, ["frame", "angle_rad", "angle_deg", "mass"], rows)

    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    show = sorted(set([0, 1, len(traces) // 2, len(traces) - 1]))
    for frame in show:
        ax.plot(np.degrees(grid.points), traces[frame], label=f"after frame {frame}")
    ax.axvline(np.degrees(phi), color="k", linestyle="--", linewidth=1,
               label="true AoA")
    ax.set_xlabel("angle (deg)")
    ax.set_ylabel("posterior mass")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "posterior_trace.png", dpi=150)
    plt.close(fig)
    return csv_path
