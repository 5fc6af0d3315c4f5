"""Config-driven experiment runner.

Per (seed, sweep value, method): train whatever needs training (cached by a
hash of everything that shapes the model), evaluate on a shared seeded test
set, and append one result row.  All methods at one sweep point consume the
identical test channels and noise substreams, so comparisons are paired.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from activesense import baselines as bl
from activesense import channels as chx
from activesense import nn
from activesense import policy
from activesense.config import ExperimentConfig
from activesense.numerics import RandomStream
from activesense.policy import EpisodeBatch, TaskSpec

logger = logging.getLogger(__name__)


@dataclass
class ResultRow:
    method: str
    sweep_value: float
    metric_mean: float
    std_error: float | None
    n_episodes: int
    seed: int
    config_hash: str


class ResultTable:
    """Rows of experiment results with deterministic CSV serialization."""

    COLUMNS = ("method", "sweep_value", "metric_mean", "std_error",
               "n_episodes", "seed", "config_hash")

    def __init__(self, rows: list[ResultRow] | None = None):
        self.rows: list[ResultRow] = rows or []

    def append(self, row: ResultRow) -> None:
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for r in self.rows:
                writer.writerow([
                    r.method,
                    f"{r.sweep_value:.17g}",
                    f"{r.metric_mean:.17g}",
                    "" if r.std_error is None else f"{r.std_error:.17g}",
                    r.n_episodes,
                    r.seed,
                    r.config_hash,
                ])

    @classmethod
    def read_csv(cls, path) -> "ResultTable":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(ResultRow(
                    method=rec["method"],
                    sweep_value=float(rec["sweep_value"]),
                    metric_mean=float(rec["metric_mean"]),
                    std_error=float(rec["std_error"]) if rec["std_error"] else None,
                    n_episodes=int(rec["n_episodes"]),
                    seed=int(rec["seed"]),
                    config_hash=rec["config_hash"],
                ))
        return cls(rows)


# ---------------------------------------------------------------------------
# shared test sets


@dataclass
class TestSet:
    """Channels plus per-frame noise shared by every method at a sweep point."""

    batch: EpisodeBatch
    # mmWave extras for the closed-form baselines
    phis: np.ndarray | None = None
    alphas: np.ndarray | None = None


def build_test_set(cfg: ExperimentConfig, task: TaskSpec, sweep_index: int) -> TestSet:
    """Channels keyed by the evaluation seed only; noise also keyed by sweep.

    Keeping channels common across sweep points pairs the whole sweep.
    """
    chan = cfg.channel_config()
    n = cfg.evaluation.episodes
    root = RandomStream(cfg.evaluation.seed)
    if isinstance(chan, chx.MmWaveConfig):
        phis, alphas, h = chx.sample_mmwave_batch(chan, root.child(0), n)
        order = np.argsort(-np.abs(alphas), axis=1, kind="stable")
        phis_sorted = np.take_along_axis(phis, order, axis=1)
        alphas_sorted = np.take_along_axis(alphas, order, axis=1)
        g = root.child(1, sweep_index).generator()
        z = g.normal(0, np.sqrt(0.5), size=(2, n, task.frames, chan.antennas))
        batch = EpisodeBatch(
            h=h, noise=z[0] + 1j * z[1], pairing="hermitian", noise_variance=1.0,
            aoa_truth=phis_sorted, alphas=alphas_sorted,
        )
        return TestSet(batch=batch, phis=phis_sorted, alphas=alphas_sorted)
    _, _, h_c = chx.sample_ris_batch(chan, root.child(0), n)
    g = root.child(1, sweep_index).generator()
    nz = g.normal(0, np.sqrt(chan.noise_variance / 2.0), size=(2, n, task.frames))
    batch = EpisodeBatch(
        h=h_c, noise=nz[0] + 1j * nz[1], pairing="transpose",
        noise_variance=chan.noise_variance,
    )
    return TestSet(batch=batch)


# ---------------------------------------------------------------------------
# trained-model cache


def cache_key(kind: str, cfg: ExperimentConfig, task: TaskSpec, seed: int) -> str:
    payload = {
        "kind": kind,
        "task": {
            "task": task.task,
            "constraint": task.constraint,
            "coherence": task.coherence,
            "frames": task.frames,
            "pilot_power": task.pilot_power,
            "include_snr_feature": task.include_snr_feature,
        },
        "channel": cfg.channel,
        "training": cfg.training,
        "seed": seed,
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _publish(path: Path, write_fn) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    write_fn(tmp)
    os.replace(tmp, path)


def _elements_paths(chan) -> tuple[int, int]:
    if isinstance(chan, chx.MmWaveConfig):
        return chan.antennas, chan.paths
    return chan.elements, 1


def ensure_active(cfg: ExperimentConfig, task: TaskSpec, seed: int,
                  cache_dir: Path) -> policy.AgentParams:
    """Return trained agent parameters, training only on cache miss."""
    chan = cfg.channel_config()
    elements, paths = _elements_paths(chan)
    train_cfg = cfg.train_config(seed)
    key = cache_key("active", cfg, task, seed)
    path = cache_dir / f"active-{key}.npz"
    params = policy.AgentParams.create(
        task, train_cfg.arch, elements, paths, RandomStream(seed).child(0)
    )
    if path.exists():
        arrays, _ = nn.load_params(path)
        params.load_arrays(arrays)
        return params
    logger.info("training active policy (seed %d, key %s)", seed, key)
    params, history = policy.train(task, chan, train_cfg)
    _publish(path, lambda p: nn.save_params(p, params.all_arrays(), cfg.config_hash()))
    _publish(cache_dir / f"active-{key}-history.csv",
             lambda p: policy.write_history_csv(p, history))
    return params


def ensure_nonadaptive(cfg: ExperimentConfig, task: TaskSpec, seed: int, variant: str,
                       cache_dir: Path) -> bl.NonadaptiveParams:
    chan = cfg.channel_config()
    elements, _ = _elements_paths(chan)
    train_cfg = cfg.train_config(seed)
    kind = f"nonadaptive-{variant}"
    key = cache_key(kind, cfg, task, seed)
    path = cache_dir / f"{kind}-{key}.npz"
    params = bl.create_nonadaptive(
        task, elements, tuple(train_cfg.arch.sensing_hidden),
        f"{variant}-fixed", RandomStream(seed).child(0),
    )
    if path.exists():
        arrays, _ = nn.load_params(path)
        params.load_arrays(arrays)
        return params
    logger.info("training %s design (seed %d, key %s)", kind, seed, key)
    params, history = bl.train_nonadaptive(task, chan, f"{variant}-fixed", train_cfg)
    _publish(path, lambda p: nn.save_params(p, params.all_arrays(), cfg.config_hash()))
    _publish(cache_dir / f"{kind}-{key}-history.csv",
             lambda p: policy.write_history_csv(p, history))
    return params


# ---------------------------------------------------------------------------
# per-method evaluation (returns per-episode metric arrays)


def _measurements_for_fixed_sensing(task: TaskSpec, test: TestSet,
                                    sensing: np.ndarray) -> np.ndarray:
    """Pilot outcomes (episodes x T) for fixed per-frame sensing vectors."""
    batch = test.batch
    sqrt_p = np.sqrt(task.pilot_power)
    if batch.pairing == "hermitian":
        signal = sqrt_p * np.einsum("mt,bm->bt", sensing.conj(), batch.h)
        noise = np.einsum("mt,btm->bt", sensing.conj(), batch.noise)
        return signal + noise
    signal = sqrt_p * np.einsum("mt,bm->bt", sensing, batch.h)
    return signal + batch.noise


def _gain_per_episode(h: np.ndarray, v: np.ndarray, pairing: str) -> np.ndarray:
    if pairing == "hermitian":
        return np.abs(np.sum(v.conj() * h, axis=-1)) ** 2
    return np.abs(np.sum(v * h, axis=-1)) ** 2


def eval_omp(cfg: ExperimentConfig, task: TaskSpec, seed: int, test: TestSet) -> np.ndarray:
    chan = cfg.channel_config()
    grid = bl.build_grid(chan, cfg.baselines["grid_size"])
    rng = RandomStream(cfg.evaluation.seed).child(3, 0, seed)
    sensing = np.stack(
        [chx.random_sensing(task.constraint, chan.antennas, rng.child(t)).v.as_complex()
         for t in range(task.frames)], axis=1,
    )  # (M, T)
    ys = _measurements_for_fixed_sensing(task, test, sensing)
    n = test.batch.count
    out = np.empty(n)
    for i in range(n):
        if task.task == "aoa-estimation":
            angles, _ = bl.omp_recover(ys[i], sensing, grid, chan.paths, task.pilot_power)
            out[i] = float(np.sum((angles - test.phis[i]) ** 2))
        else:
            est = bl.omp_channel_estimate(ys[i], sensing, grid, chan.paths,
                                          task.pilot_power)
            v = bl.mrt_precoder(est).v.as_complex()
            out[i] = _gain_per_episode(test.batch.h[i], v, "hermitian")
    return out


def eval_hiebs(cfg: ExperimentConfig, task: TaskSpec, seed: int, test: TestSet) -> np.ndarray:
    chan = cfg.channel_config()
    n_grid = 2 ** (task.frames // 2)
    grid = bl.build_grid(chan, n_grid)
    book = bl.build_hier_codebook(grid)
    sqrt_p = np.sqrt(task.pilot_power)
    n = test.batch.count
    out = np.empty(n)
    for i in range(n):
        h = test.batch.h[i]
        slot = {"t": 0}

        def measure(w):
            y = sqrt_p * np.vdot(w, h) + np.vdot(w, test.batch.noise[i, slot["t"]])
            slot["t"] += 1
            return y

        angle, _, pilots = bl.hiebs_align(measure, book)
        assert pilots == task.frames
        out[i] = (angle - test.phis[i, 0]) ** 2
    return out


def eval_hiepm(cfg: ExperimentConfig, task: TaskSpec, seed: int, test: TestSet) -> np.ndarray:
    chan = cfg.channel_config()
    grid = bl.build_grid(chan, cfg.baselines["grid_size"])
    book = bl.build_hier_codebook(grid)
    sqrt_p = np.sqrt(task.pilot_power)
    n = test.batch.count
    out = np.empty(n)
    for i in range(n):
        h = test.batch.h[i]
        alpha = test.alphas[i, 0]  # known-fading assumption of posterior matching
        post = bl.Posterior.uniform(grid.size)
        for t in range(task.frames):
            w, _, _ = bl.hiepm_select(post, book)
            y = sqrt_p * np.vdot(w, h) + np.vdot(w, test.batch.noise[i, t])
            post = bl.posterior_update(post, y, w, alpha, task.pilot_power, 1.0, grid)
        est = grid.points[post.argmax()]
        out[i] = (est - test.phis[i, 0]) ** 2
    return out


def eval_lmmse_phase_match(cfg: ExperimentConfig, task: TaskSpec, seed: int,
                           test: TestSet) -> np.ndarray:
    chan = cfg.channel_config()
    rng = RandomStream(cfg.evaluation.seed).child(3, 1, seed)
    sensing = np.stack(
        [chx.random_sensing(chx.UNIT_MODULUS, chan.elements, rng.child(t)).v.as_complex()
         for t in range(task.frames)]
    )  # (T, N)
    _, _, draws = chx.sample_ris_batch(chan, RandomStream(cfg.evaluation.seed).child(4),
                                       cfg.baselines["lmmse_prior_draws"])
    prior = bl.estimate_channel_prior(draws)
    ys = np.sqrt(task.pilot_power) * np.einsum("tm,bm->bt", sensing, test.batch.h) \
        + test.batch.noise
    n = test.batch.count
    out = np.empty(n)
    for i in range(n):
        est = bl.lmmse_estimate(ys[i], sensing, prior, task.pilot_power,
                                chan.noise_variance)
        v = bl.phase_match(est).v.as_complex()
        out[i] = _gain_per_episode(test.batch.h[i], v, "transpose")
    return out


def eval_oracle(task: TaskSpec, test: TestSet) -> np.ndarray:
    h = test.batch.h
    if task.task == "ris-reflection":
        return np.sum(np.abs(h), axis=1) ** 2
    return np.sum(np.abs(h) ** 2, axis=1)


def evaluate_method(method: str, cfg: ExperimentConfig, task: TaskSpec, seed: int,
                    test: TestSet, cache_dir: Path) -> np.ndarray:
    if method == "active":
        params = ensure_active(cfg, task, seed, cache_dir)
        graph = policy.build_episode_graph(task, params, test.batch, "infer")
        return graph.forward()["per_episode"]
    if method in ("nonadaptive-random", "nonadaptive-learned"):
        variant = method.split("-", 1)[1]
        params = ensure_nonadaptive(cfg, task, seed, variant, cache_dir)
        graph = bl.build_nonadaptive_graph(task, params, test.batch, "infer")
        return graph.forward()["per_episode"]
    if method == "omp":
        return eval_omp(cfg, task, seed, test)
    if method == "hiebs":
        return eval_hiebs(cfg, task, seed, test)
    if method == "hiepm":
        return eval_hiepm(cfg, task, seed, test)
    if method == "lmmse-phase-match":
        return eval_lmmse_phase_match(cfg, task, seed, test)
    if method == "mrt-oracle":
        return eval_oracle(task, test)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# the experiment loop


def _job(cfg: ExperimentConfig, seed: int, sweep_index: int, method: str,
         cache_dir: Path) -> ResultRow:
    sweep_value = cfg.sweep.values[sweep_index]
    task = cfg.task_at(sweep_value)
    test = build_test_set(cfg, task, sweep_index)
    per_episode = evaluate_method(method, cfg, task, seed, test, cache_dir)
    summary = policy.summarize_metric(per_episode, task)
    return ResultRow(
        method=method,
        sweep_value=float(sweep_value),
        metric_mean=summary["mean"],
        std_error=summary["std_error"],
        n_episodes=summary["n"],
        seed=seed,
        config_hash=cfg.config_hash(),
    )


def _job_by_spec(args) -> tuple[int, ResultRow]:
    index, cfg, seed, sweep_index, method, cache_dir = args
    return index, _job(cfg, seed, sweep_index, method, Path(cache_dir))


def run_experiment(cfg: ExperimentConfig, output_dir=None, workers: int = 1,
                   cache_dir=None) -> ResultTable:
    """Run every (seed, sweep value, method) cell and write results.csv.

    Single-worker runs are bit-deterministic given (config hash, seed); with
    several workers the jobs fan out over processes and the table is
    reassembled in the deterministic order.
    """
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(cache_dir) if cache_dir else out / "cache"
    cache.mkdir(parents=True, exist_ok=True)

    jobs = []
    index = 0
    for seed in cfg.seeds:
        for sweep_index in range(len(cfg.sweep.values)):
            for method in cfg.methods:
                jobs.append((index, cfg, seed, sweep_index, method, str(cache)))
                index += 1

    rows: list[ResultRow | None] = [None] * len(jobs)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for idx, row in pool.map(_job_by_spec, jobs):
                rows[idx] = row
    else:
        for job in jobs:
            idx, row = _job_by_spec(job)
            rows[idx] = row

    table = ResultTable([r for r in rows if r is not None])
    table.write_csv(out / "results.csv")
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.canonical_dict(), fh, indent=2, sort_keys=True)
    return table


def clean_cache(cfg: ExperimentConfig, output_dir=None, cache_dir=None) -> int:
    """Delete cached checkpoints and histories; returns the file count."""
    out = Path(output_dir or cfg.output_dir)
    cache = Path(cache_dir) if cache_dir else out / "cache"
    if not cache.exists():
        return 0
    removed = 0
    for path in sorted(cache.iterdir()):
        if path.suffix in (".npz", ".csv"):
            path.unlink()
            removed += 1
    return removed
