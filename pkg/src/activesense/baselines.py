"""Classical comparison methods for beam and reflection alignment.

Covers the sparse-recovery route (OMP over a steering dictionary), the
hierarchical codebook searched by bisection or by posterior matching, the
grid posterior engine itself, LMMSE channel estimation with phase matching
for the RIS link, and the closed-form optima (MRT, phase matching) used as
upper bounds.  The nonadaptive learned designs (a feedforward network fed by
fixed sensing vectors) live here too and share the policy module's training
loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from activesense import autodiff as ad
from activesense import channels as chx
from activesense import nn
from activesense import policy
from activesense.autodiff import Graph
from activesense.numerics import ComplexVector, RandomStream

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# AoA grid and dictionary


@dataclass
class AoaGrid:
    """Uniform angle grid with its steering-vector dictionary (M x N)."""

    points: np.ndarray
    dictionary: np.ndarray
    spacing: float

    @property
    def size(self) -> int:
        return self.points.size


def build_grid(cfg: chx.MmWaveConfig, n: int) -> AoaGrid:
    """N grid angles spanning [phi_min, phi_max] inclusive."""
    if n < 2:
        raise ValueError(f"grid needs at least 2 points, got {n}")
    points = np.linspace(cfg.phi_min, cfg.phi_max, n)
    dictionary = chx.array_response_matrix(points, cfg.antennas, cfg.spacing)
    return AoaGrid(points=points, dictionary=dictionary, spacing=cfg.spacing)


# ---------------------------------------------------------------------------
# orthogonal matching pursuit


def omp_recover(
    y: np.ndarray,
    sensing: np.ndarray,
    grid: AoaGrid,
    paths: int,
    power: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy sparse AoA recovery from T beamformed pilots.

    ``sensing`` holds the T sensing vectors as columns (M x T); the effective
    dictionary is sqrt(P) W^H A.  Each iteration picks the atom with the
    largest norm-weighted residual correlation (ties to the lowest grid
    index), then re-solves least squares on the selected set.  Returns grid
    angles sorted by recovered amplitude strength, with their amplitudes.
    """
    y = np.asarray(y, dtype=np.complex128)
    t = y.size
    if t < paths:
        raise ValueError(f"need at least {paths} measurements, got {t}")
    phi_mat = np.sqrt(power) * sensing.conj().T @ grid.dictionary  # (T, N)
    col_norm = np.linalg.norm(phi_mat, axis=0)
    col_norm = np.where(col_norm > 0, col_norm, 1.0)
    residual = y.copy()
    chosen: list[int] = []
    amplitudes = np.zeros(paths, dtype=np.complex128)
    for _ in range(paths):
        corr = np.abs(phi_mat.conj().T @ residual) / col_norm
        corr[chosen] = -1.0
        best = int(np.argmax(corr))  # argmax takes the lowest index on ties
        chosen.append(best)
        sub = phi_mat[:, chosen]
        try:
            coef, _, rank, _ = np.linalg.lstsq(sub, y, rcond=None)
            if rank < len(chosen):
                raise np.linalg.LinAlgError("rank deficient")
        except np.linalg.LinAlgError:
            logger.warning("rank-deficient OMP sub-dictionary; using pseudo-inverse")
            coef = np.linalg.pinv(sub) @ y
        residual = y - sub @ coef
    amplitudes = coef
    order = np.argsort(-np.abs(amplitudes), kind="stable")
    idx = np.asarray(chosen)[order]
    return grid.points[idx], np.asarray(amplitudes)[order]


def omp_channel_estimate(
    y: np.ndarray,
    sensing: np.ndarray,
    grid: AoaGrid,
    paths: int,
    power: float,
) -> ComplexVector:
    """Sparse channel reconstruction sum_l amp_l a(phi_l) from OMP output."""
    angles, amps = omp_recover(y, sensing, grid, paths, power)
    steer = chx.array_response_matrix(angles, grid.dictionary.shape[0], grid.spacing)
    return ComplexVector.from_complex(steer @ amps)


# ---------------------------------------------------------------------------
# hierarchical codebook


@dataclass
class HierCodebook:
    """Per-stage sector codewords; stage s holds 2**(s+1) vectors."""

    codewords: list[np.ndarray]  # stage s: (2**(s+1), M) rows, unit norm
    grid: AoaGrid

    @property
    def stages(self) -> int:
        return len(self.codewords)

    def sector_bounds(self, stage: int, sector: int) -> tuple[int, int]:
        """Grid-index range [lo, hi) covered by a sector (0-based stage)."""
        width = self.grid.size // (2 ** (stage + 1))
        return sector * width, (sector + 1) * width

    def sector_midpoint(self, stage: int, sector: int) -> float:
        lo, hi = self.sector_bounds(stage, sector)
        return float(self.grid.points[lo:hi].mean())


def build_hier_codebook(grid: AoaGrid, design: str = "sector-sum") -> HierCodebook:
    """Sector beams over a power-of-two grid, unit norm per codeword.

    Each stage-s sector is described by a ones-vector g on its grid indices.
    ``design='sector-sum'`` (default) takes w proportional to A g, the sum of
    the sector's steering vectors: its response peaks inside its own sector
    at every stage, which keeps the noiseless bisection descent exact even
    when single-point sectors sit below the array's resolution.
    ``design='least-squares'`` takes w proportional to pinv(A^H) g, the
    flattest in-sector pattern; its fine-stage beams lose sector dominance
    near the resolution limit, so the bisection can land on a neighbor.
    """
    n = grid.size
    if n < 2 or n & (n - 1):
        raise ValueError(f"grid size must be a power of two, got {n}")
    if design == "sector-sum":
        mapper = grid.dictionary
    elif design == "least-squares":
        mapper = np.linalg.pinv(grid.dictionary.conj().T)  # (M, N)
    else:
        raise ValueError(f"unknown codebook design {design!r}")
    stages = int(np.log2(n))
    codewords = []
    for stage in range(stages):
        sectors = 2 ** (stage + 1)
        width = n // sectors
        stage_words = np.empty((sectors, grid.dictionary.shape[0]), dtype=np.complex128)
        for k in range(sectors):
            g = np.zeros(n)
            g[k * width : (k + 1) * width] = 1.0
            w = mapper @ g
            stage_words[k] = w / np.linalg.norm(w)
        codewords.append(stage_words)
    return HierCodebook(codewords=codewords, grid=grid)


def hiebs_align(measure, codebook: HierCodebook) -> tuple[float, int, int]:
    """Bisection descent through the codebook.

    ``measure(w)`` returns one complex pilot observation for sensing vector
    ``w`` (a unit-norm complex array); the search probes both children of
    the current sector at every stage (2 pilots per stage) and keeps the
    stronger |measurement|, breaking exact ties toward the lower index.
    Returns (sector midpoint angle, final sector index, pilots used).
    """
    sector = 0
    pilots = 0
    for stage in range(codebook.stages):
        left, right = 2 * sector, 2 * sector + 1
        y_left = abs(measure(codebook.codewords[stage][left]))
        y_right = abs(measure(codebook.codewords[stage][right]))
        pilots += 2
        sector = left if y_left >= y_right else right
    angle = codebook.sector_midpoint(codebook.stages - 1, sector)
    return angle, sector, pilots


# ---------------------------------------------------------------------------
# grid posterior engine


@dataclass
class Posterior:
    """Probability mass over the AoA grid points."""

    mass: np.ndarray

    def __post_init__(self) -> None:
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if np.any(self.mass < 0) or abs(self.mass.sum() - 1.0) > 1e-12:
            raise ValueError("posterior mass must be non-negative and sum to 1")

    @classmethod
    def uniform(cls, n: int) -> "Posterior":
        return cls(np.full(n, 1.0 / n))

    def entropy(self) -> float:
        p = self.mass[self.mass > 0]
        return float(-(p * np.log(p)).sum())

    def argmax(self) -> int:
        return int(np.argmax(self.mass))


def _log_likelihood(y, w, alpha, power, sigma2, grid: AoaGrid) -> np.ndarray:
    pred = np.sqrt(power) * (w.conj() @ grid.dictionary) * alpha
    return -np.abs(y - pred) ** 2 / sigma2


def posterior_update(
    prior: Posterior,
    y: complex,
    w: np.ndarray,
    alpha: complex,
    power: float,
    sigma2: float,
    grid: AoaGrid,
) -> Posterior:
    """Bayes update of the grid posterior for one beamformed observation.

    The fading coefficient is treated as known (the classical posterior
    matching assumption).  Log-domain with max subtraction; a fully
    underflowed posterior resets to uniform with a logged flag.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive for a posterior update")
    log_mass = np.where(prior.mass > 0, np.log(prior.mass, where=prior.mass > 0), -np.inf)
    log_mass = log_mass + _log_likelihood(y, np.asarray(w), alpha, power, sigma2, grid)
    finite = np.isfinite(log_mass)
    if not finite.any():
        logger.warning("posterior underflow; resetting to uniform")
        return Posterior.uniform(prior.mass.size)
    log_mass = log_mass - log_mass[finite].max()
    mass = np.where(finite, np.exp(log_mass, where=finite), 0.0)
    total = mass.sum()
    if total <= 0 or not np.isfinite(total):
        logger.warning("posterior underflow; resetting to uniform")
        return Posterior.uniform(prior.mass.size)
    return Posterior(mass / total)


def posterior_update_batch(
    prior: Posterior,
    ys,
    ws,
    alpha: complex,
    power: float,
    sigma2: float,
    grid: AoaGrid,
) -> Posterior:
    """Single update with the product likelihood of several observations."""
    log_mass = np.where(prior.mass > 0, np.log(prior.mass, where=prior.mass > 0), -np.inf)
    for y, w in zip(ys, ws):
        log_mass = log_mass + _log_likelihood(y, np.asarray(w), alpha, power, sigma2, grid)
    log_mass = log_mass - log_mass[np.isfinite(log_mass)].max()
    mass = np.exp(log_mass)
    return Posterior(mass / mass.sum())


def hiepm_select(post: Posterior, codebook: HierCodebook) -> tuple[np.ndarray, int, int]:
    """Posterior-matched codeword choice (simplified mass-threshold rule).

    Finds the deepest stage at which some sector holds at least half the
    posterior mass and returns that stage's maximum-mass codeword; if not
    even a stage-0 sector reaches one half, the stage-0 maximum-mass sector
    is used.  Ties break toward the lower sector index.
    """
    chosen_stage = 0
    for stage in reversed(range(codebook.stages)):
        sectors = 2 ** (stage + 1)
        width = post.mass.size // sectors
        sector_mass = post.mass.reshape(sectors, width).sum(axis=1)
        if sector_mass.max() >= 0.5:
            chosen_stage = stage
            break
    sectors = 2 ** (chosen_stage + 1)
    width = post.mass.size // sectors
    sector_mass = post.mass.reshape(sectors, width).sum(axis=1)
    sector = int(np.argmax(sector_mass))
    return codebook.codewords[chosen_stage][sector], chosen_stage, sector


# ---------------------------------------------------------------------------
# LMMSE channel estimation (RIS link)


@dataclass
class ChannelPrior:
    """Sample mean and covariance of a channel vector population."""

    mean: np.ndarray
    covariance: np.ndarray


def estimate_channel_prior(samples: np.ndarray) -> ChannelPrior:
    """Empirical mean/covariance from draws stacked as rows."""
    samples = np.asarray(samples, dtype=np.complex128)
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.conj().T @ centered / (samples.shape[0] - 1)
    return ChannelPrior(mean=mean, covariance=cov)


def lmmse_estimate(
    y: np.ndarray,
    sensing: np.ndarray,
    prior: ChannelPrior,
    power: float,
    sigma2: float,
) -> ComplexVector:
    """Linear MMSE estimate of the cascaded channel from transpose pilots.

    The measurement stacks y = sqrt(P) W h + n with W holding one sensing
    vector per row (no conjugation, matching the reflection pairing) and
    n ~ CN(0, sigma2 I).  With prior mean mu and covariance C,
    h_hat = mu + C H^H (H C H^H + sigma2 I)^{-1} (y - H mu), H = sqrt(P) W.
    A singular innovation matrix gets a 1e-10 ridge and a logged flag.
    """
    y = np.asarray(y, dtype=np.complex128)
    sensing = np.asarray(sensing, dtype=np.complex128)
    if y.size == 0:
        return ComplexVector.from_complex(prior.mean.copy())
    h_op = np.sqrt(power) * sensing
    innovation = h_op @ prior.covariance @ h_op.conj().T + sigma2 * np.eye(y.size)
    rhs = y - h_op @ prior.mean
    try:
        solved = np.linalg.solve(innovation, rhs)
    except np.linalg.LinAlgError:
        logger.warning("singular LMMSE innovation matrix; adding 1e-10 ridge")
        solved = np.linalg.solve(innovation + 1e-10 * np.eye(y.size), rhs)
    estimate = prior.mean + prior.covariance @ h_op.conj().T @ solved
    return ComplexVector.from_complex(estimate)


# ---------------------------------------------------------------------------
# closed-form optima


def mrt_precoder(h: ComplexVector) -> chx.SensingVector:
    """Gain-optimal unit-norm precoder h / ||h||."""
    z = h.as_complex()
    norm = np.linalg.norm(z)
    if norm < 1e-12:
        logger.warning("zero channel for MRT; returning first basis vector")
        z = np.zeros_like(z)
        z[0] = 1.0
        return chx.SensingVector(ComplexVector.from_complex(z), chx.UNIT_NORM)
    return chx.SensingVector(ComplexVector.from_complex(z / norm), chx.UNIT_NORM)


def phase_match(h_c: ComplexVector) -> chx.SensingVector:
    """Unit-modulus reflection e^{-j angle(h)} maximizing |h^T v|^2."""
    z = h_c.as_complex()
    zero = np.abs(z) == 0
    if zero.any():
        logger.warning("phase match: %d zero entr(ies) pinned to phase 0", int(zero.sum()))
    v = np.exp(-1j * np.angle(z))
    return chx.SensingVector(ComplexVector.from_complex(v), chx.UNIT_MODULUS)


# ---------------------------------------------------------------------------
# nonadaptive DNN designs


@dataclass
class NonadaptiveParams:
    """Feedforward beamformer head plus the fixed sensing vectors it reads."""

    layers: list[policy.HeadLayer]
    sensing_raw: np.ndarray  # (T, 2*elements) pre-activation sensing leaves
    sensing_trainable: bool
    constraint: str

    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"fc.{i}.bn.gamma"] = layer.bn.gamma
            out[f"fc.{i}.bn.beta"] = layer.bn.beta
            out[f"fc.{i}.w"] = layer.dense.weight
            out[f"fc.{i}.b"] = layer.dense.bias
        if self.sensing_trainable:
            out["sensing.raw"] = self.sensing_raw
        return out

    def set_trainable(self, arrays: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            layer.bn.gamma = arrays[f"fc.{i}.bn.gamma"]
            layer.bn.beta = arrays[f"fc.{i}.bn.beta"]
            layer.dense.weight = arrays[f"fc.{i}.w"]
            layer.dense.bias = arrays[f"fc.{i}.b"]
        if self.sensing_trainable:
            self.sensing_raw = arrays["sensing.raw"]

    def all_arrays(self) -> dict[str, np.ndarray]:
        out = self.trainable()
        out["sensing.raw"] = self.sensing_raw
        for i, layer in enumerate(self.layers):
            for site in sorted(layer.bn.running_means):
                out[f"fc.{i}.bn.mean.{site}"] = layer.bn.running_means[site]
                out[f"fc.{i}.bn.var.{site}"] = layer.bn.running_vars[site]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.set_trainable({k: arrays[k] for k in self.trainable()})
        self.sensing_raw = arrays["sensing.raw"]
        for i, layer in enumerate(self.layers):
            layer.bn.running_means = {}
            layer.bn.running_vars = {}
            stem = f"fc.{i}.bn."
            for key, value in arrays.items():
                if key.startswith(stem + "mean."):
                    layer.bn.running_means[int(key.rsplit(".", 1)[1])] = value
                elif key.startswith(stem + "var."):
                    layer.bn.running_vars[int(key.rsplit(".", 1)[1])] = value

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.all_arrays().items()}

    def sensing_vectors(self) -> np.ndarray:
        """The constraint-satisfying sensing vectors, (T, elements) complex."""
        target = _sensing_target(self.constraint, self.sensing_raw.shape[1])
        rows = []
        for row in self.sensing_raw:
            if self.constraint == chx.UNIT_NORM:
                out = nn.normalize_unit_power(row)
            else:
                out = nn.normalize_modulus(row, target)
            half = out.size // 2
            rows.append(out[:half] + 1j * out[half:])
        return np.stack(rows)


def _sensing_target(constraint: str, m: int) -> float | None:
    if constraint == chx.UNIT_NORM:
        return None
    if constraint == chx.CONSTANT_MODULUS:
        return float(np.sqrt(2.0 / m))
    return 1.0


def create_nonadaptive(
    task: policy.TaskSpec,
    elements: int,
    hidden: tuple[int, ...],
    variant: str,
    rng: RandomStream,
) -> NonadaptiveParams:
    if variant not in ("random-fixed", "learned-fixed"):
        raise ValueError(f"unknown nonadaptive variant {variant!r}")
    if task.task == "aoa-estimation":
        raise ValueError("the nonadaptive designs output beamformers, not angles")
    m = 2 * elements
    in_dim = task.frames * (2 if task.coherence == "coherent" else 1)
    out_act = policy._constraint_activation(task.constraint, m)
    layers = policy._make_head(in_dim, tuple(hidden), m, out_act, rng.child(0))
    if variant == "random-fixed":
        vecs = [
            chx.random_sensing(task.constraint, elements, rng.child(1, t)).v
            for t in range(task.frames)
        ]
        raw = np.stack([v.stacked() for v in vecs])
    else:
        raw = rng.child(1).generator().normal(size=(task.frames, m))
    return NonadaptiveParams(
        layers=layers,
        sensing_raw=raw,
        sensing_trainable=variant == "learned-fixed",
        constraint=task.constraint,
    )


def build_nonadaptive_graph(
    task: policy.TaskSpec,
    params: NonadaptiveParams,
    batch: policy.EpisodeBatch,
    mode: str,
    dtype=np.float64,
) -> Graph:
    """T fixed measurements, concatenated features, one beamformer head."""
    m = batch.elements
    target = _sensing_target(task.constraint, 2 * m)
    sqrt_p = float(np.sqrt(task.pilot_power))

    def build(tape, p, inputs):
        b = batch.count
        hr = tape.constant(batch.h.real)
        hi = tape.constant(batch.h.imag)
        if params.sensing_trainable:
            raw = p["sensing.raw"]
            if task.constraint == chx.UNIT_NORM:
                sensing = ad.normalize_unit_rows(raw)
            else:
                sensing = ad.normalize_modulus_rows(raw, target)
        else:
            sensing = tape.constant(params.sensing_raw)
        # per-frame measurements: broadcast each fixed sensing row over the batch
        cols = []
        w1_all = ad.slice_cols(sensing, 0, m)
        w2_all = ad.slice_cols(sensing, m, 2 * m)
        for t in range(task.frames):
            w1 = ad.slice_rows(w1_all, t, t + 1)
            w2 = ad.slice_rows(w2_all, t, t + 1)
            if batch.pairing == "hermitian":
                zr = tape.constant(batch.noise[:, t].real)
                zi = tape.constant(batch.noise[:, t].imag)
                y_re = sqrt_p * ad.reduce_sum(w1 * hr + w2 * hi, axis=1) \
                    + ad.reduce_sum(w1 * zr + w2 * zi, axis=1)
                y_im = sqrt_p * ad.reduce_sum(w1 * hi - w2 * hr, axis=1) \
                    + ad.reduce_sum(w1 * zi - w2 * zr, axis=1)
            else:
                y_re = sqrt_p * ad.reduce_sum(w1 * hr - w2 * hi, axis=1) \
                    + tape.constant(batch.noise[:, t].real)
                y_im = sqrt_p * ad.reduce_sum(w1 * hi + w2 * hr, axis=1) \
                    + tape.constant(batch.noise[:, t].imag)
            if task.coherence == "coherent":
                cols.append(ad.reshape(y_re, (b, 1)))
                cols.append(ad.reshape(y_im, (b, 1)))
            else:
                cols.append(ad.reshape(ad.complex_abs(y_re, y_im), (b, 1)))
        feat = ad.concat(cols, axis=1)
        out = feat
        for i, layer in enumerate(params.layers):
            out = ad.batchnorm(out, p[f"fc.{i}.bn.gamma"], p[f"fc.{i}.bn.beta"],
                               layer.bn, mode)
            z = ad.linear(out, p[f"fc.{i}.w"], p[f"fc.{i}.b"])
            out = nn.apply_activation(z, layer.dense.activation, layer.dense.target_modulus)
        v1 = ad.slice_cols(out, 0, m)
        v2 = ad.slice_cols(out, m, 2 * m)
        if batch.pairing == "hermitian":
            u_re = ad.reduce_sum(v1 * hr + v2 * hi, axis=1)
            u_im = ad.reduce_sum(v1 * hi - v2 * hr, axis=1)
        else:
            u_re = ad.reduce_sum(v1 * hr - v2 * hi, axis=1)
            u_im = ad.reduce_sum(v1 * hi + v2 * hr, axis=1)
        per = ad.square(u_re) + ad.square(u_im)
        return {"loss": ad.neg(ad.reduce_mean(per)), "per_episode": per, "output": out}

    return Graph(build, params.trainable(), dtype=dtype)


def train_nonadaptive(
    task: policy.TaskSpec,
    chan_cfg,
    variant: str,
    cfg: policy.TrainConfig,
    hidden: tuple[int, ...] | None = None,
) -> tuple[NonadaptiveParams, list[dict]]:
    """Train the fixed-sensing feedforward beamformer design."""
    root = RandomStream(cfg.seed)
    elements = chan_cfg.antennas if isinstance(chan_cfg, chx.MmWaveConfig) else chan_cfg.elements
    hidden = tuple(hidden) if hidden is not None else tuple(cfg.arch.sensing_hidden)
    params = create_nonadaptive(task, elements, hidden, variant, root.child(0))
    val_batch = policy.make_batch(task, chan_cfg, root.child(1), cfg.val_size)
    refresh_size = int(np.clip(4 * cfg.batch_size, 128, 512))

    def step_batch(step):
        return policy.make_batch(task, chan_cfg, root.child(2, step), cfg.batch_size)

    def loss_and_grads(arrays, batch):
        params.set_trainable(arrays)
        graph = build_nonadaptive_graph(task, params, batch, "train", dtype=cfg.dtype)
        loss = float(graph.forward()["loss"])
        return loss, graph.backward()

    def refresh(arrays):
        params.set_trainable(arrays)
        for layer in params.layers:
            layer.bn.begin_refresh()
        try:
            for k in range(20):
                batch = policy.make_batch(task, chan_cfg, root.child(4, k), refresh_size)
                build_nonadaptive_graph(task, params, batch, "train", dtype=cfg.dtype).forward()
        finally:
            for layer in params.layers:
                layer.bn.end_refresh()

    def validation_loss(arrays):
        refresh(arrays)
        graph = build_nonadaptive_graph(task, params, val_batch, "infer", dtype=cfg.dtype)
        return float(graph.forward()["loss"])

    arrays, history = policy.run_training_loop(
        step_batch,
        loss_and_grads,
        validation_loss,
        params.trainable(),
        params.snapshot,
        params.load_arrays,
        cfg,
    )
    return params, history


def evaluate_nonadaptive(
    params: NonadaptiveParams, task: policy.TaskSpec, batch: policy.EpisodeBatch
) -> dict:
    graph = build_nonadaptive_graph(task, params, batch, "infer")
    per = graph.forward()["per_episode"]
    return policy.summarize_metric(per, task)
