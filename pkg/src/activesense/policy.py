"""The unrolled active-sensing episode and its training loop.

An LSTM tracks the measurement history in a fixed-size state; a dense head
maps each hidden state to the next constrained sensing vector; after the
final frame another dense head maps the cell state to the task output (AoA
estimates, a downlink precoder, or RIS reflection coefficients).  The whole
T-frame episode unrolls into a single differentiable graph with tied
weights, so stochastic-gradient training reaches every frame through exact
reverse-mode gradients, including the measurement step itself.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from activesense import autodiff as ad
from activesense import channels as chx
from activesense import nn
from activesense.autodiff import Graph
from activesense.numerics import ComplexVector, RandomStream

logger = logging.getLogger(__name__)

TASKS = ("aoa-estimation", "downlink-precoding", "ris-reflection")

# Scaling applied to the SNR (dB) before it enters the feature vector.
SNR_FEATURE_SCALE = 0.1

LSTM_KEYS = (
    "a_f", "a_i", "a_o", "a_c",
    "u_f", "u_i", "u_o", "u_c",
    "b_f", "b_i", "b_o", "b_c",
)


@dataclass(frozen=True)
class TaskSpec:
    """What one sensing episode is trying to accomplish."""

    task: str
    constraint: str
    frames: int
    pilot_power: float
    coherence: str = "coherent"
    include_snr_feature: bool | None = None

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.constraint not in chx.CONSTRAINTS:
            raise ValueError(f"unknown constraint {self.constraint!r}")
        if self.frames < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")
        if self.pilot_power < 0:
            raise ValueError(f"pilot_power must be >= 0, got {self.pilot_power}")
        if self.coherence not in ("coherent", "noncoherent"):
            raise ValueError(f"unknown coherence {self.coherence!r}")
        if self.task == "ris-reflection" and self.constraint != chx.UNIT_MODULUS:
            raise ValueError("ris-reflection requires the unit-modulus constraint")
        if self.task != "ris-reflection" and self.constraint == chx.UNIT_MODULUS:
            raise ValueError("unit-modulus is reserved for ris-reflection")
        if self.include_snr_feature is None:
            object.__setattr__(self, "include_snr_feature", self.task == "aoa-estimation")
        if self.include_snr_feature and self.task != "aoa-estimation":
            raise ValueError("the SNR feature is only used for AoA estimation")
        if self.include_snr_feature and self.pilot_power == 0:
            raise ValueError("the SNR feature is undefined at zero pilot power")

    @property
    def pairing(self) -> str:
        return "transpose" if self.task == "ris-reflection" else "hermitian"

    @property
    def feature_dim(self) -> int:
        base = 2 if self.coherence == "coherent" else 1
        return base + (1 if self.include_snr_feature else 0)

    def snr_db(self, noise_variance: float = 1.0) -> float:
        if self.pilot_power == 0:
            return -np.inf
        return 10.0 * np.log10(self.pilot_power / noise_variance)


@dataclass(frozen=True)
class ArchConfig:
    """Network sizes; defaults are desk scale, the full-scale sizes go in config."""

    state_size: int = 128
    sensing_hidden: tuple[int, ...] = (256, 256, 256)
    final_hidden: tuple[int, ...] | None = None
    final_input: str = "cell"  # "cell" feeds c_T to the final head, "hidden" feeds s_T

    def __post_init__(self) -> None:
        if self.final_input not in ("cell", "hidden"):
            raise ValueError(f"final_input must be 'cell' or 'hidden', got {self.final_input!r}")

    def resolved_final_hidden(self, task: str) -> tuple[int, ...]:
        if self.final_hidden is not None:
            return tuple(self.final_hidden)
        # AoA output is tiny, a single hidden layer suffices; beamformer heads
        # mirror the sensing head.
        if task == "aoa-estimation":
            return (self.state_size,)
        return tuple(self.sensing_hidden)


@dataclass
class HeadLayer:
    """Batch normalization followed by a dense layer."""

    bn: nn.BatchNormState
    dense: nn.DenseParams


def _constraint_activation(constraint: str, out_dim: int) -> tuple[str, float | None]:
    if constraint == chx.UNIT_NORM:
        return "unit-power", None
    if constraint == chx.CONSTANT_MODULUS:
        return "modulus", float(np.sqrt(2.0 / out_dim))
    return "modulus", 1.0


def _make_head(
    in_dim: int,
    hidden: tuple[int, ...],
    out_dim: int,
    out_activation: tuple[str, float | None],
    rng: RandomStream,
) -> list[HeadLayer]:
    layers = []
    dims = [in_dim, *hidden, out_dim]
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        act, target = out_activation if last else ("relu", None)
        layers.append(
            HeadLayer(
                bn=nn.BatchNormState.create(dims[i]),
                dense=nn.make_dense(dims[i], dims[i + 1], rng.child(i),
                                    activation=act, target_modulus=target),
            )
        )
    return layers


@dataclass
class AgentParams:
    """All trainable state of the active-sensing agent."""

    lstm: nn.LstmParams
    sensing: list[HeadLayer]
    final: list[HeadLayer]
    arch: ArchConfig

    @classmethod
    def create(
        cls,
        task: TaskSpec,
        arch: ArchConfig,
        elements: int,
        paths: int,
        rng: RandomStream,
    ) -> "AgentParams":
        m = 2 * elements
        out_dim = paths if task.task == "aoa-estimation" else m
        out_act = ("linear", None) if task.task == "aoa-estimation" else \
            _constraint_activation(task.constraint, m)
        sensing_act = _constraint_activation(task.constraint, m)
        return cls(
            lstm=nn.make_lstm(task.feature_dim, arch.state_size, rng.child(0)),
            sensing=_make_head(arch.state_size, tuple(arch.sensing_hidden), m,
                               sensing_act, rng.child(1)),
            final=_make_head(arch.state_size, arch.resolved_final_hidden(task.task),
                             out_dim, out_act, rng.child(2)),
            arch=arch,
        )

    # -- flat views -------------------------------------------------------

    def trainable(self) -> dict[str, np.ndarray]:
        out = {f"lstm.{k}": getattr(self.lstm, k) for k in LSTM_KEYS}
        for prefix, layers in (("sense", self.sensing), ("final", self.final)):
            for i, layer in enumerate(layers):
                out[f"{prefix}.{i}.bn.gamma"] = layer.bn.gamma
                out[f"{prefix}.{i}.bn.beta"] = layer.bn.beta
                out[f"{prefix}.{i}.w"] = layer.dense.weight
                out[f"{prefix}.{i}.b"] = layer.dense.bias
        return out

    def set_trainable(self, arrays: dict[str, np.ndarray]) -> None:
        for k in LSTM_KEYS:
            setattr(self.lstm, k, arrays[f"lstm.{k}"])
        for prefix, layers in (("sense", self.sensing), ("final", self.final)):
            for i, layer in enumerate(layers):
                layer.bn.gamma = arrays[f"{prefix}.{i}.bn.gamma"]
                layer.bn.beta = arrays[f"{prefix}.{i}.bn.beta"]
                layer.dense.weight = arrays[f"{prefix}.{i}.w"]
                layer.dense.bias = arrays[f"{prefix}.{i}.b"]

    def all_arrays(self) -> dict[str, np.ndarray]:
        """Trainable parameters plus per-frame batch-norm running statistics."""
        out = self.trainable()
        for prefix, layers in (("sense", self.sensing), ("final", self.final)):
            for i, layer in enumerate(layers):
                for site in sorted(layer.bn.running_means):
                    out[f"{prefix}.{i}.bn.mean.{site}"] = layer.bn.running_means[site]
                    out[f"{prefix}.{i}.bn.var.{site}"] = layer.bn.running_vars[site]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.set_trainable({k: arrays[k] for k in self.trainable()})
        for prefix, layers in (("sense", self.sensing), ("final", self.final)):
            for i, layer in enumerate(layers):
                layer.bn.running_means = {}
                layer.bn.running_vars = {}
                stem = f"{prefix}.{i}.bn."
                for key, value in arrays.items():
                    if key.startswith(stem + "mean."):
                        layer.bn.running_means[int(key.rsplit(".", 1)[1])] = value
                    elif key.startswith(stem + "var."):
                        layer.bn.running_vars[int(key.rsplit(".", 1)[1])] = value

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.all_arrays().items()}


# ---------------------------------------------------------------------------
# episode batches


@dataclass
class EpisodeBatch:
    """Channel realizations plus pre-drawn measurement noise for T frames."""

    h: np.ndarray  # (B, elements) complex gain vector (mmWave h or cascaded h_c)
    noise: np.ndarray  # (B, T, elements) complex for hermitian; (B, T) for transpose
    pairing: str
    noise_variance: float = 1.0
    aoa_truth: np.ndarray | None = None  # (B, paths), strength-ordered
    alphas: np.ndarray | None = None  # (B, paths) fading, same order as aoa_truth

    @property
    def count(self) -> int:
        return self.h.shape[0]

    @property
    def elements(self) -> int:
        return self.h.shape[1]


def make_batch(task: TaskSpec, chan_cfg, rng: RandomStream, count: int) -> EpisodeBatch:
    """Draw channels and per-frame noise for ``count`` episodes."""
    if isinstance(chan_cfg, chx.MmWaveConfig):
        phis, alphas, h = chx.sample_mmwave_batch(chan_cfg, rng.child(0), count)
        order = np.argsort(-np.abs(alphas), axis=1, kind="stable")
        phis_sorted = np.take_along_axis(phis, order, axis=1)
        alphas_sorted = np.take_along_axis(alphas, order, axis=1)
        g = rng.child(1).generator()
        z = g.normal(0, np.sqrt(0.5), size=(2, count, task.frames, chan_cfg.antennas))
        return EpisodeBatch(
            h=h,
            noise=z[0] + 1j * z[1],
            pairing="hermitian",
            noise_variance=1.0,
            aoa_truth=phis_sorted,
            alphas=alphas_sorted,
        )
    if isinstance(chan_cfg, chx.RisConfig):
        _, _, h_c = chx.sample_ris_batch(chan_cfg, rng.child(0), count)
        g = rng.child(1).generator()
        n = g.normal(0, np.sqrt(chan_cfg.noise_variance / 2.0), size=(2, count, task.frames))
        return EpisodeBatch(
            h=h_c,
            noise=n[0] + 1j * n[1],
            pairing="transpose",
            noise_variance=chan_cfg.noise_variance,
        )
    raise TypeError(f"unsupported channel config {type(chan_cfg).__name__}")


# ---------------------------------------------------------------------------
# features


def build_feature(y: complex, spec: TaskSpec, snr_db: float) -> np.ndarray:
    """Per-frame network input assembled from one measurement."""
    if spec.coherence == "coherent":
        cols = [y.real, y.imag]
    else:
        cols = [abs(y)]
    if spec.include_snr_feature:
        cols.append(snr_db * SNR_FEATURE_SCALE)
    return np.asarray(cols, dtype=np.float64)


# ---------------------------------------------------------------------------
# the unrolled episode graph


def _head_nodes(p, prefix, frame, layers, x, mode, tied):
    for i, layer in enumerate(layers):
        tag = f"{prefix}.{i}" if tied else f"{prefix}.{i}@{frame}"
        x = ad.batchnorm(
            x, p[f"{tag}.bn.gamma"], p[f"{tag}.bn.beta"], layer.bn, mode, site=frame
        )
        z = ad.linear(x, p[f"{tag}.w"], p[f"{tag}.b"])
        x = nn.apply_activation(z, layer.dense.activation, layer.dense.target_modulus)
    return x


def _lstm_nodes(p, frame, params, y, state, tied):
    prefix = "lstm" if tied else f"lstm@{frame}"
    nodes = {k: p[f"{prefix}.{k}"] for k in LSTM_KEYS}
    return nn.lstm_step(y, state, params.lstm, nodes=nodes)


def _measure_nodes(w, batch_consts, t, sqrt_p, pairing):
    m = batch_consts["elements"]
    w1 = ad.slice_cols(w, 0, m)
    w2 = ad.slice_cols(w, m, 2 * m)
    hr, hi = batch_consts["hr"], batch_consts["hi"]
    if pairing == "hermitian":
        zr, zi = batch_consts["zr"][t], batch_consts["zi"][t]
        y_re = sqrt_p * ad.reduce_sum(w1 * hr + w2 * hi, axis=1) \
            + ad.reduce_sum(w1 * zr + w2 * zi, axis=1)
        y_im = sqrt_p * ad.reduce_sum(w1 * hi - w2 * hr, axis=1) \
            + ad.reduce_sum(w1 * zi - w2 * zr, axis=1)
    else:
        y_re = sqrt_p * ad.reduce_sum(w1 * hr - w2 * hi, axis=1) + batch_consts["nr"][t]
        y_im = sqrt_p * ad.reduce_sum(w1 * hi + w2 * hr, axis=1) + batch_consts["ni"][t]
    return y_re, y_im


def _feature_nodes(tape, y_re, y_im, task: TaskSpec, snr_value, count):
    b = count
    if task.coherence == "coherent":
        cols = [ad.reshape(y_re, (b, 1)), ad.reshape(y_im, (b, 1))]
    else:
        cols = [ad.reshape(ad.complex_abs(y_re, y_im), (b, 1))]
    if task.include_snr_feature:
        cols.append(tape.constant(np.full((b, 1), snr_value)))
    return ad.concat(cols, axis=1) if len(cols) > 1 else cols[0]


def build_episode_graph(
    task: TaskSpec,
    params: AgentParams,
    batch: EpisodeBatch,
    mode: str,
    tie_weights: bool = True,
    dtype=np.float64,
) -> Graph:
    """Assemble the full unrolled episode as a differentiable graph.

    Outputs: ``loss`` (scalar), ``per_episode`` (B,), ``output`` (the final
    head's values), per-frame sensing vectors ``w_{t}`` and measurements
    ``y_re_{t}`` / ``y_im_{t}``.  With ``tie_weights=False`` every frame gets
    its own parameter copies (suffix ``@frame``), which exists to verify that
    tied gradients equal the summed per-copy gradients.
    """
    t_frames = task.frames
    leaves = params.trainable()
    if not tie_weights:
        untied = {}
        for name, arr in leaves.items():
            if name.startswith("final."):
                untied[name] = arr
            elif name.startswith("lstm."):
                stem, key = name.split(".", 1)
                for f in range(t_frames + 1):
                    untied[f"{stem}@{f}.{key}"] = arr.copy()
            else:
                stem, idx, key = name.split(".", 2)
                for f in range(t_frames):
                    untied[f"{stem}.{idx}@{f}.{key}"] = arr.copy()
        leaves = untied

    sqrt_p = float(np.sqrt(task.pilot_power))
    snr_value = task.snr_db(batch.noise_variance) * SNR_FEATURE_SCALE

    def build(tape, p, inputs):
        b = batch.count
        consts = {
            "elements": batch.elements,
            "hr": tape.constant(batch.h.real),
            "hi": tape.constant(batch.h.imag),
        }
        if batch.pairing == "hermitian":
            consts["zr"] = [tape.constant(batch.noise[:, t].real) for t in range(t_frames)]
            consts["zi"] = [tape.constant(batch.noise[:, t].imag) for t in range(t_frames)]
        else:
            consts["nr"] = [tape.constant(batch.noise[:, t].real) for t in range(t_frames)]
            consts["ni"] = [tape.constant(batch.noise[:, t].imag) for t in range(t_frames)]

        state = nn.LstmState(
            tape.constant(np.zeros((b, params.arch.state_size))),
            tape.constant(np.zeros((b, params.arch.state_size))),
        )
        feat = tape.constant(np.ones((b, task.feature_dim)))
        outputs = {}
        for t in range(t_frames):
            state = _lstm_nodes(p, t, params, feat, state, tie_weights)
            w = _head_nodes(p, "sense", t, params.sensing, state.s, mode, tie_weights)
            outputs[f"w_{t}"] = w
            y_re, y_im = _measure_nodes(w, consts, t, sqrt_p, batch.pairing)
            outputs[f"y_re_{t}"] = y_re
            outputs[f"y_im_{t}"] = y_im
            feat = _feature_nodes(tape, y_re, y_im, task, snr_value, b)
        state = _lstm_nodes(p, t_frames, params, feat, state, tie_weights)
        head_in = state.c if params.arch.final_input == "cell" else state.s
        # the final head is applied once, so it is never duplicated
        out = _head_nodes(p, "final", t_frames, params.final, head_in, mode, True)
        outputs["output"] = out

        if task.task == "aoa-estimation":
            truth = tape.constant(batch.aoa_truth)
            per = ad.reduce_sum(ad.square(out - truth), axis=1)
            loss = ad.reduce_mean(per)
        else:
            m = batch.elements
            v1 = ad.slice_cols(out, 0, m)
            v2 = ad.slice_cols(out, m, 2 * m)
            hr, hi = consts["hr"], consts["hi"]
            if batch.pairing == "hermitian":
                u_re = ad.reduce_sum(v1 * hr + v2 * hi, axis=1)
                u_im = ad.reduce_sum(v1 * hi - v2 * hr, axis=1)
            else:
                u_re = ad.reduce_sum(v1 * hr - v2 * hi, axis=1)
                u_im = ad.reduce_sum(v1 * hi + v2 * hr, axis=1)
            per = ad.square(u_re) + ad.square(u_im)
            loss = ad.neg(ad.reduce_mean(per))
        outputs["per_episode"] = per
        outputs["loss"] = loss
        return outputs

    return Graph(build, leaves, dtype=dtype)


# ---------------------------------------------------------------------------
# losses (standalone forms)


def loss_aoa(estimate, truth, strengths=None, ordering: str = "by-fading-strength") -> float:
    """Squared 2-norm error against the strength-ordered true angles.

    ``strengths`` are fading magnitudes used for the ordering; when omitted
    the truth is assumed already sorted strongest-first.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError(f"length mismatch: {estimate.shape} vs {truth.shape}")
    if ordering != "by-fading-strength":
        raise ValueError(f"unknown ordering {ordering!r}")
    if strengths is not None:
        order = np.argsort(-np.abs(np.asarray(strengths)), kind="stable")
        truth = truth[order]
    return float(np.sum((estimate - truth) ** 2))


def loss_gain(h: ComplexVector, v: chx.SensingVector, pairing: str) -> float:
    """Negated beamforming gain; the beamformer must satisfy its constraint."""
    try:
        v.check()
    except ValueError as exc:
        raise RuntimeError(f"beamformer violates its constraint: {exc}") from exc
    return -chx.beamforming_gain(h, v, pairing)


# ---------------------------------------------------------------------------
# episode records


@dataclass
class EpisodeRecord:
    """Full trajectory of one sensing episode."""

    sensing_vectors: np.ndarray  # (T, elements) complex
    measurements: np.ndarray  # (T,) complex
    features: np.ndarray  # (T, feature_dim) network inputs after each frame
    output: np.ndarray  # AoA estimates (radians) or split beamformer
    loss: float
    flags: list[str] = field(default_factory=list)


def _split_to_complex(row: np.ndarray) -> np.ndarray:
    half = row.size // 2
    return row[:half] + 1j * row[half:]


def _check_constraint(vec: np.ndarray, constraint: str, tol: float = 1e-9) -> None:
    z = _split_to_complex(vec)
    if constraint == chx.UNIT_NORM:
        err = abs(np.linalg.norm(z) - 1.0)
    elif constraint == chx.CONSTANT_MODULUS:
        err = float(np.max(np.abs(np.abs(z) - 1.0 / np.sqrt(z.size))))
    else:
        err = float(np.max(np.abs(np.abs(z) - 1.0)))
    if err > tol:
        raise RuntimeError(
            f"normalization head emitted a vector violating {constraint} by {err:.3e}"
        )


def run_episode(
    channel,
    params: AgentParams,
    task: TaskSpec,
    rng: RandomStream,
    mode: str = "infer",
    noise_variance: float = 1.0,
) -> EpisodeRecord:
    """Run one episode against a single channel realization.

    ``channel`` is an ``MmWaveChannel`` or ``RisChannelSet``; the noise draws
    come from ``rng`` (``noise_variance`` applies to the RIS pilot noise;
    the mmWave model fixes it to 1).  Inference mode (the default)
    normalizes with running statistics so a batch of one is well defined.
    """
    if isinstance(channel, chx.MmWaveChannel):
        h = channel.h.as_complex()[None, :]
        g = rng.generator()
        z = g.normal(0, np.sqrt(0.5), size=(2, 1, task.frames, h.shape[1]))
        noise = z[0] + 1j * z[1]
        order = np.argsort(-np.abs(channel.alphas), kind="stable")
        batch = EpisodeBatch(
            h=h, noise=noise, pairing="hermitian",
            aoa_truth=channel.phis[order][None, :],
            alphas=channel.alphas[order][None, :],
        )
    elif isinstance(channel, chx.RisChannelSet):
        h = channel.h_c.as_complex()[None, :]
        g = rng.generator()
        n = g.normal(0, np.sqrt(noise_variance / 2.0), size=(2, 1, task.frames))
        batch = EpisodeBatch(h=h, noise=n[0] + 1j * n[1], pairing="transpose",
                             noise_variance=noise_variance)
    else:
        raise TypeError(f"unsupported channel {type(channel).__name__}")

    graph = build_episode_graph(task, params, batch, mode)
    values = graph.forward()
    t_frames = task.frames
    sensing = np.stack(
        [_split_to_complex(values[f"w_{t}"][0]) for t in range(t_frames)]
    )
    for t in range(t_frames):
        _check_constraint(values[f"w_{t}"][0], task.constraint)
    measurements = np.array(
        [complex(values[f"y_re_{t}"][0], values[f"y_im_{t}"][0]) for t in range(t_frames)]
    )
    snr = task.snr_db(batch.noise_variance)
    features = np.stack([build_feature(y, task, snr) for y in measurements])
    output = values["output"][0]
    if task.task != "aoa-estimation":
        _check_constraint(output, task.constraint)
    return EpisodeRecord(
        sensing_vectors=sensing,
        measurements=measurements,
        features=features,
        output=output,
        loss=float(values["loss"]),
        flags=graph.flags,
    )


# ---------------------------------------------------------------------------
# training


def refresh_running_stats(
    task: TaskSpec,
    params: AgentParams,
    chan_cfg,
    rng: RandomStream,
    batches: int = 20,
    size: int = 256,
    dtype=np.float64,
) -> None:
    """Re-estimate batch-norm running statistics under the current weights.

    The statistics consumed at inference must describe the network as it is
    now, not an EMA over its training trajectory: sites with (near-)constant
    activations such as the bootstrap frame otherwise amplify any residue by
    1/sqrt(eps + var).  Replaces the running statistics with exact averages
    over train-mode forwards on fresh seeded batches; trainable weights are
    untouched.
    """
    layers = list(params.sensing) + list(params.final)
    for layer in layers:
        layer.bn.begin_refresh()
    try:
        for k in range(batches):
            batch = make_batch(task, chan_cfg, rng.child(k), size)
            build_episode_graph(task, params, batch, "train", dtype=dtype).forward()
    finally:
        for layer in layers:
            layer.bn.end_refresh()


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 64
    val_size: int = 1000
    val_interval: int = 250
    learning_rate: float = 1e-3
    lr_floor: float = 1e-5
    lr_decay: float = 0.3162
    patience: int = 10
    early_stop: bool = True
    clip_norm: float | None = 1.0
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    precision: str = "float64"  # "float32" trades gradient precision for speed
    diagnostic_dir: str | None = None

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 2 or self.val_size < 1:
            raise ValueError("steps >= 1, batch_size >= 2 and val_size >= 1 required")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def run_training_loop(
    make_step_batch,
    loss_and_grads,
    validation_loss,
    params_arrays: dict,
    snapshot,
    restore,
    cfg: TrainConfig,
) -> tuple[dict, list[dict]]:
    """Generic streaming-data training loop shared by the sensing agents.

    ``make_step_batch(step)`` yields fresh training data; ``loss_and_grads``
    maps (arrays, batch) to a scalar loss and gradient dict;
    ``validation_loss(arrays)`` scores the frozen validation set;
    ``snapshot()``/``restore(snap)`` capture auxiliary state (running
    statistics) alongside the trainable arrays.  Keeps the best-validation
    snapshot, decays the learning rate by ``lr_decay`` whenever validation
    stalls for ``patience`` checks, and stops early once the rate sits at the
    floor and patience runs out again.
    """
    adam = nn.AdamState()
    lr = cfg.learning_rate
    arrays = params_arrays
    best_loss = validation_loss(arrays)
    best_snap = snapshot()
    history: list[dict] = [
        {"step": 0, "lr": lr, "train_loss": np.nan, "val_loss": best_loss}
    ]
    stalled = 0
    for step in range(1, cfg.steps + 1):
        batch = make_step_batch(step)
        loss, grads = loss_and_grads(arrays, batch)
        if not np.isfinite(loss):
            if cfg.diagnostic_dir:
                import os

                os.makedirs(cfg.diagnostic_dir, exist_ok=True)
                nn.save_params(
                    os.path.join(cfg.diagnostic_dir, f"diverged_step{step}.npz"), arrays
                )
            raise RuntimeError(f"non-finite training loss at step {step}")
        if cfg.clip_norm is not None:
            grads = nn.clip_gradients(grads, cfg.clip_norm)
        arrays, adam = nn.adam_step(arrays, grads, adam, lr)
        if step % cfg.val_interval == 0 or step == cfg.steps:
            val = validation_loss(arrays)
            if val < best_loss:
                best_loss = val
                best_snap = snapshot()
                stalled = 0
            else:
                stalled += 1
            history.append({"step": step, "lr": lr, "train_loss": loss, "val_loss": val})
            if stalled >= cfg.patience:
                if lr > cfg.lr_floor:
                    lr = max(lr * cfg.lr_decay, cfg.lr_floor)
                    stalled = 0
                elif cfg.early_stop:
                    logger.info("validation stalled at the learning-rate floor; stopping")
                    break
    restore(best_snap)
    return arrays, history


def train(task: TaskSpec, chan_cfg, cfg: TrainConfig) -> tuple[AgentParams, list[dict]]:
    """Train the active-sensing agent on freshly streamed channels."""
    root = RandomStream(cfg.seed)
    if isinstance(chan_cfg, chx.MmWaveConfig):
        elements, paths = chan_cfg.antennas, chan_cfg.paths
    else:
        elements, paths = chan_cfg.elements, 1
    params = AgentParams.create(task, cfg.arch, elements, paths, root.child(0))
    val_batch = make_batch(task, chan_cfg, root.child(1), cfg.val_size)

    def step_batch(step):
        return make_batch(task, chan_cfg, root.child(2, step), cfg.batch_size)

    refresh_size = int(np.clip(4 * cfg.batch_size, 128, 512))

    def loss_and_grads(arrays, batch):
        params.set_trainable(arrays)
        graph = build_episode_graph(task, params, batch, "train", dtype=cfg.dtype)
        loss = float(graph.forward()["loss"])
        return loss, graph.backward()

    def validation_loss(arrays):
        params.set_trainable(arrays)
        refresh_running_stats(
            task, params, chan_cfg, root.child(4), size=refresh_size, dtype=cfg.dtype
        )
        graph = build_episode_graph(task, params, val_batch, "infer", dtype=cfg.dtype)
        return float(graph.forward()["loss"])

    arrays, history = run_training_loop(
        step_batch,
        loss_and_grads,
        validation_loss,
        params.trainable(),
        params.snapshot,
        params.load_arrays,
        cfg,
    )
    return params, history


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "train_loss", "val_loss"])
        for row in history:
            writer.writerow(
                [row["step"], f"{row['lr']:.17g}",
                 f"{row['train_loss']:.17g}", f"{row['val_loss']:.17g}"]
            )


# ---------------------------------------------------------------------------
# evaluation


def evaluate_batch(params: AgentParams, task: TaskSpec, batch: EpisodeBatch) -> dict:
    """Task metric of a trained agent on a fixed episode batch."""
    graph = build_episode_graph(task, params, batch, "infer")
    per = graph.forward()["per_episode"]
    return summarize_metric(per, task)


def summarize_metric(per_episode: np.ndarray, task: TaskSpec) -> dict:
    """Mean and standard error of a per-episode metric array."""
    per_episode = np.asarray(per_episode, dtype=np.float64)
    n = per_episode.size
    mean = float(per_episode.mean())
    if n > 1:
        std_error = float(per_episode.std(ddof=1) / np.sqrt(n))
    else:
        std_error = None
        logger.warning("std-error undefined for a single episode")
    metrics = {
        "metric": "mse" if task.task == "aoa-estimation" else "gain",
        "mean": mean,
        "std_error": std_error,
        "n": n,
    }
    if metrics["metric"] == "gain":
        metrics["mean_db"] = 10.0 * np.log10(mean) if mean > 0 else -np.inf
    return metrics


def evaluate(params: AgentParams, task: TaskSpec, chan_cfg, n_episodes: int, seed: int) -> dict:
    """Monte-Carlo evaluation on fresh seeded test channels."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    batch = make_batch(task, chan_cfg, RandomStream(seed), n_episodes)
    return evaluate_batch(params, task, batch)
