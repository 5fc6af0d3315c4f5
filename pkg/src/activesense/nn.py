"""Neural building blocks: dense layers, the LSTM cell, batch normalization,
constraint-normalization output heads, Adam, and checkpoint I/O.

Every forward helper accepts either plain float64 arrays or autodiff
:class:`~activesense.autodiff.Node` values, so the same code path serves
plain evaluation and training graphs.  There is a single implementation of
each operation (the autodiff one); array inputs are wrapped on a throwaway
tape and unwrapped on the way out.
"""

from __future__ import annotations

import hashlib
import io
import zipfile
from dataclasses import dataclass, field

import numpy as np

from activesense import autodiff as ad
from activesense.autodiff import Node, Tape
from activesense.numerics import RandomStream

ACTIVATIONS = ("relu", "linear", "unit-power", "modulus")


@dataclass
class DenseParams:
    """One dense layer: out = activation(weight @ x + bias)."""

    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"
    target_modulus: float | None = None  # required for the "modulus" head

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"weight rows {self.weight.shape[0]} != bias length {self.bias.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "modulus" and not self.target_modulus:
            raise ValueError("modulus activation needs a target_modulus")


@dataclass
class LstmParams:
    """Gate weights of one LSTM cell (forget / input / output / candidate)."""

    a_f: np.ndarray
    a_i: np.ndarray
    a_o: np.ndarray
    a_c: np.ndarray
    u_f: np.ndarray
    u_i: np.ndarray
    u_o: np.ndarray
    u_c: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray

    def __post_init__(self) -> None:
        s = self.u_f.shape[0]
        fdim = self.a_f.shape[1]
        for name in ("u_f", "u_i", "u_o", "u_c"):
            m = getattr(self, name)
            if m.shape != (s, s):
                raise ValueError(f"{name} must be square ({s},{s}), got {m.shape}")
        for name in ("a_f", "a_i", "a_o", "a_c"):
            m = getattr(self, name)
            if m.shape != (s, fdim):
                raise ValueError(f"{name} must be ({s},{fdim}), got {m.shape}")
        for name in ("b_f", "b_i", "b_o", "b_c"):
            if getattr(self, name).shape != (s,):
                raise ValueError(f"{name} must have length {s}")

    @property
    def state_size(self) -> int:
        return self.u_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.a_f.shape[1]


@dataclass
class LstmState:
    """Hidden state s and cell state c (arrays or graph nodes)."""

    s: object
    c: object


@dataclass
class BatchNormState:
    """Learned scale/shift plus running statistics for one feature axis.

    When a layer is reused across unrolled frames, each frame keeps its own
    running mean/variance slot (the activation statistics differ per frame)
    while gamma and beta stay shared.  Slot 0 backs the plain single-use
    ``running_mean``/``running_var`` view.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_means: dict = field(default_factory=dict)
    running_vars: dict = field(default_factory=dict)
    momentum: float = 0.99
    epsilon: float = 1e-5
    # when set (by begin_refresh), update_running takes exact incremental
    # means instead of the EMA, so re-estimated statistics carry no residue
    # of the previous ones
    _refresh_counts: dict | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0,1), got {self.momentum}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        for var in self.running_vars.values():
            if np.any(var < 0):
                raise ValueError("running variance must be non-negative")

    @classmethod
    def create(cls, features: int, momentum: float = 0.99, epsilon: float = 1e-5):
        return cls(
            gamma=np.ones(features),
            beta=np.zeros(features),
            running_means={0: np.zeros(features)},
            running_vars={0: np.ones(features)},
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def features(self) -> int:
        return self.gamma.shape[0]

    def running(self, site: int = 0) -> tuple[np.ndarray, np.ndarray]:
        mean = self.running_means.get(site)
        var = self.running_vars.get(site)
        if mean is None:
            return np.zeros(self.features), np.ones(self.features)
        return mean, var

    def update_running(self, site: int, mean: np.ndarray, var: np.ndarray) -> None:
        mean = np.asarray(mean, dtype=np.float64)
        var = np.asarray(var, dtype=np.float64)
        if self._refresh_counts is not None:
            n = self._refresh_counts.get(site, 0)
            if n == 0:
                self.running_means[site] = mean
                self.running_vars[site] = var
            else:
                old_mean, old_var = self.running(site)
                self.running_means[site] = (n * old_mean + mean) / (n + 1)
                self.running_vars[site] = (n * old_var + var) / (n + 1)
            self._refresh_counts[site] = n + 1
            return
        old_mean, old_var = self.running(site)
        m = self.momentum
        self.running_means[site] = m * old_mean + (1.0 - m) * mean
        self.running_vars[site] = m * old_var + (1.0 - m) * var

    def begin_refresh(self) -> None:
        self.running_means.clear()
        self.running_vars.clear()
        self._refresh_counts = {}

    def end_refresh(self) -> None:
        self._refresh_counts = None

    # single-slot convenience views
    @property
    def running_mean(self) -> np.ndarray:
        return self.running(0)[0]

    @running_mean.setter
    def running_mean(self, value) -> None:
        self.running_means[0] = np.asarray(value, dtype=np.float64)

    @property
    def running_var(self) -> np.ndarray:
        return self.running(0)[1]

    @running_var.setter
    def running_var(self, value) -> None:
        self.running_vars[0] = np.asarray(value, dtype=np.float64)


@dataclass
class AdamState:
    """First/second-moment accumulators, keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


# ---------------------------------------------------------------------------
# forward helpers (array or Node inputs)


def _wrap(x):
    """Return (node, unwrap) where unwrap maps a result Node back to x's kind."""
    if isinstance(x, Node):
        return x, lambda n: n
    tape = Tape()
    return tape.constant(np.asarray(x, dtype=np.float64)), lambda n: n.value


def _lift_like(node: Node, x):
    return x if isinstance(x, Node) else node.tape.constant(np.asarray(x, dtype=np.float64))


def apply_activation(z: Node, activation: str, target_modulus: float | None = None) -> Node:
    if activation == "linear":
        return z
    if activation == "relu":
        return ad.relu(z)
    if activation == "unit-power":
        return ad.normalize_unit_rows(z)
    if activation == "modulus":
        return ad.normalize_modulus_rows(z, target_modulus)
    raise ValueError(f"unknown activation {activation!r}")


def dense_forward(x, p: DenseParams):
    """activation(x @ weight.T + bias), batched over the leading axis."""
    xn, unwrap = _wrap(x)
    w = _lift_like(xn, p.weight)
    b = _lift_like(xn, p.bias)
    z = ad.linear(xn, w, b)
    return unwrap(apply_activation(z, p.activation, p.target_modulus))


def lstm_step(y, prev: LstmState, p: LstmParams, nodes: dict | None = None) -> LstmState:
    """One LSTM update.

    Gates use sigmoid(A y + U s_prev + b); the cell state blends the previous
    cell through the forget gate with a tanh candidate through the input
    gate, and the hidden state is the output gate times tanh(cell).  When a
    ``nodes`` dict is supplied the weight leaves inside it (keys a_f .. b_c)
    are used so gradients reach tied parameters.
    """
    yn, unwrap = _wrap(y)
    sn = _lift_like(yn, prev.s)
    cn = _lift_like(yn, prev.c)

    def leaf(name: str) -> Node:
        if nodes is not None:
            return nodes[name]
        return _lift_like(yn, getattr(p, name))

    def gate(a_name, u_name, b_name, squash):
        z = ad.affine_pair(yn, leaf(a_name), sn, leaf(u_name), leaf(b_name))
        return squash(z)

    f = gate("a_f", "u_f", "b_f", ad.sigmoid)
    i = gate("a_i", "u_i", "b_i", ad.sigmoid)
    o = gate("a_o", "u_o", "b_o", ad.sigmoid)
    cand = gate("a_c", "u_c", "b_c", ad.tanh)
    c = f * cn + i * cand
    s = o * ad.tanh(c)
    return LstmState(unwrap(s), unwrap(c))


def normalize_unit_power(w):
    """Scale to unit 2-norm; zero vectors map to the first basis vector."""
    wn, unwrap = _wrap(w)
    return unwrap(ad.normalize_unit_rows(wn))


def normalize_modulus(w, target_modulus: float):
    """Pin each split-complex entry's modulus to ``target_modulus``."""
    wn, unwrap = _wrap(w)
    return unwrap(ad.normalize_modulus_rows(wn, target_modulus))


def batchnorm_forward(x, st: BatchNormState, mode: str, site: int = 0):
    """Normalize by batch (train) or running (infer) statistics."""
    xn, unwrap = _wrap(x)
    gamma = _lift_like(xn, st.gamma)
    beta = _lift_like(xn, st.beta)
    return unwrap(ad.batchnorm(xn, gamma, beta, st, mode, site=site))


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: dict, grads: dict, st: AdamState, lr: float) -> tuple[dict, AdamState]:
    """Bias-corrected Adam update; returns the new parameter dict.

    ``st`` is updated in place (single-writer step between batches).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if set(params) != set(grads):
        raise ValueError("params and grads must share the same keys")
    st.step_count += 1
    t = st.step_count
    out = {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {value.shape} for {name}")
        m = st.m.get(name, np.zeros_like(value))
        v = st.v.get(name, np.zeros_like(value))
        m = st.beta1 * m + (1.0 - st.beta1) * g
        v = st.beta2 * v + (1.0 - st.beta2) * g * g
        st.m[name] = m
        st.v[name] = v
        m_hat = m / (1.0 - st.beta1**t)
        v_hat = v / (1.0 - st.beta2**t)
        out[name] = value - lr * m_hat / (np.sqrt(v_hat) + st.epsilon)
    return out, st


def clip_gradients(grads: dict, max_norm: float) -> dict:
    """Scale the whole gradient dict so its global 2-norm is at most max_norm."""
    total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# ---------------------------------------------------------------------------
# initialization


def glorot_uniform(shape: tuple[int, int], rng: RandomStream) -> np.ndarray:
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.generator().uniform(-limit, limit, size=shape)


def make_dense(
    in_dim: int,
    out_dim: int,
    rng: RandomStream,
    activation: str = "linear",
    target_modulus: float | None = None,
) -> DenseParams:
    return DenseParams(
        weight=glorot_uniform((out_dim, in_dim), rng),
        bias=np.zeros(out_dim),
        activation=activation,
        target_modulus=target_modulus,
    )


def make_lstm(input_dim: int, state_size: int, rng: RandomStream) -> LstmParams:
    """Glorot-uniform gate weights; biases zero except forget gate at 1."""
    def a(k):
        return glorot_uniform((state_size, input_dim), rng.child(k))

    def u(k):
        return glorot_uniform((state_size, state_size), rng.child(k))

    return LstmParams(
        a_f=a(0), a_i=a(1), a_o=a(2), a_c=a(3),
        u_f=u(4), u_i=u(5), u_o=u(6), u_c=u(7),
        b_f=np.ones(state_size),
        b_i=np.zeros(state_size),
        b_o=np.zeros(state_size),
        b_c=np.zeros(state_size),
    )


# ---------------------------------------------------------------------------
# checkpoints
#
# Checkpoints are ordinary .npz archives readable with numpy.load.  Keys are
# the parameter names (dotted paths, e.g. "lstm.a_f", "sense.0.w",
# "sense.0.bn.gamma"); payloads are little-endian float64 arrays.  The
# producing experiment's config hash travels in the "__config_hash__" entry.
# Zip timestamps are pinned so identical parameters give identical bytes.

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_params(path, arrays: dict, config_hash: str = "") -> None:
    items = dict(sorted(arrays.items()))
    items["__config_hash__"] = np.frombuffer(
        config_hash.encode("utf-8"), dtype=np.uint8
    ).copy()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, value in items.items():
            buf = io.BytesIO()
            if value.dtype != np.uint8:
                value = np.ascontiguousarray(value, dtype="<f8")
            np.lib.format.write_array(buf, value)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            zf.writestr(info, buf.getvalue())


def load_params(path) -> tuple[dict, str]:
    """Read a checkpoint; returns (name -> float64 array, config hash)."""
    arrays = {}
    config_hash = ""
    with np.load(path) as data:
        for name in data.files:
            if name == "__config_hash__":
                config_hash = data[name].tobytes().decode("utf-8")
            else:
                arrays[name] = np.asarray(data[name], dtype=np.float64)
    return arrays, config_hash


def params_digest(arrays: dict) -> str:
    """Stable content hash of a parameter dict (sorted names + payload bytes)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return h.hexdigest()
