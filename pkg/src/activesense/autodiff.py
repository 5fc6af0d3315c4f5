"""Reverse-mode automatic differentiation over real numpy arrays.

A small define-by-run tape: each operation computes its forward value
eagerly and records a vector-Jacobian callback.  :class:`Graph` binds a build
function to named parameter leaves so the same computation can be re-run on
new inputs, differentiated with exact reverse-mode gradients, and checked
against central finite differences.

The operation set is deliberately closed: linear maps, broadcast add,
elementwise arithmetic, relu/sigmoid/tanh, square/sqrt, reductions,
slicing/concatenation, the modulus of split-complex pairs, batch
normalization, and the two constraint-normalization heads.  Gradients of
sqrt at zero and of divisions by a vanishing modulus are guarded by adding
1e-12 under the root in the backward pass only; forward values stay exact.
"""

from __future__ import annotations

import logging
from typing import Callable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Added under square roots in backward passes so gradients stay finite when a
# modulus vanishes (forward values are never altered).
GRAD_EPS = 1e-12

# Rows/entries with squared magnitude below these thresholds are treated as
# degenerate by the normalization heads: they map to a fixed canonical output
# and receive zero gradient.
UNIT_NORM_FLOOR = 1e-12
MODULUS_FLOOR_SQ = 1e-24


class Tape:
    """Ordered record of one forward execution.

    ``dtype`` is the working precision: float64 by default (all tests and
    gradient checks), float32 available for training speed.
    """

    def __init__(self, dtype=np.float64) -> None:
        self.nodes: list[Node] = []
        self.flags: list[str] = []
        self.dtype = np.dtype(dtype)

    def node(self, value, parents=(), vjp=None) -> "Node":
        value = np.asarray(value)
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        n = Node(self, value, parents, vjp)
        self.nodes.append(n)
        return n

    def constant(self, value) -> "Node":
        return self.node(value)

    def flag(self, message: str) -> None:
        self.flags.append(message)
        logger.debug("degenerate input: %s", message)


class Node:
    """One tensor on the tape: a forward value plus how to propagate grads."""

    __slots__ = ("tape", "value", "parents", "vjp", "grad")

    def __init__(self, tape: Tape, value: np.ndarray, parents=(), vjp=None):
        self.tape = tape
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, _lift(self.tape, other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TypeError("at least one argument must be a Node")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    value = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return t.node(value, (a, b), vjp)


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    value = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return t.node(value, (a, b), vjp)


def neg(a: Node) -> Node:
    return a.tape.node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    value = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return t.node(value, (a, b), vjp)


def div(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    value = a.value / b.value

    def vjp(g):
        ga = g / b.value
        gb = -g * a.value / (b.value * b.value)
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return t.node(value, (a, b), vjp)


def square(a: Node) -> Node:
    return a.tape.node(a.value**2, (a,), lambda g: (2.0 * a.value * g,))


def sqrt(a: Node) -> Node:
    value = np.sqrt(a.value)

    def vjp(g):
        return (0.5 * g / np.sqrt(a.value + GRAD_EPS),)

    return a.tape.node(value, (a,), vjp)


# ---------------------------------------------------------------------------
# activations


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape.node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Node) -> Node:
    x = a.value
    value = np.empty_like(x)
    pos = x >= 0
    value[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    value[~pos] = ex / (1.0 + ex)
    return a.tape.node(value, (a,), lambda g: (g * value * (1.0 - value),))


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)
    return a.tape.node(value, (a,), lambda g: (g * (1.0 - value * value),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Node, b: Node) -> Node:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}")
    value = a.value @ b.value

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return t.node(value, (a, b), vjp)


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """Affine map x @ weight.T (+ bias), batched over the leading axis.

    weight has shape (out, in); bias broadcasts over the batch.
    """
    t = _tape_of(x, weight)
    x, weight = _lift(t, x), _lift(t, weight)
    if x.value.shape[-1] != weight.value.shape[1]:
        raise ValueError(
            f"feature extent {x.value.shape[-1]} does not match weight columns "
            f"{weight.value.shape[1]}"
        )
    value = x.value @ weight.value.T
    if bias is None:
        def vjp(g):
            return g @ weight.value, g.T @ x.value

        return t.node(value, (x, weight), vjp)

    bias = _lift(t, bias)
    value = value + bias.value

    def vjp_b(g):
        return g @ weight.value, g.T @ x.value, _unbroadcast(g, bias.value.shape)

    return t.node(value, (x, weight, bias), vjp_b)


def affine_pair(x: Node, w_x: Node, h: Node, w_h: Node, bias: Node) -> Node:
    """Fused x @ w_x.T + h @ w_h.T + bias used by the recurrent gates."""
    t = _tape_of(x, w_x, h, w_h, bias)
    x, w_x, h, w_h, bias = (_lift(t, a) for a in (x, w_x, h, w_h, bias))
    value = x.value @ w_x.value.T + h.value @ w_h.value.T + bias.value

    def vjp(g):
        return (
            g @ w_x.value,
            g.T @ x.value,
            g @ w_h.value,
            g.T @ h.value,
            _unbroadcast(g, bias.value.shape),
        )

    return t.node(value, (x, w_x, h, w_h, bias), vjp)


# ---------------------------------------------------------------------------
# reductions and shaping


def reduce_sum(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return a.tape.node(value, (a,), vjp)


def reduce_mean(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Node, shape) -> Node:
    value = a.value.reshape(shape)
    return a.tape.node(value, (a,), lambda g: (g.reshape(a.value.shape),))


def concat(parts: Sequence[Node], axis: int = -1) -> Node:
    t = _tape_of(*parts)
    parts = [_lift(t, p) for p in parts]
    value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return t.node(value, tuple(parts), vjp)


def slice_cols(a: Node, start: int, stop: int) -> Node:
    """Columns [start, stop) of a 2-D node."""
    value = a.value[:, start:stop]

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return (out,)

    return a.tape.node(value, (a,), vjp)


def slice_rows(a: Node, start: int, stop: int) -> Node:
    """Rows [start, stop) of a 2-D node."""
    value = a.value[start:stop]

    def vjp(g):
        out = np.zeros_like(a.value)
        out[start:stop] = g
        return (out,)

    return a.tape.node(value, (a,), vjp)


# ---------------------------------------------------------------------------
# split-complex helpers


def complex_abs(re: Node, im: Node) -> Node:
    """Elementwise modulus sqrt(re^2 + im^2) of a split-complex pair."""
    t = _tape_of(re, im)
    re, im = _lift(t, re), _lift(t, im)
    value = np.sqrt(re.value**2 + im.value**2)

    def vjp(g):
        denom = np.sqrt(re.value**2 + im.value**2 + GRAD_EPS)
        return g * re.value / denom, g * im.value / denom

    return t.node(value, (re, im), vjp)


def normalize_unit_rows(w: Node) -> Node:
    """Scale each row to unit 2-norm.

    Rows whose norm falls below 1e-12 are degenerate: they map to the
    canonical first basis vector, are flagged on the tape, and pass no
    gradient.
    """
    x = np.atleast_2d(w.value)
    squeeze = w.value.ndim == 1
    norms = np.sqrt((x**2).sum(axis=1, keepdims=True))
    degenerate = norms[:, 0] < UNIT_NORM_FLOOR
    safe = np.where(degenerate[:, None], 1.0, norms)
    out = x / safe
    if degenerate.any():
        out = out.copy()
        out[degenerate] = 0.0
        out[degenerate, 0] = 1.0
        w.tape.flag(f"normalize_unit_rows: {int(degenerate.sum())} zero-norm row(s)")
    y = out

    def vjp(g):
        g = np.atleast_2d(g)
        dot = (g * y).sum(axis=1, keepdims=True)
        gx = (g - y * dot) / safe
        gx[degenerate] = 0.0
        return (gx.reshape(w.value.shape),)

    return w.tape.node(out[0] if squeeze else out, (w,), vjp)


def normalize_modulus_rows(w: Node, target: float) -> Node:
    """Fix the modulus of every split-complex entry to ``target``.

    Rows hold [w1; w2] halves; entry k of the output is
    target * (w1_k + j w2_k) / |w1_k + j w2_k| in split form, i.e. the phase
    is kept and the magnitude pinned.  Entries with squared magnitude below
    1e-24 fall back to phase zero (flagged, zero gradient).
    """
    if target <= 0:
        raise ValueError(f"target modulus must be positive, got {target!r}")
    x = np.atleast_2d(w.value)
    squeeze = w.value.ndim == 1
    m = x.shape[1]
    if m % 2:
        raise ValueError(f"split-complex extent must be even, got {m}")
    half = m // 2
    w1, w2 = x[:, :half], x[:, half:]
    r2 = w1**2 + w2**2
    degenerate = r2 < MODULUS_FLOOR_SQ
    r = np.sqrt(np.where(degenerate, 1.0, r2))
    out1 = target * w1 / r
    out2 = target * w2 / r
    if degenerate.any():
        out1 = out1.copy()
        out2 = out2.copy()
        out1[degenerate] = target
        out2[degenerate] = 0.0
        w.tape.flag(f"normalize_modulus_rows: {int(degenerate.sum())} zero-modulus entr(ies)")
    out = np.concatenate([out1, out2], axis=1)

    def vjp(g):
        g = np.atleast_2d(g)
        g1, g2 = g[:, :half], g[:, half:]
        cross = g1 * w2 - g2 * w1
        r3 = np.power(r2 + GRAD_EPS, 1.5)
        gw1 = target * w2 * cross / r3
        gw2 = -target * w1 * cross / r3
        gw1[degenerate] = 0.0
        gw2[degenerate] = 0.0
        gx = np.concatenate([gw1, gw2], axis=1)
        return (gx.reshape(w.value.shape),)

    return w.tape.node(out[0] if squeeze else out, (w,), vjp)


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm(x: Node, gamma: Node, beta: Node, state, mode: str, site: int = 0) -> Node:
    """Batch normalization over the leading (batch) axis.

    ``mode='train'`` normalizes by batch statistics and folds them into the
    running averages held on ``state``; ``mode='infer'`` normalizes by the
    running statistics.  ``state`` is an ``nn.BatchNormState``; only its
    running-mean/variance buffers are touched here.  ``site`` selects the
    running-statistic slot: a layer reused across unrolled frames sees a
    different activation distribution at each frame, so each frame tracks
    its own statistics while gamma/beta stay tied.
    """
    t = _tape_of(x, gamma, beta)
    x, gamma, beta = _lift(t, x), _lift(t, gamma), _lift(t, beta)
    eps = state.epsilon
    if mode == "train":
        batch = x.value.shape[0]
        if batch < 2:
            raise ValueError(f"train-mode batch norm needs a batch of at least 2, got {batch}")
        mean = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        state.update_running(site, mean, var)
    elif mode == "infer":
        mean, var = state.running(site)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mean) * inv_std
    value = gamma.value * xhat + beta.value

    if mode == "infer":
        def vjp(g):
            return (
                g * gamma.value * inv_std,
                (g * xhat).sum(axis=0),
                g.sum(axis=0),
            )
    else:
        batch = x.value.shape[0]

        def vjp(g):
            dxhat = g * gamma.value
            gx = (
                inv_std
                / batch
                * (batch * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            )
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return t.node(value, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# graph execution


def backpropagate(output: Node, seed: float = 1.0) -> None:
    """Reverse sweep of the tape from ``output``; fills ``.grad`` fields."""
    tape = output.tape
    for n in tape.nodes:
        n.grad = None
    output.grad = np.full_like(output.value, seed)
    # Walk the tape in reverse creation order; every node precedes its users.
    stop = tape.nodes.index(output) if tape.nodes and tape.nodes[-1] is not output else None
    nodes = tape.nodes if stop is None else tape.nodes[: stop + 1]
    for n in reversed(nodes):
        if n.grad is None or n.vjp is None:
            continue
        for parent, g in zip(n.parents, n.vjp(n.grad)):
            # grads are never mutated in place, so aliasing g is safe
            parent.grad = g if parent.grad is None else parent.grad + g


BuildFn = Callable[[Tape, dict[str, Node], dict[str, Node]], Mapping[str, Node]]


class Graph:
    """A re-runnable computation over named parameter leaves.

    ``build(tape, params, inputs)`` wires tape nodes into named outputs.
    ``forward`` executes it (caching values for the backward pass) and
    ``backward`` returns exact reverse-mode gradients of a scalar output with
    respect to every parameter leaf.  Parameters used several times (for
    example tied weights across unrolled frames) accumulate their gradients
    by summation.
    """

    def __init__(self, build: BuildFn, params: Mapping[str, np.ndarray], dtype=np.float64):
        self.build = build
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {
            k: np.asarray(v, dtype=np.float64) for k, v in params.items()
        }
        self._tape: Tape | None = None
        self._outputs: dict[str, Node] = {}
        self._leaves: dict[str, Node] = {}

    def forward(self, inputs: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        tape = Tape(dtype=self.dtype)
        leaves = {name: tape.constant(value) for name, value in self.params.items()}
        bound = {name: tape.constant(value) for name, value in (inputs or {}).items()}
        try:
            outputs = dict(self.build(tape, leaves, bound))
        except KeyError as exc:
            raise ValueError(f"unbound graph input: {exc}") from exc
        self._tape = tape
        self._outputs = outputs
        self._leaves = leaves
        return {name: node.value for name, node in outputs.items()}

    @property
    def flags(self) -> list[str]:
        return list(self._tape.flags) if self._tape is not None else []

    def backward(self, output: str = "loss") -> dict[str, np.ndarray]:
        if self._tape is None:
            raise RuntimeError("forward() must run before backward()")
        if output not in self._outputs:
            raise ValueError(f"unknown output {output!r}")
        node = self._outputs[output]
        if node.value.size != 1:
            raise ValueError(f"backward needs a scalar output, {output!r} has shape {node.shape}")
        backpropagate(node)
        return {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in self._leaves.items()
        }


def check_gradients(
    graph: Graph,
    inputs: Mapping[str, np.ndarray] | None = None,
    output: str = "loss",
    h: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for each parameter entry is |analytic - fd| / max(1, |analytic|);
    the maximum over all entries of all parameter leaves is returned.
    Intended for 64-bit graphs with scalar outputs.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h!r}")
    graph.forward(inputs)
    analytic = graph.backward(output)
    worst = 0.0
    for name, arr in graph.params.items():
        flat = arr.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = float(graph.forward(inputs)[output])
            flat[i] = keep - h
            f_minus = float(graph.forward(inputs)[output])
            flat[i] = keep
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(grad[i] - fd) / max(1.0, abs(grad[i]))
            worst = max(worst, err)
    graph.forward(inputs)
    return worst
