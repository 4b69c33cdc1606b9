"""Minimal neural core: tanh MLP, exact reverse-accumulation gradients,
and Adam with staircase learning-rate decay.

Gradients come from a small reverse-mode tape restricted to the handful
of array operations the flow model needs. Every op accepts either a
`Node` (recorded on the tape) or a plain ndarray (treated as a constant,
or computed eagerly when no Node is involved), so the same forward code
serves both inference and training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError


class Node:
    """One tape entry: a value plus links to parents with their VJPs."""

    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Node, vjp) pairs
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def value_of(x):
    """Raw ndarray behind a Node, or the input itself."""
    return x.value if isinstance(x, Node) else x


def _is_node(*xs):
    return any(isinstance(x, Node) for x in xs)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not _is_node(a, b):
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, s=np.shape(av): _unbroadcast(g, s)))
    if isinstance(b, Node):
        parents.append((b, lambda g, s=np.shape(bv): _unbroadcast(g, s)))
    return Node(out, tuple(parents))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not _is_node(a, b):
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, s=np.shape(av): _unbroadcast(g, s)))
    if isinstance(b, Node):
        parents.append((b, lambda g, s=np.shape(bv): _unbroadcast(-g, s)))
    return Node(out, tuple(parents))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not _is_node(a, b):
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, o=bv, s=np.shape(av): _unbroadcast(g * o, s)))
    if isinstance(b, Node):
        parents.append((b, lambda g, o=av, s=np.shape(bv): _unbroadcast(g * o, s)))
    return Node(out, tuple(parents))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if not _is_node(a, b):
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, o=bv: g @ o.T))
    if isinstance(b, Node):
        parents.append((b, lambda g, o=av: o.T @ g))
    return Node(out, tuple(parents))


def tanh(x):
    out = np.tanh(value_of(x))
    if not isinstance(x, Node):
        return out
    return Node(out, ((x, lambda g, o=out: g * (1.0 - o * o)),))


def exp(x):
    out = np.exp(value_of(x))
    if not isinstance(x, Node):
        return out
    return Node(out, ((x, lambda g, o=out: g * o),))


def sum_axis1(x):
    out = value_of(x).sum(axis=1)
    if not isinstance(x, Node):
        return out
    n_cols = value_of(x).shape[1]
    return Node(out, ((x, lambda g, c=n_cols: np.repeat(g[:, None], c, axis=1)),))


def mean_all(x):
    xv = value_of(x)
    out = xv.mean()
    if not isinstance(x, Node):
        return out
    return Node(out, ((x, lambda g, s=xv.shape, n=xv.size: np.full(s, g / n)),))


def total(x):
    xv = value_of(x)
    out = xv.sum()
    if not isinstance(x, Node):
        return out
    return Node(out, ((x, lambda g, s=xv.shape: np.full(s, g)),))


def concat_cols(parts):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=1)
    if not _is_node(*parts):
        return out
    parents = []
    offset = 0
    for p, v in zip(parts, vals):
        w = v.shape[1]
        if isinstance(p, Node):
            parents.append((p, lambda g, lo=offset, hi=offset + w: g[:, lo:hi]))
        offset += w
    return Node(out, tuple(parents))


def repeat_rows(x, k):
    """Repeat each row k times: (n, d) -> (n*k, d)."""
    xv = value_of(x)
    out = np.repeat(xv, k, axis=0)
    if not isinstance(x, Node):
        return out

    def vjp(g, n=xv.shape[0], kk=k):
        return g.reshape(n, kk, *g.shape[1:]).sum(axis=1)

    return Node(out, ((x, vjp),))


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    if not isinstance(x, Node):
        return out
    return Node(out, ((x, lambda g, s=xv.shape: g.reshape(s)),))


def gather_cols(x, idx):
    xv = value_of(x)
    idx = np.asarray(idx)
    out = xv[:, idx]
    if not isinstance(x, Node):
        return out

    def vjp(g, s=xv.shape, ii=idx):
        full = np.zeros(s)
        full[:, ii] = g
        return full

    return Node(out, ((x, vjp),))


def scatter_pair(idx_a, xa, idx_b, xb, n_cols):
    """Assemble (n, n_cols) from two column groups: out[:, idx_a] = xa etc."""
    va, vb = value_of(xa), value_of(xb)
    out = np.empty((va.shape[0], n_cols))
    out[:, idx_a] = va
    out[:, idx_b] = vb
    if not _is_node(xa, xb):
        return out
    parents = []
    if isinstance(xa, Node):
        parents.append((xa, lambda g, ii=idx_a: g[:, ii]))
    if isinstance(xb, Node):
        parents.append((xb, lambda g, ii=idx_b: g[:, ii]))
    return Node(out, tuple(parents))


def backward(root: Node, seed: float = 1.0) -> None:
    """Accumulate gradients of a scalar `root` into node.grad fields."""
    backward_multi([(root, np.asarray(seed, dtype=np.float64))])


def backward_multi(seeded) -> None:
    """Reverse pass from several output nodes with given output gradients."""
    order = []
    visited = set()
    stack = [(node, False) for node, _ in seeded]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    for node in order:
        node.grad = None
    for node, seed in seeded:
        g = np.asarray(seed, dtype=np.float64)
        node.grad = g if node.grad is None else node.grad + g
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(node.grad)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


@dataclass
class MlpParams:
    """Fully-connected network parameters: x @ W + b per layer, tanh hidden."""

    weights: list  # list of (fan_in, fan_out) ndarrays
    biases: list  # list of (fan_out,) ndarrays

    @property
    def layer_sizes(self):
        sizes = [w.shape[0] for w in self.weights]
        sizes.append(self.weights[-1].shape[1])
        return sizes

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    def to_json(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @staticmethod
    def from_json(obj: dict) -> "MlpParams":
        return MlpParams(
            [np.asarray(w, dtype=np.float64) for w in obj["weights"]],
            [np.asarray(b, dtype=np.float64) for b in obj["biases"]],
        )


def init_mlp(layer_sizes, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x):
    """Affine+tanh hidden layers, affine output. Accepts (d,) or (n, d)."""
    xv = value_of(x)
    single = np.ndim(xv) == 1
    h = reshape(x, (1, -1)) if single and isinstance(x, Node) else (
        xv[None, :] if single else x)
    din = value_of(h).shape[1]
    if din != params.weights[0].shape[0]:
        raise ValidationError(
            f"input dimension {din} does not match first layer "
            f"fan-in {params.weights[0].shape[0]}")
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = tanh(add(matmul(h, w), b))
    h = add(matmul(h, params.weights[-1]), params.biases[-1])
    if single:
        return reshape(h, (-1,)) if isinstance(h, Node) else h[0]
    return h


def taped_params(params: MlpParams):
    """Wrap parameters in leaf Nodes; returns (MlpParams-of-Nodes, leaves)."""
    w_nodes = [Node(w) for w in params.weights]
    b_nodes = [Node(b) for b in params.biases]
    taped = MlpParams(w_nodes, b_nodes)
    return taped, w_nodes + b_nodes


@dataclass
class MlpGrads:
    weights: list
    biases: list


def grads_from_leaves(params: MlpParams, taped: MlpParams) -> MlpGrads:
    def pull(node, template):
        return node.grad if node.grad is not None else np.zeros_like(template)

    return MlpGrads(
        [pull(n, w) for n, w in zip(taped.weights, params.weights)],
        [pull(n, b) for n, b in zip(taped.biases, params.biases)],
    )


def mlp_value_and_grad(params: MlpParams, x, loss_fn):
    """Loss and exact gradients for loss_fn(mlp_forward(params, x)).

    loss_fn maps the output Node to a scalar Node built from tape ops.
    """
    taped, _ = taped_params(params)
    out = mlp_forward(taped, np.asarray(x, dtype=np.float64))
    loss = loss_fn(out)
    if not np.isfinite(loss.value):
        raise NumericalError("non-finite loss in mlp_value_and_grad")
    backward(loss)
    return float(loss.value), grads_from_leaves(params, taped)


@dataclass
class AdamState:
    """Adam accumulators plus a staircase-decayed learning rate."""

    base_lr: float
    decay_rate: float = 1.0
    decay_every: int = 2400
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m_weights: list = field(default_factory=list)
    m_biases: list = field(default_factory=list)
    v_weights: list = field(default_factory=list)
    v_biases: list = field(default_factory=list)

    @staticmethod
    def for_params(params: MlpParams, base_lr: float, decay_rate: float = 1.0,
                   decay_every: int = 2400, beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        if base_lr <= 0:
            raise ValidationError("base_lr must be positive")
        if not 0 < decay_rate <= 1:
            raise ValidationError("decay_rate must lie in (0, 1]")
        if decay_every <= 0:
            raise ValidationError("decay_every must be positive")
        return AdamState(
            base_lr=base_lr, decay_rate=decay_rate, decay_every=decay_every,
            beta1=beta1, beta2=beta2, epsilon=epsilon, step=0,
            m_weights=[np.zeros_like(w) for w in params.weights],
            m_biases=[np.zeros_like(b) for b in params.biases],
            v_weights=[np.zeros_like(w) for w in params.weights],
            v_biases=[np.zeros_like(b) for b in params.biases],
        )

    def effective_lr(self) -> float:
        return self.base_lr * self.decay_rate ** (self.step // self.decay_every)


def adam_step(state: AdamState, params: MlpParams, grads: MlpGrads):
    """One Adam update with bias correction; returns (new_state, new_params)."""
    for g in grads.weights + grads.biases:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient entries in adam_step")
    lr = state.effective_lr()
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t

    def update(p, m, v, g):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * g * g
        p_new = p - lr * (m_new / c1) / (np.sqrt(v_new / c2) + eps)
        return p_new, m_new, v_new

    new_w, new_mw, new_vw = [], [], []
    for p, m, v, g in zip(params.weights, state.m_weights, state.v_weights,
                          grads.weights):
        pn, mn, vn = update(p, m, v, g)
        new_w.append(pn)
        new_mw.append(mn)
        new_vw.append(vn)
    new_b, new_mb, new_vb = [], [], []
    for p, m, v, g in zip(params.biases, state.m_biases, state.v_biases,
                          grads.biases):
        pn, mn, vn = update(p, m, v, g)
        new_b.append(pn)
        new_mb.append(mn)
        new_vb.append(vn)

    new_state = AdamState(
        base_lr=state.base_lr, decay_rate=state.decay_rate,
        decay_every=state.decay_every, beta1=b1, beta2=b2, epsilon=eps,
        step=t, m_weights=new_mw, m_biases=new_mb,
        v_weights=new_vw, v_biases=new_vb)
    return new_state, MlpParams(new_w, new_b)
