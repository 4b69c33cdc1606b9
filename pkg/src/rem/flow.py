"""Normalizing-flow density model over PCA-normalized embeddings.

A model is a stack of bijectors mapping latents z (spherical unit
Gaussian) to data x. Density queries invert the stack back-to-front and
accumulate log-determinant corrections; the data-centric rareness score
is the negative log-probability.

Two bijector variants:

* continuous: learned ODE dynamics integrated with fixed-step classical
  RK4, log-determinant from the exact Jacobian trace (k directional
  derivatives per stage, no stochastic estimator).
* affine coupling: closed-form alternating-half scale/shift layers.

Training minimizes mean NLL by Adam over the exactly differentiated
computation, including backpropagation through the unrolled integrator
(one RK4 step is re-taped at a time to bound memory).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .errors import NumericalError, ValidationError
from .nn import (MlpGrads, MlpParams, Node, add, backward_multi, concat_cols,
                 exp, gather_cols, matmul, mul, reshape, repeat_rows,
                 scatter_pair, sub, sum_axis1, tanh, taped_params, value_of)

LN_2PI = math.log(2.0 * math.pi)


def base_log_prob(z):
    """Log-density of the spherical unit-variance Gaussian base."""
    z = np.asarray(z, dtype=np.float64)
    k = z.shape[-1]
    return -0.5 * k * LN_2PI - 0.5 * np.sum(np.square(z), axis=-1)


def _check_finite_input(x, k, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != k:
        raise ValidationError(f"{what}: dimension {x.shape[-1]} != model dim {k}")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{what}: input contains non-finite entries")
    return x


def _mlp_apply(net: MlpParams, x):
    """MLP forward usable with ndarray or Node inputs/parameters."""
    h = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        h = tanh(add(matmul(h, w), b))
    return add(matmul(h, net.weights[-1]), net.biases[-1])


class ContinuousBijector:
    """ODE-dynamics bijector; forward integrates t: 0 -> 1."""

    variant = "continuous"

    def __init__(self, net: MlpParams, steps: int = 16):
        self.net = net
        self.steps = int(steps)
        if self.steps < 1:
            raise ValidationError("integration steps must be >= 1")
        self.dim = net.weights[-1].shape[1]
        if net.weights[0].shape[0] != self.dim + 1:
            raise ValidationError(
                "dynamics net must take state dim + 1 (time) inputs")

    # -- dynamics -----------------------------------------------------

    def _f(self, net, h, t):
        rows = value_of(h).shape[0]
        t_col = np.full((rows, 1), t)
        return _mlp_apply(net, concat_cols([h, t_col]))

    def _f_with_trace(self, net, h, t):
        """Dynamics value and exact Jacobian trace at (h, t).

        The trace is the sum of k directional derivatives, propagated as
        a (rows*k, k) tangent batch alongside the primal pass so the
        whole computation stays differentiable by the tape.
        """
        k = self.dim
        rows = value_of(h).shape[0]
        basis = np.tile(np.eye(k), (rows, 1))
        hcur = concat_cols([h, np.full((rows, 1), t)])
        tcur = np.concatenate([basis, np.zeros((rows * k, 1))], axis=1)
        for w, b in zip(net.weights[:-1], net.biases[:-1]):
            pre = add(matmul(hcur, w), b)
            tpre = matmul(tcur, w)
            act = tanh(pre)
            dact = sub(1.0, mul(act, act))
            tcur = mul(tpre, repeat_rows(dact, k))
            hcur = act
        out = add(matmul(hcur, net.weights[-1]), net.biases[-1])
        tout = matmul(tcur, net.weights[-1])
        diag = mul(tout, basis)
        trace = sum_axis1(reshape(sum_axis1(diag), (rows, k)))
        return out, trace

    def _rk4_step(self, net, h, t0, dt, with_trace):
        """One classical RK4 step of the (state, log-det) system."""
        if with_trace:
            k1, tr1 = self._f_with_trace(net, h, t0)
            k2, tr2 = self._f_with_trace(net, add(h, mul(k1, dt / 2.0)), t0 + dt / 2.0)
            k3, tr3 = self._f_with_trace(net, add(h, mul(k2, dt / 2.0)), t0 + dt / 2.0)
            k4, tr4 = self._f_with_trace(net, add(h, mul(k3, dt)), t0 + dt)
            incr = mul(add(add(k1, mul(add(k2, k3), 2.0)), k4), dt / 6.0)
            ld_inc = mul(add(add(tr1, mul(add(tr2, tr3), 2.0)), tr4), dt / 6.0)
            return add(h, incr), ld_inc
        k1 = self._f(net, h, t0)
        k2 = self._f(net, add(h, mul(k1, dt / 2.0)), t0 + dt / 2.0)
        k3 = self._f(net, add(h, mul(k2, dt / 2.0)), t0 + dt / 2.0)
        k4 = self._f(net, add(h, mul(k3, dt)), t0 + dt)
        incr = mul(add(add(k1, mul(add(k2, k3), 2.0)), k4), dt / 6.0)
        return add(h, incr), None

    # -- public maps --------------------------------------------------

    def forward(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        h = z
        dt = 1.0 / self.steps
        for i in range(self.steps):
            h, _ = self._rk4_step(self.net, h, i * dt, dt, with_trace=False)
        if not np.all(np.isfinite(h)):
            raise NumericalError("non-finite state during forward integration")
        return h

    def inverse_and_log_det(self, x: np.ndarray):
        z, ld, _ = self.inverse_blocks(np.atleast_2d(np.asarray(x, dtype=np.float64)),
                                       keep_checkpoints=False)
        return z, ld

    def inverse_blocks(self, x: np.ndarray, keep_checkpoints: bool = True):
        """Integrate t: 1 -> 0 accumulating -trace dt; optionally keep
        per-step entry states for re-taping during backprop."""
        h = x
        ld = np.zeros(h.shape[0])
        dt = -1.0 / self.steps
        ckpts = []
        for i in range(self.steps):
            if keep_checkpoints:
                ckpts.append(h)
            h, ld_inc = self._rk4_step(self.net, h, 1.0 + i * dt, dt,
                                       with_trace=True)
            ld = ld + ld_inc
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(ld))):
            raise NumericalError("non-finite state during inverse integration")
        return h, ld, ckpts

    @property
    def n_blocks(self) -> int:
        return self.steps

    def taped_block(self, idx: int, h_node: Node, taped_net: MlpParams):
        dt = -1.0 / self.steps
        return self._rk4_step(taped_net, h_node, 1.0 + idx * dt, dt,
                              with_trace=True)

    def to_json(self) -> dict:
        return {"variant": self.variant, "steps": self.steps,
                "net": self.net.to_json()}

    @staticmethod
    def from_json(obj: dict) -> "ContinuousBijector":
        return ContinuousBijector(MlpParams.from_json(obj["net"]),
                                  steps=obj["steps"])


class AffineCoupling:
    """RealNVP-style coupling: half the dims scale/shift the other half.

    The scale net output is squashed by 2*tanh for stability. parity
    selects which half passes through unchanged.
    """

    variant = "coupling"

    def __init__(self, net: MlpParams, dim: int, parity: int):
        if dim < 2:
            raise ValidationError("affine coupling requires dimension >= 2")
        self.net = net
        self.dim = int(dim)
        self.parity = int(parity) % 2
        idx = np.arange(dim)
        self.passive_idx = idx[idx % 2 == self.parity]
        self.active_idx = idx[idx % 2 != self.parity]
        n_active = len(self.active_idx)
        if net.weights[-1].shape[1] != 2 * n_active:
            raise ValidationError(
                "coupling net must output 2 * active-half width")
        if net.weights[0].shape[0] != len(self.passive_idx):
            raise ValidationError(
                "coupling net must take passive-half width inputs")

    def _scale_shift(self, net, u):
        raw = _mlp_apply(net, u)
        na = len(self.active_idx)
        s = mul(tanh(gather_cols(raw, np.arange(na))), 2.0)
        t = gather_cols(raw, np.arange(na, 2 * na))
        return s, t

    def forward(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        u = z[:, self.passive_idx]
        v = z[:, self.active_idx]
        s, t = self._scale_shift(self.net, u)
        v_out = v * np.exp(s) + t
        out = np.empty_like(z)
        out[:, self.passive_idx] = u
        out[:, self.active_idx] = v_out
        return out

    def inverse_and_log_det(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z, ld = self._inverse_ops(self.net, x)
        return z, ld

    def _inverse_ops(self, net, x):
        u = gather_cols(x, self.passive_idx)
        v = gather_cols(x, self.active_idx)
        s, t = self._scale_shift(net, u)
        v0 = mul(sub(v, t), exp(mul(s, -1.0)))
        z = scatter_pair(self.passive_idx, u, self.active_idx, v0, self.dim)
        ld = mul(sum_axis1(s), -1.0)
        return z, ld

    def inverse_blocks(self, x: np.ndarray, keep_checkpoints: bool = True):
        z, ld = self.inverse_and_log_det(x)
        return z, ld, ([x] if keep_checkpoints else [])

    @property
    def n_blocks(self) -> int:
        return 1

    def taped_block(self, idx: int, h_node: Node, taped_net: MlpParams):
        return self._inverse_ops(taped_net, h_node)

    def to_json(self) -> dict:
        return {"variant": self.variant, "dim": self.dim,
                "parity": self.parity, "net": self.net.to_json()}

    @staticmethod
    def from_json(obj: dict) -> "AffineCoupling":
        return AffineCoupling(MlpParams.from_json(obj["net"]),
                              dim=obj["dim"], parity=obj["parity"])


def bijector_from_json(obj: dict):
    if obj["variant"] == "continuous":
        return ContinuousBijector.from_json(obj)
    if obj["variant"] == "coupling":
        return AffineCoupling.from_json(obj)
    raise ValidationError(f"unknown bijector variant {obj['variant']!r}")


def inverse_and_log_det(bijector, x):
    """Map data to latent and return log|det(dz/dx)| alongside."""
    return bijector.inverse_and_log_det(x)


@dataclass
class FlowConfig:
    """Training and architecture settings; defaults follow the paper's
    flow setup (4 continuous blocks of 4x64 tanh dynamics, Adam 1e-4
    with 0.98 decay every 2400 steps, 100 epochs)."""

    variant: str = "continuous"
    blocks: int = 4
    hidden_layers: int = 4
    hidden_units: int = 64
    time_steps: int = 16
    epochs: int = 100
    batch_size: int = 256
    base_lr: float = 1e-4
    decay_rate: float = 0.98
    decay_every: int = 2400
    seed: int = 0
    clip_norm: float | None = None

    @staticmethod
    def from_json(obj: dict) -> "FlowConfig":
        known = {f for f in FlowConfig.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown flow config keys: {sorted(unknown)}")
        return FlowConfig(**obj)


class FlowModel:
    """Bijector stack + spherical Gaussian base; immutable once trained."""

    def __init__(self, bijectors, dim: int, pca_ref: str | None = None,
                 history=None, config: FlowConfig | None = None):
        if not bijectors:
            raise ValidationError("bijector stack must be nonempty")
        for b in bijectors:
            if b.dim != dim:
                raise ValidationError("all bijector dims must equal model dim")
        self.bijectors = list(bijectors)
        self.dim = dim
        self.pca_ref = pca_ref
        self.history = list(history) if history else []
        self.config = config

    def log_prob(self, x, chunk: int = 2048):
        """Exact log-density via change of variables; accepts (k,) or (n,k).

        Rows are processed in chunks to bound the tangent-batch memory of
        the continuous bijector's trace computation.
        """
        x = _check_finite_input(x, self.dim, "log_prob")
        single = x.ndim == 1
        rows = np.atleast_2d(x)
        pieces = []
        for start in range(0, rows.shape[0], chunk):
            h = rows[start:start + chunk]
            ld_total = np.zeros(h.shape[0])
            for bij in reversed(self.bijectors):
                h, ld = bij.inverse_and_log_det(h)
                ld_total = ld_total + ld
            pieces.append(base_log_prob(h) + ld_total)
        out = np.concatenate(pieces) if pieces else np.zeros(0)
        return float(out[0]) if single else out

    def sample(self, n: int, seed: int) -> np.ndarray:
        """n draws pushed through the forward stack; deterministic per seed."""
        if n < 0:
            raise ValidationError("sample count must be >= 0")
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, self.dim))
        if n == 0:
            return z
        for bij in self.bijectors:
            z = bij.forward(z)
        return z

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "bijectors": [b.to_json() for b in self.bijectors],
            "pca_ref": self.pca_ref,
            "training_history": self.history,
            "config": asdict(self.config) if self.config else None,
        }

    @staticmethod
    def from_json(obj: dict) -> "FlowModel":
        cfg = FlowConfig(**obj["config"]) if obj.get("config") else None
        return FlowModel(
            [bijector_from_json(b) for b in obj["bijectors"]],
            dim=obj["dim"], pca_ref=obj.get("pca_ref"),
            history=obj.get("training_history"), config=cfg)


def rareness_data(model: FlowModel, x_norm):
    """Data-centric rareness: negative flow log-probability."""
    lp = model.log_prob(x_norm)
    return -lp


def nll_and_grads(bijectors, batch: np.ndarray):
    """Mean NLL of a batch and exact parameter gradients per bijector.

    The forward pass runs without the tape, keeping per-block entry
    states; the backward pass re-tapes one block at a time (newest
    first) and chains the state gradient through, so peak memory is one
    block's graph regardless of integrator depth.
    """
    batch = np.asarray(batch, dtype=np.float64)
    n, k = batch.shape
    h = batch
    ld_total = np.zeros(n)
    ckpt_list = []
    for bij in reversed(bijectors):
        h, ld, ckpts = bij.inverse_blocks(h, keep_checkpoints=True)
        ckpt_list.append(ckpts)
        ld_total = ld_total + ld
    z = h
    nll_vec = 0.5 * k * LN_2PI + 0.5 * np.sum(np.square(z), axis=1) - ld_total
    loss = float(np.mean(nll_vec))
    if not math.isfinite(loss):
        raise NumericalError("non-finite training loss")

    g_state = z / n
    g_ld = np.full(n, -1.0 / n)
    grads = [MlpGrads([np.zeros_like(w) for w in b.net.weights],
                      [np.zeros_like(bb) for bb in b.net.biases])
             for b in bijectors]
    # walk bijectors in reverse order of application (stack order)
    for bij, grad_acc, ckpts in zip(bijectors, grads, reversed(ckpt_list)):
        for j in reversed(range(bij.n_blocks)):
            taped_net, _ = taped_params(bij.net)
            h_leaf = Node(ckpts[j])
            h_out, ld_inc = bij.taped_block(j, h_leaf, taped_net)
            backward_multi([(h_out, g_state), (ld_inc, g_ld)])
            g_state = h_leaf.grad
            piece = nn.grads_from_leaves(bij.net, taped_net)
            for acc, g in zip(grad_acc.weights, piece.weights):
                acc += g
            for acc, g in zip(grad_acc.biases, piece.biases):
                acc += g
    return loss, grads


def _global_grad_norm(grads) -> float:
    total = 0.0
    for g in grads:
        for arr in g.weights + g.biases:
            total += float(np.sum(arr * arr))
    return math.sqrt(total)


def build_flow_model(dim: int, config: FlowConfig,
                     pca_ref: str | None = None) -> FlowModel:
    """Freshly initialized (untrained) model per the config, seeded."""
    if dim < 1:
        raise ValidationError("model dimension must be >= 1")
    if config.variant not in ("continuous", "coupling"):
        raise ValidationError(f"unknown flow variant {config.variant!r}")
    if config.variant == "coupling" and dim < 2:
        raise ValidationError("affine coupling requires dimension >= 2")
    seeds = np.random.SeedSequence(config.seed).spawn(config.blocks)
    bijectors = []
    for i in range(config.blocks):
        rng = np.random.default_rng(seeds[i])
        hidden = [config.hidden_units] * config.hidden_layers
        if config.variant == "continuous":
            net = nn.init_mlp([dim + 1] + hidden + [dim], rng)
            bijectors.append(ContinuousBijector(net, steps=config.time_steps))
        else:
            parity = i % 2
            n_passive = len(np.arange(dim)[np.arange(dim) % 2 == parity])
            n_active = dim - n_passive
            net = nn.init_mlp([n_passive] + hidden + [2 * n_active], rng)
            bijectors.append(AffineCoupling(net, dim=dim, parity=parity))
    return FlowModel(bijectors, dim=dim, pca_ref=pca_ref, config=config)


def train_flow(dataset, config: FlowConfig,
               pca_ref: str | None = None, quiet: bool = True) -> FlowModel:
    """Maximum-likelihood training by batched Adam on mean NLL.

    dataset: (n, k) array or a list of EmbeddingRecord. Deterministic
    given config.seed (initialization and per-epoch shuffles).
    """
    if hasattr(dataset, "shape"):
        X = np.asarray(dataset, dtype=np.float64)
    else:
        X = np.stack([np.asarray(r.x_norm, dtype=np.float64) for r in dataset])
    if X.ndim != 2:
        raise ValidationError("training data must be a 2D array of embeddings")
    n, k = X.shape
    if n < config.batch_size:
        raise ValidationError(
            f"dataset size {n} is smaller than batch size {config.batch_size}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("training data contains non-finite entries")

    model = build_flow_model(k, config, pca_ref=pca_ref)
    states = [nn.AdamState.for_params(
        b.net, config.base_lr, decay_rate=config.decay_rate,
        decay_every=config.decay_every) for b in model.bijectors]
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence(config.seed).spawn(config.blocks + 1)[-1])

    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            try:
                loss, grads = nll_and_grads(model.bijectors, X[idx])
            except NumericalError as err:
                raise NumericalError(
                    f"{err} (epoch {epoch}, batch starting at {start})") from err
            if config.clip_norm is not None:
                norm = _global_grad_norm(grads)
                if norm > config.clip_norm:
                    scale = config.clip_norm / norm
                    for g in grads:
                        g.weights = [w * scale for w in g.weights]
                        g.biases = [b * scale for b in g.biases]
            for bi, bij in enumerate(model.bijectors):
                states[bi], bij.net = nn.adam_step(states[bi], bij.net, grads[bi])
            epoch_loss += loss * len(idx)
        model.history.append(epoch_loss / n)
        if not quiet:
            print(f"epoch {epoch + 1}/{config.epochs}: "
                  f"mean NLL {model.history[-1]:.4f}")
    return model
