"""Feedforward networks with hand-written backprop, Adam, and a low-rank mixture head.

Conventions: batches are rows, a dense layer computes ``h @ W + b`` with
``W`` of shape ``(fan_in, fan_out)``. Parameters are exposed as a flat list
``[W0, b0, W1, b1, ...]`` which is what :class:`AdamState` updates in place.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DimensionMismatch, NonFiniteLoss, ShapeMismatch, TapeMismatch
from .gaussian import LOG_2PI, MultivariateGaussian
from .mixture import GaussianMixture

ACTIVATIONS = ("tanh", "relu")


class Mlp:
    """Dense network; hidden layers use ``activation``, the output layer is linear."""

    def __init__(self, weights, biases, activation="tanh"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if len(weights) != len(biases) or not weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for w0, w1 in zip(weights, weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ShapeMismatch(f"layer shapes do not chain: {w0.shape} -> {w1.shape}")
        for w, b in zip(weights, biases):
            if b.shape != (w.shape[1],):
                raise ShapeMismatch(f"bias shape {b.shape} does not match weight {w.shape}")
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.activation = activation

    @classmethod
    def init(cls, sizes, activation="tanh", rng=None, zero_last=False):
        """Uniform fan-in initialization ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        if zero_last:
            weights[-1][:] = 0.0
            biases[-1][:] = 0.0
        return cls(weights, biases, activation)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return copy.deepcopy(self)

    def to_dict(self):
        return {
            "activation": self.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(
            [np.array(w, dtype=float).reshape(len(w), -1) for w in obj["weights"]],
            [np.array(b, dtype=float) for b in obj["biases"]],
            obj["activation"],
        )

    def __call__(self, x):
        return mlp_forward(self, x)[0]


@dataclass
class Tape:
    net_id: int
    single: bool
    inputs: list
    pre: list


def _act(kind, z):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(kind, z):
    if kind == "tanh":
        a = np.tanh(z)
        return 1.0 - a * a
    return (z > 0).astype(float)


def mlp_forward(net, x):
    """Forward pass; returns ``(output, tape)`` where the tape feeds :func:`mlp_backward`."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x.reshape(1, -1) if single else x
    if h.shape[1] != net.in_dim:
        raise DimensionMismatch(f"network expects width {net.in_dim}, got {h.shape[1]}")
    inputs, pre = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if i == last else _act(net.activation, z)
    tape = Tape(id(net), single, inputs, pre)
    return (h[0] if single else h), tape


def mlp_backward(net, tape, output_grad):
    """Reverse pass.

    Returns
    -------
    (param_grads, input_grad) with ``param_grads`` aligned to ``net.params()``.
    """
    if tape.net_id != id(net) or len(tape.inputs) != len(net.weights):
        raise TapeMismatch("tape was not recorded on this network")
    g = np.asarray(output_grad, dtype=float)
    g = g.reshape(1, -1) if tape.single else g
    if g.shape != tape.pre[-1].shape:
        raise TapeMismatch(f"output grad shape {g.shape} != output shape {tape.pre[-1].shape}")
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        if i != len(net.weights) - 1:
            g = g * _act_grad(net.activation, tape.pre[i])
        grads[2 * i] = tape.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return grads, (g[0] if tape.single else g)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state, params, grads):
    """One bias-corrected Adam update, applied in place to ``params`` (also returned)."""
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeMismatch("optimizer state does not match parameter list")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeMismatch(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --------------------------------------------------------------------------
# low-rank mixture density head


@dataclass(frozen=True)
class MdnHead:
    """Maps raw outputs to ``k`` components with covariance ``diag(exp(d)) + B B^T``.

    Raw layout per row: ``k`` logits, then ``k*out_dim`` means, ``k*out_dim``
    log-diagonals, ``k*out_dim*rank`` low-rank factors.
    """

    k: int
    out_dim: int
    rank: int = 0

    @property
    def width(self):
        return self.k * (1 + 2 * self.out_dim + self.out_dim * self.rank)

    def unpack(self, raw):
        raw = np.asarray(raw, dtype=float)
        if raw.shape[-1] != self.width:
            raise DimensionMismatch(f"head expects raw width {self.width}, got {raw.shape[-1]}")
        n = raw.shape[0]
        k, K, r = self.k, self.out_dim, self.rank
        o = 0
        logits = raw[:, o:o + k]
        o += k
        mu = raw[:, o:o + k * K].reshape(n, k, K)
        o += k * K
        d = raw[:, o:o + k * K].reshape(n, k, K)
        o += k * K
        B = raw[:, o:o + k * K * r].reshape(n, k, K, r)
        return logits, mu, d, B

    def pack(self, logits, mu, d, B):
        n = logits.shape[0]
        return np.concatenate(
            [logits, mu.reshape(n, -1), d.reshape(n, -1), B.reshape(n, -1)], axis=1
        )

    def covariances(self, d, B):
        cov = np.einsum("nkir,nkjr->nkij", B, B)
        idx = np.arange(self.out_dim)
        cov[..., idx, idx] += np.exp(d)
        return cov


def mdn_from_raw(head, raw_row):
    """GaussianMixture for a single raw output vector."""
    logits, mu, d, B = head.unpack(np.asarray(raw_row, dtype=float).reshape(1, -1))
    cov = head.covariances(d, B)[0]
    w = softmax(logits[0])
    comps = [MultivariateGaussian(mu[0, i], cov[i]) for i in range(head.k)]
    return GaussianMixture(w, comps)


def mdn_predict(net, head, x):
    """Predictive mixture for a single input ``x``."""
    if net.out_dim != head.width:
        raise DimensionMismatch(f"network output {net.out_dim} != head width {head.width}")
    raw = mlp_forward(net, np.asarray(x, dtype=float).reshape(-1))[0]
    return mdn_from_raw(head, raw)


def mdn_log_likelihood(head, raw, y):
    """Per-row log-likelihood of targets ``y`` (n, out_dim) under the head's mixture."""
    return _mdn_terms(head, raw, y)[0]


def _mdn_terms(head, raw, y):
    logits, mu, d, B = head.unpack(raw)
    K = head.out_dim
    cov = head.covariances(d, B)
    chol = np.linalg.cholesky(cov)
    diff = y[:, None, :] - mu
    eye = np.broadcast_to(np.eye(K), cov.shape)
    # Sigma^{-1} from the Cholesky factor; K is small so a batched solve is cheap
    l_inv = np.linalg.solve(chol, eye)
    prec = np.swapaxes(l_inv, -1, -2) @ l_inv
    alpha = np.einsum("nkij,nkj->nki", prec, diff)
    maha = np.sum(alpha * diff, axis=-1)
    log_det = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    log_n = -0.5 * (maha + log_det + K * LOG_2PI)
    log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
    joint = log_pi + log_n
    ll = logsumexp(joint, axis=1)
    return ll, (logits, mu, d, B, prec, alpha, joint, log_pi)


def mdn_nll_and_grad(head, raw, y):
    """Mean NLL over rows and its gradient with respect to the raw outputs."""
    y = np.asarray(y, dtype=float).reshape(raw.shape[0], head.out_dim)
    ll, (logits, mu, d, B, prec, alpha, joint, log_pi) = _mdn_terms(head, raw, y)
    n = raw.shape[0]
    gamma = np.exp(joint - ll[:, None])
    pi = np.exp(log_pi)
    g_logits = gamma - pi
    g_mu = gamma[..., None] * alpha
    # d log N / d Sigma = (alpha alpha^T - Sigma^{-1}) / 2
    g_cov = 0.5 * gamma[..., None, None] * (alpha[..., :, None] * alpha[..., None, :] - prec)
    g_d = np.diagonal(g_cov, axis1=-2, axis2=-1) * np.exp(d)
    g_B = 2.0 * g_cov @ B
    grad = -head.pack(g_logits, g_mu, g_d, g_B) / n
    return -float(np.mean(ll)), grad


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 128
    lr: float = 1e-3
    patience: int = 20
    seed: int = 0
    # if set, lr decays geometrically to lr_final over the epochs
    lr_final: float | None = None

    def lr_at(self, epoch):
        if self.lr_final is None or self.epochs <= 1:
            return self.lr
        return self.lr * (self.lr_final / self.lr) ** (epoch / (self.epochs - 1))


@dataclass
class TrainCurves:
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self):
        return {"train_nll": self.train_nll, "val_nll": self.val_nll, "best_epoch": self.best_epoch}


def minibatch_train(params_of, loss_and_grad, val_loss, n_train, cfg, snapshot, restore):
    """Generic Adam loop with per-epoch validation and best-checkpoint retention.

    ``loss_and_grad(idx)`` returns (loss, grads) on the rows ``idx``;
    ``val_loss()`` evaluates the current parameters on validation data.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    curves = TrainCurves()
    if cfg.epochs <= 0:
        return curves
    best_val = val_loss()
    best = snapshot()
    since_best = 0
    for epoch in range(cfg.epochs):
        state.lr = cfg.lr_at(epoch)
        order = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, cfg.batch):
            idx = order[start:start + cfg.batch]
            loss, grads = loss_and_grad(idx)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}; lower the learning rate")
            adam_step(state, params_of(), grads)
            total += loss * idx.size
        v = val_loss()
        curves.train_nll.append(total / n_train)
        curves.val_nll.append(v)
        if np.isfinite(v) and v < best_val:
            best_val = v
            best = snapshot()
            curves.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    restore(best)
    return curves


def _xy(ds):
    if hasattr(ds, "inputs"):
        return np.asarray(ds.inputs, dtype=float), np.asarray(ds.targets, dtype=float)
    x, y = ds
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def train_mdn(train, val, hidden=(40, 40, 40), k=2, rank=2, cfg=None, activation="relu", out_dim=None):
    """Fit an MLP + :class:`MdnHead` by mini-batch Adam on target NLL.

    ``train``/``val`` are datasets exposing ``inputs`` and ``targets`` (or
    ``(x, y)`` tuples). The best-validation parameters are kept.

    Returns
    -------
    (net, head, curves)
    """
    cfg = cfg or TrainConfig()
    x_tr, y_tr = _xy(train)
    x_va, y_va = _xy(val)
    if y_tr.ndim == 1:
        y_tr, y_va = y_tr[:, None], y_va[:, None]
    out_dim = out_dim or y_tr.shape[1]
    head = MdnHead(k, out_dim, rank)
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    net = Mlp.init([x_tr.shape[1], *hidden, head.width], activation, init_rng)
    # start near a unit-variance, equal-weight mixture
    net.weights[-1] *= 0.1
    net.biases[-1][:] = 0.0

    def loss_and_grad(idx):
        out, tape = mlp_forward(net, x_tr[idx])
        loss, g_raw = mdn_nll_and_grad(head, out, y_tr[idx])
        grads, _ = mlp_backward(net, tape, g_raw)
        return loss, grads

    def val_loss():
        with np.errstate(all="ignore"):
            try:
                return -float(np.mean(mdn_log_likelihood(head, mlp_forward(net, x_va)[0], y_va)))
            except np.linalg.LinAlgError:
                return np.inf

    def snapshot():
        return [p.copy() for p in net.params()]

    def restore(saved):
        for p, s in zip(net.params(), saved):
            p[...] = s

    curves = minibatch_train(net.params, loss_and_grad, val_loss, x_tr.shape[0], cfg, snapshot, restore)
    return net, head, curves
