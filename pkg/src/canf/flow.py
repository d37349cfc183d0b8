"""RealNVP normalizing flow with affine coupling layers.

The flow maps data ``y`` to latent ``z`` (``f: Y -> Z``) with a standard
normal base, so ``log p(y) = log N(z; 0, I) + log|det df/dy|``. Each coupling
layer keeps the masked coordinates and transforms the rest as
``x_b * exp(s(x_a)) + t(x_a)`` with the scale soft-clamped to
``s_max * tanh(s / s_max)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFiniteInput
from .gaussian import LOG_2PI
from .neural import Mlp, TrainConfig, mlp_backward, mlp_forward, minibatch_train

S_MAX = 5.0


@dataclass
class CouplingLayer:
    mask: np.ndarray
    scale_net: Mlp
    translate_net: Mlp
    s_max: float = S_MAX

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.all() or not self.mask.any():
            raise ValueError("mask needs at least one fixed and one transformed coordinate")
        n_in, n_out = int(self.mask.sum()), int((~self.mask).sum())
        for net in (self.scale_net, self.translate_net):
            if net.in_dim != n_in or net.out_dim != n_out:
                raise DimensionMismatch(
                    f"coupling nets must map {n_in} -> {n_out}, got {net.in_dim} -> {net.out_dim}"
                )

    def params(self):
        return self.scale_net.params() + self.translate_net.params()

    def _scale_shift(self, x_a):
        s_raw, s_tape = mlp_forward(self.scale_net, x_a)
        t, t_tape = mlp_forward(self.translate_net, x_a)
        th = np.tanh(s_raw / self.s_max)
        return self.s_max * th, t, (th, s_tape, t_tape)

    def forward(self, x):
        x_a, x_b = x[:, self.mask], x[:, ~self.mask]
        s, t, cache = self._scale_shift(x_a)
        es = np.exp(s)
        y = np.empty_like(x)
        y[:, self.mask] = x_a
        y[:, ~self.mask] = x_b * es + t
        return y, s.sum(axis=1), (x_b, es, cache)

    def inverse(self, y):
        y_a, y_b = y[:, self.mask], y[:, ~self.mask]
        s, t, _ = self._scale_shift(y_a)
        x = np.empty_like(y)
        x[:, self.mask] = y_a
        x[:, ~self.mask] = (y_b - t) * np.exp(-s)
        return x, -s.sum(axis=1)

    def backward(self, cache, grad_y, grad_logdet):
        """Gradients w.r.t. the layer input and parameters given output grads."""
        x_b, es, (th, s_tape, t_tape) = cache
        gy_a, gy_b = grad_y[:, self.mask], grad_y[:, ~self.mask]
        g_s = gy_b * x_b * es + grad_logdet[:, None]
        g_s_raw = g_s * (1.0 - th * th)
        s_grads, s_in = mlp_backward(self.scale_net, s_tape, g_s_raw)
        t_grads, t_in = mlp_backward(self.translate_net, t_tape, gy_b)
        grad_x = np.empty_like(grad_y)
        grad_x[:, self.mask] = gy_a + s_in + t_in
        grad_x[:, ~self.mask] = gy_b * es
        return grad_x, s_grads + t_grads

    def to_dict(self):
        return {
            "mask": self.mask.astype(int).tolist(),
            "scale_net": self.scale_net.to_dict(),
            "translate_net": self.translate_net.to_dict(),
            "s_max": self.s_max,
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(
            np.array(obj["mask"], dtype=bool),
            Mlp.from_dict(obj["scale_net"]),
            Mlp.from_dict(obj["translate_net"]),
            float(obj["s_max"]),
        )


def alternating_masks(dim, n_layers):
    even = np.arange(dim) % 2 == 0
    return [even if i % 2 == 0 else ~even for i in range(n_layers)]


class RealNvpFlow:
    def __init__(self, layers):
        if not layers:
            raise ValueError("a flow needs at least one coupling layer")
        dims = {layer.mask.size for layer in layers}
        if len(dims) != 1:
            raise DimensionMismatch("coupling layers disagree on dimension")
        self.layers = list(layers)
        self.dim = dims.pop()

    @classmethod
    def init(cls, dim, n_layers=4, hidden=(12, 12), rng=None, s_max=S_MAX):
        """Fresh flow; final layers of every coupling net are zero so it starts as the identity."""
        if dim < 2:
            raise ValueError("coupling flows need dim >= 2")
        rng = np.random.default_rng(rng)
        layers = []
        for mask in alternating_masks(dim, n_layers):
            n_in, n_out = int(mask.sum()), int((~mask).sum())
            sizes = [n_in, *hidden, n_out]
            layers.append(
                CouplingLayer(
                    mask,
                    Mlp.init(sizes, "tanh", rng, zero_last=True),
                    Mlp.init(sizes, "tanh", rng, zero_last=True),
                    s_max,
                )
            )
        return cls(layers)

    def params(self):
        out = []
        for layer in self.layers:
            out += layer.params()
        return out

    def log_pdf(self, y):
        return flow_log_pdf(self, y)

    def sample(self, count, rng_seed=None):
        return flow_sample(self, count, rng_seed)

    def to_dict(self):
        return {"dim": self.dim, "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, obj):
        return cls([CouplingLayer.from_dict(o) for o in obj["layers"]])


def _batch(flow, y):
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    pts = y.reshape(1, -1) if single else y
    if pts.shape[1] != flow.dim:
        raise DimensionMismatch(f"flow dimension is {flow.dim}, got {pts.shape[1]}")
    if not np.all(np.isfinite(pts)):
        raise NonFiniteInput("flow input contains non-finite values")
    return pts, single


def flow_forward(flow, y):
    """Data -> latent. Returns ``(z, log_det)``; batched if ``y`` is 2-d."""
    x, single = _batch(flow, y)
    log_det = np.zeros(x.shape[0])
    for layer in flow.layers:
        x, ld, _ = layer.forward(x)
        log_det += ld
    return (x[0], float(log_det[0])) if single else (x, log_det)


def flow_inverse(flow, z, return_log_det=False):
    """Latent -> data, inverting layers in reverse order."""
    x, single = _batch(flow, z)
    log_det = np.zeros(x.shape[0])
    for layer in reversed(flow.layers):
        x, ld = layer.inverse(x)
        log_det += ld
    out = x[0] if single else x
    if return_log_det:
        return out, (float(log_det[0]) if single else log_det)
    return out


def base_log_pdf(z):
    z = np.asarray(z, dtype=float)
    return -0.5 * (np.sum(z * z, axis=-1) + z.shape[-1] * LOG_2PI)


def flow_log_pdf(flow, y):
    z, log_det = flow_forward(flow, y)
    return base_log_pdf(z) + log_det


def flow_sample(flow, count, rng_seed=None):
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((count, flow.dim))
    return flow_inverse(flow, z)


def flow_nll_and_grad(flow, y):
    """Mean NLL over the rows of ``y`` and its gradient aligned with ``flow.params()``."""
    x = np.asarray(y, dtype=float)
    n = x.shape[0]
    caches = []
    log_det = np.zeros(n)
    for layer in flow.layers:
        x, ld, cache = layer.forward(x)
        log_det += ld
        caches.append(cache)
    nll = -float(np.mean(base_log_pdf(x) + log_det))
    grad_x = x / n
    grad_ld = np.full(n, -1.0 / n)
    grads = []
    for layer, cache in zip(reversed(flow.layers), reversed(caches)):
        grad_x, g = layer.backward(cache, grad_x, grad_ld)
        grads = g + grads
    return nll, grads


def train_flow(train, val, n_layers=4, hidden=(12, 12), cfg=None, s_max=S_MAX):
    """Maximum-likelihood RealNVP by mini-batch Adam, keeping the best validation checkpoint.

    Returns
    -------
    (flow, curves)
    """
    cfg = cfg or TrainConfig()
    train = np.asarray(train, dtype=float)
    val = np.asarray(val, dtype=float)
    if train.shape[1] != val.shape[1]:
        raise DimensionMismatch("train and validation dimensions differ")
    flow = RealNvpFlow.init(
        train.shape[1], n_layers, hidden, np.random.SeedSequence([cfg.seed, 2]), s_max
    )

    def loss_and_grad(idx):
        return flow_nll_and_grad(flow, train[idx])

    def val_loss():
        with np.errstate(all="ignore"):
            return -float(np.mean(flow_log_pdf(flow, val)))

    def snapshot():
        return [p.copy() for p in flow.params()]

    def restore(saved):
        for p, s in zip(flow.params(), saved):
            p[...] = s

    curves = minibatch_train(flow.params, loss_and_grad, val_loss, train.shape[0], cfg, snapshot, restore)
    return flow, curves
