"""Small dense networks in numpy with hand-written backprop, Adam and Polyak averaging.

Parameters live in one flat float64 vector; layer weights and biases are views
into it, so optimizers and target-network updates work on a single array.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "dmg-lab-params"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "softplus")
OUTPUT_ACTIVATIONS = ("identity", "tanh")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.logaddexp(0.0, z)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        # one-sided: derivative 0 at the kink
        return (z > 0).astype(float)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Mlp:
    """Feed-forward net: affine layers, ``activation`` between them, ``out_activation`` at the end."""

    def __init__(self, sizes, activation: str = "relu", out_activation: str = "identity",
                 params: np.ndarray | None = None):
        sizes = tuple(int(n) for n in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if out_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {out_activation!r}")
        self.sizes = sizes
        self.activation = activation
        self.out_activation = out_activation
        self._shapes = [((m, n), (n,)) for m, n in zip(sizes[:-1], sizes[1:])]
        n_params = sum(m * n + n for m, n in zip(sizes[:-1], sizes[1:]))
        if params is None:
            params = np.zeros(n_params)
        params = np.asarray(params, dtype=float)
        if params.shape != (n_params,):
            raise ValueError(f"expected {n_params} parameters, got {params.shape}")
        self.params = params.copy()

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, activation: str = "relu",
             out_activation: str = "identity") -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        net = cls(sizes, activation, out_activation)
        for W, b in net.layers():
            bound = 1.0 / np.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        return net

    @property
    def n_params(self) -> int:
        return self.params.size

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        flat = self.params if params is None else params
        out, i = [], 0
        for (wshape, bshape) in self._shapes:
            nw = wshape[0] * wshape[1]
            W = flat[i:i + nw].reshape(wshape)
            b = flat[i + nw:i + nw + bshape[0]]
            out.append((W, b))
            i += nw + bshape[0]
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.activation, self.out_activation, self.params)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has {x.shape[-1]} features, net expects {self.sizes[0]}")
        return x

    def forward(self, x, params: np.ndarray | None = None) -> np.ndarray:
        return self.forward_cache(x, params)[0]

    def forward_cache(self, x, params: np.ndarray | None = None):
        x = self._check_input(x)
        single = x.ndim == 1
        h = x[None] if single else x
        pre, post = [], [h]
        layers = self.layers(params)
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            pre.append(z)
            if i < len(layers) - 1:
                h = _act(self.activation, z)
            else:
                h = np.tanh(z) if self.out_activation == "tanh" else z
            post.append(h)
        out = h[0] if single else h
        return out, (pre, post, single, params)

    def backward(self, cache, grad_out) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of sum(grad_out * output) w.r.t. (params, input)."""
        pre, post, single, params = cache
        g = np.asarray(grad_out, dtype=float)
        g = g[None] if single else g
        if g.ndim == 1:
            g = g[:, None]
        layers = self.layers(params)
        grads = []
        if self.out_activation == "tanh":
            g = g * (1.0 - post[-1] ** 2)
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            grads.append((post[i].T @ g, g.sum(axis=0)))
            g = g @ W.T
            if i > 0:
                g = g * _act_grad(self.activation, pre[i - 1])
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in reversed(grads)])
        return flat, (g[0] if single else g)

    def param_grad(self, x) -> np.ndarray:
        """d output / d params for a single input and scalar output."""
        out, cache = self.forward_cache(x)
        if np.size(out) != 1:
            raise ValueError("param_grad needs a scalar-output net")
        return self.backward(cache, np.ones_like(out))[0]

    # checkpoints

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "sizes": list(self.sizes),
            "activation": self.activation,
            "out_activation": self.out_activation,
            "params": [float(p) for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a dmg-lab parameter checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        return cls(d["sizes"], d["activation"], d.get("out_activation", "identity"), np.array(d["params"]))


def grad(net: Mlp, x, loss_grad_fn) -> tuple[float, np.ndarray]:
    """Loss value and parameter gradient for a loss of the net's output.

    ``loss_grad_fn(output) -> (loss, dloss/doutput)``.
    """
    out, cache = net.forward_cache(x)
    loss, g_out = loss_grad_fn(out)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return float(loss), net.backward(cache, g_out)[0]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 3e-4) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr)

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t, "lr": self.lr,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(np.array(d["m"], dtype=float), np.array(d["v"], dtype=float), int(d["t"]), d["lr"],
                   d["beta1"], d["beta2"], d["eps"])


def adam_step(state: AdamState, params: np.ndarray, g: np.ndarray, lr: float | None = None) -> np.ndarray:
    """Bias-corrected Adam descent step; updates ``state`` in place and returns new params."""
    if g.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("Adam shapes do not match")
    lr = state.lr if lr is None else lr
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def polyak_update(target: np.ndarray, online: np.ndarray, xi: float) -> np.ndarray:
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi}")
    return (1.0 - xi) * target + xi * online


def expectile_loss(u, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """|tau - 1(u < 0)| u^2 and its derivative in u."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    u = np.asarray(u, dtype=float)
    w = np.where(u < 0, 1.0 - tau, tau)
    return w * u * u, 2.0 * w * u


@dataclass
class ProbeReport:
    """One-step generalization probe.

    observed = Q_new(s, a~) - Q_old(s, a~) after a single TD step at (s, a);
    c1 = alpha <grad Q(s,a~), grad Q(s,a)>; residual = observed - c1 * delta_target
    is the second-order remainder. When the backup target at a~ is supplied,
    c2 = (delta_target - delta_tilde) / ||a~ - a|| so that
    c1 * (delta_tilde + c2 ||a~ - a||) equals c1 * delta_target.
    """

    c1: float
    delta_target: float
    observed: float
    residual: float
    alpha: float
    distance: float
    grad_norm_a: float
    grad_norm_tilde: float
    k_g_local: float
    delta_tilde: float | None = None
    c2: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def g_max(self) -> float:
        return max(self.grad_norm_a, self.grad_norm_tilde)

    @property
    def conditions_hold(self) -> bool:
        """Step size and distance conditions under which c1 must land in [0, 1]."""
        small_step = self.alpha <= 1.0 / self.g_max**2 if self.g_max > 0 else True
        near = self.k_g_local == 0 or self.distance <= self.grad_norm_a / self.k_g_local
        return small_step and near


def generalization_probe(net: Mlp, target: float, s, a, a_tilde, alpha: float,
                         target_tilde: float | None = None) -> ProbeReport:
    """Take one TD step toward ``target`` at (s, a) and measure the change at (s, a~)."""
    x = np.concatenate([np.atleast_1d(s), np.atleast_1d(a)]).astype(float)
    xt = np.concatenate([np.atleast_1d(s), np.atleast_1d(a_tilde)]).astype(float)
    q_a = float(np.squeeze(net.forward(x)))
    q_t = float(np.squeeze(net.forward(xt)))
    g_a = net.param_grad(x)
    g_t = net.param_grad(xt)
    delta = float(target) - q_a
    if not np.isfinite(delta):
        raise FloatingPointError("non-finite TD error in the probe")
    new_params = net.params + alpha * delta * g_a
    q_t_new = float(np.squeeze(net.forward(xt, new_params)))
    if not (np.isfinite([q_a, q_t, q_t_new]).all() and np.isfinite(g_a).all() and np.isfinite(g_t).all()):
        raise FloatingPointError("non-finite value inside the probe")
    observed = q_t_new - q_t
    c1 = float(alpha * (g_t @ g_a))
    dist = float(np.linalg.norm(np.atleast_1d(a_tilde) - np.atleast_1d(a)))
    k_g = float(np.linalg.norm(g_t - g_a) / dist) if dist > 0 else 0.0
    rep = ProbeReport(c1, delta, observed, observed - c1 * delta, alpha, dist,
                      float(np.linalg.norm(g_a)), float(np.linalg.norm(g_t)), k_g)
    if target_tilde is not None:
        rep.delta_tilde = float(target_tilde) - q_t
        rep.c2 = (delta - rep.delta_tilde) / dist if dist > 0 else 0.0
    return rep


def save_params(path: str | Path, nets: dict[str, Mlp], extra: dict | None = None) -> None:
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
               "nets": {k: v.to_dict() for k, v in nets.items()}}
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload))


def load_params(path: str | Path) -> tuple[dict[str, Mlp], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a dmg-lab parameter checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return {k: Mlp.from_dict(v) for k, v in payload["nets"].items()}, payload.get("extra", {})
