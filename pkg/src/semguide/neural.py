"""Small float64 neural substrate: MLPs with hand-written reverse mode and AdamW.

Tensors are plain numpy arrays. Batches are laid out (rows, features) and
weights are stored (fan_in, fan_out) so a layer is ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

CHECKPOINT_VERSION = 1

# sigmoid logits are clipped here so outputs stay strictly inside (0, 1)
_LOGIT_CLIP = 35.0


def _sigmoid(z):
    z = np.clip(z, -_LOGIT_CLIP, _LOGIT_CLIP)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _silu(z):
    return z * _sigmoid(z)


def _silu_grad(z, a):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _sigmoid_grad(z, a):
    inside = np.abs(z) < _LOGIT_CLIP
    return a * (1.0 - a) * inside


# name -> (f(z), f'(z, f(z)))
ACTIVATIONS = {
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
    "silu": (_silu, _silu_grad),
    "sigmoid": (_sigmoid, _sigmoid_grad),
}


@dataclass(eq=False)
class Mlp:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "silu"
    output_activation: str = "identity"
    # bumped on every in-place parameter update; caches from older versions are stale
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ShapeError("an MLP needs at least an input and an output width")
        for name in (self.activation, self.output_activation):
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("parameter list length does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expect}")

    @classmethod
    def init(cls, layer_dims, rng: np.random.Generator, activation="silu",
             output_activation="identity", zero_last=False) -> "Mlp":
        """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        layer_dims = [int(d) for d in layer_dims]
        weights, biases = [], []
        for i, (d_in, d_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
            b = rng.uniform(-bound, bound, size=d_out)
            if zero_last and i == len(layer_dims) - 2:
                w[:] = 0.0
                b[:] = 0.0
            weights.append(w)
            biases.append(b)
        return cls(layer_dims, weights, biases, activation, output_activation)

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order [W0, b0, W1, b1, ...] (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_dims), [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.activation, self.output_activation)

    def forward(self, x):
        return mlp_forward(self, x)

    def __call__(self, x) -> np.ndarray:
        return mlp_forward(self, x)[0]

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "output_activation": self.output_activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        return cls(
            [int(v) for v in d["layer_dims"]],
            [np.array(w, dtype=np.float64).reshape(a, b)
             for w, a, b in zip(d["weights"], d["layer_dims"][:-1], d["layer_dims"][1:])],
            [np.array(b, dtype=np.float64) for b in d["biases"]],
            d["activation"],
            d["output_activation"],
        )


@dataclass
class MlpCache:
    net_id: int
    version: int
    inputs: list  # input to each layer
    pre: list  # pre-activations
    post: list  # activations


def mlp_forward(net: Mlp, x):
    """Forward pass; returns ``(output, cache)`` for :func:`mlp_backward`.

    Accepts a single vector or a (rows, features) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.layer_dims[0]:
        raise ShapeError(f"input last dimension {x.shape[-1]} != first layer width {net.layer_dims[0]}")
    inputs, pre, post = [], [], []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        act = ACTIVATIONS[net.output_activation if i == last else net.activation][0]
        h = act(z)
        pre.append(z)
        post.append(h)
    cache = MlpCache(id(net), net.version, inputs, pre, post)
    return (h[0] if squeeze else h), cache


def mlp_backward(net: Mlp, cache: MlpCache, output_grad, skip_output_activation=False):
    """Reverse-mode gradients of the forward map.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
    :meth:`Mlp.params`. With ``skip_output_activation`` the incoming gradient
    is taken with respect to the last pre-activation (used for BCE on logits).
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise ShapeError("stale or mismatched forward cache")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.post[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {cache.post[-1].shape}")
    last = len(net.weights) - 1
    grads = [None] * (2 * len(net.weights))
    for i in range(last, -1, -1):
        if not (i == last and skip_output_activation):
            name = net.output_activation if i == last else net.activation
            g = g * ACTIVATIONS[name][1](cache.pre[i], cache.post[i])
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
    input_grad = g[0] if np.ndim(output_grad) == 1 else g
    return grads, input_grad


@dataclass
class AdamW:
    """AdamW with bias correction and decoupled weight decay."""

    lr: float = 1e-4
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ShapeError("params and grads differ in length")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape or m.shape != p.shape:
                raise ShapeError(f"parameter shape {p.shape} vs grad shape {g.shape}")
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adamw_step(state: AdamW, net: Mlp, grads) -> None:
    """Apply one optimizer step to ``net`` in place and invalidate old caches."""
    state.step(net.params(), grads)
    net.version += 1


def timestep_embedding(t, dim: int, max_steps: int) -> np.ndarray:
    """Sinusoidal embedding laid out [sin w0 t, cos w0 t, sin w1 t, cos w1 t, ...].

    Frequencies are w_i = 10000^(-2i/dim). ``t`` may be an int or an int array,
    giving shape (dim,) or (len(t), dim).
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > max_steps):
        raise ValueError(f"step {t} outside [0, {max_steps}]")
    freqs = 10000.0 ** (-np.arange(dim // 2, dtype=np.float64) * 2.0 / dim)
    ang = t_arr[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def all_finite(arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)
