"""Small dense networks with hand-written reverse-mode gradients."""

from __future__ import annotations

import numpy as np


class Mlp:
    """Fully connected tanh network over a flat parameter vector.

    ``out_box`` (a pair of arrays) squashes the output into the box with a
    scaled tanh; otherwise the output layer is linear. ``in_scale`` divides
    the inputs before the first layer and is not trained.
    """

    def __init__(self, widths, seed: int = 0, out_box=None, in_scale=None, params=None):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        self.seed = int(seed)
        self.out_box = None
        if out_box is not None:
            lo, hi = (np.asarray(b, dtype=np.float64).ravel() for b in out_box)
            self.out_box = (lo, hi)
        self.in_scale = (np.ones(self.widths[0]) if in_scale is None
                         else np.asarray(in_scale, dtype=np.float64).ravel())
        self._shapes = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            self._shapes.append(((fan_in, fan_out), (fan_out,)))
        self.n_params = sum(a * b + b for (a, b), _ in self._shapes)
        if params is None:
            params = self._init(np.random.default_rng(self.seed))
        self.params = np.array(params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.shape}")

    def _init(self, rng) -> np.ndarray:
        chunks = []
        for (fan_in, fan_out), _ in self._shapes:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def layers(self, params=None):
        p = self.params if params is None else params
        out, k = [], 0
        for (fan_in, fan_out), _ in self._shapes:
            W = p[k:k + fan_in * fan_out].reshape(fan_in, fan_out)
            k += fan_in * fan_out
            b = p[k:k + fan_out]
            k += fan_out
            out.append((W, b))
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.widths, self.seed, self.out_box, self.in_scale, self.params.copy())

    def architecture(self) -> dict:
        return {
            "widths": self.widths,
            "activation": "tanh",
            "output": "box_tanh" if self.out_box is not None else "linear",
            "out_box": None if self.out_box is None else [self.out_box[0].tolist(), self.out_box[1].tolist()],
            "in_scale": self.in_scale.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_architecture(cls, arch: dict, params) -> "Mlp":
        return cls(arch["widths"], arch.get("seed", 0), arch.get("out_box"), arch.get("in_scale"), params)

    # -- evaluation ---------------------------------------------------------

    def forward(self, X, params=None, keep=False):
        X = np.asarray(X, dtype=np.float64)
        a = X / self.in_scale
        cache = [a]
        layers = self.layers(params)
        for i, (W, b) in enumerate(layers):
            z = a @ W + b
            if i < len(layers) - 1:
                a = np.tanh(z)
            else:
                a = z
            cache.append(a)
        out = a
        if self.out_box is not None:
            lo, hi = self.out_box
            t = np.tanh(out)
            cache.append(t)
            out = lo + 0.5 * (hi - lo) * (t + 1.0)
        return (out, cache) if keep else out

    __call__ = forward

    def backward(self, cache, d_out, params=None):
        """Gradients of ``sum(d_out * output)`` w.r.t. parameters and inputs."""
        layers = self.layers(params)
        g = np.asarray(d_out, dtype=np.float64)
        if self.out_box is not None:
            lo, hi = self.out_box
            t = cache[-1]
            g = g * 0.5 * (hi - lo) * (1.0 - t * t)
            acts = cache[:-1]
        else:
            acts = cache
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            a_in = acts[i]
            grads.append((a_in.T @ g, g.sum(axis=0)))
            g = g @ W.T
            if i > 0:
                g = g * (1.0 - acts[i] ** 2)
        flat = []
        for dW, db in reversed(grads):
            flat.append(dW.ravel())
            flat.append(db)
        return np.concatenate(flat), g / self.in_scale


class RMSProp:
    """Momentum-free adaptive step: ``p -= lr * g / (sqrt(E[g^2]) + eps)``."""

    def __init__(self, n: int, lr: float, decay: float = 0.99, eps: float = 1e-8):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.sq = np.zeros(n)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.sq *= self.decay
        self.sq += (1.0 - self.decay) * grad * grad
        if self.lr:
            params -= self.lr * grad / (np.sqrt(self.sq) + self.eps)
