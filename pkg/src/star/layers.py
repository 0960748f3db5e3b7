"""Parameter containers and optimizers for the adapter's small networks.

Every trainable module exposes ``parameters() -> dict[str, Tensor]`` with
stable, deterministic key order; checkpointing and the optimizers rely on it.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, tanh


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def gaussian(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear:
    """Affine map on the last axis: y = x @ W + b, W of shape (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 w_std: float | None = None, zero_weight: bool = False,
                 bias_init: float | np.ndarray = 0.0):
        std = w_std if w_std is not None else 1.0 / np.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero_weight else gaussian(rng, (d_in, d_out), std)
        self.W = parameter(w)
        self.b = parameter(np.broadcast_to(np.asarray(bias_init, dtype=np.float64), (d_out,)).copy())

    def __call__(self, x: Tensor) -> Tensor:
        # collapse leading axes so every application is one 2-D GEMM
        if x.ndim == 2:
            return x @ self.W + self.b
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1])
        return (flat @ self.W + self.b).reshape(*lead, self.W.shape[1])

    def parameters(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


class MLP:
    """Perceptron stack with tanh between layers (smooth, so finite-difference
    gradient checks are well behaved)."""

    def __init__(self, dims: list[int], rng: np.random.Generator,
                 zero_last: bool = False, last_bias: float | np.ndarray = 0.0):
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            self.layers.append(Linear(a, b, rng,
                                      zero_weight=zero_last and last,
                                      bias_init=last_bias if last else 0.0))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tanh(x)
        return x

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"layer{i}.{k}"] = v
        return out


class SGD:
    """Plain stochastic gradient descent with a fixed learning rate."""

    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction; deterministic given the update sequence."""

    def __init__(self, params: list[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            m_hat = self.m[i] / (1 - self.b1 ** self.t)
            v_hat = self.v[i] / (1 - self.b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(name: str, params: list[Tensor], lr: float):
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r} (expected 'sgd' or 'adam')")


def prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in params.items()}
