"""Feedforward networks with explicit parameters, manual backprop and Adam.

The backbone used everywhere is an MLP with ReLU hidden layers and a linear
output layer (default three hidden layers of 200 units).  Parameters live in
plain float64 arrays so gradients, optimizer state and checkpoints stay
transparent; the ReLU subgradient at 0 is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_HIDDEN = (200, 200, 200)


class Mlp:
    """ReLU MLP; weights[l] has shape (fan_out, fan_in).

    Weights and biases start uniform with the fan-in bound 1/sqrt(fan_in);
    `out_scale` shrinks the final layer, which keeps the initial output near
    zero (useful when the network is a correction on a nominal signal).
    """

    def __init__(self, n_in: int, n_out: int, hidden: tuple[int, ...] = DEFAULT_HIDDEN,
                 rng: np.random.Generator | None = None, out_scale: float = 1.0):
        self.widths = (n_in,) + tuple(hidden) + (n_out,)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng or np.random.default_rng(0)
        last = len(self.widths) - 2
        for l, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            if l == last:
                bound *= out_scale
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Batched forward pass: x is (S, n_in).  Returns (y, tape).

        The tape holds the post-activation of every layer input, which is
        exactly what the backward pass needs.
        """
        acts = [np.asarray(x, dtype=float)]
        h = acts[0]
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if l == last else np.maximum(z, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, tape: list[np.ndarray], upstream: np.ndarray,
                 need_input_grad: bool = False):
        """Exact reverse-mode gradients for a batched upstream (S, n_out).

        Returns (weight_grads, bias_grads, input_grad_or_None); gradients are
        summed over the batch.
        """
        gw = [None] * self.n_layers
        gb = [None] * self.n_layers
        delta = np.asarray(upstream, dtype=float)
        for l in range(self.n_layers - 1, -1, -1):
            h_in = tape[l]
            gw[l] = delta.T @ h_in
            gb[l] = delta.sum(axis=0)
            if l > 0:
                delta = (delta @ self.weights[l]) * (tape[l] > 0.0)
            elif need_input_grad:
                delta = delta @ self.weights[0]
        return gw, gb, (delta if need_input_grad else None)

    def forward_single(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        y, tape = self.forward(np.asarray(x, dtype=float)[None, :])
        return y[0], tape


@dataclass
class AdamState:
    """Adam optimizer state for one list of parameter arrays."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-4) -> "AdamState":
        return cls(lr=lr,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One in-place Adam update with bias correction."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, nets: dict[str, Mlp], tag: str | None = None) -> None:
    """Flat binary checkpoint of layer widths and parameters."""
    payload = {"version": np.asarray([CHECKPOINT_VERSION])}
    if tag is not None:
        payload["tag"] = np.asarray(tag)
    for name, net in nets.items():
        payload[f"{name}_widths"] = np.asarray(net.widths)
        for l in range(net.n_layers):
            payload[f"{name}_w{l}"] = net.weights[l]
            payload[f"{name}_b{l}"] = net.biases[l]
    np.savez(path, **payload)


def load_checkpoint(path) -> dict[str, Mlp]:
    with np.load(path) as data:
        version = int(data["version"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        nets: dict[str, Mlp] = {}
        names = {k.rsplit("_widths", 1)[0] for k in data.files if k.endswith("_widths")}
        for name in sorted(names):
            widths = tuple(int(w) for w in data[f"{name}_widths"])
            net = Mlp(widths[0], widths[-1], hidden=widths[1:-1])
            for l in range(net.n_layers):
                net.weights[l] = data[f"{name}_w{l}"].astype(float)
                net.biases[l] = data[f"{name}_b{l}"].astype(float)
            nets[name] = net
    return nets
