"""Dense layers with exact reverse-mode gradients, MSE loss and an Adam optimizer.

Everything runs in float64 on row-major batches: an input of shape ``(n, in)``
maps to ``(n, out)``; a bare vector is treated as a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingDivergence(FloatingPointError):
    """Non-finite loss, gradient or parameter during training."""


@dataclass
class DenseLayer:
    """Affine map ``x @ weights.T + bias``, optionally followed by ReLU.

    ``weights`` (out x in) and ``bias`` may be views into a larger flat
    parameter buffer; layers never reallocate them.
    """

    weights: np.ndarray
    bias: np.ndarray
    relu: bool = False

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]


@dataclass
class Tape:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def glorot_uniform(layer: DenseLayer, rng: np.random.Generator) -> None:
    limit = np.sqrt(6.0 / (layer.fan_in + layer.fan_out))
    layer.weights[...] = rng.uniform(-limit, limit, size=layer.weights.shape)
    layer.bias[...] = 0.0


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def forward(layers: list[DenseLayer], x: np.ndarray) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    tape = Tape(squeeze=x.ndim == 1)
    h = x[None, :] if x.ndim == 1 else x
    for i, layer in enumerate(layers):
        if h.shape[1] != layer.fan_in:
            raise ValueError(f"layer {i} expects {layer.fan_in} inputs, got {h.shape[1]}")
        tape.inputs.append(h)
        z = h @ layer.weights.T + layer.bias
        tape.pre_activations.append(z)
        h = relu(z) if layer.relu else z
    return (h[0] if tape.squeeze else h), tape


def backward(
    layers: list[DenseLayer], tape: Tape, upstream: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Gradients ``[(d_weights, d_bias), ...]`` per layer and the input gradient."""
    if len(tape.inputs) != len(layers):
        raise ValueError("tape does not match the layer stack")
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != tape.pre_activations[-1].shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {tape.pre_activations[-1].shape}")
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if layer.relu:
            g = g * (tape.pre_activations[i] > 0)
        grads[i] = (g.T @ tape.inputs[i], g.sum(axis=0))
        g = g @ layer.weights
    return grads, (g[0] if tape.squeeze else g)


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class OptimizerState:
    """Adam moments for one flat parameter vector."""

    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def sgd_adam_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and optimizer shapes differ")
    if not np.all(np.isfinite(grads)):
        bad = int(np.count_nonzero(~np.isfinite(grads)))
        raise TrainingDivergence(f"{bad} non-finite gradient entries at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
