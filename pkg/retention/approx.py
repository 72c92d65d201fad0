"""Small feedforward networks with hand-written gradients, Adam, target copies and Gaussian densities.

Parameters of an Mlp are exposed as one flat list ``[W0, b0, W1, b1, ...]``;
gradients returned by ``backward`` and consumed by ``Adam.step`` use the same
order, so a network and its optimizer never need to agree on names.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from retention.core import DimensionError, NumericalAbort

logger = logging.getLogger("retention.approx")

CHECKPOINT_FORMAT = "retention-checkpoint/1"
LOG_2PI = math.log(2.0 * math.pi)


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    SIGMOID = "sigmoid"
    SCALED_SIGMOID = "scaled_sigmoid"
    SOFTPLUS = "softplus"


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    output: np.ndarray
    single: bool


class Mlp:
    """Rectifier hidden layers and one configurable output activation.

    ``scaled_sigmoid`` maps onto ``[0, output_scale]``; ``softplus`` adds
    ``output_floor`` so the result stays strictly positive.
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        output_activation: Union[Activation, str] = Activation.IDENTITY,
        output_scale: float = 1.0,
        output_floor: float = 0.0,
        rng: Optional[np.random.Generator] = None,
        zero_init: bool = False,
    ):
        if len(layer_dims) < 2 or any(int(d) <= 0 for d in layer_dims):
            raise DimensionError(f"layer_dims needs at least input and output sizes > 0, got {list(layer_dims)}")
        self.layer_dims = [int(d) for d in layer_dims]
        self.output_activation = Activation(output_activation)
        self.output_scale = float(output_scale)
        self.output_floor = float(output_floor)

        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        n_layers = len(self.layer_dims) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            if zero_init:
                W = np.zeros((fan_in, fan_out))
            else:
                # He init for rectifier layers, plain 1/fan_in variance for the output layer
                std = math.sqrt((2.0 if i < n_layers - 1 else 1.0) / fan_in)
                W = rng.normal(0.0, std, size=(fan_in, fan_out))
            self.weights.append(W)
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def _activate_output(self, z: np.ndarray) -> np.ndarray:
        if self.output_activation is Activation.IDENTITY:
            return z
        if self.output_activation is Activation.SIGMOID:
            return sigmoid(z)
        if self.output_activation is Activation.SCALED_SIGMOID:
            return self.output_scale * sigmoid(z)
        return np.logaddexp(0.0, z) + self.output_floor

    def _output_derivative(self, z: np.ndarray) -> np.ndarray:
        if self.output_activation is Activation.IDENTITY:
            return np.ones_like(z)
        if self.output_activation is Activation.SOFTPLUS:
            return sigmoid(z)
        s = sigmoid(z)
        scale = self.output_scale if self.output_activation is Activation.SCALED_SIGMOID else 1.0
        return scale * s * (1.0 - s)

    def forward_cached(self, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise DimensionError(f"expected input of width {self.input_dim}, got shape {x.shape}")

        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ W + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < last else self._activate_output(z)
        out = h[0] if single else h
        return out, ForwardCache(inputs, pre, h, single)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def backward(
        self, x: np.ndarray, upstream: np.ndarray, cache: Optional[ForwardCache] = None
    ) -> Tuple[List[np.ndarray], np.ndarray]:
        """Gradients of ``sum(upstream * forward(x))`` w.r.t. params (flat order) and input."""
        if cache is None:
            _, cache = self.forward_cached(x)
        g = np.asarray(upstream, dtype=np.float64)
        g = g.reshape(1, -1) if cache.single else g
        if g.shape != cache.output.shape:
            raise DimensionError(f"upstream gradient shape {g.shape} does not match output {cache.output.shape}")

        g = g * self._output_derivative(cache.pre_activations[-1])
        grads: List[np.ndarray] = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (cache.pre_activations[i - 1] > 0.0)
        dx = g[0] if cache.single else g
        return grads, dx

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.layer_dims = list(self.layer_dims)
        clone.output_activation = self.output_activation
        clone.output_scale = self.output_scale
        clone.output_floor = self.output_floor
        clone.weights = [W.copy() for W in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def state_dict(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = W.copy()
            out[f"{prefix}.b{i}"] = b.copy()
        return out

    def load_state_dict(self, tensors: Mapping[str, np.ndarray], prefix: str) -> None:
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            for name, target in ((f"{prefix}.W{i}", W), (f"{prefix}.b{i}", b)):
                if name not in tensors:
                    raise DimensionError(f"checkpoint lacks tensor {name}")
                if tensors[name].shape != target.shape:
                    raise DimensionError(f"tensor {name} has shape {tensors[name].shape}, expected {target.shape}")
                target[...] = tensors[name]


class Adam:
    """Bias-corrected adaptive-moment optimizer updating a parameter list in place."""

    def __init__(
        self,
        params: List[np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise DimensionError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if p.shape != np.shape(g):
                raise DimensionError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericalAbort(
                    f"gradient blow-up at optimizer step {self.step_count + 1}: "
                    f"non-finite gradient for parameter of shape {p.shape}"
                )

        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TargetCopy:
    """Slowly tracking shadow of an Mlp."""

    def __init__(self, source: Mlp, tau: float):
        if not 0.0 < tau <= 1.0:
            raise DimensionError(f"tau must lie in (0, 1], got {tau}")
        self.net = source.copy()
        self.tau = float(tau)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x)

    def soft_update(self, source: Mlp) -> None:
        if source.layer_dims != self.net.layer_dims:
            raise DimensionError(f"target shape {self.net.layer_dims} does not match source {source.layer_dims}")
        for t, s in zip(self.net.params, source.params):
            t *= 1.0 - self.tau
            t += self.tau * s


def gaussian_log_density(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> Union[float, np.ndarray]:
    """Diagonal Gaussian log density summed over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError(f"sigma must be positive, got min {sigma.min()}")
    z = (x - mu) / sigma
    log_density = -0.5 * np.square(z) - np.log(sigma) - 0.5 * LOG_2PI
    total = log_density.sum(axis=-1)
    return float(total) if np.ndim(total) == 0 else total


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"__format__": np.array(CHECKPOINT_FORMAT)}
    for name in sorted(tensors):
        payload[name] = np.asarray(tensors[name])
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as archive:
        if "__format__" not in archive.files or str(archive["__format__"]) != CHECKPOINT_FORMAT:
            raise DimensionError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        return {name: archive[name] for name in sorted(archive.files) if name != "__format__"}


def finite_difference_check(
    loss_fn: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    n_coords: int,
    rng: np.random.Generator,
    step: float = 1e-5,
) -> float:
    """Largest relative error between analytic grads and central differences over random coordinates.

    Perturbs ``params`` in place and restores them; ``loss_fn`` must read the
    live parameter arrays.
    """
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in rng.integers(0, offsets[-1], size=n_coords):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[k])
        p = params[k].reshape(-1)
        original = p[idx]
        p[idx] = original + step
        plus = loss_fn()
        p[idx] = original - step
        minus = loss_fn()
        p[idx] = original
        numeric = (plus - minus) / (2.0 * step)
        analytic = float(np.asarray(grads[k]).reshape(-1)[idx])
        scale = max(abs(numeric), abs(analytic), 1e-4)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst
