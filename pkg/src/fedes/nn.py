"""Dense ReLU network over a flat float32 parameter vector.

Layout is part of the wire contract: for each layer in order, the weight
matrix (``fan_in x fan_out``, row-major, so input-major) followed by the bias.
Perturbation index ``i`` must mean the same coordinate on every party.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .detrand import PerturbSeed, standard_normals


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise UsageError(f"need >= 2 positive layer widths, got {self.layer_widths}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def param_count(self) -> int:
        return param_count(self)

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def classes(self) -> int:
        return self.layer_widths[-1]

    def layers(self) -> Iterator[tuple[int, int, int]]:
        """Yield ``(offset, fan_in, fan_out)`` per layer."""
        offset = 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            yield offset, fan_in, fan_out
            offset += fan_in * fan_out + fan_out


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise UsageError(
                f"batch shape mismatch: inputs {self.inputs.shape}, labels {self.labels.shape}"
            )

    def __len__(self) -> int:
        return len(self.labels)


def param_count(spec: MlpSpec) -> int:
    w = spec.layer_widths
    return sum(a * b + b for a, b in zip(w[:-1], w[1:]))


def unpack(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` per layer into ``params``; no copies."""
    if params.shape != (spec.param_count,):
        raise UsageError(f"expected {spec.param_count} parameters, got shape {params.shape}")
    out = []
    for off, fan_in, fan_out in spec.layers():
        nw = fan_in * fan_out
        out.append((params[off:off + nw].reshape(fan_in, fan_out), params[off + nw:off + nw + fan_out]))
    return out


def init_params(spec: MlpSpec, seed: PerturbSeed) -> np.ndarray:
    """He-normal weights, zero biases.

    All weights come from one stream in layout order, so the result depends
    only on ``seed`` and the widths.
    """
    params = np.zeros(spec.param_count, dtype=np.float32)
    cursor = 0
    for off, fan_in, fan_out in spec.layers():
        n = fan_in * fan_out
        z = standard_normals(seed, cursor, n)
        params[off:off + n] = (np.sqrt(2.0 / fan_in) * z).astype(np.float32)
        cursor += n
    return params


def _check_batch(spec: MlpSpec, inputs: np.ndarray) -> None:
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_width:
        raise UsageError(f"input width {inputs.shape[-1]} does not match network input {spec.input_width}")


def _forward(spec, params, inputs, keep=False):
    layers = unpack(spec, params)
    h = inputs.astype(np.float64, copy=False)
    acts = [h]
    for i, (W, b) in enumerate(layers):
        h = h @ W.astype(np.float64) + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        if keep:
            acts.append(h)
    return (h, acts) if keep else h


def logits(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    _check_batch(spec, inputs)
    return _forward(spec, params, inputs)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(z: np.ndarray, labels: np.ndarray) -> float:
    logp = _log_softmax(z)
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss64(spec: MlpSpec, params: np.ndarray, batch: Batch) -> float:
    """Mean cross-entropy in float64, unrounded."""
    _check_batch(spec, batch.inputs)
    if len(batch) == 0:
        raise UsageError("empty batch")
    return cross_entropy(_forward(spec, params, batch.inputs), batch.labels)


def forward_loss(spec: MlpSpec, params: np.ndarray, batch: Batch) -> float:
    return float(np.float32(loss64(spec, params, batch)))


def backward(spec: MlpSpec, params: np.ndarray, batch: Batch) -> np.ndarray:
    """Exact gradient of ``forward_loss`` in the parameter layout."""
    _check_batch(spec, batch.inputs)
    n = len(batch)
    if n == 0:
        raise UsageError("empty batch")
    layers = unpack(spec, params)
    z, acts = _forward(spec, params, batch.inputs, keep=True)
    delta = np.exp(_log_softmax(z))
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grad = np.empty(spec.param_count, dtype=np.float64)
    offsets = list(spec.layers())
    for i in range(len(layers) - 1, -1, -1):
        off, fan_in, fan_out = offsets[i]
        a_in = acts[i]
        nw = fan_in * fan_out
        grad[off:off + nw] = (a_in.T @ delta).ravel()
        grad[off + nw:off + nw + fan_out] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0].astype(np.float64).T) * (a_in > 0)
    return grad.astype(np.float32)


def accuracy(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray, labels: np.ndarray,
             chunk: int = 4096) -> float:
    """Fraction of argmax hits; ``argmax`` breaks ties toward the lowest class."""
    if len(labels) == 0:
        raise UsageError("accuracy of an empty dataset is undefined")
    _check_batch(spec, inputs)
    hits = 0
    for lo in range(0, len(labels), chunk):
        z = _forward(spec, params, inputs[lo:lo + chunk])
        hits += int((z.argmax(axis=1) == labels[lo:lo + chunk]).sum())
    return hits / len(labels)


def mean_loss(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray, labels: np.ndarray,
              chunk: int = 4096) -> float:
    """Sample-weighted cross-entropy over a whole dataset, chunked."""
    total = 0.0
    for lo in range(0, len(labels), chunk):
        z = _forward(spec, params, inputs[lo:lo + chunk])
        total += cross_entropy(z, labels[lo:lo + chunk]) * len(z)
    return total / len(labels)


def mlp_objective(spec: MlpSpec):
    """Float64 loss callable ``f(params, batch)`` for the ES estimators."""
    def f(params: np.ndarray, batch: Batch) -> float:
        return loss64(spec, params, batch)
    f.spec = spec
    return f

