"""Minimal feedforward network with reverse-mode gradients and Adam.

Everything is plain float64 numpy. The network is a stack of affine layers
with ReLU or Tanh after every layer except the last; that is all the
embedding map needs at desk scale, so there is no general autodiff graph,
just a forward tape and a hand-rolled backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, OptimizerError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of the embedding network.

    ``layer_widths`` ends in the latent dimension; ``activation`` is applied
    after every layer except the last. The spec plus ``seed`` fully
    determines the initial parameters.
    """

    input_dim: int
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.input_dim <= 0:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if not self.layer_widths:
            raise ConfigError("layer_widths must be non-empty")
        if any(w <= 0 for w in self.layer_widths):
            raise ConfigError(f"zero or negative layer width in {self.layer_widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")

    @property
    def latent_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths)

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) per layer."""
        fan_in = [self.input_dim, *self.layer_widths[:-1]]
        return [(out, inp) for out, inp in zip(self.layer_widths, fan_in)]


@dataclass
class NetworkParams:
    """Per-layer weight matrices (out x in) and bias vectors (out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class ForwardTape:
    """Activation record from one forward call, consumed by backward."""

    spec: NetworkSpec
    inputs: list[np.ndarray]   # input to each layer, (n, fan_in)
    preacts: list[np.ndarray]  # pre-activation of each layer, (n, fan_out)


@dataclass
class GradientBundle:
    """Gradients for the full trainable parameter set.

    The network part mirrors NetworkParams; ``means`` and ``log_var`` carry
    the distribution-parameter gradients and stay None until the training
    loop fills them in.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    means: np.ndarray | None = None
    log_var: np.ndarray | None = None


def init_params(spec: NetworkSpec) -> NetworkParams:
    """Seeded Glorot-uniform weights (+/- sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    for out, inp in spec.layer_shapes():
        bound = math.sqrt(6.0 / (inp + out))
        weights.append(rng.uniform(-bound, bound, size=(out, inp)))
        biases.append(np.zeros(out))
    return NetworkParams(weights, biases)


def _check_params(spec: NetworkSpec, params: NetworkParams) -> None:
    shapes = spec.layer_shapes()
    if len(params.weights) != len(shapes) or len(params.biases) != len(shapes):
        raise DimensionError(
            f"params have {len(params.weights)} layers, spec expects {len(shapes)}"
        )
    for i, (out, inp) in enumerate(shapes):
        if params.weights[i].shape != (out, inp):
            raise DimensionError(
                f"layer {i} weight shape {params.weights[i].shape}, expected {(out, inp)}"
            )
        if params.biases[i].shape != (out,):
            raise DimensionError(
                f"layer {i} bias shape {params.biases[i].shape}, expected {(out,)}"
            )


def _activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    return np.tanh(x)


def _activate_grad(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)
    t = np.tanh(pre)
    return 1.0 - t * t


def forward(
    spec: NetworkSpec, params: NetworkParams, batch: np.ndarray
) -> tuple[np.ndarray, ForwardTape]:
    """Map a batch (n x input_dim) to embeddings (n x latent_dim).

    Returns the embeddings and the tape needed by :func:`backward`.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[1] != spec.input_dim:
        raise DimensionError(
            f"batch has {batch.shape[1]} columns, spec.input_dim is {spec.input_dim}"
        )
    _check_params(spec, params)

    inputs, preacts = [], []
    x = batch
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        inputs.append(x)
        pre = x @ params.weights[i].T + params.biases[i]
        preacts.append(pre)
        x = pre if i == last else _activate(pre, spec.activation)
    return x, ForwardTape(spec, inputs, preacts)


def backward(tape: ForwardTape, params: NetworkParams, upstream: np.ndarray) -> GradientBundle:
    """Back-propagate ``upstream`` (n x latent_dim) through the taped pass.

    Returns d(sum(upstream * embeddings))/d(params); the network part of a
    GradientBundle.
    """
    spec = tape.spec
    _check_params(spec, params)
    if len(tape.inputs) != spec.n_layers or len(tape.preacts) != spec.n_layers:
        raise ContractError("tape does not match the network spec")
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    n = tape.inputs[0].shape[0]
    if upstream.shape != (n, spec.latent_dim):
        raise ContractError(
            f"upstream shape {upstream.shape} does not match tape batch ({n}, {spec.latent_dim})"
        )

    d_weights = [np.empty(0)] * spec.n_layers
    d_biases = [np.empty(0)] * spec.n_layers
    delta = upstream
    for i in reversed(range(spec.n_layers)):
        if i != spec.n_layers - 1:
            delta = delta * _activate_grad(tape.preacts[i], spec.activation)
        d_weights[i] = delta.T @ tape.inputs[i]
        d_biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params.weights[i]
    return GradientBundle(d_weights, d_biases)


@dataclass
class AdamState:
    """Adam accumulators for a named collection of parameter blocks."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_blocks(cls, blocks: dict[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {name: np.zeros_like(arr) for name, arr in blocks.items()}
        state.v = {name: np.zeros_like(arr) for name, arr in blocks.items()}
        return state


def adam_step(
    blocks: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update over every named block.

    Mutates ``state`` (t, m, v) and returns fresh parameter arrays.
    """
    if set(blocks) != set(grads) or set(blocks) != set(state.m):
        raise ContractError(
            f"parameter/gradient/state block names disagree: {sorted(blocks)} vs {sorted(grads)}"
        )
    for name, g in grads.items():
        if g.shape != blocks[name].shape:
            raise OptimizerError(f"gradient block {name!r} has shape {g.shape}, parameter has {blocks[name].shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient entry in block {name!r}")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    out = {}
    for name, param in blocks.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        out[name] = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out
