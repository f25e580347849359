"""Small feed-forward network with concrete dropout, written against numpy.

The network is the reward predictor of the bandit agent (one output per
action) and the trunk of the supervised classifier (one logit output).
Dropout is applied to the input of every layer after the first, using the
concrete relaxation so that the drop probability itself is learnable.

Parameters are treated as values: :func:`sgd_step` returns a new
:class:`NetworkParameters` and leaves its input untouched, which lets a
:class:`ForwardTape` detect that it was recorded against stale weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .errors import ContractError, ShapeError, TrainingError, ValidationError

CHECKPOINT_FORMAT = "adaptive_endpointing.network"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "identity")

# keeps uniform draws away from {0, 1} so logit(u) stays finite
_U_EPS = 1e-7
# float64 saturates sigmoid at low temperature; clamp so masks stay in the open interval
_MASK_LO = np.finfo(np.float64).tiny
_MASK_HI = np.nextafter(1.0, 0.0)


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} do not form a layer"
            )

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class NetworkParameters:
    """Weights, biases and dropout logits of the network.

    ``dropout_logits[i]`` is the logit of the drop probability applied to
    the input of ``layers[i + 1]``.
    """

    layers: list
    dropout_logits: np.ndarray
    l2_scale: float = 1e-6
    dropout_reg_scale: float = 1e-5
    temperature: float = 0.1
    seed: Optional[int] = None

    def __post_init__(self):
        self.dropout_logits = np.asarray(self.dropout_logits, dtype=np.float64).reshape(-1)
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ShapeError(f"layer fan_out {prev.fan_out} != next fan_in {nxt.fan_in}")
        if self.dropout_logits.shape != (len(self.layers) - 1,):
            raise ShapeError(
                f"expected {len(self.layers) - 1} dropout logits, got {self.dropout_logits.shape}"
            )
        if self.l2_scale < 0 or self.dropout_reg_scale < 0:
            raise ValidationError("regularization scales must be nonnegative")
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")

    @property
    def n_inputs(self) -> int:
        return self.layers[0].fan_in

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].fan_out

    @property
    def dropout_probabilities(self) -> np.ndarray:
        return sigmoid(self.dropout_logits)

    def parameter_count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers) + self.dropout_logits.size

    def copy(self) -> "NetworkParameters":
        return NetworkParameters(
            layers=[DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers],
            dropout_logits=self.dropout_logits.copy(),
            l2_scale=self.l2_scale,
            dropout_reg_scale=self.dropout_reg_scale,
            temperature=self.temperature,
            seed=self.seed,
        )


@dataclass
class ParameterGradients:
    weights: list
    biases: list
    dropout_logits: np.ndarray

    def max_abs(self) -> float:
        parts = [np.abs(g).max(initial=0.0) for g in self.weights + self.biases]
        parts.append(np.abs(self.dropout_logits).max(initial=0.0))
        return float(max(parts))


@dataclass
class ForwardTape:
    """Everything :func:`backward` needs from a forward pass.

    ``inputs[i]`` is the input of layer ``i`` before dropout and
    ``dropped[i]`` the value actually multiplied into the weights.
    """

    params: NetworkParameters
    mode: str
    inputs: list = field(default_factory=list)
    uniforms: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    dropped: list = field(default_factory=list)
    preactivations: list = field(default_factory=list)
    activations: list = field(default_factory=list)

    def __len__(self):
        return len(self.preactivations)


def init_network(
    n_inputs: int,
    n_outputs: int,
    hidden: Sequence[int] = (64, 64),
    *,
    rng: Union[np.random.Generator, int, None] = None,
    initial_dropout: float = 0.1,
    l2_scale: float = 1e-6,
    dropout_reg_scale: float = 1e-5,
    temperature: float = 0.1,
) -> NetworkParameters:
    """Glorot-uniform initialized network with relu hidden layers."""
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    if not 0 < initial_dropout < 1:
        raise ValidationError("initial_dropout must lie in (0, 1)")
    sizes = [int(n_inputs), *map(int, hidden), int(n_outputs)]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        act = "identity" if i == len(sizes) - 2 else "relu"
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    logits = np.full(len(layers) - 1, float(logit(initial_dropout)))
    return NetworkParameters(
        layers=layers,
        dropout_logits=logits,
        l2_scale=l2_scale,
        dropout_reg_scale=dropout_reg_scale,
        temperature=temperature,
        seed=None if seed is None else int(seed),
    )


def concrete_mask(p, u, temperature):
    """Keep-mask of the concrete dropout relaxation.

    ``z = 1 - sigmoid((log p - log(1-p) + log u - log(1-u)) / temperature)``.
    Works elementwise on arrays; as ``temperature -> 0`` the mask becomes
    a Bernoulli(1 - p) draw.
    """
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if not np.all((p > 0) & (p < 1)):
        raise ValidationError("dropout probability must lie strictly in (0, 1)")
    if not np.all((u > 0) & (u < 1)):
        raise ValidationError("uniform sample must lie strictly in (0, 1)")
    if not temperature > 0:
        raise ValidationError("temperature must be positive")
    z = _mask_from_logit(logit(p), u, temperature)
    return float(z) if z.ndim == 0 else z


def _mask_from_logit(theta, u, temperature):
    y = (theta + np.log(u) - np.log1p(-u)) / temperature
    # 1 - sigmoid(y) == sigmoid(-y); the latter keeps precision for large y
    return np.clip(expit(-y), _MASK_LO, _MASK_HI)


def forward(
    params: NetworkParameters,
    features,
    mode: str = "deterministic",
    rng: Optional[np.random.Generator] = None,
    noise: Optional[Sequence[np.ndarray]] = None,
):
    """Run the network on a ``batch x d`` matrix.

    In ``sampled`` mode a fresh concrete-dropout mask is drawn for every
    hidden unit of every row, from ``rng`` unless ``noise`` (one uniform
    array per dropout layer) pins it. Returns ``(outputs, tape)``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"features must be a nonempty batch x d matrix, got {x.shape}")
    if x.shape[1] != params.n_inputs:
        raise ShapeError(f"feature dimension {x.shape[1]} != network input {params.n_inputs}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features contain non-finite values")
    if mode not in ("sampled", "deterministic"):
        raise ValidationError(f"unknown forward mode {mode!r}")
    sampled = mode == "sampled"
    if sampled and noise is None and rng is None:
        raise ValidationError("sampled mode needs an rng or explicit noise")

    tape = ForwardTape(params=params, mode=mode)
    h = x
    for i, layer in enumerate(params.layers):
        tape.inputs.append(h)
        if i == 0:
            u = None
            z = None
            h_in = h
        elif sampled:
            if noise is not None:
                u = np.asarray(noise[i - 1], dtype=np.float64)
                if u.shape != h.shape:
                    raise ShapeError(f"dropout noise {u.shape} does not match activations {h.shape}")
            else:
                u = rng.uniform(_U_EPS, 1.0 - _U_EPS, size=h.shape)
            theta = params.dropout_logits[i - 1]
            z = _mask_from_logit(theta, u, params.temperature)
            keep_scale = 1.0 + np.exp(theta)  # 1 / (1 - p)
            h_in = h * z * keep_scale
        else:
            u = None
            z = np.ones_like(h)
            h_in = h
        tape.uniforms.append(u)
        tape.masks.append(z)
        tape.dropped.append(h_in)
        a = h_in @ layer.weights + layer.bias
        tape.preactivations.append(a)
        h = np.maximum(a, 0.0) if layer.activation == "relu" else a
        tape.activations.append(h)
    return h, tape


def backward(params: NetworkParameters, tape: ForwardTape, features, loss_grad) -> ParameterGradients:
    """Gradients of a loss given ``loss_grad = dL/d(outputs)``.

    Dropout noise recorded on the tape is held fixed, so the drop
    probabilities receive gradients through the relaxed masks.
    """
    if tape.params is not params or len(tape) != len(params.layers):
        raise ContractError("tape was recorded against different parameters")
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape != tape.inputs[0].shape or not np.array_equal(x, tape.inputs[0]):
        raise ContractError("tape was recorded for different features")
    g = np.asarray(loss_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :] if tape.activations[-1].shape[0] == 1 else g[:, None]
    if g.shape != tape.activations[-1].shape:
        raise ShapeError(f"loss_grad {g.shape} does not match outputs {tape.activations[-1].shape}")

    n = len(params.layers)
    grad_w = [None] * n
    grad_b = [None] * n
    grad_theta = np.zeros_like(params.dropout_logits)
    for i in range(n - 1, -1, -1):
        layer = params.layers[i]
        if layer.activation == "relu":
            g = g * (tape.preactivations[i] > 0)
        grad_w[i] = tape.dropped[i].T @ g
        grad_b[i] = g.sum(axis=0)
        if i == 0:
            break
        g_in = g @ layer.weights.T
        if tape.mode == "sampled":
            theta = params.dropout_logits[i - 1]
            z = tape.masks[i]
            keep_scale = 1.0 + np.exp(theta)
            # z = sigmoid(-y), y = (theta + logit u) / t  =>  dz/dtheta = -z (1 - z) / t
            dz = -z * (1.0 - z) / params.temperature
            # d keep_scale / d theta = p / (1 - p) = exp(theta)
            d_in = tape.inputs[i] * (dz * keep_scale + z * np.exp(theta))
            grad_theta[i - 1] = np.sum(g_in * d_in)
            g = g_in * z * keep_scale
        else:
            g = g_in
    return ParameterGradients(grad_w, grad_b, grad_theta)


def regularization_penalty(params: NetworkParameters) -> float:
    """Weight decay plus the negative-entropy penalty on drop probabilities."""
    total = params.l2_scale * sum(float(np.sum(l.weights ** 2)) for l in params.layers)
    p = params.dropout_probabilities
    fan_in = np.array([l.fan_in for l in params.layers[1:]], dtype=np.float64)
    neg_entropy = p * np.log(p) + (1 - p) * np.log1p(-p)
    return total + params.dropout_reg_scale * float(np.sum(fan_in * neg_entropy))


def regularization_gradients(params: NetworkParameters) -> ParameterGradients:
    theta = params.dropout_logits
    p = sigmoid(theta)
    fan_in = np.array([l.fan_in for l in params.layers[1:]], dtype=np.float64)
    return ParameterGradients(
        weights=[2.0 * params.l2_scale * l.weights for l in params.layers],
        biases=[np.zeros_like(l.bias) for l in params.layers],
        # d/dtheta [p log p + (1-p) log(1-p)] = theta * p (1 - p)
        dropout_logits=params.dropout_reg_scale * fan_in * theta * p * (1 - p),
    )


def sgd_step(
    params: NetworkParameters,
    grads: ParameterGradients,
    learning_rate: float,
    *,
    train_dropout: bool = True,
) -> NetworkParameters:
    """One plain SGD step including regularization; returns new parameters."""
    if not learning_rate >= 0:
        raise ValidationError("learning_rate must be nonnegative")
    if len(grads.weights) != len(params.layers) or len(grads.biases) != len(params.layers):
        raise ShapeError("gradient layer count does not match parameters")
    if not np.isfinite(grads.max_abs()):
        bad = [i for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases))
               if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb)))]
        raise TrainingError(
            f"non-finite gradient (layers {bad}, dropout logits {grads.dropout_logits.tolist()})"
        )
    reg = regularization_gradients(params)
    layers = []
    for layer, gw, gb, rw in zip(params.layers, grads.weights, grads.biases, reg.weights):
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise ShapeError("gradient shape does not match parameter shape")
        layers.append(DenseLayer(
            layer.weights - learning_rate * (gw + rw),
            layer.bias - learning_rate * gb,
            layer.activation,
        ))
    logits = params.dropout_logits
    if train_dropout:
        logits = logits - learning_rate * (grads.dropout_logits + reg.dropout_logits)
    return NetworkParameters(
        layers=layers,
        dropout_logits=logits,
        l2_scale=params.l2_scale,
        dropout_reg_scale=params.dropout_reg_scale,
        temperature=params.temperature,
        seed=params.seed,
    )


def to_dict(params: NetworkParameters) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": params.seed,
        "l2_scale": params.l2_scale,
        "dropout_reg_scale": params.dropout_reg_scale,
        "temperature": params.temperature,
        "dropout_logits": params.dropout_logits.tolist(),
        "layers": [
            {
                "fan_in": l.fan_in,
                "fan_out": l.fan_out,
                "activation": l.activation,
                "weights": l.weights.tolist(),
                "bias": l.bias.tolist(),
            }
            for l in params.layers
        ],
    }


def from_dict(payload: dict) -> NetworkParameters:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"not a network checkpoint (format={payload.get('format')!r})")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('version')!r}")
    layers = []
    for spec in payload["layers"]:
        w = np.array(spec["weights"], dtype=np.float64).reshape(spec["fan_in"], spec["fan_out"])
        layers.append(DenseLayer(w, np.array(spec["bias"], dtype=np.float64), spec["activation"]))
    return NetworkParameters(
        layers=layers,
        dropout_logits=np.array(payload["dropout_logits"], dtype=np.float64),
        l2_scale=payload["l2_scale"],
        dropout_reg_scale=payload["dropout_reg_scale"],
        temperature=payload["temperature"],
        seed=payload.get("seed"),
    )


def serialize(params: NetworkParameters) -> str:
    return json.dumps(to_dict(params))


def deserialize(text: str) -> NetworkParameters:
    return from_dict(json.loads(text))


def save_checkpoint(params: NetworkParameters, path) -> None:
    Path(path).write_text(serialize(params))


def load_checkpoint(path) -> NetworkParameters:
    return deserialize(Path(path).read_text())
