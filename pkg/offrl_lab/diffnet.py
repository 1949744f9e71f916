"""Dense network core: forward passes, parameter and input gradients, and the exact
parameter gradient of the one-sided action-gradient penalty.

Everything here works on row-major batches (`B x input_dim`) and returns new objects
instead of mutating parameters, so a training loop owns exactly one live copy.
"""
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from offrl_lab.exceptions import ContractError, NumericalError, ShapeError


class Activation(str, Enum):
    """Elementwise non-linearities supported by the core"""

    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


class Rng:
    """Seeded, splittable random stream

    A child stream depends only on the root seed and the names used to reach it, never
    on how much of the parent stream has already been consumed.
    """

    def __init__(self, seed: int, path: Tuple[int, ...] = ()) -> None:
        """Create a stream from a 64-bit seed

        Parameters
        ----------
        seed : int
            root seed, reduced modulo 2**64
        path : Tuple[int, ...], optional
            spawn key of this stream below the root, by default ()
        """
        self.seed = int(seed) % (2**64)
        self.path = tuple(path)
        self._generator: Optional[np.random.Generator] = None

    @staticmethod
    def _key(name: Union[int, str]) -> int:
        if isinstance(name, int):
            return name
        return zlib.crc32(name.encode("utf-8"))

    def child(self, *names: Union[int, str]) -> "Rng":
        """Derive an independent stream named by `names`"""
        return Rng(self.seed, self.path + tuple(self._key(n) for n in names))

    @property
    def generator(self) -> np.random.Generator:
        """Lazily created numpy generator for this stream"""
        if self._generator is None:
            sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
            self._generator = np.random.default_rng(sequence)
        return self._generator

    def integer_seed(self) -> int:
        """A plain integer seed derived from this stream (for APIs taking ints)"""
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return int(sequence.generate_state(1, dtype=np.uint32)[0])

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a dense network"""

    input_dim: int
    hidden_dims: Tuple[int, ...]
    output_dim: int
    hidden_activation: Activation = Activation.RELU
    output_activation: Activation = Activation.IDENTITY

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "hidden_activation", Activation(self.hidden_activation))
        object.__setattr__(self, "output_activation", Activation(self.output_activation))
        if len(self.hidden_dims) == 0:
            raise ShapeError("an MlpSpec needs at least one hidden layer")
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise ShapeError(f"all layer widths must be >= 1, got {self.layer_dims}")
        if self.hidden_activation not in (Activation.RELU, Activation.TANH):
            raise ContractError(f"unsupported hidden activation {self.hidden_activation}")
        if self.output_activation not in (Activation.IDENTITY, Activation.TANH):
            raise ContractError(f"unsupported output activation {self.output_activation}")

    @property
    def layer_dims(self) -> Tuple[int, ...]:
        """Widths from input to output"""
        return (self.input_dim,) + self.hidden_dims + (self.output_dim,)

    @property
    def num_layers(self) -> int:
        """Number of affine layers"""
        return len(self.hidden_dims) + 1

    def activation(self, layer: int) -> Activation:
        """Activation applied after affine layer `layer` (0-based)"""
        if layer == self.num_layers - 1:
            return self.output_activation
        return self.hidden_activation

    def to_dict(self) -> dict:
        """Plain representation used in checkpoints"""
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "hidden_activation": self.hidden_activation.value,
            "output_activation": self.output_activation.value,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MlpSpec":
        """Inverse of `to_dict`"""
        return cls(
            input_dim=raw["input_dim"],
            hidden_dims=tuple(raw["hidden_dims"]),
            output_dim=raw["output_dim"],
            hidden_activation=Activation(raw["hidden_activation"]),
            output_activation=Activation(raw["output_activation"]),
        )


@dataclass
class ParamGrads:
    """Gradients shaped like the weights and biases of an MlpParams"""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, params: "MlpParams") -> "ParamGrads":
        """All-zero gradients congruent with `params`"""
        return cls(
            weights=[np.zeros_like(w) for w in params.weights],
            biases=[np.zeros_like(b) for b in params.biases],
        )

    def __add__(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(
            weights=[a + b for a, b in zip(self.weights, other.weights)],
            biases=[a + b for a, b in zip(self.biases, other.biases)],
        )

    def scale(self, factor: float) -> "ParamGrads":
        """Multiply every entry by `factor`"""
        return ParamGrads(
            weights=[factor * w for w in self.weights],
            biases=[factor * b for b in self.biases],
        )

    def all_finite(self) -> bool:
        """True when no entry is nan or inf"""
        return all(np.isfinite(w).all() for w in self.weights) and all(
            np.isfinite(b).all() for b in self.biases
        )

    def is_zero(self) -> bool:
        """True when every entry is exactly zero"""
        return all(not w.any() for w in self.weights) and all(
            not b.any() for b in self.biases
        )

    def global_norm(self) -> float:
        """Euclidean norm over all entries"""
        total = sum(float(np.sum(w * w)) for w in self.weights)
        total += sum(float(np.sum(b * b)) for b in self.biases)
        return float(np.sqrt(total))


@dataclass
class MlpParams:
    """Weights (`out x in`) and biases (`out`) of every affine layer"""

    spec: MlpSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self) -> None:
        dims = self.spec.layer_dims
        if len(self.weights) != self.spec.num_layers or len(self.biases) != self.spec.num_layers:
            raise ShapeError("number of layers does not match the spec")
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[layer + 1], dims[layer]) or b.shape != (dims[layer + 1],):
                raise ShapeError(
                    f"layer {layer}: got weight {w.shape} and bias {b.shape}, "
                    f"expected ({dims[layer + 1]}, {dims[layer]}) and ({dims[layer + 1]},)"
                )

    def copy(self) -> "MlpParams":
        """Deep copy"""
        return MlpParams(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def all_finite(self) -> bool:
        """True when no entry is nan or inf"""
        return ParamGrads(self.weights, self.biases).all_finite()

    def equals(self, other: "MlpParams") -> bool:
        """Bitwise equality of spec and every entry"""
        return (
            self.spec == other.spec
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


@dataclass
class OptimState:
    """Adaptive-moment optimizer state for one network"""

    first_moment: ParamGrads
    second_moment: ParamGrads
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(
        cls,
        params: MlpParams,
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "OptimState":
        """Fresh optimizer state for `params`"""
        return cls(
            first_moment=ParamGrads.zeros_like(params),
            second_moment=ParamGrads.zeros_like(params),
            step=0,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


@dataclass
class Tape:
    """Intermediates of one forward pass

    `activations[0]` is the input batch and `activations[l + 1]` the output of layer `l`.
    """

    params: MlpParams
    pre_activations: List[np.ndarray] = field(default_factory=list)
    activations: List[np.ndarray] = field(default_factory=list)


def _apply(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def _first_derivative(kind: Activation, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0.0).astype(z.dtype)
    if kind is Activation.TANH:
        return 1.0 - h * h
    return np.ones_like(z)


def _second_derivative(kind: Activation, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return -2.0 * h * (1.0 - h * h)
    # relu is piecewise linear, identity is linear
    return np.zeros_like(z)


def mlp_init(spec: MlpSpec, rng: Rng) -> MlpParams:
    """Initialize a network: weights uniform in +-1/sqrt(fan_in), biases zero

    Parameters
    ----------
    spec : MlpSpec
        architecture
    rng : Rng
        stream the weights are drawn from

    Returns
    -------
    MlpParams
        fresh parameters
    """
    gen = rng.generator
    dims = spec.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(gen.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec=spec, weights=weights, biases=biases)


def forward(params: MlpParams, batch: np.ndarray) -> Tuple[np.ndarray, Tape]:
    """Evaluate the network on a batch of rows

    Parameters
    ----------
    params : MlpParams
        network parameters
    batch : np.ndarray
        inputs, `B x input_dim`

    Returns
    -------
    Tuple[np.ndarray, Tape]
        outputs (`B x output_dim`) and the tape needed by the backward passes

    Raises
    ------
    ShapeError
        if the batch is not 2-D with `input_dim` columns
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.spec.input_dim:
        raise ShapeError(
            f"expected a batch of shape (B, {params.spec.input_dim}), got {batch.shape}"
        )
    tape = Tape(params=params, activations=[batch])
    h = batch
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        h = _apply(params.spec.activation(layer), z)
        tape.pre_activations.append(z)
        tape.activations.append(h)
    return h, tape


def _check_tape(params: MlpParams, tape: Tape) -> None:
    if tape.params is not params:
        raise ContractError("tape was recorded with different parameters")


def _backward(
    params: MlpParams, tape: Tape, output_grads: np.ndarray
) -> Tuple[ParamGrads, np.ndarray]:
    _check_tape(params, tape)
    output_grads = np.asarray(output_grads, dtype=np.float64)
    expected = tape.activations[-1].shape
    if output_grads.shape != expected:
        raise ShapeError(f"output grads {output_grads.shape} do not match outputs {expected}")

    spec = params.spec
    d_weights: List[np.ndarray] = [None] * spec.num_layers  # type: ignore[list-item]
    d_biases: List[np.ndarray] = [None] * spec.num_layers  # type: ignore[list-item]
    upstream = output_grads
    for layer in reversed(range(spec.num_layers)):
        z = tape.pre_activations[layer]
        h = tape.activations[layer + 1]
        delta = upstream * _first_derivative(spec.activation(layer), z, h)
        d_weights[layer] = delta.T @ tape.activations[layer]
        d_biases[layer] = delta.sum(axis=0)
        upstream = delta @ params.weights[layer]
    return ParamGrads(weights=d_weights, biases=d_biases), upstream


def backward_params(params: MlpParams, tape: Tape, output_grads: np.ndarray) -> ParamGrads:
    """Gradient of `sum(outputs * output_grads)` with respect to the parameters

    Averaging over the batch is left to the caller (fold it into `output_grads`).

    Parameters
    ----------
    params : MlpParams
        the parameters the tape was recorded with
    tape : Tape
        tape from `forward(params, ...)`
    output_grads : np.ndarray
        upstream gradient, same shape as the outputs

    Returns
    -------
    ParamGrads
        gradients congruent with `params`

    Raises
    ------
    ContractError
        if the tape belongs to other parameters
    """
    grads, _ = _backward(params, tape, output_grads)
    return grads


def value_and_input_gradient(
    params: MlpParams, batch_inputs: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Outputs of a scalar network together with per-row input gradients

    Returns
    -------
    Tuple[np.ndarray, np.ndarray]
        values of shape `(B,)` and gradients of shape `(B, input_dim)`
    """
    if params.spec.output_dim != 1:
        raise ContractError("input gradients are defined for scalar networks only")
    outputs, tape = forward(params, batch_inputs)
    _, grad = _backward(params, tape, np.ones_like(outputs))
    return outputs[:, 0], grad


def input_gradient(params: MlpParams, batch_inputs: np.ndarray) -> np.ndarray:
    """Row `i` is the gradient of output `i` with respect to input row `i`

    For critics over concatenated `(s, a)` the caller slices the action columns.
    """
    return value_and_input_gradient(params, batch_inputs)[1]


def _directional_param_grad(
    params: MlpParams, tape: Tape, direction: np.ndarray
) -> ParamGrads:
    """Gradient w.r.t. the parameters of `sum_i direction_i . grad_x Q(x_i)`

    The tangent of the forward pass along `direction` gives the directional derivative;
    reverse mode through both the primal and tangent chains then yields its parameter
    gradient exactly (forward-over-reverse).
    """
    spec = params.spec
    tangents_in = [direction]
    tangents_pre = []
    h_dot = direction
    for layer, w in enumerate(params.weights):
        z_dot = h_dot @ w.T
        kind = spec.activation(layer)
        h_dot = _first_derivative(kind, tape.pre_activations[layer], tape.activations[layer + 1]) * z_dot
        tangents_pre.append(z_dot)
        tangents_in.append(h_dot)

    batch_size = direction.shape[0]
    adj_tangent = np.ones((batch_size, spec.output_dim))
    adj_primal = np.zeros((batch_size, spec.output_dim))
    d_weights: List[np.ndarray] = [None] * spec.num_layers  # type: ignore[list-item]
    d_biases: List[np.ndarray] = [None] * spec.num_layers  # type: ignore[list-item]
    for layer in reversed(range(spec.num_layers)):
        kind = spec.activation(layer)
        z = tape.pre_activations[layer]
        h = tape.activations[layer + 1]
        first = _first_derivative(kind, z, h)
        second = _second_derivative(kind, z, h)
        adj_z = adj_primal * first + adj_tangent * second * tangents_pre[layer]
        adj_z_dot = adj_tangent * first
        d_weights[layer] = adj_z.T @ tape.activations[layer] + adj_z_dot.T @ tangents_in[layer]
        d_biases[layer] = adj_z.sum(axis=0)
        if layer > 0:
            adj_primal = adj_z @ params.weights[layer]
            adj_tangent = adj_z_dot @ params.weights[layer]
    return ParamGrads(weights=d_weights, biases=d_biases)


def gp_value_and_param_grad(
    params: MlpParams, states: np.ndarray, actions: np.ndarray, threshold: float
) -> Tuple[float, ParamGrads]:
    """One-sided action-gradient penalty and its exact parameter gradient

    penalty = mean_i max(0, ||grad_a Q(s_i, a_i)||_2 - k)^2 for a scalar critic over
    concatenated `(s, a)`.

    Parameters
    ----------
    params : MlpParams
        scalar critic with input width `state_dim + action_dim`
    states : np.ndarray
        `B x state_dim`
    actions : np.ndarray
        `B x action_dim`, row-aligned with `states`
    threshold : float
        hinge threshold k > 0

    Returns
    -------
    Tuple[float, ParamGrads]
        penalty value and its gradient with respect to the critic parameters

    Raises
    ------
    ContractError
        if k <= 0, rows are misaligned or the critic is not scalar
    NumericalError
        if a gradient norm is not finite, naming the first offending row
    """
    if threshold <= 0:
        raise ContractError(f"penalty threshold must be positive, got {threshold}")
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if states.ndim != 2 or actions.ndim != 2 or states.shape[0] != actions.shape[0]:
        raise ContractError(
            f"states {states.shape} and actions {actions.shape} are not row-aligned"
        )
    if params.spec.output_dim != 1:
        raise ContractError("the gradient penalty is defined for scalar critics only")

    state_dim = states.shape[1]
    inputs = np.hstack([states, actions])
    outputs, tape = forward(params, inputs)
    _, grad_inputs = _backward(params, tape, np.ones_like(outputs))
    grad_actions = grad_inputs[:, state_dim:]
    norms = np.linalg.norm(grad_actions, axis=1)
    bad = np.flatnonzero(~np.isfinite(norms))
    if bad.size:
        raise NumericalError("non-finite action-gradient norm", row=int(bad[0]))

    excess = np.maximum(norms - threshold, 0.0)
    penalty = float(np.mean(excess * excess))
    if not excess.any():
        return penalty, ParamGrads.zeros_like(params)

    batch_size = inputs.shape[0]
    active = excess > 0.0
    direction = np.zeros_like(inputs)
    # d penalty / d grad_a, only rows above the hinge contribute
    direction[active, state_dim:] = (
        (2.0 / batch_size) * (excess[active] / norms[active])[:, None] * grad_actions[active]
    )
    return penalty, _directional_param_grad(params, tape, direction)


def adam_step(
    opt: OptimState, params: MlpParams, grads: ParamGrads
) -> Tuple[MlpParams, OptimState]:
    """One bias-corrected adaptive-moment update

    Raises
    ------
    NumericalError
        if any gradient entry is not finite; the inputs are left untouched
    """
    if not grads.all_finite():
        raise NumericalError("refusing an optimizer step with non-finite gradients")
    step = opt.step + 1
    correction1 = 1.0 - opt.beta1**step
    correction2 = 1.0 - opt.beta2**step

    new_m_w, new_v_w, new_w = [], [], []
    for w, g, m, v in zip(params.weights, grads.weights, opt.first_moment.weights, opt.second_moment.weights):
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        new_w.append(w - opt.lr * (m / correction1) / (np.sqrt(v / correction2) + opt.eps))
        new_m_w.append(m)
        new_v_w.append(v)

    new_m_b, new_v_b, new_b = [], [], []
    for b, g, m, v in zip(params.biases, grads.biases, opt.first_moment.biases, opt.second_moment.biases):
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        new_b.append(b - opt.lr * (m / correction1) / (np.sqrt(v / correction2) + opt.eps))
        new_m_b.append(m)
        new_v_b.append(v)

    new_opt = OptimState(
        first_moment=ParamGrads(new_m_w, new_m_b),
        second_moment=ParamGrads(new_v_w, new_v_b),
        step=step,
        lr=opt.lr,
        beta1=opt.beta1,
        beta2=opt.beta2,
        eps=opt.eps,
    )
    return MlpParams(spec=params.spec, weights=new_w, biases=new_b), new_opt


def polyak_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """Return `(1 - tau) * target + tau * online`, elementwise

    Raises
    ------
    ContractError
        if tau is outside (0, 1]
    ShapeError
        if the two networks are not congruent
    """
    if not 0.0 < tau <= 1.0:
        raise ContractError(f"tau must lie in (0, 1], got {tau}")
    if target.spec != online.spec:
        raise ShapeError("target and online networks have different architectures")
    if tau == 1.0:
        return online.copy()
    return MlpParams(
        spec=target.spec,
        weights=[(1.0 - tau) * t + tau * o for t, o in zip(target.weights, online.weights)],
        biases=[(1.0 - tau) * t + tau * o for t, o in zip(target.biases, online.biases)],
    )


def params_to_vector(params: Union[MlpParams, ParamGrads]) -> np.ndarray:
    """Flatten weights then biases, layer by layer"""
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def params_from_vector(spec: MlpSpec, vector: np.ndarray) -> MlpParams:
    """Inverse of `params_to_vector` for a given architecture

    Raises
    ------
    ShapeError
        if the vector length differs from the number of parameters of `spec`
    """
    vector = np.asarray(vector, dtype=np.float64).ravel()
    dims = spec.layer_dims
    expected = sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(dims[:-1], dims[1:]))
    if vector.size != expected:
        raise ShapeError(f"vector of length {vector.size} does not fit spec ({expected} parameters)")
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        size = fan_in * fan_out
        weights.append(vector[offset : offset + size].reshape(fan_out, fan_in).copy())
        offset += size
        biases.append(vector[offset : offset + fan_out].copy())
        offset += fan_out
    return MlpParams(spec=spec, weights=weights, biases=biases)


def finite_diff_oracle(
    fn: Callable[[np.ndarray], float], point: Sequence[float], h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, used to check the analytic passes

    Parameters
    ----------
    fn : Callable[[np.ndarray], float]
        scalar function of an array shaped like `point`
    point : Sequence[float]
        where to differentiate
    h : float, optional
        step, by default 1e-5

    Returns
    -------
    np.ndarray
        gradient estimate shaped like `point`
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = fn(point)
        flat[i] = original - h
        lower = fn(point)
        flat[i] = original
        grad_flat[i] = (upper - lower) / (2.0 * h)
    return grad
