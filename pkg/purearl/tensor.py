"""
Tensor core
-----------

Dense float64 arrays with reverse-mode automatic differentiation, and the
pieces of the agents that are built directly on top of it: feed-forward
networks with Polyak target copies, Gaussian and categorical policy heads,
Adam, the expectile loss and the two option normalisers.

Every operation returns a new ``Tensor`` holding its parents and a closure
that maps the gradient of the output to gradients of the parents. Nodes that
cannot reach a trainable ``Parameter`` drop their parents immediately, so
constants and frozen leaves never enter a backward pass.
"""

import logging
import math
from typing import (
    Callable,
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from typing_extensions import Self

from .errors import ConfigError, NumericAbort, ShapeError, UsageError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
GELU_K = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715
LAYER_NORM_EPS = 1e-6
# norms below this are treated as zero by length_normalize
NORM_FLOOR = 1e-8
# soft_normalize switches to its series expansion below this norm
SOFT_SERIES_RADIUS = 1e-4

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    value: np.ndarray
    requires_grad: bool
    parents: Tuple["Tensor", ...]
    backward_fn: Optional[BackwardFn]
    op: str
    __slots__ = ["value", "requires_grad", "parents", "backward_fn", "op"]

    # let numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(
        self,
        value: Union[np.ndarray, float, Sequence[float]],
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "const",
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = any(p.requires_grad for p in parents)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.value.shape)

    def item(self) -> float:
        if self.value.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(op={self.op}, shape={self.shape})"

    def __add__(self, other: "TensorLike") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: "TensorLike") -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "TensorLike") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: "TensorLike") -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "TensorLike") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: "TensorLike") -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: "TensorLike") -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "TensorLike") -> "Tensor":
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


class Parameter(Tensor):
    """
    leaf tensor owned by a network, updated in place by the optimiser

    frozen parameters (trainable=False) behave as constants in the graph
    """

    name: str
    trainable: bool
    __slots__ = ["name", "trainable"]

    def __init__(self, value: np.ndarray, name: str, trainable: bool = True):
        super().__init__(np.array(value, dtype=np.float64, copy=True), op="param")
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.name}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def stopgrad(x: TensorLike) -> Tensor:
    return Tensor(as_tensor(x).value)


def _node(
    value: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str
) -> Tensor:
    out = Tensor(value, parents, backward_fn, op)
    if not out.requires_grad:
        # nothing upstream is trainable, keep this as a plain constant
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), backward_fn, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.value - b.value, (a, b), backward_fn, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        )

    return _node(a.value * b.value, (a, b), backward_fn, "mul")


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        )

    return _node(out, (a, b), backward_fn, "div")


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    assert a.value.ndim == 2 and b.value.ndim == 2, (a.shape, b.shape)

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return g @ b.value.T, a.value.T @ g

    return _node(a.value @ b.value, (a, b), backward_fn, "matmul")


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def square(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def gelu(a: TensorLike) -> Tensor:
    """tanh approximation of the gaussian error linear unit"""
    a = as_tensor(a)
    x = a.value
    t = np.tanh(GELU_K * (x + GELU_C * x**3))
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        dinner = GELU_K * (1.0 + 3.0 * GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), backward_fn, "gelu")


def clip(a: TensorLike, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.value >= low) & (a.value <= high)
    return _node(
        np.clip(a.value, low, high), (a,), lambda g: (g * inside,), "clip"
    )


def reduce_sum(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), backward_fn, "sum")


def reduce_mean(a: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reshape(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _node(
        a.value.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape"
    )


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(g, splits, axis=axis))

    return _node(
        np.concatenate([p.value for p in parts], axis=axis), parts, backward_fn, "concat"
    )


def normalize_rows(a: TensorLike, eps: float = LAYER_NORM_EPS) -> Tensor:
    """zero-mean unit-variance over the last axis, the affine-free part of layer norm"""
    a = as_tensor(a)
    centred = a.value - a.value.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            inv
            * (
                g
                - g.mean(axis=-1, keepdims=True)
                - xhat * (g * xhat).mean(axis=-1, keepdims=True)
            ),
        )

    return _node(xhat, (a,), backward_fn, "normalize_rows")


def log_softmax(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), backward_fn, "log_softmax")


class ComputeGraph:
    """
    the nodes reachable from a scalar loss through differentiable edges, in
    topological order with inputs first
    """

    loss: Tensor
    nodes: List[Tensor]

    def __init__(self, loss: Tensor):
        if loss.value.size != 1:
            raise UsageError(f"loss must be scalar, got shape {loss.shape}")
        self.loss = loss
        self.nodes = self._toposort(loss)

    @staticmethod
    def _toposort(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    @property
    def leaves(self) -> List[Parameter]:
        return [n for n in self.nodes if isinstance(n, Parameter)]

    def backward(self) -> Dict[Parameter, np.ndarray]:
        result: Dict[Parameter, np.ndarray] = {}
        if not self.loss.requires_grad:
            return result
        pending: Dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.value)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                result[node] = g
                continue
            assert node.backward_fn is not None, node
            for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad
        return result


def backward(loss: Tensor) -> Dict[Parameter, np.ndarray]:
    """gradient of a scalar loss for every trainable parameter it depends on"""
    return ComputeGraph(loss).backward()


def gradients_for(
    grads: Mapping[Parameter, np.ndarray], params: Sequence[Parameter]
) -> List[np.ndarray]:
    # parameters the loss never reached get an exact zero gradient
    return [grads[p] if p in grads else np.zeros_like(p.value) for p in params]


def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    rows, cols = max(fan_in, fan_out), min(fan_in, fan_out)
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return q.reshape(fan_in, fan_out)


class NetBundle:
    """
    parameters of one MLP plus a target copy of identical shape

    hidden layers are linear -> gelu -> optional layer norm, the final layer
    is linear
    """

    name: str
    layer_sizes: List[int]
    uses_layer_norm: bool
    zero_final: bool
    online: List[Parameter]
    target: List[Parameter]
    activation = "gelu"

    def __init__(
        self,
        name: str,
        layer_sizes: Sequence[int],
        uses_layer_norm: bool = True,
        zero_final: bool = False,
        rng: Optional[np.random.Generator] = None,
    ):
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ShapeError(f"invalid layer sizes {list(layer_sizes)} for {name}")
        self.name = name
        self.layer_sizes = [int(i) for i in layer_sizes]
        self.uses_layer_norm = uses_layer_norm
        self.zero_final = zero_final
        rng = rng if rng is not None else np.random.default_rng(0)

        arrays: List[Tuple[str, np.ndarray]] = []
        n_layers = len(self.layer_sizes) - 1
        for layer in range(n_layers):
            fan_in, fan_out = self.layer_sizes[layer], self.layer_sizes[layer + 1]
            final = layer == n_layers - 1
            if final and zero_final:
                weight = np.zeros((fan_in, fan_out))
            else:
                weight = _orthogonal(rng, fan_in, fan_out)
            arrays.append((f"w{layer}", weight))
            arrays.append((f"b{layer}", np.zeros(fan_out)))
            if not final and uses_layer_norm:
                arrays.append((f"ln_gain{layer}", np.ones(fan_out)))
                arrays.append((f"ln_bias{layer}", np.zeros(fan_out)))

        self.online = [Parameter(a, f"{name}.{key}") for key, a in arrays]
        self.target = [
            Parameter(a, f"{name}.{key}.target", trainable=False) for key, a in arrays
        ]

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.name}, {self.layer_sizes}, layer_norm={self.uses_layer_norm})"

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def to_records(self) -> Dict[str, np.ndarray]:
        records = {
            f"{self.name}.layer_sizes": np.array(self.layer_sizes, dtype=np.int64),
            f"{self.name}.flags": np.array(
                [int(self.uses_layer_norm), int(self.zero_final)], dtype=np.int64
            ),
        }
        for i, (online, target) in enumerate(zip(self.online, self.target)):
            records[f"{self.name}.online.{i}"] = online.value
            records[f"{self.name}.target.{i}"] = target.value
        return records

    @classmethod
    def from_records(cls, name: str, records: Mapping[str, np.ndarray]) -> Self:
        try:
            layer_sizes = [int(i) for i in records[f"{name}.layer_sizes"]]
            flags = [int(i) for i in records[f"{name}.flags"]]
        except KeyError as e:
            raise RuntimeError(f"invalid checkpoint, missing {e} for net {name}")
        net = cls(name, layer_sizes, uses_layer_norm=bool(flags[0]), zero_final=bool(flags[1]))
        for i, (online, target) in enumerate(zip(net.online, net.target)):
            for param, kind in ((online, "online"), (target, "target")):
                value = records[f"{name}.{kind}.{i}"]
                if value.shape != param.value.shape:
                    raise RuntimeError(
                        f"invalid checkpoint, {name}.{kind}.{i} has shape {value.shape}"
                    )
                param.value = np.array(value, dtype=np.float64)
        return net

    def copy_from(self, other: "NetBundle") -> None:
        for mine, theirs in zip(self.online + self.target, other.online + other.target):
            mine.value = theirs.value.copy()


def mlp_forward(
    net: NetBundle, x: TensorLike, use_target: bool = False, frozen: bool = False
) -> Tensor:
    """
    evaluate the network on a vector or a batch of row vectors

    frozen evaluates the online parameters as constants so no gradient reaches
    them while still flowing back into x
    """
    params: Sequence[Tensor] = net.target if use_target else net.online
    if frozen:
        params = [stopgrad(p) for p in params]
    h = as_tensor(x)
    single = h.value.ndim == 1
    if h.shape[-1] != net.input_dim:
        raise ShapeError(f"{net.name} expects width {net.input_dim}, got {h.shape[-1]}")
    if single:
        h = reshape(h, (1, net.input_dim))

    n_layers = len(net.layer_sizes) - 1
    i = 0
    for layer in range(n_layers):
        h = matmul(h, params[i]) + params[i + 1]
        i += 2
        if layer < n_layers - 1:
            h = gelu(h)
            if net.uses_layer_norm:
                h = normalize_rows(h) * params[i] + params[i + 1]
                i += 2

    if single:
        h = reshape(h, (net.output_dim,))
    return h


class GaussianPolicyHead:
    """
    diagonal gaussian with a state-dependent mean and a global log_std

    squash applies tanh to the mean, for heads whose targets live in [-1, 1]
    """

    net: NetBundle
    log_std: Parameter
    log_std_range: Tuple[float, float]
    squash: bool

    def __init__(
        self,
        name: str,
        layer_sizes: Sequence[int],
        uses_layer_norm: bool = True,
        rng: Optional[np.random.Generator] = None,
        log_std_range: Tuple[float, float] = (-5.0, 2.0),
        squash: bool = False,
    ):
        low, high = log_std_range
        if not low < high:
            raise ConfigError(f"invalid log_std range {log_std_range}")
        self.net = NetBundle(name, layer_sizes, uses_layer_norm, zero_final=True, rng=rng)
        self.log_std = Parameter(np.clip(np.zeros(self.net.output_dim), low, high), f"{name}.log_std")
        self.log_std_range = (float(low), float(high))
        self.squash = squash

    @property
    def name(self) -> str:
        return self.net.name

    @property
    def action_dim(self) -> int:
        return self.net.output_dim

    def parameters(self) -> List[Parameter]:
        return self.net.online + [self.log_std]

    def project(self) -> None:
        """keep log_std inside its clamp range after an optimiser step"""
        self.log_std.value = np.clip(self.log_std.value, *self.log_std_range)

    def mean(self, features: TensorLike, frozen: bool = False) -> Tensor:
        out = mlp_forward(self.net, features, frozen=frozen)
        return tanh(out) if self.squash else out

    def clamped_log_std(self) -> Tensor:
        return clip(self.log_std, *self.log_std_range)

    def log_prob(self, features: TensorLike, action: TensorLike) -> Tensor:
        return gaussian_log_prob(self, features, action)

    def sample(
        self, features: np.ndarray, rng: Optional[np.random.Generator], deterministic: bool
    ) -> np.ndarray:
        mean = self.mean(features).value
        if deterministic or rng is None:
            return mean
        std = np.exp(np.clip(self.log_std.value, *self.log_std_range))
        return mean + std * rng.standard_normal(mean.shape)


def gaussian_log_prob(
    head: GaussianPolicyHead, features: TensorLike, action: TensorLike
) -> Tensor:
    action = as_tensor(action)
    if action.shape[-1] != head.action_dim:
        raise ShapeError(f"{head.name} has dimension {head.action_dim}, got {action.shape[-1]}")
    log_std = head.clamped_log_std()
    z = (action - head.mean(features)) * exp(neg(log_std))
    k = head.action_dim
    return (
        reduce_sum(square(z), axis=-1) * -0.5
        - reduce_sum(log_std)
        - 0.5 * k * LOG_2PI
    )


class CategoricalPolicyHead:
    """
    softmax over discrete actions, with actions carried as one-hot vectors

    the differentiable "mean" action is the probability vector
    """

    net: NetBundle

    def __init__(
        self,
        name: str,
        layer_sizes: Sequence[int],
        uses_layer_norm: bool = True,
        rng: Optional[np.random.Generator] = None,
    ):
        self.net = NetBundle(name, layer_sizes, uses_layer_norm, zero_final=True, rng=rng)

    @property
    def name(self) -> str:
        return self.net.name

    @property
    def action_dim(self) -> int:
        return self.net.output_dim

    def parameters(self) -> List[Parameter]:
        return list(self.net.online)

    def project(self) -> None:
        pass

    def log_probs(self, features: TensorLike, frozen: bool = False) -> Tensor:
        return log_softmax(mlp_forward(self.net, features, frozen=frozen))

    def mean(self, features: TensorLike, frozen: bool = False) -> Tensor:
        return exp(self.log_probs(features, frozen))

    def log_prob(self, features: TensorLike, action: TensorLike) -> Tensor:
        action = as_tensor(action)
        if action.shape[-1] != self.action_dim:
            raise ShapeError(f"{self.name} has {self.action_dim} actions, got {action.shape[-1]}")
        return reduce_sum(self.log_probs(features) * action, axis=-1)

    def sample(
        self, features: np.ndarray, rng: Optional[np.random.Generator], deterministic: bool
    ) -> np.ndarray:
        logp = self.log_probs(features).value
        if deterministic or rng is None:
            index = np.argmax(logp, axis=-1)
        else:
            cumulative = np.cumsum(np.exp(logp), axis=-1)
            draws = rng.random(logp.shape[:-1] + (1,))
            index = np.minimum((cumulative < draws).sum(axis=-1), self.action_dim - 1)
        return np.eye(self.action_dim)[index]


PolicyHead = Union[GaussianPolicyHead, CategoricalPolicyHead]


class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int

    def __init__(self, params: Sequence[Parameter]):
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float = 3e-4,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    assert len(params) == len(grads) == len(state.m), (len(params), len(grads), len(state.m))
    checked = []
    # validate everything first, an abort must leave parameters untouched
    for param, grad in zip(params, grads):
        if grad is None:
            grad = np.zeros_like(param.value)
        if grad.shape != param.value.shape:
            raise ShapeError(f"gradient shape {grad.shape} for {param.name} {param.value.shape}")
        if not np.all(np.isfinite(grad)):
            bad = int(np.count_nonzero(~np.isfinite(grad)))
            logger.error(f"non-finite gradient for {param.name}: {bad} of {grad.size} entries")
            raise NumericAbort(
                f"non-finite gradient for {param.name} ({bad} entries)",
                parameter=param.name,
            )
        checked.append(grad)

    beta1, beta2 = betas
    state.t += 1
    correction1 = 1.0 - beta1**state.t
    correction2 = 1.0 - beta2**state.t
    for i, (param, grad) in enumerate(zip(params, checked)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad * grad
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        param.value = param.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    params: List[Parameter]
    state: AdamState
    lr: float
    betas: Tuple[float, float]
    eps: float

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 3e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.state = AdamState(self.params)
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def step(self, grads: Mapping[Parameter, np.ndarray]) -> None:
        adam_step(
            self.params,
            gradients_for(grads, self.params),
            self.state,
            self.lr,
            self.betas,
            self.eps,
        )


def polyak_update(net: NetBundle, rate: float) -> None:
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"polyak rate must be in (0, 1], got {rate}")
    for online, target in zip(net.online, net.target):
        assert online.value.shape == target.value.shape, (online.name, target.name)
        target.value = (1.0 - rate) * target.value + rate * online.value


def expectile_loss(x: TensorLike, tau: float) -> Tensor:
    """elementwise |tau - 1(x < 0)| * x**2"""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"expectile tau must be in (0, 1), got {tau}")
    x = as_tensor(x)
    weight = np.where(x.value < 0.0, 1.0 - tau, tau)
    return square(x) * weight


class NormalizeStats:
    """counts option vectors too short to normalise"""

    degenerate: int

    def __init__(self) -> None:
        self.degenerate = 0


def _check_dim(v: Tensor, d: int) -> None:
    if v.shape[-1] != d:
        raise ShapeError(f"expected option dimension {d}, got {v.shape[-1]}")


def length_normalize(v: TensorLike, d: int, stats: Optional[NormalizeStats] = None) -> Tensor:
    """v / |v| * sqrt(d), rows below the norm floor become zero"""
    v = as_tensor(v)
    _check_dim(v, d)
    norms = np.linalg.norm(v.value, axis=-1, keepdims=True)
    degenerate = norms < NORM_FLOOR
    safe = np.where(degenerate, 1.0, norms)
    unit = v.value / safe
    scale = math.sqrt(d)
    out = np.where(degenerate, 0.0, unit * scale)

    count = int(np.count_nonzero(degenerate))
    if count:
        logger.warning(f"{count} option vectors below norm floor {NORM_FLOOR}")
        if stats is not None:
            stats.degenerate += count

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        projected = g - unit * np.sum(g * unit, axis=-1, keepdims=True)
        return (np.where(degenerate, 0.0, projected * scale / safe),)

    return _node(out, (v,), backward_fn, "length_normalize")


def soft_normalize(v: TensorLike, d: int) -> Tensor:
    """v * tanh(|v|) / |v| * sqrt(d), smooth through the origin"""
    v = as_tensor(v)
    _check_dim(v, d)
    r = np.linalg.norm(v.value, axis=-1, keepdims=True)
    r2 = r * r
    small = r < SOFT_SERIES_RADIUS
    safe = np.where(small, 1.0, r)
    t = np.tanh(r)
    # f(r) = tanh(r) / r and f'(r) / r, both with series forms near zero
    f = np.where(small, 1.0 - r2 / 3.0 + 2.0 * r2 * r2 / 15.0, t / safe)
    df_over_r = np.where(
        small, -2.0 / 3.0 + 8.0 * r2 / 15.0, (r * (1.0 - t * t) - t) / safe**3
    )
    scale = math.sqrt(d)

    def backward_fn(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        dot = np.sum(g * v.value, axis=-1, keepdims=True)
        return (scale * (f * g + df_over_r * dot * v.value),)

    return _node(v.value * f * scale, (v,), backward_fn, "soft_normalize")
