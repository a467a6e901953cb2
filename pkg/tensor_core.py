"""
Dense NHWC tensor primitives with hand-written forward/backward passes,
an Adam optimizer and a finite-difference gradient checker.

Tensors are plain float64 numpy arrays shaped (n, h, w, c).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, NumericalError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Mode = Literal["train", "eval"]
MODES = ("train", "eval")


def as_tensor(data, name: str = "tensor") -> Tensor:
    """Convert to a contiguous float64 (n, h, w, c) array, validating dims."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 4:
        raise ConfigurationError(f"{name} must be 4-D (n, h, w, c), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ConfigurationError(f"{name} has an empty dimension: {arr.shape}")
    return arr


def check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode '{mode}', expected one of {MODES}")


class Parameter:
    """A learnable array and its accumulated gradient"""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class ConvKernel:
    """Square same-padded convolution: weight (c_out, s, s, c_in), bias (c_out,)"""

    def __init__(self, name: str, c_in: int, c_out: int, size: int,
                 rng: Optional[np.random.Generator] = None, init: str = "he"):
        if size < 1 or size % 2 == 0:
            raise ConfigurationError(f"{name}: kernel size must be odd and positive, got {size}")
        if c_in < 1 or c_out < 1:
            raise ConfigurationError(f"{name}: channel counts must be >= 1 (c_in={c_in}, c_out={c_out})")
        shape = (c_out, size, size, c_in)
        if init == "he":
            if rng is None:
                raise ConfigurationError(f"{name}: he initialisation needs an rng")
            std = np.sqrt(2.0 / (size * size * c_in))
            weight = rng.standard_normal(shape) * std
        elif init == "zero":
            weight = np.zeros(shape)
        else:
            raise ConfigurationError(f"{name}: unknown init '{init}'")
        self.name = name
        self.size = size
        self.c_in = c_in
        self.c_out = c_out
        self.weight = Parameter(f"{name}.weight", weight)
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out))

    @property
    def padding(self) -> int:
        return (self.size - 1) // 2

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def zero_grad(self) -> None:
        self.weight.zero_grad()
        self.bias.zero_grad()


def _im2col(x: Tensor, size: int) -> np.ndarray:
    """Patch matrix of shape (n*h*w, size*size*c) in (di, dj, ci) order."""
    n, h, w, c = x.shape
    if size == 1:
        return x.reshape(n * h * w, c)
    pad = (size - 1) // 2
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(1, 2))
    # windows: (n, h, w, c, di, dj)
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, size * size * c)


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int, int], size: int) -> Tensor:
    n, h, w, c = shape
    if size == 1:
        return cols.reshape(shape)
    pad = (size - 1) // 2
    patches = cols.reshape(n, h, w, size, size, c)
    padded = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for di in range(size):
        for dj in range(size):
            padded[:, di:di + h, dj:dj + w, :] += patches[:, :, :, di, dj, :]
    return padded[:, pad:pad + h, pad:pad + w, :]


def conv2d_forward(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Stride-1 zero same-padded convolution."""
    if x.ndim != 4:
        raise ConfigurationError(f"{kernel.name}: input must be 4-D, got shape {x.shape}")
    n, h, w, c = x.shape
    if c != kernel.c_in:
        raise ConfigurationError(
            f"{kernel.name}: input has {c} channels but the kernel expects {kernel.c_in}"
        )
    cols = _im2col(x, kernel.size)
    wmat = kernel.weight.value.reshape(kernel.c_out, -1)
    out = cols @ wmat.T + kernel.bias.value
    return out.reshape(n, h, w, kernel.c_out)


def conv2d_backward(x: Tensor, kernel: ConvKernel, grad_out: Tensor) -> Tensor:
    """Return dL/dx and accumulate dL/dW, dL/db into the kernel."""
    n, h, w, c = x.shape
    if c != kernel.c_in:
        raise ConfigurationError(
            f"{kernel.name}: input has {c} channels but the kernel expects {kernel.c_in}"
        )
    if grad_out.shape != (n, h, w, kernel.c_out):
        raise ConfigurationError(
            f"{kernel.name}: grad_out shape {grad_out.shape} does not match output {(n, h, w, kernel.c_out)}"
        )
    cols = _im2col(x, kernel.size)
    go = grad_out.reshape(n * h * w, kernel.c_out)
    wmat = kernel.weight.value.reshape(kernel.c_out, -1)
    kernel.weight.grad += (go.T @ cols).reshape(kernel.weight.shape)
    kernel.bias.grad += go.sum(axis=0)
    return _col2im(go @ wmat, x.shape, kernel.size)


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0.0)


def dropout(x: Tensor, rate: float, mode: Mode,
            rng: Optional[np.random.Generator]) -> Tuple[Tensor, np.ndarray]:
    """Inverted dropout. Returns (output, scaled mask) for the backward pass."""
    check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must satisfy 0 <= rate < 1, got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ConfigurationError("train-mode dropout needs a seeded rng")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out: Tensor, mask: np.ndarray) -> Tensor:
    return grad_out * mask


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ConfigurationError("concat_channels needs at least one part")
    lead = parts[0].shape[:3]
    for idx, part in enumerate(parts):
        if part.ndim != 4 or part.shape[:3] != lead:
            raise ConfigurationError(
                f"concat part {idx} has shape {part.shape}, expected leading dims {lead}"
            )
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=3)


def split_channels(grad: Tensor, widths: Sequence[int]) -> List[Tensor]:
    """Adjoint of concat_channels: slice grad back into the given channel widths."""
    if sum(widths) != grad.shape[3]:
        raise ConfigurationError(f"split widths {list(widths)} do not sum to {grad.shape[3]} channels")
    bounds = np.cumsum(widths)[:-1]
    return np.split(grad, bounds, axis=3)


def _check_congruent(a: Tensor, b: Tensor, op: str) -> bool:
    """True when b broadcasts over the sample dimension of a."""
    if a.shape == b.shape:
        return False
    if a.ndim == 4 and b.ndim == 4 and b.shape[0] == 1 and a.shape[1:] == b.shape[1:]:
        return True
    raise ConfigurationError(f"{op}: incongruent shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_congruent(a, b, "add")
    return a + b


def add_backward(grad_out: Tensor, b_shape: Tuple[int, ...]) -> Tuple[Tensor, Tensor]:
    grad_b = grad_out.sum(axis=0, keepdims=True) if b_shape != grad_out.shape else grad_out
    return grad_out, grad_b


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_congruent(a, b, "elementwise_mul")
    return a * b


def elementwise_mul_backward(a: Tensor, b: Tensor, grad_out: Tensor) -> Tuple[Tensor, Tensor]:
    broadcast = _check_congruent(a, b, "elementwise_mul")
    grad_a = grad_out * b
    grad_b = grad_out * a
    if broadcast:
        grad_b = grad_b.sum(axis=0, keepdims=True)
    return grad_a, grad_b


def scale(a: Tensor, alpha: float) -> Tensor:
    """Multiply by a scalar; the adjoint is scale(grad, alpha)."""
    return a * alpha


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def like(cls, param: Parameter, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param.value), v=np.zeros_like(param.value), **hyper)


def adam_step(params: Sequence[Parameter], states: Dict[str, AdamState]) -> None:
    """Apply one bias-corrected Adam update to every parameter, then zero its grad."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter '{p.name}'")
        state = states[p.name]
        if state.m.shape != p.shape or state.v.shape != p.shape:
            raise ConfigurationError(f"Adam state for '{p.name}' has shape {state.m.shape}, parameter {p.shape}")

    for p in params:
        s = states[p.name]
        s.step += 1
        g = p.grad
        s.m *= s.beta1
        s.m += (1.0 - s.beta1) * g
        s.v *= s.beta2
        s.v += (1.0 - s.beta2) * (g * g)
        m_hat = s.m / (1.0 - s.beta1 ** s.step)
        v_hat = s.v / (1.0 - s.beta2 ** s.step)
        p.value -= s.lr * m_hat / (np.sqrt(v_hat) + s.epsilon)
        p.zero_grad()


@dataclass
class Adam:
    """Keeps one AdamState per parameter name, created on first sight."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: Dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: Iterable[Parameter]) -> None:
        params = list(params)
        for p in params:
            if p.name not in self.states:
                self.states[p.name] = AdamState.like(
                    p, lr=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon
                )
        adam_step(params, self.states)


Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def grad_check(fn: Objective, point: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between fn's analytic gradient and central differences.

    fn(x) returns (value, gradient). The analytic call runs last so any state
    fn writes into ends up at `point`.
    """
    point = np.asarray(point, dtype=np.float64)
    numeric = np.zeros_like(point)
    shifted = point.copy()
    flat_x = shifted.reshape(-1)
    for idx in range(flat_x.size):
        orig = flat_x[idx]
        flat_x[idx] = orig + eps
        f_plus, _ = fn(shifted)
        flat_x[idx] = orig - eps
        f_minus, _ = fn(shifted)
        flat_x[idx] = orig
        numeric.reshape(-1)[idx] = (f_plus - f_minus) / (2.0 * eps)
    _, analytic = fn(point.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(point.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def projected_objective(forward: Callable[[Tensor], Tensor],
                        backward: Callable[[Tensor], Tensor],
                        direction: Tensor) -> Objective:
    """Scalar objective sum(forward(x) * direction) with its input gradient."""

    def objective(x: np.ndarray) -> Tuple[float, np.ndarray]:
        out = forward(x)
        return float(np.sum(out * direction)), backward(direction)

    return objective


def parameter_objective(param: Parameter, params: Sequence[Parameter],
                        run: Callable[[], Tuple[Tensor, Callable[[Tensor], Tensor]]],
                        direction: Tensor) -> Objective:
    """Objective over one parameter's value.

    `run()` performs a forward pass and returns (output, backward_fn).
    """

    def objective(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        param.value[...] = theta
        for p in params:
            p.zero_grad()
        out, backward = run()
        backward(direction)
        return float(np.sum(out * direction)), param.grad.copy()

    return objective
