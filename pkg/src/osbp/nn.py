"""Small feed-forward engine with hand-written backward passes.

Everything runs in float64. A :class:`LayerStack` is a fixed sequence of
layers; ``forward`` returns the output together with a :class:`ForwardTrace`
holding whatever each layer needs for its backward pass, and ``backward``
consumes that trace exactly once, accumulating parameter gradients into
each :class:`Param`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError, ValidationError

PROB_EPS = 1e-7


class Param:
    """A trainable array with its gradient and optimizer scratch slots."""

    __slots__ = ("name", "value", "grad", "slots")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.slots: dict = {}

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind = "layer"
    in_width: int | None = None
    out_width: int | None = None

    def params(self) -> list[Param]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def spec(self) -> dict:
        raise NotImplementedError

    def forward(self, x: np.ndarray, train: bool, update_stats: bool = True):
        raise NotImplementedError

    def backward(self, cache, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Affine(Layer):
    kind = "affine"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        if n_in < 1 or n_out < 1:
            raise ConfigError(f"affine widths must be >= 1, got {n_in}->{n_out}")
        self.in_width = int(n_in)
        self.out_width = int(n_out)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param("weight", _uniform_init(rng, n_in, (n_in, n_out)))
        self.bias = Param("bias", _uniform_init(rng, n_in, (n_out,)))

    def params(self):
        return [self.weight, self.bias]

    def spec(self):
        return {"kind": self.kind, "in": self.in_width, "out": self.out_width}

    def forward(self, x, train, update_stats=True):
        return x @ self.weight.value + self.bias.value, x

    def backward(self, cache, grad):
        x = cache
        self.weight.grad += x.T @ grad
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value.T


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.01):
        if not 0.0 < slope < 1.0:
            raise ConfigError(f"leaky relu slope must be in (0, 1), got {slope}")
        self.slope = float(slope)

    def spec(self):
        return {"kind": self.kind, "slope": self.slope}

    def forward(self, x, train, update_stats=True):
        positive = x > 0
        return np.where(positive, x, self.slope * x), positive

    def backward(self, cache, grad):
        return np.where(cache, grad, self.slope * grad)


class BatchNorm(Layer):
    """Per-feature batch normalization with a learned scale and shift.

    Train mode normalizes with the batch mean and (biased) variance and
    folds them into running averages; eval mode uses only the running
    averages.
    """

    kind = "batch_norm"

    def __init__(self, width: int, momentum: float = 0.9, epsilon: float = 1e-5):
        if width < 1:
            raise ConfigError(f"batch norm width must be >= 1, got {width}")
        if epsilon <= 0:
            raise ConfigError(f"batch norm epsilon must be > 0, got {epsilon}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"batch norm momentum must be in [0, 1), got {momentum}")
        self.in_width = self.out_width = int(width)
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)
        self.gamma = Param("gamma", np.ones(width))
        self.beta = Param("beta", np.zeros(width))
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def spec(self):
        return {
            "kind": self.kind,
            "width": self.in_width,
            "momentum": self.momentum,
            "epsilon": self.epsilon,
        }

    def normalize(self, x, train):
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        return (x - mean) * inv_std, mean, var, inv_std

    def forward(self, x, train, update_stats=True):
        xhat, mean, var, inv_std = self.normalize(x, train)
        if train and update_stats:
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1.0 - m) * mean
            self.running_var[...] = m * self.running_var + (1.0 - m) * var
        return self.gamma.value * xhat + self.beta.value, (xhat, inv_std)

    def backward(self, cache, grad):
        xhat, inv_std = cache
        n = grad.shape[0]
        self.gamma.grad += (grad * xhat).sum(axis=0)
        self.beta.grad += grad.sum(axis=0)
        dxhat = grad * self.gamma.value
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )


class GradReversal(Layer):
    """Identity on the way forward, gradient times ``-weight`` on the way back."""

    kind = "grad_reversal"

    def __init__(self, weight: float = 1.0):
        if weight < 0:
            raise ConfigError(f"gradient reversal weight must be >= 0, got {weight}")
        self.weight = float(weight)

    def spec(self):
        return {"kind": self.kind, "weight": self.weight}

    def forward(self, x, train, update_stats=True):
        return x, None

    def backward(self, cache, grad):
        return -self.weight * grad


class Dropout(Layer):
    """Inverted dropout mask. Identity in eval mode."""

    kind = "dropout"

    def __init__(self, rate: float = 0.5, seed: int = 0):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.seed = int(seed)
        self.rng = np.random.default_rng(seed)
        # grad_check pins the mask so finite differences see a fixed function
        self.fixed_mask: np.ndarray | None = None

    def spec(self):
        return {"kind": self.kind, "rate": self.rate, "seed": self.seed}

    def forward(self, x, train, update_stats=True):
        if not train or self.rate == 0.0:
            return x, None
        if self.fixed_mask is not None and self.fixed_mask.shape == x.shape:
            mask = self.fixed_mask
        else:
            keep = 1.0 - self.rate
            mask = (self.rng.random(x.shape) < keep) / keep
        return x * mask, mask

    def backward(self, cache, grad):
        return grad if cache is None else grad * cache


LAYER_KINDS = {
    cls.kind: cls for cls in (Affine, LeakyReLU, BatchNorm, GradReversal, Dropout)
}


def layer_from_spec(spec: dict) -> Layer:
    kind = spec.get("kind")
    if kind == "affine":
        return Affine(spec["in"], spec["out"])
    if kind == "leaky_relu":
        return LeakyReLU(spec["slope"])
    if kind == "batch_norm":
        return BatchNorm(spec["width"], spec["momentum"], spec["epsilon"])
    if kind == "grad_reversal":
        return GradReversal(spec["weight"])
    if kind == "dropout":
        return Dropout(spec["rate"], spec["seed"])
    raise ValidationError(f"unknown layer kind {kind!r}")


@dataclass
class ForwardTrace:
    stack_id: int
    train: bool
    caches: list = field(default_factory=list)
    consumed: bool = False


class LayerStack:
    """An ordered pipeline of layers, e.g. a feature generator or classifier."""

    def __init__(self, layers: Sequence[Layer] = (), train: bool = True):
        self.layers = list(layers)
        self.training = train
        width = None
        for i, layer in enumerate(self.layers):
            if layer.in_width is not None:
                if width is not None and width != layer.in_width:
                    raise ShapeError(
                        f"layer {i} ({layer.kind}) expects width {layer.in_width}, "
                        f"previous layer produces {width}"
                    )
            if layer.out_width is not None:
                width = layer.out_width

    @property
    def in_width(self) -> int | None:
        for layer in self.layers:
            if layer.in_width is not None:
                return layer.in_width
        return None

    @property
    def out_width(self) -> int | None:
        for layer in reversed(self.layers):
            if layer.out_width is not None:
                return layer.out_width
        return None

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, x, update_stats: bool = True) -> tuple[np.ndarray, ForwardTrace]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"expected a 2-D batch, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("input contains non-finite values")
        trace = ForwardTrace(id(self), self.training)
        for i, layer in enumerate(self.layers):
            if layer.in_width is not None and x.shape[1] != layer.in_width:
                raise ShapeError(
                    f"layer {i} ({layer.kind}) expects width {layer.in_width}, "
                    f"got {x.shape[1]}"
                )
            x, cache = layer.forward(x, self.training, update_stats)
            trace.caches.append(cache)
        return x, trace

    def __call__(self, x) -> np.ndarray:
        return self.forward(x, update_stats=False)[0]

    def backward(self, trace: ForwardTrace, out_grad) -> np.ndarray:
        if trace.stack_id != id(self) or len(trace.caches) != len(self.layers):
            raise UsageError("trace was not produced by this stack")
        if not trace.train:
            raise UsageError("cannot backpropagate through an eval-mode trace")
        if trace.consumed:
            raise UsageError("trace has already been consumed by a backward call")
        trace.consumed = True
        grad = np.asarray(out_grad, dtype=np.float64)
        for layer, cache in zip(reversed(self.layers), reversed(trace.caches)):
            grad = layer.backward(cache, grad)
        return grad

    def spec(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValidationError("logits contain non-finite values")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    ``probs`` must be the softmax of the logits; the returned gradient is the
    fused softmax + cross-entropy derivative ``(probs - onehot) / n``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, width = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} probability rows")
    if np.any(labels < 0) or np.any(labels >= width):
        raise ValidationError(f"labels must lie in [0, {width})")
    rows = np.arange(n)
    picked = np.clip(probs[rows, labels], PROB_EPS, 1.0)
    loss = float(-np.log(picked).mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / n


def adv_bce(p_unknown, t: float) -> tuple[float, np.ndarray]:
    """Binary cross-entropy between the unknown-class probability and ``t``.

    Returns the batch-mean loss and its gradient w.r.t. each probability.
    """
    if not 0.0 < t < 1.0:
        raise ConfigError(f"t must lie strictly between 0 and 1, got {t}")
    p = np.clip(np.asarray(p_unknown, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    n = p.shape[0]
    loss = float(np.mean(-t * np.log(p) - (1.0 - t) * np.log(1.0 - p)))
    grad = (-t / p + (1.0 - t) / (1.0 - p)) / n
    return loss, grad


def softmax_column_backward(probs: np.ndarray, column: int, col_grad: np.ndarray) -> np.ndarray:
    """Chain a gradient on ``probs[:, column]`` back to the logits."""
    pc = probs[:, column]
    grad = -probs * (pc * col_grad)[:, None]
    grad[:, column] += pc * col_grad
    return grad


def binary_entropy(t: float) -> float:
    return -t * math.log(t) - (1.0 - t) * math.log(1.0 - t)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def sgd_momentum_step(params: Iterable[Param], lr: float, momentum: float = 0.9):
    """Velocity-form momentum SGD: ``v <- momentum*v - lr*g; w <- w + v``."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
    for p in params:
        v = p.slots.get("velocity")
        if v is None:
            v = p.slots["velocity"] = np.zeros_like(p.value)
        v *= momentum
        v -= lr * p.grad
        p.value += v
        p.zero_grad()


def adam_step(
    params: Iterable[Param],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
):
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise ConfigError(f"adam betas must lie in (0, 1), got {beta1}, {beta2}")
    if epsilon < 0:
        raise ConfigError(f"adam epsilon must be >= 0, got {epsilon}")
    for p in params:
        if "m" not in p.slots:
            p.slots["m"] = np.zeros_like(p.value)
            p.slots["v"] = np.zeros_like(p.value)
            p.slots["step"] = 0
        p.slots["step"] += 1
        step = p.slots["step"]
        m, v = p.slots["m"], p.slots["v"]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad**2
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + epsilon)
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------

LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def _named_loss(name: str, targets, t: float) -> LossFn:
    if name == "cross_entropy":
        return lambda out: cross_entropy(softmax(out), targets)
    if name == "adv_bce":
        def loss(out):
            probs = softmax(out)
            col = probs.shape[1] - 1
            value, p_grad = adv_bce(probs[:, col], t)
            return value, softmax_column_backward(probs, col, p_grad)
        return loss
    if name == "sum_squares":
        return lambda out: (0.5 * float(np.sum(out**2)), out.copy())
    raise ValidationError(f"unknown loss {name!r}")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true value is zero (e.g. a bias feeding
    batch-norm) from scoring finite-difference rounding noise as error.
    """
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(
    stack: LayerStack,
    loss: str | LossFn,
    batch,
    targets=None,
    eps: float = 1e-5,
    t: float = 0.5,
    include_input: bool = False,
) -> float:
    """Compare backward against central differences; return the worst relative error.

    Every parameter is perturbed by ``+-eps``. Gradients upstream of a
    ``GradReversal`` layer are compared against the derivative of the
    sign-folded loss, i.e. scaled by ``-weight`` for each reversal layer
    they pass through. Batch-norm running statistics and gradients already
    held by the stack are left untouched.
    """
    loss_fn = _named_loss(loss, targets, t) if isinstance(loss, str) else loss
    x = np.asarray(batch, dtype=np.float64)

    saved_grads = [p.grad.copy() for p in stack.params()]
    dropouts = [l for l in stack.layers if isinstance(l, Dropout)]
    for layer in dropouts:
        keep = 1.0 - layer.rate
        layer.fixed_mask = (layer.rng.random(x.shape[:1] + (_layer_in_width(stack, layer, x),)) < keep) / keep

    def objective(inp):
        out, _ = stack.forward(inp, update_stats=False)
        return loss_fn(out)[0]

    try:
        stack.zero_grad()
        out, trace = stack.forward(x, update_stats=False)
        _, out_grad = loss_fn(out)
        in_grad = stack.backward(trace, out_grad)

        # product of (-weight) over reversal layers downstream of each layer
        factors = [1.0] * len(stack.layers)
        running = 1.0
        for i in range(len(stack.layers) - 1, -1, -1):
            factors[i] = running
            layer = stack.layers[i]
            if isinstance(layer, GradReversal):
                running *= -layer.weight
        input_factor = running

        worst = 0.0
        for i, layer in enumerate(stack.layers):
            for p in layer.params():
                numeric = np.zeros_like(p.value)
                flat = p.value.reshape(-1)
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + eps
                    plus = objective(x)
                    flat[j] = orig - eps
                    minus = objective(x)
                    flat[j] = orig
                    numeric.reshape(-1)[j] = (plus - minus) / (2 * eps)
                worst = max(worst, relative_error(p.grad, factors[i] * numeric))
        if include_input:
            numeric = np.zeros_like(x)
            xf = x.copy()
            flat = xf.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                plus = objective(xf)
                flat[j] = orig - eps
                minus = objective(xf)
                flat[j] = orig
                numeric.reshape(-1)[j] = (plus - minus) / (2 * eps)
            worst = max(worst, relative_error(in_grad, input_factor * numeric))
        return worst
    finally:
        for p, g in zip(stack.params(), saved_grads):
            p.grad[...] = g
        for layer in dropouts:
            layer.fixed_mask = None


def _layer_in_width(stack: LayerStack, target: Layer, x: np.ndarray) -> int:
    width = x.shape[1]
    for layer in stack.layers:
        if layer is target:
            return width
        if layer.out_width is not None:
            width = layer.out_width
    raise ValueError("layer not in stack")
