"""Minimal reverse-mode autodiff and the model pieces built on it.

Everything runs in float64 numpy. The graph is rebuilt on every forward pass;
backward() walks it in reverse topological order. Each op checks its output
for NaN/inf and raises NumericsError immediately, so a diverging run fails at
the op that produced the bad value instead of three epochs later.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericsError, PreconditionError, ShapeError, StateError

CHECKPOINT_MAGIC = b"HSCK"
CHECKPOINT_VERSION = 1

NUM_CLASSES = 3


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # -- graph construction ---------------------------------------------

    def _lift(self, other) -> "Tensor":
        # plain numbers adopt this tensor's dtype so float32 graphs stay float32
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def _result(self, data: np.ndarray, parents: tuple["Tensor", ...],
                backward, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericsError(f"non-finite values produced by {op}")
        out = Tensor(data)
        if any(p.requires_grad or p._parents for p in parents):
            out._parents = parents
            out._backward = backward
        return out

    def __add__(self, other):
        other = self._lift(other)
        def backward(g, a=self, b=other):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))
        return self._result(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        def backward(g, a=self):
            a._accumulate(-g)
        return self._result(-self.data, (self,), backward, "neg")

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        def backward(g, a=self, b=other):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))
        return self._result(self.data * other.data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        def backward(g, a=self, b=other):
            a._accumulate(_unbroadcast(g / b.data, a.shape))
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return self._result(self.data / other.data, (self, other), backward, "div")

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise PreconditionError("only scalar exponents are supported")
        def backward(g, a=self, e=exponent):
            a._accumulate(g * e * a.data ** (e - 1))
        return self._result(self.data ** exponent, (self,), backward, "pow")

    def __matmul__(self, other):
        other = self._lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(f"matmul expects 2-d operands, got "
                             f"{self.data.shape} @ {other.data.shape}")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {self.data.shape} @ {other.data.shape}")
        def backward(g, a=self, b=other):
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)
        return self._result(self.data @ other.data, (self, other), backward, "matmul")

    def sum(self, axis=None, keepdims: bool = False):
        def backward(g, a=self, ax=axis, kd=keepdims):
            if ax is not None and not kd:
                g = np.expand_dims(g, ax)
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        return self._result(self.data.sum(axis=axis, keepdims=keepdims),
                            (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def relu(self):
        def backward(g, a=self):
            a._accumulate(g * (a.data > 0))
        return self._result(np.maximum(self.data, 0.0), (self,), backward, "relu")

    def exp(self):
        out_data = np.exp(self.data)
        def backward(g, a=self, d=out_data):
            a._accumulate(g * d)
        return self._result(out_data, (self,), backward, "exp")

    def log(self):
        def backward(g, a=self):
            a._accumulate(g / a.data)
        return self._result(np.log(self.data), (self,), backward, "log")

    # -- backward pass ----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.requires_grad or self._parents:
            self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        if self._backward is None:
            raise StateError("backward() on a tensor with no recorded operations")
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log softmax. The max shift is a detached constant, which is
    fine: subtracting any constant per row leaves the result (and its
    gradient) unchanged."""
    if logits.data.ndim != 2:
        raise ShapeError(f"log_softmax expects (batch, classes), got {logits.data.shape}")
    shift = logits - Tensor(logits.data.max(axis=1, keepdims=True))
    return shift - shift.exp().sum(axis=1, keepdims=True).log()


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray,
                           weights: np.ndarray) -> Tensor:
    """Class-weighted cross entropy, normalized by the sum of the applied
    weights so the loss scale does not drift with batch composition."""
    labels = np.asarray(labels)
    if logits.data.shape[0] != labels.shape[0]:
        raise ShapeError(f"{logits.data.shape[0]} logits rows vs {labels.shape[0]} labels")
    n, k = logits.data.shape
    if labels.min() < 0 or labels.max() >= k:
        raise PreconditionError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    dtype = logits.data.dtype
    onehot = np.zeros((n, k), dtype=dtype)
    onehot[np.arange(n), labels] = 1.0
    per_sample = np.asarray(weights, dtype=dtype)[labels]
    picked = (logp * Tensor(onehot)).sum(axis=1)
    return -(picked * Tensor(per_sample)).sum() * (1.0 / float(per_sample.sum()))


# -- model pieces ----------------------------------------------------------


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float64):
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = parameter(
            rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(dtype))
        self.bias = parameter(np.zeros(out_dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class BatchNorm:
    """1-d batch norm over the feature axis. Normalization uses the biased
    batch variance; the running-variance buffer is updated with the unbiased
    estimate, matching the usual train/eval convention."""

    MOMENTUM = 0.1
    EPS = 1e-5

    def __init__(self, dim: int, dtype=np.float64):
        self.dim = dim
        self.gamma = parameter(np.ones(dim, dtype=dtype))
        self.beta = parameter(np.zeros(dim, dtype=dtype))
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.dim:
            raise ShapeError(f"batch norm expects (batch, {self.dim}), got {x.data.shape}")
        if training:
            n = x.data.shape[0]
            if n < 2:
                raise PreconditionError(
                    "batch norm needs at least 2 samples in training mode")
            mean = x.mean(axis=0)
            var = ((x - mean) * (x - mean)).mean(axis=0)
            dtype = self.running_mean.dtype.type
            self.running_mean = (dtype(1 - self.MOMENTUM) * self.running_mean
                                 + dtype(self.MOMENTUM) * mean.data)
            self.running_var = (dtype(1 - self.MOMENTUM) * self.running_var
                                + dtype(self.MOMENTUM) * var.data * dtype(n / (n - 1)))
            xhat = (x - mean) / ((var + self.EPS) ** 0.5)
        else:
            xhat = ((x - Tensor(self.running_mean))
                    / Tensor(np.sqrt(self.running_var + self.EPS)))
        return xhat * self.gamma + self.beta


class HeadModel:
    """Classification head: batch norm over the incoming features, then a
    single linear projection to the three class logits."""

    def __init__(self, feature_dim: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.feature_dim = feature_dim
        self.norm = BatchNorm(feature_dim, dtype)
        self.proj = Linear(feature_dim, NUM_CLASSES, rng, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.proj(self.norm(x, training))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("head.norm.gamma", self.norm.gamma),
                ("head.norm.beta", self.norm.beta),
                ("head.proj.weight", self.proj.weight),
                ("head.proj.bias", self.proj.bias)]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [("head.norm.running_mean", self.norm.running_mean),
                ("head.norm.running_var", self.norm.running_var)]


class MlpBackbone:
    """Small fully connected stack with ReLU after every layer."""

    def __init__(self, input_dim: int, hidden: tuple[int, ...],
                 rng: np.random.Generator, dtype=np.float64):
        if not hidden:
            raise PreconditionError("mlp backbone needs at least one hidden layer")
        self.input_dim = input_dim
        self.hidden = tuple(hidden)
        self.layers = []
        dims = (input_dim,) + self.hidden
        for a, b in zip(dims[:-1], dims[1:]):
            self.layers.append(Linear(a, b, rng, dtype))

    @property
    def output_dim(self) -> int:
        return self.hidden[-1]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x).relu()
        return x

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"backbone.{i}.weight", layer.weight))
            out.append((f"backbone.{i}.bias", layer.bias))
        return out


class Network:
    """Optional MLP over the input features followed by the BN+linear head.
    With backbone=None the head reads the features directly (the linear-probe
    configuration for precomputed embeddings)."""

    def __init__(self, input_dim: int, hidden: tuple[int, ...] | None,
                 rng: np.random.Generator, dtype=np.float64):
        self.input_dim = input_dim
        self.dtype = np.dtype(dtype)
        self.backbone = MlpBackbone(input_dim, hidden, rng, dtype) if hidden else None
        head_dim = self.backbone.output_dim if self.backbone else input_dim
        self.head = HeadModel(head_dim, rng, dtype)
        self.training = True

    def train(self):
        self.training = True

    def eval(self):
        self.training = False

    def forward(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if t.data.ndim != 2 or t.data.shape[1] != self.input_dim:
            raise ShapeError(f"expected (batch, {self.input_dim}) input, got {t.data.shape}")
        if self.backbone is not None:
            t = self.backbone(t)
        return self.head(t, self.training)

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            return self.forward(x).data
        finally:
            self.training = was_training

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = self.backbone.parameters() if self.backbone else []
        return out + self.head.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.parameters()}
        state.update({name: buf.copy() for name, buf in self.head.buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = [name for name, _ in self.parameters()] \
            + [name for name, _ in self.head.buffers()]
        if set(state) != set(expected):
            raise PreconditionError(
                f"state dict keys do not match model: missing "
                f"{sorted(set(expected) - set(state))}, unexpected "
                f"{sorted(set(state) - set(expected))}")
        for name, t in self.parameters():
            if state[name].shape != t.data.shape:
                raise ShapeError(f"{name}: shape {state[name].shape} does not match "
                                 f"{t.data.shape}")
            t.data = np.asarray(state[name], dtype=self.dtype).copy()
        self.head.norm.running_mean = np.asarray(
            state["head.norm.running_mean"], dtype=self.dtype).copy()
        self.head.norm.running_var = np.asarray(
            state["head.norm.running_var"], dtype=self.dtype).copy()

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None


# -- optimizer and schedule -------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay: the decay multiplies the parameter
    directly and never enters the moment estimates."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: list[tuple[str, Tensor]], weight_decay: float = 0.01):
        self.params = params
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1c = 1.0 - self.BETA1 ** self.step_count
        b2c = 1.0 - self.BETA2 ** self.step_count
        for name, t in self.params:
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(grad)):
                raise NumericsError(f"non-finite gradient for parameter {name}")
            t.data = t.data * (1.0 - lr * self.weight_decay)
            self.m[name] = self.BETA1 * self.m[name] + (1 - self.BETA1) * grad
            self.v[name] = self.BETA2 * self.v[name] + (1 - self.BETA2) * grad * grad
            t.data = t.data - lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c)
                                                           + self.EPS)


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float
    steps_per_epoch: int
    warmup_epochs: int = 5
    total_epochs: int = 50

    def __post_init__(self):
        if self.base_lr <= 0:
            raise PreconditionError(f"base_lr must be positive, got {self.base_lr}")
        if self.steps_per_epoch < 1:
            raise PreconditionError(f"steps_per_epoch must be >= 1, got "
                                    f"{self.steps_per_epoch}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise PreconditionError(
                f"need 0 <= warmup_epochs < total_epochs, got "
                f"{self.warmup_epochs} / {self.total_epochs}")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(schedule: ScheduleConfig, step: int) -> float:
    """Linear warmup from zero, then cosine decay to zero over the remaining
    steps. `step` counts optimizer updates taken so far (0-based), so the lr
    peaks exactly when `step` equals the warmup step count."""
    if not 0 <= step < schedule.total_steps:
        raise PreconditionError(f"step {step} outside [0, {schedule.total_steps})")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- gradient checking --------------------------------------------------------


def gradcheck(loss_fn, params: list[Tensor], h: float = 1e-3) -> float:
    """Compare analytic gradients against central finite differences.

    Returns the worst relative error over every element of every parameter.
    The denominator is max(|analytic|, |numeric|, 1.0): the unit floor keeps
    finite-difference truncation noise on near-zero elements (order h^2 times
    the local curvature) from masquerading as gradient defects, while any
    systematic error still shows up orders of magnitude above 1e-4 because
    the cross-entropy loss and its gradients are O(1) on these models.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(an_flat[i]), abs(numeric), 1.0)
            worst = max(worst, abs(an_flat[i] - numeric) / denom)
    return worst


def _sample_gradcheck_case(master_seed: int, trial: int, rng: np.random.Generator,
                           h: float):
    """Draw one random model and batch for gradient checking.

    Finite differences are only trustworthy where the loss is smooth across
    the whole stencil, so inputs are redrawn until (a) no hidden unit's
    pre-activation sits within the step of its ReLU kink and (b) every
    feature entering batch norm has healthy batch variance. Models with a
    hidden unit that is dead for almost any input are redrawn too.
    """
    d = int(rng.integers(2, 17))
    n = int(rng.integers(4, 9))
    hidden = None if trial % 2 == 0 else (int(rng.integers(2, 9)),)
    for attempt in range(1000):
        net = Network(d, hidden, np.random.default_rng([master_seed, trial, attempt]))
        if net.backbone is not None:
            # bias the first layer toward active units
            net.backbone.layers[0].bias.data += 0.5
        x = rng.standard_normal((n, d))
        if net.backbone is None:
            if x.std(axis=0).min() >= 0.3:
                return net, x
            continue
        layer = net.backbone.layers[0]
        z = x @ layer.weight.data + layer.bias.data
        margin = 2.0 * h * max(1.0, np.abs(x).max())
        if np.abs(z).min() > margin and np.maximum(z, 0.0).std(axis=0).min() >= 0.3:
            return net, x
    raise StateError(f"could not sample a well-conditioned gradcheck case "
                     f"(seed {master_seed}, trial {trial})")


def gradcheck_suite(trials: int = 50, master_seed: int = 0, h: float = 1e-3) -> float:
    """Run gradcheck over `trials` random configurations, alternating between
    plain-head and MLP models. Returns the worst relative error seen."""
    rng = np.random.default_rng(master_seed)
    worst = 0.0
    for trial in range(trials):
        net, x = _sample_gradcheck_case(master_seed, trial, rng, h)
        y = rng.integers(0, NUM_CLASSES, size=x.shape[0])
        w = rng.uniform(0.5, 2.0, size=NUM_CLASSES)
        params = [t for _, t in net.parameters()]

        def loss_fn(net=net, x=x, y=y, w=w):
            net.train()
            return weighted_cross_entropy(net.forward(x), y, w)

        worst = max(worst, gradcheck(loss_fn, params, h=h))
    return worst


# -- checkpoint serialization -------------------------------------------------


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Binary checkpoint: magic, version, header length, canonical JSON header
    (tensor names and shapes plus free-form metadata), then the tensor values
    as little-endian float32 in header order."""
    header = {
        "meta": meta,
        "tensors": [{"name": name, "shape": list(arr.shape)}
                    for name, arr in tensors.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             len(header_bytes)))
        fh.write(header_bytes)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: too short for a checkpoint")
    magic, version, header_len = struct.unpack_from("<4sII", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if 12 + header_len > len(raw):
        raise FormatError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if "tensors" not in header or "meta" not in header:
        raise FormatError(f"{path}: header missing 'tensors' or 'meta'")

    tensors: dict[str, np.ndarray] = {}
    off = 12 + header_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + count * 4
        if end > len(raw):
            raise FormatError(f"{path}: payload truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
        off = end
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after payload")
    return header["meta"], tensors
