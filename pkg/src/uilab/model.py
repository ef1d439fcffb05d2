"""Fully connected classifier with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector. Flatten order, layer by layer
from input to output: the weight matrix of shape (fan_out, fan_in) in
row-major order, then the bias vector of length fan_out.

Every routine here is built on two batched kernels, :func:`batch_forward`
and :func:`batch_backward`. They accept either one shared parameter vector
of shape ``(n,)`` applied to a batch of inputs, or one parameter row per
input, shape ``(B, n)``. The second form is what the attack uses to evaluate
many perturbed models at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from uilab.errors import TrainingError, ValidationError

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ArchSpec:
    input_dims: tuple[int, int, int]
    hidden_widths: tuple[int, ...] = (256, 64, 32)
    num_classes: int = 4
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ValidationError(f"input_dims must be 3 positive ints, got {self.input_dims}")
        if any(w < 1 for w in self.hidden_widths):
            raise ValidationError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")

    @property
    def input_size(self) -> int:
        h, w, c = self.input_dims
        return h * w * c

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for each affine layer."""
        widths = [self.input_size, *self.hidden_widths, self.num_classes]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def num_params(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.layer_sizes)


@dataclass
class ParamVector:
    values: np.ndarray
    arch: ArchSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.arch.num_params,):
            raise ValidationError(
                f"parameter vector has shape {self.values.shape}, "
                f"arch expects ({self.arch.num_params},)"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("parameter vector contains non-finite entries")

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.arch)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.arch)


@dataclass
class Sample:
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.label = int(self.label)
        if np.any(self.pixels < 0.0) or np.any(self.pixels > 1.0):
            raise ValidationError("sample pixels must lie in [0, 1]")

    @property
    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C)
    labels: np.ndarray  # (N,)

    def __len__(self):
        return len(self.labels)

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]))

    @property
    def flat_images(self) -> np.ndarray:
        return self.images.reshape(len(self.labels), -1)


# ---------------------------------------------------------------------------
# flat parameter layout


def layer_slices(arch: ArchSpec) -> list[tuple[slice, slice, int, int]]:
    out = []
    off = 0
    for fan_in, fan_out in arch.layer_sizes:
        w = slice(off, off + fan_in * fan_out)
        off += fan_in * fan_out
        b = slice(off, off + fan_out)
        off += fan_out
        out.append((w, b, fan_in, fan_out))
    return out


def unflatten(arch: ArchSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``[(W, b), ...]``; leading batch axes of ``values`` are kept."""
    lead = values.shape[:-1]
    return [
        (values[..., ws].reshape(*lead, fo, fi), values[..., bs])
        for ws, bs, fi, fo in layer_slices(arch)
    ]


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for W, b in layers:
        lead = W.shape[:-2]
        parts.append(W.reshape(*lead, -1))
        parts.append(b.reshape(*lead, -1))
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# batched kernels


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_deriv(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def _affine(W, b, a):
    if W.ndim == 2:
        return a @ W.T + b
    return np.einsum("boi,bi->bo", W, a) + b


def batch_forward(arch: ArchSpec, values: np.ndarray, X: np.ndarray):
    """Logits for a batch. Returns ``(logits, cache)`` with logits shape (B, K)."""
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    if X.shape[1] != arch.input_size:
        raise ValidationError(f"input has {X.shape[1]} features, arch expects {arch.input_size}")
    if values.shape[-1] != arch.num_params:
        raise ValidationError(f"parameter length {values.shape[-1]} != {arch.num_params}")
    if values.ndim == 2 and values.shape[0] != X.shape[0]:
        raise ValidationError("per-row parameters need one row per input")
    layers = unflatten(arch, values)
    acts = [X]
    pre = []
    a = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = _affine(W, b, a)
        pre.append(z)
        a = z if i == last else _act(arch.activation, z)
        acts.append(a)
    return a, (layers, acts, pre)


def batch_backward(arch: ArchSpec, cache, dlogits: np.ndarray, per_sample: bool = False,
                   want_params: bool = True, want_input: bool = False):
    """Pull a logit seed back through the network.

    Shared parameters give a summed parameter gradient of shape (n,) unless
    ``per_sample``; per-row parameters always give (B, n). Returns
    ``(param_grad or None, input_grad or None)``.
    """
    layers, acts, pre = cache
    shared = layers[0][0].ndim == 2
    rows = per_sample or not shared
    grads = []
    dz = dlogits
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_in = acts[i]
        if want_params:
            if rows:
                grads.append((dz[:, :, None] * a_in[:, None, :], dz))
            else:
                grads.append((dz.T @ a_in, dz.sum(axis=0)))
        if i == 0 and not want_input:
            break
        da = dz @ W if shared else np.einsum("bo,boi->bi", dz, W)
        if i > 0:
            dz = da * _act_deriv(arch.activation, pre[i - 1], acts[i])
        else:
            dX = da
    pgrad = flatten(grads[::-1]) if want_params else None
    return pgrad, (dX if want_input else None)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def batch_loss_grad(arch: ArchSpec, values: np.ndarray, X: np.ndarray, y: np.ndarray,
                    per_sample: bool = False, want_params: bool = True,
                    want_input: bool = False, reduce: str = "sum"):
    """Cross-entropy losses (B,) and their gradients.

    ``reduce='mean'`` scales the seed by 1/B, which is what training wants.
    """
    y = np.asarray(y, dtype=np.int64)
    logits, cache = batch_forward(arch, values, X)
    lsm = log_softmax(logits)
    losses = -lsm[np.arange(len(y)), y]
    seed = np.exp(lsm)
    seed[np.arange(len(y)), y] -= 1.0
    if reduce == "mean":
        seed /= len(y)
    pg, xg = batch_backward(arch, cache, seed, per_sample=per_sample,
                            want_params=want_params, want_input=want_input)
    return losses, pg, xg


# ---------------------------------------------------------------------------
# single-sample API


def _pixels(arch: ArchSpec, x) -> np.ndarray:
    px = x.pixels if isinstance(x, Sample) else np.asarray(x, dtype=np.float64)
    if px.size != arch.input_size:
        raise ValidationError(f"input has {px.size} values, arch expects {arch.input_size}")
    return px.reshape(1, -1)


def _label(x, y):
    if y is None:
        if not isinstance(x, Sample):
            raise ValidationError("label required when x is a raw pixel array")
        return x.label
    return int(y)


def _check_label(arch, y):
    if not 0 <= y < arch.num_classes:
        raise ValidationError(f"label {y} outside [0, {arch.num_classes})")


def init_params(arch: ArchSpec, seed: int) -> ParamVector:
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in arch.layer_sizes:
        W = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        layers.append((W, np.zeros(fan_out)))
    return ParamVector(flatten(layers), arch)


def forward(theta: ParamVector, x) -> np.ndarray:
    logits, _ = batch_forward(theta.arch, theta.values, _pixels(theta.arch, x))
    return logits[0]


def loss(theta: ParamVector, x, y: int | None = None) -> float:
    y = _label(x, y)
    _check_label(theta.arch, y)
    logits = forward(theta, x)
    return float(-log_softmax(logits)[y])


def grad_params(theta: ParamVector, x, y: int | None = None) -> np.ndarray:
    y = _label(x, y)
    _check_label(theta.arch, y)
    _, g, _ = batch_loss_grad(theta.arch, theta.values, _pixels(theta.arch, x), [y])
    return g


def grad_input(theta: ParamVector, x, y: int | None = None) -> np.ndarray:
    y = _label(x, y)
    _check_label(theta.arch, y)
    _, _, gx = batch_loss_grad(theta.arch, theta.values, _pixels(theta.arch, x), [y],
                               want_params=False, want_input=True)
    return gx[0]


def param_vjp(theta: ParamVector, x, seed_vec) -> np.ndarray:
    """Gradient of <f_theta(x), seed_vec> with respect to theta."""
    seed_vec = np.asarray(seed_vec, dtype=np.float64)
    if seed_vec.shape != (theta.arch.num_classes,):
        raise ValidationError(f"seed vector must have shape ({theta.arch.num_classes},)")
    _, cache = batch_forward(theta.arch, theta.values, _pixels(theta.arch, x))
    g, _ = batch_backward(theta.arch, cache, seed_vec[None, :])
    return g


def predict(theta: ParamVector, X: np.ndarray) -> np.ndarray:
    logits, _ = batch_forward(theta.arch, theta.values, X)
    return logits.argmax(axis=1)


def accuracy(theta: ParamVector, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValidationError("accuracy of an empty dataset")
    return float(np.mean(predict(theta, dataset.flat_images) == dataset.labels))


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    step_size: float
    size: int
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.kind!r}")
        if not np.all(np.asarray(self.step_size) > 0):
            raise ValidationError("step size must be positive")
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def optimizer_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray):
    """One descent step. Returns ``(new_state, new_params)``; inputs are untouched."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape[-1] != state.size:
        raise ValidationError(
            f"optimizer length mismatch: params {params.shape}, grad {grad.shape}, state {state.size}"
        )
    t = state.t + 1
    if state.kind == "sgd":
        new = OptimizerState(state.kind, state.step_size, state.size, state.beta1,
                             state.beta2, state.epsilon, t, state.m, state.v)
        return new, params - state.step_size * grad
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = OptimizerState(state.kind, state.step_size, state.size, state.beta1,
                         state.beta2, state.epsilon, t, m, v)
    return new, params - state.step_size * m_hat / (np.sqrt(v_hat) + state.epsilon)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 2e-3
    epochs: int = 40
    batch: int = 32
    seed: int = 0
    acc_floor: float = 0.9


def train(dataset: Dataset, arch: ArchSpec, cfg: TrainConfig, seed: int | None = None) -> ParamVector:
    """Mini-batch cross-entropy training from :func:`init_params`.

    Raises :class:`TrainingError` if the final training accuracy is below
    ``cfg.acc_floor`` (skipped when ``epochs == 0``).
    """
    seed = cfg.seed if seed is None else seed
    theta = init_params(arch, seed)
    if cfg.epochs == 0:
        return theta
    rng = np.random.default_rng([seed, 1])
    X = dataset.flat_images
    y = dataset.labels
    values = theta.values
    state = OptimizerState(cfg.optimizer, cfg.lr, arch.num_params)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch):
            idx = order[start:start + cfg.batch]
            _, g, _ = batch_loss_grad(arch, values, X[idx], y[idx], reduce="mean")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in epoch {epoch}")
            state, values = optimizer_step(state, values, g)
    theta = ParamVector(values, arch)
    acc = accuracy(theta, dataset)
    if acc < cfg.acc_floor:
        raise TrainingError(f"training accuracy {acc:.4f} below floor {cfg.acc_floor}")
    return theta
