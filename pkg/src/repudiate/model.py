"""Small-model numerics: LogReg / MLP / SmallCNN with exact backprop and SGD variants.

Parameters live in one flat float64 vector.  The layout per layer is the
weight matrix (row-major, ``fan_in x fan_out``) followed by the bias.

All gradient code goes through :func:`stacked_loss_grads`, which evaluates a
stack of equally sized batches at once.  Single-batch gradients are the
``m = 1`` case of the same routine, so training, replay and candidate scoring
share one summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Dataset, MiniBatchSpec, schedule_for_steps

KINDS = ("logreg", "mlp", "cnn")
SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    widths: tuple[int, ...]
    channels: tuple[int, ...] = ()
    input_shape: tuple[int, int, int] | None = None
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.input_shape is not None:
            object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError("need at least input and output width, all >= 1")
        if self.widths[-1] < 2:
            raise ValueError("need at least 2 classes")
        if self.kind == "logreg" and len(self.widths) != 2:
            raise ValueError("logreg takes widths (d, c)")
        if self.kind == "cnn":
            if self.input_shape is None or not self.channels or min(self.channels) < 1:
                raise ValueError("cnn needs input_shape and a non-empty channel plan")
            h, w, _ = self.input_shape
            for _ in self.channels:
                h, w = (h - 2) // 2, (w - 2) // 2
                if h < 1 or w < 1:
                    raise ValueError("input too small for the channel plan")
            if self.widths[0] != math.prod(self.input_shape):
                raise ValueError("cnn widths[0] must equal the flattened input size")

    @classmethod
    def logreg(cls, d: int, c: int = 2, bias: bool = True) -> ModelSpec:
        return cls("logreg", (d, c), bias=bias)

    @classmethod
    def mlp(cls, widths) -> ModelSpec:
        return cls("mlp", tuple(widths))

    @classmethod
    def cnn(cls, channels, input_shape, classes: int) -> ModelSpec:
        return cls("cnn", (math.prod(input_shape), classes), tuple(channels), tuple(input_shape))

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def classes(self) -> int:
        return self.widths[-1]

    @property
    def binary_logreg(self) -> bool:
        return self.kind == "logreg" and self.classes == 2

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) list of parameter blocks."""
        if self.binary_logreg:
            return [("w", (self.in_dim,))] + ([("b", (1,))] if self.bias else [])
        blocks: list[tuple[str, tuple[int, ...]]] = []
        dense_in = self.widths
        if self.kind == "cnn":
            h, w, cin = self.input_shape
            for i, cout in enumerate(self.channels):
                blocks += [(f"K{i}", (3, 3, cin, cout)), (f"kb{i}", (cout,))]
                h, w, cin = (h - 2) // 2, (w - 2) // 2, cout
            dense_in = (h * w * cin, self.classes)
        for i, (a, b) in enumerate(zip(dense_in[:-1], dense_in[1:])):
            blocks.append((f"W{i}", (a, b)))
            if self.bias or self.kind != "logreg":
                blocks.append((f"b{i}", (b,)))
        return blocks

    @property
    def param_count(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())

    def to_json(self) -> dict:
        out = {"kind": self.kind, "widths": list(self.widths), "bias": self.bias}
        if self.kind == "cnn":
            out.update(channels=list(self.channels), input_shape=list(self.input_shape))
        return out

    @classmethod
    def from_json(cls, obj: dict) -> ModelSpec:
        shape = obj.get("input_shape")
        return cls(obj["kind"], tuple(obj["widths"]), tuple(obj.get("channels", ())),
                   tuple(shape) if shape else None, obj.get("bias", True))


@dataclass(frozen=True)
class Hyperparams:
    step_size: float
    batch_size: int
    total_steps: int
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    lr_min: float = 0.0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be >= 1")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be >= 0")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    @property
    def plain(self) -> bool:
        """True when the update is exactly θ ← θ − η·grad with constant η."""
        return self.momentum == 0 and self.weight_decay == 0 and self.lr_schedule == "constant"

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> Hyperparams:
        return cls(**obj)


@dataclass
class OptimizerState:
    velocity: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> OptimizerState:
        return cls(np.zeros(size), 0)


# ------------------------------------------------------------------ helpers


def unpack(params: np.ndarray, spec: ModelSpec) -> dict[str, np.ndarray]:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise ValueError(f"expected {spec.param_count} parameters, got {params.shape}")
    out, pos = {}, 0
    for name, shape in spec.layout():
        size = math.prod(shape)
        out[name] = params[pos:pos + size].reshape(shape)
        pos += size
    return out


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every block of a layer.

    Values are rounded to float32 so θ^(0) survives the on-disk format exactly.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    fan_in = None
    for name, shape in spec.layout():
        if name.startswith(("K",)):
            fan_in = shape[0] * shape[1] * shape[2]
        elif name.startswith(("W", "w")):
            fan_in = shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=math.prod(shape)))
    return np.concatenate(chunks).astype(np.float32).astype(np.float64)


def _check_inputs(spec: ModelSpec, x: np.ndarray) -> None:
    if x.shape[-1] != spec.in_dim:
        raise ValueError(f"input dimension {x.shape[-1]} does not match model input {spec.in_dim}")


def _conv_patches(a: np.ndarray) -> np.ndarray:
    # a: (N, H, W, C) -> (N, H-2, W-2, C, 3, 3)
    return sliding_window_view(a, (3, 3), axis=(1, 2))


def _avgpool(a: np.ndarray) -> np.ndarray:
    n, h, w, c = a.shape
    h2, w2 = h // 2, w // 2
    return a[:, :2 * h2, :2 * w2].reshape(n, h2, 2, w2, 2, c).mean(axis=(2, 4))


def _avgpool_back(g: np.ndarray, shape) -> np.ndarray:
    n, h, w, c = shape
    out = np.zeros(shape)
    up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
    out[:, :up.shape[1], :up.shape[2]] = up
    return out


def _dense_forward(p, n_layers, a):
    acts, pres = [a], []
    for i in range(n_layers):
        z = a @ p[f"W{i}"]
        if f"b{i}" in p:
            z = z + p[f"b{i}"]
        pres.append(z)
        a = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(a)
    return acts, pres


def _cnn_features(p, spec, x):
    """Conv stack forward on ``(N, d)`` rows; returns flat features and caches."""
    a = x.reshape(-1, *spec.input_shape)
    cache = []
    for i in range(len(spec.channels)):
        patches = _conv_patches(a)
        z = np.einsum("nhwcij,ijco->nhwo", patches, p[f"K{i}"], optimize=True) + p[f"kb{i}"]
        r = np.maximum(z, 0.0)
        cache.append((a, patches, z))
        a = _avgpool(r)
    return a.reshape(a.shape[0], -1), cache


def logits(params: np.ndarray, spec: ModelSpec, inputs) -> np.ndarray:
    """Class logits ``(N, c)``; binary LogReg returns ``[0, w·x + b]``."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    _check_inputs(spec, x)
    p = unpack(params, spec)
    if spec.binary_logreg:
        z = x @ p["w"] + (p["b"][0] if "b" in p else 0.0)
        return np.stack([np.zeros_like(z), z], axis=1)
    if spec.kind == "cnn":
        x, _ = _cnn_features(p, spec, x)
    n_layers = sum(1 for k in p if k.startswith("W"))
    acts, _ = _dense_forward(p, n_layers, x)
    return acts[-1]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))


def forward(params: np.ndarray, spec: ModelSpec, inputs) -> np.ndarray:
    """Class probabilities, one simplex row per input."""
    return np.exp(_log_softmax(logits(params, spec, inputs)))


def per_sample_loss(params: np.ndarray, spec: ModelSpec, inputs, labels) -> np.ndarray:
    logp = _log_softmax(logits(params, spec, inputs))
    return -logp[np.arange(len(logp)), np.asarray(labels)]


def logit_confidence(params: np.ndarray, spec: ModelSpec, inputs, labels) -> np.ndarray:
    """Stable ``log(p_y / (1 - p_y))`` per sample."""
    z = logits(params, spec, inputs)
    labels = np.asarray(labels)
    rows = np.arange(len(z))
    zy = z[rows, labels]
    others = z.copy()
    others[rows, labels] = -np.inf
    m = others.max(axis=1)
    return zy - m - np.log(np.exp(others - m[:, None]).sum(axis=1))


# ------------------------------------------------------------- gradients


def stacked_loss_grads(params: np.ndarray, spec: ModelSpec, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient for each batch of a stack.

    ``x`` has shape ``(m, b, d)`` and ``y`` shape ``(m, b)``.  Returns
    ``(losses (m,), grads (m, P))``.  No weight decay here.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    m, b, _ = x.shape
    _check_inputs(spec, x)
    p = unpack(params, spec)

    if spec.binary_logreg:
        z = x @ p["w"]
        if "b" in p:
            z = z + p["b"][0]
        losses = (np.logaddexp(0.0, z) - y * z).sum(axis=1) / b
        r = (sigmoid(z) - y) / b
        gw = np.matmul(r[:, None, :], x)[:, 0, :]
        parts = [gw]
        if "b" in p:
            parts.append(r.sum(axis=1)[:, None])
        return losses, np.concatenate(parts, axis=1)

    n_layers = sum(1 for k in p if k.startswith("W"))
    flat = x
    cache = None
    if spec.kind == "cnn":
        feats, cache = _cnn_features(p, spec, x.reshape(m * b, -1))
        flat = feats.reshape(m, b, -1)
    acts, pres = _dense_forward(p, n_layers, flat)
    logp = _log_softmax(acts[-1])
    picked = np.take_along_axis(logp, y[..., None], axis=2)[..., 0]
    losses = -picked.sum(axis=1) / b
    delta = np.exp(logp)
    np.put_along_axis(delta, y[..., None], np.take_along_axis(delta, y[..., None], axis=2) - 1.0, axis=2)
    delta /= b

    dense_grads = {}
    for i in reversed(range(n_layers)):
        dense_grads[f"W{i}"] = np.matmul(acts[i].transpose(0, 2, 1), delta)
        if f"b{i}" in p:
            dense_grads[f"b{i}"] = delta.sum(axis=1)
        if i > 0 or cache is not None:
            delta = delta @ p[f"W{i}"].T
            if i > 0:
                delta = delta * (pres[i - 1] > 0)

    conv_grads = {}
    if cache is not None:
        g = delta.reshape(m * b, -1)
        for i in reversed(range(len(spec.channels))):
            a_in, patches, z = cache[i]
            r_shape = z.shape
            g = g.reshape(r_shape[0], r_shape[1] // 2, r_shape[2] // 2, r_shape[3])
            gz = _avgpool_back(g, r_shape) * (z > 0)
            gz_m = gz.reshape(m, b, *gz.shape[1:])
            pt_m = patches.reshape(m, b, *patches.shape[1:])
            conv_grads[f"K{i}"] = np.einsum("mbhwcij,mbhwo->mijco", pt_m, gz_m, optimize=True)
            conv_grads[f"kb{i}"] = gz_m.sum(axis=(1, 2, 3))
            if i > 0:
                ga = np.zeros(a_in.shape)
                ho, wo = gz.shape[1], gz.shape[2]
                kern = p[f"K{i}"]
                for di in range(3):
                    for dj in range(3):
                        ga[:, di:di + ho, dj:dj + wo, :] += gz @ kern[di, dj].T
                g = ga

    grads = {**dense_grads, **conv_grads}
    out = np.concatenate([grads[name].reshape(m, -1) for name, _ in spec.layout()], axis=1)
    return losses, out


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def stack_batches(dataset: Dataset, batches: list[MiniBatchSpec]):
    """Gather equally sized batches into ``(m, b, d)`` / ``(m, b)`` arrays."""
    xs, ys = zip(*(dataset.gather(bt) for bt in batches))
    return np.stack(xs), np.stack(ys)


def loss_and_grad(params: np.ndarray, spec: ModelSpec, batch: MiniBatchSpec, dataset: Dataset,
                  weight_decay: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean cross entropy (+ wd·‖θ‖²) of one batch and its gradient."""
    batch.validate(dataset.n)
    x, y = dataset.gather(batch)
    losses, grads = stacked_loss_grads(params, spec, x[None], y[None])
    loss, grad = float(losses[0]), grads[0]
    if weight_decay:
        loss += weight_decay * float(params @ params)
        grad = grad + 2.0 * weight_decay * params
    return loss, grad


def batch_grads(params: np.ndarray, spec: ModelSpec, batches: list[MiniBatchSpec], dataset: Dataset,
                weight_decay: float = 0.0) -> np.ndarray:
    """Gradients ``(m, P)`` of several equally sized batches, same numerics as loss_and_grad."""
    for bt in batches:
        bt.validate(dataset.n)
    x, y = stack_batches(dataset, batches)
    _, grads = stacked_loss_grads(params, spec, x, y)
    if weight_decay:
        grads = grads + 2.0 * weight_decay * params
    return grads


def finite_diff_grad(fn, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of the parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    out = np.empty_like(params)
    for i in range(params.size):
        up = params.copy()
        dn = params.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (fn(up) - fn(dn)) / (2 * h)
    return out


# --------------------------------------------------------------- updates


def sgd_step(params: np.ndarray, grad: np.ndarray, step_size: float) -> np.ndarray:
    return params - step_size * grad


def lr_at(t: int, hp: Hyperparams) -> float:
    """Learning rate after ``t`` completed steps."""
    if t < 0 or t > hp.total_steps:
        raise ValueError(f"step {t} outside [0, {hp.total_steps}]")
    if hp.lr_schedule == "constant":
        return hp.step_size
    return hp.lr_min + 0.5 * (hp.step_size - hp.lr_min) * (1.0 + math.cos(math.pi * t / hp.total_steps))


def modified_sgd_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState,
                      hp: Hyperparams) -> tuple[np.ndarray, OptimizerState]:
    """Heavy-ball step: v ← m·v + g, θ ← θ − lr(t)·v."""
    if state.velocity.shape != params.shape:
        raise ValueError("velocity length does not match parameters")
    velocity = hp.momentum * state.velocity + grad
    new = params - lr_at(state.t, hp) * velocity
    return new, OptimizerState(velocity, state.t + 1)


def train_step(params: np.ndarray, spec: ModelSpec, batch: MiniBatchSpec, dataset: Dataset,
               state: OptimizerState, hp: Hyperparams):
    """One logged-training update; returns (params, state, loss, grad)."""
    loss, grad = loss_and_grad(params, spec, batch, dataset, hp.weight_decay)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {state.t + 1}")
    new, state = modified_sgd_step(params, grad, state, hp)
    return new, state, loss, grad


def fit(spec: ModelSpec, dataset: Dataset, hp: Hyperparams, init_seed: int, schedule_seed: int) -> np.ndarray:
    """Plain training loop without logging (used for shadow models)."""
    params = init_params(spec, init_seed)
    state = OptimizerState.zeros(params.size)
    sched = schedule_for_steps(dataset.n, hp.batch_size, hp.total_steps, schedule_seed)
    for batch in sched.batches:
        params, state, _, _ = train_step(params, spec, batch, dataset, state, hp)
    return params


def accuracy(params: np.ndarray, spec: ModelSpec, dataset: Dataset) -> float:
    pred = logits(params, spec, dataset.features).argmax(axis=1)
    return float(np.mean(pred == dataset.labels))


__all__ = [
    "ModelSpec", "Hyperparams", "OptimizerState", "init_params", "forward", "logits",
    "loss_and_grad", "batch_grads", "stacked_loss_grads", "sgd_step", "modified_sgd_step",
    "lr_at", "finite_diff_grad", "per_sample_loss", "logit_confidence", "fit", "accuracy",
    "train_step", "sigmoid",
]
