"""MLP hash encoder with hand-written gradients.

Student and teacher share this parameter layout.  The student trains by
backprop + SGD with momentum; the teacher only ever moves by exponential
moving average toward the student.  Binary codes come from the sign of
the final linear layer, with sign(0) = +1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_CKPT_MAGIC = b"PTS3"
_CKPT_VERSION = 1


@dataclass
class EncoderParams:
    """Weights and biases per layer; weights[l] is [out, in]."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])


@dataclass
class ForwardTrace:
    """Per-layer inputs and pre-activations saved for the backward pass."""

    inputs: list[np.ndarray]  # inputs[l] feeds layer l
    pre_activations: list[np.ndarray]
    embeddings: np.ndarray  # final linear output, no activation


def init_params(seed: int, dims: tuple[int, ...]) -> EncoderParams:
    """Deterministic fan-in-scaled uniform init for the layer chain dims.

    dims = (input, hidden..., output); at least (input, output).
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError("dims must be >=2 positive sizes, got %r" % (dims,))
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return EncoderParams(weights=weights, biases=biases)


def forward(params: EncoderParams, x: np.ndarray) -> ForwardTrace:
    """Run the MLP: ReLU after every layer except the last, which is linear."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise ValueError(
            "input shape %r does not match encoder input dim %d"
            % (x.shape, params.dims[0])
        )
    inputs, pres = [], []
    a = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w.T + b
        pres.append(z)
        a = z if l == last else np.maximum(z, 0.0)
    return ForwardTrace(inputs=inputs, pre_activations=pres, embeddings=a)


def backward(
    trace: ForwardTrace, params: EncoderParams, grad_embeddings: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Backprop d(loss)/d(embeddings) to per-layer (weight, bias) grads."""
    grad_w = [None] * params.n_layers
    grad_b = [None] * params.n_layers
    delta = np.asarray(grad_embeddings, dtype=np.float64)
    for l in range(params.n_layers - 1, -1, -1):
        grad_w[l] = delta.T @ trace.inputs[l]
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ params.weights[l]) * (trace.pre_activations[l - 1] > 0)
    return grad_w, grad_b


@dataclass
class OptimizerState:
    """Classical momentum: v <- mu*v + g, theta <- theta - lr*scale*v."""

    lr: float
    momentum: float = 0.9
    lr_scales: list[float] = field(default_factory=list)  # per layer
    vel_w: list[np.ndarray] = field(default_factory=list)
    vel_b: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(
        cls,
        params: EncoderParams,
        lr: float,
        momentum: float = 0.9,
        last_layer_lr_boost: float = 1.0,
    ) -> "OptimizerState":
        scales = [1.0] * params.n_layers
        scales[-1] = float(last_layer_lr_boost)
        return cls(
            lr=lr,
            momentum=momentum,
            lr_scales=scales,
            vel_w=[np.zeros_like(w) for w in params.weights],
            vel_b=[np.zeros_like(b) for b in params.biases],
        )


def sgd_momentum_step(
    params: EncoderParams,
    grads: tuple[list[np.ndarray], list[np.ndarray]],
    state: OptimizerState,
) -> EncoderParams:
    """Update params in place with one momentum step; returns params."""
    grad_w, grad_b = grads
    for g in grad_w + grad_b:
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient in optimizer step")
    for l in range(params.n_layers):
        step = state.lr * state.lr_scales[l]
        state.vel_w[l] *= state.momentum
        state.vel_w[l] += grad_w[l]
        params.weights[l] -= step * state.vel_w[l]
        state.vel_b[l] *= state.momentum
        state.vel_b[l] += grad_b[l]
        params.biases[l] -= step * state.vel_b[l]
    return params


def ema_update(
    teacher: EncoderParams, student: EncoderParams, alpha: float
) -> EncoderParams:
    """teacher <- alpha*teacher + (1-alpha)*student, elementwise, in place."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1], got %r" % alpha)
    for tw, sw in zip(teacher.weights, student.weights):
        tw *= alpha
        tw += (1.0 - alpha) * sw
    for tb, sb in zip(teacher.biases, student.biases):
        tb *= alpha
        tb += (1.0 - alpha) * sb
    return teacher


def encode(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Binary codes for unperturbed inputs: sign of embeddings, sign(0)=+1."""
    emb = forward(params, x).embeddings
    return np.where(emb >= 0.0, 1, -1).astype(np.int8)


def save_checkpoint(
    path,
    student: EncoderParams,
    teacher: EncoderParams,
    opt: OptimizerState | None = None,
) -> None:
    """Binary checkpoint: magic, version, dim chain (uint32 LE), then
    float32 LE tensors for student, teacher, and momentum buffers."""
    dims = student.dims
    if teacher.dims != dims:
        raise ValueError("student/teacher layer shapes differ")

    def emit(fh, p: EncoderParams):
        for w, b in zip(p.weights, p.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())

    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(dims)))
        fh.write(struct.pack("<%dI" % len(dims), *dims))
        fh.write(struct.pack("<B", 1 if opt is not None else 0))
        emit(fh, student)
        emit(fh, teacher)
        if opt is not None:
            emit(fh, EncoderParams(weights=opt.vel_w, biases=opt.vel_b))


def load_checkpoint(path):
    """Returns (student, teacher, momentum EncoderParams or None)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError("not a checkpoint (bad magic %r)" % magic)
        version, n_dims = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError("unsupported checkpoint version %d" % version)
        dims = struct.unpack("<%dI" % n_dims, fh.read(4 * n_dims))
        (has_opt,) = struct.unpack("<B", fh.read(1))

        def slurp() -> EncoderParams:
            ws, bs = [], []
            for fan_in, fan_out in zip(dims[:-1], dims[1:]):
                w = np.frombuffer(fh.read(4 * fan_out * fan_in), dtype="<f4")
                ws.append(w.reshape(fan_out, fan_in).astype(np.float64))
                bs.append(np.frombuffer(fh.read(4 * fan_out), dtype="<f4").astype(np.float64))
            return EncoderParams(weights=ws, biases=bs)

        student = slurp()
        teacher = slurp()
        mom = slurp() if has_opt else None
    return student, teacher, mom
