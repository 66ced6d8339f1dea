"""Dense feed-forward networks, losses, Adam and seeded RNG streams.

Parameters live in one flat float64 vector. Layer ``l`` contributes its
weight matrix of shape ``(din, dout)`` in row-major order followed by its
bias of length ``dout``; a layer computes ``z = x @ W + b``.
"""

from __future__ import annotations

import hashlib
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .kv import read_kv, write_kv

TASKS = ("classification", "regression")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ArchDescriptor:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    task: str = "classification"
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"layer widths must be positive, got {dims}")
        if self.task == "classification" and self.output_dim < 2:
            raise ValueError("classification needs output_dim = C >= 2")
        if self.task == "regression" and self.output_dim != 1:
            raise ValueError("regression needs output_dim = 1")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_classes(self) -> int | None:
        return self.output_dim if self.task == "classification" else None


def param_count(arch: ArchDescriptor) -> int:
    return sum((din + 1) * dout for din, dout in arch.layer_dims)


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: ArchDescriptor
    params: np.ndarray

    def __post_init__(self) -> None:
        p = np.ascontiguousarray(self.params, dtype=np.float64)
        if p.ndim != 1 or p.size != param_count(self.arch):
            raise ValueError(
                f"params length {p.size} does not match descriptor count {param_count(self.arch)}"
            )
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per layer into the flat vector."""
        out = []
        offset = 0
        for din, dout in self.arch.layer_dims:
            W = self.params[offset : offset + din * dout].reshape(din, dout)
            offset += din * dout
            b = self.params[offset : offset + dout]
            offset += dout
            out.append((W, b))
        return out

    def merge_compatible(self, other: "ModelParams") -> bool:
        return self.arch == other.arch

    def to_bytes(self) -> bytes:
        return self.params.astype("<f8").tobytes()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def bit_equal(self, other: "ModelParams") -> bool:
        return self.arch == other.arch and self.to_bytes() == other.to_bytes()


@dataclass(frozen=True, eq=False)
class OptimizerState:
    t: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> "OptimizerState":
        return cls(0, np.zeros(n), np.zeros(n), lr, beta1, beta2, epsilon)

    def __post_init__(self) -> None:
        for name in ("m", "v"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.m.shape != self.v.shape:
            raise ValueError("first and second moments differ in length")
        if self.t < 0:
            raise ValueError("step count must be non-negative")

    def to_bytes(self) -> bytes:
        return self.m.astype("<f8").tobytes() + self.v.astype("<f8").tobytes()


def _tag_int(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class RngState:
    """A seeded stream identified purely by its derivation path.

    ``path`` holds structural coordinates such as ``(shard, stage)``; ``tag``
    names the purpose (``"init"``, ``"shuffle"``...). Equal paths give equal
    streams, and data contents never enter the derivation.
    """

    master_seed: int
    path: tuple[int, ...] = ()
    tag: str = ""

    def generator(self) -> np.random.Generator:
        key = tuple(int(p) for p in self.path) + (_tag_int(self.tag),)
        ss = np.random.SeedSequence(entropy=int(self.master_seed) & (2**64 - 1), spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))

    def describe(self) -> str:
        return f"{self.master_seed}/{'/'.join(map(str, self.path))}/{self.tag}"


def init_model(arch: ArchDescriptor, rng: RngState) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    gen = rng.generator()
    chunks = []
    for din, dout in arch.layer_dims:
        s = np.sqrt(6.0 / (din + dout))
        chunks.append(gen.uniform(-s, s, size=din * dout))
        chunks.append(np.zeros(dout))
    return ModelParams(arch, np.concatenate(chunks))


class _ForwardCounter(threading.local):
    def __init__(self) -> None:
        self.stack: list[list[int]] = []


_counter = _ForwardCounter()


@contextmanager
def count_forward_passes() -> Iterator[list[int]]:
    """Count per-example forward passes executed inside the block.

    Yields a one-element list whose value is updated in place.
    """
    box = [0]
    _counter.stack.append(box)
    try:
        yield box
    finally:
        _counter.stack.pop()


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_features(model: ModelParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.arch.input_dim:
        raise ValueError(
            f"expected features of length {model.arch.input_dim}, got shape {X.shape}"
        )
    return X


def _forward_cache(model: ModelParams, X: np.ndarray):
    acts = [X]
    pre = []
    a = X
    layers = model.layers()
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        pre.append(z)
        a = _activate(z, model.arch.activation) if i < len(layers) - 1 else z
        acts.append(a)
    return pre, acts


def forward_batch(model: ModelParams, X: np.ndarray) -> np.ndarray:
    """Outputs for a batch of rows: probabilities (n, C) or predictions (n,)."""
    X = _check_features(model, X)
    for box in _counter.stack:
        box[0] += X.shape[0]
    _, acts = _forward_cache(model, X)
    out = acts[-1]
    if model.arch.task == "classification":
        return _softmax(out)
    return out[:, 0]


def forward(model: ModelParams, features: Sequence[float]) -> np.ndarray | float:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward takes a single feature vector; use forward_batch for rows")
    out = forward_batch(model, x[None, :])
    if model.arch.task == "classification":
        return out[0]
    return float(out[0])


def loss_and_grad(model: ModelParams, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (classification) or mean squared error (regression)."""
    X = _check_features(model, X)
    y = np.asarray(y)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if y.shape[0] != n:
        raise ValueError(f"{n} feature rows but {y.shape[0]} targets")
    arch = model.arch
    pre, acts = _forward_cache(model, X)
    out = acts[-1]
    if arch.task == "classification":
        labels = y.astype(np.int64)
        shifted = out - out.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        log_p = shifted - log_z[:, None]
        loss = -log_p[np.arange(n), labels].mean()
        delta = np.exp(log_p)
        delta[np.arange(n), labels] -= 1.0
        delta /= n
    else:
        resid = out[:, 0] - y.astype(np.float64)
        loss = np.mean(resid**2)
        delta = (2.0 / n) * resid[:, None]

    layers = model.layers()
    grads: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[2 * i] = (acts[i].T @ delta).ravel()
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            da = delta @ W.T
            if arch.activation == "relu":
                delta = da * (pre[i - 1] > 0)
            else:
                delta = da * (1.0 - acts[i] ** 2)
    return float(loss), np.concatenate(grads)


def adam_step(model: ModelParams, state: OptimizerState,
              grad: np.ndarray) -> tuple[ModelParams, OptimizerState]:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.params.shape or state.m.shape != model.params.shape:
        raise ValueError(
            f"length mismatch: params {model.params.size}, grad {grad.size}, state {state.m.size}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    theta = model.params - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = OptimizerState(t, m, v, state.lr, state.beta1, state.beta2, state.epsilon)
    return ModelParams(model.arch, theta), new_state


# -- serialization -----------------------------------------------------------

def arch_to_kv(arch: ArchDescriptor) -> dict[str, str]:
    return {
        "input_dim": str(arch.input_dim),
        "hidden_dims": ",".join(map(str, arch.hidden_dims)),
        "output_dim": str(arch.output_dim),
        "task": arch.task,
        "activation": arch.activation,
    }


def arch_from_kv(kv: dict[str, str]) -> ArchDescriptor:
    hidden = tuple(int(h) for h in kv["hidden_dims"].split(",") if h.strip())
    return ArchDescriptor(int(kv["input_dim"]), hidden, int(kv["output_dim"]),
                          kv["task"], kv["activation"])


def save_params(model: ModelParams, manifest: Path, blob: Path) -> None:
    """Write a key-value manifest plus a little-endian float64 blob."""
    data = model.to_bytes()
    blob.write_bytes(data)
    kv = arch_to_kv(model.arch)
    kv.update(n_params=str(model.params.size), blob=blob.name,
              sha256=hashlib.sha256(data).hexdigest())
    write_kv(manifest, kv)


def load_params(manifest: Path) -> ModelParams:
    kv = read_kv(manifest)
    blob = Path(manifest).parent / kv["blob"]
    data = blob.read_bytes()
    arch = arch_from_kv(kv)
    if "sha256" in kv and hashlib.sha256(data).hexdigest() != kv["sha256"]:
        raise ValueError(f"{blob}: checksum mismatch")
    if len(data) != 8 * param_count(arch):
        raise ValueError(f"{blob}: blob size {len(data)} does not match descriptor")
    return ModelParams(arch, np.frombuffer(data, dtype="<f8").astype(np.float64))

