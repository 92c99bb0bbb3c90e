"""Dense-network building blocks written directly on numpy arrays.

Layers (fully connected, batch normalization, dropout, ReLU) carry their
own parameters and caches; reverse-mode gradients are hand-derived per
layer. Parameters and activations default to float32; losses and other
reductions accumulate in float64. Every forward/backward asserts its
output is finite, so NaN/Inf surfaces at the op that produced it.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import NumericError

ADAM_EPS = 1e-8


def assert_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {name}")
    return arr


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


class Dense:
    """Affine map y = x W^T + b with W shaped (out, in)."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        *,
        rng: np.random.Generator,
        init: str = "he",
        name: str = "dense",
        dtype=np.float32,
    ):
        if init == "he":
            self.W = he_uniform(rng, in_dim, out_dim, dtype)
        elif init == "glorot":
            self.W = glorot_uniform(rng, in_dim, out_dim, dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.b = np.zeros(out_dim, dtype=dtype)
        self.name = name
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._x: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def forward(self, x: np.ndarray, *, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if x.shape[1] != self.in_dim:
            raise NumericError(
                f"{self.name}: input width {x.shape[1]} != expected {self.in_dim}"
            )
        if training:
            self._x = x
        return assert_finite(self.name, x @ self.W.T + self.b)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise NumericError(f"{self.name}: backward without a cached forward")
        self.dW = dy.T @ self._x
        self.db = dy.sum(axis=0)
        dx = dy @ self.W
        self._x = None
        return assert_finite(self.name + ".grad", dx)

    def trainable(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{self.name}.W", self.W), (f"{self.name}.b", self.b)]

    def gradients(self) -> list[np.ndarray]:
        return [self.dW, self.db]

    def stateful(self) -> list[tuple[str, np.ndarray]]:
        return []


class BatchNorm:
    """Per-feature batch normalization.

    Train mode normalizes by biased batch statistics and folds them into
    running estimates (unbiased variance) with the given momentum; eval
    mode normalizes by the running estimates. Train mode needs at least
    two rows.
    """

    def __init__(self, dim: int, *, momentum: float = 0.9, eps: float = 1e-5,
                 name: str = "bn", dtype=np.float32):
        self.gamma = np.ones(dim, dtype=dtype)
        self.beta = np.zeros(dim, dtype=dtype)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)
        self._cache: tuple | None = None

    def forward(self, x: np.ndarray, *, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if training:
            m = x.shape[0]
            if m < 2:
                raise NumericError(
                    f"{self.name}: train-mode batch normalization needs >= 2 rows, got {m}"
                )
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            self._cache = (xhat, inv_std, m)
            mom = x.dtype.type(self.momentum)
            one = x.dtype.type(1.0)
            self.running_mean = mom * self.running_mean + (one - mom) * mean
            unbiased = var * (m / (m - 1))
            self.running_var = mom * self.running_var + (one - mom) * unbiased
        else:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return assert_finite(self.name, self.gamma * xhat + self.beta)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise NumericError(f"{self.name}: backward without a cached forward")
        xhat, inv_std, m = self._cache
        self.dgamma = (dy * xhat).sum(axis=0)
        self.dbeta = dy.sum(axis=0)
        # gradient through the batch statistics themselves
        dxhat = dy * self.gamma
        dx = (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
        self._cache = None
        return assert_finite(self.name + ".grad", dx.astype(dy.dtype, copy=False))

    def trainable(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def gradients(self) -> list[np.ndarray]:
        return [self.dgamma, self.dbeta]

    def stateful(self) -> list[tuple[str, np.ndarray]]:
        return [
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]


class ReLU:
    def __init__(self, name: str = "relu"):
        self.name = name
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray, *, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if training:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise NumericError(f"{self.name}: backward without a cached forward")
        dx = dy * self._mask
        self._mask = None
        return dx

    def trainable(self) -> list[tuple[str, np.ndarray]]:
        return []

    def gradients(self) -> list[np.ndarray]:
        return []

    def stateful(self) -> list[tuple[str, np.ndarray]]:
        return []


class Dropout:
    """Inverted dropout: survivors are rescaled by 1/(1-rate) at train
    time so the eval path is a plain identity."""

    def __init__(self, rate: float, name: str = "drop"):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.name = name
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray, *, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if not training or self.rate == 0.0:
            self._mask = None if not training else np.ones_like(x)
            return x
        if rng is None:
            raise NumericError(f"{self.name}: train-mode dropout needs an rng")
        keep = x.dtype.type(1.0 - self.rate)
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / keep
        self._mask = mask
        return x * mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise NumericError(f"{self.name}: backward without a cached forward")
        dx = dy * self._mask
        self._mask = None
        return dx

    def trainable(self) -> list[tuple[str, np.ndarray]]:
        return []

    def gradients(self) -> list[np.ndarray]:
        return []

    def stateful(self) -> list[tuple[str, np.ndarray]]:
        return []


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stabilized softmax."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_jvp_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits:
    dz = p * (dp - (dp . p) 1)."""
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def softmax_xent(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of a stabilized softmax over the batch.

    Returns (loss, dlogits, probs) with dlogits = (softmax - onehot) / batch.
    """
    n, k = logits.shape
    if targets.min() < 0 or targets.max() >= k:
        raise NumericError(f"class target outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted[np.arange(n), targets] - log_z
    loss = float(-log_probs.astype(np.float64).mean())
    probs = softmax(logits)
    grad = probs.copy()
    grad[np.arange(n), targets] -= 1.0
    grad /= n
    if not np.isfinite(loss):
        raise NumericError("non-finite cross-entropy loss")
    return loss, grad.astype(logits.dtype, copy=False), probs


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries; grad = 2(pred - target)/count."""
    if pred.shape != target.shape:
        raise NumericError(f"MSE shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float((diff * diff).mean())
    grad = (2.0 * diff / diff.size).astype(pred.dtype)
    if not np.isfinite(loss):
        raise NumericError("non-finite MSE loss")
    return loss, grad


class Adam:
    """Adam with bias correction over a fixed list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.1, beta2: float = 0.99, eps: float = ADAM_EPS):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def reset(self) -> None:
        self.t = 0
        for m, v in zip(self.m, self.v):
            m.fill(0)
            v.fill(0)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(self.m):
            raise NumericError("optimizer state does not match parameter list")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise NumericError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)).astype(p.dtype)
            p -= update


class SGD:
    """Plain gradient descent, interface-compatible with Adam."""

    def __init__(self, params: list[np.ndarray], lr: float):
        self.lr = lr
        self.n_params = len(params)

    def reset(self) -> None:
        pass

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != self.n_params:
            raise NumericError("optimizer state does not match parameter list")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise NumericError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            p -= (self.lr * g).astype(p.dtype)


def state_checksum(named: list[tuple[str, np.ndarray]]) -> str:
    """Order-sensitive digest of named arrays (values and shapes)."""
    h = hashlib.sha256()
    for name, arr in named:
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_checkpoint(out_dir: str | Path, named: list[tuple[str, np.ndarray]],
                    meta: dict | None = None) -> Path:
    """Write a checkpoint: JSON manifest listing tensors in order plus a
    single blob of little-endian float32 segments in that order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    for name, arr in named:
        if arr.dtype != np.float32:
            raise NumericError(f"checkpoint tensors must be float32, {name} is {arr.dtype}")
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = {"format": "fedloc-checkpoint-v1", "meta": meta or {}, "tensors": entries}
    (out_dir / "checkpoint.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out_dir / "weights.f32").write_bytes(b"".join(chunks))
    return out_dir


def load_checkpoint(ckpt_dir: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Reload a checkpoint bit-exactly. Returns (meta, name -> float32 array)."""
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "checkpoint.json").read_text())
    blob = np.frombuffer((ckpt_dir / "weights.f32").read_bytes(), dtype="<f4")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        segment = blob[offset:offset + size]
        if segment.size != size:
            raise NumericError(
                f"checkpoint blob truncated: {entry['name']} needs {size} floats, "
                f"{segment.size} left"
            )
        tensors[entry["name"]] = segment.reshape(entry["shape"]).astype(np.float32)
        offset += size
    if offset != blob.size:
        raise NumericError(
            f"checkpoint blob holds {blob.size} floats, manifest describes {offset}"
        )
    return manifest["meta"], tensors
