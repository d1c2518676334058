"""
Minimal dense-network engine on numpy.

- DenseNet: stack of affine layers with ELU between them; forward returns a
  tape, backward walks it in reverse and returns parameter and input gradients
- Adam with global-norm gradient clipping
- L2 normalization with its backward pass
- Gaussian policy helpers (log-density, entropy)

Arithmetic runs in float32 unless wrapped in precision("float64"), which
gradient checks use. Parameters take the dtype active when they are created.
"""

import logging
import math
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LOG_STD_MIN = -4.0
LOG_STD_MAX = 1.0

_dtype = [np.float32]

Params = Dict[str, np.ndarray]


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the working dtype ("float32" or "float64")."""
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported precision '{name}'")
    _dtype.append(np.dtype(name).type)
    try:
        yield
    finally:
        _dtype.pop()


def get_dtype():
    return _dtype[-1]


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_grad(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, y + 1.0).astype(x.dtype)


def orthogonal(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class DenseNet:
    """
    Multi-layer perceptron y = L_n(elu(... elu(L_1(x)))).

    Args:
        sizes: Layer widths including input and output, e.g. (270, 512, 256, 128, 19)
        rng: Generator for orthogonal initialization
        output_activation: Apply ELU after the last layer too
        output_gain: Init gain of the last layer (hidden layers use sqrt(2))
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 output_activation: bool = False, output_gain: float = math.sqrt(2)):
        if len(sizes) < 2:
            raise ValueError("DenseNet needs at least an input and an output size")
        self.sizes = tuple(int(s) for s in sizes)
        self.output_activation = output_activation
        dtype = get_dtype()
        self.params: Params = {}
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = output_gain if i == len(self.sizes) - 2 else math.sqrt(2)
            self.params[f"l{i}.W"] = orthogonal(n_in, n_out, gain, rng).astype(dtype)
            self.params[f"l{i}.b"] = np.zeros(n_out, dtype=dtype)

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def _activated(self, i: int) -> bool:
        return i < self.num_layers - 1 or self.output_activation

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray, np.ndarray]]]:
        """
        Returns:
            Output batch and the tape (input, pre-activation, output) per layer

        Raises:
            ValueError: If the input width does not match the first layer
        """
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"dimension mismatch: expected (B, {self.input_dim}), got {x.shape}")
        h = x.astype(self.params["l0.W"].dtype, copy=False)
        tape = []
        for i in range(self.num_layers):
            pre = h @ self.params[f"l{i}.W"] + self.params[f"l{i}.b"]
            out = elu(pre) if self._activated(i) else pre
            tape.append((h, pre, out))
            h = out
        return h, tape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape, grad_out: np.ndarray) -> Tuple[Params, np.ndarray]:
        """
        Reverse-mode pass over a recorded forward.

        Args:
            tape: As returned by forward
            grad_out: dLoss/dOutput, same shape as the forward output

        Returns:
            (parameter gradients keyed like self.params, dLoss/dInput)
        """
        grads: Params = {}
        g = np.asarray(grad_out, dtype=tape[-1][2].dtype)
        for i in reversed(range(self.num_layers)):
            h_in, pre, out = tape[i]
            if self._activated(i):
                g = g * elu_grad(pre, out)
            grads[f"l{i}.W"] = h_in.T @ g
            grads[f"l{i}.b"] = g.sum(axis=0)
            g = g @ self.params[f"l{i}.W"].T
        return {k: grads[k] for k in self.params}, g

    def state_dict(self, prefix: str = "") -> Params:
        return {f"{prefix}{k}": v.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Params, prefix: str = "") -> None:
        for k, v in self.params.items():
            value = np.asarray(state[f"{prefix}{k}"])
            if value.shape != v.shape:
                raise ValueError(f"{prefix}{k}: shape {value.shape} != {v.shape}")
            v[...] = value


def global_norm(grads: Params) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_grad_norm(grads: Params, max_norm: Optional[float]) -> Tuple[Params, float]:
    """Scale all gradients by max_norm / norm when the global norm exceeds max_norm."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class Adam:
    """Bias-corrected Adam over a dict of parameter arrays, updated in place."""

    def __init__(self, params: Params, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: Optional[float] = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads: Params) -> float:
        """
        Clip, then apply one update.

        Returns:
            Global gradient norm before clipping
        """
        grads, norm = clip_grad_norm(grads, self.max_grad_norm)
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = grads[k].astype(p.dtype, copy=False)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / correction1
            v_hat = self.v[k] / correction2
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
        return norm

    def state_dict(self, prefix: str = "") -> Params:
        state = {f"{prefix}step": np.array([self.step_count], dtype=np.int64),
                 f"{prefix}lr": np.array([self.lr], dtype=np.float64)}
        for k in self.params:
            state[f"{prefix}m.{k}"] = self.m[k].copy()
            state[f"{prefix}v.{k}"] = self.v[k].copy()
        return state

    def load_state_dict(self, state: Params, prefix: str = "") -> None:
        self.step_count = int(state[f"{prefix}step"][0])
        self.lr = float(state[f"{prefix}lr"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"{prefix}m.{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(state[f"{prefix}v.{k}"], dtype=self.params[k].dtype)


def adam_step(state: Adam, grads: Params) -> float:
    return state.step(grads)


def l2_normalize(v: np.ndarray, eps: float = 1e-12) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row-wise v / ||v||.

    Rows with norm below eps map to the first basis vector.

    Returns:
        (normalized rows, row norms)
    """
    v = np.asarray(v)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    degenerate = norms < eps
    out = v / np.where(degenerate, 1.0, norms)
    if degenerate.any():
        logger.warning(f"L2 normalization of {int(degenerate.sum())} near-zero vector(s); using basis vector")
        basis = np.zeros(v.shape[-1], dtype=out.dtype)
        basis[0] = 1.0
        out = np.where(degenerate, basis, out)
    return out, norms


def l2_normalize_backward(out: np.ndarray, norms: np.ndarray, grad_out: np.ndarray,
                          eps: float = 1e-12) -> np.ndarray:
    """Gradient through l2_normalize; zero for degenerate rows."""
    proj = grad_out - out * np.sum(out * grad_out, axis=-1, keepdims=True)
    return np.where(norms < eps, 0.0, proj / np.where(norms < eps, 1.0, norms))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log-density of a diagonal Gaussian, summed over action dims."""
    var = np.exp(2.0 * log_std)
    return np.sum(-0.5 * np.square(actions - mean) / var - log_std - 0.5 * math.log(2.0 * math.pi), axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + 0.5 * math.log(2.0 * math.pi * math.e)))


def clamp_log_std(log_std: np.ndarray) -> np.ndarray:
    return np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
