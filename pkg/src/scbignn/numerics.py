"""Dense tensor helpers, MLPs with hand-written backward passes, losses and optimizers.

Everything here works on plain numpy arrays. Models keep their parameters in
``dict[str, np.ndarray]`` so the optimizer, checkpoints and gradient checks can
treat every model the same way.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PROB_EPS = 1e-12
LOG_EPS = float(np.log(PROB_EPS))


class NumericsError(ValueError):
    pass


def softmax_rows(m: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilised by subtracting the row max.

    ``mask`` (broadcastable to ``m``) marks the admissible columns; masked-out
    entries get probability exactly 0. Every row must keep at least one entry.
    """
    m = np.asarray(m)
    if not np.all(np.isfinite(m)):
        raise NumericsError("softmax_rows: input contains NaN or Inf")
    if mask is None:
        shifted = m - m.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(mask, m.shape)
        fill = np.where(mask, m, -np.inf)
        rowmax = fill.max(axis=-1, keepdims=True)
        if not np.all(np.isfinite(rowmax)):
            raise NumericsError("softmax_rows: a row has no admissible entries")
        e = np.exp(fill - rowmax)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m: np.ndarray) -> np.ndarray:
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


# --------------------------------------------------------------------------- MLP


@dataclass
class MlpParams:
    """Stack of affine layers with ReLU between them (none after the last)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise NumericsError("MLP needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise NumericsError(f"MLP layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise NumericsError(
                    f"MLP layer {i}: input width {w.shape[0]} does not chain "
                    f"from previous output {self.weights[i - 1].shape[1]}"
                )

    @classmethod
    def init(cls, rng: np.random.Generator, sizes: list[int], dtype=np.float32) -> "MlpParams":
        weights = [glorot_uniform(rng, a, b, dtype) for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(b, dtype=dtype) for b in sizes[1:]]
        return cls(weights, biases)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    def named(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.{i}.weight", w
            yield f"{prefix}.{i}.bias", b


@dataclass
class MlpCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def mlp_forward(p: MlpParams, x: np.ndarray, return_cache: bool = False):
    """Apply the MLP to the last axis of ``x`` (any number of leading axes)."""
    if x.shape[-1] != p.in_width:
        raise NumericsError(f"mlp_forward: input width {x.shape[-1]} != expected {p.in_width}")
    cache = MlpCache()
    n = len(p.weights)
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        cache.inputs.append(x)
        z = x @ w + b
        cache.pre.append(z)
        x = np.maximum(z, 0) if i < n - 1 else z
    if return_cache:
        return x, cache
    return x


def mlp_backward(p: MlpParams, cache: MlpCache, grad_out: np.ndarray, prefix: str, grads: dict,
                 need_input_grad: bool = True):
    """Accumulate parameter gradients into ``grads`` and return d(loss)/d(input)."""
    g = grad_out
    n = len(p.weights)
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = g * (cache.pre[i] > 0)
        x = cache.inputs[i]
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        _accumulate(grads, f"{prefix}.{i}.weight", x2.T @ g2)
        _accumulate(grads, f"{prefix}.{i}.bias", g2.sum(axis=0))
        if i > 0 or need_input_grad:
            g = g @ p.weights[i].T
    return g if need_input_grad else None


def _accumulate(grads: dict, name: str, value: np.ndarray):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


# ------------------------------------------------------------------------- losses


def check_distribution_rows(target: np.ndarray, tol: float = 1e-5):
    sums = target.sum(axis=-1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        raise NumericsError(f"target row {bad[0]} sums to {sums[bad[0]]:.6g}, not 1")
    if np.any(target < -tol):
        raise NumericsError("target distribution has negative entries")


def cross_entropy_terms(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-row cross entropy -sum_c target * log softmax(logits), log clamped at log(1e-12)."""
    logp = np.maximum(log_softmax_rows(logits), LOG_EPS)
    return -(target * logp).sum(axis=-1)


def cross_entropy(pred_logits: np.ndarray, target_dist: np.ndarray) -> float:
    """Mean cross entropy between softmax(logits) and the target distributions."""
    if pred_logits.shape != target_dist.shape:
        raise NumericsError(f"cross_entropy: shapes {pred_logits.shape} and {target_dist.shape} differ")
    check_distribution_rows(target_dist)
    return float(cross_entropy_terms(pred_logits, target_dist).mean())


def weighted_cross_entropy(logits: np.ndarray, target: np.ndarray, weights: np.ndarray):
    """Return ``(sum_i w_i * ce_i, d/dlogits)``.

    The gradient is the unclamped softmax gradient; the clamp only guards the
    reported value against log(0).
    """
    terms = cross_entropy_terms(logits, target)
    probs = softmax_rows(logits)
    grad = weights[:, None] * (probs * target.sum(axis=-1, keepdims=True) - target)
    return float((weights * terms).sum()), grad


# ---------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    """Adam (default) or plain gradient descent over a parameter dict.

    ``step`` only counts updates that were actually applied.
    """

    lr: float = 1e-3
    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise NumericsError("learning rate must be positive")
        if self.mode not in ("adam", "sgd"):
            raise NumericsError(f"unknown optimizer mode {self.mode!r}")


def sgd_step(opt: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> bool:
    """Update ``params`` in place. Returns False (and changes nothing) on non-finite gradients."""
    for name, g in grads.items():
        if name not in params:
            raise NumericsError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise NumericsError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s; skipping optimizer step %d", name, opt.step + 1)
            return False
    opt.step += 1
    if opt.mode == "sgd":
        for name, g in grads.items():
            p = params[name]
            p -= (opt.lr * g).astype(p.dtype, copy=False)
        return True
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * g * g
        p -= (opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype, copy=False)
    return True


# ------------------------------------------------------------------- grad checking


def grad_check(f: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
               params: Mapping[str, np.ndarray], eps: float = 1e-6,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max over entries of |analytic - central difference| / max(1, |analytic|).

    ``f`` evaluates the loss at the *current* contents of ``params`` and returns
    ``(value, grads)``. Entries are perturbed in place and restored. With
    ``max_entries`` set, a random subset of entries per parameter is checked.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise NumericsError("grad_check: eps must lie in [1e-7, 1e-4]")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise NumericsError(f"grad_check needs float64 parameters ({name} is {p.dtype})")
    _, grads = f()
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        analytic = grads.get(name, np.zeros_like(p))
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for j in idx:
            old = flat[j]
            flat[j] = old + eps
            up, _ = f()
            flat[j] = old - eps
            down, _ = f()
            flat[j] = old
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[j]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def param_checksum(params: Mapping[str, np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()
