"""Pure numpy implementations of the hot kernels.

This is the fallback backend and the reference the compiled backend is
tested against. Every function takes and returns float64 arrays; shapes
are arbitrary unless noted. Matrix products are not part of the kernel
surface: both backends leave those to numpy's BLAS binding.
"""

import numpy as np

NAME = "numpy"

# Probabilities are clamped this far away from {0, 1} before log-ratios.
PROB_EPS = 1e-7
# Soft samples are kept strictly inside (0, 1).
SAMPLE_EPS = 1e-15


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; the two branches share it.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * y * (1.0 - y)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, grad_out, 0.0)


def softmax_forward(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, max-shifted for stability."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    inner = np.sum(grad_out * y, axis=-1, keepdims=True)
    return y * (grad_out - inner)


def cross_entropy_forward(logits: np.ndarray, targets: np.ndarray):
    """Mean negative log-likelihood over rows.

    logits: (n, v); targets: (n,) int. Returns (loss, probs) where probs
    is the row softmax, reused by the backward pass.
    """
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = np.sum(e, axis=-1, keepdims=True)
    probs = e / z
    n = logits.shape[0]
    log_lik = shifted[np.arange(n), targets] - np.log(z[:, 0])
    return float(-np.mean(log_lik)), probs


def cross_entropy_backward(probs: np.ndarray, targets: np.ndarray, grad_loss: float) -> np.ndarray:
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), targets] -= 1.0
    g *= grad_loss / n
    return g


def binary_concrete_forward(p: np.ndarray, u: np.ndarray, beta: float) -> np.ndarray:
    """Relaxed Bernoulli sample: sigmoid of the scaled log-odds of (u, p)."""
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    logits = (np.log(u) - np.log1p(-u) + np.log(pc) - np.log1p(-pc)) / beta
    z = sigmoid_forward(np.asarray(logits, dtype=np.float64))
    return np.clip(z, SAMPLE_EPS, 1.0 - SAMPLE_EPS)


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
) -> None:
    """One decoupled-weight-decay moment update, in place (step is 1-based)."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param *= 1.0 - lr * weight_decay
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
