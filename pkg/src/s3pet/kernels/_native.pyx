# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the hot elementwise/reduction paths.

Signatures and semantics mirror ``numpy_backend`` exactly; the parity test
suite drives both on identical inputs. Arrays of any shape are accepted
and processed as flat or (rows, last-axis) views.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp, log as c_log, log1p as c_log1p, sqrt as c_sqrt, pow as c_pow

cnp.import_array()

NAME = "native"

PROB_EPS = 1e-7
SAMPLE_EPS = 1e-15

cdef double _PROB_EPS = 1e-7
cdef double _SAMPLE_EPS = 1e-15


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + c_exp(-x))
    e = c_exp(x)
    return e / (1.0 + e)


cdef cnp.ndarray _writable64(object x):
    a = np.ascontiguousarray(x, dtype=np.float64)
    if not a.flags.writeable:  # broadcast views are read-only
        a = a.copy()
    return a


cdef cnp.ndarray _flat64(object x):
    return _writable64(x).reshape(-1)


cdef cnp.ndarray _rows64(object x):
    a = _writable64(x)
    return a.reshape(-1, a.shape[a.ndim - 1])


def sigmoid_forward(x):
    shape = np.shape(x)
    cdef double[::1] xv = _flat64(x)
    out = np.empty(xv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    for i in range(xv.shape[0]):
        ov[i] = _sigmoid(xv[i])
    return out.reshape(shape)


def sigmoid_backward(y, grad_out):
    shape = np.shape(y)
    cdef double[::1] yv = _flat64(y)
    cdef double[::1] gv = _flat64(grad_out)
    out = np.empty(yv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    for i in range(yv.shape[0]):
        ov[i] = gv[i] * yv[i] * (1.0 - yv[i])
    return out.reshape(shape)


def relu_forward(x):
    shape = np.shape(x)
    cdef double[::1] xv = _flat64(x)
    out = np.empty(xv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    for i in range(xv.shape[0]):
        ov[i] = xv[i] if xv[i] > 0.0 else 0.0
    return out.reshape(shape)


def relu_backward(x, grad_out):
    shape = np.shape(x)
    cdef double[::1] xv = _flat64(x)
    cdef double[::1] gv = _flat64(grad_out)
    out = np.empty(xv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    for i in range(xv.shape[0]):
        ov[i] = gv[i] if xv[i] > 0.0 else 0.0
    return out.reshape(shape)


def softmax_forward(x):
    shape = np.shape(x)
    cdef double[:, ::1] xv = _rows64(x)
    out = np.empty((xv.shape[0], xv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, j
    cdef double mx, total
    for r in range(xv.shape[0]):
        mx = xv[r, 0]
        for j in range(1, xv.shape[1]):
            if xv[r, j] > mx:
                mx = xv[r, j]
        total = 0.0
        for j in range(xv.shape[1]):
            ov[r, j] = c_exp(xv[r, j] - mx)
            total += ov[r, j]
        for j in range(xv.shape[1]):
            ov[r, j] /= total
    return out.reshape(shape)


def softmax_backward(y, grad_out):
    shape = np.shape(y)
    cdef double[:, ::1] yv = _rows64(y)
    cdef double[:, ::1] gv = _rows64(grad_out)
    out = np.empty((yv.shape[0], yv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, j
    cdef double inner
    for r in range(yv.shape[0]):
        inner = 0.0
        for j in range(yv.shape[1]):
            inner += gv[r, j] * yv[r, j]
        for j in range(yv.shape[1]):
            ov[r, j] = yv[r, j] * (gv[r, j] - inner)
    return out.reshape(shape)


def cross_entropy_forward(logits, targets):
    cdef double[:, ::1] lv = _rows64(logits)
    cdef long[::1] tv = np.ascontiguousarray(targets, dtype=np.int64).reshape(-1)
    probs = np.empty((lv.shape[0], lv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] pv = probs
    cdef Py_ssize_t r, j
    cdef double mx, total, acc = 0.0
    for r in range(lv.shape[0]):
        mx = lv[r, 0]
        for j in range(1, lv.shape[1]):
            if lv[r, j] > mx:
                mx = lv[r, j]
        total = 0.0
        for j in range(lv.shape[1]):
            pv[r, j] = c_exp(lv[r, j] - mx)
            total += pv[r, j]
        for j in range(lv.shape[1]):
            pv[r, j] /= total
        acc += (lv[r, tv[r]] - mx) - c_log(total)
    return float(-acc / lv.shape[0]), probs


def cross_entropy_backward(probs, targets, grad_loss):
    cdef double[:, ::1] pv = _rows64(probs)
    cdef long[::1] tv = np.ascontiguousarray(targets, dtype=np.int64).reshape(-1)
    out = np.empty((pv.shape[0], pv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double scale = float(grad_loss) / pv.shape[0]
    cdef Py_ssize_t r, j
    for r in range(pv.shape[0]):
        for j in range(pv.shape[1]):
            ov[r, j] = pv[r, j] * scale
        ov[r, tv[r]] -= scale
    return out


def binary_concrete_forward(p, u, beta):
    shape = np.broadcast_shapes(np.shape(p), np.shape(u))
    cdef double[::1] pv = _flat64(np.broadcast_to(p, shape))
    cdef double[::1] uv = _flat64(np.broadcast_to(u, shape))
    cdef double b = float(beta)
    out = np.empty(pv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    cdef double pc, z
    for i in range(pv.shape[0]):
        pc = pv[i]
        if pc < _PROB_EPS:
            pc = _PROB_EPS
        elif pc > 1.0 - _PROB_EPS:
            pc = 1.0 - _PROB_EPS
        z = _sigmoid((c_log(uv[i]) - c_log1p(-uv[i]) + c_log(pc) - c_log1p(-pc)) / b)
        if z < _SAMPLE_EPS:
            z = _SAMPLE_EPS
        elif z > 1.0 - _SAMPLE_EPS:
            z = 1.0 - _SAMPLE_EPS
        ov[i] = z
    return out.reshape(shape)


def adamw_update(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
    cdef double[::1] pv = param.reshape(-1)
    cdef double[::1] gv = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1)
    cdef double[::1] mv = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef double b1 = beta1, b2 = beta2, lr_ = lr, eps_ = eps, wd = weight_decay
    cdef double c1 = 1.0 - c_pow(b1, <double> step)
    cdef double c2 = 1.0 - c_pow(b2, <double> step)
    cdef Py_ssize_t i
    cdef double m_hat, v_hat
    for i in range(pv.shape[0]):
        mv[i] = b1 * mv[i] + (1.0 - b1) * gv[i]
        vv[i] = b2 * vv[i] + (1.0 - b2) * gv[i] * gv[i]
        m_hat = mv[i] / c1
        v_hat = vv[i] / c2
        pv[i] = pv[i] * (1.0 - lr_ * wd) - lr_ * m_hat / (c_sqrt(v_hat) + eps_)
