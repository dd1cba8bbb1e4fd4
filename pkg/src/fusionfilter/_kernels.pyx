# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP kernels. Same contracts and memory layout as ``_kernels_py``."""

from libc.math cimport sqrt, pow
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm

import numpy as np

BACKEND = "cython"

cdef double LOGIT_CLIP = 35.0

# Elementwise loops in plain C so `restrict` lets gcc emit branch-free SIMD;
# with data-dependent branches they dominated large-batch timings.
cdef extern from *:
    """
    static void ff_relu(double* restrict z, Py_ssize_t n) {
        for (Py_ssize_t k = 0; k < n; k++) z[k] = z[k] < 0.0 ? 0.0 : z[k];
    }
    static void ff_relu_gate(double* restrict da, const double* restrict a, Py_ssize_t n) {
        for (Py_ssize_t k = 0; k < n; k++) da[k] = a[k] > 0.0 ? da[k] : 0.0;
    }
    """
    void ff_relu(double* z, Py_ssize_t n) noexcept nogil
    void ff_relu_gate(double* da, const double* a, Py_ssize_t n) noexcept nogil


cdef inline void _dense(const double* a, double* W, double* b, double* z,
                        int batch, int n_in, int n_out) noexcept nogil:
    # z (batch x n_out, row-major) = a @ W + b, via column-major dgemm on transposes
    cdef int r, j
    cdef double one = 1.0
    cdef char nt = b'N'
    for r in range(batch):
        for j in range(n_out):
            z[r * n_out + j] = b[j]
    dgemm(&nt, &nt, &n_out, &batch, &n_in, &one, W, &n_out,
          <double*> a, &n_in, &one, z, &n_out)


def mlp_forward(double[::1] params, const long long[::1] widths, bint relu_out,
                const double[:, ::1] X, double[::1] acts):
    cdef int batch = <int> X.shape[0]
    cdef Py_ssize_t n_layers = widths.shape[0] - 1
    cdef Py_ssize_t layer
    cdef int n_in, n_out
    cdef Py_ssize_t p = 0, q = 0, q_prev = 0
    cdef double* z
    cdef const double* a
    cdef double* P = &params[0]
    cdef double* A = &acts[0]
    if X.shape[1] != widths[0]:
        raise ValueError("input width mismatch")
    a = &X[0, 0]
    for layer in range(n_layers):
        n_in = <int> widths[layer]
        n_out = <int> widths[layer + 1]
        z = A + q
        _dense(a, P + p, P + p + n_in * n_out, z, batch, n_in, n_out)
        p += n_in * n_out + n_out
        if layer < n_layers - 1 or relu_out:
            ff_relu(z, batch * n_out)
        a = z
        q_prev = q
        q += batch * n_out
    out = np.asarray(acts)[q_prev:q].reshape(batch, widths[n_layers])
    if not relu_out:
        # numpy's vectorized exp is several times faster than a scalar libm loop
        np.clip(out, -LOGIT_CLIP, LOGIT_CLIP, out=out)
        np.negative(out, out=out)
        np.exp(out, out=out)
        out += 1.0
        np.reciprocal(out, out=out)
    return out


def mlp_backward(double[::1] params, const long long[::1] widths,
                 const double[:, ::1] X, double[::1] acts,
                 const double[:, ::1] dz_last, double[::1] grad, dX=None):
    cdef int batch = <int> X.shape[0]
    cdef Py_ssize_t n_layers = widths.shape[0] - 1
    cdef Py_ssize_t layer, r, j, k, max_w = 0
    cdef int n_in, n_out
    cdef Py_ssize_t p, q
    cdef double* P = &params[0]
    cdef double* G = &grad[0]
    cdef double* A = &acts[0]
    cdef double* gW
    cdef double* gb
    cdef double* a_prev
    cdef double* dz
    cdef double* da
    cdef double* tmp
    cdef double one = 1.0, zero = 0.0
    cdef char nt = b'N', tt = b'T'
    cdef double[:, ::1] dX_view
    cdef bint want_dx = dX is not None

    for layer in range(n_layers + 1):
        if widths[layer] > max_w:
            max_w = widths[layer]
    cdef Py_ssize_t* p_off = <Py_ssize_t*> malloc(n_layers * sizeof(Py_ssize_t))
    cdef Py_ssize_t* a_off = <Py_ssize_t*> malloc(n_layers * sizeof(Py_ssize_t))
    cdef double* buf0 = <double*> malloc(batch * max_w * sizeof(double))
    cdef double* buf1 = <double*> malloc(batch * max_w * sizeof(double))
    if want_dx:
        dX_view = dX
    try:
        p = 0
        q = 0
        for layer in range(n_layers):
            p_off[layer] = p
            a_off[layer] = q
            p += widths[layer] * widths[layer + 1] + widths[layer + 1]
            q += batch * widths[layer + 1]

        n_out = <int> widths[n_layers]
        for r in range(batch):
            for j in range(n_out):
                buf0[r * n_out + j] = dz_last[r, j]
        dz = buf0
        da = buf1

        for layer in range(n_layers - 1, -1, -1):
            n_in = <int> widths[layer]
            n_out = <int> widths[layer + 1]
            gW = G + p_off[layer]
            gb = gW + n_in * n_out
            if layer == 0:
                a_prev = <double*> &X[0, 0]
            else:
                a_prev = A + a_off[layer - 1]
            # gW (n_in x n_out) = a_prev^T @ dz
            dgemm(&nt, &tt, &n_out, &n_in, &batch, &one, dz, &n_out,
                  a_prev, &n_in, &zero, gW, &n_out)
            for j in range(n_out):
                gb[j] = 0.0
            for r in range(batch):
                for j in range(n_out):
                    gb[j] += dz[r * n_out + j]
            if layer > 0:
                # da (batch x n_in) = dz @ W^T, then gate by the ReLU of a_prev
                dgemm(&tt, &nt, &n_in, &batch, &n_out, &one, P + p_off[layer], &n_out,
                      dz, &n_out, &zero, da, &n_in)
                ff_relu_gate(da, a_prev, batch * n_in)
                tmp = dz
                dz = da
                da = tmp
            elif want_dx:
                dgemm(&tt, &nt, &n_in, &batch, &n_out, &one, P + p_off[layer], &n_out,
                      dz, &n_out, &zero, &dX_view[0, 0], &n_in)
    finally:
        free(p_off)
        free(a_off)
        free(buf0)
        free(buf1)


def adam_update(double[::1] params, const double[::1] grad, double[::1] m,
                double[::1] v, double lr, double beta1, double beta2,
                double eps, long long step):
    cdef Py_ssize_t k, n = params.shape[0]
    cdef double bc1 = 1.0 - pow(beta1, <double> step)
    cdef double bc2 = 1.0 - pow(beta2, <double> step)
    cdef double g
    for k in range(n):
        g = grad[k]
        m[k] = beta1 * m[k] + (1.0 - beta1) * g
        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g
        params[k] -= lr * (m[k] / bc1) / (sqrt(v[k] / bc2) + eps)
