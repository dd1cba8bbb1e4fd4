"""Pure-numpy kernels; the reference backend and the fallback when the
compiled extension is unavailable.

All kernels work on a flat float64 parameter vector laid out layer by layer:
the weight matrix (fan_in x fan_out, row-major) followed by the bias vector.
Activations for a batch of B rows live in one flat workspace, layer after
layer, each block B x width row-major. Only post-activations are stored.
"""

import numpy as np

BACKEND = "python"

# Logits are clipped here so sigmoid outputs stay strictly inside (0, 1).
LOGIT_CLIP = 35.0


def mlp_forward(params, widths, relu_out, X, acts):
    """Run a batch through the network, filling ``acts``; return the output block."""
    batch = X.shape[0]
    n_layers = len(widths) - 1
    a = X
    p = 0
    q = 0
    for layer in range(n_layers):
        n_in = widths[layer]
        n_out = widths[layer + 1]
        W = params[p:p + n_in * n_out].reshape(n_in, n_out)
        p += n_in * n_out
        b = params[p:p + n_out]
        p += n_out
        z = acts[q:q + batch * n_out].reshape(batch, n_out)
        q += batch * n_out
        np.matmul(a, W, out=z)
        z += b
        if layer < n_layers - 1 or relu_out:
            np.maximum(z, 0.0, out=z)
        else:
            np.clip(z, -LOGIT_CLIP, LOGIT_CLIP, out=z)
            np.negative(z, out=z)
            np.exp(z, out=z)
            z += 1.0
            np.reciprocal(z, out=z)
        a = z
    return a


def mlp_backward(params, widths, X, acts, dz_last, grad, dX=None):
    """Backpropagate ``dz_last`` (gradient w.r.t. the last pre-activation).

    Overwrites ``grad`` with the parameter gradient and, when given, ``dX``
    with the gradient w.r.t. the input batch.
    """
    batch = X.shape[0]
    n_layers = len(widths) - 1
    p_offsets = []
    a_offsets = []
    p = 0
    q = 0
    for layer in range(n_layers):
        n_in = widths[layer]
        n_out = widths[layer + 1]
        p_offsets.append(p)
        a_offsets.append(q)
        p += n_in * n_out + n_out
        q += batch * n_out

    dz = dz_last
    for layer in range(n_layers - 1, -1, -1):
        n_in = widths[layer]
        n_out = widths[layer + 1]
        p = p_offsets[layer]
        W = params[p:p + n_in * n_out].reshape(n_in, n_out)
        gW = grad[p:p + n_in * n_out].reshape(n_in, n_out)
        gb = grad[p + n_in * n_out:p + n_in * n_out + n_out]
        if layer == 0:
            a_prev = X
        else:
            q = a_offsets[layer - 1]
            a_prev = acts[q:q + batch * n_in].reshape(batch, n_in)
        np.matmul(a_prev.T, dz, out=gW)
        np.sum(dz, axis=0, out=gb)
        if layer > 0:
            da = dz @ W.T
            da *= a_prev > 0.0
            dz = da
        elif dX is not None:
            np.matmul(dz, W.T, out=dX)


def adam_update(params, grad, m, v, lr, beta1, beta2, eps, step):
    """One in-place Adam step; ``step`` counts from 1."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    params -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
