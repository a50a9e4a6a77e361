"""Independent reference implementations used as test oracles.

Everything here is deliberately written as plain loops over dense arrays so
that it shares no code path with the package.  The matvec/matmul oracles
accumulate strictly left to right in ascending index order, which is the
accumulation discipline the sparse kernels promise.
"""

import numpy as np


def dense_matvec(a, v):
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(a.shape[0])
    for i in range(a.shape[0]):
        s = 0.0
        for j in range(a.shape[1]):
            s += a[i, j] * v[j]
        out[i] = s
    return out


def dense_matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for k in range(a.shape[1]):
            aik = a[i, k]
            if aik == 0.0:
                continue
            for j in range(b.shape[1]):
                out[i, j] += aik * b[k, j]
    return out


def conv2d_direct(x, weight, bias=None, stride=1, pad=0):
    """Sliding-window cross-correlation with zero padding, CHW layout."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    assert c_in == c_in_w
    if pad:
        xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
        xp[:, pad : pad + h, pad : pad + w] = x
        x = xp
        h, w = h + 2 * pad, w + 2 * pad
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for y in range(ho):
            for xx in range(wo):
                s = 0.0
                for i in range(c_in):
                    for dy in range(kh):
                        for dx in range(kw):
                            s += weight[o, i, dy, dx] * x[i, y * stride + dy, xx * stride + dx]
                if bias is not None:
                    s += bias[o]
                out[o, y, xx] = s
    return out


def avgpool_direct(x, k, stride):
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.zeros((c, ho, wo))
    for ch in range(c):
        for y in range(ho):
            for xx in range(wo):
                s = 0.0
                for dy in range(k):
                    for dx in range(k):
                        s += x[ch, y * stride + dy, xx * stride + dx]
                out[ch, y, xx] = s / (k * k)
    return out


def dense_layer_direct(x, weight, bias=None):
    x = np.asarray(x, dtype=np.float64).ravel()
    weight = np.asarray(weight, dtype=np.float64)
    out = weight @ x
    if bias is not None:
        out = out + bias
    return out


def relu_direct(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def network_forward_direct(net, x):
    """Layerwise reference forward pass operating on raw tensors."""
    from keynet.network import AvgPool, Conv2d, Dense, Relu

    cur = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            cur = conv2d_direct(cur, layer.weight, layer.bias, layer.stride, layer.pad)
        elif isinstance(layer, AvgPool):
            cur = avgpool_direct(cur, layer.k, layer.stride)
        elif isinstance(layer, Dense):
            cur = dense_layer_direct(cur, layer.weight, layer.bias)
        elif isinstance(layer, Relu):
            cur = relu_direct(cur)
        else:
            raise AssertionError(f"oracle cannot handle {layer!r}")
    return cur
