"""Independent scalar-loop reference implementations used as test oracles."""

import math

import numpy as np


def conv_oracle(x, w, b):
    """Direct nested-loop same-padded cross-correlation, (T, F, Cin) input."""
    t_len, f_len, cin = x.shape
    k, _, _, cout = w.shape
    p = k // 2
    out = np.zeros((t_len, f_len, cout))
    for t in range(t_len):
        for f in range(f_len):
            for o in range(cout):
                acc = b[o]
                for i in range(k):
                    for j in range(k):
                        ti, fj = t + i - p, f + j - p
                        if 0 <= ti < t_len and 0 <= fj < f_len:
                            for c in range(cin):
                                acc += x[ti, fj, c] * w[i, j, c, o]
                out[t, f, o] = acc
    return out


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def pool_oracle(x, pt, pf):
    t_len, f_len, c = x.shape
    out = np.zeros((t_len // pt, f_len // pf, c))
    for t in range(t_len // pt):
        for f in range(f_len // pf):
            for k in range(c):
                out[t, f, k] = max(x[t * pt + i, f * pf + j, k]
                                   for i in range(pt) for j in range(pf))
    return out


def glu_oracle(x, W, b, V, c, pool):
    lin = conv_oracle(x, W, b)
    gate = conv_oracle(x, V, c)
    y = np.zeros_like(lin)
    for idx in np.ndindex(*lin.shape):
        y[idx] = lin[idx] * sigmoid(gate[idx])
    return pool_oracle(y, *pool)


def gru_oracle(x, w_in, w_rec, bias, reverse=False):
    """Scalar-loop GRU: gates ordered update, reset, candidate; h' = (1-z)h + z n."""
    t_len, d = x.shape
    H = w_rec.shape[0]
    h = [0.0] * H
    out = np.zeros((t_len, H))
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in steps:
        z, r = [0.0] * H, [0.0] * H
        for j in range(H):
            az = bias[j] + sum(x[t, i] * w_in[i, j] for i in range(d)) \
                + sum(h[i] * w_rec[i, j] for i in range(H))
            ar = bias[H + j] + sum(x[t, i] * w_in[i, H + j] for i in range(d)) \
                + sum(h[i] * w_rec[i, H + j] for i in range(H))
            z[j], r[j] = sigmoid(az), sigmoid(ar)
        new = [0.0] * H
        for j in range(H):
            an = bias[2 * H + j] + sum(x[t, i] * w_in[i, 2 * H + j] for i in range(d)) \
                + sum(r[i] * h[i] * w_rec[i, 2 * H + j] for i in range(H))
            new[j] = (1 - z[j]) * h[j] + z[j] * math.tanh(an)
        h = new
        out[t] = h
    return out


def attention_pool_oracle(o, z):
    """Per class: sum_t o*z / sum_t z, with explicit loops."""
    t_len, c = o.shape
    prime = np.zeros_like(o)
    clip = np.zeros(c)
    for k in range(c):
        num = den = 0.0
        for t in range(t_len):
            prime[t, k] = o[t, k] * z[t, k]
            num += prime[t, k]
            den += z[t, k]
        clip[k] = num / den
    return prime, clip


def softmax_rows(a):
    out = np.zeros_like(a)
    for t in range(a.shape[0]):
        m = max(a[t])
        e = [math.exp(v - m) for v in a[t]]
        s = sum(e)
        out[t] = [v / s for v in e]
    return out
