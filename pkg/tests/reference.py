"""Hand-rolled reference evaluations used only as test oracles.

Deliberately written with explicit Python loops and no shared code with the
package's vectorized forward pass, so agreement between the two is a real
check and not a tautology.
"""

import math

import numpy as np


def naive_forward(net, x):
    """Evaluate a NetworkSpec with plain loops; returns float64 probabilities."""
    a = np.array(x, dtype=np.float64)
    for layer in net.layers:
        if layer.kind == "dense":
            w = layer.weight.f64()
            out = np.zeros(w.shape[0])
            for i in range(w.shape[0]):
                acc = 0.0
                for j in range(w.shape[1]):
                    acc += w[i, j] * a[j]
                out[i] = acc
            a = out
        elif layer.kind == "conv2d":
            w = layer.weight.f64()
            c_o, c_i, k, _ = w.shape
            st, pad = layer.stride, layer.padding
            c, h, wd = a.shape
            padded = np.zeros((c, h + 2 * pad, wd + 2 * pad))
            padded[:, pad : pad + h, pad : pad + wd] = a
            h_out = (h + 2 * pad - k) // st + 1
            w_out = (wd + 2 * pad - k) // st + 1
            out = np.zeros((c_o, h_out, w_out))
            for co in range(c_o):
                for i in range(h_out):
                    for j in range(w_out):
                        acc = 0.0
                        for ci in range(c_i):
                            for ki in range(k):
                                for kj in range(k):
                                    acc += (
                                        w[co, ci, ki, kj]
                                        * padded[ci, i * st + ki, j * st + kj]
                                    )
                        out[co, i, j] = acc
            a = out
        elif layer.kind == "relu":
            a = np.where(a > 0, a, 0.0)
        elif layer.kind == "flatten":
            a = np.array([v for v in a.reshape(-1)])
        elif layer.kind == "global-avg-pool":
            c, h, wd = a.shape
            out = np.zeros(c)
            for ci in range(c):
                acc = 0.0
                for i in range(h):
                    for j in range(wd):
                        acc += a[ci, i, j]
                out[ci] = acc / (h * wd)
            a = out
        elif layer.kind == "softmax":
            m = max(float(v) for v in a)
            exps = np.array([math.exp(float(v) - m) for v in a])
            a = exps / sum(float(e) for e in exps)
        else:
            raise AssertionError(layer.kind)
    return a


def naive_mean_loss(net, samples):
    total = 0.0
    for s in samples:
        probs = naive_forward(net, s.input.f64())
        total += -math.log(probs[s.label])
    return total / len(samples)
