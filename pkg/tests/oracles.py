"""Slow, loop-based reference implementations used only by the tests.

These deliberately share no code with ``kdoct`` so that agreement between
the two is meaningful.
"""

import math
from fractions import Fraction

import numpy as np


def conv2d_loops(x, k, b=None, stride=1, pad=0):
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky - pad
                                ix = ox * stride + kx - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    acc += float(x[ni, ci, iy, ix]) * float(k[co, ci, ky, kx])
                    out[ni, co, oy, ox] = acc
    return out


def depthwise_loops(x, k, stride=1, pad=0):
    n, c, h, w = x.shape
    _, _, kh, kw = k.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for ni in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ky in range(kh):
                        for kx in range(kw):
                            iy = oy * stride + ky - pad
                            ix = ox * stride + kx - pad
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += float(x[ni, ci, iy, ix]) * float(k[ci, 0, ky, kx])
                    out[ni, ci, oy, ox] = acc
    return out


def linear_dots(x, w, b):
    rows = x.reshape(-1, x.shape[-1])
    out = np.zeros((rows.shape[0], w.shape[0]))
    for i, row in enumerate(rows):
        for j in range(w.shape[0]):
            out[i, j] = sum(float(row[d]) * float(w[j, d]) for d in range(w.shape[1])) + float(b[j])
    return out.reshape(x.shape[:-1] + (w.shape[0],))


def layer_norm_formula(x, ndims, gamma, beta, eps):
    lead = x.shape[: x.ndim - ndims]
    groups = x.reshape(int(np.prod(lead)) if lead else 1, -1).astype(np.float64)
    out = np.zeros_like(groups)
    for i, g in enumerate(groups):
        mu = sum(g) / len(g)
        var = sum((v - mu) ** 2 for v in g) / len(g)
        out[i] = [(v - mu) / math.sqrt(var + eps) for v in g]
    out = out.reshape(x.shape)
    return out * gamma + beta


def grn_formula(x, gamma, beta, eps):
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for ni in range(n):
        g = [math.sqrt(sum(float(v) ** 2 for v in x[ni, ci].ravel())) for ci in range(c)]
        mean_g = sum(g) / c
        for ci in range(c):
            nc = g[ci] / (mean_g + eps)
            out[ni, ci] = gamma[ci] * (x[ni, ci] * nc) + beta[ci] + x[ni, ci]
    return out


def gelu_erf(v):
    return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))


def softmax_direct(row, t=1.0):
    m = max(row)
    e = [math.exp((v - m) / t) for v in row]
    s = sum(e)
    return [v / s for v in e]


def kd_direct(student, teacher, label, t, alpha, beta):
    """Combined distillation loss for one sample, evaluated term by term."""
    ps = softmax_direct(student, t)
    pt = softmax_direct(teacher, t)
    kl = sum(pt[i] * (math.log(pt[i]) - math.log(ps[i])) for i in range(len(ps)))
    ce = -math.log(softmax_direct(student, 1.0)[label])
    return beta * ce + alpha * t * t * kl


def one_vs_rest_metrics(cm):
    """Accuracy and macro sensitivity/specificity with exact fractions."""
    k = len(cm)
    total = sum(sum(r) for r in cm)
    acc = Fraction(sum(cm[i][i] for i in range(k)), total)
    sens, spec = [], []
    for c in range(k):
        tp = fn = fp = tn = 0
        for t in range(k):
            for p in range(k):
                cnt = cm[t][p]
                if t == c and p == c:
                    tp += cnt
                elif t == c:
                    fn += cnt
                elif p == c:
                    fp += cnt
                else:
                    tn += cnt
        if tp + fn:
            sens.append(Fraction(tp, tp + fn))
        if tn + fp:
            spec.append(Fraction(tn, tn + fp))
    return acc, sum(sens) / len(sens), sum(spec) / len(spec)
