"""Naive loop reference implementations used as independent oracles.

Everything here is written with explicit Python loops over plain numpy
scalars/arrays, on purpose: these functions share no code with the library
and are only fast enough for the small shapes the tests use.
"""

import math

import numpy as np


def conv2d_loops(x, w, b, pad):
    """x: (C,H,W), w: (O,C,k,k), b: (O,) -> (O,Ho,Wo) by direct summation."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho = H + 2 * pad - k + 1
    Wo = W + 2 * pad - k + 1
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad : pad + H, pad : pad + W] = x
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for y in range(Ho):
            for xx in range(Wo):
                acc = b[o] if b is not None else 0.0
                for c in range(C):
                    for i in range(k):
                        for j in range(k):
                            acc += w[o, c, i, j] * xp[c, y + i, xx + j]
                out[o, y, xx] = acc
    return out


def global_pool_loops(x, mode):
    C, H, W = x.shape
    out = np.zeros((C, 1, 1))
    for c in range(C):
        vals = [x[c, i, j] for i in range(H) for j in range(W)]
        out[c, 0, 0] = max(vals) if mode == "max" else sum(vals) / len(vals)
    return out


def channel_pool_loops(x, mode):
    C, H, W = x.shape
    out = np.zeros((1, H, W))
    for i in range(H):
        for j in range(W):
            vals = [x[c, i, j] for c in range(C)]
            out[0, i, j] = max(vals) if mode == "max" else sum(vals) / len(vals)
    return out


def log_softmax_loops(v):
    m = max(v)
    exps = [math.exp(x - m) for x in v]
    lse = math.log(sum(exps))
    return np.array([x - m - lse for x in v])


def sigmoid_scalar(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def channel_attention_loops(x, w0, b0, w1, b1, use_max=True, use_avg=True):
    """Transcription of the channel-gate formula with explicit matrices.

    x: (C_in,H,W); w0: (hid,C_in); b0: (hid,); w1: (C,hid); b1: (C,).
    Returns (C,1,1).  Each pooled descriptor passes the shared two-layer
    generator (ReLU between), results are summed, then squashed.
    """
    C_in, H, W = x.shape
    mx = np.array([x[c].max() for c in range(C_in)])
    av = np.array([x[c].mean() for c in range(C_in)])
    z = np.zeros(w1.shape[0])
    for pooled, used in ((mx, use_max), (av, use_avg)):
        if not used:
            continue
        h = np.maximum(w0 @ pooled + b0, 0.0)
        z = z + w1 @ h + b1
    return np.array([[[sigmoid_scalar(v)]] for v in z])


def spatial_attention_loops(x, conv_w, conv_b, use_max=True, use_avg=True):
    """Transcription of the spatial-gate formula.

    x: (C,H,W); conv_w: (1,P,7,7) with P pooled planes; conv_b: (1,).
    Returns (1,H,W).
    """
    planes = []
    if use_avg:
        planes.append(channel_pool_loops(x, "avg")[0])
    if use_max:
        planes.append(channel_pool_loops(x, "max")[0])
    stacked = np.stack(planes)
    conv = conv2d_loops(stacked, conv_w, conv_b, pad=3)
    H, W = x.shape[1:]
    out = np.zeros((1, H, W))
    for i in range(H):
        for j in range(W):
            out[0, i, j] = sigmoid_scalar(conv[0, i, j])
    return out


def prototypes_loops(support, labels, n_way):
    """support: (S,E); labels: (S,) -> (n_way,E) class means."""
    E = support.shape[1]
    out = np.zeros((n_way, E))
    for n in range(n_way):
        rows = [support[i] for i in range(len(labels)) if labels[i] == n]
        out[n] = sum(rows) / len(rows)
    return out


def protonet_logp_loops(q, protos):
    d2 = [sum((q[e] - p[e]) ** 2 for e in range(len(q))) for p in protos]
    return log_softmax_loops([-d for d in d2])


def matchingnet_logp_loops(q, support, labels, n_way):
    qn = math.sqrt(sum(v * v for v in q))
    sims = []
    for s in support:
        sn = math.sqrt(sum(v * v for v in s))
        if qn < 1e-12 or sn < 1e-12:
            sims.append(0.0)
        else:
            sims.append(sum(a * b for a, b in zip(q, s)) / (qn * sn))
    att = np.exp(log_softmax_loops(sims))
    probs = np.zeros(n_way)
    for a, y in zip(att, labels):
        probs[y] += a
    return np.log(probs)


def nll_loops(logp, labels):
    return -sum(logp[b, labels[b]] for b in range(len(labels)))


def normalize_map_loops(m):
    norm = math.sqrt(sum(v * v for v in m.reshape(-1)))
    if norm < 1e-12:
        return np.zeros_like(m)
    return m / norm


def soft_margin_loops(m_ag, m_sg):
    total = 0.0
    for a, s in zip(m_ag.reshape(-1), m_sg.reshape(-1)):
        total += math.log(1.0 + math.exp(-a * s))
    return total


def l1_loops(m_ag, m_sg):
    diffs = [abs(a - s) for a, s in zip(m_ag.reshape(-1), m_sg.reshape(-1))]
    return sum(diffs) / len(diffs)


def mse_loops(m_ag, m_sg):
    diffs = [(a - s) ** 2 for a, s in zip(m_ag.reshape(-1), m_sg.reshape(-1))]
    return sum(diffs) / len(diffs)


def smooth_l1_loops(m_ag, m_sg):
    terms = []
    for a, s in zip(m_ag.reshape(-1), m_sg.reshape(-1)):
        d = abs(a - s)
        terms.append(0.5 * d * d if d < 1.0 else d - 0.5)
    return sum(terms) / len(terms)


def attention_difference_loops(pairs):
    """pairs: list of (m_ag, m_sg) per family; mean |diff| after normalizing."""
    vals = []
    for m_ag, m_sg in pairs:
        a = normalize_map_loops(m_ag).reshape(-1)
        s = normalize_map_loops(m_sg).reshape(-1)
        vals.append(sum(abs(x - y) for x, y in zip(a, s)) / len(a))
    return sum(vals) / len(vals)


def ci95_loops(values):
    n = len(values)
    if n == 1:
        return 0.0
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return 1.96 * math.sqrt(var) / math.sqrt(n)
