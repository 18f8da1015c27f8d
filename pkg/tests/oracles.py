"""Independent reference computations used to freeze expected values.

Nothing here imports the forward/backward or optimizer code under test.
"""

import numpy as np


def unpack_mlp(layer_dims, flat):
    """Split a flat vector into [(W, b), ...] for consecutive dense layers."""
    out, k = [], 0
    for i, o in layer_dims:
        W = flat[k : k + i * o].reshape(i, o)
        k += i * o
        b = flat[k : k + o]
        k += o
        out.append((W, b))
    assert k == flat.size
    return out


def mlp_loss(layer_dims, flat, x, y, head="xent"):
    """Mean loss of a dense/ReLU stack (ReLU between dense layers)."""
    h = x
    weights = unpack_mlp(layer_dims, flat)
    for n, (W, b) in enumerate(weights):
        h = h @ W + b
        if n < len(weights) - 1:
            h = np.maximum(h, 0.0)
    if head == "xent":
        z = h - h.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -np.mean(logp[np.arange(len(y)), y])
    return 0.5 * np.mean(np.sum((h - y) ** 2, axis=1))


def central_difference(f, theta, eps=1e-5):
    g = np.zeros_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = eps
        g[k] = (f(theta + e) - f(theta - e)) / (2 * eps)
    return g


def js_bits(p, q):
    """Jensen-Shannon divergence written out term by term (log base 2)."""
    p = [v / sum(p) for v in p]
    q = [v / sum(q) for v in q]
    m = [(a + b) / 2 for a, b in zip(p, q)]
    total = 0.0
    for a, b, c in zip(p, q, m):
        if a > 0:
            total += 0.5 * a * np.log2(a / c)
        if b > 0:
            total += 0.5 * b * np.log2(b / c)
    return total


def scalar_smofi_trace(clients, beta, lr, alpha, weights, beta_g, w0, m_g0=(0.0, 0.0, 0.0, 0.0)):
    """Hand-unrolled SMoFi round for the model x -> w1*x + b1 -> w2*a + b2, squared loss.

    ``clients`` maps id -> list of (x, target) batches of size 1, one per step.
    The client half (w1, b1) uses its own momentum; the server half (w2, b2)
    uses the fused buffer. Returns the per-client final params, the fused
    buffers after every step, and the new global params/momentum.
    """
    w1_0, b1_0, w2_0, b2_0 = w0
    T = {c: len(b) for c, b in clients.items()}
    ids = sorted(clients)
    state = {c: dict(w1=w1_0, b1=b1_0, w2=w2_0, b2=b2_0, mc=(0.0, 0.0), ms=(0.0, 0.0)) for c in ids}
    fused = (0.0, 0.0)
    fused_log = []
    history = []  # (id, finish step, buffer)
    for t in range(1, max(T.values()) + 1):
        for c in ids:
            if T[c] < t:
                continue
            s = state[c]
            x, target = clients[c][t - 1]
            a = s["w1"] * x + s["b1"]
            y = s["w2"] * a + s["b2"]
            dy = y - target  # d(0.5*(y-t)^2)/dy, batch of one
            g_w2, g_b2 = dy * a, dy
            da = dy * s["w2"]
            g_w1, g_b1 = da * x, da
            ms = (beta * fused[0] + g_w2, beta * fused[1] + g_b2)
            mc = (beta * s["mc"][0] + g_w1, beta * s["mc"][1] + g_b1)
            s.update(
                w2=s["w2"] - lr * ms[0], b2=s["b2"] - lr * ms[1],
                w1=s["w1"] - lr * mc[0], b1=s["b1"] - lr * mc[1],
                ms=ms, mc=mc,
            )
            if T[c] == t:
                history.append((c, t, ms))
        current = [state[c]["ms"] for c in ids if T[c] > t]
        stale = [((t - fin + 1) ** alpha) for _, fin, _ in history]
        num0 = sum(m[0] for m in current) + sum(s * m[0] for s, (_, _, m) in zip(stale, history))
        num1 = sum(m[1] for m in current) + sum(s * m[1] for s, (_, _, m) in zip(stale, history))
        count = len(current) + len(history)
        fused = (num0 / count, num1 / count)
        fused_log.append(fused)

    keys = ("w1", "b1", "w2", "b2")
    avg = [sum(weights[c] * state[c][k] for c in ids) for k in keys]
    m_g = [beta_g * m + (w - a) for m, w, a in zip(m_g0, w0, avg)]
    new_w = [w - m for w, m in zip(w0, m_g)]
    finals = {c: [state[c][k] for k in keys] for c in ids}
    return finals, fused_log, avg, new_w, m_g
