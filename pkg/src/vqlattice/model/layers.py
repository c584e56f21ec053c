"""Forward/backward kernels for the network layers.

Every ``*_backward`` mirrors its forward and returns gradients with respect to
its inputs, accumulating parameter gradients into the ``grads`` dict that is
passed in (keys are the same names used in the parameter dict).
"""

from __future__ import annotations

import numpy as np

from ..numerics import log_softmax, one_hot, sigmoid, softmax


def _add(grads, name, value):
    if grads is None:
        return
    if name in grads:
        grads[name] += value
    else:
        grads[name] = np.array(value, dtype=np.float64)


# ----------------------------------------------------------------------------
# LSTM
# gate layout in the stacked 4D pre-activation: input, forget, output, candidate


def lstm_cell(Wx, Wh, b, x, h, c):
    D = h.shape[-1]
    z = Wx @ x + Wh @ h + b
    i = sigmoid(z[:D])
    f = sigmoid(z[D : 2 * D])
    o = sigmoid(z[2 * D : 3 * D])
    g = np.tanh(z[3 * D :])
    c2 = f * c + i * g
    tc = np.tanh(c2)
    h2 = o * tc
    return h2, c2, (x, h, c, i, f, o, g, tc)


def lstm_cell_backward(Wx, Wh, cache, dh2, dc2, grads=None, prefix=""):
    x, h, c, i, f, o, g, tc = cache
    do = dh2 * tc
    dc = dc2 + dh2 * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c
    dg = dc * i
    dz = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)]
    )
    _add(grads, prefix + "Wx", np.outer(dz, x))
    _add(grads, prefix + "Wh", np.outer(dz, h))
    _add(grads, prefix + "b", dz)
    return Wx.T @ dz, Wh.T @ dz, dc * f


def _sum_to(arr, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    lead = arr.ndim - len(shape)
    arr = arr.sum(axis=tuple(range(lead))) if lead else arr
    axes = tuple(k for k, n in enumerate(shape) if n == 1 and arr.shape[k] != 1)
    return arr.sum(axis=axes, keepdims=True) if axes else arr


def lstm_scan(Wx, Wh, b, xs):
    """Run independent LSTM streams over T steps from zero state.

    Shapes: ``xs`` (..., T, F); ``Wx`` (..., 4D, F), ``Wh`` (..., 4D, D) and
    ``b`` (..., 4D) broadcast against the leading stream dims. Stepping all
    streams in one loop keeps the Python overhead per frame constant (the
    encoder runs both directions of a whole batch as one scan).
    """
    T = xs.shape[-2]
    D = Wh.shape[-1]
    X = np.matmul(xs, np.swapaxes(Wx, -1, -2)) + b[..., None, :]
    lead = X.shape[:-2]
    hs = np.zeros(lead + (T, D))
    cs = np.zeros(lead + (T, D))
    gates = np.zeros(lead + (T, 4 * D))
    h = np.zeros(lead + (D, 1))
    c = np.zeros(lead + (D,))
    for t in range(T):
        z = X[..., t, :] + np.matmul(Wh, h)[..., 0]
        a = gates[..., t, :]
        a[..., : 3 * D] = 0.5 * (1.0 + np.tanh(0.5 * z[..., : 3 * D]))
        a[..., 3 * D :] = np.tanh(z[..., 3 * D :])
        c = a[..., D : 2 * D] * c + a[..., :D] * a[..., 3 * D :]
        hv = a[..., 2 * D : 3 * D] * np.tanh(c)
        hs[..., t, :] = hv
        cs[..., t, :] = c
        h = hv[..., None]
    return hs, (xs, hs, cs, gates)


def lstm_scan_backward(Wx, Wh, b, cache, dhs):
    """Backward of :func:`lstm_scan`; returns ``(dxs, dWx, dWh, db)``.

    Weight gradients are summed over any dims the weights were broadcast on.
    """
    xs, hs, cs, gates = cache
    T, D = hs.shape[-2:]
    dZ = np.zeros(gates.shape)
    dh_next = np.zeros(hs.shape[:-2] + (D,))
    dc_next = np.zeros_like(dh_next)
    WhT = np.swapaxes(Wh, -1, -2)
    tcs = np.tanh(cs)
    for t in range(T - 1, -1, -1):
        a = gates[..., t, :]
        i, f, o, g = a[..., :D], a[..., D : 2 * D], a[..., 2 * D : 3 * D], a[..., 3 * D :]
        tc = tcs[..., t, :]
        dh = dhs[..., t, :] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dZ[..., t, :]
        dz[..., :D] = dc * g * i * (1 - i)
        if t > 0:
            dz[..., D : 2 * D] = dc * cs[..., t - 1, :] * f * (1 - f)
        dz[..., 2 * D : 3 * D] = dh * tc * o * (1 - o)
        dz[..., 3 * D :] = dc * i * (1 - g * g)
        dh_next = np.matmul(WhT, dz[..., None])[..., 0]
        dc_next = dc * f
    h_prev = np.zeros_like(hs)
    h_prev[..., 1:, :] = hs[..., :-1, :]
    dZT = np.swapaxes(dZ, -1, -2)
    dWx = _sum_to(np.matmul(dZT, xs), Wx.shape)
    dWh = _sum_to(np.matmul(dZT, h_prev), Wh.shape)
    db = _sum_to(dZ.sum(axis=-2), b.shape)
    dxs = np.matmul(dZ, Wx)
    return dxs, dWx, dWh, db


# ----------------------------------------------------------------------------
# Vector quantizer


def vq_logits(layers, x):
    acts = [x]
    a = x
    for k, (W, b) in enumerate(layers):
        a = W @ a + b
        if k < len(layers) - 1:
            a = np.tanh(a)
        acts.append(a)
    return a, acts


def vq_forward(layers, codebook, x, mode="infer", rng=None, temperature=1.0):
    """Quantize one state vector.

    ``mode`` is ``infer`` (argmax of logits, codebook lookup), ``soft``
    (recon = probs @ codebook, differentiable) or ``hard`` (one-hot forward,
    straight-through gradient via the soft probs). ``rng`` adds Gumbel noise
    in the two training modes.
    """
    G, V, _ = codebook.shape
    logits, acts = vq_logits(layers, x)
    logits = logits.reshape(G, V)
    if mode == "infer":
        idx = np.argmax(logits, axis=1)
        return codebook[np.arange(G), idx].reshape(-1), tuple(int(k) for k in idx), None
    noisy = logits if rng is None else logits + rng.gumbel(logits.shape)
    probs = softmax(noisy / temperature, axis=1)
    idx = np.argmax(probs, axis=1)
    weights = one_hot(idx, V) if mode == "hard" else probs
    recon = np.einsum("gv,gvd->gd", weights, codebook).reshape(-1)
    return recon, tuple(int(k) for k in idx), (acts, probs, weights, temperature)


def vq_backward(layers, codebook, cache, drecon, grads=None, prefix=""):
    acts, probs, weights, temperature = cache
    G, V, d = codebook.shape
    dr = drecon.reshape(G, d)
    _add(grads, prefix + "codebook", np.einsum("gv,gd->gvd", weights, dr))
    dprobs = np.einsum("gvd,gd->gv", codebook, dr)
    dlogits = probs * (dprobs - (probs * dprobs).sum(axis=1, keepdims=True)) / temperature
    da = dlogits.reshape(-1)
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        if k < len(layers) - 1:
            da = da * (1.0 - acts[k + 1] ** 2)
        _add(grads, f"{prefix}{k}.W", np.outer(da, acts[k]))
        _add(grads, f"{prefix}{k}.b", da)
        da = W.T @ da
    return da


# ----------------------------------------------------------------------------
# Very-limited-context convolutional prediction network (kernel width 2)


def vlc_forward(embed, Wa, Wb, b, Sa, Sb, prev_ids, cur_ids):
    ep = embed[prev_ids]
    ec = embed[cur_ids]
    th = np.tanh(ep @ Wa.T + ec @ Wb.T + b)
    g = th + ep @ Sa.T + ec @ Sb.T
    return g, (prev_ids, cur_ids, ep, ec, th)


def vlc_backward(Wa, Wb, Sa, Sb, cache, dg, grads=None, prefix="vlc."):
    _, _, ep, ec, th = cache
    dpre = dg * (1.0 - th * th)
    _add(grads, prefix + "Wa", dpre.T @ ep)
    _add(grads, prefix + "Wb", dpre.T @ ec)
    _add(grads, prefix + "b", dpre.sum(axis=0))
    _add(grads, prefix + "Sa", dg.T @ ep)
    _add(grads, prefix + "Sb", dg.T @ ec)
    # embedding rows are scattered by the caller
    return dpre @ Wa + dg @ Sa, dpre @ Wb + dg @ Sb


# ----------------------------------------------------------------------------
# Joint network over the full T x (U+1) grid


def joint_grid(We, be, Wp, bp, Wo, bo, m, g):
    E = m @ We.T + be
    P = g @ Wp.T + bp
    Z = np.tanh(E[:, None, :] * P[None, :, :])
    lp = log_softmax(Z @ Wo.T + bo, axis=-1)
    return lp, (m, g, E, P, Z, lp)


def joint_grid_backward(We, Wp, Wo, cache, dlp, grads=None, prefix="joint."):
    m, g, E, P, Z, lp = cache
    dlogits = dlp - np.exp(lp) * dlp.sum(axis=-1, keepdims=True)
    K, J = Wo.shape
    _add(grads, prefix + "out.W", dlogits.reshape(-1, K).T @ Z.reshape(-1, J))
    _add(grads, prefix + "out.b", dlogits.sum(axis=(0, 1)))
    dpre = (dlogits @ Wo) * (1.0 - Z * Z)
    dE = (dpre * P[None, :, :]).sum(axis=1)
    dP = (dpre * E[:, None, :]).sum(axis=0)
    _add(grads, prefix + "enc.W", dE.T @ m)
    _add(grads, prefix + "enc.b", dE.sum(axis=0))
    _add(grads, prefix + "pred.W", dP.T @ g)
    _add(grads, prefix + "pred.b", dP.sum(axis=0))
    return dE @ We, dP @ Wp
