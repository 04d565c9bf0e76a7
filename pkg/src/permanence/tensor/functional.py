"""Fused differentiable operations used by the layer classes.

Each op computes its forward pass in numpy and registers a hand-written
backward closure, which keeps the graph small (one node per layer call or per
recurrent sequence) and the Python overhead low.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, _sigmoid


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; leading axes are batch."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input feature dim {x.shape[-1]} != weight in_features {weight.shape[1]}"
        )
    xd, w = x.data, weight.data
    out = xd @ w.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, bw)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return Tensor._make(np.asarray(np.mean(diff * diff)), (pred, target), bw)


# -- convolution ------------------------------------------------------------
def _offset_slices(offs, sizes) -> tuple:
    return (slice(None), slice(None)) + tuple(slice(o, o + n) for o, n in zip(offs, sizes))


def conv(x: Tensor, weight: Tensor, bias: Tensor | None, padding: tuple, name: str = "conv") -> Tensor:
    """Stride-1 N-d cross-correlation.

    x: (B, C_in, *spatial), weight: (C_out, C_in, *kernel).  Columns are laid
    out (B, C_in * prod(kernel), P) so each sample is one GEMM that lands
    directly in channels-first order.
    """
    nd = weight.ndim - 2
    if x.ndim != nd + 2:
        raise ShapeError(f"{name}: expected {nd + 2}-d input, got shape {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"{name}: input channels {x.shape[1]} != weight channels {weight.shape[1]}")
    kernel = weight.shape[2:]
    spatial = x.shape[2:]
    for axis, (s, k, p) in enumerate(zip(spatial, kernel, padding)):
        if s + 2 * p < k:
            raise ShapeError(
                f"{name}: spatial dim {axis} of size {s} (padding {p}) is smaller than kernel {k}"
            )
    xd = x.data
    B, cin = xd.shape[:2]
    cout = weight.shape[0]
    pad = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(xd, pad) if any(padding) else xd
    out_sp = tuple(s + 2 * p - k + 1 for s, k, p in zip(spatial, kernel, padding))
    P = int(np.prod(out_sp))
    offsets = list(np.ndindex(*kernel))

    cols = np.empty((B, cin, len(offsets)) + out_sp, dtype=xd.dtype)
    for j, offs in enumerate(offsets):
        cols[:, :, j] = xp[_offset_slices(offs, out_sp)]
    cols = cols.reshape(B, -1, P)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((B, cout) + out_sp)

    def bw(g):
        g3 = g.reshape(B, cout, P)
        gw = np.zeros_like(wmat)
        for b in range(B):
            gw += g3[b] @ cols[b].T
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape((B, cin, len(offsets)) + out_sp)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for j, offs in enumerate(offsets):
                gxp[_offset_slices(offs, out_sp)] += dcols[:, :, j]
            crop = (slice(None), slice(None)) + tuple(
                slice(p, p + s) for p, s in zip(padding, spatial)
            )
            gx = gxp[crop]
        return gx, gw.reshape(weight.shape), gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, bw)


def max_pool(x: Tensor, kernel: tuple, name: str = "maxpool") -> Tensor:
    """Non-overlapping max pooling (stride == kernel), trailing remainders dropped.

    Ties go to the first offset in row-major kernel order.
    """
    nd = len(kernel)
    if x.ndim != nd + 2:
        raise ShapeError(f"{name}: expected {nd + 2}-d input, got shape {x.shape}")
    spatial = x.shape[2:]
    for axis, (s, k) in enumerate(zip(spatial, kernel)):
        if s < k:
            raise ShapeError(f"{name}: spatial dim {axis} of size {s} is smaller than pool {k}")
    out_sp = tuple(s // k for s, k in zip(spatial, kernel))
    xd = x.data
    B, C = xd.shape[:2]
    crop = (slice(None), slice(None)) + tuple(slice(0, n * k) for n, k in zip(out_sp, kernel))
    # (B, C, n1, k1, n2, k2, ...) -> (B, C, n1, n2, ..., k1 * k2 * ...)
    split = (B, C) + tuple(d for n, k in zip(out_sp, kernel) for d in (n, k))
    order = (0, 1) + tuple(range(2, 2 + 2 * nd, 2)) + tuple(range(3, 3 + 2 * nd, 2))
    K = int(np.prod(kernel))
    win = xd[crop].reshape(split).transpose(order).reshape((B, C) + out_sp + (K,))
    arg = win.argmax(axis=-1)[..., None]  # argmax keeps the first maximum
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, arg, g[..., None], axis=-1)
        inv = np.argsort(order)
        gcrop = gwin.reshape(tuple(split[i] for i in order)).transpose(inv).reshape(xd[crop].shape)
        if gcrop.shape == x.shape:
            return (gcrop,)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[crop] = gcrop
        return (gx,)

    return Tensor._make(out, (x,), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (B, H, W) of a (B, C, H, W) tensor.

    In training mode the running statistics arrays are updated in place.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm2d: expected (B, {gamma.shape[0]}, H, W), got {x.shape}")
    xd = x.data
    axes = (0, 2, 3)
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        n = xd.size // xd.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    shp = (1, -1, 1, 1)
    xhat = (xd - mu.reshape(shp)) * inv_std.reshape(shp)
    out = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shp)
        if training:
            m = xd.size // xd.shape[1]
            gx = (inv_std.reshape(shp) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv_std.reshape(shp)
        return gx, ggamma, gbeta

    return Tensor._make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


def adaptive_avg_pool_time(x: Tensor, out_len: int) -> Tensor:
    """Average-pool the last axis of ``x`` to exactly ``out_len`` steps."""
    T = x.shape[-1]
    if T < 1:
        raise ShapeError("adaptive_avg_pool_time: empty time axis")
    if T == out_len:
        return x
    P = pooling_matrix(T, out_len, x.dtype)
    xd = x.data
    return Tensor._make(xd @ P, (x,), lambda g: (g @ P.T,))


def pooling_matrix(T: int, out_len: int, dtype=np.float64) -> np.ndarray:
    """(T, out_len) averaging matrix; window i covers [floor(iT/n), ceil((i+1)T/n))."""
    P = np.zeros((T, out_len), dtype=dtype)
    for i in range(out_len):
        lo = (i * T) // out_len
        hi = -((-(i + 1) * T) // out_len)
        P[lo:hi, i] = 1.0 / (hi - lo)
    return P


# -- recurrent cells ----------------------------------------------------------
def gru_sequence(
    x: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    reverse: bool = False,
) -> Tensor:
    """Run a single-direction GRU over ``x`` of shape (B, T, I); returns (B, T, H).

    Gate layout follows the usual (reset, update, new) stacking.
    """
    B, T, I = x.shape
    H = w_hh.shape[1]
    if w_ih.shape != (3 * H, I):
        raise ShapeError(f"gru: input feature dim {I} does not match weight {w_ih.shape}")
    Wih, Whh = w_ih.data, w_hh.data
    dtype = x.dtype
    GI = x.data @ Wih.T + b_ih.data  # (B, T, 3H)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    hs = np.zeros((B, T, H), dtype=dtype)
    hprev = np.zeros((T, B, H), dtype=dtype)
    r_all = np.empty((T, B, H), dtype=dtype)
    z_all = np.empty((T, B, H), dtype=dtype)
    n_all = np.empty((T, B, H), dtype=dtype)
    ghn_all = np.empty((T, B, H), dtype=dtype)
    h = np.zeros((B, H), dtype=dtype)
    for t in steps:
        gi = GI[:, t]
        gh = h @ Whh.T + b_hh.data
        r = _sigmoid(gi[:, :H] + gh[:, :H])
        z = _sigmoid(gi[:, H : 2 * H] + gh[:, H : 2 * H])
        n = np.tanh(gi[:, 2 * H :] + r * gh[:, 2 * H :])
        hprev[t] = h
        h = (1.0 - z) * n + z * h
        r_all[t], z_all[t], n_all[t], ghn_all[t] = r, z, n, gh[:, 2 * H :]
        hs[:, t] = h

    def bw(g):
        dGI = np.zeros_like(GI)
        dWhh = np.zeros_like(Whh)
        dbhh = np.zeros(3 * H, dtype=dtype)
        dh = np.zeros((B, H), dtype=dtype)
        back = range(T) if reverse else range(T - 1, -1, -1)
        for t in back:
            dh = dh + g[:, t]
            r, z, n, ghn, hp = r_all[t], z_all[t], n_all[t], ghn_all[t], hprev[t]
            dn = dh * (1.0 - z)
            dz = dh * (hp - n)
            dan = dn * (1.0 - n * n)
            dr = dan * ghn
            dar = dr * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dGH = np.concatenate([dar, daz, dan * r], axis=1)
            dGI[:, t] = np.concatenate([dar, daz, dan], axis=1)
            dWhh += dGH.T @ hp
            dbhh += dGH.sum(axis=0)
            dh = dh * z + dGH @ Whh
        gx = dGI @ Wih
        dGI2 = dGI.reshape(-1, 3 * H)
        dWih = dGI2.T @ x.data.reshape(-1, I)
        dbih = dGI2.sum(axis=0)
        return gx, dWih, dWhh, dbih, dbhh

    return Tensor._make(hs, (x, w_ih, w_hh, b_ih, b_hh), bw)


def _lstm_step(gates: np.ndarray, c: np.ndarray, H: int):
    i = _sigmoid(gates[:, :H])
    f = _sigmoid(gates[:, H : 2 * H])
    gg = np.tanh(gates[:, 2 * H : 3 * H])
    o = _sigmoid(gates[:, 3 * H :])
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    return i, f, gg, o, c_new, tc


def _lstm_step_back(dh, dc, i, f, gg, o, tc, c_prev):
    dc = dc + dh * o * (1.0 - tc * tc)
    do = dh * tc
    dA = np.concatenate(
        [
            dc * gg * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            do * o * (1.0 - o),
        ],
        axis=1,
    )
    return dA, dc * f


def lstm_sequence(
    x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor
) -> Tensor:
    """LSTM over (B, T, I) from zero state.

    Returns (B, T, 2H): hidden states in ``[..., :H]`` and cell states in ``[..., H:]``.
    """
    B, T, I = x.shape
    H = w_hh.shape[1]
    if w_ih.shape != (4 * H, I):
        raise ShapeError(f"lstm: input feature dim {I} does not match weight {w_ih.shape}")
    Wih, Whh = w_ih.data, w_hh.data
    dtype = x.dtype
    GI = x.data @ Wih.T + b_ih.data
    out = np.empty((B, T, 2 * H), dtype=dtype)
    cache = []
    h = np.zeros((B, H), dtype=dtype)
    c = np.zeros((B, H), dtype=dtype)
    for t in range(T):
        gates = GI[:, t] + h @ Whh.T + b_hh.data
        i, f, gg, o, c_new, tc = _lstm_step(gates, c, H)
        cache.append((i, f, gg, o, tc, c, h))
        c = c_new
        h = o * tc
        out[:, t, :H] = h
        out[:, t, H:] = c

    def bw(g):
        dGI = np.empty((B, T, 4 * H), dtype=dtype)
        dWhh = np.zeros_like(Whh)
        dh = np.zeros((B, H), dtype=dtype)
        dc = np.zeros((B, H), dtype=dtype)
        for t in range(T - 1, -1, -1):
            i, f, gg, o, tc, c_prev, h_prev = cache[t]
            dh = dh + g[:, t, :H]
            dc = dc + g[:, t, H:]
            dA, dc = _lstm_step_back(dh, dc, i, f, gg, o, tc, c_prev)
            dGI[:, t] = dA
            dWhh += dA.T @ h_prev
            dh = dA @ Whh
        dGI2 = dGI.reshape(-1, 4 * H)
        return (
            dGI @ Wih,
            dGI2.T @ x.data.reshape(-1, I),
            dWhh,
            dGI2.sum(axis=0),
            dGI2.sum(axis=0).copy(),
        )

    return Tensor._make(out, (x, w_ih, w_hh, b_ih, b_hh), bw)


def lstm_cell(
    x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor
) -> Tensor:
    """One LSTM step; returns (B, 2H) with new hidden then new cell state."""
    H = w_hh.shape[1]
    if w_ih.shape[1] != x.shape[-1] or h.shape[-1] != H or c.shape[-1] != H:
        raise ShapeError(
            f"lstm_cell: input {x.shape}, state {h.shape}/{c.shape} vs weights {w_ih.shape}"
        )
    Wih, Whh = w_ih.data, w_hh.data
    gates = x.data @ Wih.T + b_ih.data + h.data @ Whh.T + b_hh.data
    i, f, gg, o, c_new, tc = _lstm_step(gates, c.data, H)
    out = np.concatenate([o * tc, c_new], axis=1)

    def bw(g):
        dA, dc_prev = _lstm_step_back(g[:, :H], g[:, H:], i, f, gg, o, tc, c.data)
        db = dA.sum(axis=0)
        return dA @ Wih, dA @ Whh, dc_prev, dA.T @ x.data, dA.T @ h.data, db, db.copy()

    return Tensor._make(out, (x, h, c, w_ih, w_hh, b_ih, b_hh), bw)
