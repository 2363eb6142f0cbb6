"""Fused GRU and LSTM sequence layers for the autodiff tape.

The per-timestep recurrence runs inside a single tape op, with the
backward-through-time loop written by hand.  The finite-difference
oracle in ``autodiff.gradcheck`` is the correctness authority for both.

Weight packing follows the usual gate order: GRU (reset, update,
candidate), LSTM (input, forget, cell, output).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, record_op, _stable_sigmoid


def gru_layer(
    x: Tensor,
    wx: Tensor,
    wh: Tensor,
    bx: Tensor,
    bh: Tensor,
    h0: Tensor | None = None,
    reverse: bool = False,
) -> Tensor:
    """Run a single-direction GRU over a (T, d_in) sequence.

    wx: (3H, d_in), wh: (3H, H), bx/bh: (3H,).  The hidden-side bias is
    kept separate because the candidate path multiplies it by the reset
    gate.  Returns the (T, H) hidden states in input order.
    """
    T, _ = x.shape
    if T < 1:
        raise ValueError("gru_layer: empty input sequence")
    H3 = wx.shape[0]
    H = H3 // 3
    dtype = x.dtype

    pre = x.data @ wx.data.T + bx.data  # (T, 3H)
    order = range(T - 1, -1, -1) if reverse else range(T)

    hs = np.empty((T, H), dtype=dtype)
    r_all = np.empty((T, H), dtype=dtype)
    z_all = np.empty((T, H), dtype=dtype)
    n_all = np.empty((T, H), dtype=dtype)
    hn_all = np.empty((T, H), dtype=dtype)
    hprev_all = np.empty((T, H), dtype=dtype)

    h = np.zeros(H, dtype=dtype) if h0 is None else h0.data
    whd, bhd = wh.data, bh.data
    for t in order:
        gh = whd @ h + bhd
        p = pre[t]
        r = _stable_sigmoid(p[:H] + gh[:H])
        z = _stable_sigmoid(p[H : 2 * H] + gh[H : 2 * H])
        hn = gh[2 * H :]
        n = np.tanh(p[2 * H :] + r * hn)
        hprev_all[t] = h
        h = (1.0 - z) * n + z * h
        hs[t] = h
        r_all[t], z_all[t], n_all[t], hn_all[t] = r, z, n, hn

    out = Tensor(hs)

    def bwd(g_out):
        dpre = np.empty((T, 3 * H), dtype=dtype)
        dwh = np.zeros_like(whd)
        dbh = np.zeros_like(bhd)
        dh_carry = np.zeros(H, dtype=dtype)
        for t in reversed(order):
            dh = g_out[t] + dh_carry
            r, z, n, hn, hp = r_all[t], z_all[t], n_all[t], hn_all[t], hprev_all[t]
            dz = dh * (hp - n) * z * (1.0 - z)
            dn_pre = dh * (1.0 - z) * (1.0 - n * n)
            dr_pre = dn_pre * hn * r * (1.0 - r)
            dpre[t, :H] = dr_pre
            dpre[t, H : 2 * H] = dz
            dpre[t, 2 * H :] = dn_pre
            dgh = np.concatenate([dr_pre, dz, dn_pre * r])
            dwh += np.outer(dgh, hp)
            dbh += dgh
            dh_carry = dh * z + whd.T @ dgh
        dx = dpre @ wx.data
        dwx = dpre.T @ x.data
        dbx = dpre.sum(axis=0)
        dh0 = dh_carry if h0 is not None else None
        grads = [dx, dwx, dwh, dbx, dbh]
        if h0 is not None:
            grads.append(dh0)
        return grads

    inputs = [x, wx, wh, bx, bh] + ([h0] if h0 is not None else [])
    record_op(inputs, (out,), bwd)
    return out


def lstm_layer(
    x: Tensor,
    wx: Tensor,
    wh: Tensor,
    b: Tensor,
    h0: Tensor | None = None,
    c0: Tensor | None = None,
) -> Tensor:
    """Run a single LSTM layer over a (T, d_in) sequence, left to right.

    wx: (4H, d_in), wh: (4H, H), b: (4H,).  Returns (T, H) hidden states.
    """
    T, _ = x.shape
    if T < 1:
        raise ValueError("lstm_layer: empty input sequence")
    H = wx.shape[0] // 4
    dtype = x.dtype

    pre = x.data @ wx.data.T + b.data  # (T, 4H)
    i_all = np.empty((T, H), dtype=dtype)
    f_all = np.empty((T, H), dtype=dtype)
    g_all = np.empty((T, H), dtype=dtype)
    o_all = np.empty((T, H), dtype=dtype)
    tc_all = np.empty((T, H), dtype=dtype)
    cprev_all = np.empty((T, H), dtype=dtype)
    hprev_all = np.empty((T, H), dtype=dtype)
    hs = np.empty((T, H), dtype=dtype)

    h = np.zeros(H, dtype=dtype) if h0 is None else h0.data
    c = np.zeros(H, dtype=dtype) if c0 is None else c0.data
    whd = wh.data
    for t in range(T):
        gates = pre[t] + whd @ h
        i = _stable_sigmoid(gates[:H])
        f = _stable_sigmoid(gates[H : 2 * H])
        gg = np.tanh(gates[2 * H : 3 * H])
        o = _stable_sigmoid(gates[3 * H :])
        hprev_all[t] = h
        cprev_all[t] = c
        c = f * c + i * gg
        tc = np.tanh(c)
        h = o * tc
        hs[t] = h
        i_all[t], f_all[t], g_all[t], o_all[t], tc_all[t] = i, f, gg, o, tc

    out = Tensor(hs)

    def bwd(g_out):
        dpre = np.empty((T, 4 * H), dtype=dtype)
        dwh = np.zeros_like(whd)
        dh_carry = np.zeros(H, dtype=dtype)
        dc_carry = np.zeros(H, dtype=dtype)
        for t in range(T - 1, -1, -1):
            i, f, gg, o, tc = i_all[t], f_all[t], g_all[t], o_all[t], tc_all[t]
            dh = g_out[t] + dh_carry
            do_pre = dh * tc * o * (1.0 - o)
            dc = dh * o * (1.0 - tc * tc) + dc_carry
            df_pre = dc * cprev_all[t] * f * (1.0 - f)
            di_pre = dc * gg * i * (1.0 - i)
            dg_pre = dc * i * (1.0 - gg * gg)
            dgates = np.concatenate([di_pre, df_pre, dg_pre, do_pre])
            dpre[t] = dgates
            dwh += np.outer(dgates, hprev_all[t])
            dh_carry = whd.T @ dgates
            dc_carry = dc * f
        dx = dpre @ wx.data
        dwx = dpre.T @ x.data
        db = dpre.sum(axis=0)
        grads = [dx, dwx, dwh, db]
        if h0 is not None:
            grads.append(dh_carry)
        if c0 is not None:
            grads.append(dc_carry)
        return grads

    inputs = [x, wx, wh, b]
    if h0 is not None:
        inputs.append(h0)
    if c0 is not None:
        inputs.append(c0)
    record_op(inputs, (out,), bwd)
    return out


def init_gru(rng: np.random.Generator, d_in: int, hidden: int, dtype=np.float64):
    """Uniform(-1/sqrt(H), 1/sqrt(H)) initialization, packed gate layout."""
    a = 1.0 / np.sqrt(hidden)
    return {
        "wx": Tensor(rng.uniform(-a, a, (3 * hidden, d_in)).astype(dtype), requires_grad=True),
        "wh": Tensor(rng.uniform(-a, a, (3 * hidden, hidden)).astype(dtype), requires_grad=True),
        "bx": Tensor(np.zeros(3 * hidden, dtype=dtype), requires_grad=True),
        "bh": Tensor(np.zeros(3 * hidden, dtype=dtype), requires_grad=True),
    }


def init_lstm(rng: np.random.Generator, d_in: int, hidden: int, dtype=np.float64):
    a = 1.0 / np.sqrt(hidden)
    return {
        "wx": Tensor(rng.uniform(-a, a, (4 * hidden, d_in)).astype(dtype), requires_grad=True),
        "wh": Tensor(rng.uniform(-a, a, (4 * hidden, hidden)).astype(dtype), requires_grad=True),
        "b": Tensor(np.zeros(4 * hidden, dtype=dtype), requires_grad=True),
    }
