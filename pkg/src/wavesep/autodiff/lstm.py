"""Fused bidirectional LSTM with hand-written backpropagation through time.

Both directions run in the same time loop: direction 1 reads the sequence
reversed, so one batched matmul per step serves both. Gate order along the
4H axis is input, forget, cell, output.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import ops
from .tensor import Tensor, make_node


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1)


def bilstm_layer(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Tensor:
    """One bidirectional layer.

    ``x`` is time-major ``(T, B, C)``; ``w_ih`` is ``(2, 4H, C)``, ``w_hh``
    ``(2, 4H, H)``, ``bias`` ``(2, 4H)``. Returns ``(T, B, 2H)`` with the
    forward direction in the first H features. Initial states are zero.
    """
    steps, batch, cin = x.shape
    dirs, four_h, cin_w = w_ih.shape
    hidden = four_h // 4
    if dirs != 2 or cin_w != cin or w_hh.shape != (2, four_h, hidden) or bias.shape != (2, four_h):
        raise ShapeError(f"bilstm_layer: bad shapes x={x.shape} w_ih={w_ih.shape} "
                         f"w_hh={w_hh.shape} bias={bias.shape}")
    dtype = x.data.dtype
    xs = x.data
    flat_x = xs.reshape(steps * batch, cin)
    # (2, T, B, 4H): direction 1 stored in processing (reversed) order
    z = np.empty((2, steps, batch, four_h), dtype=dtype)
    z[0] = (flat_x @ w_ih.data[0].T).reshape(steps, batch, four_h) + bias.data[0]
    z[1] = (flat_x @ w_ih.data[1].T).reshape(steps, batch, four_h)[::-1] + bias.data[1]
    whh_t = w_hh.data.transpose(0, 2, 1)  # (2, H, 4H)

    # one tanh serves every gate: sigmoid(a) = 0.5 * tanh(a / 2) + 0.5, so the
    # sigmoid columns are pre-scaled by 1/2 and mapped back affinely
    h2, h3 = 2 * hidden, 3 * hidden
    pre = np.full(four_h, 0.5, dtype=dtype)
    pre[h2:h3] = 1.0
    post_add = np.full(four_h, 0.5, dtype=dtype)
    post_add[h2:h3] = 0.0
    z *= pre
    whh_t = whh_t * pre

    gates = np.empty_like(z)
    cells = np.empty((2, steps, batch, hidden), dtype=dtype)
    hs = np.empty_like(cells)
    h = np.zeros((2, batch, hidden), dtype=dtype)
    c = np.zeros_like(h)
    for t in range(steps):
        act = gates[:, t]
        np.tanh(z[:, t] + np.matmul(h, whh_t), out=act)
        act *= pre
        act += post_add
        c = act[..., hidden:h2] * c + act[..., :hidden] * act[..., h2:h3]
        cells[:, t] = c
        h = act[..., h3:] * np.tanh(c)
        hs[:, t] = h

    out = np.concatenate([hs[0], hs[1, ::-1]], axis=-1)

    def backward_fn(g):
        gh = np.empty((2, steps, batch, hidden), dtype=g.dtype)
        gh[0] = g[..., :hidden]
        gh[1] = g[::-1, :, hidden:]
        i, f = gates[..., :hidden], gates[..., hidden:h2]
        cc, o = gates[..., h2:h3], gates[..., h3:]
        tc = np.tanh(cells)
        c_prev = np.zeros_like(cells)
        c_prev[:, 1:] = cells[:, :-1]
        # per-step factors: dz_{i,f,g} = dc * m3, dz_o = dh * m_o, dc += dh * q
        m3 = np.stack([cc * i * (1 - i), c_prev * f * (1 - f), i * (1 - cc * cc)], axis=3)
        m_o = tc * o * (1 - o)
        q = o * (1 - tc * tc)
        dz = np.empty_like(gates)
        dz3 = dz[..., :h3].reshape(2, steps, batch, 3, hidden)
        dh_next = np.zeros((2, batch, hidden), dtype=g.dtype)
        dc_next = np.zeros_like(dh_next)
        whh = w_hh.data
        for t in range(steps - 1, -1, -1):
            dh = gh[:, t] + dh_next
            dc = dh * q[:, t] + dc_next
            np.multiply(dc[:, :, None, :], m3[:, t], out=dz3[:, t])
            np.multiply(dh, m_o[:, t], out=dz[:, t, :, h3:])
            dc_next = dc * f[:, t]
            dh_next = np.matmul(dz[:, t], whh)

        gx = gw_ih = gw_hh = gb = None
        flat_dz = dz.reshape(2, steps * batch, four_h)
        # direction 1 back in natural time order
        dz_bwd = np.ascontiguousarray(dz[1, ::-1]).reshape(steps * batch, four_h)
        if w_hh.requires_grad:
            h_prev = np.zeros_like(hs)
            h_prev[:, 1:] = hs[:, :-1]
            h_prev = h_prev.reshape(2, steps * batch, hidden)
            gw_hh = np.matmul(flat_dz.transpose(0, 2, 1), h_prev)
        if bias.requires_grad:
            gb = flat_dz.sum(axis=1)
        if w_ih.requires_grad:
            gw_ih = np.stack([flat_dz[0].T @ flat_x, dz_bwd.T @ flat_x])
        if x.requires_grad:
            gx = (flat_dz[0] @ w_ih.data[0] + dz_bwd @ w_ih.data[1]).reshape(steps, batch, cin)
        return gx, gw_ih, gw_hh, gb

    return make_node(out, (x, w_ih, w_hh, bias), backward_fn, "bilstm")


def bilstm_forward(x: Tensor, layers, dropout: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Stack of bidirectional layers; ``layers`` holds ``(w_ih, w_hh, bias)`` tensors.

    Dropout, when active, is applied to the output of every layer but the last.
    """
    for k, (w_ih, w_hh, bias) in enumerate(layers):
        if k:
            x = ops.dropout(x, dropout, rng, training)
        x = bilstm_layer(x, w_ih, w_hh, bias)
    return x
