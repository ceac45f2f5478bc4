"""Compiled inner loops for the dense ReLU network.

Parameter layout (flat float64 vector): for every input head, the first
layer's weight block stored input-major (``fan_in x fan_out``) followed by
its bias; then the shared layers in the same format.  Input-major storage
lets a sparse input touch only the weight rows of its nonzero coordinates.

All kernels take the per-head offset rows ``w_off``/``b_off`` (one entry per
layer) and scratch buffers owned by the caller, so nothing allocates inside
a training step.
"""

import numpy as np
from numba import njit


_FM = {"reassoc", "contract"}


@njit(cache=True, fastmath=_FM)
def forward(theta, sizes, w_off, b_off, idx, val, acts):
    n_layers = sizes.shape[0] - 1
    out_pos = 0
    in_pos = 0
    for l in range(n_layers):
        fi = sizes[l]
        fo = sizes[l + 1]
        wb = w_off[l]
        # separate accumulator: lets LLVM vectorize without alias checks
        acc = theta[b_off[l]:b_off[l] + fo].copy()
        if l == 0:
            for t in range(idx.shape[0]):
                v = val[t]
                if v != 0.0:
                    row = theta[wb + idx[t] * fo:wb + idx[t] * fo + fo]
                    for o in range(fo):
                        acc[o] += v * row[o]
        else:
            for i in range(fi):
                v = acts[in_pos + i]
                if v != 0.0:
                    row = theta[wb + i * fo:wb + i * fo + fo]
                    for o in range(fo):
                        acc[o] += v * row[o]
        if l < n_layers - 1:
            for o in range(fo):
                if acc[o] < 0.0:
                    acc[o] = 0.0
        acts[out_pos:out_pos + fo] = acc
        in_pos = out_pos
        out_pos += fo
    # offset of the logits inside acts
    return in_pos


@njit(cache=True, fastmath=_FM)
def backward(theta, sizes, w_off, b_off, idx, val, acts, dbuf, coef, target):
    """Add ``coef * dL/dtheta`` into ``target``.

    ``dbuf`` must hold dL/dlogits in its last ``sizes[-1]`` slots (same
    layer offsets as ``acts``).  ``target`` may alias ``theta``: each layer's
    downstream delta is formed before that layer's weights are touched.
    """
    n_layers = sizes.shape[0] - 1
    offs = np.empty(n_layers + 1, dtype=np.int64)
    offs[0] = 0
    for l in range(n_layers):
        offs[l + 1] = offs[l] + sizes[l + 1]
    for l in range(n_layers - 1, -1, -1):
        fi = sizes[l]
        fo = sizes[l + 1]
        wb = w_off[l]
        bb = b_off[l]
        d = dbuf[offs[l]:offs[l] + fo].copy()
        if l > 0:
            p0 = offs[l - 1]
            for i in range(fi):
                if acts[p0 + i] > 0.0:
                    row = theta[wb + i * fo:wb + i * fo + fo]
                    s = 0.0
                    for o in range(fo):
                        s += row[o] * d[o]
                    dbuf[p0 + i] = s
                else:
                    dbuf[p0 + i] = 0.0
        brow = target[bb:bb + fo]
        for o in range(fo):
            brow[o] += coef * d[o]
        if l == 0:
            for t in range(idx.shape[0]):
                v = val[t]
                if v != 0.0:
                    row = target[wb + idx[t] * fo:wb + idx[t] * fo + fo]
                    cv = coef * v
                    for o in range(fo):
                        row[o] += cv * d[o]
        else:
            p0 = offs[l - 1]
            for i in range(fi):
                v = acts[p0 + i]
                if v != 0.0:
                    row = target[wb + i * fo:wb + i * fo + fo]
                    cv = coef * v
                    for o in range(fo):
                        row[o] += cv * d[o]


@njit(cache=True, fastmath=_FM)
def cross_entropy_delta(acts, lo, n_out, y, dbuf):
    m = acts[lo]
    for o in range(1, n_out):
        if acts[lo + o] > m:
            m = acts[lo + o]
    s = 0.0
    for o in range(n_out):
        e = np.exp(acts[lo + o] - m)
        dbuf[lo + o] = e
        s += e
    for o in range(n_out):
        dbuf[lo + o] /= s
    dbuf[lo + y] -= 1.0
    return m + np.log(s) - acts[lo + y]


@njit(cache=True, fastmath=_FM)
def huber_delta(acts, lo, n_out, action, target_value, dbuf):
    for o in range(n_out):
        dbuf[lo + o] = 0.0
    d = acts[lo + action] - target_value
    if abs(d) <= 1.0:
        dbuf[lo + action] = d
        return 0.5 * d * d
    dbuf[lo + action] = 1.0 if d > 0 else -1.0
    return abs(d) - 0.5


# ---------------------------------------------------------------- classifier


@njit(cache=True, fastmath=_FM)
def ce_sgd_seq(theta, sizes, w_offs, b_offs, indptr, indices, data, labels,
               heads, ids, lrs, acts, dbuf):
    """Sequential single-example SGD over pool rows ``ids``; returns summed loss."""
    n_out = sizes[sizes.shape[0] - 1]
    total = 0.0
    for t in range(ids.shape[0]):
        r = ids[t]
        h = heads[r]
        lo_i = indptr[r]
        hi_i = indptr[r + 1]
        lo = forward(theta, sizes, w_offs[h], b_offs[h], indices[lo_i:hi_i],
                     data[lo_i:hi_i], acts)
        total += cross_entropy_delta(acts, lo, n_out, labels[r], dbuf)
        backward(theta, sizes, w_offs[h], b_offs[h], indices[lo_i:hi_i],
                 data[lo_i:hi_i], acts, dbuf, -lrs[t], theta)
    return total


@njit(cache=True, fastmath=_FM)
def ce_grad_accum(theta, sizes, w_offs, b_offs, indptr, indices, data, labels,
                  heads, ids, coefs, acts, dbuf, grad):
    """``grad += sum_t coefs[t] * dL_t/dtheta``; returns ``sum_t coefs[t] * L_t``."""
    n_out = sizes[sizes.shape[0] - 1]
    total = 0.0
    for t in range(ids.shape[0]):
        r = ids[t]
        h = heads[r]
        lo_i = indptr[r]
        hi_i = indptr[r + 1]
        lo = forward(theta, sizes, w_offs[h], b_offs[h], indices[lo_i:hi_i],
                     data[lo_i:hi_i], acts)
        total += coefs[t] * cross_entropy_delta(acts, lo, n_out, labels[r], dbuf)
        backward(theta, sizes, w_offs[h], b_offs[h], indices[lo_i:hi_i],
                 data[lo_i:hi_i], acts, dbuf, coefs[t], grad)
    return total


@njit(cache=True, fastmath=_FM)
def ce_sq_grad_accum(theta, sizes, w_offs, b_offs, indptr, indices, data,
                     labels, heads, ids, acts, dbuf, scratch, out):
    """``out += sum_t (dL_t/dtheta)**2`` (squares taken per example)."""
    n_out = sizes[sizes.shape[0] - 1]
    for t in range(ids.shape[0]):
        r = ids[t]
        h = heads[r]
        lo_i = indptr[r]
        hi_i = indptr[r + 1]
        scratch[:] = 0.0
        lo = forward(theta, sizes, w_offs[h], b_offs[h], indices[lo_i:hi_i],
                     data[lo_i:hi_i], acts)
        cross_entropy_delta(acts, lo, n_out, labels[r], dbuf)
        backward(theta, sizes, w_offs[h], b_offs[h], indices[lo_i:hi_i],
                 data[lo_i:hi_i], acts, dbuf, 1.0, scratch)
        for p in range(out.shape[0]):
            out[p] += scratch[p] * scratch[p]


# --------------------------------------------------------------- Q-network


@njit(cache=True, fastmath=_FM)
def huber_sgd_seq(theta, sizes, w_off, b_off, states, actions, targets, lrs,
                  acts, dbuf):
    n_out = sizes[sizes.shape[0] - 1]
    d = states.shape[1]
    idx = np.arange(d)
    total = 0.0
    for t in range(states.shape[0]):
        lo = forward(theta, sizes, w_off, b_off, idx, states[t], acts)
        total += huber_delta(acts, lo, n_out, actions[t], targets[t], dbuf)
        backward(theta, sizes, w_off, b_off, idx, states[t], acts, dbuf,
                 -lrs[t], theta)
    return total


@njit(cache=True, fastmath=_FM)
def huber_grad_accum(theta, sizes, w_off, b_off, states, actions, targets,
                     coefs, acts, dbuf, grad):
    n_out = sizes[sizes.shape[0] - 1]
    d = states.shape[1]
    idx = np.arange(d)
    total = 0.0
    for t in range(states.shape[0]):
        lo = forward(theta, sizes, w_off, b_off, idx, states[t], acts)
        total += coefs[t] * huber_delta(acts, lo, n_out, actions[t], targets[t], dbuf)
        backward(theta, sizes, w_off, b_off, idx, states[t], acts, dbuf,
                 coefs[t], grad)
    return total
