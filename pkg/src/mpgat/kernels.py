"""Hot numeric kernels with a numba path and a pure-numpy path.

The public names at the bottom of the module are bound to one of the two
implementations at import time (see ``_accel.USE_NUMBA``).  Both variants are
kept importable as ``*_loop`` / ``*_numpy`` so tests and the benchmark can
compare them directly.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# dilated causal convolution, x: (M, C_in, T), w: (C_out, C_in, K)
# ---------------------------------------------------------------------------


@njit
def _conv_forward_nb(x, w, dilation):
    # channel-last: x (M, T, C_in), w (K, C_out, C_in) -> (M, C_out, T)
    m_rows, steps, c_in = x.shape
    width, c_out, _ = w.shape
    out = np.zeros((m_rows, c_out, steps))
    for m in range(m_rows):
        for t in range(steps):
            for k in range(width):
                src = t - k * dilation
                if src < 0:
                    break
                for c in range(c_out):
                    acc = 0.0
                    for i in range(c_in):
                        acc += w[k, c, i] * x[m, src, i]
                    out[m, c, t] += acc
    return out


@njit
def _conv_backward_nb(grad, x, w, dilation):
    # grad (M, T, C_out), x (M, T, C_in), w (K, C_out, C_in)
    m_rows, steps, c_in = x.shape
    width, c_out, _ = w.shape
    gx = np.zeros((m_rows, steps, c_in))
    gw = np.zeros((width, c_out, c_in))
    for m in range(m_rows):
        for t in range(steps):
            for k in range(width):
                src = t - k * dilation
                if src < 0:
                    break
                for c in range(c_out):
                    g = grad[m, t, c]
                    for i in range(c_in):
                        gx[m, src, i] += w[k, c, i] * g
                        gw[k, c, i] += g * x[m, src, i]
    return gx, gw


def causal_conv_forward_loop(x, w, dilation):
    xt = np.ascontiguousarray(x.transpose(0, 2, 1))
    wt = np.ascontiguousarray(w.transpose(2, 0, 1))
    return _conv_forward_nb(xt, wt, dilation)


def causal_conv_backward_loop(grad, x, w, dilation):
    gt = np.ascontiguousarray(grad.transpose(0, 2, 1))
    xt = np.ascontiguousarray(x.transpose(0, 2, 1))
    wt = np.ascontiguousarray(w.transpose(2, 0, 1))
    gx, gw = _conv_backward_nb(gt, xt, wt, dilation)
    return gx.transpose(0, 2, 1), gw.transpose(1, 2, 0)


def causal_conv_forward_numpy(x, w, dilation):
    steps = x.shape[-1]
    out = np.zeros((x.shape[0], w.shape[0], steps))
    for k in range(w.shape[2]):
        shift = k * dilation
        if shift >= steps:
            continue
        out[:, :, shift:] += np.matmul(w[:, :, k], x[:, :, : steps - shift])
    return out


def causal_conv_backward_numpy(grad, x, w, dilation):
    steps = x.shape[-1]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for k in range(w.shape[2]):
        shift = k * dilation
        if shift >= steps:
            continue
        g = grad[:, :, shift:]
        gx[:, :, : steps - shift] += np.matmul(w[:, :, k].T, g)
        gw[:, :, k] = np.tensordot(g, x[:, :, : steps - shift], axes=([0, 2], [0, 2]))
    return gx, gw


# ---------------------------------------------------------------------------
# trailing moving average over axis 0, counts: (T, N)
# ---------------------------------------------------------------------------


@njit
def moving_average_loop(counts, window):
    steps, nodes = counts.shape
    out = np.full((steps, nodes), np.nan)
    for t in range(window - 1, steps):
        for n in range(nodes):
            acc = 0.0
            for j in range(t - window + 1, t + 1):
                acc += counts[j, n]
            out[t, n] = acc / window
    return out


def moving_average_numpy(counts, window):
    steps = counts.shape[0]
    out = np.full(counts.shape, np.nan)
    if window > steps:
        return out
    valid = steps - window + 1
    # sequential accumulation keeps the summation order of the loop kernel
    acc = np.zeros((valid, counts.shape[1]))
    for j in range(window):
        acc += counts[j : j + valid]
    out[window - 1 :] = acc / window
    return out


# ---------------------------------------------------------------------------
# null distribution of a rank sum: number of n-subsets per (doubled) sum
# ---------------------------------------------------------------------------


@njit
def subset_sum_counts_loop(values, n):
    total = 0
    for v in values:
        total += v
    dp = np.zeros((n + 1, total + 1), dtype=np.int64)
    dp[0, 0] = 1
    seen = 0
    for v in values:
        seen += 1
        top = n if seen > n else seen
        for k in range(top, 0, -1):
            for s in range(total, v - 1, -1):
                dp[k, s] += dp[k - 1, s - v]
    return dp[n].copy()


def subset_sum_counts_numpy(values, n):
    values = np.asarray(values, dtype=np.int64)
    total = int(values.sum())
    dp = np.zeros((n + 1, total + 1), dtype=np.int64)
    dp[0, 0] = 1
    for seen, v in enumerate(values, start=1):
        v = int(v)
        for k in range(min(n, seen), 0, -1):
            dp[k, v:] += dp[k - 1, : total + 1 - v]
    return dp[n].copy()


if USE_NUMBA:
    causal_conv_forward = causal_conv_forward_loop
    causal_conv_backward = causal_conv_backward_loop
    moving_average = moving_average_loop
    subset_sum_counts = subset_sum_counts_loop
else:
    causal_conv_forward = causal_conv_forward_numpy
    causal_conv_backward = causal_conv_backward_numpy
    moving_average = moving_average_numpy
    subset_sum_counts = subset_sum_counts_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
