"""Pure-numpy bilinear region pooling (fallback backend).

Convention (shared with the compiled backend and pinned by tests):
normalized region coordinates map onto the feature grid as x*W / y*H, each
output bin is sampled at 2x2 regularly spaced interior points, samples are
bilinearly interpolated with half-pixel cell centers (coordinates clamped to
the center lattice at the border), and the bin value is the sample average.

The whole op is linear in the feature values, so one (bins x cells) weight
matrix per region serves both forward and backward.
"""

import numpy as np

N_SAMPLES = 2  # sample points per bin axis


def _axis_weights(g0, g1, extent, n_bins):
    """Per-bin sample positions -> (index_lo, frac) on one axis."""
    span = g1 - g0
    step = span / n_bins
    offs = (np.arange(N_SAMPLES) + 0.5) / N_SAMPLES
    pos = g0 + (np.arange(n_bins)[:, None] + offs[None, :]) * step
    u = np.clip(pos - 0.5, 0.0, extent - 1.0)
    if extent == 1:
        lo = np.zeros_like(u, dtype=np.int64)
        frac = np.zeros_like(u)
    else:
        lo = np.minimum(np.floor(u).astype(np.int64), extent - 2)
        frac = u - lo
    return lo, frac


def region_matrix(box, h, w, out_h, out_w):
    """Dense (out_h*out_w, h*w) pooling weights for one normalized region."""
    x0, y0, x1, y1 = [float(v) for v in box]
    ylo, yf = _axis_weights(y0 * h, y1 * h, h, out_h)
    xlo, xf = _axis_weights(x0 * w, x1 * w, w, out_w)
    m = np.zeros((out_h * out_w, h * w), dtype=np.float64)
    bin_idx = (np.arange(out_h)[:, None, None, None] * out_w
               + np.arange(out_w)[None, None, :, None])
    bin_idx = np.broadcast_to(bin_idx, (out_h, N_SAMPLES, out_w, N_SAMPLES))
    yl = ylo[:, :, None, None]
    yfr = yf[:, :, None, None]
    xl = xlo[None, None, :, :]
    xfr = xf[None, None, :, :]
    inv_n = 1.0 / (N_SAMPLES * N_SAMPLES)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        wy = (yfr if dy else 1.0 - yfr)
        wx = (xfr if dx else 1.0 - xfr)
        cell = (yl + dy) * w + (xl + dx)
        cell = np.broadcast_to(cell, bin_idx.shape)
        wgt = np.broadcast_to(wy * wx * inv_n, bin_idx.shape)
        np.add.at(m, (bin_idx.ravel(), cell.ravel()), wgt.ravel())
    return m


def roi_align_forward(v, boxes, out_h, out_w):
    """v (B, C, H, W), boxes (B, 4) normalized -> (B, C, out_h, out_w)."""
    b, c, h, w = v.shape
    out = np.empty((b, c, out_h, out_w), dtype=v.dtype)
    for i in range(b):
        m = region_matrix(boxes[i], h, w, out_h, out_w).astype(v.dtype)
        out[i] = (v[i].reshape(c, -1) @ m.T).reshape(c, out_h, out_w)
    return out


def roi_align_backward(grad_out, boxes, h, w):
    """grad_out (B, C, out_h, out_w) -> grad wrt v (B, C, H, W)."""
    b, c, out_h, out_w = grad_out.shape
    gv = np.empty((b, c, h, w), dtype=grad_out.dtype)
    for i in range(b):
        m = region_matrix(boxes[i], h, w, out_h, out_w).astype(grad_out.dtype)
        gv[i] = (grad_out[i].reshape(c, -1) @ m).reshape(c, h, w)
    return gv
