"""Pure numpy implementations of the hot kernels.

These mirror the signatures in ``_ckernels.pyx`` and are used when the
compiled extension is unavailable (or disabled with ``DULDA_PURE_PYTHON=1``).
The strip-area routine here uses the closed-form cumulative area of a
rotated square, while the compiled one clips polygons, so the two double
as cross-checks of each other.
"""

import numpy as np


def square_strip_cdf(t, w1, w2):
    """Fraction of a rotated square's area whose projection lies below ``t``.

    ``t`` is measured from the projected square centre; ``w1 <= w2`` are the
    projected widths of the two square edges.  The projection density of the
    square is a trapezoid, so the cumulative fraction is piecewise quadratic.
    """
    t = np.asarray(t, dtype=np.float64)
    tau = t + 0.5 * (w1 + w2)
    total = w1 + w2
    with np.errstate(divide="ignore", invalid="ignore"):
        rise = np.where(w1 > 0, tau * tau / (2.0 * w1 * w2), 0.0)
        flat = (tau - 0.5 * w1) / w2
        fall = np.where(w1 > 0, 1.0 - (total - tau) ** 2 / (2.0 * w1 * w2), 1.0)
    out = np.where(tau <= 0.0, 0.0,
          np.where(tau < w1, rise,
          np.where(tau <= w2, flat,
          np.where(tau < total, fall, 1.0))))
    return out


def pixel_centres(n, pixel_size):
    """Return (x, y) coordinates of pixel centres, row 0 at the top."""
    coords = (np.arange(n) - 0.5 * (n - 1)) * pixel_size
    cx = np.broadcast_to(coords[None, :], (n, n))
    cy = np.broadcast_to(-coords[:, None], (n, n))
    return cx.ravel(), cy.ravel()


def strip_triplets(n, pixel_size, thetas, n_bins, bin_width, fov_mask):
    """COO triplets (row, col, value) of the strip-integral system matrix.

    Value = area(strip ∩ pixel) / bin_width.  Row ``a * n_bins + k`` is bin
    ``k`` of view ``a``; column ``r * n + c`` is pixel (r, c).  Pixels with a
    zero ``fov_mask`` entry get no entries.
    """
    cx, cy = pixel_centres(n, pixel_size)
    cols = np.flatnonzero(np.asarray(fov_mask, dtype=bool).ravel())
    cx = cx[cols]
    cy = cy[cols]
    half_bins = 0.5 * n_bins
    rows_out, cols_out, vals_out = [], [], []
    for a, theta in enumerate(np.asarray(thetas, dtype=np.float64)):
        c, s = np.cos(theta), np.sin(theta)
        wa, wb = pixel_size * abs(c), pixel_size * abs(s)
        w1, w2 = min(wa, wb), max(wa, wb)
        h = 0.5 * (w1 + w2)
        p0 = cx * c + cy * s
        kmin = np.floor((p0 - h) / bin_width + half_bins).astype(np.int64)
        kmax = np.floor((p0 + h) / bin_width + half_bins).astype(np.int64)
        span = int((kmax - kmin).max()) + 1
        k = kmin[:, None] + np.arange(span)[None, :]
        valid = (k <= kmax[:, None]) & (k >= 0) & (k < n_bins)
        lo = (k - half_bins) * bin_width - p0[:, None]
        hi = lo + bin_width
        frac = square_strip_cdf(hi, w1, w2) - square_strip_cdf(lo, w1, w2)
        vals = frac * (pixel_size * pixel_size / bin_width)
        keep = valid & (vals > 0.0)
        rows_out.append((a * n_bins + k)[keep])
        cols_out.append(np.broadcast_to(cols[:, None], k.shape)[keep])
        vals_out.append(vals[keep])
    return (np.concatenate(rows_out).astype(np.int64),
            np.concatenate(cols_out).astype(np.int64),
            np.concatenate(vals_out))


def conv2d(x, w):
    """Multi-channel 'same' cross-correlation: (Cin,H,W) * (Cout,Cin,kh,kw)."""
    cout, cin, kh, kw = w.shape
    _, hgt, wid = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((cout, hgt, wid))
    for a in range(kh):
        for b in range(kw):
            out += np.tensordot(w[:, :, a, b], xp[:, a:a + hgt, b:b + wid], axes=1)
    return out


def conv2d_transpose(y, w):
    """Adjoint of :func:`conv2d` with respect to its input."""
    cout, cin, kh, kw = w.shape
    _, hgt, wid = y.shape
    ph, pw = kh // 2, kw // 2
    acc = np.zeros((cin, hgt + 2 * ph, wid + 2 * pw))
    for a in range(kh):
        for b in range(kw):
            acc[:, a:a + hgt, b:b + wid] += np.tensordot(w[:, :, a, b].T, y, axes=1)
    return acc[:, ph:ph + hgt, pw:pw + wid].copy()


def conv2d_weight_grad(x, gy, kh, kw):
    """Gradient of <conv2d(x, w), gy> with respect to ``w``."""
    _, hgt, wid = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.empty((gy.shape[0], x.shape[0], kh, kw))
    for a in range(kh):
        for b in range(kw):
            out[:, :, a, b] = np.tensordot(gy, xp[:, a:a + hgt, b:b + wid],
                                           axes=([1, 2], [1, 2]))
    return out
