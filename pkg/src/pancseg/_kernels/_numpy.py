"""Pure-numpy implementations of the hot kernels.

Selected automatically when the compiled extension is missing.  Every
function here has a twin in ``_native.pyx`` with the same accumulation
order, so the two backends agree to the last bit.
"""

import numpy as np


def im2col(x, kh, kw, sh, sw, ph, pw):
    """Unfold (N, C, H, W) into (N, C*kh*kw, OH*OW) patch columns."""
    n, c, h, w = x.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + oh * sh:sh, kx:kx + ow * sw:sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, ph, pw):
    """Fold patch columns back onto the (N, C, H, W) grid, summing overlaps."""
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            xp[:, :, ky:ky + oh * sh:sh, kx:kx + ow * sw:sw] += cols[:, :, ky, kx]
    if ph or pw:
        return xp[:, :, ph:ph + h, pw:pw + w].copy()
    return xp


def maxpool_forward(x, wh, ww, sh, sw):
    """Max pooling; returns pooled values and flat argmax indices into H*W.

    Ties resolve to the first window position in row-major scan order.
    """
    n, c, h, w = x.shape
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1
    base_y = np.arange(oh, dtype=np.int64)[:, None] * sh
    base_x = np.arange(ow, dtype=np.int64)[None, :] * sw
    best = None
    idx = None
    for wy in range(wh):
        for wx in range(ww):
            sub = x[:, :, wy:wy + oh * sh:sh, wx:wx + ow * sw:sw]
            flat = (base_y + wy) * w + (base_x + wx)
            if best is None:
                best = sub.copy()
                idx = np.broadcast_to(flat, best.shape).astype(np.int64).copy()
            else:
                sel = sub > best
                best[sel] = sub[sel]
                idx[sel] = np.broadcast_to(flat, best.shape)[sel]
    return best, idx


def maxpool_backward(dy, idx, h, w):
    """Scatter pooled gradients back to the source positions."""
    n, c = dy.shape[:2]
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    flat_dy = dy.reshape(n, c, -1)
    flat_idx = idx.reshape(n, c, -1)
    for i in range(n):
        for j in range(c):
            np.add.at(dx[i, j], flat_idx[i, j], flat_dy[i, j])
    return dx.reshape(n, c, h, w)


def bilinear_sample(img, xs, ys):
    """Sample img at float coords (xs, ys) with bilinear interp, edge clamp."""
    h, w = img.shape
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    v00 = img[y0, x0].astype(np.float64)
    v01 = img[y0, x1].astype(np.float64)
    v10 = img[y1, x0].astype(np.float64)
    v11 = img[y1, x1].astype(np.float64)
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bot * fy
    return out.astype(img.dtype)


def slic_assign(image, centers, half_width, spatial_scale):
    """One SLIC assignment sweep.

    centers rows are (y, x, intensity); spatial_scale is m/S.  Returns
    per-pixel labels (-1 where no center window covers the pixel) and
    squared SLIC distances.  Earlier centers win exact ties.
    """
    h, w = image.shape
    labels = np.full((h, w), -1, dtype=np.int32)
    dist = np.full((h, w), np.inf, dtype=np.float64)
    ss2 = spatial_scale * spatial_scale
    for k in range(centers.shape[0]):
        cy, cx, ci = centers[k]
        y0 = max(int(np.floor(cy)) - half_width, 0)
        y1 = min(int(np.floor(cy)) + half_width + 1, h)
        x0 = max(int(np.floor(cx)) - half_width, 0)
        x1 = min(int(np.floor(cx)) + half_width + 1, w)
        if y0 >= y1 or x0 >= x1:
            continue
        dyy = np.arange(y0, y1, dtype=np.float64)[:, None] - cy
        dxx = np.arange(x0, x1, dtype=np.float64)[None, :] - cx
        dc = image[y0:y1, x0:x1] - ci
        d2 = dc * dc + (dyy * dyy + dxx * dxx) * ss2
        win = dist[y0:y1, x0:x1]
        sel = d2 < win
        win[sel] = d2[sel]
        labels[y0:y1, x0:x1][sel] = k
    return labels, dist
