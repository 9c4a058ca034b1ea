"""Per-pixel reference implementations, written independently of flostream.warp."""
import math

import numpy as np


def bilinear_taps(x, y):
    """The four (ix, iy, weight) taps of a bilinear sample at (x, y)."""
    x0, y0 = math.floor(x), math.floor(y)
    ax, ay = x - x0, y - y0
    return [(x0, y0, (1 - ax) * (1 - ay)), (x0 + 1, y0, ax * (1 - ay)),
            (x0, y0 + 1, (1 - ax) * ay), (x0 + 1, y0 + 1, ax * ay)]


def backward_warp_ref(feat, flow, offset=0):
    """feat (C, Hf, Wf), flow (2, H, W) -> (C, H, W)."""
    feat = np.asarray(feat, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    c, hf, wf = feat.shape
    _, h, w = flow.shape
    out = np.zeros((c, h, w))
    for y in range(h):
        for x in range(w):
            sx = x + flow[0, y, x] + offset
            sy = y + flow[1, y, x] + offset
            for ix, iy, wt in bilinear_taps(sx, sy):
                if 0 <= ix < wf and 0 <= iy < hf:
                    out[:, y, x] += wt * feat[:, iy, ix]
    return out


def forward_splat_ref(feat, flow, margin, mode="average", eps=1e-8):
    """feat (C, H, W), flow (2, H, W) -> canvas (C, H + 2m, W + 2m)."""
    feat = np.asarray(feat, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    c, h, w = feat.shape
    hc, wc = h + 2 * margin, w + 2 * margin
    acc = np.zeros((c, hc, wc))
    wsum = np.zeros((hc, wc))
    for y in range(h):
        for x in range(w):
            tx = x + flow[0, y, x] + margin
            ty = y + flow[1, y, x] + margin
            for ix, iy, wt in bilinear_taps(tx, ty):
                if 0 <= ix < wc and 0 <= iy < hc:
                    acc[:, iy, ix] += wt * feat[:, y, x]
                    wsum[iy, ix] += wt
    if mode == "sum":
        return acc
    out = np.zeros_like(acc)
    filled = wsum > eps
    out[:, filled] = acc[:, filled] / wsum[filled]
    return out


def sad_block_search_ref(src, dst, block, radius):
    """Exhaustive per-block SAD search with the documented tie-break.

    src, dst: (H, W). Returns (rows, cols, 2) integer vectors.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    h, w = src.shape
    rows = list(range(0, h, block))
    cols = list(range(0, w, block))
    out = np.zeros((len(rows), len(cols), 2), dtype=int)
    for bi, y0 in enumerate(rows):
        for bj, x0 in enumerate(cols):
            y1, x1 = min(y0 + block, h), min(x0 + block, w)
            best = None
            for dx in range(-radius, radius + 1):
                for dy in range(-radius, radius + 1):
                    if y0 + dy < 0 or y1 - 1 + dy > h - 1 or x0 + dx < 0 or x1 - 1 + dx > w - 1:
                        continue
                    sad = 0.0
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            sad += abs(src[y, x] - dst[y + dy, x + dx])
                    key = (sad, abs(dx) + abs(dy), dx, dy)
                    if best is None or key < best:
                        best = key
            out[bi, bj] = best[2], best[3]
    return out


def translate_with_zeros(img, dx, dy):
    """Move content by integer (dx, dy); vacated pixels become 0. img (C, H, W)."""
    img = np.asarray(img)
    out = np.zeros_like(img)
    c, h, w = img.shape
    for y in range(h):
        for x in range(w):
            ty, tx = y + dy, x + dx
            if 0 <= ty < h and 0 <= tx < w:
                out[:, ty, tx] = img[:, y, x]
    return out
