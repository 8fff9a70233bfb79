"""SLIC over-segmentation and per-region feature pooling.

The segmenter partitions an image into roughly ``k`` compact,
4-connected regions.  It is fully deterministic: cluster centers start
on a regular grid (perturbed to the lowest-gradient pixel in a 3x3
window), assignment scans clusters in ascending id so distance ties
resolve to the smaller id, and a final merge folds orphan connected
components into their largest assigned neighbor.

Color distance is measured in CIELAB for 3-channel images and on a
[0,100] intensity scale for grayscale, so the compactness parameter
behaves the same in both cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imgio import Image
from .numerics import Tensor, atomic_write_bytes, row, segment_mean

_4CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class SuperpixelMap:
    """Per-pixel region ids forming a partition into 4-connected regions."""

    width: int
    height: int
    labels: np.ndarray                      # (height, width) int
    region_pixels: list[np.ndarray] = field(default_factory=list)
    centroids: np.ndarray = None            # (R, 2) as (x, y) pixel units

    @property
    def region_count(self) -> int:
        return len(self.region_pixels)

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "SuperpixelMap":
        """Build from any externally supplied label map; ids must already
        be the contiguous range [0, R) with every id present."""
        labels = np.asarray(labels)
        h, w = labels.shape
        flat = labels.ravel()
        r = int(flat.max()) + 1
        counts = np.bincount(flat, minlength=r)
        if counts.min() <= 0 or flat.min() < 0:
            raise ValueError("region ids must form a dense non-empty range")
        order = np.argsort(flat, kind="stable")
        bounds = np.cumsum(counts)[:-1]
        pixels = np.split(order, bounds)
        xs = order % w
        ys = order // w
        cx = np.bincount(flat[order], weights=xs, minlength=r) / counts
        cy = np.bincount(flat[order], weights=ys, minlength=r) / counts
        return cls(width=w, height=h, labels=labels,
                   region_pixels=pixels, centroids=np.stack([cx, cy], axis=1))


def _rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] to CIELAB (D65 white)."""
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    m = np.array([[0.4124564, 0.3575761, 0.1804375],
                  [0.2126729, 0.7151522, 0.0721750],
                  [0.0193339, 0.1191920, 0.9503041]])
    xyz = lin @ m.T
    xyz /= np.array([0.95047, 1.0, 1.08883])
    eps, kappa = 216.0 / 24389.0, 24389.0 / 27.0
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16.0) / 116.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _grid_centers(w: int, h: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    nx = min(w, max(1, round(math.sqrt(k * w / h))))
    ny = min(h, max(1, round(k / nx)))
    cx = (np.arange(nx) + 0.5) * (w / nx)
    cy = (np.arange(ny) + 0.5) * (h / ny)
    gx, gy = np.meshgrid(cx, cy)
    return gx.ravel(), gy.ravel()


def _perturb_to_low_gradient(color: np.ndarray, xs: np.ndarray,
                             ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Move each center to the lowest-gradient pixel in its 3x3 window
    (first minimum in row-major window order)."""
    h, w = color.shape[:2]
    xr = np.roll(color, -1, axis=1) - np.roll(color, 1, axis=1)
    yr = np.roll(color, -1, axis=0) - np.roll(color, 1, axis=0)
    grad = (xr ** 2).sum(axis=-1) + (yr ** 2).sum(axis=-1)
    grad[0, :] = grad[-1, :] = np.inf
    grad[:, 0] = grad[:, -1] = np.inf
    out_x, out_y = xs.copy(), ys.copy()
    for i in range(xs.size):
        x, y = int(xs[i]), int(ys[i])
        best = (np.inf, y, x)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and grad[yy, xx] < best[0]:
                    best = (grad[yy, xx], yy, xx)
        if np.isfinite(best[0]):
            out_y[i], out_x[i] = best[1], best[2]
    return out_x, out_y


def _assign(color, cols, rows, ctr_color, ctr_x, ctr_y, ratio2, reach):
    h, w = color.shape[:2]
    dist = np.full((h, w), np.inf)
    lab = np.full((h, w), -1, dtype=np.int64)
    for ci in range(ctr_x.size):
        x0 = max(0, int(math.floor(ctr_x[ci] - reach)))
        x1 = min(w, int(math.ceil(ctr_x[ci] + reach)) + 1)
        y0 = max(0, int(math.floor(ctr_y[ci] - reach)))
        y1 = min(h, int(math.ceil(ctr_y[ci] + reach)) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        dc2 = ((color[y0:y1, x0:x1] - ctr_color[ci]) ** 2).sum(axis=-1)
        ds2 = ((cols[x0:x1] - ctr_x[ci]) ** 2)[None, :] + \
              ((rows[y0:y1] - ctr_y[ci]) ** 2)[:, None]
        d = dc2 + ratio2 * ds2
        win_d = dist[y0:y1, x0:x1]
        better = d < win_d
        win_d[better] = d[better]
        lab[y0:y1, x0:x1][better] = ci
    # window misses are rare (grid spacing ~ window size); finish them
    # with a full scan so every pixel is assigned
    miss = np.flatnonzero(lab.ravel() < 0)
    if miss.size:
        my, mx = np.divmod(miss, w)
        best_d = np.full(miss.size, np.inf)
        best_c = np.zeros(miss.size, dtype=np.int64)
        pix = color.reshape(-1, color.shape[-1])[miss]
        for ci in range(ctr_x.size):
            d = ((pix - ctr_color[ci]) ** 2).sum(axis=-1) + \
                ratio2 * ((mx - ctr_x[ci]) ** 2 + (my - ctr_y[ci]) ** 2)
            hit = d < best_d
            best_d[hit] = d[hit]
            best_c[hit] = ci
        lab.ravel()[miss] = best_c
    return lab


def _enforce_connectivity(lab: np.ndarray) -> np.ndarray:
    """Keep each cluster's largest 4-connected component and merge every
    other (orphan) component into its largest assigned neighbor."""
    h, w = lab.shape
    final = np.full((h, w), -1, dtype=np.int64)
    sizes: dict[int, int] = {}
    orphans: list[np.ndarray] = []   # flat pixel indices, deterministic order
    for lid in np.unique(lab):
        mask = lab == lid
        comp, ncomp = ndimage.label(mask, structure=_4CONN)
        counts = np.bincount(comp.ravel())[1:]
        core = int(np.argmax(counts)) + 1
        final[comp == core] = lid
        sizes[int(lid)] = int(counts[core - 1])
        for c in range(1, ncomp + 1):
            if c != core:
                orphans.append(np.flatnonzero((comp == c).ravel()))

    ff = final.ravel()
    while orphans:
        remaining = []
        progressed = False
        for pix in orphans:
            ys, xs = np.divmod(pix, w)
            cand: dict[int, int] = {}
            for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                yy, xx = ys + dy, xs + dx
                ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                vals = ff[yy[ok] * w + xx[ok]]
                for v in np.unique(vals[vals >= 0]):
                    cand[int(v)] = sizes[int(v)]
            if not cand:
                remaining.append(pix)
                continue
            target = max(cand, key=lambda r: (cand[r], -r))
            ff[pix] = target
            sizes[target] += pix.size
            progressed = True
        if remaining and not progressed:
            raise RuntimeError("orphan components not reachable from any region")
        orphans = remaining
    return final


def _compact_relabel(lab: np.ndarray) -> np.ndarray:
    """Renumber regions to [0, R) in row-major first-appearance order."""
    flat = lab.ravel()
    _, first = np.unique(flat, return_index=True)
    old_order = flat[np.sort(first)]
    remap = np.empty(int(flat.max()) + 1, dtype=np.int64)
    remap[old_order] = np.arange(old_order.size)
    return remap[flat].reshape(lab.shape)


def slic(img: Image, k: int, compactness: float = 10.0, iters: int = 10,
         seed: int = 0) -> SuperpixelMap:
    """Partition ``img`` into about ``k`` compact connected regions.

    Deterministic for fixed inputs; the algorithm has no random
    choices, so ``seed`` only participates in the call signature for
    interface stability with callers that thread one seed everywhere.
    """
    h, w = img.height, img.width
    n = h * w
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k={k} exceeds pixel count {n}")
    if compactness <= 0:
        raise ValueError("compactness must be positive")

    if img.channels == 3:
        color = _rgb_to_lab(img.data)
    else:
        color = img.data * 100.0

    step = math.sqrt(n / k)
    ctr_x, ctr_y = _grid_centers(w, h, k)
    ctr_x, ctr_y = _perturb_to_low_gradient(color, ctr_x, ctr_y)
    ctr_color = color[ctr_y.astype(int), ctr_x.astype(int)].astype(np.float64)
    ctr_x = ctr_x.astype(np.float64)
    ctr_y = ctr_y.astype(np.float64)

    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    ratio2 = (compactness / step) ** 2
    flat_color = color.reshape(n, -1)

    lab = None
    for _ in range(max(1, iters)):
        lab = _assign(color, cols, rows, ctr_color, ctr_x, ctr_y, ratio2, step)
        flat = lab.ravel()
        cnt = np.bincount(flat, minlength=ctr_x.size)
        live = cnt > 0
        inv = np.zeros_like(cnt, dtype=np.float64)
        inv[live] = 1.0 / cnt[live]
        for ch in range(flat_color.shape[1]):
            s = np.bincount(flat, weights=flat_color[:, ch],
                            minlength=ctr_x.size)
            ctr_color[live, ch] = (s * inv)[live]
        xs = np.bincount(flat, weights=np.tile(cols, h), minlength=ctr_x.size)
        ys = np.bincount(flat, weights=np.repeat(rows, w), minlength=ctr_x.size)
        ctr_x[live] = (xs * inv)[live]
        ctr_y[live] = (ys * inv)[live]

    lab = _enforce_connectivity(lab)
    return SuperpixelMap.from_labels(_compact_relabel(lab))


def pool_features(feat: Tensor, sp: SuperpixelMap) -> list[Tensor]:
    """Per-region mean of a per-pixel feature matrix (rows in row-major
    pixel order); differentiable with gradient 1/|region| per member."""
    m = pool_matrix(feat, sp)
    return [row(m, i) for i in range(sp.region_count)]


def pool_matrix(feat: Tensor, sp: SuperpixelMap) -> Tensor:
    if feat.data.ndim != 2 or feat.data.shape[0] != sp.width * sp.height:
        raise ValueError(f"feature rows {feat.data.shape} do not match "
                         f"{sp.height}x{sp.width} pixels")
    return segment_mean(feat, sp.labels.ravel(), sp.region_count)


def quantization_oracle(sp: SuperpixelMap, gt: np.ndarray) -> float:
    """Best achievable pixel accuracy when each region takes one label:
    assign every region its majority ground-truth label (ties to the
    smaller label id) and score the result."""
    if gt.shape != (sp.height, sp.width):
        raise ValueError("ground truth dims do not match the map")
    flat = gt.ravel()
    correct = 0
    for pix in sp.region_pixels:
        counts = np.bincount(flat[pix])
        correct += int(counts.max())
    return correct / flat.size


def majority_labels(sp: SuperpixelMap, gt: np.ndarray) -> np.ndarray:
    """The region-majority labeling that attains the quantization oracle."""
    flat = gt.ravel()
    out = np.empty_like(flat)
    for pix in sp.region_pixels:
        counts = np.bincount(flat[pix])
        out[pix] = int(np.argmax(counts))
    return out.reshape(gt.shape)


# ---------------------------------------------------------------------------
# serialization (formats documented in docs/formats.md)

_MAP_MAGIC = b"SPM1"


def write_map(path: str, sp: SuperpixelMap) -> None:
    header = b"%s\n%d %d\n%d\n" % (_MAP_MAGIC, sp.width, sp.height,
                                   sp.region_count)
    payload = sp.labels.astype("<i4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_map(path: str) -> SuperpixelMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAP_MAGIC):
        raise ValueError(f"{path}: not a superpixel map")
    rest = blob[len(_MAP_MAGIC) + 1:]
    dims, off = rest.split(b"\n", 1)
    w, h = (int(t) for t in dims.split())
    count_line, payload = off.split(b"\n", 1)
    labels = np.frombuffer(payload, dtype="<i4", count=w * h).reshape(h, w)
    sp = SuperpixelMap.from_labels(labels.astype(np.int64))
    if sp.region_count != int(count_line):
        raise ValueError(f"{path}: region count mismatch")
    return sp


def boundary_mask(sp: SuperpixelMap) -> np.ndarray:
    lab = sp.labels
    mask = np.zeros(lab.shape, dtype=bool)
    mask[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    mask[:-1, :] |= lab[:-1, :] != lab[1:, :]
    return mask


def write_boundary_overlay(path: str, img: Image, sp: SuperpixelMap) -> None:
    """PPM with region boundaries drawn in red, for visual inspection."""
    from .imgio import write_image

    rgb = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
    rgb = rgb.copy()
    mask = boundary_mask(sp)
    rgb[mask] = (1.0, 0.0, 0.0)
    write_image(path, Image.from_array(rgb))
