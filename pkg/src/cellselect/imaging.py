"""Classical image kernels, bit-exact and pure.

Grayscale images are float64 arrays with values in [0, 1]; binary masks are
uint8 arrays with values in {0, 1}. Every operation here is deterministic:
same input, bit-identical output.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ImageTooSmallError, ShapeMismatchError


@dataclass(frozen=True, order=True)
class PatchRef:
    """Identity of a square crop inside a named image; no pixels stored."""

    image_id: str
    row: int
    col: int
    size: int = 256

    def key(self):
        return (self.image_id, self.row, self.col)

    def crop(self, image):
        if self.row + self.size > image.shape[0] or self.col + self.size > image.shape[1]:
            raise ShapeMismatchError(f"patch {self} out of bounds for {image.shape}")
        return image[self.row:self.row + self.size, self.col:self.col + self.size]


def as_gray(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchError(f"expected 2-D grayscale image, got {x.shape}")
    return x


def as_mask(m):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeMismatchError(f"expected 2-D mask, got {m.shape}")
    return (m != 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# pseudo-label pipeline kernels


def equalize(x):
    """Global 256-bin histogram equalization.

    Pixels are quantized with v = floor(p * 255.999); bin v maps to
    (cdf(v) - cdf_min) / (N - cdf_min) where cdf_min is the smallest nonzero
    CDF value. Constant images come back unchanged.
    """
    x = as_gray(x)
    q = np.floor(x * 255.999).astype(np.int64)
    np.clip(q, 0, 255, out=q)
    hist = np.bincount(q.reshape(-1), minlength=256)
    cdf = np.cumsum(hist)
    n = x.size
    cdf_min = int(cdf[np.flatnonzero(hist)[0]])
    if cdf_min == n:
        return x.copy()
    return (cdf[q] - cdf_min) / float(n - cdf_min)


def threshold(x_e, gamma):
    """Dark-is-foreground threshold: 1 where x <= gamma, else 0."""
    x_e = as_gray(x_e)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    return (x_e <= gamma).astype(np.uint8)


def dilate2x2(m):
    """Binary dilation with a 2x2 structuring element.

    Each foreground pixel spreads to offsets (0,0), (0,1), (1,0), (1,1);
    out-of-bounds neighbors count as background.
    """
    m = as_mask(m)
    out = m.copy()
    out[1:, :] |= m[:-1, :]
    out[:, 1:] |= m[:, :-1]
    out[1:, 1:] |= m[:-1, :-1]
    return out


# ---------------------------------------------------------------------------
# scoring augmentations (pixel-level set)


def autocontrast(x):
    """Min-max stretch to [0, 1]; constant images unchanged."""
    x = as_gray(x)
    mn = x.min()
    mx = x.max()
    if mx == mn:
        return x.copy()
    return (x - mn) / (mx - mn)


def brightness(x, psi):
    """Pure gain: clamp(psi * x, 0, 1). psi > 1 distorts more strongly."""
    x = as_gray(x)
    if psi <= 0:
        raise ValueError("psi must be positive")
    return np.clip(psi * x, 0.0, 1.0)


_SMOOTH_KERNEL = np.array([[1.0, 1.0, 1.0],
                           [1.0, 5.0, 1.0],
                           [1.0, 1.0, 1.0]]) / 13.0


def sharpness(x, psi):
    """Unsharp blend: clamp(x + (psi - 1) * (x - smooth(x)), 0, 1).

    smooth is the fixed normalized 3x3 kernel with edge-replicated borders.
    """
    x = as_gray(x)
    if psi <= 0:
        raise ValueError("psi must be positive")
    xp = np.pad(x, 1, mode="edge")
    sm = np.zeros_like(x)
    for a in range(3):
        for b in range(3):
            sm += _SMOOTH_KERNEL[a, b] * xp[a:a + x.shape[0], b:b + x.shape[1]]
    return np.clip(x + (psi - 1.0) * (x - sm), 0.0, 1.0)


# ---------------------------------------------------------------------------
# affine ablation transforms


def rotate(x, degrees):
    """Nearest-neighbor rotation of the content about the image center.

    Each output pixel pulls from the inverse-rotated source coordinate,
    rounded to nearest; out-of-bounds sources fill with 0.
    """
    x = as_gray(x)
    h, w = x.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    th = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(th), np.sin(th)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = rr - cy
    dx = cc - cx
    src_r = np.rint(cy + dy * cos_t - dx * sin_t).astype(np.int64)
    src_c = np.rint(cx + dy * sin_t + dx * cos_t).astype(np.int64)
    inside = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    out = np.zeros_like(x)
    out[inside] = x[src_r[inside], src_c[inside]]
    return out


def rotate30(x):
    return rotate(x, 30.0)


def translate(x, dy=0, dx=0):
    """Integer shift of the content by (dy, dx) with zero fill."""
    x = as_gray(x)
    h, w = x.shape
    out = np.zeros_like(x)
    src_r0 = max(0, -dy)
    src_c0 = max(0, -dx)
    dst_r0 = max(0, dy)
    dst_c0 = max(0, dx)
    hh = h - abs(dy)
    ww = w - abs(dx)
    if hh > 0 and ww > 0:
        out[dst_r0:dst_r0 + hh, dst_c0:dst_c0 + ww] = \
            x[src_r0:src_r0 + hh, src_c0:src_c0 + ww]
    return out


def translate_x(x, fraction=0.3):
    """Shift along the positive x axis by round(fraction * W) columns."""
    return translate(x, dx=int(round(fraction * x.shape[1])))


def translate_y(x, fraction=0.3):
    """Shift along the positive y axis by round(fraction * H) rows."""
    return translate(x, dy=int(round(fraction * x.shape[0])))


# ---------------------------------------------------------------------------
# patch grids


def patch_grid(height, width, size, count_target):
    """Row/col offsets of the deterministic crop grid.

    Picks the largest uniform stride whose window grid still yields at least
    ``count_target`` crops (minimal over-generation), then truncates row-major
    to exactly ``count_target``.
    """
    if count_target < 1:
        raise ValueError("count_target must be >= 1")
    if height < size or width < size:
        raise ImageTooSmallError(
            f"image {height}x{width} smaller than patch size {size}"
        )

    def n_windows(stride):
        return ((height - size) // stride + 1) * ((width - size) // stride + 1)

    max_stride = max(height - size, width - size, 1)
    stride = None
    for t in range(max_stride, 0, -1):
        if n_windows(t) >= count_target:
            stride = t
            break
    if stride is None:
        raise ImageTooSmallError(
            f"image {height}x{width} cannot yield {count_target} patches of size {size}"
        )
    nr = (height - size) // stride + 1
    nc = (width - size) // stride + 1
    offsets = []
    for i in range(nr):
        for j in range(nc):
            offsets.append((i * stride, j * stride))
            if len(offsets) == count_target:
                return offsets
    return offsets


def extract_patches(image_id, image, size, count_target):
    """References to a deterministic grid of square crops; no pixel copies."""
    image = as_gray(image)
    h, w = image.shape
    return [PatchRef(image_id, r, c, size)
            for r, c in patch_grid(h, w, size, count_target)]


# ---------------------------------------------------------------------------
# confusion overlay

_COLOR_TP = (255, 255, 255)
_COLOR_TN = (0, 0, 0)
_COLOR_FP = (255, 0, 0)
_COLOR_FN = (0, 255, 0)


def confusion_overlay(pred_mask, gt):
    """Per-pixel confusion colors: FP red, FN green, TN black, TP white."""
    pred_mask = as_mask(pred_mask)
    gt = as_mask(gt)
    if pred_mask.shape != gt.shape:
        raise ShapeMismatchError(
            f"pred {pred_mask.shape} vs gt {gt.shape}"
        )
    out = np.zeros(pred_mask.shape + (3,), dtype=np.uint8)
    tp = (pred_mask == 1) & (gt == 1)
    fp = (pred_mask == 1) & (gt == 0)
    fn = (pred_mask == 0) & (gt == 1)
    out[tp] = _COLOR_TP
    out[fp] = _COLOR_FP
    out[fn] = _COLOR_FN
    return out
