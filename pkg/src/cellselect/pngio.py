"""Raster I/O: 8-bit PNG in, float arrays out, and back.

Pixel-to-float conversion is p = byte / 255. Color inputs are collapsed to
grayscale by luma (0.299 R + 0.587 G + 0.114 B) before scaling. Masks treat
any nonzero byte as foreground.
"""

import numpy as np
from PIL import Image


def read_gray(path):
    """Load a PNG as a float64 grayscale image in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("L", "LA"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            return arr / 255.0
        if im.mode in ("I", "I;16"):
            arr = np.asarray(im, dtype=np.float64)
            return arr / 65535.0
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return luma / 255.0


def read_mask(path):
    """Load a PNG as a {0,1} uint8 mask; any nonzero byte counts as 1."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr != 0).astype(np.uint8)


def write_gray(path, image):
    """Write a [0,1] grayscale image as 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def write_mask(path, mask):
    """Write a binary mask as 8-bit PNG with foreground = 255."""
    data = (np.asarray(mask) != 0).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(path, format="PNG")


def write_rgb(path, image):
    """Write an (H, W, 3) uint8 color raster as PNG."""
    arr = np.asarray(image, dtype=np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
