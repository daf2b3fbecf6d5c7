"""8-bit PNG <-> float image conversion.

Colour images are (3, H, W) float32 arrays in [-1, 1]; illumination maps are
(H, W) float32 arrays in [0, 1].
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class ImageDecodeError(ValueError):
    pass


def decode_pixels(pixels: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, H, W) via v / 127.5 - 1."""
    return (pixels.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1).copy()


def encode_pixels(x) -> np.ndarray:
    """float (3, H, W) in [-1, 1] -> uint8 (H, W, 3)."""
    x = np.asarray(x, dtype=np.float64)
    v = np.round(np.clip(x, -1.0, 1.0) * 127.5 + 127.5)
    return np.clip(v, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as e:
        raise ImageDecodeError(f"cannot decode image {path}: {e}") from e
    return decode_pixels(pixels)


def write_image(path, x) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(encode_pixels(x), mode="RGB").save(path)


def read_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("L"))
    except (OSError, ValueError) as e:
        raise ImageDecodeError(f"cannot decode image {path}: {e}") from e
    return pixels.astype(np.float32) / 255.0


def write_gray(path, x) -> None:
    v = np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(v, mode="L").save(path)


def list_images(directory) -> dict[str, Path]:
    """Map filename -> path for every image file directly inside ``directory``."""
    return {p.name: p for p in sorted(Path(directory).iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}
