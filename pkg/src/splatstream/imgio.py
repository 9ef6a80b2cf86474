"""PNG image IO: 8- and 16-bit files, linear [0, 1] float arrays in memory.

Values are mapped by straight scaling (no transfer-function handling); the
pipeline treats all pixel data as linear RGB.
"""

from __future__ import annotations

import os

import cv2
import numpy as np

from .errors import InputError


def load_png(path) -> np.ndarray:
    """Read a PNG into (H, W, 3) float64 in [0, 1]."""
    raw = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(f"cannot read image: {path}")
    return decode_image(raw)


def decode_image(raw: np.ndarray) -> np.ndarray:
    if raw.ndim == 2:
        raw = raw[:, :, None].repeat(3, axis=2)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    bgr = raw.astype(np.float64)
    if raw.dtype == np.uint8:
        bgr /= 255.0
    elif raw.dtype == np.uint16:
        bgr /= 65535.0
    else:
        raise InputError(f"unsupported image dtype {raw.dtype}")
    return bgr[:, :, ::-1].copy()  # BGR -> RGB


def save_png(path, image: np.ndarray, bit_depth: int = 8):
    """Write (H, W, 3) linear RGB in [0, 1] as an 8- or 16-bit PNG."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected (H, W, 3) image, got {image.shape}")
    encoded = encode_image(image, bit_depth)
    if not cv2.imwrite(os.fspath(path), encoded):
        raise InputError(f"cannot write image: {path}")


def encode_image(image: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    clipped = np.clip(image, 0.0, 1.0)[:, :, ::-1]  # RGB -> BGR
    if bit_depth == 8:
        return np.round(clipped * 255.0).astype(np.uint8)
    if bit_depth == 16:
        return np.round(clipped * 65535.0).astype(np.uint16)
    raise InputError(f"bit_depth must be 8 or 16, got {bit_depth}")


def png_bytes(image: np.ndarray, bit_depth: int = 8) -> bytes:
    ok, buf = cv2.imencode(".png", encode_image(image, bit_depth))
    if not ok:
        raise InputError("PNG encoding failed")
    return buf.tobytes()


def from_png_bytes(data: bytes) -> np.ndarray:
    raw = cv2.imdecode(np.frombuffer(data, dtype=np.uint8),
                       cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError("PNG decoding failed")
    return decode_image(raw)
