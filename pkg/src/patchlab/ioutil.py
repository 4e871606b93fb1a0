"""Shared serialization helpers: bit-exact array <-> base64 and PNG export."""

import base64

import numpy as np


def array_to_b64(arr: np.ndarray) -> str:
    """Little-endian float64 bytes, base64; bit-exact round trip."""
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def b64_to_array(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(tuple(shape)).copy()


def save_png(path: str, img: np.ndarray):
    """8-bit RGB export of a [3,H,W] image in [0,1]; inspection only."""
    from PIL import Image

    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def save_png_gray(path: str, img: np.ndarray):
    """8-bit grayscale export of a [H,W] map in [0,1]."""
    from PIL import Image

    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
