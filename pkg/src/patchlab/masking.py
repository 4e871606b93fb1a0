"""Foreground/background separation of the source patch and composition.

The source patch is captured on a near-black backdrop, so saliency is plain
max-channel luminance; thresholding plus largest-component/hole-fill cleanup
yields one solid silhouette mask. The composed patch keeps the silhouette
pixels bit-exact from the source while gradients flow only into the
optimizable background surround.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .ioutil import array_to_b64, b64_to_array, save_png
from .tensor import Tensor, mul

_INIT_TAG = 0x1B


class MaskingError(RuntimeError):
    """Raised when no usable silhouette survives binarization."""


@dataclass
class MaskedPatch:
    """Source patch, its complementary binary masks, and the trained pixels.

    Invariants: masks are strictly {0,1} and sum to one everywhere; the
    composed patch restricted to the foreground equals the source exactly at
    every iteration. Only the attack update step writes `optimized`
    (single-writer); readers always see a stable snapshot.
    """

    original: Tensor  # [3,S,S]
    foreground_mask: Tensor  # [1,S,S]
    background_mask: Tensor  # [1,S,S]
    optimized: Tensor  # [3,S,S], requires_grad
    meta: dict = field(default_factory=dict)

    @property
    def side(self) -> int:
        return self.original.shape[-1]


def extract_saliency(patch) -> Tensor:
    """Max channel value per pixel; valid because the backdrop is near-black."""
    data = patch.data if isinstance(patch, Tensor) else np.asarray(patch, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"expected [3,S,S] patch, got {data.shape}")
    return Tensor(data.max(axis=0, keepdims=True))


def _flood(mask: np.ndarray, start: np.ndarray) -> np.ndarray:
    """4-connected flood fill of `start` within `mask` (vectorized dilation)."""
    reach = start & mask
    while True:
        grown = reach.copy()
        grown[1:, :] |= reach[:-1, :]
        grown[:-1, :] |= reach[1:, :]
        grown[:, 1:] |= reach[:, :-1]
        grown[:, :-1] |= reach[:, 1:]
        grown &= mask
        if np.array_equal(grown, reach):
            return reach
        reach = grown


def _largest_component(binary: np.ndarray) -> np.ndarray:
    remaining = binary.copy()
    best = None
    best_size = 0
    while remaining.any():
        r, c = np.argwhere(remaining)[0]
        seed = np.zeros_like(remaining)
        seed[r, c] = True
        comp = _flood(remaining, seed)
        size = int(comp.sum())
        if size > best_size:
            best, best_size = comp, size
        remaining &= ~comp
    return best


def _fill_holes(binary: np.ndarray) -> np.ndarray:
    border = np.zeros_like(binary)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    outside = _flood(~binary, border & ~binary)
    return binary | ~(binary | outside)


def binarize(saliency, threshold: float) -> Tensor:
    """Threshold to {0,1}, keep the largest 4-connected component, fill holes."""
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    data = saliency.data if isinstance(saliency, Tensor) else np.asarray(saliency, dtype=np.float64)
    binary = (data[0] >= threshold) if data.ndim == 3 else (data >= threshold)
    if not binary.any():
        raise MaskingError("binarization produced an empty foreground (bad source patch)")
    cleaned = _fill_holes(_largest_component(binary))
    return Tensor(cleaned[None].astype(np.float64))


def compose(mp: MaskedPatch) -> Tensor:
    """Composed patch: source over the silhouette, trained pixels elsewhere.

    The foreground term is constant, so the gradient w.r.t. the trained
    pixels is exactly the background mask broadcast over channels.
    """
    c = mp.original.shape[0]
    fg3 = np.broadcast_to(mp.foreground_mask.data, (c,) + mp.foreground_mask.shape[1:])
    bg3 = 1.0 - fg3
    fg_term = Tensor(mp.original.data * fg3)
    return fg_term + mul(mp.optimized, Tensor(bg3.copy()))


def build_masked_patch(
    original: Tensor,
    saliency_threshold: float = 0.1,
    init_seed: int = 0,
    init_range: tuple = (0.3, 0.7),
    meta: dict | None = None,
) -> MaskedPatch:
    """Derive masks from the source patch and initialize the trained pixels.

    Background starts mid-gray uniform random (avoids saturated-sigmoid dead
    gradients); the foreground region of the trained array is set to the
    source, which never reaches the output but keeps serialization simple.
    """
    fg = binarize(extract_saliency(original), saliency_threshold)
    bg = Tensor(1.0 - fg.data)
    rng = np.random.default_rng(np.random.SeedSequence([int(init_seed), _INIT_TAG]))
    lo, hi = init_range
    init = rng.uniform(lo, hi, size=original.shape)
    fg3 = np.broadcast_to(fg.data, original.shape).astype(bool)
    init[fg3] = original.data[fg3]
    return MaskedPatch(
        original=Tensor(original.data.copy()),
        foreground_mask=fg,
        background_mask=bg,
        optimized=Tensor(init, requires_grad=True),
        meta=dict(meta or {}),
    )


# ---- persistence -----------------------------------------------------------


def save_masked_patch(mp: MaskedPatch, out_dir: str, name: str = "patch") -> str:
    """PNG of the composed patch for inspection plus a full-precision sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    save_png(os.path.join(out_dir, f"{name}.png"), compose(mp).data)
    side = mp.side
    doc = {
        "format": "patchlab-patch-v1",
        "side": side,
        "original": array_to_b64(mp.original.data),
        "foreground_mask": array_to_b64(mp.foreground_mask.data),
        "optimized": array_to_b64(mp.optimized.data),
        "meta": mp.meta,
    }
    path = os.path.join(out_dir, f"{name}.json")
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
    return path


def load_masked_patch(path: str) -> MaskedPatch:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "patchlab-patch-v1":
        raise ValueError(f"not a patch sidecar: {path}")
    side = doc["side"]
    fg = Tensor(b64_to_array(doc["foreground_mask"], (1, side, side)))
    return MaskedPatch(
        original=Tensor(b64_to_array(doc["original"], (3, side, side))),
        foreground_mask=fg,
        background_mask=Tensor(1.0 - fg.data),
        optimized=Tensor(b64_to_array(doc["optimized"], (3, side, side)), requires_grad=True),
        meta=doc.get("meta", {}),
    )
