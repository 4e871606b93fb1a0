"""Physical-dynamics augmentation and differentiable patch application.

The transform stage jitters brightness, pose (rotation + scale through
bilinear resampling), pixel noise, and contrast — in that fixed order, with
a final clamp — from an explicit, replayable draw. The application stage
resizes the patch to the placement square, composites it into the scene,
and returns both the adversarial image and the applied-region mask. All of
it differentiates back to the patch pixels; scenes are constants unless they
are themselves composites from an earlier application.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenes import GroundTruth
from .tensor import Tensor, bilinear_sample, embed, mul


class PlacementError(RuntimeError):
    """Raised when a placement footprint misses the image entirely."""


@dataclass(frozen=True)
class TransformSpec:
    noise_amp: float = 0.05
    rot_range_deg: float = 20.0
    scale_jitter: float = 0.10
    brightness_range: tuple = (0.8, 1.2)
    contrast_range: tuple = (0.9, 1.1)
    rng_seed: int = 0

    def validate(self):
        if self.noise_amp < 0:
            raise ValueError("noise_amp must be >= 0")
        for name, (lo, hi) in (("brightness_range", self.brightness_range), ("contrast_range", self.contrast_range)):
            if hi < lo:
                raise ValueError(f"{name} is empty: {(lo, hi)}")
        if self.rot_range_deg < 0 or self.scale_jitter < 0:
            raise ValueError("rotation range and scale jitter must be >= 0")

    @classmethod
    def identity(cls, rng_seed: int = 0) -> "TransformSpec":
        return cls(
            noise_amp=0.0,
            rot_range_deg=0.0,
            scale_jitter=0.0,
            brightness_range=(1.0, 1.0),
            contrast_range=(1.0, 1.0),
            rng_seed=rng_seed,
        )


@dataclass
class RandomDraw:
    """One concrete sample of the transform parameters; replayable."""

    brightness: float
    angle_rad: float
    scale: float
    noise: np.ndarray  # [3,S,S] additive field, amplitude already applied
    contrast: float

    @classmethod
    def sample(cls, spec: TransformSpec, side: int, rng: np.random.Generator) -> "RandomDraw":
        spec.validate()
        rot = math.radians(spec.rot_range_deg)
        return cls(
            brightness=float(rng.uniform(*spec.brightness_range)),
            angle_rad=float(rng.uniform(-rot, rot)),
            scale=float(rng.uniform(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter)),
            noise=rng.uniform(-spec.noise_amp, spec.noise_amp, size=(3, side, side)),
            contrast=float(rng.uniform(*spec.contrast_range)),
        )

    @classmethod
    def identity(cls, side: int) -> "RandomDraw":
        return cls(brightness=1.0, angle_rad=0.0, scale=1.0, noise=np.zeros((3, side, side)), contrast=1.0)


@dataclass(frozen=True)
class Placement:
    center: tuple  # (cx, cy) pixels
    side: float  # square edge, pixels
    r_d: float
    r_s: float

    def __post_init__(self):
        if self.side <= 0 or self.r_d <= 0 or self.r_s <= 0:
            raise ValueError(f"invalid placement {self}")


def place(target: GroundTruth, r_d: float, r_s: float) -> Placement:
    """Square placement above the target: center shifted up by height/r_d,
    edge sqrt(r_s * target_area)."""
    x1, y1, x2, y2 = target.box
    w_t = x2 - x1
    h_t = y2 - y1
    center = ((x1 + x2) / 2.0, (y1 + y2) / 2.0 - (y2 - y1) / r_d)
    side = math.sqrt(r_s * w_t * h_t)
    return Placement(center=center, side=side, r_d=r_d, r_s=r_s)


def _rotation_grid(side: int, angle_rad: float, scale: float) -> np.ndarray:
    """Inverse-map grid: output pixel -> normalized source coords for a
    rotation by `angle_rad` with content magnified by `scale`."""
    c = (side - 1) / 2.0
    j = np.arange(side, dtype=np.float64)
    u, v = np.meshgrid(j - c, j - c)  # u: x offsets, v: y offsets
    cos_t, sin_t = math.cos(angle_rad), math.sin(angle_rad)
    sx = (cos_t * u + sin_t * v) / scale + c
    sy = (-sin_t * u + cos_t * v) / scale + c
    denom = max(side - 1, 1)
    return np.stack([2.0 * sx / denom - 1.0, 2.0 * sy / denom - 1.0], axis=-1)


def _resize_grid(src_side: int, dst_side: int) -> np.ndarray:
    if dst_side == 1:
        coords = np.zeros(1)
    else:
        coords = np.linspace(-1.0, 1.0, dst_side)
    gx, gy = np.meshgrid(coords, coords)
    return np.stack([gx, gy], axis=-1)


def pt_transform(patch: Tensor, spec: TransformSpec, draw: RandomDraw) -> Tensor:
    """brightness -> rotate/scale -> additive noise -> contrast -> clamp.

    Lighting wraps the geometry like a physical capture would; the order is
    fixed and the draw makes any transform replayable.
    """
    side = patch.shape[-1]
    out = patch * draw.brightness
    if draw.angle_rad != 0.0 or draw.scale != 1.0:
        out = bilinear_sample(out, _rotation_grid(side, draw.angle_rad, draw.scale))
    if draw.noise.any():
        out = out + Tensor(draw.noise)
    if draw.contrast != 1.0:
        out = (out - 0.5) * draw.contrast + 0.5
    return out.clamp(0.0, 1.0)


def apply_patch(scene: Tensor, patch: Tensor, placement: Placement):
    """Composite the patch into the scene at the placement square.

    Returns (adversarial image, applied-region mask [1,H,W]). Pixels outside
    the mask are bitwise the scene's; the footprint is clipped at the border
    and the mask reflects the clipping. Gradient reaches the patch pixels
    (and flows through `scene` when it is itself on the tape).
    """
    c, h, w = scene.shape
    s = patch.shape[-1]
    side_px = max(int(math.floor(placement.side + 0.5)), 1)
    x0 = int(math.floor(placement.center[0] - side_px / 2.0 + 0.5))
    y0 = int(math.floor(placement.center[1] - side_px / 2.0 + 0.5))
    ix0, iy0 = max(x0, 0), max(y0, 0)
    ix1, iy1 = min(x0 + side_px, w), min(y0 + side_px, h)
    if ix0 >= ix1 or iy0 >= iy1:
        raise PlacementError(f"placement {placement} does not intersect the {w}x{h} image")

    resized = patch if side_px == s else bilinear_sample(patch, _resize_grid(s, side_px))
    cropped = resized[:, iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0]
    canvas = embed(cropped, (h, w), iy0, ix0)

    mask = np.zeros((1, h, w))
    mask[:, iy0:iy1, ix0:ix1] = 1.0
    mask3 = np.broadcast_to(mask, (c, h, w))
    x_adv = mul(scene, Tensor(1.0 - mask3)) + mul(canvas, Tensor(mask3.copy()))
    return x_adv, Tensor(mask)


def apply_on_target(scene: Tensor, patch: Tensor, target: GroundTruth, r_s: float):
    """Naive baseline placement: same square size, centered on the target."""
    x1, y1, x2, y2 = target.box
    side = math.sqrt(r_s * (x2 - x1) * (y2 - y1))
    placement = Placement(center=((x1 + x2) / 2.0, (y1 + y2) / 2.0), side=side, r_d=math.inf, r_s=r_s)
    return apply_patch(scene, patch, placement)
