"""Deterministic synthetic aerial scenes with exact box annotations.

Backgrounds are low-frequency noise; aircraft are parameterized polygon
silhouettes (fuselage + swept wings + tailplane) drawn at double precision.
Everything is a pure function of (seed, spec), so scene sets persist as
seeds plus an index and are regenerated on load; the 8-bit PNG export is
for inspection only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from .ioutil import save_png
from .tensor import Tensor

# sub-stream tags so scene/patch rngs never collide on the same seed
_SCENE_TAG = 0x5C
_PATCH_TAG = 0x70


class GenerationError(RuntimeError):
    """Raised when aircraft placement cannot satisfy the margins."""


@dataclass(frozen=True)
class GroundTruth:
    """Axis-aligned box (x1, y1, x2, y2) in pixel-edge coordinates, x1 < x2."""

    box: tuple
    class_id: int = 0

    @property
    def width(self) -> float:
        return self.box[2] - self.box[0]

    @property
    def height(self) -> float:
        return self.box[3] - self.box[1]

    @property
    def center(self) -> tuple:
        return ((self.box[0] + self.box[2]) / 2.0, (self.box[1] + self.box[3]) / 2.0)


@dataclass
class SceneSample:
    image: Tensor  # [3,H,W] in [0,1]
    targets: list


@dataclass(frozen=True)
class SceneSpec:
    canvas_px: int = 96
    min_aircraft: int = 1
    max_aircraft: int = 2
    min_size_px: float = 18.0
    max_size_px: float = 30.0
    # headroom reserved above each aircraft so downstream patch placement
    # (distance coefficient reserve_rd, area coefficient reserve_rs) stays
    # in-bounds without clipping
    reserve_rd: float = 4.0
    reserve_rs: float = 1.0

    def validate(self):
        if not (96 <= self.canvas_px <= 256):
            raise ValueError(f"canvas_px {self.canvas_px} outside [96, 256]")
        if not (1 <= self.min_aircraft <= self.max_aircraft <= 4):
            raise ValueError(f"aircraft count range [{self.min_aircraft}, {self.max_aircraft}] invalid")
        if not (16 <= self.min_size_px <= self.max_size_px <= 48):
            raise ValueError(f"size range [{self.min_size_px}, {self.max_size_px}] outside [16, 48]")
        if self.reserve_rd <= 0 or self.reserve_rs <= 0:
            raise ValueError("reserve coefficients must be positive")


@dataclass
class SceneSet:
    spec: SceneSpec
    seeds: list
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def _poly_mask(pts: np.ndarray, h: int, w: int) -> np.ndarray:
    """Crossing-number rasterization of one polygon over pixel centers."""
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.zeros((h, w), dtype=bool)
    n = len(pts)
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        straddles = ((y1 <= py) & (py < y2)) | ((y2 <= py) & (py < y1))
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & (px < xint)
    return inside


def _aircraft_polygons(fatness: float, span: float, length: float) -> list:
    """Unit-scale part polygons (x right, y down, nose at -y).

    `fatness` widens the fuselage and deepens wing/tail chords, `span`
    stretches the wings, `length` the fuselage.
    """
    fw = 0.11 * fatness
    fuselage = [
        (0.0, -1.0 * length),
        (fw, -0.62 * length),
        (fw, 0.45 * length),
        (0.55 * fw, 0.95 * length),
        (-0.55 * fw, 0.95 * length),
        (-fw, 0.45 * length),
        (-fw, -0.62 * length),
    ]
    # higher fatness also sweeps the wing root forward so the silhouette
    # fills its bounding square instead of just thickening
    root_le = -0.28 - 0.14 * (fatness - 1.0)
    tip_le = 0.18 - 0.06 * (fatness - 1.0)
    root_te = root_le + 0.40 * fatness
    tip_te = tip_le + 0.24 * fatness
    wing_r = [(0.06, root_le), (0.98 * span, tip_le), (0.98 * span, tip_te), (0.06, root_te)]
    wing_l = [(-x, y) for x, y in wing_r]
    t_root_le, t_tip_le = 0.62, 0.86
    t_span = (0.42 + 0.06 * (fatness - 1.0)) * span
    tail_r = [
        (0.04, t_root_le),
        (t_span, t_tip_le),
        (t_span, min(t_tip_le + 0.14 * fatness, 1.04)),
        (0.04, min(t_root_le + 0.22 * fatness, 1.0)),
    ]
    tail_l = [(-x, y) for x, y in tail_r]
    return [fuselage, wing_r, wing_l, tail_r, tail_l]


def _aircraft_mask(h, w, cx, cy, scale, theta, fatness, span, length) -> np.ndarray:
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    mask = np.zeros((h, w), dtype=bool)
    for part in _aircraft_polygons(fatness, span, length):
        pts = np.asarray(part) @ rot.T * scale + (cx, cy)
        mask |= _poly_mask(pts, h, w)
    return mask


def _mask_box(mask: np.ndarray) -> tuple:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def _background(rng, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.18, 0.50, size=(3, 1, 1))
    coarse = rng.normal(0.0, 0.10, size=(3, 5, 5))
    gy, gx = np.mgrid[0:h, 0:w]
    grid = np.stack(
        [2.0 * gx / (w - 1) - 1.0, 2.0 * gy / (h - 1) - 1.0], axis=-1
    )
    lowfreq = kernels.bilinear_forward(np.ascontiguousarray(coarse), np.ascontiguousarray(grid))
    grain = rng.normal(0.0, 0.015, size=(3, h, w))
    return np.clip(base + lowfreq + grain, 0.0, 1.0)


def _paint(img: np.ndarray, mask: np.ndarray, rng) -> None:
    lum = rng.uniform(0.60, 0.88)
    color = np.clip(lum + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
    speckle = rng.normal(0.0, 0.02, size=(3, int(mask.sum())))
    img[:, mask] = np.clip(color[:, None] + speckle, 0.0, 1.0)


def _reserved_region(box, r_d: float, r_s: float) -> tuple:
    """Union of the target box and its downstream patch footprint."""
    x1, y1, x2, y2 = box
    bw, bh = x2 - x1, y2 - y1
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0 - bh / r_d
    side = np.sqrt(r_s * bw * bh)
    px1, py1 = cx - side / 2.0, cy - side / 2.0
    px2, py2 = cx + side / 2.0, cy + side / 2.0
    return (min(x1, px1), min(y1, py1), max(x2, px2), max(y2, py2))


def _overlaps(a, b, gap: float = 2.0) -> bool:
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def generate_scene(seed: int, spec: SceneSpec) -> SceneSample:
    """Render one scene; deterministic in (seed, spec).

    Raises GenerationError when placement cannot satisfy the reserve
    margins after bounded retries.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _SCENE_TAG]))
    h = w = spec.canvas_px
    img = _background(rng, h, w)
    n = int(rng.integers(spec.min_aircraft, spec.max_aircraft + 1))
    regions: list = []
    targets: list = []
    for _ in range(n):
        for _attempt in range(80):
            size = rng.uniform(spec.min_size_px, spec.max_size_px)
            theta = rng.uniform(0.0, 2.0 * np.pi)
            fatness = rng.uniform(0.9, 1.25)
            span = rng.uniform(0.85, 1.0)
            length = rng.uniform(0.9, 1.0)
            cx = rng.uniform(0.12 * w, 0.88 * w)
            cy = rng.uniform(0.15 * h, 0.88 * h)
            mask = _aircraft_mask(h, w, cx, cy, size / 2.05, theta, fatness, span, length)
            if mask.sum() < 30:
                continue
            box = _mask_box(mask)
            region = _reserved_region(box, spec.reserve_rd, spec.reserve_rs)
            if region[0] < 1 or region[1] < 1 or region[2] > w - 1 or region[3] > h - 1:
                continue
            if any(_overlaps(region, r) for r in regions):
                continue
            _paint(img, mask, rng)
            regions.append(region)
            targets.append(GroundTruth(box=box))
            break
        else:
            raise GenerationError(f"could not place aircraft {len(targets) + 1}/{n} for seed {seed}")
    return SceneSample(image=Tensor(img), targets=targets)


def _render_patch_arrays(seed: int, side: int):
    if side < 32:
        raise ValueError(f"patch side {side} < 32")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _PATCH_TAG]))
    img = rng.uniform(0.0, 0.045, size=(3, side, side))
    theta = rng.uniform(-0.35, 0.35)
    # chunkier than the scene silhouettes so the square is 40-60% covered
    fatness = rng.uniform(2.4, 2.8)
    span = rng.uniform(0.92, 1.0)
    length = rng.uniform(0.95, 1.0)
    target_frac = rng.uniform(0.43, 0.52)
    scale = side / 2.4
    mask = None
    for _ in range(6):
        mask = _aircraft_mask(side, side, side / 2.0, side / 2.0, scale, theta, fatness, span, length)
        frac = mask.mean()
        if abs(frac - target_frac) < 0.01:
            break
        # silhouette area grows quadratically in scale while fully visible
        scale = min(scale * np.sqrt(target_frac / max(frac, 1e-6)), (side - 2.0) / 2.05)
    lum = rng.uniform(0.60, 0.85)
    color = np.clip(lum + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
    speckle = rng.normal(0.0, 0.02, size=(3, int(mask.sum())))
    img[:, mask] = np.clip(color[:, None] + speckle, 0.25, 1.0)
    return img, mask


def render_original_patch(seed: int, side: int) -> Tensor:
    """Photo analogue of the protected object on a near-black backdrop:
    one centered silhouette covering 40-60% of the square."""
    img, _ = _render_patch_arrays(seed, side)
    return Tensor(img)


def render_original_patch_mask(seed: int, side: int) -> np.ndarray:
    """The generator's own silhouette mask for the same (seed, side)."""
    _, mask = _render_patch_arrays(seed, side)
    return mask


def generate_scene_set(spec: SceneSpec, seeds) -> SceneSet:
    return SceneSet(spec=spec, seeds=list(seeds), samples=[generate_scene(s, spec) for s in seeds])


# ---- persistence -----------------------------------------------------------


def save_scene_set(sset: SceneSet, out_dir: str, config_hash: str = "") -> str:
    """Write PNGs for inspection plus an index of seeds/spec/boxes.

    The index is the source of truth: loading regenerates scenes from the
    seeds at full precision.
    """
    os.makedirs(out_dir, exist_ok=True)
    index = {
        "format": "patchlab-scene-set-v1",
        "config_hash": config_hash,
        "spec": asdict(sset.spec),
        "seeds": [int(s) for s in sset.seeds],
        "boxes": [[list(t.box) for t in sample.targets] for sample in sset.samples],
        "class_ids": [[t.class_id for t in sample.targets] for sample in sset.samples],
    }
    for i, sample in enumerate(sset.samples):
        save_png(os.path.join(out_dir, f"scene_{i:04d}.png"), sample.image.data)
    index_path = os.path.join(out_dir, "index.json")
    with open(index_path, "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)
    return index_path


def load_scene_set(in_dir: str) -> SceneSet:
    """Regenerate a persisted scene set from its index (seeds + spec)."""
    with open(os.path.join(in_dir, "index.json")) as f:
        index = json.load(f)
    if index.get("format") != "patchlab-scene-set-v1":
        raise ValueError(f"not a scene-set index: {in_dir}")
    spec = SceneSpec(**index["spec"])
    sset = generate_scene_set(spec, index["seeds"])
    for i, (sample, boxes) in enumerate(zip(sset.samples, index["boxes"])):
        got = [list(t.box) for t in sample.targets]
        if not np.allclose(got, boxes):
            raise ValueError(f"scene {i} regenerated with different boxes; index is stale")
    return sset


def scene_set_config_hash(in_dir: str) -> str:
    with open(os.path.join(in_dir, "index.json")) as f:
        return json.load(f).get("config_hash", "")
