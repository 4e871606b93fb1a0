"""Toy single-stage grid detectors: the victim family.

Three anchor-free variants (small / medium / wide) share one head layout:
a stack of stride-2 3x3 convs down to a `stride`-spaced grid, then a 1x1
head emitting, per cell, sigmoid-bounded center offsets, width/height as
sigmoid fractions of the image side, an objectness score, and per-class
sigmoid probabilities. One box per cell. Parameters are read-only during
attack and evaluation; training is single-threaded.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .ioutil import array_to_b64, b64_to_array
from .scenes import SceneSample
from .tensor import Tensor, conv2d, mul

_INIT_TAG = 0xD7

# (out_channels, stride) per 3x3 conv stage; strides multiply to the grid
# stride (16); pairwise-different parameter counts keep black-box transfer
# between variants meaningful
_VARIANTS = {
    "small": ((8, 2), (16, 2), (24, 2), (32, 2)),
    "medium": ((12, 2), (24, 2), (32, 2), (32, 1), (48, 2)),
    "wide": ((16, 2), (32, 2), (48, 2), (64, 2)),
}


class TrainingError(RuntimeError):
    """Raised when detector training diverges (non-finite loss)."""


@dataclass(frozen=True)
class Detection:
    box: tuple  # (x1, y1, x2, y2) pixels
    objectness: float
    class_probs: tuple
    confidence: float  # objectness * max class prob

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_probs))


@dataclass
class DetectorModel:
    variant: str
    num_classes: int
    grid: int  # output stride: input side / cells per side
    params: dict  # name -> Tensor
    meta: dict = field(default_factory=dict)

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def set_requires_grad(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag

    def check_finite(self):
        for name, t in self.params.items():
            if not np.isfinite(t.data).all():
                raise TrainingError(f"parameter {name} became non-finite")


def init_detector(variant: str, num_classes: int = 1, seed: int = 0, stride: int = 16) -> DetectorModel:
    if variant not in _VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(_VARIANTS)}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _INIT_TAG, zlib.crc32(variant.encode())]))
    params: dict = {}
    in_ch = 3
    for i, (out_ch, _s) in enumerate(_VARIANTS[variant]):
        fan_in = in_ch * 9
        params[f"conv{i}.weight"] = Tensor(
            rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, 3, 3)), requires_grad=True
        )
        params[f"conv{i}.bias"] = Tensor(np.zeros(out_ch), requires_grad=True)
        in_ch = out_ch
    head_out = 5 + num_classes
    params["head.weight"] = Tensor(
        rng.normal(0.0, math.sqrt(1.0 / in_ch), size=(head_out, in_ch, 1, 1)), requires_grad=True
    )
    head_bias = np.zeros(head_out)
    head_bias[4] = -2.0  # start with a low-objectness prior
    params["head.bias"] = Tensor(head_bias, requires_grad=True)
    return DetectorModel(
        variant=variant,
        num_classes=num_classes,
        grid=stride,
        params=params,
        meta={"seed": int(seed), "model_id": f"{variant}-s{seed}"},
    )


def _forward_features(model: DetectorModel, x: Tensor):
    """Backbone + head over [N,3,H,W]; returns (raw [N,g,g,5+C], feats)."""
    n, c, h, w = x.shape
    if h % model.grid or w % model.grid:
        raise ValueError(f"input {h}x{w} not divisible by stride {model.grid}")
    out = x
    for i, (_ch, s) in enumerate(_VARIANTS[model.variant]):
        out = conv2d(out, model.params[f"conv{i}.weight"], model.params[f"conv{i}.bias"], stride=s, pad=1).relu()
    feats = out  # last conv activations, used for attention maps
    raw = conv2d(out, model.params["head.weight"], model.params["head.bias"], stride=1, pad=0)
    raw = raw.sigmoid().transpose((0, 2, 3, 1))  # [N,g,g,5+C]
    return raw, feats


def forward_batch(model: DetectorModel, images: Tensor) -> Tensor:
    raw, _ = _forward_features(model, images)
    return raw


def forward(model: DetectorModel, image: Tensor) -> Tensor:
    """Per-cell predictions [cells, cells, 5+C] for one [3,H,W] image; fully
    differentiable w.r.t. the image."""
    if image.ndim != 3:
        raise ValueError(f"expected [3,H,W], got {image.shape}")
    raw, _ = _forward_features(model, image.reshape((1,) + tuple(image.shape)))
    return raw[0]


def iou(a, b) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(ix2 - ix1, 0.0), max(iy2 - iy1, 0.0)
    inter = iw * ih
    if inter <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def decode(raw, conf_threshold: float, iou_threshold: float, stride: int = 16) -> list:
    """Threshold cells by confidence, then greedy NMS by descending
    confidence; the surviving detections come back sorted descending."""
    data = raw.data if isinstance(raw, Tensor) else np.asarray(raw, dtype=np.float64)
    g = data.shape[0]
    img_side = g * stride
    cells = []
    for r in range(g):
        for c in range(g):
            tx, ty, tw, th, obj = data[r, c, :5]
            probs = data[r, c, 5:]
            conf = float(obj * probs.max())
            if conf < conf_threshold:
                continue
            cx = (c + tx) * stride
            cy = (r + ty) * stride
            bw = max(tw * img_side, 1e-6)
            bh = max(th * img_side, 1e-6)
            cells.append(
                Detection(
                    box=(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0),
                    objectness=float(obj),
                    class_probs=tuple(float(p) for p in probs),
                    confidence=conf,
                )
            )
    cells.sort(key=lambda d: (-d.confidence, d.box))
    kept: list = []
    for det in cells:
        if all(iou(det.box, k.box) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


def _assign_targets(sample: SceneSample, g: int, stride: int, num_classes: int):
    """Responsible cell per GT center; multi-object collisions keep the
    larger-area target."""
    obj_t = np.zeros((g, g))
    box_t = np.zeros((g, g, 4))
    cls_t = np.zeros((g, g, num_classes))
    area = np.zeros((g, g))
    img_side = g * stride
    for t in sample.targets:
        cx, cy = t.center
        col = min(int(cx / stride), g - 1)
        row = min(int(cy / stride), g - 1)
        a = t.width * t.height
        if obj_t[row, col] == 1.0 and area[row, col] >= a:
            continue
        obj_t[row, col] = 1.0
        area[row, col] = a
        box_t[row, col] = (cx / stride - col, cy / stride - row, t.width / img_side, t.height / img_side)
        cls_t[row, col] = 0.0
        cls_t[row, col, t.class_id] = 1.0
    return obj_t, box_t, cls_t


def _bce(pred: Tensor, target: np.ndarray) -> Tensor:
    p = pred.clamp(1e-7, 1.0 - 1e-7)
    t = Tensor(target)
    return -(mul(t, p.log()) + mul(Tensor(1.0 - target), (1.0 - p).log()))


def train_detector(
    model: DetectorModel,
    dataset,
    epochs: int,
    lr: float,
    momentum: float = 0.9,
    batch_size: int = 16,
    seed: int = 0,
    pos_weight: float = 5.0,
    box_weight: float = 5.0,
    verbose: bool = False,
) -> DetectorModel:
    """SGD-with-momentum training against center-cell assignments.

    Loss is objectness BCE over every cell (responsible cells up-weighted),
    squared-error box regression on responsible cells, and class BCE on
    responsible cells. Deterministic in `seed`.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("dataset is empty")
    h, w = samples[0].image.shape[1:]
    g = h // model.grid
    for s in samples:
        for t in s.targets:
            x1, y1, x2, y2 = t.box
            if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
                raise ValueError(f"ground-truth box {t.box} outside {w}x{h} image")

    targets = [_assign_targets(s, g, model.grid, model.num_classes) for s in samples]
    velocity = {name: np.zeros_like(t.data) for name, t in model.params.items()}
    model.set_requires_grad(True)

    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E, epoch]))
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        for start in range(0, len(samples), batch_size):
            idx = order[start : start + batch_size]
            images = Tensor(np.stack([samples[i].image.data for i in idx]))
            obj_t = np.stack([targets[i][0] for i in idx])
            box_t = np.stack([targets[i][1] for i in idx])
            cls_t = np.stack([targets[i][2] for i in idx])
            resp = obj_t[..., None]
            n_resp = max(obj_t.sum(), 1.0)

            raw = forward_batch(model, images)
            obj_bce = _bce(raw[:, :, :, 4], obj_t)
            weights = np.where(obj_t == 1.0, pos_weight, 1.0)
            loss_obj = mul(obj_bce, Tensor(weights)).sum() * (1.0 / weights.sum())
            box_diff = mul(raw[:, :, :, 0:4] - Tensor(box_t), Tensor(np.broadcast_to(resp, box_t.shape).copy()))
            loss_box = mul(box_diff, box_diff).sum() * (1.0 / n_resp)
            cls_bce = mul(_bce(raw[:, :, :, 5:], cls_t), Tensor(np.broadcast_to(resp, cls_t.shape).copy()))
            loss_cls = cls_bce.sum() * (1.0 / (n_resp * model.num_classes))
            loss = loss_obj + box_weight * loss_box + loss_cls

            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            epoch_loss += value * len(idx)

            for t in model.params.values():
                t.zero_grad()
            loss.backward()
            for name, t in model.params.items():
                velocity[name] = momentum * velocity[name] + t.grad
                t.data -= lr * velocity[name]
        model.check_finite()
        if verbose and (epoch % 10 == 0 or epoch == epochs - 1):
            print(f"  epoch {epoch:3d}  loss {epoch_loss / len(samples):.4f}")

    model.set_requires_grad(False)
    model.meta["trained_epochs"] = model.meta.get("trained_epochs", 0) + epochs
    return model


def attention_map(model: DetectorModel, image: Tensor) -> Tensor:
    """Gradient-weighted activation map of the last conv layer for summed
    objectness, upsampled to image size and normalized to [0,1] (all-zero
    maps stay all-zero)."""
    from . import kernels

    h, w = image.shape[1:]
    x = Tensor(image.data, requires_grad=True)
    raw, feats = _forward_features(model, x.reshape((1,) + tuple(x.shape)))
    raw[:, :, :, 4].sum().backward()
    grads = feats.grad[0]  # [Cf,g,g]
    acts = feats.data[0]
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * acts).sum(axis=0), 0.0)
    gy, gx = np.mgrid[0:h, 0:w]
    grid = np.stack([2.0 * gx / max(w - 1, 1) - 1.0, 2.0 * gy / max(h - 1, 1) - 1.0], axis=-1)
    up = kernels.bilinear_forward(np.ascontiguousarray(cam[None]), np.ascontiguousarray(grid))[0]
    peak = up.max()
    return Tensor(up / peak if peak > 0 else up)


# ---- persistence -----------------------------------------------------------


def save_detector(model: DetectorModel, path: str) -> str:
    doc = {
        "format": "patchlab-detector-v1",
        "variant": model.variant,
        "num_classes": model.num_classes,
        "grid": model.grid,
        "params": {
            name: {"shape": list(t.shape), "data": array_to_b64(t.data)} for name, t in model.params.items()
        },
        "meta": model.meta,
    }
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
    return path


def load_detector(path: str) -> DetectorModel:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "patchlab-detector-v1":
        raise ValueError(f"not a detector file: {path}")
    params = {
        name: Tensor(b64_to_array(entry["data"], entry["shape"])) for name, entry in doc["params"].items()
    }
    return DetectorModel(
        variant=doc["variant"],
        num_classes=doc["num_classes"],
        grid=doc["grid"],
        params=params,
        meta=doc.get("meta", {}),
    )
