"""Loss assembly and the background-patch optimization loop.

Each iteration composes the patch (fixed silhouette + trained background),
pushes it through a fresh transform draw, pastes one copy per target of the
iteration's scene, runs the victim detector, and descends the combined
objectness + smoothness loss on the background pixels only. Scenes cycle in
seeded shuffled order; every random draw is keyed by (seed, epoch,
iteration), so runs replay bitwise and checkpoints resume exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .detector import DetectorModel, decode, forward, iou
from .ioutil import array_to_b64, b64_to_array
from .masking import MaskedPatch, compose
from .pipeline import RandomDraw, TransformSpec, apply_on_target, apply_patch, place, pt_transform
from .tensor import Tensor

_SHUFFLE_TAG = 0xE0
_DRAW_TAG = 0xE1
_BASELINE_TAG = 0xBA


class AttackError(RuntimeError):
    """Raised when the attack loss goes non-finite."""


@dataclass(frozen=True)
class PlateauSchedule:
    factor: float = 0.5
    patience: int = 10


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 1.5
    lr: float = 0.03
    epochs: int = 200
    iters_per_epoch: int = 16
    conf_threshold: float = 0.4
    iou_threshold: float = 0.45
    r_d: float = 4.0
    r_s: float = 1.0
    transform: TransformSpec = field(default_factory=TransformSpec)
    schedule: PlateauSchedule = field(default_factory=PlateauSchedule)
    seed: int = 0
    placement: str = "outside"  # "outside" per the training strategy; "on" = naive baseline

    def validate(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1 or self.iters_per_epoch < 1:
            raise ValueError("epochs and iters_per_epoch must be >= 1")
        if self.placement not in ("outside", "on"):
            raise ValueError(f"placement must be 'outside' or 'on', got {self.placement!r}")
        self.transform.validate()


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    loss_obj: float
    loss_tv: float
    lr: float
    mean_objectness: float


@dataclass
class AttackTrace:
    records: list = field(default_factory=list)
    skipped_empty_scenes: int = 0

    def to_csv(self, path: str) -> str:
        lines = ["epoch,loss,loss_obj,loss_tv,lr,mean_objectness"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.loss!r},{r.loss_obj!r},{r.loss_tv!r},{r.lr!r},{r.mean_objectness!r}"
            )
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
        return path


def objectness_loss(raw: Tensor, conf_threshold: float) -> Tensor:
    """Mean objectness over grid cells whose confidence passes the threshold
    (pre-NMS, so every contributing cell keeps a gradient path); falls back
    to the max objectness when nothing passes."""
    data = raw.data
    conf = data[..., 4] * data[..., 5:].max(axis=-1)
    obj = raw[:, :, 4]
    sel = np.flatnonzero(conf.ravel() >= conf_threshold)
    if sel.size:
        return obj.take(sel).mean()
    return obj.max()


def tv_loss(patch: Tensor, eps: float = 1e-8) -> Tensor:
    """Isotropic total variation over interior sites, summed per channel.

    `eps` inside the radical keeps the gradient finite at zero difference.
    """
    if patch.shape[-1] < 2 or patch.shape[-2] < 2:
        raise ValueError(f"patch too small for TV: {patch.shape}")
    base = patch[:, :-1, :-1]
    dy = patch[:, 1:, :-1] - base
    dx = patch[:, :-1, 1:] - base
    return (dy * dy + dx * dx + eps).sqrt().sum()


def total_loss(l_obj: Tensor, l_tv: Tensor, alpha: float) -> Tensor:
    return l_obj + alpha * l_tv


def _targets_confidence(raw_data, targets, conf_threshold, iou_threshold, stride) -> float:
    """Mean over targets of the best matched post-NMS confidence (0 = hidden)."""
    if not targets:
        return 0.0
    dets = decode(raw_data, conf_threshold, iou_threshold, stride=stride)
    per = []
    for t in targets:
        best = 0.0
        for d in dets:
            if iou(d.box, t.box) >= 0.5 and d.confidence > best:
                best = d.confidence
        per.append(best)
    return float(np.mean(per))


def _attack_iteration(model, scene, mp, cfg, it_rng):
    """One compose -> transform -> paste-per-target -> detect -> loss pass."""
    p_aa = compose(mp)
    l_tv = tv_loss(p_aa)
    x = scene.image
    for target in scene.targets:
        draw = RandomDraw.sample(cfg.transform, mp.side, it_rng)
        warped = pt_transform(p_aa, cfg.transform, draw)
        if cfg.placement == "outside":
            x, _ = apply_patch(x, warped, place(target, cfg.r_d, cfg.r_s))
        else:
            x, _ = apply_on_target(x, warped, target, cfg.r_s)
    raw = forward(model, x)
    l_obj = objectness_loss(raw, cfg.conf_threshold)
    return total_loss(l_obj, l_tv, cfg.alpha), l_obj, l_tv, raw


def _save_checkpoint(path, epoch_next, lr, best, bad, trace, mp):
    doc = {
        "format": "patchlab-attack-checkpoint-v1",
        "epoch_next": epoch_next,
        "lr": lr,
        "best": best,
        "bad_epochs": bad,
        "skipped_empty_scenes": trace.skipped_empty_scenes,
        "records": [vars(r) for r in trace.records],
        "pstar": array_to_b64(mp.optimized.data),
        "side": mp.side,
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def _load_checkpoint(path, mp):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "patchlab-attack-checkpoint-v1":
        raise ValueError(f"not an attack checkpoint: {path}")
    if doc["side"] != mp.side:
        raise ValueError(f"checkpoint side {doc['side']} != patch side {mp.side}")
    mp.optimized.data[...] = b64_to_array(doc["pstar"], mp.optimized.shape)
    trace = AttackTrace(
        records=[EpochRecord(**r) for r in doc["records"]],
        skipped_empty_scenes=doc["skipped_empty_scenes"],
    )
    return doc["epoch_next"], doc["lr"], doc["best"], doc["bad_epochs"], trace


def run_attack(
    model: DetectorModel,
    scenes,
    mp: MaskedPatch,
    cfg: AttackConfig,
    checkpoint_path: str | None = None,
    checkpoint_every: int = 10,
    resume: bool = False,
    verbose: bool = False,
):
    """Optimize the background pixels of `mp` in place; returns (mp, trace).

    Deterministic in cfg.seed: two runs with identical inputs produce
    bitwise-identical patches, and resuming from a checkpoint matches an
    uninterrupted run exactly. The update step is the single writer of
    `mp.optimized`; foreground pixels receive exactly zero gradient and
    never change.
    """
    cfg.validate()
    model.set_requires_grad(False)
    samples = list(scenes)
    if not samples:
        raise ValueError("scene set is empty")

    start_epoch, lr, best, bad = 0, cfg.lr, math.inf, 0
    trace = AttackTrace()
    if resume and checkpoint_path and os.path.exists(checkpoint_path):
        start_epoch, lr, best, bad, trace = _load_checkpoint(checkpoint_path, mp)

    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _SHUFFLE_TAG, epoch])
        ).permutation(len(samples))
        sums = np.zeros(4)  # loss, obj, tv, target confidence
        count = 0
        for it in range(cfg.iters_per_epoch):
            scene = samples[order[it % len(samples)]]
            if not scene.targets:
                trace.skipped_empty_scenes += 1
                continue
            it_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _DRAW_TAG, epoch, it]))
            mp.optimized.zero_grad()
            loss, l_obj, l_tv, raw = _attack_iteration(model, scene, mp, cfg, it_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise AttackError(f"non-finite loss at epoch {epoch} iteration {it}")
            loss.backward()
            np.clip(mp.optimized.data - lr * mp.optimized.grad, 0.0, 1.0, out=mp.optimized.data)
            sums += (
                value,
                l_obj.item(),
                l_tv.item(),
                _targets_confidence(raw.data, scene.targets, cfg.conf_threshold, cfg.iou_threshold, model.grid),
            )
            count += 1

        mean = sums / count if count else np.zeros(4)
        trace.records.append(
            EpochRecord(
                epoch=epoch,
                loss=float(mean[0]),
                loss_obj=float(mean[1]),
                loss_tv=float(mean[2]),
                lr=lr,
                mean_objectness=float(mean[3]),
            )
        )
        if count:
            if mean[0] < best - 1e-12:
                best, bad = float(mean[0]), 0
            else:
                bad += 1
                if bad >= cfg.schedule.patience:
                    lr *= cfg.schedule.factor
                    bad = 0
        if verbose and (epoch % 10 == 0 or epoch == cfg.epochs - 1):
            print(
                f"  epoch {epoch:3d}  loss {mean[0]:.4f}  obj {mean[1]:.4f}  "
                f"tv {mean[2]:.2f}  lr {lr:.4g}  conf {mean[3]:.3f}"
            )
        if checkpoint_path and ((epoch + 1) % checkpoint_every == 0 or epoch + 1 == cfg.epochs):
            _save_checkpoint(checkpoint_path, epoch + 1, lr, best, bad, trace, mp)

    return mp, trace


def baseline_random_patch(mp: MaskedPatch, seed: int) -> MaskedPatch:
    """Control patch: same masks and silhouette, uniform-random background,
    never optimized."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _BASELINE_TAG]))
    pixels = rng.uniform(0.0, 1.0, size=mp.original.shape)
    fg3 = np.broadcast_to(mp.foreground_mask.data, mp.original.shape).astype(bool)
    pixels[fg3] = mp.original.data[fg3]
    return MaskedPatch(
        original=Tensor(mp.original.data.copy()),
        foreground_mask=Tensor(mp.foreground_mask.data.copy()),
        background_mask=Tensor(mp.background_mask.data.copy()),
        optimized=Tensor(pixels, requires_grad=True),
        meta={**mp.meta, "patch_id": f"random-s{seed}"},
    )


def make_attack_config(**overrides) -> AttackConfig:
    """AttackConfig with defaults, overridable field by field."""
    return replace(AttackConfig(), **overrides)
