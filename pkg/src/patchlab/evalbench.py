"""Measurement protocols: pseudo-ground-truth AP, per-target confidences,
transferability matrices, and the smoothness-weight ablation.

AP uses the clean image's decoded detections as ground truth, so objects the
victim never finds cannot be claimed as attack successes; by construction
the clean set scores AP 1.0 against itself. Per-target confidence mirrors
the physical protocol: best matched post-NMS confidence at a reporting
threshold, zero when the target goes undetected. Everything here is
read-only over models and patches.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .detector import DetectorModel, decode, forward, iou
from .masking import MaskedPatch, build_masked_patch, compose
from .pipeline import RandomDraw, TransformSpec, apply_on_target, apply_patch, place, pt_transform
from .scenes import SceneSample
from .tensor import Tensor

_EVAL_DRAW_TAG = 0xEF


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalProtocol:
    conf_threshold: float = 0.4
    iou_threshold: float = 0.45
    ap_iou: float = 0.5
    match_iou: float = 0.5
    report_threshold: float = 0.2
    r_d: float = 4.0
    r_s: float = 1.0
    placement: str = "outside"
    transform: TransformSpec | None = None  # None = deterministic identity draws
    eval_seed: int = 1234
    protected_targets: int | None = None  # None = patch every target


@dataclass
class EvalReport:
    ap: float
    per_target_confidence: list
    mean_confidence: float
    config_hash: str = ""
    model_id: str = ""
    patch_id: str = ""


@dataclass
class TransferMatrix:
    rows: list  # training-model ids (one patch per row)
    cols: list  # victim-model ids
    cells: list  # cells[i][j] = mean protected-target confidence

    def to_csv(self, path: str) -> str:
        lines = ["patch\\victim," + ",".join(self.cols)]
        for rid, row in zip(self.rows, self.cells):
            lines.append(rid + "," + ",".join(repr(v) for v in row))
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
        return path


def build_patched_suite(scenes, mp: MaskedPatch, protocol: EvalProtocol, eval_seed: int | None = None):
    """Apply the patch to the first `protected_targets` targets in scene
    order; remaining targets stay clean. Returns (patched scenes, protected
    target indices per scene)."""
    seed = protocol.eval_seed if eval_seed is None else eval_seed
    p_aa = Tensor(compose(mp).data)  # constant; evaluation carries no tape
    side = mp.side
    spec = protocol.transform if protocol.transform is not None else TransformSpec.identity()
    budget = protocol.protected_targets
    patched, protected = [], []
    used = 0
    for si, scene in enumerate(scenes):
        x = scene.image
        chosen = []
        for ti, target in enumerate(scene.targets):
            if budget is not None and used >= budget:
                break
            used += 1
            chosen.append(ti)
            if protocol.transform is not None:
                rng = np.random.default_rng(np.random.SeedSequence([seed, _EVAL_DRAW_TAG, si, ti]))
                draw = RandomDraw.sample(spec, side, rng)
            else:
                draw = RandomDraw.identity(side)
            warped = pt_transform(p_aa, spec, draw)
            if protocol.placement == "outside":
                x, _ = apply_patch(x, warped, place(target, protocol.r_d, protocol.r_s))
            else:
                x, _ = apply_on_target(x, warped, target, protocol.r_s)
        patched.append(SceneSample(image=Tensor(x.data), targets=scene.targets))
        protected.append(chosen)
    return patched, protected


def per_target_confidence(
    model: DetectorModel,
    scene: SceneSample,
    threshold: float,
    conf_threshold: float = 0.4,
    iou_threshold: float = 0.45,
    match_iou: float = 0.5,
) -> list:
    """Best matched detection confidence per ground-truth target; 0.0 when
    nothing at or above `threshold` overlaps it."""
    if not scene.targets:
        return []
    dets = decode(forward(model, scene.image), conf_threshold, iou_threshold, stride=model.grid)
    out = []
    for t in scene.targets:
        best = 0.0
        for d in dets:
            if d.confidence >= threshold and iou(d.box, t.box) >= match_iou and d.confidence > best:
                best = d.confidence
        out.append(best)
    return out


def average_precision(preds_by_scene, gts_by_scene, iou_match: float) -> float:
    """Ranked all-point-interpolated AP with greedy confidence-ordered
    matching; ranking ties break on box coordinates so scene order is
    irrelevant."""
    total_gt = sum(len(g) for g in gts_by_scene)
    if total_gt == 0:
        raise EvaluationError("no ground truth to match against")
    entries = []
    for si, preds in enumerate(preds_by_scene):
        for d in preds:
            entries.append((d.confidence, d.box, si))
    if not entries:
        return 0.0
    entries.sort(key=lambda e: (-e[0], e[1]))
    matched = [set() for _ in gts_by_scene]
    tp = np.zeros(len(entries))
    for i, (_conf, box, si) in enumerate(entries):
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts_by_scene[si]):
            if j in matched[si]:
                continue
            v = iou(box, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_match:
            matched[si].add(best_j)
            tp[i] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / total_gt
    precision = cum_tp / np.arange(1, len(entries) + 1)
    # precision envelope, then sum over recall steps
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(1, len(mrec)):
        ap += (mrec[i] - mrec[i - 1]) * mpre[i]
    return float(ap)


def pseudo_gt_ap(
    model: DetectorModel,
    clean_scenes,
    patched_scenes,
    iou_match: float = 0.5,
    conf_threshold: float = 0.4,
    iou_threshold: float = 0.45,
) -> float:
    """AP of the patched suite against the clean suite's own detections."""
    if len(clean_scenes) != len(patched_scenes):
        raise EvaluationError("clean and patched sets must be index-aligned")

    def _img(s):
        return s.image if isinstance(s, SceneSample) else s

    gts, preds = [], []
    for clean, patched in zip(clean_scenes, patched_scenes):
        clean_dets = decode(forward(model, _img(clean)), conf_threshold, iou_threshold, stride=model.grid)
        gts.append([d.box for d in clean_dets])
        preds.append(decode(forward(model, _img(patched)), conf_threshold, iou_threshold, stride=model.grid))
    if sum(len(g) for g in gts) == 0:
        raise EvaluationError("clean suite produced zero detections; nothing to evaluate")
    return average_precision(preds, gts, iou_match)


def evaluate_patch(
    model: DetectorModel,
    scenes,
    mp: MaskedPatch,
    protocol: EvalProtocol,
    config_hash: str = "",
    with_ap: bool = True,
) -> EvalReport:
    """Headline numbers for one (model, patch) pair on a scene suite."""
    patched, protected = build_patched_suite(scenes, mp, protocol)
    confidences = []
    for scene, chosen in zip(patched, protected):
        if not chosen:
            continue
        per = per_target_confidence(
            model,
            scene,
            protocol.report_threshold,
            protocol.conf_threshold,
            protocol.iou_threshold,
            protocol.match_iou,
        )
        confidences.extend(per[i] for i in chosen)
    if not confidences:
        raise EvaluationError("no protected targets in the suite")
    ap = (
        pseudo_gt_ap(model, list(scenes), patched, protocol.ap_iou, protocol.conf_threshold, protocol.iou_threshold)
        if with_ap
        else float("nan")
    )
    return EvalReport(
        ap=ap,
        per_target_confidence=confidences,
        mean_confidence=float(np.mean(confidences)),
        config_hash=config_hash,
        model_id=model.meta.get("model_id", ""),
        patch_id=mp.meta.get("patch_id", ""),
    )


def mean_protected_confidence(model, scenes, mp, protocol) -> float:
    return evaluate_patch(model, scenes, mp, protocol, with_ap=False).mean_confidence


def transfer_matrix(models, patches, scenes, protocol: EvalProtocol) -> TransferMatrix:
    """Cell (i, j): patch trained on model i, evaluated on victim j.
    Diagonal cells are the white-box results."""
    if len(models) != len(patches):
        raise EvaluationError("need exactly one patch per training model")
    rows = [p.meta.get("patch_id", f"patch{i}") for i, p in enumerate(patches)]
    cols = [m.meta.get("model_id", f"model{j}") for j, m in enumerate(models)]
    cells = [
        [mean_protected_confidence(victim, scenes, patch, protocol) for victim in models] for patch in patches
    ]
    return TransferMatrix(rows=rows, cols=cols, cells=cells)


def render_heatmap(matrix: TransferMatrix, path: str, cell_px: int = 48) -> str:
    """Red = strong attack (low confidence), blue = weak, mirroring the
    digital/physical result tables."""
    from PIL import Image

    vals = np.asarray(matrix.cells, dtype=np.float64)
    red = np.array([0.82, 0.10, 0.10])
    blue = np.array([0.16, 0.25, 0.85])
    rgb = red[None, None] + vals[..., None] * (blue - red)[None, None]
    img = np.kron(rgb, np.ones((cell_px, cell_px, 1)))
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)
    return path


def eot_mean_confidences(model, scenes, mp, protocol: EvalProtocol, n_draws: int = 20, seed_base: int = 9000):
    """Mean protected-target confidence under `n_draws` held-out transform
    seeds (protocol must carry a TransformSpec)."""
    if protocol.transform is None:
        raise EvaluationError("EOT evaluation needs a transform spec")
    out = []
    for k in range(n_draws):
        patched, protected = build_patched_suite(scenes, mp, protocol, eval_seed=seed_base + k)
        confs = []
        for scene, chosen in zip(patched, protected):
            if not chosen:
                continue
            per = per_target_confidence(
                model,
                scene,
                protocol.report_threshold,
                protocol.conf_threshold,
                protocol.iou_threshold,
                protocol.match_iou,
            )
            confs.extend(per[i] for i in chosen)
        out.append(float(np.mean(confs)))
    return out


def tv_ablation(
    alphas,
    cfg,
    scenes,
    model: DetectorModel,
    source_patch: Tensor,
    saliency_threshold: float = 0.1,
    protocol: EvalProtocol | None = None,
):
    """Re-run the attack per smoothness weight with identical seeds; report
    (alpha, final TV of the trained patch, mean protected confidence)."""
    from .attack import run_attack, tv_loss

    if not alphas:
        raise ValueError("alphas must be nonempty")
    protocol = protocol or EvalProtocol(
        conf_threshold=cfg.conf_threshold,
        iou_threshold=cfg.iou_threshold,
        r_d=cfg.r_d,
        r_s=cfg.r_s,
        placement=cfg.placement,
    )
    rows = []
    for alpha in alphas:
        mp = build_masked_patch(source_patch, saliency_threshold, init_seed=cfg.seed)
        mp, _trace = run_attack(model, scenes, mp, replace(cfg, alpha=float(alpha)))
        final_tv = tv_loss(compose(mp)).item()
        conf = mean_protected_confidence(model, scenes, mp, protocol)
        rows.append((float(alpha), final_tv, conf))
    return rows


def ablation_to_csv(rows, path: str) -> str:
    lines = ["alpha,final_tv,mean_confidence"]
    for alpha, tv, conf in rows:
        lines.append(f"{alpha!r},{tv!r},{conf!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path
