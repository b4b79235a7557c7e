"""Evaluation: keypoint similarity matching with AP/AR, PCK, segmentation
IoU, scale-aligned depth errors, and angular normal errors, plus the
top-down crop-and-flip pose inference path that feeds them.

Conventions that tests pin down:

* Keypoint similarity for one person is exp(-d^2 / (2 * area * (2s)^2))
  averaged over labeled keypoints (visibility > 0).
* Detections are matched greedily per image, highest score first; each takes
  the unmatched ground truth with the best similarity at or above the
  threshold, ties resolved toward the lowest ground-truth index. This equals
  the lexicographic-maximum assignment, which the tests enumerate.
* Average precision interpolates precision at 101 evenly spaced recall
  points per threshold, then averages thresholds 0.50:0.05:0.95. Average
  recall caps detections per image first.
* Depth predictions are affinely aligned (least squares) to ground truth
  over person pixels before RMSE / AbsRel / delta accuracy.
* Median angular error with an even pixel count is the lower middle value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import crops, fileio, heads
from .errors import (BadSizeError, DegenerateBoxError, EmptyMaskError,
                     NoLabeledKeypointsError, ShapeMismatchError)
from .skeleton import N_KEYPOINTS, N_PARTS, flip_index

__all__ = [
    "EvalProtocol", "MetricReport", "oks", "greedy_match", "keypoint_ap_ar",
    "pck", "seg_confusion", "seg_metrics", "depth_metrics", "normal_metrics",
    "topdown_infer", "evaluate_model", "evaluate_predictions",
    "write_predictions",
]


@dataclass(frozen=True)
class EvalProtocol:
    """Fixed evaluation constants; one instance is shared by every task."""
    oks_thresholds: tuple = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
    keypoint_sigma: float = 0.05          # uniform per-keypoint falloff
    ar_max_dets: int = 20
    pck_fraction: float = 0.1             # of the box diagonal
    delta_threshold: float = 1.25
    angle_thresholds: tuple = (11.25, 22.5, 30.0)
    flip_test: bool = True

    def sigmas(self, k: int = N_KEYPOINTS) -> np.ndarray:
        return np.full(k, self.keypoint_sigma)


@dataclass
class MetricReport:
    task: str
    metrics: dict
    n_samples: int

    def rows(self) -> list:
        return [[self.task, k, float(v), self.n_samples]
                for k, v in self.metrics.items()]

    def write_csv(self, path) -> None:
        fileio.write_csv(path, ["task", "metric", "value", "n_samples"],
                         self.rows())


# -- keypoint similarity ------------------------------------------------------

def oks(pred: np.ndarray, gt: np.ndarray, vis: np.ndarray, area: float,
        sigmas: np.ndarray) -> float:
    """Similarity in (0, 1] between one predicted and one labeled pose."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    vis = np.asarray(vis)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeMismatchError(f"oks: pred {pred.shape} vs gt {gt.shape}")
    if area <= 0:
        raise DegenerateBoxError(f"oks: area {area} must be positive")
    labeled = vis > 0
    if not labeled.any():
        raise NoLabeledKeypointsError("oks: pose has no labeled keypoints")
    d2 = np.sum((pred - gt) ** 2, axis=1)
    e = d2 / (2.0 * area * (2.0 * np.asarray(sigmas)) ** 2)
    return float(np.mean(np.exp(-e[labeled])))


def greedy_match(preds: list, gts: list, threshold: float,
                 sigmas: np.ndarray) -> list:
    """Match detections to ground truths within one image.

    preds: [(coords [K,2], score)], gts: [(coords [K,2], vis [K], area)].
    Returns one gt index (or -1) per prediction, in the original pred order.
    Ground truths without labeled keypoints are skipped entirely.
    """
    eligible = [i for i, (_, vis, _) in enumerate(gts)
                if (np.asarray(vis) > 0).any()]
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    taken: set[int] = set()
    assigned = [-1] * len(preds)
    for pi in order:
        best_gt = -1
        best_oks = -math.inf
        for gi in eligible:
            if gi in taken:
                continue
            coords, vis, area = gts[gi]
            s = oks(preds[pi][0], coords, vis, area, sigmas)
            # ascending gi plus a strict comparison keeps the lowest index on ties
            if s >= threshold and s > best_oks:
                best_oks = s
                best_gt = gi
        if best_gt >= 0:
            taken.add(best_gt)
            assigned[pi] = best_gt
    return assigned


def keypoint_ap_ar(preds_per_image: list, gts_per_image: list,
                   protocol: EvalProtocol = EvalProtocol()) -> dict:
    """Averaged AP and AR over the protocol's similarity thresholds."""
    if len(preds_per_image) != len(gts_per_image):
        raise ShapeMismatchError("keypoint_ap_ar: image count mismatch")
    n_kpts = next((len(gt[1]) for gts in gts_per_image for gt in gts), N_KEYPOINTS)
    sigmas = protocol.sigmas(n_kpts)
    # cap detections per image up front, keeping the highest scores
    capped = []
    for preds in preds_per_image:
        order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
        capped.append([preds[i] for i in order[:protocol.ar_max_dets]])

    n_gt = sum(1 for gts in gts_per_image for (_, vis, _) in gts
               if (np.asarray(vis) > 0).any())
    if n_gt == 0:
        raise NoLabeledKeypointsError("keypoint_ap_ar: no labeled ground truth")

    recall_grid = np.linspace(0.0, 1.0, 101)
    ap_per_thr = []
    ar_per_thr = []
    for thr in protocol.oks_thresholds:
        rows = []  # (score, image index, rank within image, is true positive)
        for img, (preds, gts) in enumerate(zip(capped, gts_per_image)):
            assigned = greedy_match(preds, gts, thr, sigmas)
            for rank, ((_, score), gt) in enumerate(zip(preds, assigned)):
                rows.append((score, img, rank, gt >= 0))
        rows.sort(key=lambda r: (-r[0], r[1], r[2]))
        tp = np.cumsum([r[3] for r in rows]) if rows else np.zeros(0)
        fp = np.cumsum([not r[3] for r in rows]) if rows else np.zeros(0)
        recall = tp / n_gt
        precision = tp / np.maximum(tp + fp, 1)
        interp = np.zeros(101)
        for i, r in enumerate(recall_grid):
            at = precision[recall >= r]
            interp[i] = at.max() if at.size else 0.0
        ap_per_thr.append(float(interp.mean()))
        ar_per_thr.append(float(recall[-1]) if len(rows) else 0.0)
    return {"ap": float(np.mean(ap_per_thr)), "ar": float(np.mean(ar_per_thr))}


def pck(pred: np.ndarray, gt: np.ndarray, vis: np.ndarray, diag: np.ndarray,
        fraction: float) -> float:
    """Fraction of labeled keypoints within fraction * box diagonal."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    vis = np.asarray(vis)
    diag = np.asarray(diag, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ShapeMismatchError(f"pck: pred {pred.shape} vs gt {gt.shape}")
    labeled = vis > 0
    if not labeled.any():
        raise NoLabeledKeypointsError("pck: no labeled keypoints")
    dist = np.linalg.norm(pred - gt, axis=-1)
    ok = dist <= fraction * diag[:, None]
    return float(ok[labeled].mean())


# -- dense tasks ------------------------------------------------------------------

def seg_confusion(preds: list, gts: list, n_classes: int = N_PARTS) -> np.ndarray:
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        p = np.asarray(p).ravel()
        g = np.asarray(g).ravel()
        if p.shape != g.shape:
            raise ShapeMismatchError("seg_confusion: shape mismatch")
        np.add.at(conf, (g, p), 1)
    return conf


def seg_metrics(preds: list, gts: list, n_classes: int = N_PARTS) -> dict:
    """Mean IoU over classes present in gt or prediction; mean per-class
    accuracy over classes present in gt."""
    conf = seg_confusion(preds, gts, n_classes)
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1).astype(np.float64)
    pred_count = conf.sum(axis=0).astype(np.float64)
    union = gt_count + pred_count - tp
    present = union > 0
    iou = np.zeros(n_classes)
    iou[present] = tp[present] / union[present]
    in_gt = gt_count > 0
    acc = tp[in_gt] / gt_count[in_gt]
    return {"miou": float(iou[present].mean()), "macc": float(acc.mean())}


def _align_depth(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    a = np.stack([pred, np.ones_like(pred)], axis=1)
    coef, *_ = np.linalg.lstsq(a, gt, rcond=None)
    return a @ coef


def depth_metrics(preds: list, gts: list, masks: list,
                  protocol: EvalProtocol = EvalProtocol()) -> dict:
    """Per-image affine alignment, then RMSE, AbsRel, and the fraction of
    pixels whose depth ratio stays under the protocol threshold. Aligned
    values at or below zero count as ratio failures."""
    rmse, absrel, delta = [], [], []
    for p, g, m in zip(preds, gts, masks):
        m = np.asarray(m, dtype=bool)
        if not m.any():
            raise EmptyMaskError("depth_metrics: empty mask")
        pv = np.asarray(p, dtype=np.float64)[m]
        gv = np.asarray(g, dtype=np.float64)[m]
        av = _align_depth(pv, gv)
        rmse.append(math.sqrt(float(np.mean((av - gv) ** 2))))
        absrel.append(float(np.mean(np.abs(av - gv) / gv)))
        pos = av > 0
        ratio = np.full(av.shape, np.inf)
        ratio[pos] = np.maximum(av[pos] / gv[pos], gv[pos] / av[pos])
        delta.append(float(np.mean(ratio < protocol.delta_threshold)))
    return {"rmse": float(np.mean(rmse)), "absrel": float(np.mean(absrel)),
            "delta1": float(np.mean(delta))}


def normal_metrics(preds: list, gts: list, masks: list,
                   protocol: EvalProtocol = EvalProtocol()) -> dict:
    """Angular errors in degrees over all masked pixels pooled across
    images. Inputs are [H, W, 3]; predictions are L2-normalized here."""
    angles = []
    for p, g, m in zip(preds, gts, masks):
        m = np.asarray(m, dtype=bool)
        pv = np.asarray(p, dtype=np.float64)[m]
        gv = np.asarray(g, dtype=np.float64)[m]
        pv = pv / np.maximum(np.linalg.norm(pv, axis=-1, keepdims=True), 1e-12)
        gv = gv / np.maximum(np.linalg.norm(gv, axis=-1, keepdims=True), 1e-12)
        dots = np.clip(np.sum(pv * gv, axis=-1), -1.0, 1.0)
        angles.append(np.degrees(np.arccos(dots)))
    if not angles or sum(a.size for a in angles) == 0:
        raise EmptyMaskError("normal_metrics: no masked pixels")
    pooled = np.sort(np.concatenate(angles))
    out = {
        "mean_deg": float(pooled.mean()),
        "median_deg": float(pooled[(pooled.size - 1) // 2]),
    }
    for t in protocol.angle_thresholds:
        out[f"within_{t:g}"] = float((pooled < t).mean())
    return out


# -- top-down pose inference ---------------------------------------------------------

def topdown_infer(image: np.ndarray, boxes: np.ndarray, model: heads.TaskModel,
                  protocol: EvalProtocol = EvalProtocol()) -> list:
    """Crop each person box, run the pose model (optionally averaged with
    its mirrored view), and decode keypoints back into image coordinates.
    Returns [(coords [K,2], scores [K])] in the order boxes were given."""
    if model.task != "pose":
        raise BadSizeError(f"topdown_infer wants a pose model, got {model.task!r}")
    in_h, in_w = model.cfg.image_height, model.cfg.image_width
    idx = flip_index()
    results = []
    for box in np.asarray(boxes, dtype=np.float64):
        padded = crops.pad_box_to_aspect(box, in_h / in_w)
        crop = crops.crop_resize(image, padded, in_h, in_w)
        batch = [crop]
        if protocol.flip_test:
            batch.append(crop[:, ::-1])
        maps = model.predict(np.stack(batch).astype(np.float32))
        heat = maps[0]
        if protocol.flip_test:
            heat = 0.5 * (heat + maps[1][idx][:, :, ::-1])
        coords, scores = heads.decode_keypoints(heat, stride=heads.POSE_STRIDE)
        results.append((crops.crop_to_image_coords(coords, padded, in_h, in_w),
                        scores))
    return results


# -- dataset-level driver --------------------------------------------------------------

def _predict_batched(model: heads.TaskModel, images: np.ndarray,
                     batch: int = 8) -> np.ndarray:
    outs = [model.predict(images[i:i + batch])
            for i in range(0, len(images), batch)]
    return np.concatenate(outs, axis=0)


def _pose_report(entries: list, protocol: EvalProtocol) -> MetricReport:
    """entries: (pred_coords, pred_scores, gt_coords, gt_vis, box)."""
    all_pred = np.stack([e[0] for e in entries])
    all_gt = np.stack([e[2] for e in entries])
    all_vis = np.stack([e[3] for e in entries])
    diags = np.asarray([math.hypot(e[4][2], e[4][3]) for e in entries])
    out = {"pck": pck(all_pred, all_gt, all_vis, diags, protocol.pck_fraction)}
    pred_lists = [[(e[0], float(np.mean(e[1])))] for e in entries]
    gt_lists = [[(e[2], e[3], float(e[4][2] * e[4][3]))] for e in entries]
    out.update(keypoint_ap_ar(pred_lists, gt_lists, protocol))
    return MetricReport("pose", out, len(entries))


def _dense_report(task: str, preds: list, records: list, base_dir,
                  protocol: EvalProtocol) -> MetricReport:
    """preds: per record, [H,W] class ids (seg), [H,W] depth, or [H,W,3]."""
    if task == "seg":
        gts = [fileio.read_mask(f"{base_dir}/{rec.mask}") for rec in records]
        return MetricReport("seg", seg_metrics(preds, gts), len(records))
    if task == "depth":
        gts = [fileio.read_pfm(f"{base_dir}/{rec.depth}") for rec in records]
        masks = [g > 0 for g in gts]
        return MetricReport("depth", depth_metrics(preds, gts, masks, protocol),
                            len(records))
    if task == "normal":
        gts = [fileio.read_pfm(f"{base_dir}/{rec.normal}") for rec in records]
        masks = [np.linalg.norm(g, axis=-1) > 0.5 for g in gts]
        return MetricReport("normal", normal_metrics(preds, gts, masks,
                                                     protocol), len(records))
    raise BadSizeError(f"unknown task {task!r}")


def evaluate_model(model: heads.TaskModel, records: list, base_dir,
                   protocol: EvalProtocol = EvalProtocol()) -> MetricReport:
    """Run one task model over manifest records and compute its metrics."""
    task = model.task
    if task == "pose":
        entries = []
        for rec in records:
            image = fileio.read_image(f"{base_dir}/{rec.image}")
            gt_xy, vis = fileio.read_keypoints(f"{base_dir}/{rec.keypoints}")
            box = np.asarray(rec.persons[0]["box"], dtype=np.float64)
            (coords, scores), = topdown_infer(image, box[None], model, protocol)
            entries.append((coords, scores, gt_xy, vis, box))
        return _pose_report(entries, protocol)

    images = np.stack([fileio.read_image(f"{base_dir}/{rec.image}")
                       for rec in records]).astype(np.float32)
    raw = _predict_batched(model, images)
    if task == "seg":
        preds = [p.argmax(axis=0) for p in raw]
    elif task == "depth":
        preds = [p[0] for p in raw]
    else:
        preds = [np.moveaxis(p, 0, -1) for p in raw]
    return _dense_report(task, preds, records, base_dir, protocol)


def evaluate_predictions(task: str, records: list, base_dir, pred_dir,
                         protocol: EvalProtocol = EvalProtocol()) -> MetricReport:
    """Score already-written prediction files (the `infer` output layout:
    <id>_kp.txt, <id>_mask.png, <id>_depth.pfm, <id>_normal.pfm)."""
    if task == "pose":
        entries = []
        for rec in records:
            coords, scores = fileio.read_scored_keypoints(
                f"{pred_dir}/{rec.id}_kp.txt")
            gt_xy, vis = fileio.read_keypoints(f"{base_dir}/{rec.keypoints}")
            box = np.asarray(rec.persons[0]["box"], dtype=np.float64)
            entries.append((coords, scores, gt_xy, vis, box))
        return _pose_report(entries, protocol)
    if task == "seg":
        preds = [fileio.read_mask(f"{pred_dir}/{rec.id}_mask.png")
                 for rec in records]
    elif task == "depth":
        preds = [fileio.read_pfm(f"{pred_dir}/{rec.id}_depth.pfm")
                 for rec in records]
    elif task == "normal":
        preds = [fileio.read_pfm(f"{pred_dir}/{rec.id}_normal.pfm")
                 for rec in records]
    else:
        raise BadSizeError(f"unknown task {task!r}")
    return _dense_report(task, preds, records, base_dir, protocol)


def write_predictions(model: heads.TaskModel, records: list, base_dir,
                      out_dir, protocol: EvalProtocol = EvalProtocol()) -> None:
    """Run inference and store predictions in the evaluate_predictions
    layout."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model.task == "pose":
        for rec in records:
            image = fileio.read_image(f"{base_dir}/{rec.image}")
            box = np.asarray(rec.persons[0]["box"], dtype=np.float64)
            (coords, scores), = topdown_infer(image, box[None], model, protocol)
            fileio.write_scored_keypoints(out / f"{rec.id}_kp.txt",
                                          coords, scores)
        return
    images = np.stack([fileio.read_image(f"{base_dir}/{rec.image}")
                       for rec in records]).astype(np.float32)
    raw = _predict_batched(model, images)
    for rec, p in zip(records, raw):
        if model.task == "seg":
            fileio.write_mask(out / f"{rec.id}_mask.png", p.argmax(axis=0))
        elif model.task == "depth":
            fileio.write_pfm(out / f"{rec.id}_depth.pfm", p[0])
        else:
            fileio.write_pfm(out / f"{rec.id}_normal.pfm", np.moveaxis(p, 0, -1))
