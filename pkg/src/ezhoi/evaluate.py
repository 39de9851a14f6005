"""Detection-style evaluation: greedy matching and all-point average precision.

A prediction is a (human box, object box, score) triple for one interaction
class in one scene. Per class, predictions are ranked by score (ties broken
by scene id then pair index so reruns match byte for byte) and greedily
claim the unmatched ground-truth instance with the largest min-side overlap;
a claim counts when min(IoU of human boxes, IoU of object boxes) is strictly
above the threshold. Average precision integrates the precision envelope
over all recall steps. Classes with no ground truth in the evaluated scenes
are excluded from every mean.
"""
from __future__ import annotations

from collections import defaultdict

import numpy as np


def box_iou(a, b):
    """Intersection over union of two [x1, y1, x2, y2] boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union)


def rank_predictions(preds):
    """Deterministic ranking: score desc, then scene id, then pair index."""
    return sorted(preds, key=lambda p: (-p["score"], p["scene_id"], p["pair_index"]))


def match_predictions(preds, gt_by_scene, iou_thresh=0.5):
    """Greedy matching per class; returns 0/1 hit flags in ranked order.

    gt_by_scene: {scene_id: [(human_box, object_box), ...]}. Each ground
    truth can be claimed once, by the highest-ranked prediction whose
    min-side IoU with it is strictly above iou_thresh; among candidates the
    largest min-side IoU wins, ties going to the lowest ground-truth index.
    """
    used = {sid: np.zeros(len(rows), dtype=bool) for sid, rows in gt_by_scene.items()}
    flags = []
    for p in rank_predictions(preds):
        rows = gt_by_scene.get(p["scene_id"], ())
        best, best_m = -1, iou_thresh
        for gi, (gh, go) in enumerate(rows):
            if used[p["scene_id"]][gi]:
                continue
            m = min(box_iou(p["human_box"], gh), box_iou(p["object_box"], go))
            if m > best_m:
                best, best_m = gi, m
        if best >= 0:
            used[p["scene_id"]][best] = True
            flags.append(1)
        else:
            flags.append(0)
    return np.asarray(flags, dtype=int)


def average_precision(flags, n_gt):
    """All-point interpolated AP from ranked hit flags and ground-truth count."""
    if n_gt <= 0:
        raise ValueError("average precision is undefined without ground truth")
    flags = np.asarray(flags)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(1 - flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap, prev = 0.0, 0.0
    for r, env, hit in zip(recall, envelope, flags):
        if hit:
            ap += (r - prev) * env
            prev = r
    return float(ap)


def evaluate_predictions(predictions, scenes, classes, iou_thresh=0.5):
    """Per-class AP over a scene set.

    predictions: records with class_id/scene_id/pair_index/boxes/score.
    scenes: records with scene_id and ground-truth interaction list.
    classes: (verb, object) per class id. Returns {"ap": [C] with NaN where
    a class has no ground truth, "n_gt": [C]}.
    """
    class_index = {tuple(vo): i for i, vo in enumerate(classes)}
    gt = [defaultdict(list) for _ in classes]
    n_gt = np.zeros(len(classes), dtype=int)
    for s in scenes:
        sid = s["scene_id"]
        for g in s["interactions"]:
            c = class_index[(g["verb"], g["object"])]
            gt[c][sid].append((g["human_box"], g["object_box"]))
            n_gt[c] += 1
    by_class = defaultdict(list)
    for p in predictions:
        by_class[p["class_id"]].append(p)
    ap = np.full(len(classes), np.nan)
    for c in range(len(classes)):
        if n_gt[c] == 0:
            continue
        ap[c] = average_precision(match_predictions(by_class.get(c, []), gt[c],
                                                    iou_thresh), n_gt[c])
    return {"ap": ap, "n_gt": n_gt}


def summarize(ap, n_gt, seen_ids, unseen_ids):
    """Mean AP overall and per split half, skipping classes without ground truth."""
    ap = np.asarray(ap)
    n_gt = np.asarray(n_gt)

    def mean_over(ids):
        vals = [ap[c] for c in ids if n_gt[c] > 0]
        return float(np.mean(vals)) if vals else float("nan")

    return {"mAP": mean_over(range(len(ap))),
            "seen_mAP": mean_over(seen_ids),
            "unseen_mAP": mean_over(unseen_ids)}
