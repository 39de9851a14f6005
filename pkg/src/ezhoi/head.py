"""Interaction scoring over detected human-object pairs.

Fixed-geometry region pooling turns the aligned patch grid of a scene into
one embedding per box; kept human detections are paired with every kept
non-human detection. A pair embedding is either a small MLP over the two
pooled boxes or a plain union-box pool, optionally mixed across the scene's
pairs by a zero-initialized self-attention residual. Pair embeddings score
against the per-class text features by scaled cosine; a softmax over the
selected classes is collapsed to one probability per action for training,
while inference takes the max class logit per action and gates it by the
detector confidence product raised to a sharpening exponent.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .engine import (Tensor, cat, gelu, l2_normalize, matmul,
                     softmax, transpose)
from .evaluate import box_iou
from .prompts import GuidanceAdapter

HUMAN_CATEGORY = 0
N_POOL_SAMPLES = 3


def region_pool_weights(boxes, d_p, n_samples=N_POOL_SAMPLES):
    """[q, 4] boxes in patch coordinates -> [q, d_p*d_p] pooling weights.

    Each box is sampled at an n_samples x n_samples grid of bin centers; each
    sample reads the patch grid bilinearly, treating patch (r, c) as a point
    sample at (c + 0.5, r + 0.5) with sample positions clamped to the grid.
    Rows always sum to one, so pooling is a convex combination of patches.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    q = boxes.shape[0]
    if q and (np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1])):
        raise ValueError("zero-area box cannot be pooled")
    out = np.zeros((q, d_p * d_p))
    for qi in range(q):
        x1, y1, x2, y2 = boxes[qi]
        bw = (x2 - x1) / n_samples
        bh = (y2 - y1) / n_samples
        for i in range(n_samples):
            for j in range(n_samples):
                u = np.clip(x1 + (j + 0.5) * bw - 0.5, 0.0, d_p - 1.0)
                v = np.clip(y1 + (i + 0.5) * bh - 0.5, 0.0, d_p - 1.0)
                c0 = min(int(np.floor(u)), d_p - 2) if d_p > 1 else 0
                r0 = min(int(np.floor(v)), d_p - 2) if d_p > 1 else 0
                fu, fv = u - c0, v - r0
                for dr, dc, wt in ((0, 0, (1 - fu) * (1 - fv)),
                                   (0, 1, fu * (1 - fv)),
                                   (1, 0, (1 - fu) * fv),
                                   (1, 1, fu * fv)):
                    out[qi, (r0 + dr) * d_p + (c0 + dc)] += wt
    return out / (n_samples * n_samples)


@dataclasses.dataclass
class PairSet:
    """Candidate human-object pairs of one scene, in detection order."""
    h_idx: np.ndarray     # [q] index into the kept detection list
    o_idx: np.ndarray     # [q]
    h_box: np.ndarray     # [q, 4]
    o_box: np.ndarray     # [q, 4]
    union_box: np.ndarray # [q, 4]
    prior: np.ndarray     # [q] product of the two detector confidences
    o_cat: np.ndarray     # [q] object detection category

    def __len__(self):
        return len(self.h_idx)


def candidate_pairs(detections, score_threshold):
    """Filter detections by strict score > threshold, pair humans with objects."""
    kept = [d for d in detections if d["score"] > score_threshold]
    humans = [i for i, d in enumerate(kept) if d["category"] == HUMAN_CATEGORY]
    objects = [i for i, d in enumerate(kept) if d["category"] != HUMAN_CATEGORY]
    h_idx, o_idx = [], []
    for h in humans:
        for o in objects:
            h_idx.append(h)
            o_idx.append(o)
    if not h_idx:
        z = np.zeros(0, dtype=int)
        return PairSet(z, z, np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 4)),
                       np.zeros(0), z.copy())
    h_idx = np.asarray(h_idx)
    o_idx = np.asarray(o_idx)
    boxes = np.asarray([d["box"] for d in kept], dtype=np.float64)
    scores = np.asarray([d["score"] for d in kept], dtype=np.float64)
    cats = np.asarray([d["category"] for d in kept], dtype=int)
    hb, ob = boxes[h_idx], boxes[o_idx]
    union = np.concatenate([np.minimum(hb[:, :2], ob[:, :2]),
                            np.maximum(hb[:, 2:], ob[:, 2:])], axis=1)
    return PairSet(h_idx, o_idx, hb, ob, union, scores[h_idx] * scores[o_idx],
                   cats[o_idx])


class PairHead:
    """Trainable pair embedding + scaled-cosine class scorer."""

    def __init__(self, cfg, rng):
        d = cfg.d_a
        self.d_p = cfg.d_p
        self.dtype = cfg.dtype
        self.logit_scale = float(cfg.logit_scale)
        self.use_intra = cfg.intra_fusion
        self.use_inter = cfg.inter_fusion

        def t(a):
            return Tensor(np.asarray(a, dtype=cfg.dtype), requires_grad=True)

        if self.use_intra:
            self.w1 = t(rng.normal(0.0, 0.02, size=(2 * d, 2 * d)))
            self.b1 = t(np.zeros(2 * d))
            self.w2 = t(rng.normal(0.0, 0.02, size=(2 * d, d)))
            self.b2 = t(np.zeros(d))
        self.inter = (GuidanceAdapter(d, max(1, d // 4), rng, cfg.dtype)
                      if self.use_inter else None)

    def pair_embeddings(self, grid, pairs):
        """grid: [d_p*d_p, d_a] aligned patch features of one scene."""
        if self.use_intra:
            wh = Tensor(region_pool_weights(pairs.h_box, self.d_p).astype(grid.dtype))
            wo = Tensor(region_pool_weights(pairs.o_box, self.d_p).astype(grid.dtype))
            e = cat([matmul(wh, grid), matmul(wo, grid)], axis=1)
            x = matmul(gelu(matmul(e, self.w1) + self.b1), self.w2) + self.b2
        else:
            wu = Tensor(region_pool_weights(pairs.union_box, self.d_p).astype(grid.dtype))
            x = matmul(wu, grid)
        if self.inter is not None and len(pairs) > 0:
            x = self.inter(x, x)
        return x

    def class_logits(self, emb, class_text):
        """[q, d_a] x [C_sel, d_a] -> [q, C_sel] scaled cosine logits."""
        return matmul(l2_normalize(emb), transpose(class_text, (1, 0))) * self.logit_scale

    def named_params(self):
        out = {}
        if self.use_intra:
            out.update({f"head.intra.{n}": getattr(self, n)
                        for n in ("w1", "b1", "w2", "b2")})
        if self.inter is not None:
            out.update(self.inter.named_params("head.inter"))
        return out


def select_classes_per_action(class_text, class_verbs, n_verbs, per_verb=2):
    """Pick the per_verb most mutually dissimilar classes of each action.

    Dissimilarity is the dot product of the frozen per-class text rows; the
    chosen pair minimizes it, ties resolving to the lexicographically
    smallest id pair. Actions with a single class contribute it once.
    Returns (selected class ids, alignment matrix [C_sel, n_verbs]).
    """
    f = np.asarray(class_text)
    class_verbs = np.asarray(class_verbs)
    selected = []
    for v in range(n_verbs):
        members = sorted(int(c) for c in np.nonzero(class_verbs == v)[0])
        if not members:
            raise ValueError(f"action {v} has no classes in the class table")
        if len(members) == 1:
            selected.extend(members)
            continue
        best, best_dot = None, np.inf
        for a_i, i in enumerate(members):
            for j in members[a_i + 1:]:
                d = float(np.dot(f[i], f[j]))
                if d < best_dot or (d == best_dot and (i, j) < best):
                    best, best_dot = (i, j), d
        selected.extend(best)
    align = np.zeros((len(selected), n_verbs))
    for row, c in enumerate(selected):
        align[row, class_verbs[c]] = 1.0
    return selected, align


def action_probabilities(logits, align):
    """Softmax over selected classes, summed into one probability per action."""
    return matmul(softmax(logits, axis=-1), Tensor(np.asarray(align, dtype=logits.dtype)))


def training_scores(prior, action_probs, tau=1.0):
    """Detector-confidence gate times the action probability, [q, V].

    The probability is already in (0,1) through the class softmax, so no
    squashing is applied here; the logistic squash belongs to the inference
    rule, where the verb score is a raw max logit instead.
    """
    tile = np.broadcast_to((np.asarray(prior) ** tau)[:, None],
                           action_probs.shape).astype(action_probs.dtype).copy()
    return Tensor(tile) * action_probs


def inference_action_logits(logits, align):
    """Per action, the max logit over its selected classes. Plain arrays."""
    logits = np.asarray(logits)
    align = np.asarray(align)
    q, n_verbs = logits.shape[0], align.shape[1]
    out = np.full((q, n_verbs), -np.inf)
    for v in range(n_verbs):
        cols = np.nonzero(align[:, v])[0]
        if cols.size:
            out[:, v] = logits[:, cols].max(axis=1)
    return out


def inference_scores(prior, action_logits, tau):
    """(s_h * s_o)^tau * sigmoid(max class logit), [q, V]. Plain arrays."""
    gate = np.asarray(prior)[:, None] ** tau
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-np.asarray(action_logits)))
    return gate * sig


def build_action_targets(pairs, interactions, n_verbs, iou_thresh=0.5):
    """[q, n_verbs] multi-hot targets from ground-truth interactions.

    A pair is positive for an action when some ground-truth record of that
    action has matching object category and both boxes overlap the pair's
    boxes with IoU strictly above the threshold.
    """
    targets = np.zeros((len(pairs), n_verbs))
    for g in interactions:
        g_cat = g["object"] + 1
        for qi in range(len(pairs)):
            if pairs.o_cat[qi] != g_cat:
                continue
            m = min(box_iou(pairs.h_box[qi], g["human_box"]),
                    box_iou(pairs.o_box[qi], g["object_box"]))
            if m > iou_thresh:
                targets[qi, g["verb"]] = 1.0
    return targets


def scene_predictions(pairs, action_logits, classes, tau, scene_id):
    """Flat per-class predictions for one scene.

    classes: list of (verb, object) per class id. A pair can only predict
    classes whose object matches its detected object category. Returns
    records (class_id, scene_id, pair_index, h_box, o_box, score).
    """
    by_object = {}
    for cid, (v, o) in enumerate(classes):
        by_object.setdefault(o + 1, []).append((cid, v))
    scores = inference_scores(pairs.prior, action_logits, tau)
    preds = []
    for qi in range(len(pairs)):
        for cid, v in by_object.get(int(pairs.o_cat[qi]), ()):
            preds.append({"class_id": cid, "scene_id": scene_id, "pair_index": qi,
                          "human_box": pairs.h_box[qi].tolist(),
                          "object_box": pairs.o_box[qi].tolist(),
                          "score": float(scores[qi, v])})
    return preds
