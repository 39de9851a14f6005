"""Losses, the prompt-training loop, and trainable-state checkpoints.

Supervision is multi-label and per action: every candidate pair owns a
binary target per action, scored through the softmax over the working class
set. A focal term handles the heavy negative skew; a class-relation term
keeps the learned class rows arranged like the frozen class-text rows so
unseen classes inherit a sensible neighborhood. Unseen classes take part in
every softmax but their ground truth never reaches a target (stripped at
load time and asserted again per batch), so any score they attract is pushed
down.

The frozen encoder pair must not move: its checksum is taken before the
first step and verified after the last. Checkpoints carry only trainable
parameters plus enough identity (structural config hash, frozen-encoder
digest) to refuse resuming against a different model or world.
"""
from __future__ import annotations

import copy
import logging

import numpy as np

from . import encoders
from .config import derive_rng
from .engine import Tensor, clamp, log, matmul, power, reduce_mean, reduce_sum, softmax, transpose
from .evaluate import evaluate_predictions, summarize

LOG = logging.getLogger(__name__)

SCORE_EPS = 1e-7
DIAG_MASK = -1e9
CKPT_FORMAT = 1


class TrainingError(RuntimeError):
    """Unusable training input or a checkpoint that does not match."""


# ------------------------------------------------------------------- losses
def focal_loss(scores, targets, gamma, alpha_f):
    """Binary focal loss, mean over all score entries.

    scores: probabilities in (0, 1); anything outside is clamped to
    [1e-7, 1 - 1e-7] and logged. targets: same-shape 0/1 array.
    """
    t = Tensor(np.asarray(targets, dtype=scores.dtype))
    raw = scores.data
    if raw.size and (raw.min() <= 0.0 or raw.max() >= 1.0):
        LOG.warning("focal loss: %d scores outside (0,1), clamping",
                    int(np.sum((raw <= 0.0) | (raw >= 1.0))))
    s = clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS)
    pos = t * power(1.0 - s, gamma) * log(s) * (-alpha_f)
    neg = (1.0 - t) * power(s, gamma) * log(1.0 - s) * (alpha_f - 1.0)
    return reduce_mean(pos + neg)


def _masked_row_softmax(sim):
    """Row softmax with the diagonal excluded from the distribution."""
    n = sim.shape[0]
    mask = Tensor(np.eye(n, dtype=sim.dtype) * DIAG_MASK)
    return softmax(sim + mask, axis=-1)


def relation_loss(w_rows, class_text):
    """Match the learned class-row geometry to the frozen class-text geometry.

    Both inputs are [C, d] with rows aligned by class. Each side becomes a
    row-stochastic similarity matrix (dot products, diagonal masked out,
    softmax per row); the loss is the mean over rows of the KL divergence
    from the frozen target to the learned prediction. One class alone has no
    off-diagonal structure, so the loss is exactly zero.
    """
    n = w_rows.shape[0]
    if n < 2:
        return Tensor(np.zeros((), dtype=w_rows.dtype))
    f = np.asarray(class_text, dtype=w_rows.dtype)
    target = _masked_row_softmax(Tensor(f @ f.T)).data
    pred = _masked_row_softmax(matmul(w_rows, transpose(w_rows, (1, 0))))
    pred = clamp(pred, SCORE_EPS, 1.0)
    kl = Tensor(target) * (Tensor(np.log(np.maximum(target, SCORE_EPS))) - log(pred))
    return reduce_mean(reduce_sum(kl, axis=-1))


def total_loss(l_focal, l_relation, alpha):
    """Composite objective: focal term plus weighted relation term."""
    return l_focal + l_relation * float(alpha)


# ------------------------------------------------------------- the loop
def _assert_no_unseen_positives(scenes, seen_set):
    for s in scenes:
        for g in s["interactions"]:
            if g["hoi"] not in seen_set:
                raise AssertionError(
                    f"scene {s['scene_id']}: unseen class {g['hoi']} appears as a "
                    f"training positive; the split loader must strip these")


def _seen_val_map(model, scenes):
    preds = model.predict_scenes(scenes)
    res = evaluate_predictions(preds, scenes, model.world.classes)
    return summarize(res["ap"], res["n_gt"], model.world.seen_ids,
                     model.world.unseen_ids)["seen_mAP"]


def _snapshot(params):
    return {name: p.data.copy() for name, p in params.items()}


def _restore(params, snap):
    for name, p in params.items():
        p.data = snap[name].copy()


def train_model(model, scenes, cfg, on_epoch=None):
    """Optimize the trainable stack; returns the per-epoch metrics list.

    scenes: training scenes (unseen ground truth already stripped). A
    fraction is held out for early stopping on seen-class validation mAP;
    the best-scoring state is restored before returning. on_epoch, when
    given, is called as on_epoch(model, epoch, metrics_dict) after every
    epoch, before the stopping check.
    """
    if not scenes:
        raise TrainingError("training split is empty")
    seen_set = set(model.world.seen_ids)

    rng = derive_rng(cfg.seed, "train.valsplit")
    order = rng.permutation(len(scenes))
    n_val = max(1, int(round(cfg.val_fraction * len(scenes))))
    if n_val >= len(scenes):
        raise TrainingError(f"validation holdout swallows all {len(scenes)} scenes")
    val_scenes = [scenes[i] for i in order[:n_val]]
    fit_scenes = [scenes[i] for i in order[n_val:]]

    params = model.named_params()
    opt = encoders.engine.AdamW([p for _, p in sorted(params.items())],
                                lr=cfg.lr, weight_decay=cfg.weight_decay)
    frozen_before = model.frozen_checksum()
    rel_target = model.world.class_text[model.selected]

    history = []
    best = {"map": -np.inf, "state": _snapshot(params), "epoch": -1}
    stale = 0
    for epoch in range(cfg.epochs):
        erng = derive_rng(cfg.seed, f"train.epoch.{epoch}")
        idx = erng.permutation(len(fit_scenes))
        focal_sum = rel_sum = loss_sum = 0.0
        n_batches = 0
        for start in range(0, len(idx), cfg.batch_size):
            batch = [fit_scenes[i] for i in idx[start:start + cfg.batch_size]]
            _assert_no_unseen_positives(batch, seen_set)
            scores, targets, sel_rows = model.forward_train(batch)
            l_rel = relation_loss(sel_rows, rel_target)
            if scores is None:
                l_foc = Tensor(np.zeros((), dtype=sel_rows.dtype))
            else:
                l_foc = focal_loss(scores, targets, cfg.focal_gamma, cfg.focal_alpha)
            loss = total_loss(l_foc, l_rel, cfg.relation_weight)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, "
                                    f"batch starting at {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            focal_sum += l_foc.item()
            rel_sum += l_rel.item()
            loss_sum += loss.item()
            n_batches += 1
        val_map = _seen_val_map(model, val_scenes)
        metrics = {"epoch": epoch,
                   "loss": loss_sum / n_batches,
                   "focal": focal_sum / n_batches,
                   "relation": rel_sum / n_batches,
                   "val_seen_mAP": val_map}
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(model, epoch, metrics)
        if np.isnan(val_map) or val_map > best["map"] + cfg.early_stop_delta:
            if not np.isnan(val_map):
                best = {"map": val_map, "state": _snapshot(params), "epoch": epoch}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    if best["epoch"] >= 0:
        _restore(params, best["state"])
    if model.frozen_checksum() != frozen_before:
        raise TrainingError("frozen encoder parameters moved during training")
    return history


# ------------------------------------------------------------- checkpoints
def _hash_halves(hex16):
    return int(hex16[:8], 16), int(hex16[8:16], 16)


def save_checkpoint(path, model, cfg, epoch):
    """Trainable parameters plus identity header, binary little-endian."""
    cfg_a, cfg_b = _hash_halves(cfg.structural_hash())
    enc_a, enc_b = _hash_halves(model.frozen_digest)
    header = {"format": CKPT_FORMAT, "epoch": int(epoch), "seed": int(cfg.seed),
              "cfg_a": cfg_a, "cfg_b": cfg_b, "enc_a": enc_a, "enc_b": enc_b}
    encoders.save_params(path, sorted(model.named_params().items()), header)


def load_checkpoint(path, model, cfg):
    """Load trainable parameters; refuse any identity mismatch. Returns header."""
    header, state = encoders.load_params(path)
    if header.get("format") != CKPT_FORMAT:
        raise TrainingError(f"{path}: unknown checkpoint format {header.get('format')}")
    cfg_a, cfg_b = _hash_halves(cfg.structural_hash())
    if (header["cfg_a"], header["cfg_b"]) != (cfg_a, cfg_b):
        raise TrainingError(
            f"{path}: checkpoint was trained under structural config "
            f"{header['cfg_a']:08x}{header['cfg_b']:08x}, this run has "
            f"{cfg_a:08x}{cfg_b:08x}")
    enc_a, enc_b = _hash_halves(model.frozen_digest)
    if (header["enc_a"], header["enc_b"]) != (enc_a, enc_b):
        raise TrainingError(
            f"{path}: checkpoint belongs to frozen encoder "
            f"{header['enc_a']:08x}{header['enc_b']:08x}, loaded encoder is "
            f"{enc_a:08x}{enc_b:08x}")
    encoders.apply_state(sorted(model.named_params().items()), state, cfg.dtype)
    return header


# ---------------------------------------------------------------- auditing
def gradient_flow_audit(model, scenes, cfg, n_steps=3):
    """Which parameters ever receive gradient over a few real steps.

    Runs n_steps optimizer steps on the given scenes and accumulates, per
    trainable parameter, whether any entry ever saw a nonzero gradient.
    Returns {"trainable": {name: bool}, "frozen": {name: bool}}; with the
    freezing contract intact every frozen flag is False. Steps matter:
    zero-initialized up-projections block their down-projection's gradient
    until the first update moves them.
    """
    params = model.named_params()
    opt = encoders.engine.AdamW([p for _, p in sorted(params.items())],
                                lr=cfg.lr, weight_decay=0.0)
    touched = {name: False for name in params}
    rel_target = model.world.class_text[model.selected]
    for _ in range(n_steps):
        scores, targets, sel_rows = model.forward_train(scenes)
        l_rel = relation_loss(sel_rows, rel_target)
        if scores is None:
            loss = l_rel * float(cfg.relation_weight)
        else:
            loss = total_loss(focal_loss(scores, targets, cfg.focal_gamma,
                                         cfg.focal_alpha),
                              l_rel, cfg.relation_weight)
        opt.zero_grad()
        loss.backward()
        for name, p in params.items():
            if p.grad is not None and np.any(p.grad != 0.0):
                touched[name] = True
        opt.step()
    frozen = {name: p.grad is not None and bool(np.any(p.grad != 0.0))
              for name, p in model.frozen_params()}
    return {"trainable": touched, "frozen": frozen}
