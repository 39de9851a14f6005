"""Synthetic interaction world: generation, zero-shot splits, fixtures, loading.

Scenes are small single-channel images built from seeded glyph textures: a
human glyph, one object glyph per category, and a small per-action marker
stamped between the two boxes of each interaction, so action identity is
visually recoverable. Training class frequencies follow a Zipf law so a rare
tail exists; test scenes cover every class at least once.

The language-side oracle is embedding-level: each class gets one unit row
built from fixed random maps of its verb and object latents, and each unseen
class gets a few unit disparity rows pointing from its most related seen
class toward it. The detector oracle jitters ground-truth boxes with bounded
Gaussian noise and injects false positives at a rate proportional to the
noise level.

Every written file ends in (or embeds) a sha256 content checksum and loaders
verify it. Unseen-class annotations are stripped from training scenes at
load time; the files on disk always keep the full ground truth.
"""
from __future__ import annotations

import base64
import dataclasses
import json
import math
import os
from collections import Counter

import numpy as np

from . import encoders
from .config import MODES, derive_rng, derive_seed
from .evaluate import box_iou
from .prompts import select_related_seen

PAD, SOT, EOT = 0, 1, 2
BOX_PATCHES = 2.0          # every ground-truth box spans 2x2 patches
MARKER_PX = 4
FP_PER_NOISE = 2.0         # expected false positives per scene at noise 1.0
JITTER_SIGMA = 0.4         # per-coordinate Gaussian sd, in patches, times noise
JITTER_CLIP = 0.8          # hard bound, times noise; keeps IoU over 0.6 mean
MIN_RETRIEVAL_ACC = 0.35   # pretraining quality gate; chance ~0.03, typical run 0.6

WORLD_META = "world.meta"
SCENES_FILE = "scenes.jsonl"
ENCODER_FILE = "encoder.ckpt"


class DataError(Exception):
    """Bad or corrupt dataset files."""


class GenerationError(DataError):
    """Generator self-check failure or infeasible configuration."""


def split_file(mode):
    return f"split.{mode}.json"


def guidance_file(mode):
    return f"guidance.{mode}.jsonl"


def vocab_size(n_verbs, n_objects):
    return 3 + n_verbs + n_objects


def caption_tokens(verb, obj, n_verbs):
    return [SOT, 3 + verb, 3 + n_verbs + obj, EOT]


# --------------------------------------------------------------- world pieces

def build_class_table(cfg, rng):
    """n_hoi unique (verb, object) pairs covering every verb and object."""
    combos = [(v, o) for v in range(cfg.n_verbs) for o in range(cfg.n_objects)]
    if cfg.n_hoi > len(combos):
        raise GenerationError(f"cannot draw {cfg.n_hoi} classes from "
                              f"{len(combos)} verb-object combinations")
    order = [combos[i] for i in rng.permutation(len(combos))]
    chosen, verbs_left = [], set(range(cfg.n_verbs))
    objects_left = set(range(cfg.n_objects))
    for v, o in order:
        if v in verbs_left:
            chosen.append((v, o))
            verbs_left.discard(v)
            objects_left.discard(o)
    for v, o in order:
        if o in objects_left and (v, o) not in chosen:
            chosen.append((v, o))
            objects_left.discard(o)
    for v, o in order:
        if len(chosen) == cfg.n_hoi:
            break
        if (v, o) not in chosen:
            chosen.append((v, o))
    if len(chosen) < cfg.n_hoi or verbs_left or objects_left:
        raise GenerationError("class table cannot cover every verb and object; "
                              f"uncovered verbs {sorted(verbs_left)}, "
                              f"objects {sorted(objects_left)}")
    return sorted(chosen[:cfg.n_hoi])


def zipf_class_probs(n_classes, s, rng):
    """Zipf(s) over a randomly permuted rank order, so ids are not rank-sorted."""
    ranks = np.empty(n_classes, dtype=int)
    ranks[rng.permutation(n_classes)] = np.arange(n_classes)
    p = (ranks + 1.0) ** (-s)
    return p / p.sum()


def _banded_texture(rng, size, center, width=0.03):
    lo = max(0.12, center - width)
    hi = min(1.0, center + width)
    return rng.uniform(lo, hi, size=size)


def make_textures(seed, n_objects, patch_px):
    """Category identity is a narrow gray-level band; bands do not overlap.

    The human glyph is a full-contrast checkerboard, a pattern no category
    band can produce, so person vs object is trivially separable.
    """
    px = int(BOX_PATCHES * patch_px)
    human = np.indices((px, px)).sum(axis=0) % 2 * 0.9 + 0.1
    objects = []
    for o in range(n_objects):
        center = 0.25 + 0.75 * (o / max(1, n_objects - 1))
        objects.append(_banded_texture(derive_rng(seed, f"texture.object.{o}"),
                                       (px, px), center))
    return human, objects


def make_markers(seed, n_verbs):
    """Verb glyphs: small stamps trailed between the pair, gray-level coded."""
    out = []
    for v in range(n_verbs):
        center = 0.25 + 0.75 * (v / max(1, n_verbs - 1))
        out.append(_banded_texture(derive_rng(seed, f"texture.verb.{v}"),
                                   (MARKER_PX, MARKER_PX), center))
    return out


def make_verb_tiles(seed, n_verbs, patch_px):
    """One patch-sized stamp per verb, written inside both interaction boxes.

    Gray level codes the verb like the trail markers; zeroed alternating
    columns keep the stamp apart from the uniform category bands. In-box
    placement matters: pair features pool the two boxes, not the region
    between them, so the verb has to be readable from the boxes themselves.
    """
    out = []
    for v in range(n_verbs):
        center = 0.25 + 0.75 * (v / max(1, n_verbs - 1))
        tile = _banded_texture(derive_rng(seed, f"texture.verbtile.{v}"),
                               (patch_px, patch_px), center)
        tile[:, 1::2] = 0.0
        out.append(tile)
    return out


def _place_pair(rng, d_p):
    """Two patch-aligned 2x2-patch boxes, center distance in a visible band."""
    lo, hi = 1.5, 4.5
    span = int(d_p - BOX_PATCHES)
    for _ in range(64):
        hx, hy, ox, oy = (float(z) for z in rng.integers(0, span + 1, size=4))
        dist = math.hypot(hx - ox, hy - oy)
        if lo <= dist <= hi:
            break
    h = [hx, hy, hx + BOX_PATCHES, hy + BOX_PATCHES]
    o = [ox, oy, ox + BOX_PATCHES, oy + BOX_PATCHES]
    return h, o


def _stamp(img, tex, x_px, y_px):
    h, w = tex.shape
    x_px = int(np.clip(x_px, 0, img.shape[1] - w))
    y_px = int(np.clip(y_px, 0, img.shape[0] - h))
    region = img[y_px:y_px + h, x_px:x_px + w]
    np.maximum(region, tex, out=region)


def render_scene(rng, interactions, classes, textures, markers, tiles, cfg):
    px = cfg.image_px
    img = np.zeros((px, px))  # black ground so glyphs carry all the variance
    human_tex, object_texes = textures
    for g in interactions:
        v, o = classes[g["hoi"]]
        hb, ob = g["human_box"], g["object_box"]
        _stamp(img, human_tex, hb[0] * cfg.patch_px, hb[1] * cfg.patch_px)
        _stamp(img, object_texes[o], ob[0] * cfg.patch_px, ob[1] * cfg.patch_px)
        hcx = (hb[0] + hb[2]) / 2.0 * cfg.patch_px
        hcy = (hb[1] + hb[3]) / 2.0 * cfg.patch_px
        ocx = (ob[0] + ob[2]) / 2.0 * cfg.patch_px
        ocy = (ob[1] + ob[3]) / 2.0 * cfg.patch_px
        for t in (0.25, 0.5, 0.75):  # motion trail from human toward object
            mx = hcx + t * (ocx - hcx) - MARKER_PX / 2
            my = hcy + t * (ocy - hcy) - MARKER_PX / 2
            _stamp(img, markers[v], mx, my)
        for bx in (hb, ob):  # verb stamp owns each box's top-left patch
            x0, y0 = int(bx[0] * cfg.patch_px), int(bx[1] * cfg.patch_px)
            img[y0:y0 + cfg.patch_px, x0:x0 + cfg.patch_px] = tiles[v]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def jitter_box(box, noise, rng, d_p):
    if noise == 0:
        return [float(c) for c in box]
    d = rng.normal(0.0, JITTER_SIGMA * noise, size=4)
    d = np.clip(d, -JITTER_CLIP * noise, JITTER_CLIP * noise)
    out = np.asarray(box, dtype=np.float64) + d
    out[[0, 1]] = np.clip(out[[0, 1]], 0.0, d_p - 0.25)
    out[[2, 3]] = np.clip(out[[2, 3]], 0.25, d_p)
    return out.tolist()


def oracle_detections(interactions, classes, noise, rng, cfg):
    """Jittered ground-truth boxes plus noise-proportional false positives."""
    dets = []
    for g in interactions:
        _, o = classes[g["hoi"]]
        for box, cat in ((g["human_box"], 0), (g["object_box"], o + 1)):
            dets.append({"box": jitter_box(box, noise, rng, cfg.d_p),
                         "category": cat,
                         "score": float(1.0 - noise * rng.random())})
    for _ in range(rng.poisson(FP_PER_NOISE * noise)):
        span = cfg.d_p - BOX_PATCHES
        x, y = rng.integers(0, int(span * 4) + 1, size=2) / 4.0
        dets.append({"box": [x, y, x + BOX_PATCHES, y + BOX_PATCHES],
                     "category": int(rng.integers(0, cfg.n_objects + 1)),
                     "score": float(rng.uniform(0.05, 0.6))})
    return dets


def _build_scene(scene_id, split, class_ids, classes, textures, markers, tiles,
                 cfg, seed):
    rng = derive_rng(seed, f"scene.{scene_id}")
    interactions = []
    for c in class_ids:
        hb, ob = _place_pair(rng, cfg.d_p)
        interactions.append({"hoi": int(c), "human_box": hb, "object_box": ob})
    img = render_scene(rng, interactions, classes, textures, markers, tiles, cfg)
    det_rng = derive_rng(seed, f"det.{scene_id}")
    dets = oracle_detections(interactions, classes, cfg.det_noise, det_rng, cfg)
    return {"scene_id": scene_id, "split": split, "image": img,
            "interactions": interactions, "detections": dets}


def generate_scenes(cfg, classes, seed):
    """All train and test scenes; scene ids are global and ascending."""
    textures = make_textures(seed, cfg.n_objects, cfg.patch_px)
    markers = make_markers(seed, cfg.n_verbs)
    tiles = make_verb_tiles(seed, cfg.n_verbs, cfg.patch_px)
    probs = zipf_class_probs(len(classes), cfg.zipf_s, derive_rng(seed, "zipf"))
    scenes = []
    for i in range(cfg.n_train):
        rng = derive_rng(seed, f"cast.{i}")
        k = int(rng.integers(1, 3))
        class_ids = rng.choice(len(classes), size=k, p=probs)
        scenes.append(_build_scene(i, "train", class_ids, classes, textures,
                                   markers, tiles, cfg, seed))
    coverage = list(derive_rng(seed, "test.coverage").permutation(len(classes)))
    for j in range(cfg.n_test):
        sid = cfg.n_train + j
        rng = derive_rng(seed, f"cast.{sid}")
        k = int(rng.integers(1, 3))
        class_ids = []
        for _ in range(k):
            if coverage:
                class_ids.append(int(coverage.pop(0)))
            else:
                class_ids.append(int(rng.integers(0, len(classes))))
        scenes.append(_build_scene(sid, "test", class_ids, classes, textures,
                                   markers, tiles, cfg, seed))
    if coverage:
        raise GenerationError(f"test set too small to cover all classes: "
                              f"{len(coverage)} classes missing")
    return scenes


def class_counts(scenes, n_classes, split="train"):
    counts = np.zeros(n_classes, dtype=int)
    for s in scenes:
        if s["split"] != split:
            continue
        for g in s["interactions"]:
            counts[g["hoi"]] += 1
    return counts


# --------------------------------------------------------------------- splits

def make_split(classes, counts, mode, cfg, rng):
    """Seen/unseen class partition for one mode; predicates per mode.

    uv/uo hold out whole verbs/objects; rfuc takes the rarest classes first
    (training count under the rare threshold), nfuc the most frequent ones
    (count above it), both keeping every verb and object represented among
    seen classes.
    """
    n = len(classes)
    counts = np.asarray(counts)
    if mode == "uv":
        k = math.ceil(cfg.unseen_verb_frac * cfg.n_verbs)
        held = set(int(v) for v in rng.choice(cfg.n_verbs, size=k, replace=False))
        unseen = [c for c, (v, _) in enumerate(classes) if v in held]
    elif mode == "uo":
        k = math.ceil(cfg.unseen_object_frac * cfg.n_objects)
        held = set(int(o) for o in rng.choice(cfg.n_objects, size=k, replace=False))
        unseen = [c for c, (_, o) in enumerate(classes) if o in held]
    elif mode in ("rfuc", "nfuc"):
        quota = math.ceil(cfg.unseen_class_frac * n)
        if mode == "rfuc":
            pool = sorted((c for c in range(n) if counts[c] < cfg.rare_threshold),
                          key=lambda c: (counts[c], c))
        else:
            pool = sorted((c for c in range(n) if counts[c] > cfg.rare_threshold),
                          key=lambda c: (-counts[c], c))
        if len(pool) < quota:
            raise GenerationError(
                f"{mode}: need {quota} candidate classes, found {len(pool)} with "
                f"count {'<' if mode == 'rfuc' else '>'} {cfg.rare_threshold}")
        verb_left = Counter(v for v, _ in classes)
        obj_left = Counter(o for _, o in classes)
        unseen = []
        for c in pool:
            if len(unseen) == quota:
                break
            v, o = classes[c]
            if verb_left[v] <= 1 or obj_left[o] <= 1:
                continue
            unseen.append(c)
            verb_left[v] -= 1
            obj_left[o] -= 1
        if len(unseen) < quota:
            raise GenerationError(
                f"{mode}: coverage constraint left only {len(unseen)} of the "
                f"{quota} required unseen classes (pool size {len(pool)})")
    else:
        raise DataError(f"unknown split mode {mode!r}")
    unseen = sorted(unseen)
    seen = sorted(set(range(n)) - set(unseen))
    if not seen:
        raise GenerationError(f"{mode}: split left no seen classes")
    return {"mode": mode, "seen": seen, "unseen": unseen}


# ------------------------------------------------------------------- fixtures

def _unit(v):
    n = float(np.linalg.norm(v))
    if n < 1e-9:
        raise GenerationError("degenerate zero fixture row")
    return v / n


def build_class_text(classes, cfg, seed):
    """[C, d_t] unit description rows; classes sharing parts sit closer."""
    rng = derive_rng(seed, "guidance")
    vl = rng.normal(size=(cfg.n_verbs, cfg.d_t))
    ol = rng.normal(size=(cfg.n_objects, cfg.d_t))
    a = rng.normal(size=(cfg.d_t, cfg.d_t)) / math.sqrt(cfg.d_t)
    b = rng.normal(size=(cfg.d_t, cfg.d_t)) / math.sqrt(cfg.d_t)
    eta = rng.normal(size=(len(classes), cfg.d_t))
    rows = np.stack([_unit(vl[v] @ a.T + ol[o] @ b.T + 0.15 * eta[c])
                     for c, (v, o) in enumerate(classes)])
    return rows, (vl, ol, a, b)


def build_disparity(classes, latents, related, mode, cfg, seed):
    """Per unseen class: m unit rows pointing from its related seen class."""
    vl, ol, a, b = latents
    out = {}
    for u, s in sorted(related.items()):
        vu, ou = classes[u]
        vs, os_ = classes[s]
        base = (vl[vu] - vl[vs]) @ a.T + 0.25 * ((ol[ou] - ol[os_]) @ b.T)
        rng = derive_rng(seed, f"disparity.{mode}.{u}")
        out[u] = np.stack([_unit(base + 0.1 * rng.normal(size=cfg.d_t))
                           for _ in range(cfg.n_disparity)])
    return out


# ---------------------------------------------------------------- self-checks

def run_self_checks(cfg, classes, scenes, counts, splits, class_text):
    test_counts = class_counts(scenes, len(classes), split="test")
    if int((test_counts > 0).sum()) != len(classes):
        missing = [c for c in range(len(classes)) if test_counts[c] == 0]
        raise GenerationError(f"classes without test instances: {missing}")
    rare = int((counts < cfg.rare_threshold).sum())
    if rare < 0.15 * len(classes):
        raise GenerationError(f"long tail too short: {rare} rare classes of "
                              f"{len(classes)} (need >= 15%)")
    _check_detection_oracle(cfg, classes, scenes)
    _check_fixture_geometry(classes, class_text)
    for mode, sp in splits.items():
        _check_split(mode, sp, classes, counts, cfg)


def _check_detection_oracle(cfg, classes, scenes):
    ious, n_fp, n_scene = [], 0, 0
    for s in scenes:
        n_scene += 1
        gt_boxes = []
        for g in s["interactions"]:
            gt_boxes.append(g["human_box"])
            gt_boxes.append(g["object_box"])
        n_fp += max(0, len(s["detections"]) - len(gt_boxes))
        for det, gt in zip(s["detections"], gt_boxes):
            ious.append(box_iou(det["box"], gt))
        for det in s["detections"]:
            if not 0.0 < det["score"] <= 1.0:
                raise GenerationError(f"detection score {det['score']} outside (0, 1]")
    if cfg.det_noise <= 0.3 and ious and float(np.mean(ious)) < 0.6:
        raise GenerationError(f"detector jitter too strong: mean IoU "
                              f"{float(np.mean(ious)):.3f} < 0.6 at noise {cfg.det_noise}")
    expected = FP_PER_NOISE * cfg.det_noise * n_scene
    if expected >= 50 and not 0.8 * expected <= n_fp <= 1.2 * expected:
        raise GenerationError(f"false-positive count {n_fp} outside +-20% of "
                              f"{expected:.0f}")


def _check_fixture_geometry(classes, class_text):
    share_verb, share_none = [], []
    for i in range(len(classes)):
        for j in range(i + 1, len(classes)):
            sim = float(class_text[i] @ class_text[j])
            vi, oi = classes[i]
            vj, oj = classes[j]
            if vi == vj:
                share_verb.append(sim)
            elif oi != oj:
                share_none.append(sim)
    if not share_verb or not share_none:
        return
    if np.mean(share_verb) <= np.mean(share_none):
        raise GenerationError("fixture geometry broken: verb-sharing classes are "
                              "not more similar than unrelated ones")
    norms = np.linalg.norm(class_text, axis=1)
    if np.abs(norms - 1.0).max() > 1e-6:
        raise GenerationError("description rows are not unit-norm")


def _check_split(mode, sp, classes, counts, cfg):
    seen, unseen = set(sp["seen"]), set(sp["unseen"])
    if seen & unseen or (seen | unseen) != set(range(len(classes))):
        raise GenerationError(f"{mode}: seen/unseen is not a partition")
    seen_verbs = {classes[c][0] for c in seen}
    seen_objects = {classes[c][1] for c in seen}
    for u in unseen:
        v, o = classes[u]
        if mode == "uv" and v in seen_verbs:
            raise GenerationError(f"uv: unseen class {u} shares verb {v} with seen")
        if mode == "uo" and o in seen_objects:
            raise GenerationError(f"uo: unseen class {u} shares object {o} with seen")
        if mode == "rfuc":
            if counts[u] >= cfg.rare_threshold:
                raise GenerationError(f"rfuc: class {u} has count {counts[u]}")
            if v not in seen_verbs or o not in seen_objects:
                raise GenerationError(f"rfuc: class {u} lacks seen coverage")
        if mode == "nfuc":
            if counts[u] <= cfg.rare_threshold:
                raise GenerationError(f"nfuc: class {u} has count {counts[u]}")
            if v not in seen_verbs or o not in seen_objects:
                raise GenerationError(f"nfuc: class {u} lacks seen coverage")


# ------------------------------------------------------------------ file I/O

def _atomic_write(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _sha(data):
    import hashlib
    return hashlib.sha256(data).hexdigest()


def _dump(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_world_meta(path, cfg, seed, classes, counts):
    lines = ["format=1", f"seed={seed}"]
    for key in ("n_verbs", "n_objects", "n_hoi", "n_train", "n_test", "d_p",
                "patch_px", "det_noise", "zipf_s", "d_t", "n_disparity",
                "rare_threshold"):
        lines.append(f"{key}={getattr(cfg, key)}")
    for c, (v, o) in enumerate(classes):
        lines.append(f"class.{c}={v},{o}")
    for c, n in enumerate(counts):
        lines.append(f"count.{c}={int(n)}")
    body = "\n".join(lines) + "\n"
    body += f"checksum={_sha(body.encode())}\n"
    _atomic_write(path, body.encode())


def read_world_meta(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    lines = text.splitlines()
    if not lines or not lines[-1].startswith("checksum="):
        raise DataError(f"{path}: missing checksum line")
    body = "\n".join(lines[:-1]) + "\n"
    want = lines[-1].split("=", 1)[1]
    got = _sha(body.encode())
    if got != want:
        raise DataError(f"{path}: checksum mismatch, file says {want}, content is {got}")
    out = {}
    for line in lines[:-1]:
        k, v = line.split("=", 1)
        out[k] = v
    return out


def write_jsonl(path, records):
    body = "".join(_dump(r) + "\n" for r in records).encode()
    body += (_dump({"checksum": _sha(body)}) + "\n").encode()
    _atomic_write(path, body)


def read_jsonl(path):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    lines = raw.decode().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    tail = json.loads(lines[-1])
    if set(tail) != {"checksum"}:
        raise DataError(f"{path}: missing checksum record")
    body = "\n".join(lines[:-1]) + "\n" if len(lines) > 1 else ""
    got = _sha(body.encode())
    if got != tail["checksum"]:
        raise DataError(f"{path}: checksum mismatch, file says {tail['checksum']}, "
                        f"content is {got}")
    return [json.loads(line) for line in lines[:-1]]


def write_split(path, sp):
    payload = {"mode": sp["mode"], "seen": sp["seen"], "unseen": sp["unseen"]}
    payload["checksum"] = _sha(_dump({k: payload[k] for k in ("mode", "seen", "unseen")}).encode())
    _atomic_write(path, (_dump(payload) + "\n").encode())


def read_split(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    want = payload.get("checksum")
    got = _sha(_dump({k: payload[k] for k in ("mode", "seen", "unseen")}).encode())
    if got != want:
        raise DataError(f"{path}: checksum mismatch, file says {want}, content is {got}")
    return payload


def encode_image(img):
    return base64.b64encode(np.ascontiguousarray(img, dtype="<f4").tobytes()).decode()


def decode_image(b64, px):
    raw = base64.b64decode(b64.encode())
    return np.frombuffer(raw, dtype="<f4").reshape(px, px).astype(np.float32)


def scene_record(scene):
    return {"scene_id": scene["scene_id"], "split": scene["split"],
            "image_b64": encode_image(scene["image"]),
            "interactions": [{"hoi": g["hoi"], "human_box": g["human_box"],
                              "object_box": g["object_box"]}
                             for g in scene["interactions"]],
            "detections": scene["detections"]}


# -------------------------------------------------------------- orchestration

def pretrain_encoder_fixture(cfg, scenes, classes, seed, steps=None):
    """Contrastive pretraining over (scene image, interaction caption) pairs.

    Returns (text encoder, visual encoder, per-step losses, retrieval
    accuracy). Encoders come back trainable; callers freeze them.
    """
    captions, images, scene_class_sets = [], [], []
    for s in scenes:
        if s["split"] != "train":
            continue
        present = {g["hoi"] for g in s["interactions"]}
        for g in s["interactions"]:
            captions.append(caption_tokens(g["verb"], g["object"], cfg.n_verbs))
            images.append(s["image"])
            scene_class_sets.append(present)
    captions = np.asarray(captions, dtype=int)
    images = np.asarray(images)
    rng = derive_rng(seed, "encoder.init")
    text_enc = encoders.TextEncoder(vocab_size(cfg.n_verbs, cfg.n_objects),
                                    cfg.d_t, cfg.d_a, cfg.n_layers, cfg.heads_t,
                                    max_len=captions.shape[1], rng=rng)
    vis_enc = encoders.VisualEncoder(cfg.d_v, cfg.d_a, cfg.n_layers, cfg.heads_v,
                                     cfg.d_p, cfg.patch_px, rng=rng)
    patch_sets = vis_enc.patchify(images).data
    losses = encoders.pretrain_dual_encoder(
        text_enc, vis_enc, captions, patch_sets,
        steps=steps or cfg.pretrain_steps, batch_size=cfg.pretrain_batch,
        lr=cfg.pretrain_lr, seed=derive_seed(seed, "encoder.pretrain"))
    # class-level retrieval probe: scenes repeat captions, so index-level
    # top-1 is meaningless; rank each image against the unique class prompts
    # and accept any class actually present in the probed scene
    acc = class_retrieval_accuracy(text_enc, vis_enc, classes, patch_sets,
                                   scene_class_sets, cfg)
    return text_enc, vis_enc, losses, acc


def class_retrieval_accuracy(text_enc, vis_enc, classes, patch_sets, class_sets,
                             cfg, probe=128):
    """Top-1 image-to-class retrieval; class_sets[i] = classes in probe image i."""
    cap = np.asarray([caption_tokens(v, o, cfg.n_verbs) for v, o in classes])
    n = min(probe, patch_sets.shape[0])
    with encoders.engine.no_grad():
        t = text_enc.encode_tokens(cap)
        v, _ = vis_enc.encode_deep(encoders.Tensor(patch_sets[:n]), [])
        sim = v.data @ t.data.T
    top = np.argmax(sim, axis=1)
    return float(np.mean([top[i] in class_sets[i] for i in range(n)]))


def enrich_interactions(scenes, classes):
    for s in scenes:
        for g in s["interactions"]:
            g["verb"], g["object"] = classes[g["hoi"]]


def generate_dataset(cfg, data_dir, seed):
    """Build and write the complete dataset; returns {filename: checksum}."""
    os.makedirs(data_dir, exist_ok=True)
    classes = build_class_table(cfg, derive_rng(seed, "classes"))
    scenes = generate_scenes(cfg, classes, seed)
    enrich_interactions(scenes, classes)
    counts = class_counts(scenes, len(classes), split="train")
    splits = {mode: make_split(classes, counts, mode, cfg,
                               derive_rng(seed, f"split.{mode}"))
              for mode in MODES}
    class_text, latents = build_class_text(classes, cfg, seed)
    guidance = {}
    for mode in MODES:
        related = select_related_seen(class_text, splits[mode]["seen"],
                                      splits[mode]["unseen"])
        disparity = build_disparity(classes, latents, related, mode, cfg, seed)
        guidance[mode] = (related, disparity)
    run_self_checks(cfg, classes, scenes, counts, splits, class_text)

    text_enc, vis_enc, losses, acc = pretrain_encoder_fixture(cfg, scenes, classes, seed)
    if acc < MIN_RETRIEVAL_ACC:
        raise GenerationError(f"encoder pretraining too weak: retrieval accuracy "
                              f"{acc:.2f} < {MIN_RETRIEVAL_ACC} (raise pretrain_steps)")

    write_world_meta(os.path.join(data_dir, WORLD_META), cfg, seed, classes, counts)
    write_jsonl(os.path.join(data_dir, SCENES_FILE),
                [scene_record(s) for s in scenes])
    for mode in MODES:
        write_split(os.path.join(data_dir, split_file(mode)), splits[mode])
        related, disparity = guidance[mode]
        records = []
        for c in range(len(classes)):
            records.append({
                "class_id": c,
                "description": [float(x) for x in class_text[c]],
                "disparity": ([[float(x) for x in row] for row in disparity[c]]
                              if c in disparity else None),
                "related_seen": related.get(c)})
        write_jsonl(os.path.join(data_dir, guidance_file(mode)), records)
    header = {"seed": seed, "d_t": cfg.d_t, "d_v": cfg.d_v, "d_a": cfg.d_a,
              "n_layers": cfg.n_layers, "heads_t": cfg.heads_t,
              "heads_v": cfg.heads_v, "d_p": cfg.d_p, "patch_px": cfg.patch_px,
              "vocab_size": vocab_size(cfg.n_verbs, cfg.n_objects),
              "max_len": 4, "pretrain_steps": int(cfg.pretrain_steps),
              "retrieval_pct": int(round(acc * 100))}
    encoders.save_params(os.path.join(data_dir, ENCODER_FILE),
                         text_enc.named_parameters() + vis_enc.named_parameters(),
                         header)
    out = {}
    for name in dataset_files():
        with open(os.path.join(data_dir, name), "rb") as f:
            out[name] = _sha(f.read())
    return out


def dataset_files():
    names = [WORLD_META, SCENES_FILE, ENCODER_FILE]
    names += [split_file(m) for m in MODES]
    names += [guidance_file(m) for m in MODES]
    return names


# -------------------------------------------------------------------- loading

@dataclasses.dataclass
class WorldBundle:
    data_dir: str
    mode: str
    seed: int
    n_verbs: int
    n_objects: int
    classes: list            # (verb, object) per class id
    class_counts: np.ndarray
    d_p: int
    patch_px: int
    train_scenes: list
    test_scenes: list
    seen_ids: list
    unseen_ids: list
    class_text: np.ndarray   # [C, d_t]
    disparity: dict          # unseen id -> [m, d_t]
    related_seen: dict       # unseen id -> seen id

    @property
    def n_classes(self):
        return len(self.classes)


def load_world(data_dir, mode):
    """Verified load; strips unseen ground truth from training scenes."""
    if mode not in MODES:
        raise DataError(f"unknown split mode {mode!r}")
    meta = read_world_meta(os.path.join(data_dir, WORLD_META))
    n_hoi = int(meta["n_hoi"])
    classes = [tuple(int(x) for x in meta[f"class.{c}"].split(","))
               for c in range(n_hoi)]
    counts = np.asarray([int(meta[f"count.{c}"]) for c in range(n_hoi)])
    d_p, patch_px = int(meta["d_p"]), int(meta["patch_px"])

    sp = read_split(os.path.join(data_dir, split_file(mode)))
    seen, unseen = sp["seen"], sp["unseen"]
    seen_set = set(seen)

    records = read_jsonl(os.path.join(data_dir, SCENES_FILE))
    train_scenes, test_scenes = [], []
    for r in records:
        scene = {"scene_id": r["scene_id"], "split": r["split"],
                 "image": decode_image(r["image_b64"], d_p * patch_px),
                 "interactions": r["interactions"],
                 "detections": r["detections"]}
        enrich_interactions([scene], classes)
        if r["split"] == "train":
            scene["interactions"] = [g for g in scene["interactions"]
                                     if g["hoi"] in seen_set]
            train_scenes.append(scene)
        else:
            test_scenes.append(scene)

    rows = read_jsonl(os.path.join(data_dir, guidance_file(mode)))
    if len(rows) != n_hoi:
        raise DataError(f"guidance file lists {len(rows)} classes, world has {n_hoi}")
    class_text = np.zeros((n_hoi, int(meta["d_t"])))
    disparity, related = {}, {}
    for r in rows:
        c = r["class_id"]
        class_text[c] = np.asarray(r["description"])
        if r["disparity"] is not None:
            disparity[c] = np.asarray(r["disparity"])
        if r["related_seen"] is not None:
            related[c] = int(r["related_seen"])

    return WorldBundle(
        data_dir=data_dir, mode=mode, seed=int(meta["seed"]),
        n_verbs=int(meta["n_verbs"]), n_objects=int(meta["n_objects"]),
        classes=classes, class_counts=counts, d_p=d_p, patch_px=patch_px,
        train_scenes=train_scenes, test_scenes=test_scenes,
        seen_ids=list(seen), unseen_ids=list(unseen),
        class_text=class_text, disparity=disparity, related_seen=related)
