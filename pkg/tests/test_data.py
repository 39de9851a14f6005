"""World generation: class table, scenes, detections, splits, file formats."""
import hashlib
import json
import math
import os
import shutil

import numpy as np
import pytest

from conftest import TINY_SEED, tiny_config
from ezhoi.config import MODES, derive_rng
from ezhoi.data import (DataError, GenerationError, build_class_table,
                        caption_tokens, class_counts, dataset_files,
                        decode_image, encode_image, generate_dataset,
                        jitter_box, load_world, make_split, make_verb_tiles,
                        oracle_detections, read_jsonl, read_split,
                        read_world_meta, split_file, vocab_size, write_jsonl,
                        JITTER_CLIP, SCENES_FILE, WORLD_META)
from ezhoi.evaluate import box_iou


class TestClassTable:
    def test_covers_every_verb_and_object(self):
        cfg = tiny_config()
        table = build_class_table(cfg, derive_rng(3, "classes"))
        assert len(table) == cfg.n_hoi
        assert len(set(table)) == cfg.n_hoi
        assert {v for v, _ in table} == set(range(cfg.n_verbs))
        assert {o for _, o in table} == set(range(cfg.n_objects))

    def test_sorted_and_deterministic(self):
        cfg = tiny_config()
        a = build_class_table(cfg, derive_rng(3, "classes"))
        b = build_class_table(cfg, derive_rng(3, "classes"))
        assert a == b == sorted(a)

    def test_impossible_request_refused(self):
        cfg = tiny_config(n_verbs=4, n_objects=4, n_hoi=12)
        cfg = cfg.replace(n_hoi=17)  # 4x4 combinations cannot yield 17
        with pytest.raises(GenerationError):
            build_class_table(cfg, derive_rng(0, "classes"))


class TestScenes:
    def test_counts_and_ids(self, tiny_world, tiny_cfg):
        assert len(tiny_world.train_scenes) == tiny_cfg.n_train
        assert len(tiny_world.test_scenes) == tiny_cfg.n_test
        ids = [s["scene_id"] for s in tiny_world.train_scenes + tiny_world.test_scenes]
        assert ids == list(range(tiny_cfg.n_train + tiny_cfg.n_test))

    def test_every_class_has_test_instances(self, tiny_world):
        counts = class_counts(tiny_world.test_scenes, tiny_world.n_classes,
                              split="test")
        assert (counts > 0).all()

    def test_images_decode_to_unit_range(self, tiny_world, tiny_cfg):
        img = tiny_world.train_scenes[0]["image"]
        px = tiny_cfg.d_p * tiny_cfg.patch_px
        assert img.shape == (px, px)
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_long_tail_present(self, tiny_world, tiny_cfg):
        rare = int((tiny_world.class_counts < tiny_cfg.rare_threshold).sum())
        assert rare >= 0.15 * tiny_world.n_classes

    def test_verb_tile_written_inside_boxes(self, tiny_world, tiny_cfg):
        # pair features pool the two boxes, so each box's top-left patch
        # must carry the verb stamp verbatim
        tiles = make_verb_tiles(TINY_SEED, tiny_cfg.n_verbs, tiny_cfg.patch_px)
        p = tiny_cfg.patch_px
        scene = tiny_world.test_scenes[0]
        g = scene["interactions"][-1]  # drawn last, nothing overwrites it
        for box in (g["human_box"], g["object_box"]):
            x0, y0 = int(box[0] * p), int(box[1] * p)
            got = scene["image"][y0:y0 + p, x0:x0 + p]
            assert np.allclose(got, tiles[g["verb"]], atol=1e-6)


class TestDetections:
    def test_zero_noise_is_exact(self, tiny_world, tiny_cfg):
        interactions = tiny_world.test_scenes[0]["interactions"]
        classes = tiny_world.classes
        dets = oracle_detections(interactions, classes, 0.0,
                                 derive_rng(0, "det"), tiny_cfg)
        assert len(dets) == 2 * len(interactions)
        for g, (dh, do) in zip(interactions, zip(dets[0::2], dets[1::2])):
            assert dh["box"] == [float(c) for c in g["human_box"]]
            assert do["box"] == [float(c) for c in g["object_box"]]
            assert dh["score"] == do["score"] == 1.0
            assert dh["category"] == 0
            assert do["category"] == classes[g["hoi"]][1] + 1

    def test_jitter_zero_noise_identity(self):
        box = [1.0, 2.0, 3.0, 4.0]
        assert jitter_box(box, 0.0, derive_rng(0, "j"), d_p=7) == box

    def test_jitter_bounded(self):
        rng = derive_rng(5, "jitter")
        noise = 0.3
        for _ in range(200):
            box = [2.0, 2.0, 4.0, 4.0]
            out = np.asarray(jitter_box(box, noise, rng, d_p=7))
            assert np.abs(out - box).max() <= JITTER_CLIP * noise + 1e-12
            assert out[2] > out[0] and out[3] > out[1]

    def test_paired_detection_quality(self, tiny_world):
        ious, scores = [], []
        for s in tiny_world.train_scenes:
            gt = []
            for g in s["interactions"]:
                gt.append(g["human_box"])
                gt.append(g["object_box"])
            for det, box in zip(s["detections"], gt):
                ious.append(box_iou(det["box"], box))
                scores.append(det["score"])
        assert np.mean(ious) >= 0.6
        assert min(scores) > 0.0 and max(scores) <= 1.0


@pytest.fixture(scope="module", params=MODES)
def mode_world(request, tiny_dir):
    return load_world(tiny_dir, request.param)


class TestSplits:
    def test_partition(self, mode_world):
        seen, unseen = set(mode_world.seen_ids), set(mode_world.unseen_ids)
        assert not seen & unseen
        assert seen | unseen == set(range(mode_world.n_classes))
        assert seen and unseen

    def test_defining_predicate_holds_for_every_unseen_class(self, mode_world):
        w = mode_world
        cfg = tiny_config()
        seen_verbs = {w.classes[c][0] for c in w.seen_ids}
        seen_objects = {w.classes[c][1] for c in w.seen_ids}
        for u in w.unseen_ids:
            v, o = w.classes[u]
            if w.mode == "uv":
                assert v not in seen_verbs
            elif w.mode == "uo":
                assert o not in seen_objects
            elif w.mode == "rfuc":
                assert w.class_counts[u] < cfg.rare_threshold
                assert v in seen_verbs and o in seen_objects
            else:
                assert w.class_counts[u] > cfg.rare_threshold
                assert v in seen_verbs and o in seen_objects

    def test_no_unseen_positive_in_training_records(self, mode_world):
        unseen = set(mode_world.unseen_ids)
        for s in mode_world.train_scenes:
            for g in s["interactions"]:
                assert g["hoi"] not in unseen

    def test_test_scenes_keep_unseen_annotations(self, mode_world):
        unseen = set(mode_world.unseen_ids)
        present = {g["hoi"] for s in mode_world.test_scenes
                   for g in s["interactions"]}
        assert unseen <= present

    def test_unknown_mode_refused(self):
        cfg = tiny_config()
        with pytest.raises(DataError):
            make_split([(0, 0)], np.array([1]), "xyz", cfg, derive_rng(0, "s"))

    def test_unsatisfiable_rare_quota_refused(self):
        cfg = tiny_config()
        classes = [(v, o) for v in range(4) for o in range(3)]
        counts = np.full(len(classes), 99)  # nothing is rare
        with pytest.raises(GenerationError):
            make_split(classes, counts, "rfuc", cfg, derive_rng(0, "s"))


class TestGuidanceFixtures:
    def test_description_rows_unit_norm(self, tiny_world):
        norms = np.linalg.norm(tiny_world.class_text, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-6

    def test_verb_sharing_classes_sit_closer(self, tiny_world):
        f, classes = tiny_world.class_text, tiny_world.classes
        share_verb, share_none = [], []
        for i in range(len(classes)):
            for j in range(i + 1, len(classes)):
                sim = float(f[i] @ f[j])
                if classes[i][0] == classes[j][0]:
                    share_verb.append(sim)
                elif classes[i][1] != classes[j][1]:
                    share_none.append(sim)
        assert np.mean(share_verb) > np.mean(share_none)

    def test_guidance_covers_exactly_the_unseen_classes(self, tiny_world, tiny_cfg):
        w = tiny_world
        assert set(w.disparity) == set(w.unseen_ids) == set(w.related_seen)
        for u in w.unseen_ids:
            assert w.disparity[u].shape == (tiny_cfg.n_disparity, tiny_cfg.d_t)
            norms = np.linalg.norm(w.disparity[u], axis=1)
            assert np.abs(norms - 1.0).max() < 1e-6
            assert w.related_seen[u] in set(w.seen_ids)

    def test_related_seen_is_argmax_similarity(self, tiny_world):
        w = tiny_world
        for u in w.unseen_ids:
            sims = {s: float(w.class_text[u] @ w.class_text[s])
                    for s in w.seen_ids}
            best = max(sims.values())
            want = min(s for s, v in sims.items() if v == best)
            assert w.related_seen[u] == want


class TestFileFormats:
    def test_caption_layout(self):
        cfg = tiny_config()
        cap = caption_tokens(2, 3, cfg.n_verbs)
        assert len(cap) == 4
        assert max(cap) < vocab_size(cfg.n_verbs, cfg.n_objects)
        assert caption_tokens(1, 2, cfg.n_verbs) != caption_tokens(2, 1, cfg.n_verbs)

    def test_image_codec_roundtrip(self):
        img = np.random.default_rng(0).random((15, 15)).astype(np.float32)
        assert np.array_equal(decode_image(encode_image(img), 15), img)

    def test_jsonl_roundtrip(self, tmp_path):
        path = str(tmp_path / "r.jsonl")
        records = [{"a": 1, "b": [1.5, 2.5]}, {"a": 2, "b": []}]
        write_jsonl(path, records)
        assert read_jsonl(path) == records

    def test_meta_matches_config(self, tiny_dir, tiny_cfg):
        meta = read_world_meta(os.path.join(tiny_dir, WORLD_META))
        assert int(meta["n_hoi"]) == tiny_cfg.n_hoi
        assert int(meta["seed"]) == TINY_SEED
        assert int(meta["d_p"]) == tiny_cfg.d_p

    def test_tampered_meta_refused(self, tiny_dir, tmp_path):
        src = os.path.join(tiny_dir, WORLD_META)
        dst = str(tmp_path / WORLD_META)
        with open(src) as f:
            text = f.read()
        with open(dst, "w") as f:
            f.write(text.replace("count.0=", "count.0=9", 1))
        with pytest.raises(DataError, match="checksum"):
            read_world_meta(dst)

    def test_tampered_scenes_refused(self, tiny_dir, tmp_path):
        with open(os.path.join(tiny_dir, SCENES_FILE), "rb") as f:
            raw = f.read()
        dst = str(tmp_path / SCENES_FILE)
        with open(dst, "wb") as f:
            f.write(raw.replace(b'"split":"train"', b'"split":"test0"', 1))
        with pytest.raises(DataError, match="checksum"):
            read_jsonl(dst)

    def test_truncated_jsonl_refused(self, tmp_path):
        path = str(tmp_path / "t.jsonl")
        with open(path, "w") as f:
            f.write('{"a": 1}\n')  # no checksum trailer
        with pytest.raises(DataError, match="checksum"):
            read_jsonl(path)

    def test_tampered_split_refused(self, tiny_dir, tmp_path):
        with open(os.path.join(tiny_dir, split_file("uv"))) as f:
            payload = json.load(f)
        payload["seen"] = payload["seen"][1:]
        dst = str(tmp_path / "split.uv.json")
        with open(dst, "w") as f:
            json.dump(payload, f)
        with pytest.raises(DataError, match="checksum"):
            read_split(dst)


class TestRegeneration:
    def test_same_seed_same_bytes(self, tiny_dir, tmp_path):
        fresh = str(tmp_path / "again")
        checksums = generate_dataset(tiny_config(), fresh, seed=TINY_SEED)
        for name in dataset_files():
            with open(os.path.join(tiny_dir, name), "rb") as f:
                want = hashlib.sha256(f.read()).hexdigest()
            assert checksums[name] == want, name

    def test_unknown_mode_load_refused(self, tiny_dir):
        with pytest.raises(DataError):
            load_world(tiny_dir, "zz")
