"""Model assembly: frozen loading, working class set, identities, facade."""
import numpy as np
import pytest

from ezhoi import detector, encoders
from ezhoi.data import DataError, load_world
from ezhoi.detector import ZeroShotHOIDetector, build_model, load_frozen_encoder

from conftest import tiny_config


class TestFrozenLoading:
    def test_everything_frozen_and_shapes_roundtrip(self, tiny_dir, tiny_cfg):
        text_enc, vis_enc, digest = load_frozen_encoder(tiny_dir, tiny_cfg)
        for name, p in text_enc.named_parameters() + vis_enc.named_parameters():
            assert not p.requires_grad, name
            if name.endswith(("gate1", "gate2")):
                assert p.data.shape == (), name
        assert len(digest) == 64

    def test_digest_stable_across_loads(self, tiny_dir, tiny_cfg):
        _, _, a = load_frozen_encoder(tiny_dir, tiny_cfg)
        _, _, b = load_frozen_encoder(tiny_dir, tiny_cfg)
        assert a == b

    def test_dimension_mismatch_refused(self, tiny_dir, tiny_cfg):
        with pytest.raises(DataError, match="n_layers"):
            load_frozen_encoder(tiny_dir, tiny_cfg.replace(n_layers=4))

    def test_pretrained_encoder_ranks_matching_caption_first(self, tiny_dir, tiny_world, tiny_cfg):
        # the shipped fixture must carry real image-text alignment; probed on
        # training scenes, where the generation-time quality gate measures it
        from ezhoi.data import caption_tokens
        from ezhoi.engine import no_grad
        text_enc, vis_enc, _ = load_frozen_encoder(tiny_dir, tiny_cfg)
        caps = np.asarray([caption_tokens(v, o, tiny_world.n_verbs)
                           for v, o in tiny_world.classes])
        scenes = tiny_world.train_scenes[:24]
        imgs = np.stack([s["image"] for s in scenes])
        with no_grad():
            t = text_enc.encode_tokens(caps)
            v, _ = vis_enc.encode_deep(vis_enc.patchify(imgs), [])
        top = np.argmax(v.data @ t.data.T, axis=1)
        hit = np.mean([top[i] in {g["hoi"] for g in scenes[i]["interactions"]}
                       for i in range(len(scenes))])
        assert hit > 0.3


class TestWorkingClassSet:
    def test_two_classes_per_action(self, tiny_world, tiny_cfg):
        model = build_model(tiny_cfg, tiny_world)
        verbs = [tiny_world.classes[c][0] for c in model.selected]
        for v in range(tiny_world.n_verbs):
            members = [c for c in model.selected if tiny_world.classes[c][0] == v]
            assert 1 <= len(members) <= 2
        assert model.align.shape == (len(model.selected), tiny_world.n_verbs)
        np.testing.assert_array_equal(model.align.sum(axis=1), 1.0)
        assert sorted(set(verbs)) == list(range(tiny_world.n_verbs))

    def test_related_anchor_classes_join_the_text_batch(self, tiny_world, tiny_cfg):
        model = build_model(tiny_cfg, tiny_world)
        in_batch = set(model.text_ids)
        for c in model.selected:
            if c in tiny_world.related_seen:
                assert tiny_world.related_seen[c] in in_batch
        # refinement rows point at actual unseen members of the batch
        for row, pos in enumerate(model.refine_spec.unseen_pos):
            assert model.text_ids[pos] in tiny_world.unseen_ids

    def test_selected_rows_lead_the_batch(self, tiny_world, tiny_cfg):
        model = build_model(tiny_cfg, tiny_world)
        assert model.text_ids[:len(model.selected)] == list(model.selected)


class TestZeroInitIdentities:
    def test_refinement_is_identity_before_training(self, tiny_world, tiny_cfg):
        from ezhoi.engine import no_grad
        model = build_model(tiny_cfg, tiny_world)
        ctx = tiny_world.class_text[model.text_ids]
        with no_grad():
            refined = model.bank.text_prompt_stack(ctx, model.refine_spec)
            plain = model.bank.text_prompt_stack(ctx, None)
        for a, b in zip(refined, plain):
            np.testing.assert_array_equal(a.data, b.data)

    def test_box_adapters_are_identity_before_training(self, tiny_world, tiny_cfg):
        from ezhoi.engine import no_grad
        model = build_model(tiny_cfg, tiny_world)
        scenes = tiny_world.test_scenes[:3]
        with no_grad():
            with_adapters = model.encode_scenes(scenes).data
            model.adapters = None
            without = model.encode_scenes(scenes).data
        np.testing.assert_array_equal(with_adapters, without)


class TestForwardPaths:
    def test_training_outputs_align(self, tiny_world, tiny_cfg):
        model = build_model(tiny_cfg, tiny_world)
        scenes = tiny_world.train_scenes[:5]
        scores, targets, sel_rows = model.forward_train(scenes)
        assert scores.shape == targets.shape
        assert scores.shape[1] == tiny_world.n_verbs
        assert sel_rows.shape == (len(model.selected), tiny_cfg.d_a)
        s = scores.data
        assert np.all(s > 0.0) and np.all(s < 1.0)
        assert set(np.unique(targets)) <= {0.0, 1.0}

    def test_predictions_deterministic_and_well_formed(self, tiny_world, tiny_cfg):
        model = build_model(tiny_cfg, tiny_world)
        scenes = tiny_world.test_scenes[:6]
        a = model.predict_scenes(scenes)
        b = model.predict_scenes(scenes)
        assert a == b
        assert a, "candidate pairs should exist on the tiny world"
        for p in a:
            assert 0 <= p["class_id"] < tiny_world.n_classes
            assert np.isfinite(p["score"]) and 0.0 <= p["score"] <= 1.0
            v, o = tiny_world.classes[p["class_id"]]
            assert p["scene_id"] in {s["scene_id"] for s in scenes}

    def test_build_model_deterministic(self, tiny_world, tiny_cfg):
        m1 = build_model(tiny_cfg, tiny_world)
        m2 = build_model(tiny_cfg, tiny_world)
        p1, p2 = m1.named_params(), m2.named_params()
        assert p1.keys() == p2.keys()
        for name in p1:
            np.testing.assert_array_equal(p1[name].data, p2[name].data)


class TestFacade:
    def test_param_plumbing(self):
        est = ZeroShotHOIDetector(data_dir="/nowhere", mode="uo", seed=3,
                                  epochs=2, utpl=False)
        got = est.get_params()
        assert got["mode"] == "uo" and got["epochs"] == 2 and got["utpl"] is False
        est.set_params(mode="uv", epochs=1)
        assert est.mode == "uv" and est.overrides["epochs"] == 1

    def test_unfitted_predict_refused(self):
        with pytest.raises(RuntimeError, match="not fitted"):
            ZeroShotHOIDetector(data_dir="/nowhere").predict()

    def test_missing_data_dir_refused(self):
        with pytest.raises(ValueError, match="data_dir"):
            ZeroShotHOIDetector().fit()

    def test_fit_predict_score(self, tiny_dir):
        cfg = tiny_config()
        est = ZeroShotHOIDetector(
            data_dir=tiny_dir, mode="uv", seed=cfg.seed, precision=64,
            **{k: getattr(cfg, k) for k in
               ("n_verbs", "n_objects", "n_hoi", "n_train", "n_test", "d_v", "d_t",
                "d_a", "n_layers", "heads_t", "heads_v", "d_p", "patch_px",
                "rare_threshold", "n_prompt_layers", "n_prompt_tokens",
                "batch_size")},
            epochs=1, val_fraction=0.2)
        est.fit()
        assert len(est.history_) == 1
        preds = est.predict(est.world_.test_scenes[:5])
        assert isinstance(preds, list)
        score = est.score(est.world_.test_scenes[:10])
        assert np.isfinite(score) or np.isnan(score)
