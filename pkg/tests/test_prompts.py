"""Prompt bank: zero-init identities, refinement scope, related-class lookup."""
import numpy as np
import pytest

from ezhoi.config import RunConfig
from ezhoi.engine import Tensor, reduce_sum
from ezhoi.prompts import (GuidanceAdapter, GuidedPromptBank, RefineSpec,
                           build_refine_context, make_refine_spec,
                           select_related_seen)


def small_cfg(**kw):
    base = dict(d_v=12, d_t=8, d_a=8, heads_t=2, heads_v=2,
                n_prompt_tokens=2, n_prompt_layers=3, n_disparity=3, precision=64)
    base.update(kw)
    return RunConfig(**base)


def projected_base(bank, i):
    return bank.base[i].data @ bank.proj_w[i].data + bank.proj_b[i].data


class TestZeroInitIdentity:
    def test_fresh_adapter_is_exact_identity(self):
        rng = np.random.default_rng(0)
        ad = GuidanceAdapter(d_model=8, d_down=2, rng=rng)
        x = Tensor(rng.normal(size=(3, 4, 8)))
        ctx = Tensor(rng.normal(size=(3, 6, 8)))
        out = ad(x, ctx)
        assert np.array_equal(out.data, x.data)

    def test_fresh_bank_text_prompts_equal_projected_base(self):
        cfg = small_cfg()
        bank = GuidedPromptBank(cfg, np.random.default_rng(1))
        class_text = np.random.default_rng(2).normal(size=(4, cfg.d_t))
        spec = make_refine_spec([0, 1, 2, 3], {2: 0},
                                {2: np.zeros((3, cfg.d_t))}, cfg.d_t, 3)
        stacks = bank.text_prompt_stack(class_text, spec)
        assert len(stacks) == cfg.n_prompt_layers
        for i, s in enumerate(stacks):
            want = np.broadcast_to(projected_base(bank, i), (4, cfg.n_prompt_tokens, cfg.d_t))
            assert np.array_equal(s.data, want)

    def test_fresh_bank_visual_prompts_equal_base(self):
        cfg = small_cfg()
        bank = GuidedPromptBank(cfg, np.random.default_rng(1))
        feats = np.random.default_rng(3).normal(size=(5, cfg.d_p ** 2, cfg.d_v))
        stacks = bank.visual_prompt_stack(5, feats)
        for i, s in enumerate(stacks):
            want = np.broadcast_to(bank.base[i].data, (5, cfg.n_prompt_tokens, cfg.d_v))
            assert np.array_equal(s.data, want)


class TestRefinement:
    def test_context_rows_are_disparity_then_seen_then_own(self):
        rng = np.random.default_rng(4)
        p, d_t, m = 2, 8, 3
        x = Tensor(rng.normal(size=(4, p, d_t)))
        disp = rng.normal(size=(2, m, d_t))
        spec = RefineSpec(np.array([1, 3]), np.array([0, 2]), disp)
        h_u, kv = build_refine_context(x, spec, np.float64)
        assert kv.shape == (2, m + 2 * p, d_t)
        assert h_u.shape == (2, p, d_t)
        assert np.allclose(kv.data[:, :m], disp)
        assert np.allclose(kv.data[0, m:m + p], x.data[0])
        assert np.allclose(kv.data[0, m + p:], x.data[1])
        assert np.allclose(kv.data[1, m:m + p], x.data[2])
        assert np.allclose(kv.data[1, m + p:], x.data[3])

    def test_refinement_touches_only_unseen_rows(self):
        cfg = small_cfg()
        rng = np.random.default_rng(5)
        bank = GuidedPromptBank(cfg, rng)
        # wake the refinement path up so it actually moves its queries
        bank.utpl_adapter.w_up.data[:] = rng.normal(size=bank.utpl_adapter.w_up.shape)
        class_text = rng.normal(size=(5, cfg.d_t))
        disp = {3: rng.normal(size=(3, cfg.d_t)), 4: rng.normal(size=(3, cfg.d_t))}
        spec = make_refine_spec([0, 1, 2, 3, 4], {3: 0, 4: 2}, disp, cfg.d_t, 3)
        plain = bank.text_prompt_stack(class_text, None)
        refined = bank.text_prompt_stack(class_text, spec)
        for a, b in zip(plain, refined):
            assert np.array_equal(a.data[[0, 1, 2]], b.data[[0, 1, 2]])
            assert not np.allclose(a.data[[3, 4]], b.data[[3, 4]])

    def test_missing_related_seen_class_refuses(self):
        with pytest.raises(ValueError, match="missing from text batch"):
            make_refine_spec([3, 4], {3: 0}, {3: np.zeros((3, 8))}, 8, 3)

    def test_wrong_disparity_shape_refuses(self):
        with pytest.raises(ValueError, match="disparity rows"):
            make_refine_spec([0, 3], {3: 0}, {3: np.zeros((2, 8))}, 8, 3)

    def test_absent_unseen_classes_are_skipped(self):
        spec = make_refine_spec([0, 1], {7: 0}, {7: np.zeros((3, 8))}, 8, 3)
        assert len(spec.unseen_pos) == 0


class TestRelatedSeenLookup:
    @staticmethod
    def oracle(f, seen_ids, u):
        best_id, best_sim = None, -np.inf
        for s in seen_ids:
            sim = float(np.dot(f[u], f[s]))
            if sim > best_sim or (sim == best_sim and s < best_id):
                best_id, best_sim = s, sim
        return best_id

    def test_matches_bruteforce_over_many_instances(self):
        rng = np.random.default_rng(6)
        for _ in range(500):
            n = int(rng.integers(4, 12))
            f = rng.normal(size=(n, 6))
            f /= np.linalg.norm(f, axis=1, keepdims=True)
            ids = rng.permutation(n)
            n_unseen = int(rng.integers(1, n - 1))
            unseen = sorted(int(i) for i in ids[:n_unseen])
            seen = sorted(int(i) for i in ids[n_unseen:])
            got = select_related_seen(f, seen, unseen)
            for u in unseen:
                assert got[u] == self.oracle(f, seen, u)

    def test_tie_resolves_to_lowest_seen_id(self):
        f = np.zeros((5, 4))
        f[1] = f[3] = [1.0, 0, 0, 0]   # two identical seen rows
        f[4] = [1.0, 0, 0, 0]          # unseen, equally close to both
        got = select_related_seen(f, seen_ids=[1, 3], unseen_ids=[4])
        assert got[4] == 1

    def test_no_seen_classes_refuses(self):
        with pytest.raises(ValueError, match="no seen classes"):
            select_related_seen(np.zeros((2, 3)), [], [0])


class TestGradientsAndGuidance:
    def test_all_bank_params_receive_gradients(self):
        cfg = small_cfg()
        rng = np.random.default_rng(7)
        bank = GuidedPromptBank(cfg, rng)
        class_text = rng.normal(size=(4, cfg.d_t))
        feats = rng.normal(size=(3, cfg.d_p ** 2, cfg.d_v))
        spec = make_refine_spec([0, 1, 2, 3], {3: 1},
                                {3: rng.normal(size=(3, cfg.d_t))}, cfg.d_t, 3)
        loss = None
        for s in bank.text_prompt_stack(class_text, spec):
            term = reduce_sum(s * s)
            loss = term if loss is None else loss + term
        for s in bank.visual_prompt_stack(3, feats):
            loss = loss + reduce_sum(s * s)
        loss.backward()
        params = bank.named_params()
        assert len(params) > cfg.n_prompt_layers * 3
        for name, t in params.items():
            assert t.grad is not None, name
        for i in range(cfg.n_prompt_layers):
            assert np.abs(params[f"prompt.base.{i}"].grad).max() > 0
            assert np.abs(params[f"prompt.llm.{i}.w_up"].grad).max() > 0

    def test_image_guidance_differentiates_images_once_awake(self):
        cfg = small_cfg(n_prompt_layers=1)
        rng = np.random.default_rng(8)
        bank = GuidedPromptBank(cfg, rng)
        feats = rng.normal(size=(2, cfg.d_p ** 2, cfg.d_v))
        before = bank.visual_prompt_stack(2, feats)[0].data
        assert np.array_equal(before[0], before[1])
        bank.vlm_adapters[0].w_up.data[:] = rng.normal(size=bank.vlm_adapters[0].w_up.shape)
        after = bank.visual_prompt_stack(2, feats)[0].data
        assert not np.allclose(after[0], after[1])

    def test_image_guidance_requires_patch_features(self):
        bank = GuidedPromptBank(small_cfg(), np.random.default_rng(9))
        with pytest.raises(ValueError, match="patch features"):
            bank.visual_prompt_stack(2, None)

    def test_disabled_paths_create_no_params(self):
        cfg = small_cfg(llm_guide=False, vlm_guide=False, utpl=False)
        bank = GuidedPromptBank(cfg, np.random.default_rng(10))
        names = set(bank.named_params())
        assert not any(".llm." in n or ".vlm." in n or ".utpl" in n for n in names)
        assert len(names) == cfg.n_prompt_layers * 3
