"""Full detector assembly: frozen dual encoder plus the trainable stack.

The frozen half is rebuilt from the checkpoint shipped with the dataset and
never trains. Everything learnable lives in three places: the guided prompt
bank (text and visual deep prompts with their guidance adapters), the
per-layer box adapters inside the visual encoder, and the pair head (region
fusion MLP, pair cross-attention, cosine scorer with a fixed scale).

Class scoring works over a fixed working set of classes: two maximally
dissimilar classes per action, chosen once from the frozen class-text rows.
The text batch extends that set with the most related seen class of every
unseen member so prompt refinement always finds its anchor row. The batch
composition, caption tokens, and refinement spec are all constants of the
split; only prompt parameters move during training.
"""
from __future__ import annotations

import hashlib
import os

import numpy as np

from . import encoders, head
from .config import derive_rng
from .data import ENCODER_FILE, DataError, caption_tokens, load_world
from .engine import Tensor, cat, no_grad, take
from .prompts import GuidedPromptBank, make_refine_spec


def encoder_state_digest(state):
    """Identity of a stored parameter set: sha256 over sorted names and values."""
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name], dtype="<f8").tobytes())
    return h.hexdigest()


def load_frozen_encoder(data_dir, cfg):
    """Rebuild the pretrained dual encoder from its shipped checkpoint, frozen.

    Returns (text encoder, visual encoder, digest). The digest covers the
    stored 64-bit values, so it names the fixture itself and is the same
    whatever precision the run casts the parameters to.
    """
    path = os.path.join(data_dir, ENCODER_FILE)
    header, state = encoders.load_params(path)
    for key, want in (("d_t", cfg.d_t), ("d_v", cfg.d_v), ("d_a", cfg.d_a),
                      ("n_layers", cfg.n_layers), ("heads_t", cfg.heads_t),
                      ("heads_v", cfg.heads_v), ("d_p", cfg.d_p),
                      ("patch_px", cfg.patch_px)):
        if int(header[key]) != int(want):
            raise DataError(f"{path}: encoder has {key}={header[key]}, "
                            f"run config wants {want}")
    rng = np.random.default_rng(0)  # placeholder init, overwritten just below
    text_enc = encoders.TextEncoder(int(header["vocab_size"]), cfg.d_t, cfg.d_a,
                                    cfg.n_layers, cfg.heads_t, int(header["max_len"]),
                                    rng, dtype=cfg.dtype)
    vis_enc = encoders.VisualEncoder(cfg.d_v, cfg.d_a, cfg.n_layers, cfg.heads_v,
                                     cfg.d_p, cfg.patch_px, rng, dtype=cfg.dtype)
    params = text_enc.named_parameters() + vis_enc.named_parameters()
    encoders.apply_state(params, state, cfg.dtype)
    encoders.freeze(params)
    return text_enc, vis_enc, encoder_state_digest(state)


class HOIModel:
    """One split's detector: shared frozen encoders, trainable prompt stack."""

    def __init__(self, cfg, world, text_enc, vis_enc, frozen_digest, rng):
        self.cfg = cfg
        self.world = world
        self.text_enc = text_enc
        self.vis_enc = vis_enc
        self.frozen_digest = frozen_digest
        self.bank = GuidedPromptBank(cfg, rng)
        self.head = head.PairHead(cfg, rng)
        self.adapters = None
        if cfg.visual_adapter:
            self.adapters = [encoders.BoxAdapter(cfg.d_v, cfg.n_objects + 1, rng, cfg.dtype)
                             for _ in range(cfg.n_layers)]

        class_verbs = [v for v, _ in world.classes]
        self.selected, self.align = head.select_classes_per_action(
            world.class_text, class_verbs, world.n_verbs)
        extra = sorted({world.related_seen[c] for c in self.selected
                        if c in world.related_seen} - set(self.selected))
        self.text_ids = list(self.selected) + extra
        self.refine_spec = make_refine_spec(self.text_ids, world.related_seen,
                                            world.disparity, cfg.d_t, cfg.n_disparity)
        self.tokens = np.asarray([caption_tokens(*world.classes[c], world.n_verbs)
                                  for c in self.text_ids])
        self._feat_cache = {}

    # ------------------------------------------------------------- text side
    def class_rows(self):
        """Encode the working class batch; returns (selected rows, all rows)."""
        spec = self.refine_spec if self.cfg.utpl else None
        prompts = self.bank.text_prompt_stack(self.world.class_text[self.text_ids], spec)
        rows = self.text_enc.encode_tokens(self.tokens, prompts)
        if len(self.text_ids) == len(self.selected):
            return rows, rows
        return take(rows, slice(0, len(self.selected))), rows

    # ----------------------------------------------------------- visual side
    def _frozen_patch_feats(self, scenes, patches):
        missing = [i for i, s in enumerate(scenes)
                   if s["scene_id"] not in self._feat_cache]
        if missing:
            with no_grad():
                f = self.vis_enc.patch_features(Tensor(patches.data[missing])).data
            for j, i in enumerate(missing):
                self._feat_cache[scenes[i]["scene_id"]] = f[j]
        return np.stack([self._feat_cache[s["scene_id"]] for s in scenes])

    def encode_scenes(self, scenes):
        """Aligned patch grids [B, D, d_a] for a scene batch, prompts applied."""
        images = np.stack([s["image"] for s in scenes])
        patches = self.vis_enc.patchify(images)
        feats = None
        if self.cfg.vlm_guide:
            feats = self._frozen_patch_feats(scenes, patches)
        prompts = self.bank.visual_prompt_stack(len(scenes), feats)
        ctx = None
        if self.adapters is not None:
            det_lists = [[(d["box"], d["category"]) for d in s["detections"]
                          if d["score"] > self.cfg.det_threshold] for s in scenes]
            ctx = encoders.build_adapter_ctx(det_lists, self.cfg.d_p)
        _, grid = self.vis_enc.encode_deep(patches, prompts, self.adapters, ctx)
        return grid

    # ------------------------------------------------------------- training
    def forward_train(self, scenes):
        """Training-mode scores for a scene batch.

        Returns (scores [sum_q, n_verbs] graph tensor, stacked multi-hot
        targets, selected class rows). Scenes without candidate pairs add no
        rows; a batch with none at all returns (None, None, rows).
        """
        sel_rows, _ = self.class_rows()
        pair_sets = [head.candidate_pairs(s["detections"], self.cfg.det_threshold)
                     for s in scenes]
        keep = [i for i, p in enumerate(pair_sets) if len(p)]
        if not keep:
            return None, None, sel_rows
        grid = self.encode_scenes([scenes[i] for i in keep])
        score_blocks, target_blocks = [], []
        for j, i in enumerate(keep):
            pairs = pair_sets[i]
            emb = self.head.pair_embeddings(take(grid, j), pairs)
            logits = self.head.class_logits(emb, sel_rows)
            probs = head.action_probabilities(logits, self.align)
            score_blocks.append(head.training_scores(pairs.prior, probs,
                                                     self.cfg.tau_train))
            target_blocks.append(head.build_action_targets(
                pairs, scenes[i]["interactions"], self.world.n_verbs))
        return (cat(score_blocks, axis=0), np.concatenate(target_blocks, axis=0),
                sel_rows)

    # ------------------------------------------------------------- inference
    def predict_scenes(self, scenes, batch_size=None):
        """Flat prediction records over the full class table, gradient-free."""
        bs = batch_size or self.cfg.batch_size
        preds = []
        with no_grad():
            sel_rows, _ = self.class_rows()
            for start in range(0, len(scenes), bs):
                chunk = scenes[start:start + bs]
                pair_sets = [head.candidate_pairs(s["detections"],
                                                  self.cfg.det_threshold)
                             for s in chunk]
                keep = [i for i, p in enumerate(pair_sets) if len(p)]
                if not keep:
                    continue
                grid = self.encode_scenes([chunk[i] for i in keep])
                for j, i in enumerate(keep):
                    pairs = pair_sets[i]
                    emb = self.head.pair_embeddings(take(grid, j), pairs)
                    logits = self.head.class_logits(emb, sel_rows).data
                    act = head.inference_action_logits(logits, self.align)
                    preds.extend(head.scene_predictions(
                        pairs, act, self.world.classes, self.cfg.tau_infer,
                        chunk[i]["scene_id"]))
        return preds

    # ----------------------------------------------------------- bookkeeping
    def named_params(self):
        """Every trainable parameter, stable names, insertion-ordered."""
        out = dict(self.bank.named_params())
        out.update(self.head.named_params())
        if self.adapters is not None:
            for i, ad in enumerate(self.adapters):
                out.update(dict(ad.named_parameters(f"adapter.layer{i:02d}")))
        return out

    def frozen_params(self):
        return self.text_enc.named_parameters() + self.vis_enc.named_parameters()

    def frozen_checksum(self):
        """Live checksum of the frozen half; must never move during training."""
        return encoders.state_checksum(self.frozen_params())


def build_model(cfg, world, seed=None):
    """Load the frozen encoder from the world directory and assemble a model."""
    text_enc, vis_enc, digest = load_frozen_encoder(world.data_dir, cfg)
    rng = derive_rng(cfg.seed if seed is None else seed, "model.init")
    return HOIModel(cfg, world, text_enc, vis_enc, digest, rng)


class ZeroShotHOIDetector:
    """Estimator-style facade over the whole pipeline.

    Construction only stores parameters; ``fit`` loads the world, trains the
    prompt stack, and exposes the results through trailing-underscore
    attributes (``model_``, ``history_``, ``config_``, ``world_``).
    """

    def __init__(self, data_dir=None, mode="uv", seed=0, precision=32, **overrides):
        self.data_dir = data_dir
        self.mode = mode
        self.seed = seed
        self.precision = precision
        self.overrides = dict(overrides)

    # sklearn-style parameter plumbing, hand rolled to stay dependency-free
    def get_params(self, deep=True):
        out = {"data_dir": self.data_dir, "mode": self.mode, "seed": self.seed,
               "precision": self.precision}
        out.update(self.overrides)
        return out

    def set_params(self, **params):
        for key, value in params.items():
            if key in ("data_dir", "mode", "seed", "precision"):
                setattr(self, key, value)
            else:
                self.overrides[key] = value
        return self

    def _build_config(self):
        from .config import RunConfig
        return RunConfig(mode=self.mode, seed=self.seed, precision=self.precision,
                         **self.overrides).validate()

    def fit(self, X=None, y=None):
        """Train on the world's training split (or on the scene list X)."""
        from . import training
        if self.data_dir is None:
            raise ValueError("data_dir is required: point it at a generated world")
        cfg = self._build_config()
        world = load_world(self.data_dir, self.mode)
        model = build_model(cfg, world, seed=self.seed)
        scenes = world.train_scenes if X is None else list(X)
        self.history_ = training.train_model(model, scenes, cfg)
        self.model_ = model
        self.config_ = cfg
        self.world_ = world
        return self

    def predict(self, X=None):
        """Prediction records for the scene list X (default: test split)."""
        self._check_fitted()
        scenes = self.world_.test_scenes if X is None else list(X)
        return self.model_.predict_scenes(scenes)

    def score(self, X=None, y=None):
        """Mean average precision over the scene list X (default: test split)."""
        from .evaluate import evaluate_predictions, summarize
        self._check_fitted()
        scenes = self.world_.test_scenes if X is None else list(X)
        res = evaluate_predictions(self.predict(scenes), scenes, self.world_.classes)
        return summarize(res["ap"], res["n_gt"], self.world_.seen_ids,
                         self.world_.unseen_ids)["mAP"]

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this detector is not fitted yet; call fit() first")
