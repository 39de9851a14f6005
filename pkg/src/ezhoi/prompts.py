"""Learnable prompt bank with cross-attention guidance.

One shared set of visual-space prompt tokens per prompt depth is the only
free text-side capacity; class identity enters through the word tokens of
each class caption and through guidance. Three guidance paths, all built as
bottleneck cross-attention residuals whose up-projection starts at zero so a
fresh bank is exactly the unguided one:

  * class-text guidance: per-class text fixture row attends into the
    projected prompts before they reach the text encoder,
  * image guidance: frozen patch features of the current image attend into
    the visual prompts before they reach the visual encoder,
  * unseen refinement: prompts of an unseen class attend over its seen-to-
    unseen disparity rows plus the prompts of its most related seen class
    and its own, leaving seen classes untouched.

Guidance context rows are plain arrays (never graph nodes), so no gradient
can reach the frozen fixtures by construction.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .engine import (Tensor, broadcast_to, cat, gather_rows, matmul,
                     multi_head_attention, reshape, scatter_rows)


class GuidanceAdapter:
    """Residual bottleneck cross-attention: x + Attn(q=x W_down, kv=ctx W_down) W_up.

    One shared down-projection maps both the refined sequence and its context
    into the bottleneck; the attention output is lifted back by w_up, which is
    zero at init and carries no bias, so a fresh adapter is an exact identity
    regardless of the context it is handed. Query and context must share their
    feature width.
    """

    def __init__(self, d_model, d_down, rng, dtype=np.float64):
        self.d_down = d_down
        self.w_down = Tensor(rng.normal(0.0, 0.02, size=(d_model, d_down)).astype(dtype),
                             requires_grad=True)
        self.w_up = Tensor(np.zeros((d_down, d_model), dtype=dtype), requires_grad=True)

    def __call__(self, x, ctx):
        q = matmul(x, self.w_down)
        kv = matmul(ctx, self.w_down)
        return x + multi_head_attention(q, kv, kv, self.w_up, n_heads=1)

    def named_params(self, prefix):
        return {f"{prefix}.w_down": self.w_down, f"{prefix}.w_up": self.w_up}


@dataclasses.dataclass
class RefineSpec:
    """Which rows of a class batch are unseen, and what each attends over."""
    unseen_pos: np.ndarray   # [n_u] row indices into the class batch
    seen_pos: np.ndarray     # [n_u] row index of each one's related seen class
    disparity: np.ndarray    # [n_u, m, d_t] frozen direction rows


def build_refine_context(x, spec, dtype):
    """Per-unseen-row context: disparity rows, related seen prompts, own prompts."""
    h_u = gather_rows(x, spec.unseen_pos)
    h_s = gather_rows(x, spec.seen_pos)
    disp = Tensor(np.asarray(spec.disparity, dtype=dtype))
    return h_u, cat([disp, h_s, h_u], axis=1)


class GuidedPromptBank:
    """Deep prompt sets for both encoders, specialized per class and per image."""

    def __init__(self, cfg, rng):
        dtype = cfg.dtype
        p, n = cfg.n_prompt_tokens, cfg.n_prompt_layers
        d_down = max(1, cfg.d_t // 4)
        self.p, self.n_layers = p, n
        self.d_v, self.d_t = cfg.d_v, cfg.d_t
        self.dtype = dtype
        self.use_llm = cfg.llm_guide
        self.use_vlm = cfg.vlm_guide
        self.use_utpl = cfg.utpl

        def t(a):
            return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

        self.base = [t(rng.normal(0.0, 0.02, size=(p, cfg.d_v))) for _ in range(n)]
        self.proj_w = [t(rng.normal(0.0, 0.02, size=(cfg.d_v, cfg.d_t))) for _ in range(n)]
        self.proj_b = [t(np.zeros(cfg.d_t)) for _ in range(n)]
        self.llm_adapters = ([GuidanceAdapter(cfg.d_t, d_down, rng, dtype)
                              for _ in range(n)] if self.use_llm else [])
        self.vlm_adapters = ([GuidanceAdapter(cfg.d_v, d_down, rng, dtype)
                              for _ in range(n)] if self.use_vlm else [])
        self.utpl_adapter = (GuidanceAdapter(cfg.d_t, d_down, rng, dtype)
                             if self.use_utpl else None)

    # -- text side ---------------------------------------------------------

    def text_prompt_stack(self, class_text, refine_spec=None):
        """Prompt sets for a batch of classes.

        class_text: [n_classes, d_t] frozen per-class text rows (guidance
        context only; pass even when guidance is off so the batch size is
        known). Returns a list of n_layers tensors [n_classes, p, d_t].
        """
        class_text = np.asarray(class_text)
        n_cls = class_text.shape[0]
        ctx = Tensor(class_text[:, None, :].astype(self.dtype)) if self.use_llm else None
        stacks = []
        for i in range(self.n_layers):
            proj = matmul(self.base[i], self.proj_w[i]) + self.proj_b[i]
            x = broadcast_to(reshape(proj, (1, self.p, self.d_t)),
                             (n_cls, self.p, self.d_t))
            if self.use_llm:
                x = self.llm_adapters[i](x, ctx)
            if self.use_utpl and refine_spec is not None and len(refine_spec.unseen_pos):
                h_u, kv = build_refine_context(x, refine_spec, self.dtype)
                x = scatter_rows(x, refine_spec.unseen_pos, self.utpl_adapter(h_u, kv))
            stacks.append(x)
        return stacks

    # -- visual side -------------------------------------------------------

    def visual_prompt_stack(self, batch_size, patch_feats=None):
        """Prompt sets for a batch of images.

        patch_feats: [B, n_patches, d_v] frozen features of the same images
        (required when image guidance is on). Returns a list of n_layers
        tensors [B, p, d_v].
        """
        ctx = None
        if self.use_vlm:
            if patch_feats is None:
                raise ValueError("image guidance is on but no patch features were given")
            ctx = Tensor(np.asarray(patch_feats, dtype=self.dtype))
        stacks = []
        for i in range(self.n_layers):
            x = broadcast_to(reshape(self.base[i], (1, self.p, self.d_v)),
                             (batch_size, self.p, self.d_v))
            if self.use_vlm:
                x = self.vlm_adapters[i](x, ctx)
            stacks.append(x)
        return stacks

    # -- bookkeeping -------------------------------------------------------

    def named_params(self):
        out = {}
        for i in range(self.n_layers):
            out[f"prompt.base.{i}"] = self.base[i]
            out[f"prompt.proj_w.{i}"] = self.proj_w[i]
            out[f"prompt.proj_b.{i}"] = self.proj_b[i]
        for i, ad in enumerate(self.llm_adapters):
            out.update(ad.named_params(f"prompt.llm.{i}"))
        for i, ad in enumerate(self.vlm_adapters):
            out.update(ad.named_params(f"prompt.vlm.{i}"))
        if self.utpl_adapter is not None:
            out.update(self.utpl_adapter.named_params("prompt.utpl"))
        return out


def select_related_seen(class_text, seen_ids, unseen_ids):
    """Most related seen class for each unseen one, by text-row dot product.

    Ties resolve to the lowest seen class id. Returns {unseen_id: seen_id}.
    """
    f = np.asarray(class_text)
    seen = np.asarray(sorted(seen_ids), dtype=int)
    if seen.size == 0:
        raise ValueError("no seen classes to relate against")
    out = {}
    for u in sorted(unseen_ids):
        sims = f[seen] @ f[int(u)]
        out[int(u)] = int(seen[int(np.argmax(sims))])
    return out


def make_refine_spec(batch_class_ids, related, disparity, d_t, n_disparity):
    """RefineSpec for one class batch; related seen classes must be present.

    batch_class_ids: ordered class ids in the text batch. related: map
    unseen id -> seen id. disparity: map unseen id -> [m, d_t] rows.
    """
    pos = {int(c): i for i, c in enumerate(batch_class_ids)}
    u_pos, s_pos, rows = [], [], []
    for u, s in sorted(related.items()):
        if u not in pos:
            continue
        if s not in pos:
            raise ValueError(f"related seen class {s} missing from text batch")
        u_pos.append(pos[u])
        s_pos.append(pos[s])
        if u not in disparity:
            raise ValueError(f"no disparity rows for unseen class {u}")
        d = np.asarray(disparity[u], dtype=np.float64)
        if d.shape != (n_disparity, d_t):
            raise ValueError(f"disparity rows for class {u} have shape {d.shape}, "
                             f"want {(n_disparity, d_t)}")
        rows.append(d)
    if not u_pos:
        return RefineSpec(np.zeros(0, dtype=int), np.zeros(0, dtype=int),
                          np.zeros((0, n_disparity, d_t)))
    return RefineSpec(np.asarray(u_pos, dtype=int), np.asarray(s_pos, dtype=int),
                      np.stack(rows))
