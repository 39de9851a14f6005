"""Frozen dual encoder with deep prompt slots.

A K-layer text transformer and a K-layer visual patch transformer share an
aligned output space. Both accept per-layer prompt tokens appended after the
word tokens (text) or after the class and patch tokens (visual): layers 1..N
take the externally supplied prompt set for that layer at their input, layer
N+1 receives the raw set N again (so the outgoing prompt activations of every
layer <= N are discarded), and later layers propagate prompt slots normally.

The encoder core is pretrained once per generated world on a caption-image
contrastive task and then frozen; only adapters and prompts learn downstream.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

from . import engine
from .engine import Tensor, cat, gather_rows, gelu, l2_normalize, layer_norm, matmul
from .engine import broadcast_to, multi_head_attention, reduce_mean, reduce_sum, softmax, take

CKPT_MAGIC = b"EZHO"
CKPT_VERSION = 1


def _normal(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class TransformerLayer:
    """Pre-LN self-attention block with zero-init residual gates.

    x + g1*MHA(LN(x)), then x + g2*FFN(LN(x)). The scalar gates start at zero
    so a deep stack is the identity at initialization and layers switch on as
    training needs them; without this, a from-scratch 12-layer stack takes
    far more contrastive steps than the fixture budget allows.
    """

    def __init__(self, dim, n_heads, rng, dtype, ffn_mult=2, resid_scale=1.0):
        self.dim = dim
        self.n_heads = n_heads
        std = dim ** -0.5  # fan-in scaled, or attention starts near-uniform
        self.ln1_g = _ones(dim, dtype)
        self.ln1_b = _zeros(dim, dtype)
        self.wq = _normal(rng, (dim, dim), std, dtype)
        self.wk = _normal(rng, (dim, dim), std, dtype)
        self.wv = _normal(rng, (dim, dim), std, dtype)
        self.bq = _zeros(dim, dtype)
        self.bk = _zeros(dim, dtype)
        self.bv = _zeros(dim, dtype)
        self.wo = _normal(rng, (dim, dim), std * resid_scale, dtype)
        self.bo = _zeros(dim, dtype)
        self.gate1 = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        self.ln2_g = _ones(dim, dtype)
        self.ln2_b = _zeros(dim, dtype)
        hid = ffn_mult * dim
        self.w1 = _normal(rng, (dim, hid), std, dtype)
        self.b1 = _zeros(hid, dtype)
        self.w2 = _normal(rng, (hid, dim), hid ** -0.5 * resid_scale, dtype)
        self.b2 = _zeros(dim, dtype)
        self.gate2 = Tensor(np.zeros((), dtype=dtype), requires_grad=True)

    def __call__(self, x):
        h = layer_norm(x, self.ln1_g, self.ln1_b)
        q = matmul(h, self.wq) + self.bq
        k = matmul(h, self.wk) + self.bk
        v = matmul(h, self.wv) + self.bv
        x = x + multi_head_attention(q, k, v, self.wo, self.n_heads, self.bo) * self.gate1
        h = layer_norm(x, self.ln2_g, self.ln2_b)
        return x + (matmul(gelu(matmul(h, self.w1) + self.b1), self.w2) + self.b2) * self.gate2

    def named_parameters(self, prefix):
        names = ("ln1_g", "ln1_b", "wq", "wk", "wv", "bq", "bk", "bv", "wo", "bo",
                 "gate1", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2", "gate2")
        return [(f"{prefix}.{n}", getattr(self, n)) for n in names]


def run_prompt_stack(layers, base_seq, prompts, n_keep, layer_hook=None):
    """Drive a layer stack with per-layer prompt substitution.

    base_seq: [B, n_keep, d] non-prompt tokens. prompts: list of N tensors
    [B, p, d], possibly empty. layer_hook(i, seq) may transform the output of
    layer i (0-based) before the next substitution.
    """
    n = len(prompts)
    if n > len(layers):
        raise ValueError(f"{n} prompt layers for a {len(layers)}-layer encoder")

    def words(seq):
        return take(seq, (slice(None), slice(0, n_keep)))

    seq = base_seq if n == 0 else cat([base_seq, prompts[0]], axis=1)
    for i, layer in enumerate(layers):
        if 1 <= i <= n - 1:
            seq = cat([words(seq), prompts[i]], axis=1)
        elif i == n and n > 0:
            seq = cat([words(seq), prompts[n - 1]], axis=1)
        seq = layer(seq)
        if layer_hook is not None:
            seq = layer_hook(i, seq)
    return seq


class TextEncoder:
    def __init__(self, vocab_size, d_t, d_a, n_layers, n_heads, max_len, rng, dtype=np.float64):
        self.d_t = d_t
        self.d_a = d_a
        self.n_layers = n_layers
        self.tok_emb = _normal(rng, (vocab_size, d_t), 0.5, dtype)
        self.pos_emb = _normal(rng, (max_len, d_t), 0.05, dtype)
        resid = 1.0 / np.sqrt(2.0 * n_layers)
        self.layers = [TransformerLayer(d_t, n_heads, rng, dtype, resid_scale=resid)
                       for _ in range(n_layers)]
        self.ln_f_g = _ones(d_t, dtype)
        self.ln_f_b = _zeros(d_t, dtype)
        self.proj = _normal(rng, (d_t, d_a), d_t ** -0.5, dtype)

    def embed(self, tokens):
        """tokens: int array [C, P] -> [C, P, d_t] with positional offsets."""
        tokens = np.asarray(tokens)
        emb = gather_rows(self.tok_emb, tokens)
        pos = take(self.pos_emb, slice(0, tokens.shape[1]))
        return emb + pos

    def encode_deep(self, word_seq, prompts):
        """word_seq [C, P, d_t], prompts list[N] of [C, p, d_t] -> unit rows [C, d_a].

        The class feature is read at the final word-token position (index P-1),
        before any appended prompt slots.
        """
        n_keep = word_seq.shape[1]
        seq = run_prompt_stack(self.layers, word_seq, prompts, n_keep)
        h = layer_norm(seq, self.ln_f_g, self.ln_f_b)
        eos = take(h, (slice(None), n_keep - 1))
        return l2_normalize(matmul(eos, self.proj))

    def encode_tokens(self, tokens, prompts=()):
        return self.encode_deep(self.embed(tokens), list(prompts))

    def named_parameters(self):
        out = [("text.tok_emb", self.tok_emb), ("text.pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"text.layer{i:02d}")
        out += [("text.ln_f_g", self.ln_f_g), ("text.ln_f_b", self.ln_f_b), ("text.proj", self.proj)]
        return out


class VisualEncoder:
    """Patch transformer over a d_p x d_p grid with a class token."""

    def __init__(self, d_v, d_a, n_layers, n_heads, d_p, patch_px, rng, dtype=np.float64):
        self.d_v = d_v
        self.d_a = d_a
        self.n_layers = n_layers
        self.d_p = d_p
        self.patch_px = patch_px
        self.n_patches = d_p * d_p
        self.patch_w = _normal(rng, (patch_px * patch_px, d_v), (patch_px * patch_px) ** -0.5, dtype)
        self.patch_b = _zeros(d_v, dtype)
        self.cls_tok = _normal(rng, (1, d_v), 0.5, dtype)
        self.pos_emb = _normal(rng, (1 + self.n_patches, d_v), 0.05, dtype)
        resid = 1.0 / np.sqrt(2.0 * n_layers)
        self.layers = [TransformerLayer(d_v, n_heads, rng, dtype, resid_scale=resid)
                       for _ in range(n_layers)]
        self.ln_p_g = _ones(d_v, dtype)
        self.ln_p_b = _zeros(d_v, dtype)
        self.proj = _normal(rng, (d_v, d_a), d_v ** -0.5, dtype)

    def patchify(self, images):
        """Pixel arrays [B, H, W] -> constant patch matrix [B, D, patch_px^2]."""
        images = np.asarray(images)
        b = images.shape[0]
        g = self.patch_px
        d = self.d_p
        x = images.reshape(b, d, g, d, g).transpose(0, 1, 3, 2, 4).reshape(b, d * d, g * g)
        return Tensor(x.astype(self.patch_w.dtype))

    def _base_seq(self, patches):
        b = patches.shape[0]
        emb = matmul(patches, self.patch_w) + self.patch_b
        cls = broadcast_to(self.cls_tok.reshape((1, 1, self.d_v)), (b, 1, self.d_v))
        return cat([cls, emb], axis=1) + self.pos_emb

    def encode_deep(self, patches, prompts, adapters=None, adapter_ctx=None):
        """patches [B, D, g^2]; prompts list[N] of [B, p, d_v].

        adapters: optional list of per-layer callables applied to the patch
        slots of every layer output (class token and prompt slots untouched).
        Returns (cls_feature [B, d_a] unit rows, patch_grid [B, D, d_a]).
        """
        n_keep = 1 + self.n_patches

        hook = None
        if adapters is not None:
            def hook(i, seq):
                body = take(seq, (slice(None), slice(1, n_keep)))
                body = adapters[i](body, adapter_ctx)
                head = take(seq, (slice(None), slice(0, 1)))
                if seq.shape[1] > n_keep:
                    tail = take(seq, (slice(None), slice(n_keep, seq.shape[1])))
                    return cat([head, body, tail], axis=1)
                return cat([head, body], axis=1)

        seq = run_prompt_stack(self.layers, self._base_seq(patches), prompts, n_keep, hook)
        h = layer_norm(seq, self.ln_p_g, self.ln_p_b)
        cls = l2_normalize(matmul(take(h, (slice(None), 0)), self.proj))
        grid = matmul(take(h, (slice(None), slice(1, n_keep))), self.proj)
        return cls, grid

    def patch_features(self, patches):
        """Final-layer patch states [B, D, d_v], no prompts, no adapters, no ln/proj."""
        seq = run_prompt_stack(self.layers, self._base_seq(patches), [], 1 + self.n_patches)
        return take(seq, (slice(None), slice(1, 1 + self.n_patches)))

    def named_parameters(self):
        out = [("vis.patch_w", self.patch_w), ("vis.patch_b", self.patch_b),
               ("vis.cls_tok", self.cls_tok), ("vis.pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"vis.layer{i:02d}")
        out += [("vis.ln_p_g", self.ln_p_g), ("vis.ln_p_b", self.ln_p_b), ("vis.proj", self.proj)]
        return out


class BoxAdapter:
    """Residual bottleneck over patch features inside detected boxes.

    Conditioned on a sinusoidal embedding of box geometry plus a learned
    category embedding. The up-projection starts at zero, so a fresh adapter
    is an exact identity.
    """

    GEO_FREQS = 4

    def __init__(self, d_v, n_categories, rng, dtype, cat_dim=8, hidden=None):
        self.d_v = d_v
        self.cat_dim = cat_dim
        self.geo_dim = 4 * 2 * self.GEO_FREQS
        self.hidden = hidden or d_v // 2
        cond = self.geo_dim + cat_dim
        self.cat_emb = _normal(rng, (n_categories, cat_dim), 0.02, dtype)
        self.w1 = _normal(rng, (d_v + cond, self.hidden), 0.02, dtype)
        self.b1 = _zeros(self.hidden, dtype)
        self.w2 = _zeros((self.hidden, d_v), dtype)

    def __call__(self, patches, ctx):
        """patches [B, D, d_v]; ctx from build_adapter_ctx (mask/geo/categories)."""
        if ctx is None or ctx.n_max == 0:
            return patches
        b, d, _ = patches.shape
        m = ctx.n_max
        cats = gather_rows(self.cat_emb, ctx.categories)            # [B, M, cat_dim]
        cond = cat([Tensor(ctx.geo.astype(patches.dtype)), cats], axis=-1)
        cond_t = broadcast_to(cond.reshape((b, m, 1, cond.shape[-1])), (b, m, d, cond.shape[-1]))
        e_t = broadcast_to(patches.reshape((b, 1, d, self.d_v)), (b, m, d, self.d_v))
        h = gelu(matmul(cat([e_t, cond_t], axis=-1), self.w1) + self.b1)
        mask = Tensor(np.broadcast_to(ctx.mask, (b, m, d, self.d_v)).astype(patches.dtype))
        resid = matmul(h, self.w2) * mask
        return patches + reduce_sum(resid, axis=1)

    def named_parameters(self, prefix):
        return [(f"{prefix}.cat_emb", self.cat_emb), (f"{prefix}.w1", self.w1),
                (f"{prefix}.b1", self.b1), (f"{prefix}.w2", self.w2)]


class AdapterCtx:
    """Constant per-batch detection context for BoxAdapter."""

    def __init__(self, mask, geo, categories, n_max):
        self.mask = mask              # [B, M, D, 1] float 0/1
        self.geo = geo                # [B, M, geo_dim]
        self.categories = categories  # [B, M] int
        self.n_max = n_max


def sinusoid_box(box, d_p, n_freqs=BoxAdapter.GEO_FREQS):
    """Sinusoidal features of normalized (cx, cy, w, h)."""
    x1, y1, x2, y2 = box
    vals = np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1]) / d_p
    freqs = 2.0 ** np.arange(n_freqs) * np.pi
    ang = vals[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).reshape(-1)


def patch_box_mask(box, d_p):
    """0/1 over the patch grid: patches whose centers fall inside the box."""
    centers = np.arange(d_p) + 0.5
    x1, y1, x2, y2 = box
    inx = (centers >= x1) & (centers <= x2)
    iny = (centers >= y1) & (centers <= y2)
    return (iny[:, None] & inx[None, :]).astype(np.float64).reshape(-1)


def build_adapter_ctx(det_lists, d_p, geo_dim=4 * 2 * BoxAdapter.GEO_FREQS):
    """det_lists: per scene, list of (box, category). Pads to the max count."""
    b = len(det_lists)
    n_max = max((len(d) for d in det_lists), default=0)
    if n_max == 0:
        return AdapterCtx(np.zeros((b, 0, d_p * d_p, 1)), np.zeros((b, 0, geo_dim)),
                          np.zeros((b, 0), dtype=np.int64), 0)
    mask = np.zeros((b, n_max, d_p * d_p, 1))
    geo = np.zeros((b, n_max, geo_dim))
    cats = np.zeros((b, n_max), dtype=np.int64)
    for i, dets in enumerate(det_lists):
        for j, (box, category) in enumerate(dets):
            mask[i, j, :, 0] = patch_box_mask(box, d_p)
            geo[i, j] = sinusoid_box(box, d_p)
            cats[i, j] = category
    return AdapterCtx(mask, geo, cats, n_max)


# -------------------------------------------------------------- persistence
def state_checksum(named_params):
    """sha256 over names and canonical float64 bytes, order as given."""
    h = hashlib.sha256()
    for name, p in named_params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def save_params(path, named_params, header):
    """Binary little-endian record: header ints, parameter blobs, sha256 trailer."""
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    items = list(header.items())
    blob += struct.pack("<I", len(items))
    for key, value in items:
        kb = key.encode()
        blob += struct.pack("<H", len(kb)) + kb + struct.pack("<q", int(value))
    named_params = list(named_params)
    blob += struct.pack("<I", len(named_params))
    for name, p in named_params:
        nb = name.encode()
        # asarray, not ascontiguousarray: the latter promotes 0-dim to (1,)
        arr = np.asarray(p.data, dtype="<f8", order="C")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_params(path):
    """Returns (header dict, {name: float64 array}); refuses corrupt files."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 40 or blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch, file is corrupt")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n_header,) = struct.unpack_from("<I", body, off)
    off += 4
    header = {}
    for _ in range(n_header):
        (klen,) = struct.unpack_from("<H", body, off)
        off += 2
        key = body[off:off + klen].decode()
        off += klen
        (val,) = struct.unpack_from("<q", body, off)
        off += 8
        header[key] = val
    (n_params,) = struct.unpack_from("<I", body, off)
    off += 4
    params = {}
    for _ in range(n_params):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        params[name] = arr.astype(np.float64)
    return header, params


def apply_state(named_params, state, dtype):
    for name, p in named_params:
        if name not in state:
            raise ValueError(f"checkpoint missing parameter {name}")
        if tuple(state[name].shape) != p.shape:
            raise ValueError(f"{name}: checkpoint shape {state[name].shape} vs model {p.shape}")
        p.data = state[name].astype(dtype)


def freeze(named_params):
    for _, p in named_params:
        p.requires_grad = False


# -------------------------------------------------------------- pretraining
def pretrain_dual_encoder(text_enc, vis_enc, captions, patch_sets, steps, batch_size, lr, seed):
    """Symmetric InfoNCE over (caption, image) pairs; returns per-step losses.

    captions: int array [n, P]; patch_sets: float array [n, D, g^2]. Both
    encoders are left trainable during this call; freeze afterwards.
    """
    rng = np.random.default_rng(seed)
    n = captions.shape[0]
    params = text_enc.named_parameters() + vis_enc.named_parameters()
    dtype = text_enc.tok_emb.dtype
    log_scale = Tensor(np.array(np.log(10.0), dtype=dtype), requires_grad=True)
    opt = engine.AdamW([p for _, p in params] + [log_scale], lr=lr, weight_decay=1e-2)
    # duplicate captions inside a batch are false negatives for InfoNCE, so
    # draw each batch over distinct captions, one random instance of each
    groups = {}
    for i in range(n):
        groups.setdefault(captions[i].tobytes(), []).append(i)
    groups = list(groups.values())
    losses = []
    for _ in range(steps):
        picks = rng.choice(len(groups), size=min(batch_size, len(groups)), replace=False)
        idx = np.array([groups[g][rng.integers(len(groups[g]))] for g in picks])
        b = idx.size
        t_feat = text_enc.encode_tokens(captions[idx])
        i_feat, _ = vis_enc.encode_deep(Tensor(patch_sets[idx].astype(dtype)), [])
        logits = matmul(t_feat, i_feat.transpose((1, 0))) * engine.exp(log_scale)
        diag = np.arange(b) * b + np.arange(b)
        loss_t = -reduce_mean(engine.log(gather_rows(softmax(logits, axis=-1).reshape(-1), diag)))
        loss_i = -reduce_mean(engine.log(gather_rows(softmax(logits.transpose((1, 0)), axis=-1).reshape(-1), diag)))
        loss = (loss_t + loss_i) * 0.5
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
