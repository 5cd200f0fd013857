"""Patch models: masking network, asymmetric encoder/decoder, linear head.

All forwards run per image on 2-D tensors (sequence x features). The encoder
only ever sees visible patches; the decoder rebuilds the full sequence with a
learned mask token and predicts pixels for the masked rows. The masking
network is self-contained: it owns a private patch-embedding projection and
never shares weights with the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor, add, add_bias, concat_cols, concat_rows, gather_rows, layer_norm,
    matmul, relu, reshape, scale, sigmoid, slice_cols, softmax_rows, tile_rows,
    transpose,
)


@dataclass(frozen=True)
class ModelDims:
    """Shape configuration shared by all four parameter sets."""

    image_side: int = 16
    channels: int = 1
    patch_size: int = 4
    emb_dim: int = 32
    dec_dim: int = 16
    enc_blocks: int = 2
    dec_blocks: int = 1
    heads: int = 2
    num_classes: int = 4
    mask_hidden: int = 64

    def __post_init__(self):
        if self.image_side % self.patch_size != 0:
            raise ValueError(
                f"image_side {self.image_side} not divisible by patch_size {self.patch_size}")
        if self.emb_dim % self.heads != 0 or self.dec_dim % self.heads != 0:
            raise ValueError(
                f"emb_dim {self.emb_dim} and dec_dim {self.dec_dim} must divide by heads {self.heads}")
        if self.num_patches < 2:
            raise ValueError(f"need at least 2 patches, got {self.num_patches}")
        for field in ("channels", "emb_dim", "dec_dim", "heads", "num_classes", "mask_hidden"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.enc_blocks < 0 or self.dec_blocks < 0:
            raise ValueError("block counts must be >= 0")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def patch_pixels(self) -> int:
        return self.channels * self.patch_size * self.patch_size


@dataclass
class ParamSet:
    """Named tensors for one role: 'E', 'D', 'C' or 'T'."""

    role: str
    params: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def items(self):
        return list(self.params.items())

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        # always copy: callers may hand us read-only views (mmap/frombuffer)
        for k, v in self.params.items():
            v.data = np.array(values[k], dtype=np.float64).reshape(v.shape)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    b = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-b, b, size=shape)


def _param(arr, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


def _zeros(shape, name):
    return _param(np.zeros(shape), name)


def _ones(shape, name):
    return _param(np.ones(shape), name)


def _block_params(rng, prefix: str, dim: int, out: dict) -> None:
    # pre-LN attention + 4x MLP; biases zero, gains one, weights xavier
    out[f"{prefix}.ln1.g"] = _ones(dim, f"{prefix}.ln1.g")
    out[f"{prefix}.ln1.b"] = _zeros(dim, f"{prefix}.ln1.b")
    for w in ("Wq", "Wk", "Wv", "Wo"):
        out[f"{prefix}.attn.{w}"] = _param(
            xavier_uniform(rng, dim, dim, (dim, dim)), f"{prefix}.attn.{w}")
        out[f"{prefix}.attn.{w.replace('W', 'b')}"] = _zeros(dim, f"{prefix}.attn.{w.replace('W', 'b')}")
    out[f"{prefix}.ln2.g"] = _ones(dim, f"{prefix}.ln2.g")
    out[f"{prefix}.ln2.b"] = _zeros(dim, f"{prefix}.ln2.b")
    hidden = 4 * dim
    out[f"{prefix}.mlp.W1"] = _param(xavier_uniform(rng, dim, hidden, (dim, hidden)), f"{prefix}.mlp.W1")
    out[f"{prefix}.mlp.b1"] = _zeros(hidden, f"{prefix}.mlp.b1")
    out[f"{prefix}.mlp.W2"] = _param(xavier_uniform(rng, hidden, dim, (hidden, dim)), f"{prefix}.mlp.W2")
    out[f"{prefix}.mlp.b2"] = _zeros(dim, f"{prefix}.mlp.b2")


def init_encoder(dims: ModelDims, rng: np.random.Generator) -> ParamSet:
    p: dict[str, Tensor] = {}
    pp, d, n = dims.patch_pixels, dims.emb_dim, dims.num_patches
    p["embed.W"] = _param(xavier_uniform(rng, pp, d, (pp, d)), "E.embed.W")
    p["embed.b"] = _zeros(d, "E.embed.b")
    p["pos"] = _zeros((n, d), "E.pos")
    for i in range(dims.enc_blocks):
        _block_params(rng, f"blk{i}", d, p)
    p["ln.g"] = _ones(d, "E.ln.g")
    p["ln.b"] = _zeros(d, "E.ln.b")
    return ParamSet("E", p)


def init_decoder(dims: ModelDims, rng: np.random.Generator) -> ParamSet:
    p: dict[str, Tensor] = {}
    d, dd, n, pp = dims.emb_dim, dims.dec_dim, dims.num_patches, dims.patch_pixels
    p["proj.W"] = _param(xavier_uniform(rng, d, dd, (d, dd)), "D.proj.W")
    p["proj.b"] = _zeros(dd, "D.proj.b")
    # the mask token draws from its own fan (a 1 x dec_dim projection)
    p["mask_token"] = _param(xavier_uniform(rng, 1, dd, (1, dd)), "D.mask_token")
    p["pos"] = _zeros((n, dd), "D.pos")
    for i in range(dims.dec_blocks):
        _block_params(rng, f"blk{i}", dd, p)
    p["ln.g"] = _ones(dd, "D.ln.g")
    p["ln.b"] = _zeros(dd, "D.ln.b")
    p["head.W"] = _param(xavier_uniform(rng, dd, pp, (dd, pp)), "D.head.W")
    p["head.b"] = _zeros(pp, "D.head.b")
    return ParamSet("D", p)


def init_head(dims: ModelDims, rng: np.random.Generator) -> ParamSet:
    d, k = dims.emb_dim, dims.num_classes
    return ParamSet("C", {
        "W": _param(xavier_uniform(rng, d, k, (d, k)), "C.W"),
        "b": _zeros(k, "C.b"),
    })


def init_masking(dims: ModelDims, rng: np.random.Generator) -> ParamSet:
    pp, d, n, h = dims.patch_pixels, dims.emb_dim, dims.num_patches, dims.mask_hidden
    return ParamSet("T", {
        "embed.W": _param(xavier_uniform(rng, pp, d, (pp, d)), "T.embed.W"),
        "embed.b": _zeros(d, "T.embed.b"),
        "W1": _param(xavier_uniform(rng, n * d, h, (n * d, h)), "T.W1"),
        "b1": _zeros(h, "T.b1"),
        "W2": _param(xavier_uniform(rng, h, n, (h, n)), "T.W2"),
        "b2": _zeros(n, "T.b2"),
    })


_ROLE_STREAM = {"E": 1, "D": 2, "C": 3, "T": 4}


def init_models(dims: ModelDims, seed: int):
    """Seeded init of all four sets; each role draws from its own substream."""
    rngs = {r: np.random.default_rng([seed, 0xA11CE, s]) for r, s in _ROLE_STREAM.items()}
    return (init_encoder(dims, rngs["E"]), init_decoder(dims, rngs["D"]),
            init_head(dims, rngs["C"]), init_masking(dims, rngs["T"]))


# ---------------------------------------------------------------------------
# patch layout


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(C, S, S) image -> (N, C*p*p) grid.

    Patches are ordered row-major over the grid; inside a patch, pixels are
    channel-major then row-major.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[1] != img.shape[2]:
        raise ValueError(f"patchify: expected (C, S, S), got {img.shape}")
    c, s, _ = img.shape
    if s % patch_size != 0:
        raise ValueError(f"patchify: side {s} not divisible by patch {patch_size}")
    g = s // patch_size
    x = img.reshape(c, g, patch_size, g, patch_size)
    x = x.transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(x.reshape(g * g, c * patch_size * patch_size))


def unpatchify(grid: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of patchify: (N, C*p*p) -> (C, S, S)."""
    grid = np.asarray(grid, dtype=np.float64)
    n, pp = grid.shape
    g = int(round(math.sqrt(n)))
    if g * g != n or pp != channels * patch_size * patch_size:
        raise ValueError(f"unpatchify: bad grid shape {grid.shape}")
    x = grid.reshape(g, g, channels, patch_size, patch_size)
    x = x.transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(x.reshape(channels, g * patch_size, g * patch_size))


# ---------------------------------------------------------------------------
# forwards


def _attention(p: ParamSet, prefix: str, x: Tensor, heads: int) -> Tensor:
    dim = x.shape[1]
    dh = dim // heads
    q = add_bias(matmul(x, p[f"{prefix}.attn.Wq"]), p[f"{prefix}.attn.bq"])
    k = add_bias(matmul(x, p[f"{prefix}.attn.Wk"]), p[f"{prefix}.attn.bk"])
    v = add_bias(matmul(x, p[f"{prefix}.attn.Wv"]), p[f"{prefix}.attn.bv"])
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        att = softmax_rows(scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dh)))
        outs.append(matmul(att, vh))
    o = outs[0] if heads == 1 else concat_cols(outs)
    return add_bias(matmul(o, p[f"{prefix}.attn.Wo"]), p[f"{prefix}.attn.bo"])


def masking_net_forward(t_set: ParamSet, grid: Tensor, dims: ModelDims) -> Tensor:
    """Per-patch probabilities in (0, 1); shape (N,).

    Pipeline: private patch embedding -> flatten all N embeddings into one
    vector -> linear -> relu -> linear -> sigmoid. Gradients flow to T only;
    callers treat the subsequent top-k selection as constant.
    """
    n, d = dims.num_patches, dims.emb_dim
    if grid.shape != (n, dims.patch_pixels):
        raise ValueError(f"masking_net_forward: grid shape {grid.shape}, expected {(n, dims.patch_pixels)}")
    emb = add_bias(matmul(grid, t_set["embed.W"]), t_set["embed.b"])
    flat = reshape(emb, (1, n * d))
    h = relu(add_bias(matmul(flat, t_set["W1"]), t_set["b1"]))
    logits = add_bias(matmul(h, t_set["W2"]), t_set["b2"])
    return reshape(sigmoid(logits), (n,))


def encoder_forward(e_set: ParamSet, grid: Tensor, visible_idx, dims: ModelDims) -> Tensor:
    """Tokens for the visible patches only: (|visible|, emb_dim)."""
    vis = np.asarray(visible_idx, dtype=np.int64)
    if vis.size < 1:
        raise ValueError("encoder_forward: empty visible set")
    if np.any(np.diff(vis) <= 0):
        raise ValueError("encoder_forward: visible_idx must be strictly ascending")
    if grid.shape[1] != dims.patch_pixels:
        raise ValueError(f"encoder_forward: patch dim {grid.shape[1]} != {dims.patch_pixels}")
    rows = gather_rows(grid, vis)
    tok = add_bias(matmul(rows, e_set["embed.W"]), e_set["embed.b"])
    tok = add(tok, gather_rows(e_set["pos"], vis))
    for i in range(dims.enc_blocks):
        tok = _pre_ln_block(e_set, f"blk{i}", tok, dims.heads)
    return layer_norm(tok, e_set["ln.g"], e_set["ln.b"])


def _pre_ln_block(p: ParamSet, prefix: str, x: Tensor, heads: int) -> Tensor:
    h = layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = add(x, _attention(p, prefix, h, heads))
    h = layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    m = add_bias(matmul(relu(add_bias(matmul(h, p[f"{prefix}.mlp.W1"]), p[f"{prefix}.mlp.b1"])),
                        p[f"{prefix}.mlp.W2"]), p[f"{prefix}.mlp.b2"])
    return add(x, m)


def decoder_forward(d_set: ParamSet, enc_tokens: Tensor, visible_idx, masked_idx,
                    dims: ModelDims) -> Tensor:
    """Predicted pixels for the masked patches: (|masked|, patch_pixels).

    The encoder tokens are projected to decoder width, a learned token fills
    every masked position, and the full length-N sequence (position order) is
    decoded. Output rows follow masked_idx order.
    """
    vis = np.asarray(visible_idx, dtype=np.int64)
    msk = np.asarray(masked_idx, dtype=np.int64)
    n = dims.num_patches
    if enc_tokens.shape[0] != vis.size:
        raise ValueError(f"decoder_forward: {enc_tokens.shape[0]} tokens for {vis.size} visible patches")
    if vis.size + msk.size != n or np.intersect1d(vis, msk).size:
        raise ValueError("decoder_forward: visible_idx and masked_idx must partition range(N)")
    proj = add_bias(matmul(enc_tokens, d_set["proj.W"]), d_set["proj.b"])
    filler = tile_rows(d_set["mask_token"], msk.size)
    stacked = concat_rows([proj, filler])  # visible rows first, then masked
    perm = np.empty(n, dtype=np.int64)
    perm[vis] = np.arange(vis.size)
    perm[msk] = vis.size + np.arange(msk.size)
    seq = add(gather_rows(stacked, perm), d_set["pos"])
    for i in range(dims.dec_blocks):
        seq = _pre_ln_block(d_set, f"blk{i}", seq, dims.heads)
    seq = layer_norm(seq, d_set["ln.g"], d_set["ln.b"])
    pix = add_bias(matmul(seq, d_set["head.W"]), d_set["head.b"])
    return gather_rows(pix, msk)


def head_forward(c_set: ParamSet, tokens: Tensor) -> Tensor:
    """Mean-pool tokens (no class token) and apply the single linear layer."""
    d = tokens.shape[1]
    pooled = reshape(tokens.mean(axis=0), (1, d))
    logits = add_bias(matmul(pooled, c_set["W"]), c_set["b"])
    return reshape(logits, (logits.shape[1],))


def classify_logits(e_set: ParamSet, c_set: ParamSet, grid: Tensor, dims: ModelDims) -> Tensor:
    """Full-visibility classification pass: every patch is a token."""
    all_idx = np.arange(dims.num_patches, dtype=np.int64)
    return head_forward(c_set, encoder_forward(e_set, grid, all_idx, dims))
