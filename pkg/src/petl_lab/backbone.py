"""Scaled-down 3D shifted-window video transformer.

A video clip ``(t, h, w, 3)`` is cut into non-overlapping spatio-temporal
patches which become tokens. Stages of transformer blocks run windowed
multi-head self-attention with a learnable relative-position bias; blocks
alternate between an aligned window grid and one shifted by half a window.
Between stages a 2x2 spatial patch merge halves the grid and grows the
channel dimension. A final layer norm, global average pool, and fully
connected head produce class logits.

Shifted windows are realized by re-binning tokens into the offset grid:
windows keep only the tokens that actually exist, so boundary windows are
simply smaller and no attention masking is required. The window *count*
matches the padded-grid convention (``ceil((extent + shift) / window)``).

Fine-tuning modules plug in through a per-block hooks object (see
:mod:`petl_lab.petl`); the backbone only defines the call surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, GeometryError, ShapeError
from .registry import ParameterRegistry
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Backbone hyperparameters.

    ``input_size`` is (frames, height, width); clips carry 3 channels.
    ``embed_dims`` / ``blocks_per_stage`` / ``heads_per_stage`` are parallel
    per-stage lists. ``window_size`` is (temporal, spatial, spatial); the
    shifted grid is offset by half a window in every axis (floor division).
    """

    input_size: tuple[int, int, int] = (8, 32, 32)
    patch_size: tuple[int, int, int] = (2, 4, 4)
    embed_dims: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (1, 1, 2, 1)
    heads_per_stage: tuple[int, ...] = (2, 2, 4, 4)
    window_size: tuple[int, int, int] = (4, 4, 4)
    ffn_ratio: int = 4
    num_classes: int = 4
    layer_norm_eps: float = 1e-5
    in_channels: int = 3

    @property
    def num_stages(self) -> int:
        return len(self.embed_dims)

    @property
    def shift(self) -> tuple[int, int, int]:
        p, m, m2 = self.window_size
        return (p // 2, m // 2, m2 // 2)

    @property
    def patch_volume(self) -> int:
        pt, ph, pw = self.patch_size
        return pt * ph * pw * self.in_channels

    def token_grid(self) -> tuple[int, int, int]:
        """Token grid after patch embedding; raises if extents do not divide."""
        t, h, w = self.input_size
        pt, ph, pw = self.patch_size
        if t % pt or h % ph or w % pw:
            raise GeometryError(
                f"input {self.input_size} not divisible by patch {self.patch_size}")
        return (t // pt, h // ph, w // pw)

    def stage_grids(self) -> list[tuple[int, int, int]]:
        """Token grid entering each stage (spatial extents halve at merges)."""
        grids = [self.token_grid()]
        for i in range(self.num_stages - 1):
            gt, gh, gw = grids[-1]
            if gh % 2 or gw % 2:
                raise GeometryError(
                    f"stage {i} grid {(gt, gh, gw)} has odd spatial extents; cannot merge")
            grids.append((gt, gh // 2, gw // 2))
        return grids

    def validate(self) -> None:
        n = self.num_stages
        if not (len(self.blocks_per_stage) == len(self.heads_per_stage) == n):
            raise ConfigError("embed_dims, blocks_per_stage, heads_per_stage lengths differ")
        for d, heads in zip(self.embed_dims, self.heads_per_stage):
            if d % heads:
                raise ConfigError(f"stage dim {d} not divisible by {heads} heads")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError("every stage needs at least one block")
        if any(x < 1 for x in self.window_size) or any(x < 1 for x in self.patch_size):
            raise ConfigError("window and patch extents must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.ffn_ratio < 1:
            raise ConfigError("ffn_ratio must be >= 1")
        self.stage_grids()


SWIN_MICRO = ModelConfig()

SWIN_B = ModelConfig(
    input_size=(8, 224, 224),
    patch_size=(2, 4, 4),
    embed_dims=(128, 256, 512, 1024),
    blocks_per_stage=(2, 2, 18, 2),
    heads_per_stage=(4, 8, 16, 32),
    window_size=(8, 7, 7),
    num_classes=174,
)


def bias_table_entries(window: tuple[int, int, int]) -> int:
    """Number of distinct relative offsets inside one window."""
    p, m1, m2 = window
    return (2 * p - 1) * (2 * m1 - 1) * (2 * m2 - 1)


def window_grid_counts(grid: tuple[int, int, int], window: tuple[int, int, int],
                       shifted: bool) -> tuple[int, int, int]:
    """Windows along each axis; shifted grids gain the half-window boundary row."""
    shift = (window[0] // 2, window[1] // 2, window[2] // 2) if shifted else (0, 0, 0)
    return tuple(-(-(g + s) // w) for g, s, w in zip(grid, shift, window))


class WindowLayout:
    """Partition of a token grid into attention windows.

    Every token index lands in exactly one window. ``windows[w]`` holds flat
    token indices in raster order, ``coords[w]`` their (t, h, w) grid
    coordinates; ``bias_index[w]`` maps each in-window token pair to its row
    in the relative-position bias table. ``inverse_perm`` undoes the
    window-major concatenation of per-window outputs.
    """

    def __init__(self, grid: tuple[int, int, int], window: tuple[int, int, int],
                 shifted: bool):
        if any(g < 1 for g in grid):
            raise GeometryError(f"empty token grid {grid}")
        self.grid = tuple(grid)
        self.window = tuple(window)
        self.shifted = bool(shifted)
        self.shift = (window[0] // 2, window[1] // 2, window[2] // 2) if shifted else (0, 0, 0)

        gt, gh, gw = self.grid
        coords = np.stack(np.meshgrid(
            np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij"),
            axis=-1).reshape(-1, 3)
        bins = (coords + np.array(self.shift)) // np.array(self.window)
        counts = window_grid_counts(self.grid, self.window, shifted)
        key = (bins[:, 0] * counts[1] + bins[:, 1]) * counts[2] + bins[:, 2]

        order = np.argsort(key, kind="stable")  # stable: raster order within a window
        boundaries = np.flatnonzero(np.diff(key[order])) + 1
        groups = np.split(order, boundaries)
        if len(groups) != int(np.prod(counts)):
            raise GeometryError("window partition produced an empty window")

        self.window_counts = counts
        self.windows: list[np.ndarray] = [g.astype(np.intp) for g in groups]
        self.coords: list[np.ndarray] = [coords[g] for g in groups]
        perm = np.concatenate(self.windows)
        self.inverse_perm = np.argsort(perm, kind="stable").astype(np.intp)

        p, m1, m2 = self.window
        span_h, span_w = 2 * m1 - 1, 2 * m2 - 1
        self.bias_index: list[np.ndarray] = []
        for c in self.coords:
            delta = c[:, None, :] - c[None, :, :]
            flat = ((delta[..., 0] + p - 1) * span_h + (delta[..., 1] + m1 - 1)) \
                * span_w + (delta[..., 2] + m2 - 1)
            self.bias_index.append(flat)

    @property
    def window_count(self) -> int:
        return len(self.windows)

    def sizes(self) -> list[int]:
        return [len(w) for w in self.windows]


def window_partition(grid: tuple[int, int, int], window: tuple[int, int, int],
                     shifted: bool) -> WindowLayout:
    """Build the (possibly shifted) window partition of a token grid."""
    return WindowLayout(grid, window, shifted)


@dataclass
class AttentionWeights:
    """Projection weights of one windowed attention module."""

    n_heads: int
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    bias_table: Tensor  # (bias_table_entries(window), n_heads)


@dataclass
class AttentionExtras:
    """Per-block attention modifications supplied by fine-tuning hooks.

    ``extra_k`` / ``extra_v`` are learnable rows prepended to every window's
    keys/values (token-dimension concat). ``add_q/k/v`` are full-grid additive
    corrections, already scaled, gathered per window alongside the tokens.
    """

    extra_k: Tensor | None = None
    extra_v: Tensor | None = None
    add_q: Tensor | None = None
    add_k: Tensor | None = None
    add_v: Tensor | None = None


def bias_view(weights: AttentionWeights, layout: WindowLayout, w: int) -> Tensor:
    """Resolve the bias table into per-head (n, n) logit offsets for window w."""
    index = layout.bias_index[w]
    n = index.shape[0]
    rows = T.gather_rows(weights.bias_table, index.reshape(-1))
    return T.transpose(T.reshape(rows, (n, n, weights.n_heads)), (2, 0, 1))


def window_attention(x: Tensor, weights: AttentionWeights,
                     bias: Tensor | None = None,
                     mask: np.ndarray | None = None,
                     extra_k: Tensor | None = None,
                     extra_v: Tensor | None = None,
                     add_q: Tensor | None = None,
                     add_k: Tensor | None = None,
                     add_v: Tensor | None = None) -> Tensor:
    """Multi-head self-attention over one window's tokens.

    ``x`` is (n, d). Per head the projected queries attend over the projected
    keys/values, scaled by the inverse square root of the head dimension,
    plus ``bias`` (n_heads, n, n_keys). ``mask`` marks padded token slots
    (False = padded): padded slots are excluded from keys/values, and their
    output rows are meaningless (callers drop them). Prepended ``extra_*``
    rows carry no position bias and are never masked. Returns (n, d) after
    the output projection.
    """
    n, d = x.data.shape
    heads = weights.n_heads
    if d % heads:
        raise ShapeError(f"token dim {d} not divisible by {heads} heads")
    hd = d // heads

    q = T.add(T.matmul(x, weights.w_q), weights.b_q)
    k = T.add(T.matmul(x, weights.w_k), weights.b_k)
    v = T.add(T.matmul(x, weights.w_v), weights.b_v)
    if add_q is not None:
        q = T.add(q, add_q)
    if add_k is not None:
        k = T.add(k, add_k)
    if add_v is not None:
        v = T.add(v, add_v)

    n_extra = 0
    if extra_k is not None:
        if extra_v is None or extra_k.data.shape != extra_v.data.shape:
            raise ShapeError("extra key/value rows must come in matching pairs")
        n_extra = extra_k.data.shape[0]
        if n_extra:
            k = T.concat([extra_k, k], axis=0)
            v = T.concat([extra_v, v], axis=0)
    nk = n + n_extra

    qh = T.transpose(T.reshape(q, (n, heads, hd)), (1, 0, 2))
    kh = T.transpose(T.reshape(k, (nk, heads, hd)), (1, 2, 0))
    vh = T.transpose(T.reshape(v, (nk, heads, hd)), (1, 0, 2))

    logits = T.mul(T.matmul(qh, kh), 1.0 / math.sqrt(hd))
    if bias is not None:
        if n_extra:
            pad = Tensor(np.zeros((heads, n, n_extra)))
            bias = T.concat([pad, bias], axis=2)
        logits = T.add(logits, bias)

    key_mask = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n,):
            raise ShapeError(f"mask shape {mask.shape} does not match {n} tokens")
        key_mask = np.concatenate([np.ones(n_extra, dtype=bool), mask])[None, None, :]

    att = T.softmax(logits, axis=-1, mask=key_mask)
    out = T.matmul(att, vh)
    merged = T.reshape(T.transpose(out, (1, 0, 2)), (n, d))
    return T.add(T.matmul(merged, weights.w_o), weights.b_o)


@dataclass
class BlockParams:
    """All weights of one transformer block."""

    norm1_gamma: Tensor
    norm1_beta: Tensor
    attn: AttentionWeights
    norm2_gamma: Tensor
    norm2_beta: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    shifted: bool
    eps: float


def _windowed_attention(tokens: Tensor, blk: BlockParams, layout: WindowLayout,
                        extras: AttentionExtras | None) -> Tensor:
    outs = []
    for w in range(layout.window_count):
        idx = layout.windows[w]
        xw = T.gather_rows(tokens, idx)
        kwargs = {}
        if extras is not None:
            kwargs = {
                "extra_k": extras.extra_k,
                "extra_v": extras.extra_v,
                "add_q": T.gather_rows(extras.add_q, idx) if extras.add_q is not None else None,
                "add_k": T.gather_rows(extras.add_k, idx) if extras.add_k is not None else None,
                "add_v": T.gather_rows(extras.add_v, idx) if extras.add_v is not None else None,
            }
        outs.append(window_attention(xw, blk.attn, bias=bias_view(blk.attn, layout, w),
                                     **kwargs))
    stitched = T.concat(outs, axis=0)
    return T.gather_rows(stitched, layout.inverse_perm)


def swin_block(z: Tensor, blk: BlockParams, layout: WindowLayout, hooks=None) -> Tensor:
    """One block: windowed attention and FFN, each behind layer norm + residual."""
    ln1 = T.layer_norm(z, blk.norm1_gamma, blk.norm1_beta, blk.eps)
    extras = hooks.attention_extras(ln1) if hooks is not None else None
    z_hat = T.add(_windowed_attention(ln1, blk, layout, extras), z)

    ln2 = T.layer_norm(z_hat, blk.norm2_gamma, blk.norm2_beta, blk.eps)
    hidden = T.gelu(T.add(T.matmul(ln2, blk.fc1_w), blk.fc1_b))
    ffn = T.add(T.matmul(hidden, blk.fc2_w), blk.fc2_b)
    out = T.add(ffn, z_hat)
    if hooks is not None:
        out = hooks.ffn_output(out, z_hat=z_hat, ln2=ln2, ffn=ffn)
    return out


@dataclass
class DownsampleParams:
    norm_gamma: Tensor
    norm_beta: Tensor
    reduction: Tensor  # (4*d_in, d_out), no bias


@dataclass
class StageParams:
    blocks: list[BlockParams]
    downsample: DownsampleParams | None


def merge_tokens(z: Tensor, grid: tuple[int, int, int], ds: DownsampleParams,
                 eps: float) -> tuple[Tensor, tuple[int, int, int]]:
    """2x2 spatial patch merge: concat neighbor features, norm, linear reduce."""
    gt, gh, gw = grid
    if gh % 2 or gw % 2:
        raise GeometryError(f"cannot merge grid {grid} with odd spatial extents")
    flat = np.arange(gt * gh * gw).reshape(gt, gh, gw)
    quadrants = [flat[:, 0::2, 0::2], flat[:, 1::2, 0::2],
                 flat[:, 0::2, 1::2], flat[:, 1::2, 1::2]]
    parts = [T.gather_rows(z, q.reshape(-1)) for q in quadrants]
    cat = T.concat(parts, axis=1)
    cat = T.layer_norm(cat, ds.norm_gamma, ds.norm_beta, eps)
    return T.matmul(cat, ds.reduction), (gt, gh // 2, gw // 2)


def extract_patches(video: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Flatten non-overlapping (pt, ph, pw, channels) patches in raster order."""
    video = np.asarray(video, dtype=np.float64)
    expected = (*cfg.input_size, cfg.in_channels)
    if video.shape != expected:
        raise GeometryError(f"clip shape {video.shape} does not match config {expected}")
    gt, gh, gw = cfg.token_grid()
    pt, ph, pw = cfg.patch_size
    patches = video.reshape(gt, pt, gh, ph, gw, pw, cfg.in_channels)
    patches = patches.transpose(0, 2, 4, 1, 3, 5, 6)
    return patches.reshape(gt * gh * gw, cfg.patch_volume)


def patch_embed(video: np.ndarray, cfg: ModelConfig, weight: Tensor,
                bias: Tensor) -> Tensor:
    """Project each flattened patch to the stage-0 embedding dimension.

    Returns the token matrix (prod(token_grid), embed_dims[0]); tokens are in
    raster order over the grid ``cfg.token_grid()``.
    """
    return T.add(T.matmul(Tensor(extract_patches(video, cfg)), weight), bias)


class VideoSwinModel:
    """A built backbone: parameters, cached window layouts, and forward."""

    def __init__(self, cfg: ModelConfig, registry: ParameterRegistry,
                 embed_w: Tensor, embed_b: Tensor, embed_norm_g: Tensor,
                 embed_norm_b: Tensor, stages: list[StageParams],
                 norm_gamma: Tensor, norm_beta: Tensor,
                 head_w: Tensor, head_b: Tensor):
        self.cfg = cfg
        self.registry = registry
        self.embed_w = embed_w
        self.embed_b = embed_b
        self.embed_norm_g = embed_norm_g
        self.embed_norm_b = embed_norm_b
        self.stages = stages
        self.norm_gamma = norm_gamma
        self.norm_beta = norm_beta
        self.head_w = head_w
        self.head_b = head_b
        self.hooks: list[list] = [[None] * len(s.blocks) for s in stages]
        self.petl_spec = None
        self._layouts: dict[tuple, WindowLayout] = {}

    def layout(self, grid: tuple[int, int, int], shifted: bool) -> WindowLayout:
        key = (grid, shifted)
        if key not in self._layouts:
            self._layouts[key] = WindowLayout(grid, self.cfg.window_size, shifted)
        return self._layouts[key]

    def forward(self, video: np.ndarray) -> Tensor:
        """Run one clip through the network; returns logits of shape (num_classes,)."""
        cfg = self.cfg
        z = patch_embed(video, cfg, self.embed_w, self.embed_b)
        z = T.layer_norm(z, self.embed_norm_g, self.embed_norm_b, cfg.layer_norm_eps)

        grid = cfg.token_grid()
        for i, stage in enumerate(self.stages):
            for j, blk in enumerate(stage.blocks):
                z = swin_block(z, blk, self.layout(grid, blk.shifted), self.hooks[i][j])
            if stage.downsample is not None:
                z, grid = merge_tokens(z, grid, stage.downsample, cfg.layer_norm_eps)

        z = T.layer_norm(z, self.norm_gamma, self.norm_beta, cfg.layer_norm_eps)
        pooled = T.tmean(z, axis=0, keepdims=True)
        logits = T.add(T.matmul(pooled, self.head_w), self.head_b)
        return T.reshape(logits, (cfg.num_classes,))

    def zero_grads(self) -> None:
        for p in self.registry.parameters():
            p.tensor.zero_grad()


def build_model(cfg: ModelConfig, seed: int = 0) -> VideoSwinModel:
    """Allocate and initialize a backbone (weights ~ N(0, 0.02), zero biases)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    reg = ParameterRegistry()

    def param(path: str, shape: tuple[int, ...], init: str) -> Tensor:
        if init == "normal":
            data = rng.normal(0.0, 0.02, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(init)
        t = Tensor(data, requires_grad=True)
        reg.register(path, t)
        return t

    d0 = cfg.embed_dims[0]
    embed_w = param("patch_embed.proj.weight", (cfg.patch_volume, d0), "normal")
    embed_b = param("patch_embed.proj.bias", (d0,), "zeros")
    embed_ng = param("patch_embed.norm.gamma", (d0,), "ones")
    embed_nb = param("patch_embed.norm.beta", (d0,), "zeros")

    n_bias = bias_table_entries(cfg.window_size)
    stages: list[StageParams] = []
    for i in range(cfg.num_stages):
        d = cfg.embed_dims[i]
        heads = cfg.heads_per_stage[i]
        d_hidden = cfg.ffn_ratio * d
        blocks = []
        for j in range(cfg.blocks_per_stage[i]):
            base = f"stages.{i}.blocks.{j}"
            attn = AttentionWeights(
                n_heads=heads,
                w_q=param(f"{base}.attn.q.weight", (d, d), "normal"),
                b_q=param(f"{base}.attn.q.bias", (d,), "zeros"),
                w_k=param(f"{base}.attn.k.weight", (d, d), "normal"),
                b_k=param(f"{base}.attn.k.bias", (d,), "zeros"),
                w_v=param(f"{base}.attn.v.weight", (d, d), "normal"),
                b_v=param(f"{base}.attn.v.bias", (d,), "zeros"),
                w_o=param(f"{base}.attn.proj.weight", (d, d), "normal"),
                b_o=param(f"{base}.attn.proj.bias", (d,), "zeros"),
                bias_table=param(f"{base}.attn.bias_table", (n_bias, heads), "normal"),
            )
            blocks.append(BlockParams(
                norm1_gamma=param(f"{base}.norm1.gamma", (d,), "ones"),
                norm1_beta=param(f"{base}.norm1.beta", (d,), "zeros"),
                attn=attn,
                norm2_gamma=param(f"{base}.norm2.gamma", (d,), "ones"),
                norm2_beta=param(f"{base}.norm2.beta", (d,), "zeros"),
                fc1_w=param(f"{base}.ffn.fc1.weight", (d, d_hidden), "normal"),
                fc1_b=param(f"{base}.ffn.fc1.bias", (d_hidden,), "zeros"),
                fc2_w=param(f"{base}.ffn.fc2.weight", (d_hidden, d), "normal"),
                fc2_b=param(f"{base}.ffn.fc2.bias", (d,), "zeros"),
                shifted=bool(j % 2),
                eps=cfg.layer_norm_eps,
            ))
        downsample = None
        if i < cfg.num_stages - 1:
            d_next = cfg.embed_dims[i + 1]
            downsample = DownsampleParams(
                norm_gamma=param(f"stages.{i}.downsample.norm.gamma", (4 * d,), "ones"),
                norm_beta=param(f"stages.{i}.downsample.norm.beta", (4 * d,), "zeros"),
                reduction=param(f"stages.{i}.downsample.reduction.weight",
                                (4 * d, d_next), "normal"),
            )
        stages.append(StageParams(blocks=blocks, downsample=downsample))

    d_last = cfg.embed_dims[-1]
    norm_g = param("norm.gamma", (d_last,), "ones")
    norm_b = param("norm.beta", (d_last,), "zeros")
    head_w = param("head.weight", (d_last, cfg.num_classes), "normal")
    head_b = param("head.bias", (cfg.num_classes,), "zeros")

    return VideoSwinModel(cfg, reg, embed_w, embed_b, embed_ng, embed_nb,
                          stages, norm_g, norm_b, head_w, head_b)
