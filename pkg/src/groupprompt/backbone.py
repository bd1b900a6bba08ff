"""Windowed-attention feature extractor with grouping-prompt tokens.

A copy of the prompt set joins every local window, so each window attends
over ``M*M + G`` tokens.  Patch tokens go back to their grid cells; the
prompt outputs of all windows are averaged into the prompt set the next
block receives.  With ``G == 0`` the code path is the plain prompt-free
backbone used in the pre-tuning phase.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import MLP, LayerNorm, Linear, Module, multi_head_attention
from .rng import Rng
from .tensor import Tensor


@dataclass
class BackboneConfig:
    patch_size: int = 4
    embed_dim: int = 32
    stages: int = 2
    blocks_per_stage: int = 2
    window_size: int = 4
    heads: int = 2
    shift_windows: bool = False
    # leading blocks that carry prompts; None means every block
    prompt_depth: int | None = None
    mlp_ratio: int = 2

    def validate(self, height: int, width: int) -> None:
        e = self.patch_size
        if height % e or width % e:
            raise ShapeError(f"image {height}x{width} not divisible by patch size {e}")
        unit = 2 ** (self.stages - 1) * self.window_size
        if (height // e) % unit or (width // e) % unit:
            raise ShapeError(
                f"patch grid {height // e}x{width // e} not divisible by "
                f"2^(stages-1)*window = {unit}")
        if self.embed_dim % self.heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


class PromptBank(Module):
    """Learnable grouping prompts ``[G, D]``."""

    def __init__(self, rng: Rng, count: int, dim: int):
        super().__init__()
        self.count = count
        self.prompts = self.add_param("prompts", rng.normal((count, dim), scale=1.0))


def patch_embed(image: Tensor, proj: Linear, patch: int) -> Tensor:
    """``[B, H, W, 3] -> [B, H/E, W/E, D]``; an unbatched image gives ``[N, D]``."""
    single = image.ndim == 3
    if single:
        image = T.reshape(image, (1, *image.shape))
    b, h, w, c = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    hp, wp = h // patch, w // patch
    x = T.reshape(image, (b, hp, patch, wp, patch, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = proj(T.reshape(x, (b, hp, wp, patch * patch * c)))
    if single:
        return T.reshape(x, (hp * wp, x.shape[-1]))
    return x


def _partition(x: Tensor, m: int) -> Tensor:
    b, h, w, d = x.shape
    x = T.reshape(x, (b, h // m, m, w // m, m, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * (h // m) * (w // m), m * m, d))


def _unpartition(x: Tensor, b: int, h: int, w: int, m: int) -> Tensor:
    d = x.shape[-1]
    x = T.reshape(x, (b, h // m, w // m, m, m, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, d))


def _shift_mask(h: int, w: int, m: int, shift: int, prompts: int) -> np.ndarray:
    """Additive mask ``[nW, 1, L, L]`` keeping rolled-in regions apart.

    Prompt tokens may attend to and be attended by every patch token.
    """
    region = np.zeros((h, w), dtype=np.int64)
    cuts = (slice(0, -m), slice(-m, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[hs, ws] = label
            label += 1
    win = region.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    n_win, n = win.shape
    total = n + prompts
    mask = np.zeros((n_win, 1, total, total))
    diff = win[:, :, None] != win[:, None, :]
    mask[:, 0, :n, :n] = np.where(diff, -1e9, 0.0)
    return mask


class WindowAttention(Module):
    def __init__(self, rng: Rng, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = self.add_child("qkv", Linear(rng.spawn("qkv"), dim, 3 * dim))
        self.proj = self.add_child("proj", Linear(rng.spawn("proj"), dim, dim))


def window_attention_with_prompts(tokens: Tensor, prompts: Tensor | None, attn: WindowAttention,
                                  window: int, shift: int = 0, keep: list | None = None):
    """Self-attention inside ``window x window`` cells, prompts appended to each.

    ``tokens`` is ``[B, h, w, D]`` and ``prompts`` ``[B, G, D]`` (or None).
    Returns ``(tokens', prompts')`` with the same shapes.
    """
    b, h, w, d = tokens.shape
    if h % window or w % window:
        raise ShapeError(f"token grid {h}x{w} not divisible into {window}x{window} windows")
    n_win = (h // window) * (w // window)
    g = 0 if prompts is None else prompts.shape[1]
    x = T.roll(tokens, (-shift, -shift), (1, 2)) if shift else tokens
    x = _partition(x, window)
    if g:
        p = T.broadcast_to(T.reshape(prompts, (b, 1, g, d)), (b, n_win, g, d))
        x = T.concat([x, T.reshape(p, (b * n_win, g, d))], axis=1)
    bias = None
    if shift:
        bias = np.tile(_shift_mask(h, w, window, shift, g), (b, 1, 1, 1))
    q, k, v = T.split(attn.qkv(x), [d, d, d], axis=-1)
    out = attn.proj(multi_head_attention(q, k, v, attn.heads, bias=bias, keep=keep))
    if g:
        out_tokens, out_prompts = T.split(out, [window * window, g], axis=1)
        out_prompts = T.mean(T.reshape(out_prompts, (b, n_win, g, d)), axis=1)
    else:
        out_tokens, out_prompts = out, None
    out_tokens = _unpartition(out_tokens, b, h, w, window)
    if shift:
        out_tokens = T.roll(out_tokens, (shift, shift), (1, 2))
    return out_tokens, out_prompts


class WindowBlock(Module):
    def __init__(self, rng: Rng, dim: int, heads: int, window: int, shift: int, mlp_ratio: int):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = self.add_child("norm1", LayerNorm(dim))
        self.attn = self.add_child("attn", WindowAttention(rng.spawn("attn"), dim, heads))
        self.norm2 = self.add_child("norm2", LayerNorm(dim))
        self.mlp = self.add_child("mlp", MLP(rng.spawn("mlp"), dim, mlp_ratio * dim, dim))

    def __call__(self, x: Tensor, prompts: Tensor | None, keep: list | None = None):
        shift = self.shift if x.shape[1] > self.window else 0
        h = self.norm1(x)
        hp = self.norm1(prompts) if prompts is not None else None
        a, ap = window_attention_with_prompts(h, hp, self.attn, self.window, shift, keep)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        if prompts is not None:
            prompts = prompts + ap
            prompts = prompts + self.mlp(self.norm2(prompts))
        return x, prompts


class PatchMerging(Module):
    """2x2 neighbourhood concat, then ``4D -> D`` so prompt width stays fixed."""

    def __init__(self, rng: Rng, dim: int):
        super().__init__()
        self.norm = self.add_child("norm", LayerNorm(4 * dim))
        self.reduce = self.add_child("reduce", Linear(rng.spawn("reduce"), 4 * dim, dim, bias=False))

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, d = x.shape
        x = T.reshape(x, (b, h // 2, 2, w // 2, 2, d))
        x = T.transpose(x, (0, 1, 3, 4, 2, 5))
        x = T.reshape(x, (b, h // 2, w // 2, 4 * d))
        return self.reduce(self.norm(x))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        e, d = cfg.patch_size, cfg.embed_dim
        self.patch = self.add_child("patch", Linear(rng.spawn("patch"), e * e * 3, d))
        self.patch_norm = self.add_child("patch_norm", LayerNorm(d))
        self.blocks: list[list[WindowBlock]] = []
        self.merges: list[PatchMerging] = []
        for s in range(cfg.stages):
            if s:
                self.merges.append(self.add_child(f"merge{s}", PatchMerging(rng.spawn(f"merge{s}"), d)))
            stage = []
            for i in range(cfg.blocks_per_stage):
                shift = cfg.window_size // 2 if cfg.shift_windows and i % 2 else 0
                blk = WindowBlock(rng.spawn(f"s{s}b{i}"), d, cfg.heads, cfg.window_size,
                                  shift, cfg.mlp_ratio)
                stage.append(self.add_child(f"stage{s}.block{i}", blk))
            self.blocks.append(stage)
        self.out_norm = self.add_child("out_norm", LayerNorm(d))

    def __call__(self, images: Tensor, prompts: Tensor | None = None,
                 keep: list | None = None) -> Tensor:
        """``[B, H, W, 3]`` images and ``[G, D]`` prompts to a ``[B, h, w, D]`` map."""
        b, hgt, wid, _ = images.shape
        self.cfg.validate(hgt, wid)
        x = self.patch_norm(patch_embed(images, self.patch, self.cfg.patch_size))
        p = None
        if prompts is not None and prompts.shape[0] > 0:
            g, d = prompts.shape
            p = T.broadcast_to(T.reshape(prompts, (1, g, d)), (b, g, d))
        depth = self.cfg.prompt_depth
        index = 0
        for s, stage in enumerate(self.blocks):
            if s:
                x = self.merges[s - 1](x)
            for blk in stage:
                if depth is not None and index >= depth:
                    p = None
                x, p = blk(x, p, keep)
                index += 1
        return self.out_norm(x)
