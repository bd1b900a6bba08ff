"""Centroid detector: deformable encoder, top-Q query selection, refining decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .nn import MLP, LayerNorm, Linear, Module, multi_head_attention
from .rng import Rng
from .tensor import Tensor, _result


@dataclass
class DetectorConfig:
    num_queries: int = 64
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 2
    points: int = 4
    ffn_dim: int = 64
    query_self_attn: bool = True
    # stop the gradient between successive reference-point refinements
    detach_points: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def bilinear_sample(feature_map: Tensor, points: Tensor) -> Tensor:
    """Sample ``[N, h, w, C]`` at normalised ``[N, P, 2]`` (x, y) points.

    Pixel centres sit at half-integer positions; coordinates outside the map
    clamp to the border (and get no gradient there).  Unbatched ``[h, w, C]``
    with ``[P, 2]`` is accepted too.
    """
    single = feature_map.ndim == 3
    fm = feature_map.value[None] if single else feature_map.value
    pts = points.value[None] if single else points.value
    n, h, w, c = fm.shape

    px = pts[..., 0] * w - 0.5
    py = pts[..., 1] * h - 0.5
    cx = np.clip(px, 0.0, w - 1.0)
    cy = np.clip(py, 0.0, h - 1.0)
    inside_x = (px >= 0.0) & (px <= w - 1.0)
    inside_y = (py >= 0.0) & (py <= h - 1.0)
    x0 = np.minimum(np.floor(cx), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(cy), max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (cx - x0)[..., None]
    fy = (cy - y0)[..., None]

    flat = fm.reshape(n * h * w, c)
    base = (np.arange(n, dtype=np.intp) * (h * w))[:, None]
    i00 = base + y0 * w + x0
    i01 = base + y0 * w + x1
    i10 = base + y1 * w + x0
    i11 = base + y1 * w + x1
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def backward(g):
        g = g[None] if single else g
        gmap = gpts = None
        if feature_map.requires_grad:
            acc = np.zeros_like(flat)
            idx = np.concatenate([i00.ravel(), i01.ravel(), i10.ravel(), i11.ravel()])
            vals = np.concatenate([(w00 * g).reshape(-1, c), (w01 * g).reshape(-1, c),
                                   (w10 * g).reshape(-1, c), (w11 * g).reshape(-1, c)])
            np.add.at(acc, idx, vals)
            gmap = acc.reshape(fm.shape)
            if single:
                gmap = gmap[0]
        if points.requires_grad:
            dx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10) if w > 1 else 0.0 * v00)
            dy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01) if h > 1 else 0.0 * v00)
            gx = (g * dx).sum(-1) * w * inside_x
            gy = (g * dy).sum(-1) * h * inside_y
            gpts = np.stack([gx, gy], axis=-1)
            if single:
                gpts = gpts[0]
        return gmap, gpts

    result = out[0] if single else out
    return _result(result, (feature_map, points), backward)


def pixel_centers(h: int, w: int) -> np.ndarray:
    """Normalised (x, y) centres of an ``h x w`` grid in row-major order."""
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(cols.ravel() + 0.5) / w, (rows.ravel() + 0.5) / h], axis=-1)


def _unit_directions(heads: int, points: int) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(points) / points
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    ring[np.abs(ring) < 1e-12] = 0.0
    return np.broadcast_to(ring, (heads, points, 2)).reshape(-1).copy()


class DeformableAttention(Module):
    """Single-scale deformable attention.

    Each query looks at ``points`` locations per head around its reference
    point; offsets (in pixels of the sampled map) and softmax weights are
    regressed from the query.  At initialisation the offsets are the unit
    ring and the weights uniform.
    """

    def __init__(self, rng: Rng, dim: int, heads: int = 2, points: int = 4):
        super().__init__()
        self.heads, self.points = heads, points
        self.offsets = self.add_child("offsets", Linear(rng.spawn("off"), dim, heads * points * 2, zero=True))
        self.offsets.bias.value[...] = _unit_directions(heads, points)
        self.weights = self.add_child("weights", Linear(rng.spawn("w"), dim, heads * points, zero=True))
        self.value = self.add_child("value", Linear(rng.spawn("v"), dim, dim))
        self.out = self.add_child("out", Linear(rng.spawn("o"), dim, dim))

    def __call__(self, query: Tensor, ref: Tensor, memory: Tensor) -> Tensor:
        b, n, d = query.shape
        _, h, w, _ = memory.shape
        nh, k = self.heads, self.points
        dh = d // nh
        off = T.reshape(self.offsets(query), (b, n, nh, k, 2))
        off = off * np.array([1.0 / w, 1.0 / h])
        loc = T.reshape(ref, (b, n, 1, 1, 2)) + off
        attn = T.softmax(T.reshape(self.weights(query), (b, n, nh, k)), axis=-1)
        val = T.reshape(self.value(memory), (b, h, w, nh, dh))
        val = T.reshape(T.transpose(val, (0, 3, 1, 2, 4)), (b * nh, h, w, dh))
        loc = T.reshape(T.transpose(loc, (0, 2, 1, 3, 4)), (b * nh, n * k, 2))
        samp = T.reshape(bilinear_sample(val, loc), (b, nh, n, k, dh))
        attn = T.reshape(T.transpose(attn, (0, 2, 1, 3)), (b, nh, n, k, 1))
        mixed = T.sum_(samp * attn, axis=3)
        mixed = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
        return self.out(mixed)


class EncoderLayer(Module):
    def __init__(self, rng: Rng, dim: int, cfg: DetectorConfig):
        super().__init__()
        self.attn = self.add_child("attn", DeformableAttention(rng.spawn("attn"), dim, cfg.heads, cfg.points))
        self.norm1 = self.add_child("norm1", LayerNorm(dim))
        self.ffn = self.add_child("ffn", MLP(rng.spawn("ffn"), dim, cfg.ffn_dim, dim))
        self.norm2 = self.add_child("norm2", LayerNorm(dim))

    def __call__(self, fmap: Tensor) -> Tensor:
        b, h, w, d = fmap.shape
        x = T.reshape(fmap, (b, h * w, d))
        ref = Tensor(np.broadcast_to(pixel_centers(h, w), (b, h * w, 2)))
        x = self.norm1(x + self.attn(x, ref, fmap))
        x = self.norm2(x + self.ffn(x))
        return T.reshape(x, (b, h, w, d))


@dataclass
class DecoderSideOutput:
    layer: int
    queries: Tensor       # [B, Q, D]
    points: Tensor        # [B, Q, 2] normalised (x, y)
    offsets: Tensor = field(repr=False, default=None)


class DecoderLayer(Module):
    def __init__(self, rng: Rng, dim: int, cfg: DetectorConfig):
        super().__init__()
        self.heads = cfg.heads
        self.self_attn = cfg.query_self_attn
        if self.self_attn:
            self.pos = self.add_child("pos", MLP(rng.spawn("pos"), 2, dim, dim))
            self.qk = self.add_child("qk", Linear(rng.spawn("qk"), dim, 2 * dim))
            self.v = self.add_child("v", Linear(rng.spawn("v"), dim, dim))
            self.sa_out = self.add_child("sa_out", Linear(rng.spawn("sa_out"), dim, dim))
            self.norm0 = self.add_child("norm0", LayerNorm(dim))
        self.cross = self.add_child("cross", DeformableAttention(rng.spawn("cross"), dim, cfg.heads, cfg.points))
        self.norm1 = self.add_child("norm1", LayerNorm(dim))
        self.ffn = self.add_child("ffn", MLP(rng.spawn("ffn"), dim, cfg.ffn_dim, dim))
        self.norm2 = self.add_child("norm2", LayerNorm(dim))
        self.offset_head = self.add_child("offset_head", MLP(rng.spawn("offset"), dim, dim, 2, zero_last=True))

    def __call__(self, q: Tensor, points: Tensor, memory: Tensor):
        """One refinement step: ``(q, points) -> (q', clamp(points + offsets), offsets)``."""
        d = q.shape[-1]
        if self.self_attn:
            qk_in = q + self.pos(points)
            qq, kk = T.split(self.qk(qk_in), [d, d], axis=-1)
            q = self.norm0(q + self.sa_out(multi_head_attention(qq, kk, self.v(q), self.heads)))
        q = self.norm1(q + self.cross(q, points, memory))
        q = self.norm2(q + self.ffn(q))
        offsets = self.offset_head(q)
        return q, T.clamp(points + offsets, 0.0, 1.0), offsets


@dataclass
class Selection:
    queries: Tensor           # [B, Q, D]
    points: Tensor            # [B, Q, 2]
    pixel_scores: Tensor      # [B, h*w, C+1]
    indices: np.ndarray       # [B, Q] row-major pixel indices


def select_top(features: Tensor, pixel_scores: Tensor, num_queries: int) -> Selection:
    """Keep the ``num_queries`` most confident pixels per image.

    Confidence is the largest non-empty class probability (last column is the
    empty class); ties go to the lower row-major index.
    """
    b, h, w, d = features.shape
    n = h * w
    if num_queries > n:
        raise ParameterError(f"Q={num_queries} exceeds the {h}x{w}={n} feature pixels")
    s = pixel_scores.value
    prob = np.exp(s - s.max(-1, keepdims=True))
    prob /= prob.sum(-1, keepdims=True)
    conf = prob[..., :-1].max(-1)
    order = np.argsort(-conf, axis=1, kind="stable")[:, :num_queries]
    flat_idx = (np.arange(b)[:, None] * n + order).ravel()
    q = T.reshape(T.take_rows(T.reshape(features, (b * n, d)), flat_idx), (b, num_queries, d))
    centers = pixel_centers(h, w)
    return Selection(q, Tensor(centers[order]), pixel_scores, order)


class Detector(Module):
    def __init__(self, cfg: DetectorConfig, dim: int, num_classes: int, rng: Rng):
        super().__init__()
        self.cfg = cfg
        self.encoder = [self.add_child(f"enc{i}", EncoderLayer(rng.spawn(f"enc{i}"), dim, cfg))
                        for i in range(cfg.encoder_layers)]
        self.pixel_head = self.add_child("pixel_head", MLP(rng.spawn("pixel"), dim, dim, num_classes + 1))
        self.decoder = [self.add_child(f"dec{i}", DecoderLayer(rng.spawn(f"dec{i}"), dim, cfg))
                        for i in range(cfg.decoder_layers)]

    def encode(self, fmap: Tensor) -> Tensor:
        for layer in self.encoder:
            fmap = layer(fmap)
        return fmap

    def __call__(self, fmap: Tensor):
        memory = self.encode(fmap)
        b, h, w, d = memory.shape
        scores = self.pixel_head(T.reshape(memory, (b, h * w, d)))
        sel = select_top(memory, scores, self.cfg.num_queries)
        q, points = sel.queries, sel.points
        sides = []
        for i, layer in enumerate(self.decoder):
            if self.cfg.detach_points and i:
                points = T.stop_gradient(points)
            q, points, offsets = layer(q, points, memory)
            sides.append(DecoderSideOutput(i, q, points, offsets))
        return sides, sel
