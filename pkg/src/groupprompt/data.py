"""Synthetic clustered "tissue" scenes and the on-disk dataset format.

A scene is a Thomas-style cluster process: cluster centres are uniform in
the image, each cluster carries one class, and its nuclei scatter around the
centre with a Gaussian of width ``cluster_sigma``.  Rejection sampling keeps
centroids apart.  Nuclei are rendered as tinted Gaussian blobs over a
textured background and the image is quantised to 8 bits.

Dataset directory::

    meta.json            scene config echo and scene count
    annotations.jsonl    {"scene_id": i, "nuclei": [{"x", "y", "class_id"}, ...]}
    scenes/NNNN.ppm      binary P6, 8-bit
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DatasetError, GenerationError, ParameterError
from .rng import Rng

MAX_ATTEMPTS = 10_000

DEFAULT_COLORS = [
    [0.30, 0.12, 0.50],   # purple
    [0.80, 0.30, 0.20],   # orange-red
    [0.10, 0.45, 0.75],   # blue
    [0.15, 0.60, 0.25],
    [0.70, 0.65, 0.10],
    [0.55, 0.20, 0.55],
    [0.20, 0.20, 0.20],
]


@dataclass(frozen=True)
class NucleusInstance:
    x: float
    y: float
    class_id: int
    score: float | None = None

    def to_dict(self) -> dict:
        out = {"x": self.x, "y": self.y, "class_id": self.class_id}
        if self.score is not None:
            out["score"] = self.score
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "NucleusInstance":
        return cls(float(d["x"]), float(d["y"]), int(d["class_id"]),
                   None if d.get("score") is None else float(d["score"]))


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    clusters: int = 3
    cluster_sigma: float = 5.0
    points_per_cluster: tuple[int, int] = (3, 6)
    blob_radius: float = 2.0
    min_separation: float = 6.0
    cluster_spacing: float = 3.0
    class_freqs: list[float] | None = None
    class_colors: list[list[float]] = field(default_factory=lambda: [c[:] for c in DEFAULT_COLORS[:3]])
    background: tuple[float, float, float] = (0.93, 0.84, 0.88)
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.points_per_cluster = tuple(int(v) for v in self.points_per_cluster)
        self.background = tuple(float(v) for v in self.background)
        if self.num_classes < 1:
            raise ParameterError("num_classes must be at least 1")
        if len(self.class_colors) < self.num_classes:
            if self.num_classes > len(DEFAULT_COLORS):
                raise ParameterError(f"need {self.num_classes} class colours")
            self.class_colors = [c[:] for c in DEFAULT_COLORS[:self.num_classes]]
        lo, hi = self.points_per_cluster
        if lo < 0 or hi < lo:
            raise ParameterError(f"bad points_per_cluster {self.points_per_cluster}")
        if self.class_freqs is not None:
            f = np.asarray(self.class_freqs, dtype=float)
            if f.shape != (self.num_classes,) or np.any(f < 0) or f.sum() <= 0:
                raise ParameterError("class_freqs must be num_classes non-negative weights")

    def frequencies(self) -> np.ndarray:
        if self.class_freqs is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        f = np.asarray(self.class_freqs, dtype=float)
        return f / f.sum()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["points_per_cluster"] = list(self.points_per_cluster)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Scene:
    scene_id: int
    image: np.ndarray                 # [H, W, 3] in [0, 1], multiples of 1/255
    nuclei: list[NucleusInstance]


def _cluster_classes(cfg: SceneConfig, rng: Rng) -> list[int]:
    """Largest-remainder allocation of cluster classes, randomly ordered."""
    n = cfg.clusters
    freq = cfg.frequencies()
    quota = freq * n
    counts = np.floor(quota).astype(int)
    rest = n - counts.sum()
    if rest:
        remainder = quota - counts
        # random draw among the remainders keeps the expectation exact
        weights = remainder / remainder.sum()
        for _ in range(rest):
            k = rng.choice(cfg.num_classes, p=weights)
            counts[k] += 1
            weights[k] = 0.0
            if weights.sum() <= 0:
                weights = np.ones(cfg.num_classes) / cfg.num_classes
            else:
                weights = weights / weights.sum()
    labels = np.repeat(np.arange(1, cfg.num_classes + 1), counts)
    return [int(labels[i]) for i in rng.permutation(n)]


def _cluster_centers(cfg: SceneConfig, rng: Rng, count: int) -> list[tuple[float, float]]:
    """Uniform centres kept ``cluster_sigma`` inside the border and
    ``cluster_spacing`` sigmas apart."""
    pad = cfg.blob_radius + cfg.cluster_sigma
    if 2 * pad >= min(cfg.width, cfg.height):
        pad = cfg.blob_radius
    min_d2 = (cfg.cluster_spacing * cfg.cluster_sigma) ** 2
    centers: list[tuple[float, float]] = []
    for _ in range(count):
        for _attempt in range(MAX_ATTEMPTS):
            cx = float(rng.uniform((), pad, cfg.width - pad))
            cy = float(rng.uniform((), pad, cfg.height - pad))
            if all((x - cx) ** 2 + (y - cy) ** 2 >= min_d2 for x, y in centers):
                centers.append((cx, cy))
                break
        else:
            raise GenerationError(
                f"could not place a cluster centre after {MAX_ATTEMPTS} attempts; "
                "use fewer clusters or a smaller cluster_spacing")
    return centers


def sample_centroids(cfg: SceneConfig, rng: Rng) -> list[NucleusInstance]:
    h, w = cfg.height, cfg.width
    margin = cfg.blob_radius
    classes = _cluster_classes(cfg, rng)
    lo, hi = cfg.points_per_cluster
    placed: list[NucleusInstance] = []
    sep2 = cfg.min_separation ** 2
    centers = _cluster_centers(cfg, rng, len(classes))
    for label, (cx, cy) in zip(classes, centers):
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            for _attempt in range(MAX_ATTEMPTS):
                x = float(cx + rng.normal((), cfg.cluster_sigma))
                y = float(cy + rng.normal((), cfg.cluster_sigma))
                if not (margin <= x < w - margin and margin <= y < h - margin):
                    continue
                if all((p.x - x) ** 2 + (p.y - y) ** 2 >= sep2 for p in placed):
                    placed.append(NucleusInstance(x, y, int(label)))
                    break
            else:
                raise GenerationError(
                    f"could not place a centroid after {MAX_ATTEMPTS} attempts; "
                    "lower the density (fewer points, smaller min_separation, larger sigma)")
    return placed


def _texture(cfg: SceneConfig, rng: Rng) -> np.ndarray:
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    field_ = np.zeros((h, w))
    for _ in range(4):
        fx, fy = rng.uniform((2,), 0.5, 3.0)
        phase = rng.uniform((), 0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fx * xx / w + fy * yy / h) + phase)
    field_ /= 4.0
    base = np.asarray(cfg.background)[None, None, :]
    img = base + 0.04 * field_[..., None] + rng.normal((h, w, 3), cfg.noise)
    return img


def render(cfg: SceneConfig, nuclei: Sequence[NucleusInstance], rng: Rng) -> np.ndarray:
    img = _texture(cfg, rng)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(float) + 0.5
    colors = np.asarray(cfg.class_colors, dtype=float)
    for n in nuclei:
        d2 = (xx - n.x) ** 2 + (yy - n.y) ** 2
        alpha = 0.9 * np.exp(-d2 / (2.0 * cfg.blob_radius ** 2))
        tint = colors[n.class_id - 1] + rng.normal((3,), 0.03)
        img = img * (1.0 - alpha[..., None]) + tint[None, None, :] * alpha[..., None]
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_scene(cfg: SceneConfig, rng: Rng, scene_id: int = 0) -> Scene:
    nuclei = sample_centroids(cfg, rng.spawn("centroids"))
    image = render(cfg, nuclei, rng.spawn("render"))
    return Scene(scene_id, image, nuclei)


def generate_dataset(cfg: SceneConfig, count: int, seed: int | None = None) -> list[Scene]:
    """Scene ``i`` depends only on ``(seed, i)``."""
    seed = cfg.seed if seed is None else seed
    return [generate_scene(cfg, Rng(seed, f"scene-{i}"), i) for i in range(count)]


# -- file format -----------------------------------------------------------
def write_ppm(path: Path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    data = np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DatasetError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


@dataclass
class Dataset:
    config: SceneConfig
    scenes: list[Scene]

    def __len__(self) -> int:
        return len(self.scenes)


def save_dataset(path, cfg: SceneConfig, scenes: Sequence[Scene]) -> None:
    root = Path(path)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    meta = {"format": "groupprompt-scenes/1", "scene_count": len(scenes), "config": cfg.to_dict()}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    lines = []
    for s in scenes:
        write_ppm(root / "scenes" / f"{s.scene_id:04d}.ppm", s.image)
        lines.append(json.dumps({"scene_id": s.scene_id,
                                 "nuclei": [n.to_dict() for n in s.nuclei]}))
    (root / "annotations.jsonl").write_text("".join(line + "\n" for line in lines))


def read_annotations(path) -> list[tuple[int, list[NucleusInstance]]]:
    """Parse an annotations JSONL file; errors carry the 1-based line number."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            nuclei = [NucleusInstance.from_dict(d) for d in obj["nuclei"]]
            out.append((int(obj["scene_id"]), nuclei))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed annotation line ({exc})") from exc
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root / 'meta.json'}: {exc}") from exc
    cfg = SceneConfig.from_dict(meta["config"])
    entries = read_annotations(root / "annotations.jsonl")
    images = sorted((root / "scenes").glob("*.ppm")) if (root / "scenes").exists() else []
    if len(images) != len(entries) or meta.get("scene_count", len(entries)) != len(entries):
        raise DatasetError(
            f"{root}: {len(images)} images but {len(entries)} annotation lines "
            f"(meta says {meta.get('scene_count')})")
    scenes = []
    for scene_id, nuclei in entries:
        for n in nuclei:
            if not (0 <= n.x < cfg.width and 0 <= n.y < cfg.height):
                raise DatasetError(f"scene {scene_id}: annotation ({n.x}, {n.y}) outside the image")
            if not 1 <= n.class_id <= cfg.num_classes:
                raise DatasetError(f"scene {scene_id}: class_id {n.class_id} outside 1..{cfg.num_classes}")
        img_path = root / "scenes" / f"{scene_id:04d}.ppm"
        if not img_path.exists():
            raise DatasetError(f"scene {scene_id}: missing image {img_path.name}")
        image = read_ppm(img_path)
        if image.shape != (cfg.height, cfg.width, 3):
            raise DatasetError(f"scene {scene_id}: image shape {image.shape} does not match config")
        scenes.append(Scene(scene_id, image, nuclei))
    return Dataset(cfg, scenes)
