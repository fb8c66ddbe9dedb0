"""Synthetic aerial scenes, cluster regions and a scale-dependent detector surrogate.

Objects are dropped into a few spatial zones; each zone has one category and
one base pixel size, so nearby objects of the same class share a similar scale.
The detector surrogate scores an object by how far its rescaled pixel size is
from a per-category sweet spot, on a log2 axis, minus a linear penalty for
over-scaling artifacts.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ConfigError

BBox = tuple[float, float, float, float]  # x, y, w, h

SIZE_BANDS = ("ultra-small", "small", "medium", "large")


@dataclass(frozen=True)
class SceneObject:
    id: int
    category: int
    bbox: BBox
    px_size: float = field(init=False)

    def __post_init__(self):
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"object {self.id}: non-positive box size {self.bbox}")
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        object.__setattr__(self, "px_size", math.sqrt(w * h))


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    objects: tuple[SceneObject, ...]
    seed: int
    n_categories: int

    @property
    def bounds(self) -> tuple[int, int]:
        return (self.width, self.height)


@dataclass(frozen=True)
class SceneConfig:
    """Generator parameters.

    ``band_edges`` are the pixel-size boundaries of the ultra-small, small,
    medium and large bands; ``band_weights`` is the mixture over bands used
    when a zone picks its base size.
    """

    width: int = 1024
    height: int = 1024
    n_categories: int = 4
    min_objects: int = 4
    max_objects: int = 12
    band_edges: tuple[float, ...] = (6.0, 16.0, 32.0, 64.0, 128.0)
    band_weights: tuple[float, ...] = (0.25, 0.3, 0.25, 0.2)
    max_zones: int = 3
    cluster_spread: float = 60.0
    size_jitter: float = 0.15
    aspect_jitter: float = 0.25
    beta: float = 1.5
    merge_iou: float = 0.3

    def validate(self) -> "SceneConfig":
        if self.n_categories < 2:
            raise ConfigError(f"scene.n_categories must be >= 2, got {self.n_categories}")
        if len(self.band_edges) < 2 or len(self.band_weights) != len(self.band_edges) - 1:
            raise ConfigError("scene.band_edges needs k+1 increasing edges for k band_weights")
        if any(b <= a for a, b in zip(self.band_edges, self.band_edges[1:])) or self.band_edges[0] <= 0:
            raise ConfigError(f"scene.band_edges must be positive and increasing: {self.band_edges}")
        if any(w < 0 for w in self.band_weights) or sum(self.band_weights) <= 0:
            raise ConfigError("scene.band_weights must be nonnegative with a positive sum")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError(
                f"scene object-count range invalid: [{self.min_objects}, {self.max_objects}]"
            )
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("scene width and height must be positive")
        if self.band_edges[-1] * 2 ** (2 * self.aspect_jitter) > min(self.width, self.height) / 2:
            raise ConfigError("largest size band does not fit in the scene")
        if self.max_zones < 1:
            raise ConfigError("scene.max_zones must be >= 1")
        if self.beta < 1:
            raise ConfigError(f"scene.beta must be >= 1, got {self.beta}")
        if not 0 < self.merge_iou < 1:
            raise ConfigError(f"scene.merge_iou must be in (0, 1), got {self.merge_iou}")
        return self


def size_band(px_size: float, edges: Sequence[float]) -> int:
    """Index of the size band containing ``px_size`` (clamped to the outer bands)."""
    k = int(np.searchsorted(np.asarray(edges[1:-1]), px_size, side="right"))
    return min(max(k, 0), len(edges) - 2)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    config.validate()
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    n_zones = int(rng.integers(1, min(config.max_zones, n_obj) + 1))

    weights = np.asarray(config.band_weights, dtype=float)
    weights = weights / weights.sum()
    edges = np.log2(np.asarray(config.band_edges, dtype=float))
    margin = config.band_edges[-1]
    zones = []
    for _ in range(n_zones):
        category = int(rng.integers(config.n_categories))
        band = int(rng.choice(len(weights), p=weights))
        base = rng.uniform(edges[band], edges[band + 1])
        cx = rng.uniform(margin, config.width - margin)
        cy = rng.uniform(margin, config.height - margin)
        zones.append((category, base, cx, cy))

    assignment = list(range(n_zones)) + [int(z) for z in rng.integers(n_zones, size=n_obj - n_zones)]
    objects = []
    for idx, z in enumerate(assignment):
        category, base, cx, cy = zones[z]
        log_px = np.clip(base + rng.normal(0.0, config.size_jitter), edges[0], edges[-1])
        px = 2.0**log_px
        aspect = 2.0 ** rng.normal(0.0, config.aspect_jitter)
        w = min(px * math.sqrt(aspect), config.width)
        h = min(px / math.sqrt(aspect), config.height)
        ox = cx + rng.normal(0.0, config.cluster_spread)
        oy = cy + rng.normal(0.0, config.cluster_spread)
        x = float(np.clip(ox - w / 2, 0.0, config.width - w))
        y = float(np.clip(oy - h / 2, 0.0, config.height - h))
        objects.append(SceneObject(id=idx, category=category, bbox=(x, y, float(w), float(h))))

    return Scene(config.width, config.height, tuple(objects), int(seed), config.n_categories)


# -- geometry -----------------------------------------------------------------


def box_iou(a: BBox, b: BBox) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def box_union(boxes: Sequence[BBox]) -> BBox:
    x0 = min(b[0] for b in boxes)
    y0 = min(b[1] for b in boxes)
    x1 = max(b[0] + b[2] for b in boxes)
    y1 = max(b[1] + b[3] for b in boxes)
    return (x0, y0, x1 - x0, y1 - y0)


def boxes_intersect(a: BBox, b: BBox) -> bool:
    return (
        min(a[0] + a[2], b[0] + b[2]) > max(a[0], b[0])
        and min(a[1] + a[3], b[1] + b[3]) > max(a[1], b[1])
    )


def expand_region(bbox: BBox, beta: float, scene_bounds: tuple[float, float]) -> BBox:
    """Grow a box by ``beta`` around its center, then clip to the scene."""
    if beta < 1:
        raise ValueError(f"beta must be >= 1, got {beta}")
    x, y, w, h = bbox
    width, height = scene_bounds
    new_w = min(beta * w, width)
    new_h = min(beta * h, height)
    cx, cy = x + w / 2.0, y + h / 2.0
    x0 = max(0.0, cx - new_w / 2.0)
    y0 = max(0.0, cy - new_h / 2.0)
    x1 = min(float(width), cx + new_w / 2.0)
    y1 = min(float(height), cy + new_h / 2.0)
    return (x0, y0, x1 - x0, y1 - y0)


# -- cluster regions -------------------------------------------------------------


@dataclass(frozen=True)
class ClusterRegion:
    id: int
    bbox: BBox
    objects: tuple[SceneObject, ...]
    n_categories: int

    @property
    def members(self) -> tuple[int, ...]:
        return tuple(o.id for o in self.objects)

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return (x + w / 2.0, y + h / 2.0)

    @property
    def category_counts(self) -> np.ndarray:
        return np.bincount([o.category for o in self.objects], minlength=self.n_categories)

    @property
    def dominant_category(self) -> int:
        # argmax returns the first (smallest) index on ties
        return int(np.argmax(self.category_counts))

    @property
    def mean_px_size(self) -> float:
        return float(np.mean([o.px_size for o in self.objects]))


def _components(n: int, edges: list[tuple[int, int]]) -> list[list[int]]:
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def merge_clusters(
    expanded_boxes: Sequence[BBox],
    iou_threshold: float,
    objects: Sequence[SceneObject] | None = None,
    n_categories: int | None = None,
) -> list[ClusterRegion]:
    """Greedy IoU-threshold union of boxes into cluster regions.

    Boxes whose pairwise IoU reaches the threshold are joined transitively;
    the union boxes are then re-merged until every pair of output regions is
    below the threshold. ``objects[k]`` is the object behind ``expanded_boxes[k]``;
    without it, each box stands in for a category-0 object of its own size.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    boxes = [tuple(float(v) for v in b) for b in expanded_boxes]
    if not boxes:
        return []
    if objects is None:
        objects = [SceneObject(id=k, category=0, bbox=b) for k, b in enumerate(boxes)]
    if len(objects) != len(boxes):
        raise ValueError("objects and expanded_boxes must have equal length")
    if n_categories is None:
        n_categories = max(o.category for o in objects) + 1

    groups = [[k] for k in range(len(boxes))]
    group_boxes = list(boxes)
    while True:
        edges = [
            (i, j)
            for i in range(len(group_boxes))
            for j in range(i + 1, len(group_boxes))
            if box_iou(group_boxes[i], group_boxes[j]) >= iou_threshold
        ]
        if not edges:
            break
        merged = []
        for comp in _components(len(groups), edges):
            merged.append(sorted(k for g in comp for k in groups[g]))
        groups = sorted(merged, key=lambda g: g[0])
        group_boxes = [box_union([boxes[k] for k in g]) for g in groups]

    return [
        ClusterRegion(
            id=rid,
            bbox=group_boxes[rid],
            objects=tuple(objects[k] for k in g),
            n_categories=n_categories,
        )
        for rid, g in enumerate(groups)
    ]


def build_regions(scene: Scene, beta: float = 1.5, iou_threshold: float = 0.3) -> list[ClusterRegion]:
    expanded = [expand_region(o.bbox, beta, scene.bounds) for o in scene.objects]
    return merge_clusters(expanded, iou_threshold, scene.objects, scene.n_categories)


# -- detector surrogate ------------------------------------------------------------


@dataclass(frozen=True)
class DetectorModel:
    optimal_px: float = 40.0
    loc_width: float = 1.0
    cls_width: float = 0.7
    max_scale: float = 2.5
    artifact_slope: float = 0.4
    noise_sd: float = 0.0
    category_offsets: tuple[float, ...] = (-0.5, -1 / 6, 1 / 6, 0.5)

    @staticmethod
    def default_offsets(n_categories: int) -> tuple[float, ...]:
        return tuple(float(v) for v in np.linspace(-0.5, 0.5, n_categories))

    def validate(self, n_categories: int | None = None) -> "DetectorModel":
        for name in ("optimal_px", "loc_width", "cls_width", "max_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"detector.{name} must be positive")
        if self.artifact_slope < 0 or self.noise_sd < 0:
            raise ConfigError("detector.artifact_slope and detector.noise_sd must be >= 0")
        if n_categories is not None and len(self.category_offsets) < n_categories:
            raise ConfigError(
                f"detector.category_offsets has {len(self.category_offsets)} entries, "
                f"need {n_categories}"
            )
        return self

    def optimum(self, category: int) -> float:
        if not 0 <= category < len(self.category_offsets):
            raise ConfigError(f"no detector optimum offset for category {category}")
        return self.optimal_px * 2.0 ** self.category_offsets[category]

    def artifact_penalty(self, scale: float) -> float:
        return self.artifact_slope * max(0.0, scale - self.max_scale)

    def quality(self, px_size, category, scale: float, width: float) -> np.ndarray:
        """Noise-free quality curve on the log2 effective-size axis, clamped to [0, 1]."""
        px = np.asarray(px_size, dtype=float)
        opt = np.array([self.optimum(int(c)) for c in np.atleast_1d(category)])
        z = np.log2(scale * px / opt)
        return np.clip(np.exp(-(z**2) / (2.0 * width**2)) - self.artifact_penalty(scale), 0.0, 1.0)


@dataclass
class DetectionOutcome:
    region_id: int
    scale: float
    iou: np.ndarray
    label_correct: np.ndarray

    @property
    def n_objects(self) -> int:
        return int(self.iou.size)

    @property
    def eligible(self) -> np.ndarray:
        return self.iou >= 0.5

    @property
    def mean_iou(self) -> float:
        return float(self.iou.mean()) if self.iou.size else 0.0


def simulate_detection(
    region: ClusterRegion, scale: float, model: DetectorModel, rng_seed=None
) -> DetectionOutcome:
    """Simulated fine-detection result for every member of ``region`` at ``scale``.

    With ``noise_sd == 0`` the outcome is deterministic: IoU follows the
    quality curve exactly and a label is correct iff its class-quality curve
    reaches 0.5. Otherwise IoU gets Gaussian noise and labels are Bernoulli
    draws from the class-quality curve, both from ``rng_seed``.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    px = np.array([o.px_size for o in region.objects])
    cats = np.array([o.category for o in region.objects])
    loc = model.quality(px, cats, scale, model.loc_width)
    cls = model.quality(px, cats, scale, model.cls_width)
    if model.noise_sd == 0:
        iou = loc
        correct = cls >= 0.5
    else:
        rng = np.random.default_rng(rng_seed)
        iou = np.clip(loc + rng.normal(0.0, model.noise_sd, size=loc.shape), 0.0, 1.0)
        correct = rng.random(size=cls.shape) < cls
    return DetectionOutcome(region.id, float(scale), iou, correct)


# -- JSON fixtures -------------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "width": scene.width,
        "height": scene.height,
        "seed": scene.seed,
        "n_categories": scene.n_categories,
        "objects": [
            {"id": o.id, "category": o.category, "bbox": list(o.bbox), "px_size": o.px_size}
            for o in scene.objects
        ],
    }


def scene_from_dict(blob: dict) -> Scene:
    objects = tuple(
        SceneObject(id=int(o["id"]), category=int(o["category"]), bbox=tuple(o["bbox"]))
        for o in blob["objects"]
    )
    return Scene(int(blob["width"]), int(blob["height"]), objects, int(blob["seed"]),
                 int(blob["n_categories"]))


def region_to_dict(region: ClusterRegion) -> dict:
    return {
        "id": region.id,
        "bbox": list(region.bbox),
        "members": list(region.members),
        "center": list(region.center),
        "dominant_category": region.dominant_category,
        "mean_px_size": region.mean_px_size,
    }


def dumps(blob) -> str:
    # json writes floats with repr, the shortest string that round-trips exactly
    return json.dumps(blob, indent=2, sort_keys=True)


def config_to_dict(config) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}
