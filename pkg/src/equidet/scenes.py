"""Synthetic detection scenes: geometric shapes on smooth backgrounds.

Three object classes (circle, square, triangle) rasterized with 4x
supersampled anti-aliasing, so that blur/downsample/noise degradations act
on smooth edges rather than binary masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import degrade
from .errors import ConfigurationError, DatasetError
from .imgio import save_png, load_png, sha256_file

CLASS_NAMES = ("circle", "square", "triangle")
BACKGROUNDS = ("flat", "gradient", "textured")
_SUPERSAMPLE = 4
_SPLIT_SALT = {"train": 1, "test": 2}


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ConfigurationError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass
class Annotation:
    boxes: list[BoundingBox]
    class_ids: list[int]

    def __post_init__(self):
        if len(self.boxes) != len(self.class_ids):
            raise ConfigurationError("boxes and class_ids must have equal length")

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 float in [0,1]
    annotation: Annotation
    scene_id: int = 0


@dataclass(frozen=True)
class SceneConfig:
    image_side: int = 128
    num_classes: int = 3
    objects_per_image: tuple[int, int] = (1, 4)
    object_side_range: tuple[float, float] = (16.0, 56.0)
    background: str = "textured"
    rng_seed: int = 0

    def validate(self) -> None:
        if self.image_side <= 0 or self.image_side % 128:
            raise ConfigurationError("image_side must be a positive multiple of 128")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigurationError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        lo, hi = self.objects_per_image
        if not 0 < lo <= hi:
            raise ConfigurationError("objects_per_image range invalid")
        slo, shi = self.object_side_range
        if not 2 <= slo <= shi <= self.image_side:
            raise ConfigurationError("object sizes must fit inside the image")
        if self.background not in BACKGROUNDS:
            raise ConfigurationError(f"unknown background {self.background!r}")


def _background(rng: np.random.Generator, config: SceneConfig) -> np.ndarray:
    side = config.image_side
    if config.background == "flat":
        color = rng.uniform(0.12, 0.48, size=3)
        return np.full((side, side, 3), color, dtype=np.float32)
    if config.background == "gradient":
        c0 = rng.uniform(0.12, 0.48, size=3)
        c1 = rng.uniform(0.12, 0.48, size=3)
        theta = rng.uniform(0.0, 2 * np.pi)
        ys, xs = np.mgrid[0:side, 0:side] / (side - 1)
        t = (xs * np.cos(theta) + ys * np.sin(theta) + 1.0) / 2.0
        return (c0 + (c1 - c0) * t[:, :, None]).astype(np.float32)
    # textured: low-frequency noise, bilinearly upsampled from a coarse grid
    grid = rng.uniform(0.12, 0.48, size=(9, 9, 3)).astype(np.float32)
    return degrade.resample(grid, (side, side), "bilinear")


def _shape_alpha(class_id: int, box: BoundingBox, apex_frac: float, side: int) -> np.ndarray:
    """Anti-aliased coverage mask of one shape on the full canvas."""
    ss = _SUPERSAMPLE
    n = side * ss
    coords = (np.arange(n, dtype=np.float64) + 0.5) / ss
    xs, ys = np.meshgrid(coords, coords)

    name = CLASS_NAMES[class_id]
    if name == "circle":
        cx, cy = box.center
        r = min(box.width, box.height) / 2.0
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    elif name == "square":
        mask = (xs >= box.x1) & (xs < box.x2) & (ys >= box.y1) & (ys < box.y2)
    else:  # triangle: base spans the bottom edge, apex on the top edge
        ax = box.x1 + apex_frac * box.width
        verts = [(ax, box.y1), (box.x1, box.y2), (box.x2, box.y2)]
        mask = np.ones_like(xs, dtype=bool)
        for (px, py), (qx, qy) in zip(verts, verts[1:] + verts[:1]):
            # interior lies on the negative-cross side for this winding
            cross = (qx - px) * (ys - py) - (qy - py) * (xs - px)
            mask &= cross <= 0
    down = mask.reshape(side, ss, side, ss).mean(axis=(1, 3))
    return down.astype(np.float32)


def generate_scene(rng: np.random.Generator, config: SceneConfig) -> Scene:
    """Draw one random scene; fully deterministic under the rng state."""
    config.validate()
    side = config.image_side
    image = _background(rng, config)

    lo, hi = config.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    boxes: list[BoundingBox] = []
    class_ids: list[int] = []
    for _ in range(count):
        class_id = int(rng.integers(config.num_classes))
        osize = float(rng.uniform(*config.object_side_range))
        # keep heavy overlap rare; accept the last try regardless
        for _attempt in range(25):
            x1 = float(rng.uniform(0.0, side - osize))
            y1 = float(rng.uniform(0.0, side - osize))
            box = BoundingBox(x1, y1, x1 + osize, y1 + osize)
            if all(_box_iou(box, b) < 0.25 for b in boxes):
                break
        apex_frac = float(rng.uniform(0.2, 0.8))
        color = rng.uniform(0.55, 0.95, size=3).astype(np.float32)
        alpha = _shape_alpha(class_id, box, apex_frac, side)[:, :, None]
        image = image * (1.0 - alpha) + color * alpha
        boxes.append(box)
        class_ids.append(class_id)

    return Scene(np.clip(image, 0.0, 1.0).astype(np.float32), Annotation(boxes, class_ids))


def _box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def scale_annotation(annotation: Annotation, s: float) -> Annotation:
    """Divide all coordinates by s (class ids unchanged)."""
    boxes = [BoundingBox(b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s) for b in annotation.boxes]
    return Annotation(boxes, list(annotation.class_ids))


def scene_rng(seed: int, split: str, scene_id: int) -> np.random.Generator:
    """Independent substream for one scene of one split."""
    return np.random.default_rng((seed, _SPLIT_SALT[split], scene_id))


def annotation_to_dict(scene: Scene) -> dict:
    h, w = scene.image.shape[:2]
    return {
        "scene_id": scene.scene_id,
        "width": w,
        "height": h,
        "boxes": [b.as_list() for b in scene.annotation.boxes],
        "class_ids": list(scene.annotation.class_ids),
    }


def annotation_from_dict(record: dict) -> Annotation:
    boxes = [BoundingBox(*map(float, b)) for b in record["boxes"]]
    return Annotation(boxes, [int(c) for c in record["class_ids"]])


def generate_dataset(config: SceneConfig, count: int, split: str, out_dir: Path | str) -> Path:
    """Write ``count`` scenes (PNG + JSON sidecar) and a checksum manifest.

    Returns the manifest path.  Regeneration with the same config is
    byte-identical.
    """
    if split not in _SPLIT_SALT:
        raise ConfigurationError(f"split must be one of {tuple(_SPLIT_SALT)}")
    config.validate()
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "annotations").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {root}: {exc}") from exc

    entries = []
    for i in range(count):
        scene = replace(generate_scene(scene_rng(config.rng_seed, split, i), config), scene_id=i)
        img_rel = f"images/scene_{i:05d}.png"
        ann_rel = f"annotations/scene_{i:05d}.json"
        save_png(scene.image, root / img_rel)
        with open(root / ann_rel, "w") as f:
            json.dump(annotation_to_dict(scene), f)
        entries.append(img_rel)
        entries.append(ann_rel)

    manifest = root / "manifest.jsonl"
    with open(manifest, "w") as f:
        for rel in entries:
            f.write(json.dumps({"path": rel, "sha256": sha256_file(root / rel)}) + "\n")
    return manifest


def load_dataset(root: Path | str) -> list[Scene]:
    """Read back every scene listed in a dataset manifest."""
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise DatasetError(f"no dataset manifest at {manifest}")
    scenes = []
    with open(manifest) as f:
        records = [json.loads(line) for line in f if line.strip()]
    for rec in records:
        if not rec["path"].startswith("annotations/"):
            continue
        with open(root / rec["path"]) as g:
            ann = json.load(g)
        img = load_png(root / rec["path"].replace("annotations/", "images/").replace(".json", ".png"))
        scenes.append(Scene(img, annotation_from_dict(ann), int(ann["scene_id"])))
    return scenes
