"""Detection target construction and peak decoding on the /4 grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import TargetError
from ..scenes import Annotation, BoundingBox
from .net import NetworkOutput

OUT_STRIDE = 4


@dataclass
class DetectionTargets:
    """Per-image (or batched) regression targets on the /4 grid."""

    heatmap: np.ndarray  # (C, h, w), peak 1 at object centers
    size: np.ndarray  # (2, h, w), (w, h) in grid units at center cells
    offset: np.ndarray  # (2, h, w), fractional center position
    mask: np.ndarray  # (h, w) bool, True at annotated center cells
    count: int


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest radius keeping IoU >= min_overlap for a box of this size
    under center displacement (the usual three-case bound)."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - np.sqrt(b1**2 - 4 * a1 * c1)) / (2 * a1)

    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 - np.sqrt(b2**2 - 4 * a2 * c2)) / (2 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + np.sqrt(b3**2 - 4 * a3 * c3)) / (2 * a3)
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, cx: int, cy: int, radius: int) -> None:
    """Splat exp(-(dx^2+dy^2)/(2 sigma^2)) with peak 1 at (cx, cy),
    combining with existing values by elementwise max."""
    diameter = 2 * radius + 1
    sigma = diameter / 6.0
    coords = np.arange(diameter, dtype=np.float64) - radius
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    gaussian = np.exp(-(gx**2 + gy**2) / (2 * sigma**2))

    h, w = heatmap.shape
    left, right = min(cx, radius), min(w - cx, radius + 1)
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    patch = gaussian[radius - top : radius + bottom, radius - left : radius + right]
    region = heatmap[cy - top : cy + bottom, cx - left : cx + right]
    np.maximum(region, patch, out=region)


def build_detection_targets(annotation: Annotation, out_size: tuple[int, int], num_classes: int) -> DetectionTargets:
    """Build /4-grid targets for boxes given in image pixel coordinates.

    out_size is the (H, W) of the image the boxes live in; the target grid
    is out_size / 4.  Overlapping splats combine by max; size and offset
    targets are written at each object's (floored) center cell.
    """
    h_img, w_img = out_size
    gh, gw = h_img // OUT_STRIDE, w_img // OUT_STRIDE
    heatmap = np.zeros((num_classes, gh, gw), dtype=np.float32)
    size = np.zeros((2, gh, gw), dtype=np.float32)
    offset = np.zeros((2, gh, gw), dtype=np.float32)
    mask = np.zeros((gh, gw), dtype=bool)

    for box, class_id in zip(annotation.boxes, annotation.class_ids):
        if not (0 <= box.x1 and box.x2 <= w_img + 1e-6 and 0 <= box.y1 and box.y2 <= h_img + 1e-6):
            raise TargetError(f"box {box} outside {w_img}x{h_img} image")
        if not 0 <= class_id < num_classes:
            raise TargetError(f"class id {class_id} out of range")
        cx, cy = box.center
        gx, gy = cx / OUT_STRIDE, cy / OUT_STRIDE
        ix, iy = min(int(gx), gw - 1), min(int(gy), gh - 1)
        gw_box, gh_box = box.width / OUT_STRIDE, box.height / OUT_STRIDE
        radius = max(0, int(gaussian_radius(gh_box, gw_box)))
        draw_gaussian(heatmap[class_id], ix, iy, radius)
        heatmap[class_id, iy, ix] = 1.0
        size[:, iy, ix] = (gw_box, gh_box)
        offset[:, iy, ix] = (gx - ix, gy - iy)
        mask[iy, ix] = True

    return DetectionTargets(heatmap, size, offset, mask, count=len(annotation))


def decode_detections(
    output: NetworkOutput, max_dets: int = 64, score_threshold: float = 0.0
) -> list[list[tuple[BoundingBox, int, float]]]:
    """Peak-pick detections from network maps, one list per batch element.

    Keeps heatmap cells that are 3x3 local maxima, takes the top max_dets
    above the score threshold and inverts the target encoding:
    box center = (cell + offset) * 4, box size = size * 4, clipped to the
    image bounds.
    """
    heat, size_map, offset_map = output.heatmap, output.size_map, output.offset_map
    batch, num_classes, gh, gw = heat.shape
    w_img, h_img = gw * OUT_STRIDE, gh * OUT_STRIDE

    with torch.no_grad():
        peaks = heat * (heat == F.max_pool2d(heat, 3, stride=1, padding=1))
        flat = peaks.reshape(batch, -1)
        k = min(max_dets, flat.shape[1])
        scores, indices = torch.topk(flat, k, dim=1)

    results = []
    for b in range(batch):
        dets: list[tuple[BoundingBox, int, float]] = []
        for score, idx in zip(scores[b].tolist(), indices[b].tolist()):
            if score <= score_threshold:
                continue
            class_id, rest = divmod(idx, gh * gw)
            iy, ix = divmod(rest, gw)
            ox, oy = offset_map[b, 0, iy, ix].item(), offset_map[b, 1, iy, ix].item()
            bw = size_map[b, 0, iy, ix].item() * OUT_STRIDE
            bh = size_map[b, 1, iy, ix].item() * OUT_STRIDE
            cx, cy = (ix + ox) * OUT_STRIDE, (iy + oy) * OUT_STRIDE
            x1, x2 = max(0.0, cx - bw / 2), min(float(w_img), cx + bw / 2)
            y1, y2 = max(0.0, cy - bh / 2), min(float(h_img), cy + bh / 2)
            if x2 <= x1 or y2 <= y1:
                continue
            dets.append((BoundingBox(x1, y1, x2, y2), class_id, score))
        results.append(dets)
    return results


def targets_to_tensors(target_list: list[DetectionTargets], dtype=torch.float32) -> "BatchedTargets":
    """Stack per-image targets into batched tensors for the loss."""
    return BatchedTargets(
        heatmap=torch.from_numpy(np.stack([t.heatmap for t in target_list])).to(dtype),
        size=torch.from_numpy(np.stack([t.size for t in target_list])).to(dtype),
        offset=torch.from_numpy(np.stack([t.offset for t in target_list])).to(dtype),
        mask=torch.from_numpy(np.stack([t.mask for t in target_list])),
        count=sum(t.count for t in target_list),
    )


@dataclass
class BatchedTargets:
    heatmap: torch.Tensor
    size: torch.Tensor
    offset: torch.Tensor
    mask: torch.Tensor
    count: int
