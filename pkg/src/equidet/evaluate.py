"""Evaluation: AP at IoU 0.5, size-bucketed AP, restoration PSNR,
transformation-prediction error, throughput and the benchmark harness."""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import degrade as dg
from . import scenes as sc
from .errors import BenchmarkError, ConfigurationError, ShapeError
from .imgio import save_png
from .model import STRIDE, Detector, decode_detections
from .train import model_from_checkpoint

# LR-pixel area thresholds for the small/medium/large buckets
SMALL_MAX_AREA = 12.0**2
MEDIUM_MAX_AREA = 32.0**2

PROTOCOLS = ("random", "down2", "down4")
_PROTOCOL_SALT = {"random": 11, "down2": 12, "down4": 13}
_PROTOCOL_SCALE = {"random": (1.0, 4.0), "down2": (2.0, 2.0), "down4": (4.0, 4.0)}


@dataclass(frozen=True)
class Detection:
    box: sc.BoundingBox
    class_id: int
    score: float


@dataclass
class EvalSample:
    """One degraded test pair with everything needed to score a model."""

    hr: np.ndarray
    lr: np.ndarray
    params: dg.DegradationParams
    target: np.ndarray  # normalized (k, s, n)
    annotation_lr: sc.Annotation
    scene_id: int


@dataclass
class EvalReport:
    config_fingerprint: str
    num_images: int
    per_class_ap50: dict[int, float | None]
    mean_ap50: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    mean_psnr: float | None
    transform_mae: tuple[float, float, float] | None
    fps: float | None
    hardware: str

    def to_record(self) -> dict:
        rec = {
            "config_fingerprint": self.config_fingerprint,
            "num_images": self.num_images,
            "mean_ap50": self.mean_ap50,
            "ap_small": self.ap_small,
            "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "mean_psnr": self.mean_psnr,
            "fps": self.fps,
            "hardware": self.hardware,
        }
        rec.update({f"ap50_class{c}": v for c, v in sorted(self.per_class_ap50.items())})
        if self.transform_mae is not None:
            rec["mae_kernel"], rec["mae_scale"], rec["mae_noise"] = self.transform_mae
        return rec


def iou(a: sc.BoundingBox, b: sc.BoundingBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def infer(model: Detector, image: np.ndarray, max_dets: int = 64, score_threshold: float = 0.05) -> list[Detection]:
    """Detect on one image: encoder, upscaler and detection heads only.

    The transformation and restoration decoders are never executed.
    """
    h, w = image.shape[:2]
    if h % STRIDE or w % STRIDE:
        raise ShapeError(f"image sides must be multiples of {STRIDE}, got {h}x{w}")
    model.eval()
    with torch.no_grad():
        tensor = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).unsqueeze(0).float()
        output = model.detect(model.upscaler(model.encode(tensor)))
    return [Detection(box, cid, score) for box, cid, score in decode_detections(output, max_dets, score_threshold)[0]]


def _match_class(
    detections: list[tuple[int, Detection]],
    gts: dict[int, list[sc.BoundingBox]],
    iou_threshold: float,
) -> tuple[list[tuple[float, bool, float | None, float]], int]:
    """Greedy score-ordered matching for one class.

    detections: (image index, Detection) pairs.  Returns per-detection
    records (score, is_tp, matched gt area or None, detection area) in
    score order, plus the ground-truth count.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1].score, detections[i][0], i))
    used: dict[int, list[bool]] = {img: [False] * len(boxes) for img, boxes in gts.items()}
    records = []
    for i in order:
        img, det = detections[i]
        candidates = gts.get(img, [])
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(candidates):
            if used[img][j]:
                continue
            v = iou(det.box, gt_box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            used[img][best_j] = True
            records.append((det.score, True, candidates[best_j].area, det.box.area))
        else:
            records.append((det.score, False, None, det.box.area))
    gt_count = sum(len(b) for b in gts.values())
    return records, gt_count


def _ap_from_records(records: list[tuple[float, bool]], gt_count: int) -> float | None:
    """Area under the precision envelope from score-ordered TP/FP flags."""
    if gt_count == 0:
        return None
    if not records:
        return 0.0
    tp = np.cumsum([1.0 if is_tp else 0.0 for _, is_tp in records])
    fp = np.cumsum([0.0 if is_tp else 1.0 for _, is_tp in records])
    recall = tp / gt_count
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def _gather_by_class(
    detections_per_image: list[list[Detection]],
    annotations_per_image: list[sc.Annotation],
    num_classes: int,
):
    dets: dict[int, list[tuple[int, Detection]]] = {c: [] for c in range(num_classes)}
    gts: dict[int, dict[int, list[sc.BoundingBox]]] = {c: {} for c in range(num_classes)}
    for img, dlist in enumerate(detections_per_image):
        for d in dlist:
            dets[d.class_id].append((img, d))
    for img, ann in enumerate(annotations_per_image):
        for box, cid in zip(ann.boxes, ann.class_ids):
            gts[cid].setdefault(img, []).append(box)
    return dets, gts


def compute_ap(
    detections_per_image: list[list[Detection]],
    annotations_per_image: list[sc.Annotation],
    iou_threshold: float = 0.5,
    num_classes: int = 3,
) -> tuple[dict[int, float | None], float | None]:
    """Per-class AP (all-point interpolation) and their mean.

    Detections are sorted by score; each matches the highest-IoU unmatched
    ground truth of its class at or above the IoU threshold.  Classes with
    no ground truth report None and are excluded from the mean.
    """
    dets, gts = _gather_by_class(detections_per_image, annotations_per_image, num_classes)
    per_class: dict[int, float | None] = {}
    for c in range(num_classes):
        records, gt_count = _match_class(dets[c], gts[c], iou_threshold)
        per_class[c] = _ap_from_records([(s, tp) for s, tp, _, _ in records], gt_count)
    defined = [v for v in per_class.values() if v is not None]
    return per_class, (float(np.mean(defined)) if defined else None)


def _bucket(area: float) -> str:
    if area < SMALL_MAX_AREA:
        return "small"
    if area < MEDIUM_MAX_AREA:
        return "medium"
    return "large"


def size_bucketed_ap(
    detections_per_image: list[list[Detection]],
    annotations_per_image: list[sc.Annotation],
    iou_threshold: float = 0.5,
    num_classes: int = 3,
) -> dict[str, float | None]:
    """AP restricted to small/medium/large ground truths (LR-pixel areas).

    Matching runs once against all ground truths; a detection matched to a
    ground truth outside the bucket is ignored for that bucket, and an
    unmatched detection counts as a false positive in the bucket of its own
    area.  Empty buckets report None.
    """
    dets, gts = _gather_by_class(detections_per_image, annotations_per_image, num_classes)
    out: dict[str, float | None] = {}
    for bucket in ("small", "medium", "large"):
        bucket_aps = []
        for c in range(num_classes):
            records, _ = _match_class(dets[c], gts[c], iou_threshold)
            filtered = []
            for score, is_tp, gt_area, det_area in records:
                if is_tp:
                    if _bucket(gt_area) == bucket:
                        filtered.append((score, True))
                elif _bucket(det_area) == bucket:
                    filtered.append((score, False))
            gt_count = sum(
                1 for boxes in gts[c].values() for b in boxes if _bucket(b.area) == bucket
            )
            ap = _ap_from_records(filtered, gt_count)
            if ap is not None:
                bucket_aps.append(ap)
        out[bucket] = float(np.mean(bucket_aps)) if bucket_aps else None
    return out


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) with unit peak, capped at 99 dB."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return 99.0
    return 10.0 * np.log10(1.0 / mse)


def transformation_error(model: Detector, samples: list[EvalSample]) -> tuple[float, float, float]:
    """Mean absolute error of the predicted (kernel, scale, noise) triple."""
    if model.transform_head is None:
        raise ShapeError("model has no transformation predictor")
    model.eval()
    errors = []
    with torch.no_grad():
        for s in samples:
            hr = torch.from_numpy(s.hr).permute(2, 0, 1).unsqueeze(0).float()
            lr = torch.from_numpy(s.lr).permute(2, 0, 1).unsqueeze(0).float()
            pred = model.predict_transform(model.encode(hr), model.encode(lr)).values[0].numpy()
            errors.append(np.abs(pred - s.target))
    mean = np.mean(errors, axis=0)
    return float(mean[0]), float(mean[1]), float(mean[2])


def best_constant_baseline(values: np.ndarray) -> tuple[float, float]:
    """The constant predictor minimizing mean absolute error (the median)
    and its error on the same values."""
    c = float(np.median(values))
    return c, float(np.mean(np.abs(values - c)))


def hardware_descriptor() -> str:
    return f"{platform.machine()}/{platform.system()} cpu-threads={torch.get_num_threads()}"


def measure_fps(
    model: Detector,
    image_size: tuple[int, int] = (64, 64),
    warmup_iters: int = 3,
    timed_iters: int = 20,
    include_restore: bool = False,
    seed: int = 0,
) -> float:
    """Mean single-image throughput over timed_iters calls after warmup."""
    if timed_iters < 10:
        raise ConfigurationError("timed_iters must be >= 10")
    rng = np.random.default_rng(seed)
    image = rng.random((image_size[0], image_size[1], 3), dtype=np.float32)
    tensor = torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0)

    model.eval()

    def run_once():
        with torch.no_grad():
            f4 = model.upscaler(model.encode(tensor))
            output = model.detect(f4)
            decode_detections(output, 64, 0.05)
            if include_restore:
                model.restore(f4, (image_size[0] * 4, image_size[1] * 4))

    for _ in range(warmup_iters):
        run_once()
    start = time.perf_counter()
    for _ in range(timed_iters):
        run_once()
    return timed_iters / (time.perf_counter() - start)


def build_degraded_eval_set(
    scenes: list[sc.Scene], protocol: str, seed: int, hr_side: int = 128
) -> list[EvalSample]:
    """Degrade a test split deterministically under (seed, protocol).

    Every model evaluated with the same arguments sees identical samples.
    "down2"/"down4" fix the downsampling rate; kernel and noise stay random.
    """
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"protocol must be one of {PROTOCOLS}")
    sampler = dg.SamplerConfig(hr_side=hr_side, scale_range=_PROTOCOL_SCALE[protocol])
    rng = np.random.default_rng((seed, _PROTOCOL_SALT[protocol]))
    samples = []
    for scene in scenes:
        params = dg.sample_degradation(rng, sampler)
        lr = dg.degrade(scene.image, params, rng)
        samples.append(
            EvalSample(
                hr=scene.image,
                lr=lr,
                params=params,
                target=dg.normalize_params(params).as_array(),
                annotation_lr=sc.scale_annotation(scene.annotation, params.scale),
                scene_id=scene.scene_id,
            )
        )
    return samples


def evaluate_model(
    model: Detector,
    samples: list[EvalSample],
    num_classes: int = 3,
    score_threshold: float = 0.05,
    max_dets: int = 64,
    config_fingerprint: str = "",
    measure_speed: bool = False,
) -> EvalReport:
    """Score one model on a prepared eval set."""
    detections = [infer(model, s.lr, max_dets, score_threshold) for s in samples]
    annotations = [s.annotation_lr for s in samples]
    per_class, mean_ap = compute_ap(detections, annotations, 0.5, num_classes)
    buckets = size_bucketed_ap(detections, annotations, 0.5, num_classes)

    mean_psnr = None
    if model.restore_head is not None and samples:
        model.eval()
        values = []
        with torch.no_grad():
            for s in samples:
                lr = torch.from_numpy(s.lr).permute(2, 0, 1).unsqueeze(0).float()
                restored = model.restore(model.upscaler(model.encode(lr)), s.hr.shape[:2])
                values.append(psnr(restored[0].permute(1, 2, 0).numpy(), s.hr))
        mean_psnr = float(np.mean(values))

    mae = transformation_error(model, samples) if model.transform_head is not None and samples else None
    fps = measure_fps(model) if measure_speed else None
    return EvalReport(
        config_fingerprint=config_fingerprint,
        num_images=len(samples),
        per_class_ap50=per_class,
        mean_ap50=mean_ap,
        ap_small=buckets["small"],
        ap_medium=buckets["medium"],
        ap_large=buckets["large"],
        mean_psnr=mean_psnr,
        transform_mae=mae,
        fps=fps,
        hardware=hardware_descriptor(),
    )


def _draw_detections(image: np.ndarray, detections: list[Detection]) -> np.ndarray:
    colors = np.array([[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.3, 0.5, 1.0]])
    out = image.copy()
    h, w = out.shape[:2]
    for det in detections:
        color = colors[det.class_id % len(colors)]
        x1, y1 = int(max(0, det.box.x1)), int(max(0, det.box.y1))
        x2, y2 = int(min(w - 1, det.box.x2)), int(min(h - 1, det.box.y2))
        out[y1 : y2 + 1, [x1, x2]] = color
        out[[y1, y2], x1 : x2 + 1] = color
    return out


def _plot_pr_curves(detections, annotations, num_classes, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dets, gts = _gather_by_class(detections, annotations, num_classes)
    fig, ax = plt.subplots(figsize=(5, 4))
    for c in range(num_classes):
        records, gt_count = _match_class(dets[c], gts[c], 0.5)
        if gt_count == 0:
            continue
        tp = np.cumsum([1.0 if r[1] else 0.0 for r in records])
        fp = np.cumsum([0.0 if r[1] else 1.0 for r in records])
        recall = tp / gt_count
        precision = tp / np.maximum(tp + fp, 1e-12)
        name = sc.CLASS_NAMES[c] if c < len(sc.CLASS_NAMES) else str(c)
        ax.plot(recall, precision, label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def run_benchmark(
    checkpoints: dict[str, Path | str],
    test_dir: Path | str,
    protocol: str,
    out_dir: Path | str,
    seed: int = 0,
    max_images: int | None = None,
    measure_speed: bool = True,
    artifact_images: int = 4,
) -> dict[str, EvalReport]:
    """Evaluate several checkpoints on one shared degraded test set.

    Writes a comparison table (text + jsonl), PR curves, annotated
    detections and restored images under out_dir.  All models see identical
    degraded samples for the given (seed, protocol).
    """
    test_dir = Path(test_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, path in checkpoints.items():
        if not Path(path).is_file():
            raise BenchmarkError(f"missing checkpoint for {name!r}: {path}")

    scenes = sc.load_dataset(test_dir)
    if max_images is not None:
        scenes = scenes[:max_images]
    if not scenes:
        raise BenchmarkError(f"test split under {test_dir} is empty")
    hr_side = scenes[0].image.shape[0]
    samples = build_degraded_eval_set(scenes, protocol, seed, hr_side)

    reports: dict[str, EvalReport] = {}
    rows = []
    for name, path in checkpoints.items():
        model, config = model_from_checkpoint(path)
        report = evaluate_model(
            model,
            samples,
            num_classes=config.num_classes,
            config_fingerprint=config.fingerprint(),
            measure_speed=measure_speed,
        )
        reports[name] = report
        rows.append(
            {
                "name": name,
                "scheme": config.scheme,
                "transform_head": config.with_transform_head,
                "restore_head": config.with_restore_head,
                "protocol": protocol,
                **report.to_record(),
            }
        )

        detections = [infer(model, s.lr) for s in samples[:artifact_images]]
        for i, (s, dets) in enumerate(zip(samples[:artifact_images], detections)):
            save_png(_draw_detections(s.lr, dets), out / f"{name}_det_{i}.png")
        if model.restore_head is not None:
            with torch.no_grad():
                for i, s in enumerate(samples[:artifact_images]):
                    lr = torch.from_numpy(s.lr).permute(2, 0, 1).unsqueeze(0).float()
                    restored = model.restore(model.upscaler(model.encode(lr)), s.hr.shape[:2])
                    save_png(restored[0].permute(1, 2, 0).numpy(), out / f"{name}_restored_{i}.png")
        all_dets = [infer(model, s.lr) for s in samples]
        _plot_pr_curves(all_dets, [s.annotation_lr for s in samples], config.num_classes, out / f"{name}_pr.png")

    _write_table(rows, out, protocol)
    return reports


def _fmt(value, width=8) -> str:
    if value is None:
        return "n/a".rjust(width)
    if isinstance(value, bool):
        return ("yes" if value else "no").rjust(width)
    if isinstance(value, float):
        return f"{value:.3f}".rjust(width)
    return str(value).rjust(width)


def _write_table(rows: list[dict], out: Path, protocol: str) -> None:
    with open(out / f"results_{protocol}.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    columns = [
        ("name", 16),
        ("scheme", 7),
        ("transform_head", 15),
        ("restore_head", 13),
        ("mean_ap50", 10),
        ("ap_small", 9),
        ("ap_medium", 10),
        ("ap_large", 9),
        ("mean_psnr", 10),
        ("mae_scale", 10),
        ("fps", 8),
    ]
    lines = ["".join(key.rjust(width) for key, width in columns)]
    for row in rows:
        lines.append("".join(_fmt(row.get(key), width) for key, width in columns))
    text = "\n".join(lines) + "\n"
    with open(out / f"table_{protocol}.txt", "w") as f:
        f.write(text)
