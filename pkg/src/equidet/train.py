"""Training: per-batch degradation generation, siamese forward pass,
three-term loss, SGD schedule with warmup and step decay, checkpointing
and the training-scheme matrix."""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import degrade as dg
from . import scenes as sc
from .errors import ConfigurationError, DatasetError, NumericError
from .model import (
    BackboneConfig,
    Detector,
    LossWeights,
    build_detection_targets,
    loss_detection,
    loss_restoration,
    loss_transformation,
    targets_to_tensors,
    total_loss,
)

SCHEMES = ("N", "L", "N+L")

# Named model/scheme configurations compared in the benchmark: clean-only
# and mixed-data baselines, then the mixed-data model with the restoration
# decoder, the transformation predictor, or both.
SCHEME_MATRIX: dict[str, dict] = {
    "vanilla_N": {"scheme": "N", "with_transform_head": False, "with_restore_head": False},
    "vanilla_L": {"scheme": "L", "with_transform_head": False, "with_restore_head": False},
    "vanilla_NL": {"scheme": "N+L", "with_transform_head": False, "with_restore_head": False},
    "transform_only": {"scheme": "N+L", "with_transform_head": True, "with_restore_head": False},
    "restore_only": {"scheme": "N+L", "with_transform_head": False, "with_restore_head": True},
    "full": {"scheme": "N+L", "with_transform_head": True, "with_restore_head": True},
}


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "N+L"
    with_transform_head: bool = True
    with_restore_head: bool = True
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1e-3
    transform_lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 500
    decay_milestones: tuple[int, ...] | None = None  # default: (0.72, 0.9) * epochs
    hr_side: int = 128
    seed: int = 0
    transform_stage: int = 3
    stage_widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    num_classes: int = 3
    eval_every: int = 10  # epochs between held-out evaluations; 0 = never
    eval_max_images: int = 100

    def milestones(self) -> tuple[int, ...]:
        if self.decay_milestones is not None:
            return tuple(self.decay_milestones)
        return (int(0.72 * self.epochs), int(0.9 * self.epochs))

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.base_lr <= 0 or self.transform_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        ms = self.milestones()
        if self.epochs > 0 and (list(ms) != sorted(set(ms)) or any(m >= self.epochs for m in ms)):
            raise ConfigurationError(f"milestones {ms} must be strictly increasing and < epochs")
        if self.transform_stage not in (2, 3, 4):
            raise ConfigurationError("transform_stage must be 2, 3 or 4")
        if self.hr_side % 128:
            raise ConfigurationError("hr_side must be a multiple of 128")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Batch:
    hr: torch.Tensor  # (B, 3, H, H)
    lr: torch.Tensor  # (B, 3, h, h), one shared resolution
    transform_targets: torch.Tensor  # (B, 3)
    targets: "object"  # BatchedTargets on the LR /4 grid
    params: list[dg.DegradationParams]
    identity: bool  # True when lr is bitwise hr


def _to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()


def build_model(config: TrainConfig) -> Detector:
    return Detector(
        num_classes=config.num_classes,
        backbone=BackboneConfig(stage_widths=config.stage_widths),
        with_transform_head=config.with_transform_head,
        with_restore_head=config.with_restore_head,
        transform_stage=config.transform_stage,
    )


def make_batch(batch_scenes: list[sc.Scene], rng: np.random.Generator, config: TrainConfig) -> Batch:
    """Degrade one batch of scenes according to the training scheme.

    Scale and output resolution are drawn once per batch (all low-res
    images in a batch share a resolution); kernel and noise are drawn per
    sample.  Scheme "N" never degrades, "L" always does, and "N+L" flips a
    coin per batch.
    """
    if len(batch_scenes) != config.batch_size:
        raise ConfigurationError(f"expected {config.batch_size} scenes, got {len(batch_scenes)}")
    sampler = dg.SamplerConfig(hr_side=config.hr_side)

    degrade_batch = {"N": False, "L": True, "N+L": None}[config.scheme]
    if degrade_batch is None:
        degrade_batch = bool(rng.random() < 0.5)

    hr_images = [s.image for s in batch_scenes]
    ident = dg.identity_params(config.hr_side)

    if not degrade_batch:
        params = [ident] * len(batch_scenes)
        lr_images = hr_images
        scale = 1.0
        out_size = (config.hr_side, config.hr_side)
    else:
        shared = dg.sample_degradation(rng, sampler)
        scale, out_size = shared.scale, shared.output_size
        params = [
            replace(dg.sample_degradation(rng, sampler), scale=scale, output_size=out_size)
            for _ in batch_scenes
        ]
        lr_images = [dg.degrade(img, p, rng) for img, p in zip(hr_images, params)]

    target_list = [
        build_detection_targets(sc.scale_annotation(s.annotation, scale), out_size, config.num_classes)
        for s in batch_scenes
    ]
    transform_targets = np.stack([dg.normalize_params(p).as_array() for p in params])

    hr_t = _to_tensor(hr_images)
    return Batch(
        hr=hr_t,
        lr=hr_t if not degrade_batch else _to_tensor(lr_images),
        transform_targets=torch.from_numpy(transform_targets),
        targets=targets_to_tensors(target_list),
        params=params,
        identity=not degrade_batch,
    )


def lr_at(iteration: int, epoch: int, config: TrainConfig) -> tuple[float, float]:
    """(base group, transformation group) learning rates for a step.

    Linear warmup from a tenth of the rate over the first warmup_iters
    iterations, then a x0.1 decay at each milestone epoch.
    """
    if iteration < config.warmup_iters:
        factor = 0.1 + 0.9 * iteration / config.warmup_iters
    else:
        factor = 1.0
    factor *= 0.1 ** sum(epoch >= m for m in config.milestones())
    return config.base_lr * factor, config.transform_lr * factor


def make_optimizer(model: Detector, config: TrainConfig) -> torch.optim.SGD:
    groups = model.parameter_groups()
    return torch.optim.SGD(
        [
            {"params": groups["base"], "lr": config.base_lr},
            {"params": groups["transform"], "lr": config.transform_lr},
        ],
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def train_step(model: Detector, batch: Batch, optimizer: torch.optim.Optimizer, config: TrainConfig) -> dict[str, float]:
    """One forward/backward/update; returns the loss terms as floats."""
    model.train()
    weights = LossWeights()

    pyr_lr = model.encode(batch.lr)
    if config.with_transform_head:
        # identity batches carry the same tensor on both branches; one
        # shared-weight pass yields the exact same features and gradients
        pyr_hr = pyr_lr if batch.identity else model.encode(batch.hr)
        pred = model.predict_transform(pyr_hr, pyr_lr)
        l_transform = loss_transformation(pred.values, batch.transform_targets)
    else:
        l_transform = torch.zeros((), dtype=batch.lr.dtype)

    f4 = model.upscaler(pyr_lr)
    output = model.detect(f4)
    l_detect = loss_detection(output, batch.targets, weights)["total"]

    if config.with_restore_head:
        restored = model.restore(f4, batch.hr.shape[2:])
        l_restore = loss_restoration(restored, batch.hr)
    else:
        l_restore = torch.zeros((), dtype=batch.lr.dtype)

    loss = total_loss(l_detect, l_transform, l_restore, weights)
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite loss (detect={l_detect}, transform={l_transform}, restore={l_restore}); "
            f"batch params: {batch.params[0]}"
        )

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return {
        "loss_detect": float(l_detect),
        "loss_transform": float(l_transform),
        "loss_restore": float(l_restore),
        "loss_total": float(loss),
    }


def _set_lrs(optimizer: torch.optim.Optimizer, base_lr: float, transform_lr: float) -> None:
    optimizer.param_groups[0]["lr"] = base_lr
    optimizer.param_groups[1]["lr"] = transform_lr


def save_checkpoint(path: Path, model, optimizer, config: TrainConfig, epoch: int, iteration: int, rng) -> None:
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "config": asdict(config),
            "config_fingerprint": config.fingerprint(),
            "epoch": epoch,
            "iteration": iteration,
            "numpy_rng": rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        },
        path,
    )


def load_checkpoint(path: Path | str) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    cfg = dict(state["config"])
    for key in ("decay_milestones", "stage_widths"):
        if cfg.get(key) is not None:
            cfg[key] = tuple(cfg[key])
    state["config"] = TrainConfig(**cfg)
    return state


def model_from_checkpoint(path: Path | str) -> tuple[Detector, TrainConfig]:
    state = load_checkpoint(path)
    model = build_model(state["config"])
    model.load_state_dict(state["model"])
    model.eval()
    return model, state["config"]


def train_loop(
    config: TrainConfig,
    dataset_dir: Path | str,
    out_dir: Path | str,
    resume_from: Path | str | None = None,
    log=None,
) -> tuple[Path, list[dict]]:
    """Run the full schedule; returns (final checkpoint path, history).

    Expects dataset_dir/train (and dataset_dir/test when eval_every > 0).
    Writes checkpoints at each decay milestone and at the end, plus a
    metrics.jsonl history and a run manifest.
    """
    config.validate()
    dataset_dir = Path(dataset_dir)
    train_dir = dataset_dir / "train"
    if not (train_dir / "manifest.jsonl").is_file():
        raise DatasetError(f"no training split under {dataset_dir}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_scenes = sc.load_dataset(train_dir)
    if len(train_scenes) < config.batch_size:
        raise DatasetError(
            f"training split has {len(train_scenes)} scenes, need at least {config.batch_size}"
        )

    torch.manual_seed(config.seed)
    model = build_model(config)
    optimizer = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    start_epoch, iteration = 0, 0
    history: list[dict] = []

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state["config_fingerprint"] != config.fingerprint():
            raise ConfigurationError("checkpoint config does not match the requested config")
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        start_epoch, iteration = state["epoch"], state["iteration"]
        rng.bit_generator.state = state["numpy_rng"]
        torch.set_rng_state(state["torch_rng"])

    manifest = {
        "config": asdict(config),
        "config_fingerprint": config.fingerprint(),
        "version": _package_version(),
        "mixed_scheme": "per-batch coin flip (N+L degrades each batch with probability 1/2)",
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, default=str)

    metrics_path = out / "metrics.jsonl"
    metrics_file = open(metrics_path, "a" if resume_from else "w")
    steps_per_epoch = len(train_scenes) // config.batch_size
    milestones = set(config.milestones())

    try:
        for epoch in range(start_epoch, config.epochs):
            order = rng.permutation(len(train_scenes))
            for step in range(steps_per_epoch):
                idx = order[step * config.batch_size : (step + 1) * config.batch_size]
                batch = make_batch([train_scenes[i] for i in idx], rng, config)
                _set_lrs(optimizer, *lr_at(iteration, epoch, config))
                losses = train_step(model, batch, optimizer, config)
                iteration += 1
                record = {"epoch": epoch, "iteration": iteration, **losses}
                if step == steps_per_epoch - 1:
                    if config.eval_every and (epoch + 1) % config.eval_every == 0:
                        record["eval_ap50"] = _quick_eval(model, dataset_dir, config)
                    history.append(record)
                    metrics_file.write(json.dumps(record) + "\n")
                    metrics_file.flush()
                    if log:
                        log(record)
            if (epoch + 1) in milestones:
                save_checkpoint(
                    out / f"checkpoint_epoch{epoch + 1:03d}.pt", model, optimizer, config, epoch + 1, iteration, rng
                )
        final = out / "checkpoint_final.pt"
        save_checkpoint(final, model, optimizer, config, config.epochs, iteration, rng)
    finally:
        metrics_file.close()
    return final, history


def _quick_eval(model, dataset_dir: Path, config: TrainConfig) -> float | None:
    from . import evaluate as ev

    test_dir = Path(dataset_dir) / "test"
    if not (test_dir / "manifest.jsonl").is_file():
        return None
    scenes = sc.load_dataset(test_dir)[: config.eval_max_images]
    samples = ev.build_degraded_eval_set(scenes, "random", seed=config.seed, hr_side=config.hr_side)
    report = ev.evaluate_model(model, samples, num_classes=config.num_classes)
    return report.mean_ap50


def _package_version() -> str:
    from . import __version__

    return __version__


def train_matrix(
    base_config: TrainConfig,
    dataset_dir: Path | str,
    out_dir: Path | str,
    config_names: tuple[str, ...] = ("vanilla_N", "vanilla_NL", "restore_only", "full"),
    seeds: tuple[int, ...] = (0, 1, 2),
    log=None,
) -> dict[tuple[str, int], Path]:
    """Train every (configuration, seed) pair of the scheme comparison.

    Returns checkpoint paths keyed by (config name, seed).  Runs that
    already produced a final checkpoint are skipped, so the matrix can be
    resumed cheaply.
    """
    out = Path(out_dir)
    checkpoints: dict[tuple[str, int], Path] = {}
    for name in config_names:
        if name not in SCHEME_MATRIX:
            raise ConfigurationError(f"unknown matrix configuration {name!r}")
        for seed in seeds:
            run_dir = out / f"{name}_seed{seed}"
            final = run_dir / "checkpoint_final.pt"
            if not final.is_file():
                cfg = replace(base_config, seed=seed, **SCHEME_MATRIX[name])
                if log:
                    log({"run": f"{name}_seed{seed}", "status": "training"})
                train_loop(cfg, dataset_dir, run_dir, log=log)
            checkpoints[(name, seed)] = final
    return checkpoints
