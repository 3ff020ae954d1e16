"""Network components: shared encoder, skip-connected upscaler, detection
heads, pooled-pair transformation predictor and the any-resolution
restoration decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError

STRIDE = 32


@dataclass(frozen=True)
class BackboneConfig:
    """Four stages at strides 4/8/16/32 relative to the input."""

    stage_widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    in_channels: int = 3


@dataclass
class FeaturePyramid:
    """Stage outputs at /8, /16 and /32 of the input."""

    f8: torch.Tensor
    f16: torch.Tensor
    f32: torch.Tensor

    def stage(self, index: int) -> torch.Tensor:
        """Stage 2 -> /8, stage 3 -> /16, stage 4 -> /32."""
        try:
            return {2: self.f8, 3: self.f16, 4: self.f32}[index]
        except KeyError:
            raise ShapeError(f"no such backbone stage {index}") from None


@dataclass
class NetworkOutput:
    """Detection maps at /4 of the input, batched.

    heatmap: (B, C, h, w) in (0,1); size_map: (B, 2, h, w) nonnegative,
    in /4 units; offset_map: (B, 2, h, w) in [0,1).
    """

    heatmap: torch.Tensor
    size_map: torch.Tensor
    offset_map: torch.Tensor


@dataclass
class TransformationPrediction:
    """Predicted (kernel size, scale, noise) triple, each in [0,1]."""

    values: torch.Tensor  # (B, 3)

    @property
    def k_hat(self) -> torch.Tensor:
        return self.values[:, 0]

    @property
    def s_hat(self) -> torch.Tensor:
        return self.values[:, 1]

    @property
    def n_hat(self) -> torch.Tensor:
        return self.values[:, 2]


def _norm(channels: int) -> nn.Module:
    return nn.GroupNorm(1, channels)


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1),
        _norm(cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Strided conv backbone; one parameter set serves both siamese branches."""

    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        w1, w2, w3, w4 = config.stage_widths
        self.config = config
        self.stem = nn.Sequential(
            _conv_block(config.in_channels, w1, stride=2),
            _conv_block(w1, w1, stride=2),
        )
        self.stage2 = nn.Sequential(_conv_block(w1, w2, stride=2), _conv_block(w2, w2))
        self.stage3 = nn.Sequential(_conv_block(w2, w3, stride=2), _conv_block(w3, w3))
        self.stage4 = nn.Sequential(_conv_block(w3, w4, stride=2), _conv_block(w4, w4))

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.ndim != 4:
            raise ShapeError(f"expected (B, C, H, W) input, got shape {tuple(images.shape)}")
        h, w = images.shape[2], images.shape[3]
        if h % STRIDE or w % STRIDE:
            raise ShapeError(f"input sides must be multiples of {STRIDE}, got {h}x{w}")
        x = self.stem(images)
        f8 = self.stage2(x)
        f16 = self.stage3(f8)
        f32 = self.stage4(f16)
        return FeaturePyramid(f8=f8, f16=f16, f32=f32)


class Upscaler(nn.Module):
    """Three x2 deconvolutions from /32 back to /4, with 1x1-projected
    additive skips from the /16 and /8 stages."""

    def __init__(self, config: BackboneConfig = BackboneConfig(), widths: tuple[int, int, int] = (64, 32, 32)):
        super().__init__()
        _, w2, w3, w4 = config.stage_widths
        u1, u2, u3 = widths
        self.out_channels = u3

        def deconv(cin, cout):
            return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1), _norm(cout), nn.ReLU(inplace=True))

        self.up1 = deconv(w4, u1)
        self.up2 = deconv(u1, u2)
        self.up3 = deconv(u2, u3)
        self.skip16 = nn.Conv2d(w3, u1, 1)
        self.skip8 = nn.Conv2d(w2, u2, 1)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        f8, f16, f32 = pyramid.f8, pyramid.f16, pyramid.f32
        if f16.shape[2:] != tuple(2 * s for s in f32.shape[2:]) or f8.shape[2:] != tuple(
            4 * s for s in f32.shape[2:]
        ):
            raise ShapeError("feature pyramid spatial sizes are inconsistent")
        x = self.up1(f32) + self.skip16(f16)
        x = self.up2(x) + self.skip8(f8)
        return self.up3(x)


class DetectionHead(nn.Module):
    """Three small conv heads on the /4 feature: class-center heatmap,
    box size and sub-cell center offset."""

    # sigmoid outputs are clamped away from {0,1} so the focal loss stays finite
    HEATMAP_EPS = 1e-4

    def __init__(self, in_channels: int = 32, num_classes: int = 3):
        super().__init__()
        self.num_classes = num_classes

        def head(out_channels):
            return nn.Sequential(
                nn.Conv2d(in_channels, in_channels, 3, 1, 1),
                nn.ReLU(inplace=True),
                nn.Conv2d(in_channels, out_channels, 1),
            )

        self.center = head(num_classes)
        self.size = head(2)
        self.offset = head(2)
        # bias the heatmap towards background so early training is stable
        nn.init.constant_(self.center[-1].bias, -2.19)

    def forward(self, f4: torch.Tensor) -> NetworkOutput:
        eps = self.HEATMAP_EPS
        heat = torch.sigmoid(self.center(f4)).clamp(eps, 1.0 - eps)
        size = F.softplus(self.size(f4))
        offset = torch.sigmoid(self.offset(f4))
        return NetworkOutput(heatmap=heat, size_map=size, offset_map=offset)


class TransformPredictor(nn.Module):
    """Predicts the normalized degradation triple from a pooled feature pair.

    Both features are globally average pooled (making the input resolution
    irrelevant), concatenated, and passed through two fully connected
    layers with a final logistic squashing.
    """

    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.channels = channels
        self.fc1 = nn.Linear(2 * channels, hidden)
        self.fc2 = nn.Linear(hidden, 3)
        self.calls = 0

    def forward(self, feat_clean: torch.Tensor, feat_degraded: torch.Tensor) -> TransformationPrediction:
        if feat_clean.shape[1] != self.channels or feat_degraded.shape[1] != self.channels:
            raise ShapeError(
                f"expected {self.channels}-channel features, got "
                f"{feat_clean.shape[1]} and {feat_degraded.shape[1]}"
            )
        self.calls += 1
        pooled = torch.cat([feat_clean.mean(dim=(2, 3)), feat_degraded.mean(dim=(2, 3))], dim=1)
        return TransformationPrediction(torch.sigmoid(self.fc2(F.relu(self.fc1(pooled)))))


class RestorationDecoder(nn.Module):
    """Reconstructs a clean image at any requested resolution.

    The /4 feature is projected, bilinearly resized to target/4, refined by
    an additive residual stack and expanded to pixels by a x4 sub-pixel
    rearrangement.
    """

    def __init__(self, in_channels: int = 32, width: int = 16, out_channels: int = 3):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, width, 1)
        self.residual = nn.Sequential(
            nn.Conv2d(width, width, 3, 1, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, 1, 1),
        )
        self.expand = nn.Conv2d(width, out_channels * 16, 3, 1, 1)
        self.shuffle = nn.PixelShuffle(4)
        self.calls = 0

    def forward(self, f4: torch.Tensor, target_size: tuple[int, int]) -> torch.Tensor:
        th, tw = target_size
        if th % 4 or tw % 4 or th < 4 or tw < 4:
            raise ShapeError(f"restoration target {target_size} must be positive multiples of 4")
        self.calls += 1
        x = self.proj(f4)
        x = F.interpolate(x, size=(th // 4, tw // 4), mode="bilinear", align_corners=False)
        x = x + self.residual(x)
        return torch.sigmoid(self.shuffle(self.expand(x)))


class Detector(nn.Module):
    """Full model: encoder + upscaler + detection heads, with optional
    transformation-prediction and restoration decoders.

    Disabled decoders are simply absent, so configurations share the exact
    same parameter set for the common components.
    """

    def __init__(
        self,
        num_classes: int = 3,
        backbone: BackboneConfig = BackboneConfig(),
        up_widths: tuple[int, int, int] = (64, 32, 32),
        with_transform_head: bool = False,
        with_restore_head: bool = False,
        transform_stage: int = 3,
        transform_hidden: int = 64,
        restore_width: int = 16,
    ):
        super().__init__()
        if transform_stage not in (2, 3, 4):
            raise ShapeError(f"transform_stage must be 2, 3 or 4, got {transform_stage}")
        self.backbone_config = backbone
        self.transform_stage = transform_stage
        self.encoder = Encoder(backbone)
        self.upscaler = Upscaler(backbone, up_widths)
        self.heads = DetectionHead(self.upscaler.out_channels, num_classes)
        stage_channels = {2: backbone.stage_widths[1], 3: backbone.stage_widths[2], 4: backbone.stage_widths[3]}
        self.transform_head = (
            TransformPredictor(stage_channels[transform_stage], transform_hidden)
            if with_transform_head
            else None
        )
        self.restore_head = (
            RestorationDecoder(self.upscaler.out_channels, restore_width) if with_restore_head else None
        )

    def encode(self, images: torch.Tensor) -> FeaturePyramid:
        return self.encoder(images)

    def detect(self, f4: torch.Tensor) -> NetworkOutput:
        return self.heads(f4)

    def predict_transform(self, pyramid_clean: FeaturePyramid, pyramid_degraded: FeaturePyramid):
        if self.transform_head is None:
            raise ShapeError("model was built without a transformation predictor")
        return self.transform_head(
            pyramid_clean.stage(self.transform_stage), pyramid_degraded.stage(self.transform_stage)
        )

    def restore(self, f4: torch.Tensor, target_size: tuple[int, int]) -> torch.Tensor:
        if self.restore_head is None:
            raise ShapeError("model was built without a restoration decoder")
        return self.restore_head(f4, target_size)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Split parameters into the base group and the transformation-head
        group (which trains at its own learning rate)."""
        transform = list(self.transform_head.parameters()) if self.transform_head else []
        transform_ids = {id(p) for p in transform}
        base = [p for p in self.parameters() if id(p) not in transform_ids]
        return {"base": base, "transform": transform}

    def aux_call_counts(self) -> dict[str, int]:
        return {
            "transform": self.transform_head.calls if self.transform_head else 0,
            "restore": self.restore_head.calls if self.restore_head else 0,
        }
