"""Synthetic low-resolution degradation engine.

Produces degraded copies of high resolution images by blurring with a
random Gaussian kernel, downsampling by a random non-integral ratio and
adding white Gaussian noise, in that order.  Also provides the normalized
(kernel size, scale, noise) triple used to supervise transformation
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .errors import ConfigurationError, ParameterError, ShapeError

KERNEL_TYPES = ("none", "isotropic", "anisotropic")
RESAMPLE_METHODS = ("nearest", "bilinear", "bicubic")
KERNEL_SIZES = (7, 9, 11, 13, 15, 17, 19, 21)
MAX_KERNEL_SIZE = 21
NOISE_SIGMA_MAX = 25.0 / 255.0
SCALE_MIN, SCALE_MAX = 1.0, 4.0

# Catmull-Rom coefficient for the bicubic resampler.
BICUBIC_A = -0.5


@dataclass(frozen=True)
class BlurKernel:
    """Normalized 2-D blur kernel; size 0 means "no blur"."""

    size: int
    weights: np.ndarray

    def __post_init__(self):
        if self.size == 0:
            if self.weights.size != 0:
                raise ParameterError("size-0 kernel must carry no weights")
            return
        if self.size < 3 or self.size % 2 == 0:
            raise ParameterError(f"kernel size must be odd and >= 3, got {self.size}")
        if self.weights.shape != (self.size, self.size):
            raise ParameterError("kernel weights do not match declared size")


@dataclass(frozen=True)
class DegradationParams:
    """Full parameterization of one degradation transformation."""

    kernel_type: str = "none"
    kernel_size: int = 0
    width_major: float = 0.0
    width_minor: float = 0.0
    angle: float = 0.0
    scale: float = 1.0
    resample_method: str = "nearest"
    noise_sigma: float = 0.0
    output_size: tuple[int, int] = (0, 0)

    def validate(self, stride: int = 32) -> None:
        if self.kernel_type not in KERNEL_TYPES:
            raise ParameterError(f"unknown kernel type {self.kernel_type!r}")
        if self.resample_method not in RESAMPLE_METHODS:
            raise ParameterError(f"unknown resample method {self.resample_method!r}")
        if self.kernel_type == "none":
            if self.kernel_size != 0:
                raise ParameterError("kernel_size must be 0 for type 'none'")
        else:
            if self.kernel_size not in KERNEL_SIZES:
                raise ParameterError(f"kernel_size {self.kernel_size} not in {KERNEL_SIZES}")
            if not (0.0 < self.width_minor <= self.width_major):
                raise ParameterError("need 0 < width_minor <= width_major")
        if not (SCALE_MIN <= self.scale <= SCALE_MAX + 1e-9):
            raise ParameterError(f"scale {self.scale} outside [{SCALE_MIN}, {SCALE_MAX}]")
        if not (0.0 <= self.noise_sigma <= NOISE_SIGMA_MAX + 1e-12):
            raise ParameterError(f"noise_sigma {self.noise_sigma} outside [0, {NOISE_SIGMA_MAX}]")
        h, w = self.output_size
        if h < 1 or w < 1 or h % stride or w % stride:
            raise ParameterError(f"output_size {self.output_size} must be positive multiples of {stride}")


@dataclass(frozen=True)
class TransformationTarget:
    """Degradation attributes normalized to [0,1], one scalar per type."""

    k_norm: float
    s_norm: float
    n_norm: float

    def as_array(self) -> np.ndarray:
        return np.array([self.k_norm, self.s_norm, self.n_norm], dtype=np.float32)


@dataclass(frozen=True)
class SamplerConfig:
    """Distribution ranges for random degradation sampling."""

    hr_side: int = 128
    stride: int = 32
    scale_range: tuple[float, float] = (1.0, 4.0)
    iso_width_range: tuple[float, float] = (0.1, 2.4)
    aniso_major_range: tuple[float, float] = (0.5, 6.0)
    kernel_sizes: tuple[int, ...] = KERNEL_SIZES
    noise_sigma_range: tuple[float, float] = (0.0, NOISE_SIGMA_MAX)
    rng_seed: int = 0

    def validate(self) -> None:
        if self.hr_side <= 0 or self.hr_side % 128:
            raise ConfigurationError(f"hr_side must be a positive multiple of 128, got {self.hr_side}")
        if (self.hr_side // 4) % self.stride:
            raise ConfigurationError("hr_side/4 must be a multiple of the stride")
        lo, hi = self.scale_range
        if not (SCALE_MIN <= lo <= hi <= SCALE_MAX):
            raise ConfigurationError(f"scale_range {self.scale_range} must lie inside [1, 4]")
        for name, (a, b) in (
            ("iso_width_range", self.iso_width_range),
            ("aniso_major_range", self.aniso_major_range),
            ("noise_sigma_range", self.noise_sigma_range),
        ):
            if not (0 <= a <= b):
                raise ConfigurationError(f"{name} {a, b} is not a valid range")
        if any(k % 2 == 0 or k < 3 for k in self.kernel_sizes):
            raise ConfigurationError("kernel sizes must be odd and >= 3")


def identity_params(hr_side: int) -> DegradationParams:
    """The do-nothing transformation: no blur, scale 1, no noise."""
    return DegradationParams(output_size=(hr_side, hr_side))


def snap_output_side(hr_side: int, raw_scale: float, stride: int = 32) -> tuple[int, float]:
    """Snap hr_side/raw_scale to the nearest stride multiple and return
    (output side, effective scale).  The admissible sides are the stride
    multiples in [hr_side/4, hr_side]."""
    side = int(np.floor(hr_side / raw_scale / stride + 0.5)) * stride
    side = min(max(side, hr_side // 4), hr_side)
    return side, hr_side / side


def sample_degradation(rng: np.random.Generator, config: SamplerConfig) -> DegradationParams:
    """Draw one random degradation transformation.

    Kernel type is uniform over none/isotropic/anisotropic; size, widths and
    angle come from the type's ranges.  A continuous scale is drawn and then
    snapped so the output side is a multiple of the network stride.
    """
    config.validate()

    ktype = KERNEL_TYPES[rng.integers(len(KERNEL_TYPES))]
    if ktype == "none":
        ksize, major, minor, angle = 0, 0.0, 0.0, 0.0
    elif ktype == "isotropic":
        ksize = int(config.kernel_sizes[rng.integers(len(config.kernel_sizes))])
        major = minor = float(rng.uniform(*config.iso_width_range))
        angle = 0.0
    else:
        ksize = int(config.kernel_sizes[rng.integers(len(config.kernel_sizes))])
        major = float(rng.uniform(*config.aniso_major_range))
        minor = float(rng.uniform(0.1, major))
        angle = float(rng.uniform(0.0, np.pi))

    raw_scale = float(rng.uniform(*config.scale_range))
    side, scale = snap_output_side(config.hr_side, raw_scale, config.stride)
    method = RESAMPLE_METHODS[rng.integers(len(RESAMPLE_METHODS))]
    sigma = float(rng.uniform(*config.noise_sigma_range))

    return DegradationParams(
        kernel_type=ktype,
        kernel_size=ksize,
        width_major=major,
        width_minor=minor,
        angle=angle,
        scale=scale,
        resample_method=method,
        noise_sigma=sigma,
        output_size=(side, side),
    )


def build_kernel(params: DegradationParams) -> BlurKernel:
    """Materialize the Gaussian kernel described by ``params``.

    Weights follow exp(-0.5 u^T Sigma^-1 u) on integer offsets u from the
    kernel center, Sigma = R(angle) diag(major^2, minor^2) R(angle)^T,
    normalized to sum 1.  Type "none" yields the empty size-0 kernel.
    """
    if params.kernel_type == "none":
        return BlurKernel(0, np.empty((0, 0), dtype=np.float64))
    if params.width_major <= 0 or params.width_minor <= 0:
        raise ParameterError("kernel widths must be positive")

    size = params.kernel_size
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    xs, ys = np.meshgrid(coords, coords)

    c, s = np.cos(params.angle), np.sin(params.angle)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([params.width_major**2, params.width_minor**2]) @ rot.T
    inv = np.linalg.inv(cov)

    quad = inv[0, 0] * xs * xs + (inv[0, 1] + inv[1, 0]) * xs * ys + inv[1, 1] * ys * ys
    weights = np.exp(-0.5 * quad)
    weights /= weights.sum()
    return BlurKernel(size, weights)


def convolve(image: np.ndarray, kernel: BlurKernel) -> np.ndarray:
    """Blur each channel with the kernel under reflect boundary padding.

    A size-0 kernel returns the input unchanged.
    """
    if kernel.size == 0:
        return image
    h, w = image.shape[:2]
    if kernel.size > 2 * min(h, w):
        raise ParameterError(f"kernel size {kernel.size} too large for {h}x{w} image")

    k32 = np.ascontiguousarray(kernel.weights, dtype=np.float32)
    src = np.ascontiguousarray(image, dtype=np.float32)
    out = np.empty_like(src)
    for ch in range(src.shape[2]):
        # BORDER_REFLECT_101 mirrors without repeating the edge sample,
        # matching np.pad(mode="reflect").
        out[:, :, ch] = cv2.filter2D(src[:, :, ch], -1, k32, borderType=cv2.BORDER_REFLECT_101)
    return np.clip(out, 0.0, 1.0)


def _cubic_weight(d: np.ndarray) -> np.ndarray:
    """Catmull-Rom kernel (a = -0.5) evaluated at |distance| d."""
    d = np.abs(d)
    a = BICUBIC_A
    near = (a + 2) * d**3 - (a + 3) * d**2 + 1
    far = a * (d**3 - 5 * d**2 + 8 * d - 4)
    return np.where(d <= 1, near, np.where(d < 2, far, 0.0))


def _axis_taps(n_in: int, n_out: int, method: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-sample source indices and weights along one axis.

    Uses the half-pixel-center convention; indices are clamped at the
    borders (edge padding).
    """
    step = n_in / n_out
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * step - 0.5
    base = np.floor(centers).astype(np.int64)
    frac = centers - base
    if method == "bilinear":
        idx = np.stack([base, base + 1], axis=1)
        wts = np.stack([1.0 - frac, frac], axis=1)
    elif method == "bicubic":
        idx = np.stack([base - 1, base, base + 1, base + 2], axis=1)
        wts = np.stack(
            [_cubic_weight(frac + 1), _cubic_weight(frac), _cubic_weight(1 - frac), _cubic_weight(2 - frac)],
            axis=1,
        )
    else:
        raise ParameterError(f"unknown resample method {method!r}")
    return np.clip(idx, 0, n_in - 1), wts


def resample(image: np.ndarray, out_size: tuple[int, int], method: str) -> np.ndarray:
    """Resize to ``out_size`` with the given interpolation, clamped to [0,1]."""
    h_out, w_out = out_size
    if h_out < 1 or w_out < 1:
        raise ParameterError(f"out_size must be at least 1x1, got {out_size}")
    h_in, w_in = image.shape[:2]

    if method == "nearest":
        rows = np.minimum((np.arange(h_out) + 0.5) * (h_in / h_out), h_in - 1).astype(np.int64)
        cols = np.minimum((np.arange(w_out) + 0.5) * (w_in / w_out), w_in - 1).astype(np.int64)
        return image[rows][:, cols].copy()

    ridx, rwts = _axis_taps(h_in, h_out, method)
    cidx, cwts = _axis_taps(w_in, w_out, method)
    # rows first: gather (h_out, taps, w_in, C) and reduce the tap axis
    tmp = np.einsum("ot,otwc->owc", rwts, image[ridx].astype(np.float64))
    out = np.einsum("ot,hotc->hoc", cwts, tmp[:, cidx])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise of std ``sigma``, then clamp."""
    if sigma < 0 or sigma > NOISE_SIGMA_MAX + 1e-12:
        raise ParameterError(f"sigma {sigma} outside [0, {NOISE_SIGMA_MAX}]")
    noise = rng.normal(0.0, sigma, size=image.shape)
    return np.clip(image.astype(np.float64) + noise, 0.0, 1.0).astype(np.float32)


def degrade(image: np.ndarray, params: DegradationParams, rng: np.random.Generator) -> np.ndarray:
    """Apply blur, downsampling and noise, in exactly that order."""
    params.validate()
    h, w = image.shape[:2]
    h_out, w_out = params.output_size
    if round(params.scale * h_out) != h or round(params.scale * w_out) != w:
        raise ShapeError(
            f"image {h}x{w} inconsistent with scale {params.scale} and output {params.output_size}"
        )
    out = convolve(image, build_kernel(params))
    out = resample(out, params.output_size, params.resample_method)
    return add_noise(out, params.noise_sigma, rng)


def normalize_params(params: DegradationParams) -> TransformationTarget:
    """Map raw degradation attributes to the [0,1] supervision triple.

    "No blur" maps to k_norm = 0, i.e. the lower end of the kernel-size
    axis.
    """
    return TransformationTarget(
        k_norm=params.kernel_size / MAX_KERNEL_SIZE,
        s_norm=(params.scale - SCALE_MIN) / (SCALE_MAX - SCALE_MIN),
        n_norm=params.noise_sigma / NOISE_SIGMA_MAX,
    )


def admissible_output_sides(hr_side: int, stride: int = 32) -> list[int]:
    """All output sides reachable by the sampler for a given input side."""
    return list(range(hr_side // 4, hr_side + 1, stride))
