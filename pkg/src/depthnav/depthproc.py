"""Depth-image preprocessing: min-pooling dilation, stereo-style degradation,
and normalization for the encoder.

Depth images carry a validity mask. Invalid pixels model stereo dropout and
are mapped to "far" (1.0) when normalized, so dilation and encoding never
hallucinate near obstacles out of missing data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .scene import CameraModel

_DATASET_MAGIC = b"DTD1"


@dataclass
class DepthImage:
    """H x W metric depth grid plus per-pixel validity.

    Depth is float32 meters; values at invalid pixels are unspecified (kept
    for storage but never interpreted).
    """

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.ndim != 2 or self.depth.shape != self.valid.shape:
            raise ValueError(f"depth {self.depth.shape} and valid {self.valid.shape} must be equal 2-D shapes")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def copy(self) -> "DepthImage":
        return DepthImage(self.depth.copy(), self.valid.copy())


@dataclass
class StereoDegradeParams:
    """Parametric stand-in for stereo-matching artifacts.

    subpixel_levels is the disparity quantization denominator (None disables
    quantization, the infinite-resolution limit). noise_sigma_coeff scales the
    depth-squared noise typical of triangulation error. min_depth is the
    sensor's closest valid range; it sets the unmatched left-border width.
    """

    subpixel_levels: int | None = 8
    occlusion_threshold: float = 0.08
    speckle_rate: float = 0.05
    speckle_patch: int = 4
    noise_sigma_coeff: float = 0.004
    min_depth: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.subpixel_levels is not None and self.subpixel_levels < 1:
            raise ValueError("subpixel_levels must be >= 1 (or None to disable)")
        if not 0.0 <= self.speckle_rate <= 1.0:
            raise ValueError("speckle_rate must be in [0, 1]")
        if self.speckle_patch < 1:
            raise ValueError("speckle_patch must be >= 1 pixel")
        if self.min_depth <= 0.0:
            raise ValueError("min_depth must be positive")


# ---------------------------------------------------------------------------
# min-pooling dilation
# ---------------------------------------------------------------------------

def _windowed_min_1d(x: np.ndarray, radius: int, axis: int) -> np.ndarray:
    """Sliding min with window truncation at the borders (no padding values)."""
    out = x.copy()
    for shift in range(1, radius + 1):
        for sign in (-1, 1):
            shifted = np.roll(x, sign * shift, axis=axis)
            # roll wraps around; overwrite the wrapped strip with +inf
            idx = [slice(None)] * x.ndim
            if sign == 1:
                idx[axis] = slice(0, shift)
            else:
                idx[axis] = slice(x.shape[axis] - shift, None)
            shifted[tuple(idx)] = np.inf
            np.minimum(out, shifted, out=out)
    return out


def min_pool_dilate(image: DepthImage, kernel: int) -> DepthImage:
    """Replace each pixel by the minimum over a kernel x kernel window.

    The window is truncated at image borders. Invalid pixels are excluded
    from the minimum; a window with no valid pixel yields an invalid output
    pixel (stored depth 0). Geometrically this inflates obstacles so thin
    structures survive downsampling and encoding.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be an odd positive integer, got {kernel}")
    if kernel > min(image.height, image.width):
        raise ValueError("kernel larger than image")
    if kernel == 1:
        return DepthImage(np.where(image.valid, image.depth, np.float32(0.0)), image.valid.copy())
    radius = kernel // 2
    masked = np.where(image.valid, image.depth.astype(np.float64), np.inf)
    pooled = _windowed_min_1d(masked, radius, axis=0)
    pooled = _windowed_min_1d(pooled, radius, axis=1)
    valid = np.isfinite(pooled)
    depth = np.where(valid, pooled, 0.0).astype(np.float32)
    return DepthImage(depth=depth, valid=valid)


# ---------------------------------------------------------------------------
# stereo-style degradation
# ---------------------------------------------------------------------------

def stereo_degrade(gt: DepthImage, camera: "CameraModel", params: StereoDegradeParams) -> DepthImage:
    """Degrade ground-truth depth into stereo-like depth.

    Applies, in order: disparity quantization, geometric occlusion against a
    virtual right camera shifted +baseline along camera-x, invalidation of
    the unmatched left border band, random speckle dropout, and multiplicative
    depth-squared Gaussian noise. Deterministic for a fixed params.seed.
    """
    if not np.all(gt.valid):
        raise ValueError("stereo_degrade expects a fully valid ground-truth image")
    depth = gt.depth.astype(np.float64)
    if np.any(depth <= 0.0):
        raise ValueError("zero or negative depth: disparity undefined")
    h, w = depth.shape
    fxb = camera.fx * camera.baseline
    rng = np.random.default_rng([params.seed, 0x5D])

    # 1. disparity quantization
    disp = fxb / depth
    if params.subpixel_levels is not None:
        disp = np.round(disp * params.subpixel_levels) / params.subpixel_levels
        with np.errstate(divide="ignore"):
            depth = np.where(disp > 0.0, fxb / disp, camera.max_depth)
        depth = np.minimum(depth, camera.max_depth)
        disp = fxb / depth

    valid = np.ones((h, w), dtype=bool)

    # 2. occlusion: z-buffer in the right camera, one bin per integer column
    cols = np.arange(w)[None, :].repeat(h, axis=0)
    right_u = np.round(cols - disp).astype(np.int64)
    in_view = right_u >= 0
    flat_bins = np.where(in_view, right_u, 0) + np.arange(h)[:, None] * w
    zbuf = np.full(h * w, np.inf)
    np.minimum.at(zbuf, flat_bins[in_view], depth[in_view])
    occluded = in_view & (zbuf[flat_bins] < depth - params.occlusion_threshold)
    valid &= ~occluded
    valid &= in_view  # no right-camera view at all -> unmatched

    # 3. unmatched left border
    border = int(np.ceil(fxb / params.min_depth))
    valid[:, : min(border, w)] = False

    # 4. speckle dropout
    if params.speckle_rate > 0.0:
        patch = int(params.speckle_patch)
        n_patches = int(round(params.speckle_rate * h * w / (patch * patch)))
        for _ in range(n_patches):
            i = int(rng.integers(0, max(h - patch + 1, 1)))
            j = int(rng.integers(0, max(w - patch + 1, 1)))
            valid[i : i + patch, j : j + patch] = False

    # 5. depth-squared multiplicative noise
    if params.noise_sigma_coeff > 0.0:
        noise = rng.standard_normal((h, w))
        depth = depth + params.noise_sigma_coeff * depth * depth * noise
        depth = np.clip(depth, 1e-3, camera.max_depth)

    return DepthImage(depth=depth.astype(np.float32), valid=valid)


def to_encoder_input(image: DepthImage, max_depth: float) -> np.ndarray:
    """Normalize to [0, 1]: valid pixels depth/max_depth, invalid pixels 1.0."""
    if max_depth <= 0.0:
        raise ValueError("max_depth must be positive")
    norm = np.clip(image.depth.astype(np.float32) / np.float32(max_depth), 0.0, 1.0)
    return np.where(image.valid, norm, np.float32(1.0)).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset file format
# ---------------------------------------------------------------------------

def write_depth_dataset(path: str, frames: list[DepthImage], max_depth: float) -> None:
    """Binary depth dataset: magic DTD1, u32 count, u32 height, u32 width,
    f32 max_depth, then per frame HxW f32 depths and HxW u8 validity.
    Little-endian throughout; round-trips bit-exactly."""
    if not frames:
        raise ValueError("refusing to write an empty dataset")
    h, w = frames[0].height, frames[0].width
    for f in frames:
        if (f.height, f.width) != (h, w):
            raise ValueError("all frames must share one shape")
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<IIIf", len(frames), h, w, max_depth))
        for f in frames:
            fh.write(f.depth.astype("<f4").tobytes(order="C"))
            fh.write(f.valid.astype(np.uint8).tobytes(order="C"))


def read_depth_dataset(path: str) -> tuple[list[DepthImage], float]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DATASET_MAGIC:
            raise ValueError(f"not a DTD1 dataset: {path}")
        count, h, w, max_depth = struct.unpack("<IIIf", fh.read(16))
        frames = []
        frame_bytes = h * w * 4
        mask_bytes = h * w
        for _ in range(count):
            depth = np.frombuffer(fh.read(frame_bytes), dtype="<f4").reshape(h, w)
            valid = np.frombuffer(fh.read(mask_bytes), dtype=np.uint8).reshape(h, w).astype(bool)
            frames.append(DepthImage(depth=depth.copy(), valid=valid))
    return frames, float(max_depth)
