"""Training-time augmentation: smooth random deformation fields, similarity
transforms, median-plane mirroring, and safe-distance window sampling.

A sampled transform is applied as one resampling pass (no repeated
interpolation): for every output pixel the source coordinate composes, from
the outside in, mirroring, the inverse scale/rotation about the window
center, and the interpolated displacement field. Images are sampled
bilinearly, label maps with nearest neighbor, both with the identical
geometric map.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import ConfigError, ShapeError
from .pipeline import LabelMap, MultiChannelSlice


@dataclass
class AugmentConfig:
    deform_support_points: int = 4          # 2 x 2 grid
    deform_std: float = 15.0                # px, per axis
    deform_truncate: float = 45.0           # px, max displacement norm
    scale_range: tuple[float, float] = (0.8, 1.25)
    rotation_range_deg: float = 10.0
    mirror_prob: float = 0.5
    safe_margin: int = 45                   # px from the image boundary
    window: tuple[int, int] = (500, 500)

    def validate(self) -> "AugmentConfig":
        if self.deform_support_points != 4:
            raise ConfigError("deformation field uses 4 supporting points (2 x 2)")
        if self.deform_std < 0 or self.deform_truncate < 0:
            raise ConfigError("deformation parameters must be nonnegative")
        if abs(self.deform_truncate - 3.0 * self.deform_std) > 1e-9:
            raise ConfigError(
                f"truncation {self.deform_truncate} must be 3x the std {self.deform_std}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi or abs(lo * hi - 1.0) > 1e-9:
            raise ConfigError(f"scale range {self.scale_range} is not reciprocal-symmetric")
        if self.rotation_range_deg < 0 or not 0 <= self.mirror_prob <= 1:
            raise ConfigError("invalid rotation range or mirror probability")
        if self.safe_margin < 0 or min(self.window) < 1:
            raise ConfigError("invalid margin or window")
        return self

    def to_dict(self) -> dict:
        return {
            "deform_support_points": self.deform_support_points,
            "deform_std": self.deform_std,
            "deform_truncate": self.deform_truncate,
            "scale_range": list(self.scale_range),
            "rotation_range_deg": self.rotation_range_deg,
            "mirror_prob": self.mirror_prob,
            "safe_margin": self.safe_margin,
            "window": list(self.window),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        d["scale_range"] = tuple(d.get("scale_range", (0.8, 1.25)))
        d["window"] = tuple(d.get("window", (500, 500)))
        return cls(**d).validate()


@dataclass
class DeformationField:
    """Dense displacement vectors interpolated from a 2 x 2 support grid."""

    support: np.ndarray                     # (2, 2, 2) px displacements
    dense: np.ndarray                       # (wh, ww, 2) px displacements

    @classmethod
    def from_support(cls, support: np.ndarray, window: tuple[int, int]) -> "DeformationField":
        support = np.asarray(support, dtype=np.float64)
        if support.shape != (2, 2, 2):
            raise ShapeError(f"support grid must be (2, 2, 2), got {support.shape}")
        wh, ww = window
        # The support points sit on the window corners; with two points per
        # axis the interpolating spline is the bilinear surface.
        u = np.linspace(0.0, 1.0, wh)[:, None, None] if wh > 1 else np.zeros((1, 1, 1))
        v = np.linspace(0.0, 1.0, ww)[None, :, None] if ww > 1 else np.zeros((1, 1, 1))
        dense = ((1 - u) * (1 - v) * support[0, 0]
                 + (1 - u) * v * support[0, 1]
                 + u * (1 - v) * support[1, 0]
                 + u * v * support[1, 1])
        return cls(support, dense)

    def max_magnitude(self) -> float:
        return float(np.sqrt((self.dense ** 2).sum(axis=-1)).max())


@dataclass
class Transform:
    field: DeformationField
    scale: float
    angle_deg: float
    mirror: bool
    window_origin: tuple[int, int]
    window: tuple[int, int]
    safe_margin: int = 0


def _truncate_support(support: np.ndarray, limit: float) -> np.ndarray:
    """Clamp each support displacement's norm to the limit, keeping direction."""
    norms = np.sqrt((support ** 2).sum(axis=-1, keepdims=True))
    factor = np.where(norms > limit, limit / np.maximum(norms, 1e-300), 1.0)
    return support * factor


def sample_augmentation(rng: np.random.Generator, config: AugmentConfig,
                        image_extent: tuple[int, int]) -> Transform:
    """Draw one random transform; the window origin keeps the window at least
    safe_margin away from every image boundary."""
    config.validate()
    h, w = image_extent
    wh, ww = config.window
    m = config.safe_margin
    if h < wh + 2 * m or w < ww + 2 * m:
        raise ConfigError(
            f"image {h}x{w} too small for window {wh}x{ww} with margin {m}")

    r0 = int(rng.integers(m, h - wh - m + 1))
    c0 = int(rng.integers(m, w - ww - m + 1))
    support = rng.normal(0.0, config.deform_std, size=(2, 2, 2)) \
        if config.deform_std > 0 else np.zeros((2, 2, 2))
    support = _truncate_support(support, config.deform_truncate)
    field = DeformationField.from_support(support, config.window)
    lo, hi = config.scale_range
    scale = float(rng.uniform(lo, hi))
    angle = float(rng.uniform(-config.rotation_range_deg, config.rotation_range_deg))
    mirror = bool(rng.random() < config.mirror_prob)
    return Transform(field, scale, angle, mirror, (r0, c0), (wh, ww), m)


def identity_transform(window: tuple[int, int],
                       origin: tuple[int, int] = (0, 0)) -> Transform:
    field = DeformationField.from_support(np.zeros((2, 2, 2)), window)
    return Transform(field, 1.0, 0.0, False, origin, window)


def _source_coordinates(transform: Transform) -> tuple[np.ndarray, np.ndarray]:
    wh, ww = transform.window
    rows, cols = np.mgrid[0:wh, 0:ww].astype(np.float64)
    if transform.mirror:
        cols_m = (ww - 1) - cols
    else:
        cols_m = cols

    cr, cc = (wh - 1) / 2.0, (ww - 1) / 2.0
    theta = np.deg2rad(transform.angle_deg)
    ct, st = np.cos(-theta), np.sin(-theta)
    dr, dc = rows - cr, cols_m - cc
    src_r = cr + (ct * dr - st * dc) / transform.scale
    src_c = cc + (st * dr + ct * dc) / transform.scale

    disp = transform.field.dense
    if transform.mirror:
        disp = disp[:, ::-1]
    src_r = src_r + disp[:, :, 0]
    src_c = src_c + disp[:, :, 1]

    r0, c0 = transform.window_origin
    return src_r + r0, src_c + c0


def apply_transform(slc: MultiChannelSlice, labels: LabelMap,
                    transform: Transform) -> tuple[MultiChannelSlice, LabelMap]:
    """Resample one windowed training sample; channels bilinear, labels
    nearest neighbor, identical geometry for both."""
    h, w = slc.pixels.shape[:2]
    if labels.classes.shape != (h, w):
        raise ShapeError(f"label extent {labels.classes.shape} != image extent {(h, w)}")
    wh, ww = transform.window
    r0, c0 = transform.window_origin
    m = transform.safe_margin
    if not (m <= r0 <= h - wh - m and m <= c0 <= w - ww - m):
        raise ConfigError(
            f"window origin {transform.window_origin} outside the safe region "
            f"(margin {m}, image {h}x{w}, window {wh}x{ww})")

    src_r, src_c = _source_coordinates(transform)
    coords = np.stack([src_r, src_c])
    out_pixels = np.empty((wh, ww, slc.channels))
    for ch in range(slc.channels):
        out_pixels[:, :, ch] = map_coordinates(slc.pixels[:, :, ch], coords,
                                               order=1, mode="nearest")
    out_labels = map_coordinates(labels.classes, coords, order=0, mode="nearest")
    return (replace(slc, pixels=out_pixels),
            replace(labels, classes=out_labels))
