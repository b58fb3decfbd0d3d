"""Synthetic multi-channel cord phantoms with exact ground-truth labels.

Each slice shows an elliptical cord (white matter) holding a butterfly-shaped
gray-matter structure, wrapped in a bright fluid ring. Channel intensities
follow per-tissue magnitude inversion-recovery curves |1 - 2 exp(-t/T1)| over
a set of inversion times, plus Gaussian noise; the label maps are rasterized
from the same geometry and are exact by construction.

A dataset mimics the scan-rescan layout: several subjects, three scans each,
the third scan with larger pose jitter (the repositioning), and a smooth
size drift along the slice stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .pipeline import (GM, WM, LabelMap, ManifestRow, MultiChannelSlice,
                       boundary_pixels, save_labels, save_slice, write_inventory)

TISSUES = ("background", "csf", "wm", "gm")


@dataclass
class PhantomSpec:
    extent: tuple[int, int] = (96, 96)
    spacing_mm: tuple[float, float] = (0.25, 0.25)
    cord_semi_axes: tuple[float, float] = (16.0, 20.0)   # (rows, cols) px
    csf_thickness: float = 4.0                           # px
    lobe_scale: float = 1.0                              # scales the GM horns
    waist_semi_axes: tuple[float, float] = (2.5, 8.0)    # central bridge
    inversion_times_ms: tuple[float, ...] = (35.0, 80.0, 160.0, 300.0,
                                             500.0, 750.0, 1050.0, 1400.0)
    t1_ms: dict = field(default_factory=lambda: {
        "background": 350.0, "csf": 3200.0, "wm": 700.0, "gm": 1100.0})
    proton_density: dict = field(default_factory=lambda: {
        "background": 0.25, "csf": 1.0, "wm": 0.85, "gm": 0.95})
    noise_std: float = 0.04
    jitter_translate_std: float = 0.6                    # px, scans 1-2
    jitter_rotate_std: float = 0.8                       # deg, scans 1-2
    repositioning_factor: float = 3.0                    # scan 3 multiplier
    subject_size_std: float = 0.06                       # relative
    slice_drift: float = 0.01                            # relative per slice
    seed: int = 0

    def validate(self) -> "PhantomSpec":
        if min(self.extent) < 32:
            raise ConfigError(f"extent {self.extent} too small for the cord geometry")
        if self.csf_thickness <= 0 or min(self.cord_semi_axes) <= 0:
            raise ConfigError("cord and ring dimensions must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        curves = {t: self.signal_curve(t) for t in TISSUES}
        for i, a in enumerate(TISSUES):
            for b in TISSUES[i + 1:]:
                if np.max(np.abs(curves[a] - curves[b])) < 0.05:
                    raise ConfigError(
                        f"signal curves of {a} and {b} are too similar; "
                        "segmentation would be ill-posed")
        return self

    def signal_curve(self, tissue: str) -> np.ndarray:
        t = np.asarray(self.inversion_times_ms, dtype=np.float64)
        t1 = self.t1_ms[tissue]
        return self.proton_density[tissue] * np.abs(1.0 - 2.0 * np.exp(-t / t1))

    def to_dict(self) -> dict:
        return {
            "extent": list(self.extent),
            "spacing_mm": list(self.spacing_mm),
            "cord_semi_axes": list(self.cord_semi_axes),
            "csf_thickness": self.csf_thickness,
            "lobe_scale": self.lobe_scale,
            "waist_semi_axes": list(self.waist_semi_axes),
            "inversion_times_ms": list(self.inversion_times_ms),
            "t1_ms": dict(self.t1_ms),
            "proton_density": dict(self.proton_density),
            "noise_std": self.noise_std,
            "jitter_translate_std": self.jitter_translate_std,
            "jitter_rotate_std": self.jitter_rotate_std,
            "repositioning_factor": self.repositioning_factor,
            "subject_size_std": self.subject_size_std,
            "slice_drift": self.slice_drift,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("extent", "spacing_mm", "cord_semi_axes", "waist_semi_axes",
                    "inversion_times_ms"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


# GM horn layout relative to the cord semi-axes: (center_u, center_v,
# semi_u, semi_v) factors; v mirrors about the median plane.
_HORNS = (
    (-0.40, 0.30, 0.34, 0.16),   # dorsal
    (0.32, 0.36, 0.40, 0.24),    # ventral
)


def _pose_grid(extent, pose):
    """Canonical (u, v) coordinates of every pixel center under a pose."""
    h, w = extent
    dy, dx, theta = pose
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    py, px = rows - cy - dy, cols - cx - dx
    ct, st = math.cos(math.radians(-theta)), math.sin(math.radians(-theta))
    return ct * py - st * px, st * py + ct * px


def _inside(u, v, center_u, center_v, semi_u, semi_v):
    return ((u - center_u) / semi_u) ** 2 + ((v - center_v) / semi_v) ** 2 <= 1.0


def rasterize(spec: PhantomSpec, size_factor: float = 1.0,
              pose=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """(labels, tissue_index) for one slice geometry.

    tissue_index encodes background 0, csf 1, wm 2, gm 3 and drives the
    signal model; labels follow the palette background/GM/WM.
    """
    ar, ac = (spec.cord_semi_axes[0] * size_factor,
              spec.cord_semi_axes[1] * size_factor)
    u, v = _pose_grid(spec.extent, pose)

    cord = _inside(u, v, 0, 0, ar, ac)
    ring = _inside(u, v, 0, 0, ar + spec.csf_thickness, ac + spec.csf_thickness) & ~cord

    gm = _inside(u, v, 0, 0, spec.waist_semi_axes[0] * size_factor,
                 spec.waist_semi_axes[1] * size_factor)
    ls = spec.lobe_scale
    for cu, cv, su, sv in _HORNS:
        for side in (1.0, -1.0):
            gm |= _inside(u, v, cu * ar, side * cv * ac, su * ar * ls, sv * ac * ls)
    gm &= cord

    h, w = spec.extent
    if not gm.any() or not (cord & ~gm).any():
        raise ConfigError("degenerate phantom geometry: a tissue region is empty")
    outer = _inside(u, v, 0, 0, ar + spec.csf_thickness + 1.0,
                    ac + spec.csf_thickness + 1.0)
    if outer[0, :].any() or outer[-1, :].any() or outer[:, 0].any() or outer[:, -1].any():
        raise ConfigError("cord and ring must lie strictly inside the image")
    if (boundary_pixels(cord) & gm).any():
        raise ConfigError("gray matter touches the cord boundary; invalid nesting")

    labels = np.zeros(spec.extent, dtype=np.uint8)
    labels[cord] = WM
    labels[gm] = GM
    tissue = np.zeros(spec.extent, dtype=np.uint8)
    tissue[ring] = 1
    tissue[cord & ~gm] = 2
    tissue[gm] = 3
    return labels, tissue


def render_channels(spec: PhantomSpec, tissue: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    curves = np.stack([spec.signal_curve(t) for t in TISSUES])  # (4, C)
    pixels = curves[tissue]                                     # (H, W, C)
    if spec.noise_std > 0:
        pixels = pixels + rng.normal(0.0, spec.noise_std, size=pixels.shape)
    return pixels


def _subject_geometry(spec: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    factor = 1.0 + spec.subject_size_std * float(rng.standard_normal())
    factor = float(np.clip(factor, 0.8, 1.2))
    return replace(spec,
                   cord_semi_axes=(spec.cord_semi_axes[0] * factor,
                                   spec.cord_semi_axes[1] * factor))


def _scan_pose(spec: PhantomSpec, rng: np.random.Generator, scan: int,
               n_scans: int) -> tuple[float, float, float]:
    if spec.jitter_translate_std == 0 and spec.jitter_rotate_std == 0:
        return (0.0, 0.0, 0.0)
    mult = spec.repositioning_factor if scan == n_scans else 1.0
    dy, dx = rng.normal(0.0, spec.jitter_translate_std * mult, size=2)
    theta = rng.normal(0.0, spec.jitter_rotate_std * mult)
    return (float(dy), float(dx), float(theta))


def generate_phantom(spec: PhantomSpec, out_dir, n_subjects: int = 8,
                     n_scans: int = 3, n_slices: int = 6) -> list[ManifestRow]:
    """Write a full phantom dataset (slices, labels, inventory) to out_dir.

    Deterministic in spec.seed; every (subject, scan, slice) draws from its
    own seed-derived stream, so outputs do not depend on generation order.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    rows: list[ManifestRow] = []
    for si in range(n_subjects):
        subject = f"S{si:02d}"
        geo = _subject_geometry(
            spec, np.random.default_rng(np.random.SeedSequence([spec.seed, si, 0])))
        for scan in range(1, n_scans + 1):
            pose = _scan_pose(
                geo, np.random.default_rng(np.random.SeedSequence([spec.seed, si, scan])),
                scan, n_scans)
            for sl in range(1, n_slices + 1):
                drift = 1.0 + geo.slice_drift * (sl - (n_slices + 1) / 2.0)
                labels, tissue = rasterize(geo, drift, pose)
                noise_rng = np.random.default_rng(
                    np.random.SeedSequence([spec.seed, si, scan, sl]))
                pixels = render_channels(geo, tissue, noise_rng)

                image_path = f"images/{subject}_sc{scan}_sl{sl:02d}.mcs"
                label_path = f"labels/{subject}_sc{scan}_sl{sl:02d}_r0.lbl"
                save_slice(MultiChannelSlice(pixels, spec.spacing_mm, subject,
                                             scan, sl), out_dir / image_path)
                save_labels(LabelMap(labels, spec.spacing_mm, subject, scan, sl,
                                     rater=0), out_dir / label_path)
                rows.append(ManifestRow(subject, scan, sl, 0, image_path, label_path))
    write_inventory(rows, out_dir / "dataset.txt")
    return rows


def perturb_rater(labels, rater_id: int, boundary_flip_prob: float,
                  seed: int = 0) -> LabelMap:
    """Simulate an imperfect rater: flip boundary-adjacent pixels to one of
    their differing neighbor classes with the given probability.

    Deterministic per (seed, rater_id); prob 0 returns an identical map.
    """
    if not 0.0 <= boundary_flip_prob < 0.5:
        raise ConfigError(f"flip probability {boundary_flip_prob} outside [0, 0.5)")
    lm = labels if isinstance(labels, LabelMap) else LabelMap(np.asarray(labels))
    classes = lm.classes.copy()
    rng = np.random.default_rng(np.random.SeedSequence([seed, rater_id]))
    if boundary_flip_prob == 0.0:
        return replace(lm, classes=classes, rater=rater_id)

    h, w = classes.shape
    neighbor_stacks = []
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        shifted = np.full((h, w), -1, dtype=np.int16)
        src = classes[max(0, -di):h - max(0, di), max(0, -dj):w - max(0, dj)]
        shifted[max(0, di):h - max(0, -di), max(0, dj):w - max(0, -dj)] = src
        neighbor_stacks.append(shifted)
    neighbors = np.stack(neighbor_stacks)             # (4, H, W)
    differs = (neighbors >= 0) & (neighbors != classes[None])
    boundary = differs.any(axis=0)

    coords = np.argwhere(boundary)
    flips = rng.random(len(coords)) < boundary_flip_prob
    choices = rng.integers(0, 4, size=len(coords))
    for (i, j), flip, pick in zip(coords, flips, choices):
        if not flip:
            continue
        options = neighbors[:, i, j]
        options = options[(options >= 0) & (options != classes[i, j])]
        classes[i, j] = options[pick % len(options)]
    return replace(lm, classes=classes, rater=rater_id)
