"""Data model, file formats, and acquisition-side preprocessing.

Slices are multi-channel float images with physical pixel spacing and
session metadata. On disk they use a small self-describing format: a text
header terminated by END, then a little-endian binary payload (float32
planar channel-major for images, uint8 for label maps), integrity-checked
with a CRC32 of the payload.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .errors import ConfigError, DataFormatError, ManifestError

BACKGROUND, GM, WM = 0, 1, 2
LABEL_NAMES = {BACKGROUND: "background", GM: "GM", WM: "WM"}

_MCS_MAGIC = "MCS 1"
_LBL_MAGIC = "LBL 1"


@dataclass
class MultiChannelSlice:
    pixels: np.ndarray                      # (H, W, C) float64
    spacing_mm: tuple[float, float] = (1.0, 1.0)
    subject_id: str = ""
    scan_index: int = 1
    slice_index: int = 1

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3:
            raise DataFormatError(f"slice pixels must be (H, W, C), got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise DataFormatError("slice contains non-finite pixels")
        if self.spacing_mm[0] <= 0 or self.spacing_mm[1] <= 0:
            raise DataFormatError(f"spacing must be positive, got {self.spacing_mm}")

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class LabelMap:
    classes: np.ndarray                     # (H, W) uint8 in {0, 1, 2}
    spacing_mm: tuple[float, float] = (1.0, 1.0)
    subject_id: str = ""
    scan_index: int = 1
    slice_index: int = 1
    rater: int = 0

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.classes.ndim != 2:
            raise DataFormatError(f"label map must be 2-D, got {self.classes.shape}")
        bad = set(np.unique(self.classes)) - set(LABEL_NAMES)
        if bad:
            raise DataFormatError(f"label values outside palette: {sorted(bad)}")

    def mask(self, label: int) -> np.ndarray:
        return self.classes == label


# ---------------------------------------------------------------------------
# file format


def _write_header(fh, magic: str, fields: list[tuple[str, str]]) -> None:
    lines = [magic] + [f"{k} {v}" for k, v in fields] + ["END", ""]
    fh.write("\n".join(lines).encode("ascii"))


def _read_header(fh, path) -> tuple[str, dict[str, str]]:
    magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
    fields: dict[str, str] = {}
    while True:
        raw = fh.readline()
        if not raw:
            raise DataFormatError(f"{path}: header not terminated with END")
        line = raw.decode("ascii", errors="replace").rstrip("\n")
        if line == "END":
            break
        if " " not in line:
            raise DataFormatError(f"{path}: malformed header line {line!r}")
        key, value = line.split(" ", 1)
        fields[key] = value
    return magic, fields


def _read_payload(fh, path, expected_bytes: int, checksum: str) -> bytes:
    payload = fh.read()
    if len(payload) != expected_bytes:
        raise DataFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected_bytes}")
    if f"{zlib.crc32(payload):08x}" != checksum:
        raise DataFormatError(f"{path}: payload checksum mismatch")
    return payload


def save_slice(slc: MultiChannelSlice, path) -> None:
    path = Path(path)
    h, w, c = slc.pixels.shape
    payload = np.ascontiguousarray(
        slc.pixels.transpose(2, 0, 1), dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        _write_header(fh, _MCS_MAGIC, [
            ("height", str(h)), ("width", str(w)), ("channels", str(c)),
            ("spacing_mm", f"{slc.spacing_mm[0]!r} {slc.spacing_mm[1]!r}"),
            ("subject", slc.subject_id or "-"),
            ("scan", str(slc.scan_index)), ("slice", str(slc.slice_index)),
            ("checksum", f"{zlib.crc32(payload):08x}"),
        ])
        fh.write(payload)


def load_slice(path) -> MultiChannelSlice:
    path = Path(path)
    with open(path, "rb") as fh:
        magic, fields = _read_header(fh, path)
        if magic != _MCS_MAGIC:
            raise DataFormatError(f"{path}: unknown magic/version {magic!r}")
        try:
            h, w, c = int(fields["height"]), int(fields["width"]), int(fields["channels"])
            sp = fields["spacing_mm"].split()
            spacing = (float(sp[0]), float(sp[1]))
            subject = fields["subject"]
            scan, slice_index = int(fields["scan"]), int(fields["slice"])
            checksum = fields["checksum"]
        except (KeyError, ValueError, IndexError) as exc:
            raise DataFormatError(f"{path}: bad header field: {exc}") from exc
        payload = _read_payload(fh, path, h * w * c * 4, checksum)
    planes = np.frombuffer(payload, dtype="<f4").reshape(c, h, w)
    return MultiChannelSlice(planes.transpose(1, 2, 0).astype(np.float64),
                             spacing, "" if subject == "-" else subject,
                             scan, slice_index)


def save_labels(lm: LabelMap, path) -> None:
    path = Path(path)
    payload = np.ascontiguousarray(lm.classes, dtype=np.uint8).tobytes()
    with open(path, "wb") as fh:
        _write_header(fh, _LBL_MAGIC, [
            ("height", str(lm.classes.shape[0])), ("width", str(lm.classes.shape[1])),
            ("spacing_mm", f"{lm.spacing_mm[0]!r} {lm.spacing_mm[1]!r}"),
            ("subject", lm.subject_id or "-"),
            ("scan", str(lm.scan_index)), ("slice", str(lm.slice_index)),
            ("rater", str(lm.rater)),
            ("checksum", f"{zlib.crc32(payload):08x}"),
        ])
        fh.write(payload)


def load_labels(path) -> LabelMap:
    path = Path(path)
    with open(path, "rb") as fh:
        magic, fields = _read_header(fh, path)
        if magic != _LBL_MAGIC:
            raise DataFormatError(f"{path}: unknown magic/version {magic!r}")
        try:
            h, w = int(fields["height"]), int(fields["width"])
            sp = fields["spacing_mm"].split()
            spacing = (float(sp[0]), float(sp[1]))
            subject = fields["subject"]
            scan, slice_index = int(fields["scan"]), int(fields["slice"])
            rater = int(fields.get("rater", "0"))
            checksum = fields["checksum"]
        except (KeyError, ValueError, IndexError) as exc:
            raise DataFormatError(f"{path}: bad header field: {exc}") from exc
        payload = _read_payload(fh, path, h * w, checksum)
    classes = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()
    return LabelMap(classes, spacing, "" if subject == "-" else subject,
                    scan, slice_index, rater)


# ---------------------------------------------------------------------------
# resampling


def _lanczos_kernel(t: np.ndarray, a: int = 3) -> np.ndarray:
    out = np.sinc(t) * np.sinc(t / a)
    return np.where(np.abs(t) < a, out, 0.0)


def _resample_matrix(n_in: int, n_out: int, factor: float, a: int = 3) -> np.ndarray:
    """Row-stochastic windowed-sinc interpolation weights (edge clamped)."""
    idx_out = np.arange(n_out)
    centers = (idx_out + 0.5) / factor - 0.5
    weights = np.zeros((n_out, n_in))
    for i, s in enumerate(centers):
        taps = np.arange(int(np.ceil(s - a)), int(np.floor(s + a)) + 1)
        vals = _lanczos_kernel(s - taps, a)
        taps = np.clip(taps, 0, n_in - 1)
        np.add.at(weights[i], taps, vals)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def lanczos_resample(slc: MultiChannelSlice, factor: float | None = None,
                     target_spacing: tuple[float, float] | None = None,
                     a: int = 3) -> MultiChannelSlice:
    """Separable Lanczos-a resampling of every channel.

    Exactly one of factor / target_spacing selects the new grid; output
    spacing is input spacing divided by the per-axis factor.
    """
    if (factor is None) == (target_spacing is None):
        raise ConfigError("pass exactly one of factor or target_spacing")
    if factor is not None:
        if factor <= 0:
            raise ConfigError(f"resampling factor must be positive, got {factor}")
        fr = fc = float(factor)
    else:
        if target_spacing[0] <= 0 or target_spacing[1] <= 0:
            raise ConfigError(f"target spacing must be positive, got {target_spacing}")
        fr = slc.spacing_mm[0] / target_spacing[0]
        fc = slc.spacing_mm[1] / target_spacing[1]

    h, w, c = slc.pixels.shape
    out_h = max(1, int(round(h * fr)))
    out_w = max(1, int(round(w * fc)))
    rows = _resample_matrix(h, out_h, fr, a)
    cols = _resample_matrix(w, out_w, fc, a)
    # Per-plane so the arithmetic for a channel never depends on its position.
    resampled = np.empty((out_h, out_w, c))
    for ch in range(c):
        plane = np.ascontiguousarray(slc.pixels[:, :, ch])
        resampled[:, :, ch] = rows @ plane @ cols.T
    return replace(slc, pixels=resampled,
                   spacing_mm=(slc.spacing_mm[0] / fr, slc.spacing_mm[1] / fc))


def inner_ninth_crop(slc: MultiChannelSlice) -> MultiChannelSlice:
    """Trim one third of the extent on each side, keeping the center ninth."""
    h, w, _ = slc.pixels.shape
    return center_crop_or_pad(slc, (h - 2 * (h // 3), w - 2 * (w // 3)))


def _crop_or_pad_axis(n: int, target: int) -> tuple[slice, tuple[int, int]]:
    if target <= n:
        off = (n - target) // 2
        return slice(off, off + target), (0, 0)
    before = (target - n) // 2
    return slice(0, n), (before, target - n - before)


def center_crop_or_pad(obj, target_extent: tuple[int, int], pad_value: float = 0.0):
    """Center crop and/or pad to the target (H, W); works on slices, label
    maps, and bare 2-D/3-D arrays."""
    th, tw = int(target_extent[0]), int(target_extent[1])
    if th <= 0 or tw <= 0:
        raise ConfigError(f"target extent must be positive, got {target_extent}")

    if isinstance(obj, MultiChannelSlice):
        return replace(obj, pixels=center_crop_or_pad(obj.pixels, (th, tw), pad_value))
    if isinstance(obj, LabelMap):
        return replace(obj, classes=center_crop_or_pad(obj.classes, (th, tw),
                                                       int(pad_value)))

    arr = np.asarray(obj)
    sl_r, pad_r = _crop_or_pad_axis(arr.shape[0], th)
    sl_c, pad_c = _crop_or_pad_axis(arr.shape[1], tw)
    out = arr[sl_r, sl_c]
    if pad_r != (0, 0) or pad_c != (0, 0):
        pad = [pad_r, pad_c] + [(0, 0)] * (arr.ndim - 2)
        out = np.pad(out, pad, constant_values=pad_value)
    return out.copy()


# ---------------------------------------------------------------------------
# filtering


def gaussian_kernel_1d(variance: float) -> np.ndarray:
    """Discrete Gaussian truncated at 4 sigma, renormalized to sum 1."""
    if variance <= 0:
        raise ConfigError(f"variance must be positive, got {variance}")
    sigma = float(np.sqrt(variance))
    radius = int(np.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * variance))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, variance: float) -> np.ndarray:
    kernel = gaussian_kernel_1d(variance)
    out = convolve1d(np.asarray(image, dtype=np.float64), kernel, axis=0, mode="reflect")
    return convolve1d(out, kernel, axis=1, mode="reflect")


def gaussian_highpass(obj, variance: float = 10.0):
    """Subtract the Gaussian-blurred image: out = in - blur(in), per channel."""
    if isinstance(obj, MultiChannelSlice):
        return replace(obj, pixels=gaussian_highpass(obj.pixels, variance))
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim == 2:
        return arr - gaussian_blur(arr, variance)
    out = np.empty_like(arr)
    for c in range(arr.shape[2]):
        out[:, :, c] = arr[:, :, c] - gaussian_blur(arr[:, :, c], variance)
    return out


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass(frozen=True)
class ManifestRow:
    subject: str
    scan: int
    slice_index: int
    rater: int
    image_path: str
    label_path: str


@dataclass
class DatasetManifest:
    root: Path
    rows: list[ManifestRow] = field(default_factory=list)
    splits: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for row in self.rows:
            seen.setdefault(row.subject, None)
        return list(seen)

    def rows_for(self, split: str, rater: int | None = None) -> list[ManifestRow]:
        members = set(self.splits.get(split, ()))
        out = [r for r in self.rows if r.subject in members]
        if rater is not None:
            out = [r for r in out if r.rater == rater]
        return out

    def image_file(self, row: ManifestRow) -> Path:
        return self.root / row.image_path

    def label_file(self, row: ManifestRow) -> Path:
        return self.root / row.label_path

    def check_split_disjoint(self) -> None:
        owner: dict[str, str] = {}
        for split, members in self.splits.items():
            for s in members:
                if s in owner and owner[s] != split:
                    raise ManifestError(f"subject {s} in both {owner[s]} and {split}")
                owner[s] = split


MANIFEST_HEADER = "# cordseg dataset manifest v1"
_COLUMNS = "# columns: subject scan slice rater image label"


def write_inventory(rows: list[ManifestRow], path) -> None:
    path = Path(path)
    lines = [MANIFEST_HEADER, _COLUMNS]
    for r in rows:
        lines.append(f"{r.subject} {r.scan} {r.slice_index} {r.rater} "
                     f"{r.image_path} {r.label_path}")
    path.write_text("\n".join(lines) + "\n")


def read_inventory(path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"inventory file {path} does not exist")
    rows: list[ManifestRow] = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ManifestError(f"{path}:{n}: expected 6 columns, got {len(parts)}")
        rows.append(ManifestRow(parts[0], int(parts[1]), int(parts[2]),
                                int(parts[3]), parts[4], parts[5]))
    return rows


def build_manifest(root, split_spec: dict[str, list[str]],
                   inventory_name: str = "dataset.txt") -> DatasetManifest:
    """Assemble a split dataset manifest from an inventory file under root.

    split_spec maps split names (train/val/test) to subject lists; a subject
    may belong to at most one split.
    """
    root = Path(root)
    if not root.exists():
        raise ManifestError(f"dataset root {root} does not exist")
    rows = read_inventory(root / inventory_name)
    if not rows:
        raise ManifestError(f"inventory under {root} is empty")

    seen_paths: set[tuple[str, int]] = set()
    for r in rows:
        key = (r.image_path, r.rater)
        if key in seen_paths:
            raise ManifestError(f"duplicate slice path {r.image_path} (rater {r.rater})")
        seen_paths.add(key)

    manifest = DatasetManifest(root=root, rows=rows,
                               splits={k: tuple(v) for k, v in split_spec.items()})
    manifest.check_split_disjoint()
    known = set(manifest.subjects())
    for split, members in manifest.splits.items():
        missing = set(members) - known
        if missing:
            raise ManifestError(f"split {split} names unknown subjects {sorted(missing)}")
    return manifest


def group_split(subjects: list[str], n_groups: int, test_group: int,
                val_index: int = 0) -> dict[str, list[str]]:
    """Cross-validation split: one full group for test, one subject of the
    remaining pool for validation, rest for training."""
    if len(subjects) % n_groups:
        raise ManifestError(f"{len(subjects)} subjects do not divide into {n_groups} groups")
    size = len(subjects) // n_groups
    groups = [subjects[i * size:(i + 1) * size] for i in range(n_groups)]
    if not 0 <= test_group < n_groups:
        raise ManifestError(f"test_group {test_group} out of range")
    test = groups[test_group]
    pool = [s for g in range(n_groups) if g != test_group for s in groups[g]]
    val = [pool[val_index % len(pool)]]
    train = [s for s in pool if s not in val]
    return {"train": train, "val": val, "test": test}


# ---------------------------------------------------------------------------
# PNG import/export


def export_png(array: np.ndarray, path, lo: float | None = None,
               hi: float | None = None) -> None:
    """Write a 2-D array as an 8-bit grayscale PNG (linear windowing)."""
    from PIL import Image

    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise DataFormatError(f"PNG export needs a 2-D array, got {arr.shape}")
    lo = float(arr.min()) if lo is None else lo
    hi = float(arr.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip((arr - lo) * scale, 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(Path(path))


def import_png(path) -> np.ndarray:
    """Read a PNG as 2-D float64 in [0, 1] (RGB collapses to luminance)."""
    from PIL import Image

    img = Image.open(Path(path)).convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbor outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    inner = np.pad(mask, 1, constant_values=False)
    core = (inner[:-2, 1:-1] & inner[2:, 1:-1] &
            inner[1:-1, :-2] & inner[1:-1, 2:])
    return mask & ~core


def contour_overlay_png(background: np.ndarray, contours: list[tuple[np.ndarray, tuple[int, int, int]]],
                        path) -> None:
    """Render boundary masks in color over a grayscale background image."""
    from PIL import Image

    arr = np.asarray(background, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    base = np.clip((arr - lo) * scale, 0, 255).astype(np.uint8)
    rgb = np.stack([base] * 3, axis=-1)
    for mask, color in contours:
        edge = boundary_pixels(mask)
        rgb[edge] = color
    Image.fromarray(rgb, mode="RGB").save(Path(path))
