"""File formats: KITTI calibration/split/depth parsing, cloud and weight I/O.

Binary formats are little-endian throughout.  Images decode through Pillow
(8-bit PNG/PPM for photographs, 16-bit PNG for depth with the raw/256
convention where raw 0 marks a missing pixel).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from pseudolidar.geometry import DepthMap, DisparityMap, Intrinsics, PointCloud, StereoRig
from pseudolidar.network import WeightStore
from pseudolidar.raster import ImageBuffer

WEIGHT_MAGIC = b"PLKW"
WEIGHT_VERSION = 1
DEFAULT_CALIB_RESOLUTION = (1242, 375)  # KITTI raw color cameras


class ParseError(ValueError):
    """Malformed text input; the message carries the offending line."""


class DepthFormatError(ValueError):
    """Depth image is not a 16-bit single-channel PNG."""


class WeightFileError(ValueError):
    """Malformed weight file; the message carries the byte offset."""


@dataclass(frozen=True)
class CalibrationSet:
    """Left/right 3x4 projection matrices and the rig derived from them."""

    p_left: np.ndarray
    p_right: np.ndarray
    intrinsics: Intrinsics
    rig: StereoRig


@dataclass(frozen=True)
class SplitEntry:
    """One dataset item: scene directory, frame index and camera side."""

    scene: str
    frame: int
    side: str

    def __post_init__(self):
        if self.side not in ("l", "r"):
            raise ValueError(f"side must be 'l' or 'r', got {self.side!r}")
        if self.frame < 0:
            raise ValueError(f"frame index must be >= 0, got {self.frame}")

    def partner(self) -> "SplitEntry":
        """The stereo pair: same frame, opposite side."""
        return SplitEntry(self.scene, self.frame, "r" if self.side == "l" else "l")


# ---------------------------------------------------------------------------
# text parsers

def _parse_projection(line: str, key: str) -> np.ndarray:
    fields = line.split(":", 1)[1].split()
    if len(fields) != 12:
        raise ParseError(f"{key} line has {len(fields)} numbers, expected 12: {line.strip()!r}")
    try:
        vals = np.array([float(v) for v in fields], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"{key} line has a non-numeric field: {line.strip()!r}") from exc
    if not np.all(np.isfinite(vals)):
        raise ParseError(f"{key} line has a non-finite value: {line.strip()!r}")
    return vals.reshape(3, 4)


def parse_calibration(text: str, width: int = DEFAULT_CALIB_RESOLUTION[0],
                      height: int = DEFAULT_CALIB_RESOLUTION[1]) -> CalibrationSet:
    """Read KITTI-style `P2:`/`P3:` projection lines (left/right color cameras).

    Intrinsics come from P2; the baseline is (P2[0,3] - P3[0,3]) / fx.  The
    reference resolution is not stored in these lines, so it is a parameter
    with the KITTI raw default.
    """
    mats: dict[str, np.ndarray] = {}
    for line in text.splitlines():
        key = line.split(":", 1)[0].strip()
        if key in ("P2", "P3") and key not in mats:
            mats[key] = _parse_projection(line, key)
    for key in ("P2", "P3"):
        if key not in mats:
            raise ParseError(f"calibration text has no {key} line")
    p2, p3 = mats["P2"], mats["P3"]
    fx, fy = p2[0, 0], p2[1, 1]
    cx, cy = p2[0, 2], p2[1, 2]
    if fx <= 0:
        raise ParseError(f"P2 focal length {fx} is not positive")
    baseline = (p2[0, 3] - p3[0, 3]) / fx
    if baseline <= 0:
        raise ParseError(f"derived baseline {baseline} is not positive")
    intr = Intrinsics(fx, fy, cx, cy, width, height)
    return CalibrationSet(p2, p3, intr, StereoRig(intr, float(baseline)))


def parse_split(text: str) -> list[SplitEntry]:
    """Read `scene_dir frame_index side` lines into split entries, in order."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(f"line {lineno}: expected 'scene frame side', got {line.strip()!r}")
        scene, frame_s, side = fields
        try:
            frame = int(frame_s)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: bad frame index {frame_s!r}") from exc
        try:
            entries.append(SplitEntry(scene, frame, side))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
    return entries


# ---------------------------------------------------------------------------
# images and depth maps

def load_image(path: str | Path) -> ImageBuffer:
    """8-bit PNG/PPM (color or grayscale) as floats in [0, 1]."""
    with Image.open(path) as img:
        if img.mode not in ("RGB", "L"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return ImageBuffer(arr)


def save_image(img: ImageBuffer, path: str | Path) -> None:
    """Write a [0, 1] raster as 8-bit PNG/PPM (by extension)."""
    arr = np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    elif arr.shape[2] == 3:
        Image.fromarray(arr, mode="RGB").save(path)
    else:
        raise ValueError(f"cannot save {arr.shape[2]}-channel image")


def read_depth_png16(data: bytes) -> DepthMap:
    """16-bit depth PNG: meters = raw / 256, raw 0 marks an invalid pixel."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            if img.mode not in ("I", "I;16", "I;16B"):
                raise DepthFormatError(f"expected 16-bit single-channel PNG, got mode {img.mode!r}")
            raw = np.asarray(img, dtype=np.int64)
    except DepthFormatError:
        raise
    except Exception as exc:
        raise DepthFormatError(f"cannot decode depth PNG: {exc}") from exc
    if raw.ndim != 2:
        raise DepthFormatError(f"expected single channel, got shape {raw.shape}")
    if raw.min() < 0 or raw.max() > 65535:
        raise DepthFormatError("sample values exceed the 16-bit range")
    valid = raw > 0
    return DepthMap(raw / 256.0, valid)


def write_depth_png16(depth: DepthMap, path: str | Path) -> None:
    """Inverse of read_depth_png16; valid pixels are clamped to raw >= 1."""
    raw = np.where(depth.valid,
                   np.clip(np.round(depth.values * 256.0), 1, 65535), 0).astype(np.uint16)
    Image.fromarray(raw).save(path, format="PNG")


def save_map_npz(values: np.ndarray, valid: np.ndarray, path: str | Path) -> None:
    """Lossless float32 sidecar for a scalar map with its validity mask."""
    np.savez(path, values=values.astype(np.float32), valid=valid)


def _load_map_npz(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as data:
        return np.asarray(data["values"], dtype=np.float64), np.asarray(data["valid"], dtype=bool)


def load_depth(path: str | Path) -> DepthMap:
    """Depth map from a 16-bit PNG or a float32 .npz sidecar."""
    p = Path(path)
    if p.suffix == ".npz":
        values, valid = _load_map_npz(p)
        return DepthMap(values, valid & (values > 0))
    return read_depth_png16(p.read_bytes())


def load_disparity(path: str | Path) -> DisparityMap:
    """Disparity map from a .npz sidecar (values in pixels)."""
    values, valid = _load_map_npz(path)
    return DisparityMap(values, valid)


# ---------------------------------------------------------------------------
# point clouds

def write_ply(cloud: PointCloud, path: str | Path) -> None:
    """Binary little-endian PLY with float32 x/y/z and optional intensity."""
    props = ["property float x", "property float y", "property float z"]
    if cloud.intensity is not None:
        props.append("property float intensity")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {cloud.count}\n" + "\n".join(props) + "\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(_packed_points(cloud))


def write_pcd(cloud: PointCloud, path: str | Path) -> None:
    """Binary PCD v0.7 with float32 x/y/z and optional intensity."""
    fields = ["x", "y", "z"] + (["intensity"] if cloud.intensity is not None else [])
    n = len(fields)
    header = (
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\n"
        f"FIELDS {' '.join(fields)}\n"
        f"SIZE {' '.join(['4'] * n)}\n"
        f"TYPE {' '.join(['F'] * n)}\n"
        f"COUNT {' '.join(['1'] * n)}\n"
        f"WIDTH {cloud.count}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\n"
        f"POINTS {cloud.count}\nDATA binary\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(_packed_points(cloud))


def _packed_points(cloud: PointCloud) -> bytes:
    if cloud.intensity is not None:
        rec = np.empty((cloud.count, 4), dtype="<f4")
        rec[:, :3] = cloud.xyz
        rec[:, 3] = cloud.intensity
    else:
        rec = cloud.xyz.astype("<f4")
    return rec.tobytes()


# ---------------------------------------------------------------------------
# weight files

def save_weights(store: WeightStore) -> bytes:
    """Flat binary weight format: magic, version, count, then named tensors."""
    out = bytearray()
    out += WEIGHT_MAGIC
    out += struct.pack("<II", WEIGHT_VERSION, len(store))
    for name, arr in store.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    return bytes(out)


def write_weights(store: WeightStore, path: str | Path) -> None:
    Path(path).write_bytes(save_weights(store))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFileError(
                f"truncated while reading {what} at byte offset {self.pos} "
                f"(need {n} bytes, have {len(self.data) - self.pos})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def load_weights(data: bytes) -> WeightStore:
    """Parse the flat binary weight format; raises WeightFileError with offset."""
    cur = _Cursor(data)
    if cur.take(4, "magic") != WEIGHT_MAGIC:
        raise WeightFileError("bad magic at byte offset 0")
    version, count = struct.unpack("<II", cur.take(8, "header"))
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"unsupported version {version} at byte offset 4")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", cur.take(2, f"tensor {i} name length"))
        name_off = cur.pos
        try:
            name = cur.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(
                f"tensor {i} name at byte offset {name_off} is not UTF-8") from exc
        (ndim,) = struct.unpack("<B", cur.take(1, f"tensor {name!r} ndim"))
        dims = struct.unpack(f"<{ndim}I", cur.take(4 * ndim, f"tensor {name!r} dims"))
        if any(d == 0 for d in dims):
            raise WeightFileError(f"tensor {name!r} has a zero dimension at offset {cur.pos}")
        n_elem = 1
        for d in dims:
            n_elem *= d
        payload = cur.take(4 * n_elem, f"tensor {name!r} payload")
        if name in tensors:
            raise WeightFileError(f"duplicate tensor name {name!r} at byte offset {name_off}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if cur.pos != len(data):
        raise WeightFileError(f"{len(data) - cur.pos} trailing bytes at offset {cur.pos}")
    return WeightStore(tensors)


def read_weights(path: str | Path) -> WeightStore:
    return load_weights(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# report emission

def format_report(record: dict) -> str:
    """Flat key=value lines, one per field."""
    return "\n".join(f"{k}={v}" for k, v in record.items())


def write_json_report(record: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
