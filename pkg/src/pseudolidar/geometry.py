"""Camera model, disparity/depth conversion, back-projection and warping.

All 3D quantities live in the left-camera frame: X right, Y down, Z forward,
meters.  Disparity is in pixels, non-negative, and relates to depth through
z = baseline * fx / d for a rectified rig.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pseudolidar.raster import ImageBuffer, grayscale, sample_grid

MIN_DISPARITY = 1e-3  # px; below this Eq. z = b*f/d is treated as singular
DEFAULT_MAX_CLOUD_DEPTH = 80.0  # m; standard evaluation cap, keeps clouds LiDAR-like
ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels at a reference resolution."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    def scaled(self, new_w: int, new_h: int) -> "Intrinsics":
        """Intrinsics normalized to a new resolution (focal and center scale with it)."""
        sx = new_w / self.width
        sy = new_h / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, new_w, new_h)


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo rig: shared intrinsics plus a metric baseline."""

    left: Intrinsics
    baseline_m: float

    def __post_init__(self):
        if self.baseline_m <= 0:
            raise ValueError(f"baseline must be positive, got {self.baseline_m}")


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: x' = R @ x + t, rotation orthonormal with det +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHONORMAL_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError(f"rotation determinant {np.linalg.det(r)} != +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def translation_x(tx: float) -> "RigidTransform":
        return RigidTransform(np.eye(3), np.array([tx, 0.0, 0.0]))

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self * other)(x) = self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


class _ScalarField:
    """Per-pixel scalar raster with a validity mask; values at invalid pixels are 0."""

    __slots__ = ("values", "valid")

    def __init__(self, values: np.ndarray, valid: np.ndarray | None = None):
        vals = np.array(values, dtype=np.float64, copy=True)
        if vals.ndim == 3 and vals.shape[2] == 1:
            vals = vals[:, :, 0]
        if vals.ndim != 2:
            raise ValueError(f"expected (H, W) array, got shape {vals.shape}")
        if valid is None:
            mask = np.ones(vals.shape, dtype=bool)
        else:
            mask = np.array(valid, dtype=bool, copy=True)
            if mask.shape != vals.shape:
                raise ValueError(f"mask shape {mask.shape} != values shape {vals.shape}")
        if not np.all(np.isfinite(vals[mask])):
            raise ValueError("non-finite values at valid pixels")
        vals[~mask] = 0.0
        self._check(vals, mask)
        vals.setflags(write=False)
        mask.setflags(write=False)
        self.values = vals
        self.valid = mask

    def _check(self, vals, mask):
        pass

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other) -> bool:
        return (
            type(self) is type(other)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.valid, other.valid)
        )

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.width}x{self.height}, {int(self.valid.sum())} valid)"


class DisparityMap(_ScalarField):
    """Per-pixel horizontal disparity in pixels, >= 0 where valid."""

    def _check(self, vals, mask):
        if np.any(vals[mask] < 0):
            raise ValueError("negative disparity at valid pixels")


class DepthMap(_ScalarField):
    """Per-pixel metric depth in meters, > 0 where valid."""

    def _check(self, vals, mask):
        if np.any(vals[mask] <= 0):
            raise ValueError("non-positive depth at valid pixels")


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points (row-major pixel order) in the left-camera frame."""

    xyz: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.xyz, dtype=np.float64, copy=True).reshape(-1, 3)
        if pts.size and np.any(pts[:, 2] <= 0):
            raise ValueError("point cloud contains non-positive depth")
        pts.setflags(write=False)
        object.__setattr__(self, "xyz", pts)
        if self.intensity is not None:
            inten = np.array(self.intensity, dtype=np.float64, copy=True).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError(f"{inten.shape[0]} intensities for {pts.shape[0]} points")
            inten.setflags(write=False)
            object.__setattr__(self, "intensity", inten)

    @property
    def count(self) -> int:
        return self.xyz.shape[0]


def disparity_to_depth(d: DisparityMap, rig: StereoRig) -> DepthMap:
    """z = baseline * fx / d; pixels with d < MIN_DISPARITY become invalid."""
    valid = d.valid & (d.values >= MIN_DISPARITY)
    depth = np.zeros_like(d.values)
    np.divide(rig.baseline_m * rig.left.fx, d.values, out=depth, where=valid)
    return DepthMap(depth, valid)


def depth_to_disparity(z: DepthMap, rig: StereoRig) -> DisparityMap:
    """Inverse of disparity_to_depth on the valid set."""
    disp = np.zeros_like(z.values)
    np.divide(rig.baseline_m * rig.left.fx, z.values, out=disp, where=z.valid)
    return DisparityMap(disp, z.valid)


def project(point, K: Intrinsics) -> tuple[float, float, bool]:
    """Pinhole projection; the flag is False for points at or behind the camera."""
    x, y, z = (float(v) for v in point)
    if z <= 0:
        return 0.0, 0.0, False
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, True


def back_project(depth: DepthMap, K: Intrinsics, intensity: ImageBuffer | None = None,
                 max_depth: float = DEFAULT_MAX_CLOUD_DEPTH) -> PointCloud:
    """Lift every valid depth pixel to (X, Y, Z) in the camera frame.

    X = z*(x-cx)/fx, Y = z*(y-cy)/fy, Z = z; points emitted in row-major
    pixel order.  Pixels deeper than max_depth are dropped.  Intensity, when
    given, is the grayscale of the reference image at each emitted pixel.
    """
    if (depth.width, depth.height) != (K.width, K.height):
        raise ValueError(
            f"depth {depth.width}x{depth.height} does not match intrinsics "
            f"{K.width}x{K.height}"
        )
    keep = depth.valid & (depth.values <= max_depth)
    ys, xs = np.nonzero(keep)  # nonzero scans row-major
    z = depth.values[ys, xs]
    pts = np.empty((z.shape[0], 3))
    pts[:, 0] = z * (xs - K.cx) / K.fx
    pts[:, 1] = z * (ys - K.cy) / K.fy
    pts[:, 2] = z
    inten = None
    if intensity is not None:
        if (intensity.width, intensity.height) != (depth.width, depth.height):
            raise ValueError("intensity image resolution does not match depth map")
        inten = grayscale(intensity).data[ys, xs, 0]
    return PointCloud(pts, inten)


def warp_to_target(source: ImageBuffer, target_depth: DepthMap, K: Intrinsics,
                   T: RigidTransform) -> tuple[ImageBuffer, np.ndarray]:
    """Inverse-warp the source into the target view via target depth and pose T.

    Each target pixel is back-projected with its depth, moved into the source
    frame by T, projected with K, and bilinearly sampled from the source.
    Returns the reconstruction plus a validity mask (in-frame, in front of
    the camera, and valid target depth).
    """
    h, w = target_depth.height, target_depth.width
    if (source.width, source.height) != (w, h) or (K.width, K.height) != (w, h):
        raise ValueError("source / depth / intrinsics resolutions are inconsistent")
    ys, xs = np.mgrid[0:h, 0:w]
    z = target_depth.values
    pts = np.empty((h, w, 3))
    pts[:, :, 0] = z * (xs - K.cx) / K.fx
    pts[:, :, 1] = z * (ys - K.cy) / K.fy
    pts[:, :, 2] = z
    moved = pts @ T.rotation.T + T.translation
    zs = moved[:, :, 2]
    in_front = zs > 0
    safe_z = np.where(in_front, zs, 1.0)
    px = K.fx * moved[:, :, 0] / safe_z + K.cx
    py = K.fy * moved[:, :, 1] / safe_z + K.cy
    in_frame = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    valid = target_depth.valid & in_front & in_frame
    warped = sample_grid(source.data, px, py)
    return ImageBuffer(warped.astype(source.data.dtype)), valid


def warp_rectified(source: ImageBuffer, disparity: DisparityMap,
                   direction: int = -1) -> tuple[ImageBuffer, np.ndarray]:
    """Rectified fast path: sample the source at x' = x + direction * d(x, y).

    direction=-1 reconstructs the left view from the right source; +1 the
    reverse.  Equivalent to the general warp with a pure x-translation pose.
    """
    h, w = disparity.height, disparity.width
    if (source.width, source.height) != (w, h):
        raise ValueError("source resolution does not match disparity map")
    if direction not in (-1, 1):
        raise ValueError(f"direction must be -1 or +1, got {direction}")
    xs = np.arange(w)[None, :] + direction * disparity.values
    ys = np.broadcast_to(np.arange(h)[:, None].astype(np.float64), (h, w))
    valid = disparity.valid & (xs >= 0) & (xs <= w - 1)
    warped = sample_grid(source.data, xs, ys)
    return ImageBuffer(warped.astype(source.data.dtype)), valid
