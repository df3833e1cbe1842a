"""Point-cloud container, normalization maps, downsampling, file I/O.

Clouds are N x d float64 arrays in a fixed base frame, d=3 (x,y,z meters) or
d=6 (plus r,g,b in [0,1]). Rows are an unordered set: any permutation denotes
the same cloud.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, FormatError


@dataclass
class PointCloud:
    points: np.ndarray
    frame: str = "base"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] not in (3, 6):
            raise ContractViolation(f"points must be (N, 3) or (N, 6), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractViolation("point cloud contains non-finite values")
        if pts.shape[1] == 6:
            rgb = pts[:, 3:]
            if rgb.size and (rgb.min() < -1e-9 or rgb.max() > 1.0 + 1e-9):
                raise ContractViolation("color channels must lie in [0, 1]")
        self.points = pts

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def rgb(self) -> np.ndarray | None:
        return self.points[:, 3:] if self.d == 6 else None


@dataclass
class NormalizationStats:
    """Dataset-level geometry scale and per-dimension condition bounds."""

    scale: float
    motor_min: np.ndarray
    motor_max: np.ndarray
    payload_min: float | None = None
    payload_max: float | None = None

    def __post_init__(self):
        self.scale = float(self.scale)
        self.motor_min = np.asarray(self.motor_min, dtype=np.float64).ravel()
        self.motor_max = np.asarray(self.motor_max, dtype=np.float64).ravel()
        if self.scale <= 0:
            raise ContractViolation(f"scale must be positive, got {self.scale}")
        if self.motor_min.shape != self.motor_max.shape:
            raise ContractViolation("motor bound vectors differ in length")
        if np.any(self.motor_max <= self.motor_min):
            raise ContractViolation("every motor range must satisfy max > min")
        if (self.payload_min is None) != (self.payload_max is None):
            raise ContractViolation("payload bounds must be given together")
        if self.payload_min is not None and self.payload_max <= self.payload_min:
            raise ContractViolation("payload range must satisfy max > min")

    @property
    def motor_dim(self) -> int:
        return self.motor_min.shape[0]

    @property
    def condition_dim(self) -> int:
        return self.motor_dim + (1 if self.payload_min is not None else 0)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "motor_min": self.motor_min.tolist(),
            "motor_max": self.motor_max.tolist(),
            "payload_min": self.payload_min,
            "payload_max": self.payload_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(scale=d["scale"], motor_min=d["motor_min"], motor_max=d["motor_max"],
                   payload_min=d.get("payload_min"), payload_max=d.get("payload_max"))


DEGENERATE_RANGE_PAD = 1e-9


def stats_from_training_data(clouds, motors, payloads=None) -> NormalizationStats:
    """Fit normalization statistics on the training split only.

    Scale is the largest |coordinate| over all training clouds, so normalized
    geometry lies in [-1, 1]^3. Constant condition dimensions get a tiny range
    pad so the max > min invariant holds (such dims then normalize to 0).
    """
    peak = 0.0
    for c in clouds:
        xyz = c.xyz if isinstance(c, PointCloud) else np.asarray(c)[:, :3]
        if xyz.size:
            peak = max(peak, float(np.abs(xyz).max()))
    if peak <= 0:
        raise ContractViolation("cannot fit a scale: all training points sit at the origin")
    motors = np.asarray(motors, dtype=np.float64)
    if motors.ndim != 2:
        raise ContractViolation(f"motors must be (K, D), got {motors.shape}")
    mmin = motors.min(axis=0)
    mmax = motors.max(axis=0)
    flat = mmax <= mmin
    mmax = np.where(flat, mmin + DEGENERATE_RANGE_PAD, mmax)
    pmin = pmax = None
    if payloads is not None:
        payloads = np.asarray(payloads, dtype=np.float64).ravel()
        pmin, pmax = float(payloads.min()), float(payloads.max())
        if pmax <= pmin:
            pmax = pmin + DEGENERATE_RANGE_PAD
    return NormalizationStats(peak, mmin, mmax, pmin, pmax)


def normalize_points(cloud: PointCloud, scale: float) -> PointCloud:
    """Divide XYZ by the scale. No translation; colors untouched."""
    if scale <= 0:
        raise ContractViolation(f"scale must be positive, got {scale}")
    pts = cloud.points.copy()
    pts[:, :3] /= scale
    return PointCloud(pts, cloud.frame)


def denormalize_points(cloud: PointCloud, scale: float) -> PointCloud:
    """Multiply XYZ by the scale; inverse of normalize_points."""
    if scale <= 0:
        raise ContractViolation(f"scale must be positive, got {scale}")
    pts = cloud.points.copy()
    pts[:, :3] *= scale
    return PointCloud(pts, cloud.frame)


def normalize_condition(motor, payload, stats: NormalizationStats,
                        warn: bool = True) -> tuple[np.ndarray, bool]:
    """Min-max normalize a raw condition to [0, 1] per dimension.

    Returns (condition vector, clamped flag). Values outside the fitted range
    are clamped and flagged; with warn=True a warning is emitted too. The
    payload entry, when present, is appended after the motor entries.
    """
    motor = np.asarray(motor, dtype=np.float64).ravel()
    if motor.shape[0] != stats.motor_dim:
        raise ContractViolation(
            f"condition has {motor.shape[0]} motor entries, stats expect {stats.motor_dim}")
    if (payload is not None) != (stats.payload_min is not None):
        raise ContractViolation("payload presence must match the fitted statistics")
    raw = (motor - stats.motor_min) / (stats.motor_max - stats.motor_min)
    if payload is not None:
        p = (float(payload) - stats.payload_min) / (stats.payload_max - stats.payload_min)
        raw = np.concatenate([raw, [p]])
    clipped = np.clip(raw, 0.0, 1.0)
    clamped = bool(np.any(np.abs(clipped - raw) > 0))
    if clamped and warn:
        warnings.warn("condition outside the fitted actuation range; clamped to [0, 1]")
    return clipped, clamped


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Centroid of the member points per occupied voxel (all channels).

    Voxel index is floor(coordinate / voxel) per axis.
    """
    if voxel <= 0:
        raise ContractViolation(f"voxel edge must be positive, got {voxel}")
    idx = np.floor(cloud.xyz / voxel).astype(np.int64)
    _, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    sums = np.zeros((counts.shape[0], cloud.d))
    np.add.at(sums, inverse, cloud.points)
    pts = sums / counts[:, None]
    if cloud.d == 6:
        pts[:, 3:] = np.clip(pts[:, 3:], 0.0, 1.0)
    return PointCloud(pts, cloud.frame)


def resample_to_count(cloud: PointCloud, count: int, seed: int) -> PointCloud:
    """Uniform subset (no replacement) down to `count`, or pad with uniform
    with-replacement duplicates up to it. Deterministic per seed."""
    if cloud.n < 1:
        raise ContractViolation("cannot resample an empty cloud")
    if count < 1:
        raise ContractViolation(f"target count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    if cloud.n >= count:
        pick = rng.choice(cloud.n, size=count, replace=False)
    else:
        extra = rng.choice(cloud.n, size=count - cloud.n, replace=True)
        pick = np.concatenate([np.arange(cloud.n), extra])
    return PointCloud(cloud.points[pick], cloud.frame)


def save_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY; colors written as 0-255 integers when present."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {cloud.n}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if cloud.d == 6:
            fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        if cloud.d == 6:
            rgb = np.clip(np.rint(cloud.rgb * 255.0), 0, 255).astype(int)
            for p, c in zip(cloud.xyz, rgb):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
        else:
            for p in cloud.xyz:
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def load_ply(path) -> PointCloud:
    with open(path, "r", encoding="ascii") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise FormatError(f"{path}: not an ASCII PLY file")
        n = None
        props = []
        fmt_seen = False
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format":
                if tok[1] != "ascii":
                    raise FormatError(f"{path}: only ASCII PLY is supported")
                fmt_seen = True
            elif tok[0] == "element" and tok[1] == "vertex":
                n = int(tok[2])
            elif tok[0] == "property" and n is not None:
                props.append(tok[2])
            elif tok[0] == "end_header":
                break
        if not fmt_seen or n is None:
            raise FormatError(f"{path}: PLY header lacks format or vertex element")
        has_color = "red" in props
        want = 6 if has_color else 3
        rows = []
        for _ in range(n):
            tok = fh.readline().split()
            if len(tok) < want:
                raise FormatError(f"{path}: vertex row has {len(tok)} fields, need {want}")
            rows.append([float(v) for v in tok[:want]])
    pts = np.asarray(rows, dtype=np.float64).reshape(n, want)
    if has_color:
        pts[:, 3:] /= 255.0
    return PointCloud(pts)


def save_xyz(path, cloud: PointCloud) -> None:
    """Whitespace text, one point per row; colors stay in [0, 1] floats."""
    np.savetxt(path, cloud.points, fmt="%.9g")


def load_xyz(path) -> PointCloud:
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] not in (3, 6):
        raise FormatError(f"{path}: rows have {pts.shape[1]} columns, expected 3 or 6")
    return PointCloud(pts)
