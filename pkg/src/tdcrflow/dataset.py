"""Dataset bundle: JSON manifest plus two little-endian binary stores.

A bundle directory holds
  manifest.json    format version, robot geometry, counts, normalization
                   stats, split index lists, seed, generation settings
  points.bin       magic TDCRPTS1, u32 (K, N, d), K*N*d float32 values
                   (sample-major, point-major, channel-minor)
  conditions.bin   magic TDCRCND1, u32 (K, Dc), K*Dc float32 raw values
                   (tendon displacements in meters, payload mass in kg)

Conditions are stored raw; normalization happens at load time from the
manifest statistics. All integers and floats are little-endian. Writing the
same bundle twice produces byte-identical files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, FormatError
from .pointcloud import (NormalizationStats, PointCloud, normalize_condition,
                         stats_from_training_data)

MAGIC_POINTS = b"TDCRPTS1"
MAGIC_CONDITIONS = b"TDCRCND1"
FORMAT_VERSION = "tdcrflow-bundle-v1"

MANIFEST_NAME = "manifest.json"
POINTS_NAME = "points.bin"
CONDITIONS_NAME = "conditions.bin"


@dataclass
class DatasetBundle:
    manifest: dict
    points: np.ndarray      # (K, N, d) float32
    conditions: np.ndarray  # (K, Dc) float32, raw units

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32)
        self.conditions = np.ascontiguousarray(self.conditions, dtype=np.float32)
        if self.points.ndim != 3 or self.points.shape[2] not in (3, 6):
            raise ContractViolation(f"points must be (K, N, 3|6), got {self.points.shape}")
        if self.conditions.ndim != 2 or self.conditions.shape[0] != self.points.shape[0]:
            raise ContractViolation("conditions must be (K, Dc) matching points")

    @property
    def k(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[1]

    @property
    def d(self) -> int:
        return self.points.shape[2]

    @property
    def condition_dim(self) -> int:
        return self.conditions.shape[1]

    @property
    def has_payload(self) -> bool:
        return bool(self.manifest["payload"])

    @property
    def stats(self) -> NormalizationStats:
        return NormalizationStats.from_dict(self.manifest["normalization"])

    @property
    def splits(self) -> dict[str, list[int]]:
        return self.manifest["splits"]

    def cloud(self, i: int) -> PointCloud:
        return PointCloud(self.points[i].astype(np.float64))

    def normalized_points(self, indices=None) -> np.ndarray:
        """(len, N, d) float64 with XYZ divided by the dataset scale."""
        idx = np.arange(self.k) if indices is None else np.asarray(indices)
        pts = self.points[idx].astype(np.float64)
        pts[..., :3] /= self.stats.scale
        return pts

    def normalized_conditions(self, indices=None) -> np.ndarray:
        """(len, Dc) float64 min-max normalized per the manifest stats."""
        idx = np.arange(self.k) if indices is None else np.asarray(indices)
        stats = self.stats
        rows = []
        for i in idx:
            raw = self.conditions[i].astype(np.float64)
            if self.has_payload:
                c, _ = normalize_condition(raw[:-1], raw[-1], stats, warn=False)
            else:
                c, _ = normalize_condition(raw, None, stats, warn=False)
            rows.append(c)
        return np.asarray(rows)


def build_bundle(clouds, conditions_raw, spec, splits: dict, seed: int,
                 payload: bool, extra: dict | None = None) -> DatasetBundle:
    """Assemble a bundle in memory and fit train-split normalization stats."""
    pts = np.stack([c.points for c in clouds]).astype(np.float32)
    cond = np.asarray(conditions_raw, dtype=np.float32)
    train = splits["train"]
    train_clouds = [PointCloud(pts[i].astype(np.float64)) for i in train]
    cond64 = cond.astype(np.float64)
    if payload:
        stats = stats_from_training_data(train_clouds, cond64[train, :-1],
                                         payloads=cond64[train, -1])
    else:
        stats = stats_from_training_data(train_clouds, cond64[train])
    manifest = {
        "format": FORMAT_VERSION,
        "robot": spec.to_dict(),
        "k": int(pts.shape[0]),
        "n": int(pts.shape[1]),
        "d": int(pts.shape[2]),
        "motor_dim": int(cond.shape[1]) - (1 if payload else 0),
        "payload": bool(payload),
        "normalization": stats.to_dict(),
        "splits": {k: [int(i) for i in v] for k, v in splits.items()},
        "seed": int(seed),
        "extra": extra or {},
    }
    return DatasetBundle(manifest, pts, cond)


def _write_store(path, magic: bytes, dims: tuple[int, ...], payload: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(np.asarray(dims, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def _read_store(path, magic: bytes, ndims: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    dims = np.frombuffer(raw, dtype="<u4", count=ndims, offset=8)
    count = int(np.prod(dims.astype(np.int64)))
    expect = 8 + 4 * ndims + 4 * count
    if len(raw) != expect:
        raise FormatError(f"{path}: store holds {len(raw)} bytes, header implies {expect}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=8 + 4 * ndims)
    return data.reshape(tuple(int(v) for v in dims)).astype(np.float32)


def write_bundle(out_dir, bundle: DatasetBundle) -> None:
    os.makedirs(out_dir, exist_ok=True)
    blob = json.dumps(bundle.manifest, sort_keys=True, indent=2) + "\n"
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write(blob)
    _write_store(os.path.join(out_dir, POINTS_NAME), MAGIC_POINTS,
                 bundle.points.shape, bundle.points)
    _write_store(os.path.join(out_dir, CONDITIONS_NAME), MAGIC_CONDITIONS,
                 bundle.conditions.shape, bundle.conditions)


def read_bundle(in_dir) -> DatasetBundle:
    man_path = os.path.join(in_dir, MANIFEST_NAME)
    try:
        with open(man_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{in_dir}: no {MANIFEST_NAME}; not a dataset bundle")
    except json.JSONDecodeError as exc:
        raise FormatError(f"{man_path}: unreadable manifest: {exc}")
    if manifest.get("format") != FORMAT_VERSION:
        raise FormatError(f"{man_path}: unknown format {manifest.get('format')!r}")
    points = _read_store(os.path.join(in_dir, POINTS_NAME), MAGIC_POINTS, 3)
    conditions = _read_store(os.path.join(in_dir, CONDITIONS_NAME), MAGIC_CONDITIONS, 2)
    if points.shape != (manifest["k"], manifest["n"], manifest["d"]):
        raise FormatError(f"{in_dir}: points store shape {points.shape} "
                          f"contradicts manifest counts")
    want_dc = manifest["motor_dim"] + (1 if manifest["payload"] else 0)
    if conditions.shape != (manifest["k"], want_dc):
        raise FormatError(f"{in_dir}: conditions store shape {conditions.shape} "
                          f"contradicts manifest counts")
    flat = sorted(i for v in manifest["splits"].values() for i in v)
    if flat != list(range(manifest["k"])):
        raise FormatError(f"{in_dir}: split lists do not partition 0..{manifest['k'] - 1}")
    return DatasetBundle(manifest, points, conditions)
