"""Synthetic tendon-driven continuum robot ground truth.

Maps motor command vectors (and an optional tip payload mass) to settled
geometry through piecewise-constant-curvature kinematics, then samples surface
point clouds from the resulting tube-and-disc body. Everything is
deterministic per seed; per-sample RNG streams are keyed by (seed, index) so
results do not depend on evaluation order.

Conventions: the robot is anchored at the origin with initial tangent +Z;
gravity points along -Z. Each module is one circular arc of fixed length;
module i bends by angle theta toward in-plane azimuth phi.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import ConvexHull

from .errors import ContractViolation
from .pointcloud import PointCloud, resample_to_count, voxel_downsample

THETA_MAX_FRACTION = 0.95  # clamp bend below pi to keep the chord map regular
_TINY = 1e-12


@dataclass(frozen=True)
class RobotSpec:
    modules: int = 2
    module_length: float = 0.12
    pitch_radius: float = 0.02       # tendon routing circle radius
    tube_radius: float = 0.008
    disc_radius: float = 0.025
    discs_per_module: int = 5
    q_max: float = 0.01              # max tendon displacement, meters
    k_payload: float = 8.0           # rad of added bend per kg per module
    gravity: float = 9.81

    def __post_init__(self):
        if self.modules < 1:
            raise ContractViolation(f"modules must be >= 1, got {self.modules}")
        if self.discs_per_module < 2:
            raise ContractViolation("discs_per_module must be >= 2")
        for name in ("module_length", "pitch_radius", "tube_radius", "disc_radius", "q_max"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.k_payload < 0:
            raise ContractViolation("k_payload must be >= 0")

    @property
    def motor_dim(self) -> int:
        return 3 * self.modules

    @property
    def total_length(self) -> float:
        return self.modules * self.module_length

    def to_dict(self) -> dict:
        return {"modules": self.modules, "module_length": self.module_length,
                "pitch_radius": self.pitch_radius, "tube_radius": self.tube_radius,
                "disc_radius": self.disc_radius, "discs_per_module": self.discs_per_module,
                "q_max": self.q_max, "k_payload": self.k_payload, "gravity": self.gravity}

    @classmethod
    def from_dict(cls, d: dict) -> "RobotSpec":
        return cls(**d)


@dataclass(frozen=True)
class ModuleArc:
    """One constant-curvature segment: bend angle, bend azimuth, arc length."""

    theta: float
    phi: float
    length: float

    def __post_init__(self):
        if self.theta < 0:
            raise ContractViolation(f"theta must be >= 0, got {self.theta}")
        if self.length <= 0:
            raise ContractViolation("arc length must be positive")
        phi = self.phi
        if self.theta <= _TINY:
            phi = 0.0
        else:
            # canonical azimuth in (-pi, pi]
            phi = float(np.arctan2(np.sin(phi), np.cos(phi)))
            if phi <= -np.pi:
                phi = np.pi
        object.__setattr__(self, "phi", phi)


def _rz(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _cc_pose(swept: float, phi: float, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Local pose after arc length s with total swept angle `swept` at azimuth phi."""
    if abs(swept) <= _TINY:
        return np.array([0.0, 0.0, s]), np.eye(3)
    kappa = swept / s
    p = _rz(phi) @ np.array([(1.0 - np.cos(swept)) / kappa, 0.0, np.sin(swept) / kappa])
    r = _rz(phi) @ _ry(swept) @ _rz(-phi)
    return p, r


def motors_to_arcs(m_norm, spec: RobotSpec, psi_offset: float = 0.0) -> list[ModuleArc]:
    """Convert normalized motor commands in [0,1]^(3S) to one arc per module.

    Per module with commands (m1, m2, m3): tendon displacements
    q_k = (m_k - 0.5) * 2 * q_max at azimuths psi_k = psi_offset + 2*pi*k/3;
    the resultant a = sum_k q_k (cos psi_k, sin psi_k) gives
    theta = (2 / (3 * pitch_radius)) * |a| (clamped to [0, 0.95*pi]) and
    phi = atan2(-a_y, -a_x).
    """
    m = np.asarray(m_norm, dtype=np.float64).ravel()
    if m.shape[0] != spec.motor_dim:
        raise ContractViolation(
            f"command has {m.shape[0]} entries, robot needs {spec.motor_dim}")
    psis = psi_offset + 2.0 * np.pi * np.arange(3) / 3.0
    arcs = []
    for i in range(spec.modules):
        q = (m[3 * i:3 * i + 3] - 0.5) * 2.0 * spec.q_max
        ax = float(np.sum(q * np.cos(psis)))
        ay = float(np.sum(q * np.sin(psis)))
        theta = (2.0 / (3.0 * spec.pitch_radius)) * np.hypot(ax, ay)
        theta = float(np.clip(theta, 0.0, THETA_MAX_FRACTION * np.pi))
        phi = float(np.arctan2(-ay, -ax)) if theta > _TINY else 0.0
        arcs.append(ModuleArc(theta, phi, spec.module_length))
    return arcs


def apply_payload(arcs: list[ModuleArc], payload_kg: float, spec: RobotSpec) -> list[ModuleArc]:
    """Extra root-to-tip bending from a gravity-aligned tip load.

    Module i (1-based from the root) gets an added bending vector of magnitude
    k_payload * payload * (S - i + 1) / S aligned with the projection of
    gravity onto the module's base XY plane; base frames are propagated
    through the already-deflected chain. When the projection degenerates
    (module axis vertical) the push falls back to the module's own bend
    azimuth, or local +X for a straight module. payload = 0 is the identity.
    """
    if payload_kg < 0:
        raise ContractViolation(f"payload must be >= 0, got {payload_kg}")
    if payload_kg == 0.0:
        return [replace(a) for a in arcs]
    s_count = len(arcs)
    base_rot = np.eye(3)
    out = []
    for i, arc in enumerate(arcs, start=1):
        g_local = base_rot.T @ np.array([0.0, 0.0, -1.0])
        gxy = g_local[:2]
        norm = float(np.hypot(gxy[0], gxy[1]))
        if norm > _TINY:
            direction = gxy / norm
        elif arc.theta > _TINY:
            direction = np.array([np.cos(arc.phi), np.sin(arc.phi)])
        else:
            direction = np.array([1.0, 0.0])
        mag = spec.k_payload * payload_kg * (s_count - i + 1) / s_count
        bend = arc.theta * np.array([np.cos(arc.phi), np.sin(arc.phi)]) + mag * direction
        theta = float(np.clip(np.hypot(bend[0], bend[1]), 0.0, THETA_MAX_FRACTION * np.pi))
        phi = float(np.arctan2(bend[1], bend[0])) if theta > _TINY else 0.0
        new_arc = ModuleArc(theta, phi, arc.length)
        out.append(new_arc)
        _, r_mod = _cc_pose(new_arc.theta, new_arc.phi, new_arc.length)
        base_rot = base_rot @ r_mod
    return out


def arcs_to_backbone(arcs: list[ModuleArc], spec: RobotSpec) -> tuple[np.ndarray, np.ndarray]:
    """Disc-station frames chained root to tip.

    Returns (positions, rotations) with 1 + modules*discs_per_module entries:
    the base frame at the origin (tangent +Z) followed by discs_per_module
    evenly spaced stations per module; the last station is the tip.
    """
    positions = [np.zeros(3)]
    rotations = [np.eye(3)]
    base_p = np.zeros(3)
    base_r = np.eye(3)
    for arc in arcs:
        for j in range(1, spec.discs_per_module + 1):
            frac = j / spec.discs_per_module
            p_loc, r_loc = _cc_pose(arc.theta * frac, arc.phi, arc.length * frac)
            positions.append(base_p + base_r @ p_loc)
            rotations.append(base_r @ r_loc)
        base_p = positions[-1]
        base_r = rotations[-1]
    return np.asarray(positions), np.asarray(rotations)


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Deterministic largest-remainder split of `total` by nonnegative weights."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    raw = w * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _perp_basis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def _color_ramp(frac: np.ndarray) -> np.ndarray:
    return np.stack([frac, 1.0 - frac, np.full_like(frac, 0.3)], axis=1)


BASE_HEIGHT = 0.04
BASE_RADIUS_FACTOR = 2.0


def _seed_tuple(seed) -> tuple:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(v) for v in seed)


def sample_surface(frames: tuple[np.ndarray, np.ndarray], spec: RobotSpec,
                   n_raw: int, seed, include_base: bool = False,
                   colors: bool = False) -> PointCloud:
    """Uniform area sampling of the robot surface.

    n_raw points fall on the body: cylinder segments of radius tube_radius
    between consecutive stations plus an annular disc face (tube_radius to
    disc_radius) at every station. With include_base, extra points in
    proportion to its area cover a pedestal cylinder (radius 2*disc_radius,
    height 0.04 m below the origin); body points are drawn from their own RNG
    substream so they are identical with and without the base. With colors,
    each point carries an RGB ramp over its arc-length fraction (discs get the
    discrete ramp value of their station index); base points are gray.
    """
    if n_raw < 1:
        raise ContractViolation(f"n_raw must be >= 1, got {n_raw}")
    positions, rotations = frames
    m = positions.shape[0]
    key = _seed_tuple(seed)
    rng_body = np.random.default_rng(key + (0,))
    rng_base = np.random.default_rng(key + (1,))

    seg_vec = positions[1:] - positions[:-1]
    seg_len = np.linalg.norm(seg_vec, axis=1)
    seg_len = np.maximum(seg_len, _TINY)
    seg_area = 2.0 * np.pi * spec.tube_radius * seg_len
    disc_area = np.full(m, np.pi * (spec.disc_radius ** 2 - spec.tube_radius ** 2))
    counts = _apportion(n_raw, np.concatenate([seg_area, disc_area]))

    pts = []
    fracs = []
    for i in range(m - 1):
        n = int(counts[i])
        if n == 0:
            continue
        axis = seg_vec[i] / seg_len[i]
        e1, e2 = _perp_basis(axis)
        z = rng_body.uniform(0.0, seg_len[i], size=n)
        ang = rng_body.uniform(0.0, 2.0 * np.pi, size=n)
        radial = np.outer(np.cos(ang), e1) + np.outer(np.sin(ang), e2)
        pts.append(positions[i] + np.outer(z, axis) + spec.tube_radius * radial)
        fracs.append((i + z / seg_len[i]) / (m - 1))
    for s in range(m):
        n = int(counts[m - 1 + s])
        if n == 0:
            continue
        rot = rotations[s]
        rho = np.sqrt(rng_body.uniform(spec.tube_radius ** 2, spec.disc_radius ** 2, size=n))
        ang = rng_body.uniform(0.0, 2.0 * np.pi, size=n)
        radial = np.outer(rho * np.cos(ang), rot[:, 0]) + np.outer(rho * np.sin(ang), rot[:, 1])
        pts.append(positions[s] + radial)
        fracs.append(np.full(n, s / (m - 1)))

    body = np.vstack(pts)
    frac = np.concatenate(fracs)
    body_area = float(seg_area.sum() + disc_area.sum())

    base_pts = np.zeros((0, 3))
    if include_base:
        r_base = BASE_RADIUS_FACTOR * spec.disc_radius
        lat_area = 2.0 * np.pi * r_base * BASE_HEIGHT
        top_area = np.pi * r_base ** 2
        n_base = max(1, int(round(n_raw * (lat_area + top_area) / body_area)))
        n_lat = int(round(n_base * lat_area / (lat_area + top_area)))
        z = rng_base.uniform(-BASE_HEIGHT, 0.0, size=n_lat)
        ang = rng_base.uniform(0.0, 2.0 * np.pi, size=n_lat)
        lat = np.stack([r_base * np.cos(ang), r_base * np.sin(ang), z], axis=1)
        n_top = n_base - n_lat
        rho = np.sqrt(rng_base.uniform(0.0, r_base ** 2, size=n_top))
        ang = rng_base.uniform(0.0, 2.0 * np.pi, size=n_top)
        top = np.stack([rho * np.cos(ang), rho * np.sin(ang), np.zeros(n_top)], axis=1)
        base_pts = np.vstack([lat, top])

    xyz = np.vstack([body, base_pts])
    if not colors:
        return PointCloud(xyz)
    rgb = np.vstack([_color_ramp(frac), np.full((base_pts.shape[0], 3), 0.5)])
    return PointCloud(np.hstack([xyz, rgb]))


def settle(m_norm, payload_kg: float, spec: RobotSpec) -> tuple[np.ndarray, np.ndarray]:
    """Command (+ payload) to settled station frames in one call."""
    arcs = motors_to_arcs(m_norm, spec)
    if payload_kg:
        arcs = apply_payload(arcs, payload_kg, spec)
    return arcs_to_backbone(arcs, spec)


def tip_position(m_norm, payload_kg: float, spec: RobotSpec) -> np.ndarray:
    positions, _ = settle(m_norm, payload_kg, spec)
    return positions[-1]


def split_indices(k: int) -> dict[str, list[int]]:
    """80/10/10 train/val/test partition of 0..K-1 by index."""
    n_train = int(np.floor(0.8 * k))
    n_val = int(np.floor(0.1 * k))
    return {"train": list(range(n_train)),
            "val": list(range(n_train, n_train + n_val)),
            "test": list(range(n_train + n_val, k))}


DEFAULT_VOXEL = 0.005


def generate_dataset(spec: RobotSpec, k: int, n_train: int, seed: int,
                     payload_range: tuple[float, float] | None = None,
                     include_base: bool = False, colors: bool = False,
                     n_raw: int | None = None, voxel: float = DEFAULT_VOXEL):
    """K settled clouds under iid uniform commands, as a dataset bundle.

    Commands are uniform on [0,1]^(3S); payloads, when a range is given, are
    uniform on it with a 10% point mass at exactly zero. Each sample runs
    command -> arcs -> payload -> backbone -> surface -> voxel downsample ->
    resample to n_train points. Raw conditions (tendon displacements in
    meters, payload in kg) are stored; normalization stats come from the
    train split. Fully deterministic per seed.
    """
    from .dataset import build_bundle

    if k < 10:
        raise ContractViolation(f"need at least 10 samples for a split, got {k}")
    if payload_range is not None:
        lo, hi = float(payload_range[0]), float(payload_range[1])
        if not (0.0 <= lo < hi):
            raise ContractViolation(f"degenerate payload range {payload_range}")
    if n_raw is None:
        n_raw = max(4096, 2 * n_train)

    clouds = []
    conditions = []
    for i in range(k):
        rng = np.random.default_rng((seed, i))
        m_norm = rng.uniform(size=spec.motor_dim)
        payload = 0.0
        if payload_range is not None:
            payload = 0.0 if rng.uniform() < 0.1 else float(rng.uniform(lo, hi))
        arcs = apply_payload(motors_to_arcs(m_norm, spec), payload, spec)
        frames = arcs_to_backbone(arcs, spec)
        cloud = sample_surface(frames, spec, n_raw, (seed, i, 1),
                               include_base=include_base, colors=colors)
        cloud = voxel_downsample(cloud, voxel)
        sub_seed = int(np.random.SeedSequence((seed, i, 2)).generate_state(1)[0])
        cloud = resample_to_count(cloud, n_train, sub_seed)
        clouds.append(cloud)
        q_raw = (m_norm - 0.5) * 2.0 * spec.q_max
        conditions.append(np.concatenate([q_raw, [payload]]) if payload_range is not None else q_raw)

    return build_bundle(clouds, np.asarray(conditions), spec,
                        split_indices(k), seed,
                        payload=payload_range is not None,
                        extra={"include_base": include_base, "colors": colors,
                               "n_raw": n_raw, "voxel": voxel,
                               "payload_range": list(payload_range) if payload_range else None})


def workspace_projection(spec: RobotSpec, k_sweep: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Tip reach sweep projected to the YZ plane.

    Returns (tips, boundary): k_sweep (y, z) tip positions under uniform
    commands (row 0 is the all-straight command) and the closed convex-hull
    polyline around them (first vertex repeated at the end).
    """
    if k_sweep < 100:
        raise ContractViolation(f"sweep needs >= 100 commands, got {k_sweep}")
    rng = np.random.default_rng((seed, 0))
    cmds = rng.uniform(size=(k_sweep, spec.motor_dim))
    cmds[0, :] = 0.5
    tips = np.empty((k_sweep, 2))
    for i, cmd in enumerate(cmds):
        tip = tip_position(cmd, 0.0, spec)
        tips[i] = tip[1], tip[2]
    hull = ConvexHull(tips)
    boundary = tips[hull.vertices]
    boundary = np.vstack([boundary, boundary[:1]])
    return tips, boundary
