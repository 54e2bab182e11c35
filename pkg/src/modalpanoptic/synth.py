"""Synthetic scene oracle: sequences with known geometry plus a detector simulator.

Boxes move at constant velocity over a ground disk; surface points land only
on the face most squarely facing the sensor (plus the top face when the
sensor sits above it), with density falling off as 1/range^2. Every output is
a pure function of (config, seed), which is what makes the desk-scale
experiments reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import ClassDef, PointCloudSweep, SweepSequence, Taxonomy
from .inference import PredictedMaps
from .targets import (
    ModalInstance,
    build_trajectories,
    extent_sw,
    modal_center,
    render_bev_targets,
    velocity_target,
)
from .voxels import BevMap, FeatureProvider, GridSpec, flatten_bev, voxelize

CAR = 1
PEDESTRIAN = 2
GROUND = 3

_NEIGHBOR_RADIUS = 0.6  # meters, for the handcrafted local features


def default_taxonomy(min_instance_points: int = 15) -> Taxonomy:
    return Taxonomy(
        (
            ClassDef(0, "unlabeled", "ignore"),
            ClassDef(CAR, "car", "thing"),
            ClassDef(PEDESTRIAN, "pedestrian", "thing"),
            ClassDef(GROUND, "ground", "stuff"),
        ),
        min_instance_points,
    )


@dataclass(frozen=True)
class BoxSpec:
    """Per-class half-extent distribution (per-axis normal, clipped positive)."""

    half_extent_mean: tuple[float, float, float]
    half_extent_std: tuple[float, float, float]


DEFAULT_BOX_SPECS = {
    CAR: BoxSpec((2.25, 1.0, 0.75), (0.35, 0.12, 0.08)),
    PEDESTRIAN: BoxSpec((0.4, 0.4, 0.85), (0.08, 0.08, 0.1)),
}


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    sweep_count: int = 10
    period: float = 0.5
    box_specs: dict[int, BoxSpec] = field(default_factory=lambda: dict(DEFAULT_BOX_SPECS))
    count_range: tuple[int, int] = (3, 6)
    speed_range: tuple[float, float] = (0.5, 4.0)
    points_per_m2: float = 60.0        # on instance faces, at ref_range
    ref_range: float = 10.0
    ground_points_per_m2: float = 1.5  # at ref_range
    ground_radius: float = 30.0
    occlusion: bool = True
    sensor_height: float = 1.0
    min_separation: float = 7.0
    max_range: float = 38.0            # instances beyond this leave no points
    motion: str = "pass"               # pass | drift | static
    approach_range: tuple[float, float] = (3.0, 12.0)
    pair_gap_range: tuple[float, float] | None = None  # adjacent same-class rows
    pair_offset_range: tuple[float, float] = (0.3, 1.8)
    row_partners: int = 1              # boxes added beside each base instance
    unpaired_passers: int = 0          # extra pass-motion singles mixed into row scenes
    ego_motion: str = "static"         # static | orbit
    orbit_radius: float = 8.0
    spawn_radius_range: tuple[float, float] | None = None  # drift/static placement
    spawn_sector: tuple | None = None  # bearing corridor(s), radians: (lo, hi) or ((lo, hi), ...)

    def __post_init__(self):
        if self.sweep_count < 1 or self.period <= 0:
            raise ValueError("need at least one sweep and a positive period")
        if self.points_per_m2 <= 0 or self.ground_points_per_m2 < 0:
            raise ValueError("densities must be positive")
        if self.count_range[0] < 1 or self.count_range[0] > self.count_range[1]:
            raise ValueError("bad instance count range")
        if self.motion not in ("pass", "drift", "static"):
            raise ValueError(f"unknown motion {self.motion!r}")
        if self.ego_motion not in ("static", "orbit"):
            raise ValueError(f"unknown ego motion {self.ego_motion!r}")


@dataclass(frozen=True)
class TrueInstance:
    """Ground-truth box: world-frame base center at t=0 and constant velocity."""

    instance_id: int
    class_id: int
    half_extent: np.ndarray  # (3,)
    base_center: np.ndarray  # (3,) world frame
    velocity: np.ndarray     # (3,) m/s, vz = 0
    group: int = 0           # adjacency group; partners share it

    def center_at(self, t: float) -> np.ndarray:
        return self.base_center + self.velocity * t


@dataclass
class SceneRegistry:
    """Everything the generator knows: true boxes, motion and sweep times."""

    instances: dict[int, TrueInstance]
    sweep_times: list[float]
    config: SceneConfig

    def center_at(self, instance_id: int, sweep_index: int) -> np.ndarray:
        return self.instances[instance_id].center_at(self.sweep_times[sweep_index])


def _sensor_position(cfg: SceneConfig, t: float) -> np.ndarray:
    if cfg.ego_motion == "orbit":
        # Pure-translation orbit: the frame never rotates, only the viewpoint moves.
        omega = 2.0 * np.pi / (cfg.sweep_count * cfg.period)
        return np.array([cfg.orbit_radius * np.cos(omega * t),
                         cfg.orbit_radius * np.sin(omega * t),
                         cfg.sensor_height])
    return np.array([0.0, 0.0, cfg.sensor_height])


# Axis-aligned box faces: (normal axis, sign). Lateral faces first.
_LATERAL_FACES = [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)]


def visible_faces(center: np.ndarray, half: np.ndarray, sensor: np.ndarray,
                  occlusion: bool) -> list[tuple[int, float]]:
    """Faces to sample for one box seen from one sensor position.

    With occlusion on, only the lateral face most squarely facing the sensor
    is kept (real sweeps rarely resolve more than the dominant surface), plus
    the top face whenever the sensor sits above the box. Occlusion off samples
    every face as if the box were transparent.
    """
    faces = list(_LATERAL_FACES) + [(2, 1.0), (2, -1.0)]
    if not occlusion:
        return faces
    to_sensor = sensor - center
    best, best_score = None, 0.0
    for axis, sign in _LATERAL_FACES:
        # The outward normal must point toward the sensor for the face to be lit.
        score = sign * (sensor[axis] - (center[axis] + sign * half[axis]))
        if score > best_score:
            best, best_score = (axis, sign), score
    keep = [best] if best is not None else []
    if sensor[2] > center[2] + half[2]:
        keep.append((2, 1.0))
    return keep


def _sample_face(center, half, axis, sign, density, rng) -> np.ndarray:
    """Stratified-jittered samples on one face; count follows area * density."""
    axes = [a for a in range(3) if a != axis]
    spans = [2.0 * half[a] for a in axes]
    area = spans[0] * spans[1]
    n = max(1, int(round(area * density)))
    cols = max(1, int(np.ceil(np.sqrt(n * spans[0] / max(spans[1], 1e-6)))))
    rows = max(1, int(np.ceil(n / cols)))
    u = (np.tile(np.arange(cols), rows)[: cols * rows] + rng.uniform(0, 1, cols * rows)) / cols
    v = (np.repeat(np.arange(rows), cols)[: cols * rows] + rng.uniform(0, 1, cols * rows)) / rows
    pts = np.empty((cols * rows, 3))
    pts[:, axes[0]] = center[axes[0]] + (u - 0.5) * spans[0]
    pts[:, axes[1]] = center[axes[1]] + (v - 0.5) * spans[1]
    pts[:, axis] = center[axis] + sign * half[axis]
    return pts


def _sample_ground(cfg: SceneConfig, sensor: np.ndarray, rng) -> np.ndarray:
    """Annulus-by-annulus disk sampling around the sensor footprint, z = 0."""
    points = []
    edges = np.arange(1.0, cfg.ground_radius + 1.0, 1.0)
    for r_in, r_out in zip(edges, edges[1:]):
        r_mid = 0.5 * (r_in + r_out)
        area = np.pi * (r_out ** 2 - r_in ** 2)
        density = cfg.ground_points_per_m2 * (cfg.ref_range / r_mid) ** 2
        n = int(round(area * density))
        if n == 0:
            continue
        radius = np.sqrt(rng.uniform(r_in ** 2, r_out ** 2, n))
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        ring = np.column_stack([
            sensor[0] + radius * np.cos(theta),
            sensor[1] + radius * np.sin(theta),
            np.zeros(n),
        ])
        points.append(ring)
    return np.concatenate(points, axis=0) if points else np.zeros((0, 3))


def _place_instances(cfg: SceneConfig, rng) -> dict[int, TrueInstance]:
    """Draw boxes whose trajectories keep min_separation between groups."""
    duration = cfg.sweep_count * cfg.period
    times = np.arange(cfg.sweep_count) * cfg.period
    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    spawn_range = cfg.spawn_radius_range or (4.0, 0.8 * cfg.max_range)
    if cfg.spawn_sector is None:
        sectors = [(0.0, 2.0 * np.pi)]
    elif np.isscalar(cfg.spawn_sector[0]):
        sectors = [tuple(cfg.spawn_sector)]
    else:
        sectors = [tuple(s) for s in cfg.spawn_sector]
    class_ids = sorted(cfg.box_specs)
    placed: list[TrueInstance] = []
    next_id = 1

    def trajectory_ok(base, vel, group):
        for other in placed:
            if other.group == group:
                continue
            mine = base[None, :2] + vel[None, :2] * times[:, None]
            theirs = other.base_center[None, :2] + other.velocity[None, :2] * times[:, None]
            if np.linalg.norm(mine - theirs, axis=1).min() < cfg.min_separation:
                return False
        return True

    for _ in range(count):
        cid = class_ids[int(rng.integers(len(class_ids)))]
        spec = cfg.box_specs[cid]
        for _attempt in range(1000):
            half = np.abs(rng.normal(spec.half_extent_mean, spec.half_extent_std))
            half = np.maximum(half, 0.05)
            speed = rng.uniform(*cfg.speed_range)
            heading = rng.uniform(0.0, 2.0 * np.pi)
            direction = np.array([np.cos(heading), np.sin(heading), 0.0])
            if cfg.motion == "pass":
                offset = rng.uniform(*cfg.approach_range) * (1 if rng.uniform() < 0.5 else -1)
                perp = np.array([-direction[1], direction[0], 0.0])
                t_star = rng.uniform(0.15, 0.85) * duration
                base = perp * offset - direction * speed * t_star
                vel = direction * speed
            elif cfg.motion == "drift":
                radius = rng.uniform(*spawn_range)
                angle = rng.uniform(*sectors[int(rng.integers(len(sectors)))])
                base = np.array([radius * np.cos(angle), radius * np.sin(angle), 0.0])
                vel = direction * speed
            else:
                radius = rng.uniform(*spawn_range)
                angle = rng.uniform(*sectors[int(rng.integers(len(sectors)))])
                base = np.array([radius * np.cos(angle), radius * np.sin(angle), 0.0])
                vel = np.zeros(3)
            base[2] = half[2]  # box rests on the ground plane
            group = next_id
            if not trajectory_ok(base, vel, group):
                continue
            placed.append(TrueInstance(next_id, cid, half, base, vel, group))
            next_id += 1
            if cfg.pair_gap_range is not None:
                # Row-parking partners: stacked along the axis most
                # perpendicular to the sensor bearing, so all boxes show the
                # sensor the same face side by side, staggered in depth by a
                # fraction of the depth half extent (pair_offset_range is
                # dimensionless). The boundary points are exactly the fuzzy
                # ones a nearest-center rule misassigns.
                mid = base[:2] + vel[:2] * 0.5 * duration
                lat = int(np.abs(mid).argmin())
                depth = 1 - lat
                side = 1 if rng.uniform() < 0.5 else -1
                prev_base, prev_half = base, half
                for _partner in range(cfg.row_partners):
                    partner_half = np.maximum(
                        np.abs(rng.normal(spec.half_extent_mean, spec.half_extent_std)), 0.05)
                    gap = rng.uniform(*cfg.pair_gap_range)
                    stagger = (rng.uniform(*cfg.pair_offset_range) * partner_half[depth]
                               * (1 if rng.uniform() < 0.5 else -1))
                    shift = np.zeros(3)
                    shift[lat] = side * (prev_half[lat] + partner_half[lat] + gap)
                    shift[depth] = stagger
                    pbase = prev_base + shift
                    pbase[2] = partner_half[2]
                    placed.append(TrueInstance(next_id, cid, partner_half, pbase, vel, group))
                    next_id += 1
                    prev_base, prev_half = pbase, partner_half
            break
        else:
            raise ValueError("could not place instances under min_separation; relax the config")
    for _ in range(cfg.unpaired_passers):
        cid = class_ids[int(rng.integers(len(class_ids)))]
        spec = cfg.box_specs[cid]
        for _attempt in range(1000):
            half = np.maximum(np.abs(rng.normal(spec.half_extent_mean, spec.half_extent_std)), 0.05)
            speed = rng.uniform(max(cfg.speed_range[0], 2.0), max(cfg.speed_range[1], 4.0))
            heading = rng.uniform(0.0, 2.0 * np.pi)
            direction = np.array([np.cos(heading), np.sin(heading), 0.0])
            offset = rng.uniform(*cfg.approach_range) * (1 if rng.uniform() < 0.5 else -1)
            perp = np.array([-direction[1], direction[0], 0.0])
            t_star = rng.uniform(0.15, 0.85) * duration
            base = perp * offset - direction * speed * t_star
            base[2] = half[2]
            vel = direction * speed
            group = next_id
            if not trajectory_ok(base, vel, group):
                continue
            placed.append(TrueInstance(next_id, cid, half, base, vel, group))
            next_id += 1
            break
        else:
            raise ValueError("could not place passer under min_separation; relax the config")
    return {inst.instance_id: inst for inst in placed}


def generate_sequence(cfg: SceneConfig, taxonomy: Taxonomy | None = None
                      ) -> tuple[SweepSequence, SceneRegistry]:
    """Sample a labeled sweep sequence plus the registry of true boxes."""
    taxonomy = taxonomy or default_taxonomy()
    for cid in cfg.box_specs:
        if not taxonomy.is_thing(cid):
            raise ValueError(f"box class {cid} is not a thing class")
    root = np.random.SeedSequence(cfg.seed)
    place_rng = np.random.default_rng(root.spawn(1)[0])
    instances = _place_instances(cfg, place_rng)
    sweep_seeds = root.spawn(cfg.sweep_count + 1)[1:]
    sweeps = []
    times = [t * cfg.period for t in range(cfg.sweep_count)]
    for t_idx, t in enumerate(times):
        rng = np.random.default_rng(sweep_seeds[t_idx])
        sensor = _sensor_position(cfg, t)
        xyz_world = [_sample_ground(cfg, sensor, rng)]
        sems = [np.full(xyz_world[0].shape[0], GROUND, dtype=np.int32)]
        insts = [np.zeros(xyz_world[0].shape[0], dtype=np.int32)]
        for inst in instances.values():
            center = inst.center_at(t)
            planar = np.hypot(*(center[:2] - sensor[:2]))
            if planar > cfg.max_range:
                continue
            density = cfg.points_per_m2 * (cfg.ref_range / max(planar, 1.0)) ** 2
            for axis, sign in visible_faces(center, inst.half_extent, sensor, cfg.occlusion):
                pts = _sample_face(center, inst.half_extent, axis, sign, density, rng)
                xyz_world.append(pts)
                sems.append(np.full(pts.shape[0], inst.class_id, dtype=np.int32))
                insts.append(np.full(pts.shape[0], inst.instance_id, dtype=np.int32))
        world = np.concatenate(xyz_world, axis=0)
        rows = np.zeros((world.shape[0], 5))
        # Stored at float32 precision so on-disk round trips are bit exact.
        rows[:, :3] = (world - sensor).astype(np.float32)
        rows[:, 3] = rng.uniform(0.0, 1.0, world.shape[0]).astype(np.float32)
        pose = np.eye(4)
        pose[:3, 3] = sensor
        sweeps.append(PointCloudSweep(t, rows, np.concatenate(sems), np.concatenate(insts), pose))
    seq = SweepSequence(tuple(sweeps), cfg.period)
    seq.validate_labels(taxonomy)
    return seq, SceneRegistry(instances, times, cfg)


@dataclass(frozen=True)
class DetectorNoise:
    """Imperfection model for the simulated first-stage network."""

    center_jitter: float = 0.0      # sigma, meters
    confidence_noise: float = 0.0   # sigma of the confidence knockdown
    drop_probability: float = 0.0   # per instance per sweep
    semantic_flip_probability: float = 0.0
    velocity_noise: float = 0.0     # sigma, m/s

    def __post_init__(self):
        for p in (self.drop_probability, self.semantic_flip_probability):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        for s in (self.center_jitter, self.confidence_noise, self.velocity_noise):
            if s < 0:
                raise ValueError("noise sigmas must be >= 0")


NO_NOISE = DetectorNoise()


class HandcraftedFeatures(FeatureProvider):
    """Deterministic per-point features standing in for the learned encoder.

    Channels: log local density, height above the ground estimate, the offset
    vector from the point to its local neighborhood centroid, and planar
    range / 10. The centroid-offset channels are what let the pair scorer
    recognize which body a boundary point sits on: the local mass of a point
    near an instance gap leans toward its own object.
    """

    DIM = 6

    def __init__(self, spec: GridSpec):
        self.spec = spec

    def point_features(self, sweep: PointCloudSweep) -> np.ndarray:
        xyz = sweep.xyz
        n = xyz.shape[0]
        out = np.zeros((n, self.DIM))
        if n == 0:
            return out
        ground = np.percentile(xyz[:, 2], 5.0)
        cells: dict[tuple[int, int], list[int]] = {}
        keys = np.floor(xyz[:, :2] / _NEIGHBOR_RADIUS).astype(np.int64)
        for i, key in enumerate(map(tuple, keys)):
            cells.setdefault(key, []).append(i)
        for i in range(n):
            kx, ky = keys[i]
            neighborhood = []
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    neighborhood.extend(cells.get((kx + dx, ky + dy), ()))
            nb = np.asarray(neighborhood)
            close = nb[np.linalg.norm(xyz[nb, :2] - xyz[i, :2], axis=1) <= _NEIGHBOR_RADIUS]
            centroid = xyz[close].mean(axis=0)
            out[i, 0] = np.log1p(close.size)
            out[i, 1] = xyz[i, 2] - ground
            out[i, 2:5] = centroid - xyz[i]
            out[i, 5] = np.hypot(xyz[i, 0], xyz[i, 1]) / 10.0
        return out

    def bev_map(self, sweep: PointCloudSweep) -> BevMap:
        feats = self.point_features(sweep)
        grid = voxelize(sweep.points, self.spec, features=feats, feature_reduce="mean")
        return flatten_bev(grid, reducer="mean")


class ZeroFeatures(FeatureProvider):
    """Featureless provider for geometry-only runs."""

    DIM = 0

    def __init__(self, spec: GridSpec):
        self.spec = spec

    def point_features(self, sweep: PointCloudSweep) -> np.ndarray:
        return np.zeros((len(sweep), 0))

    def bev_map(self, sweep: PointCloudSweep) -> BevMap:
        return BevMap(np.zeros((self.spec.bev_width, self.spec.bev_depth, 0)),
                      self.spec.bev_cell_size, self.spec.planar_range)


def simulate_detector(
    seq: SweepSequence,
    registry: SceneRegistry | None,
    noise: DetectorNoise,
    spec: GridSpec,
    taxonomy: Taxonomy | None = None,
    suppressed: set[tuple[int, int]] = frozenset(),
    provider: FeatureProvider | None = None,
    seed: int = 0,
) -> list[PredictedMaps]:
    """Backbone-output simulation: semantics, heatmaps, height, velocity, features.

    Center heatmaps are rendered at the labeled modal centers with jitter,
    scaled by a noisy confidence; dropped and suppressed (instance, sweep)
    records simply leave no peak. Velocity cells carry the instance's planar
    velocity plus noise; with a registry that is the generator truth,
    otherwise the centered difference of the labeled trajectory (what a
    trained offset head regresses). Deterministic per (inputs, seed).
    """
    taxonomy = taxonomy or default_taxonomy()
    class_ids = [c for c in taxonomy.class_ids if c not in taxonomy.ignore_ids]
    trajectories = None if registry is not None else build_trajectories(seq, taxonomy)
    sweep_seeds = np.random.SeedSequence(seed).spawn(len(seq))
    maps: list[PredictedMaps] = []
    for t_idx, sweep in enumerate(seq.sweeps):
        rng = np.random.default_rng(sweep_seeds[t_idx])
        sem_pred = sweep.sem_labels.astype(np.int32).copy()
        if noise.semantic_flip_probability > 0:
            flip = rng.uniform(size=len(sweep)) < noise.semantic_flip_probability
            for i in np.flatnonzero(flip):
                choices = [c for c in class_ids if c != sem_pred[i]]
                sem_pred[i] = choices[int(rng.integers(len(choices)))]
        sensor = sweep.ego_pose[:3, 3]
        instances, velocities, extents, peaks = [], {}, [], []
        ids = sweep.inst_labels
        for iid in np.unique(ids[ids > 0]):
            if (int(iid), t_idx) in suppressed:
                continue
            if rng.uniform() < noise.drop_probability:
                continue
            members = np.flatnonzero(ids == iid)
            center = modal_center(sweep.xyz[members])
            extent = extent_sw(sweep.xyz[members], center)
            center = center + rng.normal(0.0, noise.center_jitter, 3) if noise.center_jitter else center
            if not spec.in_range(center[None, :])[0]:
                continue
            conf = float(np.clip(1.0 - abs(rng.normal(0.0, noise.confidence_noise)), 0.05, 1.0)) \
                if noise.confidence_noise else 1.0
            if registry is not None:
                vel = registry.instances[int(iid)].velocity[:2].copy()
            else:
                vel = velocity_target(trajectories[int(iid)], t_idx, seq.period)
            if noise.velocity_noise:
                vel = vel + rng.normal(0.0, noise.velocity_noise, 2)
            cid = int(sweep.sem_labels[members[0]])
            instances.append(ModalInstance(int(iid), cid, center, extent, members.size,
                                           sweep.timestamp, t_idx))
            velocities[int(iid)] = vel
            extents.append(extent)
            peaks.append(conf)
        rendered = render_bev_targets(instances, velocities, spec, taxonomy.num_channels,
                                      extents=extents, peak_scale=peaks)
        point_feats = provider.point_features(sweep) if provider is not None else np.zeros((len(sweep), 0))
        bev_feats = provider.bev_map(sweep) if provider is not None else BevMap(
            np.zeros((spec.bev_width, spec.bev_depth, 0)), spec.bev_cell_size, spec.planar_range)
        maps.append(PredictedMaps(rendered.heatmaps, rendered.height, rendered.velocity,
                                  sem_pred, bev_feats, point_feats))
    return maps
