"""Synthetic rotating-LiDAR sweeps over parametric scenes.

A scanner at (0, 0, sensor_height) fires one ray per (beam, azimuth) pair;
the nearest primitive intersection inside max range becomes a labeled point.
Because beams fan out from a single origin, the resulting clouds reproduce
the signature property of swept LiDAR: point density falls off with
distance, both along each ground ring (arc spacing grows linearly) and
between rings (ring radii grow superlinearly with shallower beams).

Clouds are stored in the sensor frame (origin at the scanner), so a point's
range is simply its coordinate norm.  Coordinates are quantized to float32
at creation time, matching the file format's payload precision; derived
range features are computed from the quantized coordinates, which makes
file round trips bit-exact.

Cloud file layout:

    magic   8 bytes  b"MNEWPCL1"   (trailing digit = format version)
    N       u32      point count
    D_f     u32      feature width
    labels  u32      1 when a label block follows, else 0
    xyz     N x 3   little-endian float32
    feat    N x D_f little-endian float32
    label   N        u32 (only when the flag is set)

Manifest: UTF-8 text, first line ``classes <C> <name0> <name1> ...``, then
one line per frame: ``<split> <relative-path> <point-count>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PointCloud",
    "ScannerSpec",
    "SceneSpec",
    "GroundPlane",
    "Box",
    "Cylinder",
    "Wall",
    "CloudFormatError",
    "raycast_sweep",
    "sample_fixed",
    "write_cloud",
    "read_cloud",
    "make_benchmark",
    "read_manifest",
    "load_dataset",
    "random_scene",
    "BENCHMARK_CLASSES",
]

BENCHMARK_CLASSES = ("unlabeled", "ground", "building", "pole", "car")


@dataclass
class PointCloud:
    """Sensor-frame coordinates, input features and per-point labels.

    Default features (D_f = 3): surface intensity in [0, 1], horizontal
    range sqrt(x^2+y^2), full range sqrt(x^2+y^2+z^2), both in meters.
    """

    xyz: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = self.xyz.shape[0]
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            feats = feats.reshape(n, -1)
        if feats.shape[0] != n:
            raise ValueError(f"features rows {feats.shape[0]} != points {n}")
        self.features = feats
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)

    @property
    def n_points(self) -> int:
        return self.xyz.shape[0]


# ---------------------------------------------------------------------------
# scene primitives
# ---------------------------------------------------------------------------


@dataclass
class GroundPlane:
    """Horizontal square plane at z = 0 with half-extent ``extent``."""

    extent: float
    class_id: int
    albedo: float

    def intersect(self, origin, dirs):
        dz = dirs[:, 2]
        going_down = dz < -1e-12
        ti = np.where(going_down, -origin[2] / np.where(going_down, dz, 1.0), 0.0)
        p = origin[None, :] + ti[:, None] * dirs
        inside = (np.abs(p[:, 0]) <= self.extent) & (np.abs(p[:, 1]) <= self.extent)
        hit = going_down & inside & (ti > 1e-9)
        return np.where(hit, ti, np.inf)


@dataclass
class Box:
    """Axis-aligned box footprint rotated by ``yaw`` about its center."""

    center: tuple
    half_extent: tuple  # (hx, hy)
    z_range: tuple  # (z0, z1)
    yaw: float
    class_id: int
    albedo: float

    def __post_init__(self):
        if min(self.half_extent) <= 0 or self.z_range[1] <= self.z_range[0]:
            raise ValueError(f"degenerate box: {self}")

    def intersect(self, origin, dirs):
        c, s = np.cos(-self.yaw), np.sin(-self.yaw)
        ox = origin[0] - self.center[0]
        oy = origin[1] - self.center[1]
        o = np.array([c * ox - s * oy, s * ox + c * oy, origin[2]])
        d = np.empty_like(dirs)
        d[:, 0] = c * dirs[:, 0] - s * dirs[:, 1]
        d[:, 1] = s * dirs[:, 0] + c * dirs[:, 1]
        d[:, 2] = dirs[:, 2]
        lo = np.array([-self.half_extent[0], -self.half_extent[1], self.z_range[0]])
        hi = np.array([self.half_extent[0], self.half_extent[1], self.z_range[1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[None, :] - o[None, :]) / d
            t2 = (hi[None, :] - o[None, :]) / d
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > 1e-9)
        t = np.where(hit, tmin, np.inf)
        return t


@dataclass
class Cylinder:
    """Vertical cylinder side surface (poles, trunks)."""

    center: tuple
    radius: float
    z_range: tuple
    class_id: int
    albedo: float

    def __post_init__(self):
        if self.radius <= 0 or self.z_range[1] <= self.z_range[0]:
            raise ValueError(f"degenerate cylinder: {self}")

    def intersect(self, origin, dirs):
        ox = origin[0] - self.center[0]
        oy = origin[1] - self.center[1]
        dx, dy = dirs[:, 0], dirs[:, 1]
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        cte = ox * ox + oy * oy - self.radius * self.radius
        disc = b * b - 4.0 * a * cte
        ok = (disc >= 0.0) & (a > 1e-18)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_near = (-b - sq) / (2.0 * a)
        z = origin[2] + t_near * dirs[:, 2]
        hit = ok & (t_near > 1e-9) & (z >= self.z_range[0]) & (z <= self.z_range[1])
        return np.where(hit, t_near, np.inf)


@dataclass
class Wall:
    """Vertical rectangle standing on the ground: base point, horizontal
    direction, length and height."""

    base: tuple  # (x, y) of one bottom corner
    direction: tuple  # unit-ish horizontal direction along the wall
    length: float
    height: float
    class_id: int
    albedo: float

    def __post_init__(self):
        if self.length <= 0 or self.height <= 0:
            raise ValueError(f"degenerate wall: {self}")

    def intersect(self, origin, dirs):
        u = np.asarray(self.direction, dtype=np.float64)
        u = u / np.linalg.norm(u)
        n = np.array([-u[1], u[0], 0.0])
        p0 = np.array([self.base[0], self.base[1], 0.0])
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p0 - origin) @ n) / denom
        p = origin[None, :] + t[:, None] * dirs
        s = (p[:, :2] - p0[None, :2]) @ u[:2]
        hit = (
            (np.abs(denom) > 1e-12)
            & (t > 1e-9)
            & (s >= 0.0)
            & (s <= self.length)
            & (p[:, 2] >= 0.0)
            & (p[:, 2] <= self.height)
        )
        return np.where(hit, t, np.inf)


@dataclass
class ScannerSpec:
    """Rotating scanner: one ray per (beam elevation, azimuth step).

    The default azimuth count is sized so a sweep lands just above the
    benchmark's 2048-point budget: heavy random thinning would wash out the
    deterministic ring-spacing gradient that makes sparsity grow with range.
    """

    elevations_deg: tuple = tuple(np.linspace(-15.0, 1.0, 16))
    azimuth_steps: int = 160
    max_range: float = 60.0
    sensor_height: float = 1.8

    def rays(self):
        el = np.deg2rad(np.asarray(self.elevations_deg, dtype=np.float64))
        az = 2.0 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        ce, se = np.cos(el), np.sin(el)
        ca, sa = np.cos(az), np.sin(az)
        dirs = np.empty((el.size, az.size, 3))
        dirs[:, :, 0] = ce[:, None] * ca[None, :]
        dirs[:, :, 1] = ce[:, None] * sa[None, :]
        dirs[:, :, 2] = se[:, None] * np.ones_like(ca)[None, :]
        origin = np.array([0.0, 0.0, self.sensor_height])
        return origin, dirs.reshape(-1, 3)


@dataclass
class SceneSpec:
    """A ground plane plus a list of labeled primitives and a scanner."""

    primitives: list
    scanner: ScannerSpec = field(default_factory=ScannerSpec)


# ---------------------------------------------------------------------------
# sweep generation
# ---------------------------------------------------------------------------


def _quantize(a: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 (what the file format stores)."""
    return a.astype(np.float32).astype(np.float64)


def raycast_sweep(scene: SceneSpec, seed: int = 0, frame_id: str = "") -> PointCloud:
    """Cast every scanner ray, keep nearest hits inside max range.

    Intensity is the hit primitive's albedo with 2% multiplicative Gaussian
    noise, clamped to [0, 1].  Missed rays contribute no point.
    """
    origin, dirs = scene.scanner.rays()
    if not scene.primitives:
        return PointCloud(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64), frame_id
        )
    t_all = np.stack([p.intersect(origin, dirs) for p in scene.primitives])
    nearest = np.argmin(t_all, axis=0)
    t = t_all[nearest, np.arange(dirs.shape[0])]
    hit = np.isfinite(t) & (t < scene.scanner.max_range)

    # sensor frame: origin at the scanner, so a point is just t * direction
    xyz = _quantize(t[hit, None] * dirs[hit])
    which = nearest[hit]
    albedo = np.array([p.albedo for p in scene.primitives])[which]
    labels = np.array([p.class_id for p in scene.primitives], np.int64)[which]

    rng = np.random.default_rng(seed)
    intensity = np.clip(albedo * (1.0 + rng.normal(0.0, 0.015, albedo.size)), 0.0, 1.0)
    range_2d = np.sqrt(xyz[:, 0] ** 2 + xyz[:, 1] ** 2)
    range_3d = np.sqrt(xyz[:, 0] ** 2 + xyz[:, 1] ** 2 + xyz[:, 2] ** 2)
    features = _quantize(np.column_stack([intensity, range_2d, range_3d]))
    return PointCloud(xyz, features, labels, frame_id)


def sample_fixed(cloud: PointCloud, n_points: int, seed: int = 0) -> PointCloud:
    """Resample to exactly ``n_points``: uniform subsample without
    replacement when oversized, keep-all plus resample-with-replacement fill
    when undersized.  Deterministic per seed."""
    n = cloud.n_points
    if n == 0:
        raise ValueError("cannot resample an empty cloud")
    rng = np.random.default_rng(seed)
    if n >= n_points:
        pick = rng.choice(n, size=n_points, replace=False)
    else:
        fill = rng.choice(n, size=n_points - n, replace=True)
        pick = np.concatenate([np.arange(n), fill])
        rng.shuffle(pick)
    return PointCloud(
        cloud.xyz[pick], cloud.features[pick], cloud.labels[pick], cloud.frame_id
    )


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

_MAGIC_PREFIX = b"MNEWPCL"
_MAGIC = b"MNEWPCL1"


class CloudFormatError(Exception):
    """Malformed, wrong-version or truncated cloud file."""


def write_cloud(path, cloud: PointCloud, with_labels: bool = True) -> None:
    n = cloud.n_points
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", n, cloud.features.shape[1], 1 if with_labels else 0))
        fh.write(cloud.xyz.astype("<f4").tobytes())
        fh.write(cloud.features.astype("<f4").tobytes())
        if with_labels:
            fh.write(cloud.labels.astype("<u4").tobytes())


def read_cloud(path, frame_id: str | None = None) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:7] != _MAGIC_PREFIX:
        raise CloudFormatError(f"malformed header in {path}")
    if blob[:8] != _MAGIC:
        raise CloudFormatError(
            f"version mismatch in {path}: got {blob[7:8]!r}, expected b'1'"
        )
    if len(blob) < 8 + 12:
        raise CloudFormatError(f"truncated payload in {path}: header incomplete")
    n, d_f, has_labels = struct.unpack_from("<III", blob, 8)
    need = 8 + 12 + 4 * n * 3 + 4 * n * d_f + (4 * n if has_labels else 0)
    if len(blob) < need:
        raise CloudFormatError(
            f"truncated payload in {path}: need {need} bytes, have {len(blob)}"
        )
    off = 20
    xyz = np.frombuffer(blob, "<f4", n * 3, off).reshape(n, 3)
    off += 4 * n * 3
    feat = np.frombuffer(blob, "<f4", n * d_f, off).reshape(n, d_f)
    off += 4 * n * d_f
    if has_labels:
        labels = np.frombuffer(blob, "<u4", n, off).astype(np.int64)
    else:
        labels = np.zeros(n, np.int64)
    if frame_id is None:
        frame_id = Path(path).stem
    return PointCloud(xyz.astype(np.float64), feat.astype(np.float64), labels, frame_id)


# ---------------------------------------------------------------------------
# benchmark suite
# ---------------------------------------------------------------------------


def random_scene(rng: np.random.Generator) -> SceneSpec:
    """One randomized street-like layout.

    Class/albedo plan (classes: 0 unlabeled clutter, 1 ground, 2 building
    incl. free-standing walls, 3 pole, 4 car).  Albedo bands are mostly
    separated so intensity is a strong but not sufficient cue; extents and
    heights separate the rest.
    """
    prims: list = [GroundPlane(70.0, 1, rng.uniform(0.25, 0.35))]

    def _place(dist_lo, dist_hi):
        r = rng.uniform(dist_lo, dist_hi)
        a = rng.uniform(0.0, 2.0 * np.pi)
        return r * np.cos(a), r * np.sin(a)

    for _ in range(rng.integers(2, 5)):
        prims.append(
            Box(
                center=_place(12, 45),
                half_extent=(rng.uniform(3, 9), rng.uniform(3, 8)),
                z_range=(0.0, rng.uniform(4, 10)),
                yaw=rng.uniform(0, np.pi),
                class_id=2,
                albedo=rng.uniform(0.55, 0.68),
            )
        )
    for _ in range(rng.integers(0, 3)):
        ang = rng.uniform(0, 2 * np.pi)
        prims.append(
            Wall(
                base=_place(8, 40),
                direction=(np.cos(ang), np.sin(ang)),
                length=rng.uniform(8, 25),
                height=rng.uniform(2, 4),
                class_id=2,
                albedo=rng.uniform(0.55, 0.68),
            )
        )
    for _ in range(rng.integers(7, 13)):
        prims.append(
            Cylinder(
                center=_place(3, 25),
                radius=rng.uniform(0.15, 0.30),
                z_range=(0.0, rng.uniform(4, 7)),
                class_id=3,
                albedo=rng.uniform(0.80, 0.95),
            )
        )
    for _ in range(rng.integers(3, 8)):
        prims.append(
            Box(
                center=_place(4, 32),
                half_extent=(rng.uniform(2.0, 2.4), rng.uniform(0.85, 1.0)),
                z_range=(0.0, rng.uniform(1.4, 1.8)),
                yaw=rng.uniform(0, np.pi),
                class_id=4,
                albedo=rng.uniform(0.36, 0.47),
            )
        )
    for _ in range(rng.integers(3, 7)):
        half = rng.uniform(0.25, 0.7)
        prims.append(
            Box(
                center=_place(2, 22),
                half_extent=(half, half),
                z_range=(0.0, 2 * half),
                yaw=rng.uniform(0, np.pi),
                class_id=0,
                albedo=rng.uniform(0.02, 0.10),
            )
        )
    return SceneSpec(prims)


def make_benchmark(
    out_dir,
    seed: int = 0,
    n_train: int = 64,
    n_valid: int = 16,
    n_points: int = 2048,
    classes: tuple = BENCHMARK_CLASSES,
) -> Path:
    """Generate the desk benchmark suite and write its manifest.

    Per-frame seeds derive from the master seed and frame index, so frame
    generation order (or parallelism) cannot change the data.
    """
    out_dir = Path(out_dir)
    manifest_lines = [f"classes {len(classes)} " + " ".join(classes)]
    scanner = ScannerSpec()
    if len(scanner.elevations_deg) * scanner.azimuth_steps < n_points:
        raise ValueError("scanner ray budget is below the per-frame point count")
    for split, count, offset in (("train", n_train, 0), ("valid", n_valid, n_train)):
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            frame = offset + i
            frame_seed = np.random.SeedSequence([seed, frame]).generate_state(1)[0]
            frng = np.random.default_rng(frame_seed)
            scene = random_scene(frng)
            sweep = raycast_sweep(scene, seed=int(frame_seed) ^ 0x5EED, frame_id=f"frame_{frame:04d}")
            cloud = sample_fixed(sweep, n_points, seed=int(frame_seed) ^ 0xF00D)
            rel = f"{split}/frame_{frame:04d}.pcl"
            write_cloud(out_dir / rel, cloud)
            manifest_lines.append(f"{split} {rel} {cloud.n_points}")
    (out_dir / "manifest.txt").write_text("\n".join(manifest_lines) + "\n")
    return out_dir / "manifest.txt"


def read_manifest(path):
    """Parse a manifest into (class_names, [(split, relpath, count), ...])."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or not lines[0].startswith("classes "):
        raise CloudFormatError(f"manifest {path} missing classes line")
    head = lines[0].split()
    n_classes = int(head[1])
    names = tuple(head[2 : 2 + n_classes])
    if len(names) != n_classes:
        raise CloudFormatError(f"manifest {path}: class count/name mismatch")
    frames = []
    for line in lines[1:]:
        split, rel, count = line.split()
        frames.append((split, rel, int(count)))
    return names, frames


def load_dataset(data_dir, split: str | None = None):
    """Load (class_names, clouds) for one split, or all when split is None."""
    data_dir = Path(data_dir)
    names, frames = read_manifest(data_dir / "manifest.txt")
    clouds = [
        read_cloud(data_dir / rel)
        for s, rel, _ in frames
        if split is None or s == split
    ]
    return names, clouds
