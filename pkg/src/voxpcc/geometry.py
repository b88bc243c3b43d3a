"""Point-cloud geometry: file IO, voxelization, octree partitioning.

Clouds are integer voxel sets on a cubic grid of side `resolution`.
Blocks store dense boolean occupancy in x-major order (index
x*size^2 + y*size + z), matching the flattening used by the networks and
the top-k thresholding tie-break.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError

COORD_TOLERANCE = 1e-6


@dataclass
class PointCloud:
    """Deduplicated integer points on a [0, resolution)^3 grid."""

    points: np.ndarray
    resolution: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 3)
        if self.resolution <= 0:
            raise UsageError("resolution must be positive")
        if self.points.size and (self.points.min() < 0
                                 or self.points.max() >= self.resolution):
            raise DataError(f"coordinates outside [0, {self.resolution})")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices,
                                   dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or
                                self.faces.max() >= len(self.vertices)):
            raise DataError("face index out of range")


@dataclass
class VoxelBlock:
    """One leaf of the octree: origin plus dense occupancy."""

    origin: tuple[int, int, int]
    size: int
    occupancy: np.ndarray

    def __post_init__(self):
        self.origin = tuple(int(v) for v in self.origin)
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.shape != (self.size,) * 3:
            raise UsageError(f"occupancy shape {self.occupancy.shape} does "
                             f"not match block size {self.size}")

    def point_count(self) -> int:
        return int(self.occupancy.sum())

    def local_points(self) -> np.ndarray:
        return np.argwhere(self.occupancy).astype(np.int64)


@dataclass
class Octree:
    """Breadth-first child masks over non-empty nodes plus the leaf blocks
    in the same traversal order."""

    resolution: int
    block_size: int
    masks: bytes
    blocks: list


def _canonical(points: np.ndarray) -> np.ndarray:
    if points.size == 0:
        return points.reshape(0, 3)
    return np.unique(points, axis=0)


# ---------------------------------------------------------------------------
# file formats

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_point_cloud(path, resolution: int | None = None) -> PointCloud:
    """Read a PLY vertex cloud (ascii or binary little-endian).

    Coordinates must already be integral voxel positions (within
    COORD_TOLERANCE); raw scans should go through voxelize first. The grid
    size comes from the `resolution` argument or a "comment resolution N"
    header line.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"ply"):
        raise DataError(f"{path}: not a ply file")
    end = data.find(b"end_header")
    if end < 0:
        raise DataError(f"{path}: unterminated ply header")
    body_at = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii", "replace").splitlines()

    fmt = None
    count = None
    file_resolution = None
    props: list[tuple[str, str]] = []
    element = None
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "comment" and len(parts) >= 3 \
                and parts[1] == "resolution":
            try:
                file_resolution = int(parts[2])
            except ValueError:
                raise DataError(f"{path}: bad resolution comment")
        elif parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                count = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            if parts[1] == "list":
                raise DataError(f"{path}: list property on vertices")
            if parts[1] not in _PLY_TYPES:
                raise DataError(f"{path}: unsupported type {parts[1]}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))

    if count is None:
        raise DataError(f"{path}: no vertex element")
    names = [n for n, _ in props]
    if not all(axis in names for axis in "xyz"):
        raise DataError(f"{path}: vertices need x, y and z properties")

    if fmt == "ascii":
        rows = data[body_at:].split(b"\n")
        vals = np.array([row.split()[:len(props)]
                         for row in rows[:count]], dtype=np.float64)
        coords = vals[:, [names.index(a) for a in "xyz"]]
    elif fmt == "binary_little_endian":
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        if body_at + count * dtype.itemsize > len(data):
            raise DataError(f"{path}: truncated vertex data")
        rec = np.frombuffer(data, dtype=dtype, count=count, offset=body_at)
        coords = np.stack([rec[a].astype(np.float64) for a in "xyz"],
                          axis=1)
    else:
        raise DataError(f"{path}: unsupported ply format {fmt!r}")

    rounded = np.rint(coords)
    if coords.size and np.abs(coords - rounded).max() > COORD_TOLERANCE:
        raise DataError(f"{path}: non-integer coordinates; "
                        f"voxelize the cloud first")
    res = resolution if resolution is not None else file_resolution
    if res is None:
        raise DataError(f"{path}: resolution not in header; pass it "
                        f"explicitly")
    return PointCloud(_canonical(rounded.astype(np.int64)), res)


def save_point_cloud(path, cloud: PointCloud,
                     ascii_format: bool = False) -> None:
    """Write a cloud as PLY with the resolution recorded in a comment."""
    n = len(cloud.points)
    fmt = "ascii" if ascii_format else "binary_little_endian"
    header = (f"ply\nformat {fmt} 1.0\n"
              f"comment resolution {cloud.resolution}\n"
              f"element vertex {n}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "end_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if ascii_format:
            for x, y, z in cloud.points:
                fh.write(f"{x} {y} {z}\n".encode("ascii"))
        else:
            fh.write(cloud.points.astype("<f4").tobytes())


def load_mesh(path) -> Mesh:
    """Read an OFF mesh; polygon faces are fan-triangulated."""
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        tokens = []
        first = fh.readline().strip()
        if not first.startswith("OFF"):
            raise DataError(f"{path}: not an OFF file")
        rest = first[3:].strip()
        if rest:
            tokens.extend(rest.split())
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if len(tokens) < 3:
        raise DataError(f"{path}: truncated OFF header")
    nv, nf = int(tokens[0]), int(tokens[1])
    at = 3
    if len(tokens) < at + 3 * nv:
        raise DataError(f"{path}: truncated OFF vertices")
    vertices = np.array(tokens[at:at + 3 * nv],
                        dtype=np.float64).reshape(nv, 3)
    at += 3 * nv
    faces = []
    for _ in range(nf):
        if at >= len(tokens):
            raise DataError(f"{path}: truncated OFF faces")
        k = int(tokens[at])
        idx = [int(t) for t in tokens[at + 1:at + 1 + k]]
        if len(idx) != k or k < 3:
            raise DataError(f"{path}: malformed face")
        for j in range(1, k - 1):
            faces.append((idx[0], idx[j], idx[j + 1]))
        at += 1 + k
    return Mesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# sampling and voxelization

def sample_mesh_surface(mesh: Mesh, count: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Uniform area-weighted surface samples; returns float (count, 3)."""
    if count < 0:
        raise UsageError("sample count must be nonnegative")
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise DataError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.uniform(size=count)
    v = rng.uniform(size=count)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return (a[tri] + u[:, None] * (b[tri] - a[tri])
            + v[:, None] * (c[tri] - a[tri]))


def voxelize(points, resolution: int) -> PointCloud:
    """Quantize raw float points onto a [0, resolution)^3 grid.

    The cloud is anchored at its minimum corner and scaled so the longest
    extent spans resolution - 1 cells; coordinates floor onto the grid and
    duplicates collapse.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if resolution < 2:
        raise UsageError("resolution must be at least 2")
    if len(points) == 0:
        return PointCloud(np.zeros((0, 3), dtype=np.int64), resolution)
    lo = points.min(axis=0)
    extent = points.max(axis=0) - lo
    longest = extent.max()
    if longest <= 0:
        raise DataError("degenerate cloud: zero extent on every axis")
    scale = (resolution - 1) / longest
    grid = np.floor((points - lo) * scale).astype(np.int64)
    grid = np.clip(grid, 0, resolution - 1)
    return PointCloud(_canonical(grid), resolution)


# ---------------------------------------------------------------------------
# octree partitioning

def _require_power_of_two(value: int, what: str) -> None:
    if value < 1 or value & (value - 1):
        raise UsageError(f"{what} must be a power of two, got {value}")


def partition_octree(cloud: PointCloud, block_size: int) -> Octree:
    """Split a cloud into occupied block-size leaves.

    Internal nodes emit one child-mask byte each in breadth-first order;
    child bit index is 4*cx + 2*cy + cz with c* = 1 for the upper half.
    Only non-empty children are visited.
    """
    _require_power_of_two(cloud.resolution, "resolution")
    _require_power_of_two(block_size, "block size")
    if block_size > cloud.resolution:
        raise UsageError(f"block size {block_size} exceeds resolution "
                         f"{cloud.resolution}")
    masks = bytearray()
    blocks: list[VoxelBlock] = []
    queue: list[tuple[tuple[int, int, int], int, np.ndarray]] = []
    if len(cloud.points):
        queue.append(((0, 0, 0), cloud.resolution, cloud.points))
    while queue:
        origin, size, pts = queue.pop(0)
        if size == block_size:
            occ = np.zeros((size,) * 3, dtype=bool)
            local = pts - np.asarray(origin)
            occ[local[:, 0], local[:, 1], local[:, 2]] = True
            blocks.append(VoxelBlock(origin, size, occ))
            continue
        half = size // 2
        upper = (pts - np.asarray(origin)) >= half
        child_of = upper[:, 0] * 4 + upper[:, 1] * 2 + upper[:, 2]
        mask = 0
        children = []
        for bit in range(8):
            sub = pts[child_of == bit]
            if len(sub) == 0:
                continue
            mask |= 1 << bit
            off = (origin[0] + half * ((bit >> 2) & 1),
                   origin[1] + half * ((bit >> 1) & 1),
                   origin[2] + half * (bit & 1))
            children.append((off, half, sub))
        masks.append(mask)
        queue.extend(children)
    return Octree(cloud.resolution, block_size, bytes(masks), blocks)


def leaf_origins(masks: bytes, resolution: int,
                 block_size: int) -> list[tuple[int, int, int]]:
    """Replay a mask stream into block origins in traversal order."""
    _require_power_of_two(resolution, "resolution")
    _require_power_of_two(block_size, "block size")
    if resolution == block_size:
        if masks:
            raise DataError("mask stream should be empty at depth zero")
        return [(0, 0, 0)]
    origins = []
    queue = [((0, 0, 0), resolution)]
    at = 0
    while queue:
        origin, size = queue.pop(0)
        if size == block_size:
            origins.append(origin)
            continue
        if at >= len(masks):
            raise DataError("octree mask stream truncated")
        mask = masks[at]
        at += 1
        if mask == 0:
            raise DataError("empty child mask in octree stream")
        half = size // 2
        for bit in range(8):
            if mask & (1 << bit):
                queue.append(((origin[0] + half * ((bit >> 2) & 1),
                               origin[1] + half * ((bit >> 1) & 1),
                               origin[2] + half * (bit & 1)), half))
    if at != len(masks):
        raise DataError("trailing bytes in octree mask stream")
    return origins


def reassemble(octree: Octree) -> PointCloud:
    """Merge leaf blocks back into one cloud (inverse of partitioning)."""
    if not octree.blocks and not octree.masks:
        # An empty cloud partitions to no masks and no leaves.
        return PointCloud(np.zeros((0, 3), dtype=np.int64),
                          octree.resolution)
    origins = leaf_origins(octree.masks, octree.resolution,
                           octree.block_size)
    if len(origins) != len(octree.blocks):
        raise DataError(f"octree lists {len(origins)} leaves but "
                        f"{len(octree.blocks)} blocks are present")
    parts = []
    for origin, block in zip(origins, octree.blocks):
        if tuple(block.origin) != tuple(origin):
            raise DataError(f"block origin {block.origin} does not match "
                            f"octree leaf {origin}")
        pts = block.local_points()
        if len(pts):
            parts.append(pts + np.asarray(origin))
    if not parts:
        return PointCloud(np.zeros((0, 3), dtype=np.int64),
                          octree.resolution)
    return PointCloud(_canonical(np.concatenate(parts)), octree.resolution)


def threshold_topk(probabilities: np.ndarray, k: int) -> np.ndarray:
    """Boolean occupancy keeping exactly the k most probable voxels.

    Ties resolve toward the smaller x-major flat index, so the result is
    reproducible across platforms.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    flat = p.reshape(-1)
    if not 0 <= k <= flat.size:
        raise UsageError(f"k={k} outside [0, {flat.size}]")
    order = np.argsort(-flat, kind="stable")
    out = np.zeros(flat.size, dtype=bool)
    out[order[:k]] = True
    return out.reshape(p.shape)


# ---------------------------------------------------------------------------
# synthetic shapes

SYNTHETIC_KINDS = ("sphere", "torus", "plane")


def synthetic_cloud(kind: str, resolution: int,
                    rng: np.random.Generator) -> PointCloud:
    """Surface-rasterized primitive for training and quick experiments."""
    if kind not in SYNTHETIC_KINDS:
        raise UsageError(f"unknown synthetic kind {kind!r}; "
                         f"choose from {SYNTHETIC_KINDS}")
    n = max(2048, 8 * resolution * resolution)
    center = (resolution - 1) / 2.0
    if kind == "sphere":
        radius = rng.uniform(0.25, 0.42) * resolution
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = center + radius * d
    elif kind == "torus":
        major = rng.uniform(0.22, 0.34) * resolution
        minor = rng.uniform(0.06, 0.14) * resolution
        u = rng.uniform(0, 2 * np.pi, n)
        v = rng.uniform(0, 2 * np.pi, n)
        ring = major + minor * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u),
                        minor * np.sin(v)], axis=1)
        axes = rng.permutation(3)
        pts = pts[:, axes] + center
    else:
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        basis = np.linalg.svd(normal[None, :])[2][1:]
        uv = rng.uniform(-0.5, 0.5, size=(n, 2)) * (resolution - 1)
        pts = center + uv @ basis
    grid = np.clip(np.rint(pts), 0, resolution - 1).astype(np.int64)
    return PointCloud(_canonical(grid), resolution)
