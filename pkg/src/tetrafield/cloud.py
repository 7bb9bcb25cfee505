"""Point-cloud ingestion: PLY parsing, subsampling, spacing, random augmentation."""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParseError, TooFewPoints, UnsupportedProperty


@dataclass
class PointCloud:
    """Positions with RGBA colors in [0,1] and an original-vs-synthetic flag.

    Original points carry alpha 1, synthetic (randomly added) points alpha 0.
    """

    positions: np.ndarray  # (N, 3) float64
    colors: np.ndarray     # (N, 4) float64 in [0, 1]
    origin_flags: np.ndarray  # (N,) bool, True = original

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        self.origin_flags = np.ascontiguousarray(self.origin_flags, dtype=bool)
        n = len(self.positions)
        if len(self.colors) != n or len(self.origin_flags) != n:
            raise ValueError("positions/colors/flags must have equal length")

    def __len__(self):
        return len(self.positions)


_PLY_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}
_PLY_STRUCT = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def load_ply(path):
    """Read an ascii or binary-little-endian PLY point cloud.

    x/y/z must be float or double; red/green/blue (uchar) are optional and
    rescaled from [0,255] to [0,1]; missing color becomes white. Alpha is
    forced to 1 and every point is flagged original. Elements after the
    vertex element are ignored.
    """
    with open(path, "rb") as f:
        data = f.read()

    offset = 0

    def next_line():
        nonlocal offset
        end = data.find(b"\n", offset)
        if end < 0:
            raise ParseError("unexpected end of header", offset)
        line = data[offset:end].decode("ascii", errors="replace").strip()
        offset = end + 1
        return line

    if next_line() != "ply":
        raise ParseError("missing 'ply' magic", 0)
    fmt_line = next_line()
    if fmt_line.startswith("format ascii"):
        binary = False
    elif fmt_line.startswith("format binary_little_endian"):
        binary = True
    else:
        raise ParseError(f"unsupported format: {fmt_line!r}", offset)

    n_vertices = None
    properties = []  # (name, type) for the vertex element only
    in_vertex_element = False
    seen_vertex = False
    while True:
        line = next_line()
        if line == "end_header":
            break
        if line.startswith("comment") or line.startswith("obj_info"):
            continue
        parts = line.split()
        if parts[0] == "element":
            if parts[1] == "vertex":
                if seen_vertex:
                    raise ParseError("duplicate vertex element", offset)
                n_vertices = int(parts[2])
                in_vertex_element = True
                seen_vertex = True
            else:
                in_vertex_element = False
        elif parts[0] == "property" and in_vertex_element:
            if parts[1] == "list":
                raise UnsupportedProperty("list property in vertex element")
            if parts[1] not in _PLY_SIZES:
                raise UnsupportedProperty(f"unknown property type {parts[1]!r}")
            properties.append((parts[2], parts[1]))

    if n_vertices is None:
        raise ParseError("no vertex element in header", offset)

    names = [p[0] for p in properties]
    for coord in ("x", "y", "z"):
        if coord not in names:
            raise ParseError(f"vertex element lacks {coord!r} property", offset)
        ptype = properties[names.index(coord)][1]
        if ptype not in ("float", "float32", "double", "float64"):
            raise UnsupportedProperty(f"{coord} stored as {ptype}, expected float")
    has_rgb = all(c in names for c in ("red", "green", "blue"))
    if has_rgb:
        for c in ("red", "green", "blue"):
            ptype = properties[names.index(c)][1]
            if ptype not in ("uchar", "uint8"):
                raise UnsupportedProperty(f"{c} stored as {ptype}, expected uchar")

    if n_vertices == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0, bool))

    if binary:
        dtype = np.dtype([(n, "<" + _PLY_STRUCT[t]) for n, t in properties])
        nbytes = dtype.itemsize * n_vertices
        if len(data) - offset < nbytes:
            raise ParseError(
                f"vertex data truncated: need {nbytes} bytes", len(data)
            )
        rec = np.frombuffer(data, dtype=dtype, count=n_vertices, offset=offset)
    else:
        rows = []
        for i in range(n_vertices):
            line = next_line()
            vals = line.split()
            if len(vals) != len(properties):
                raise ParseError(
                    f"vertex row {i} has {len(vals)} values, expected {len(properties)}",
                    offset,
                )
            rows.append(vals)
        arr = np.asarray(rows)
        rec = {}
        for j, (name, t) in enumerate(properties):
            kind = np.float64 if t in ("float", "float32", "double", "float64") else np.int64
            try:
                rec[name] = arr[:, j].astype(kind)
            except ValueError as e:
                raise ParseError(f"bad value for {name!r}: {e}", offset) from None

    positions = np.stack(
        [np.asarray(rec["x"], np.float64),
         np.asarray(rec["y"], np.float64),
         np.asarray(rec["z"], np.float64)], axis=1
    )
    colors = np.ones((n_vertices, 4))
    if has_rgb:
        for j, c in enumerate(("red", "green", "blue")):
            colors[:, j] = np.asarray(rec[c], np.float64) / 255.0
    flags = np.ones(n_vertices, dtype=bool)
    return PointCloud(positions, colors, flags)


def write_ply(cloud, path, binary=True):
    """Write positions + RGB (uchar) so load_ply round-trips bit-exact doubles."""
    n = len(cloud)
    rgb = np.clip(np.round(cloud.colors[:, :3] * 255.0), 0, 255).astype(np.uint8)
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            for i in range(n):
                f.write(struct.pack("<dddBBB", *cloud.positions[i], *rgb[i]))
        else:
            for i in range(n):
                x, y, z = cloud.positions[i]
                f.write(f"{x!r} {y!r} {z!r} {rgb[i,0]} {rgb[i,1]} {rgb[i,2]}\n".encode())


def load_xyzrgb(path):
    """Plain-text loader: one `x y z r g b` line per point, rgb in [0,255]."""
    rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if rows.size == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0, bool))
    if rows.shape[1] != 6:
        raise ParseError(f"expected 6 columns, got {rows.shape[1]}")
    colors = np.ones((len(rows), 4))
    colors[:, :3] = rows[:, 3:6] / 255.0
    return PointCloud(rows[:, :3], colors, np.ones(len(rows), bool))


def average_spacing(cloud, k=6):
    """Mean over points of the mean distance to each point's k nearest neighbors."""
    n = len(cloud)
    if n < k + 1:
        raise TooFewPoints(f"need at least {k + 1} points, got {n}")
    tree = cKDTree(cloud.positions)
    # k+1 because the query point itself comes back at distance 0.
    dists, _ = tree.query(cloud.positions, k=k + 1)
    return float(dists[:, 1:].mean())


def subsample(cloud, max_points=1_000_000, seed=0):
    """Keep at most max_points, chosen uniformly without replacement.

    Selected points keep their original relative order so position/color
    pairing and downstream vertex indices stay stable.
    """
    if max_points < 1:
        raise ValueError("max_points must be >= 1")
    n = len(cloud)
    if n <= max_points:
        return cloud
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=max_points, replace=False))
    return PointCloud(cloud.positions[idx], cloud.colors[idx], cloud.origin_flags[idx])


def augment_random_points(cloud, ratio=0.5, seed=0, spacing=None):
    """Append floor(ratio * N) random points around the existing cloud.

    Each new point is x0 + alpha * n for a random existing point x0, a random
    unit vector n, and alpha ~ Normal(d, d^2) with d the average spacing.
    Negative alpha is kept (the normal law is not truncated). New points copy
    x0's RGB, get alpha 0, and are flagged synthetic.
    """
    n = len(cloud)
    n_new = int(ratio * n)
    if n_new == 0:
        return cloud
    d = average_spacing(cloud) if spacing is None else float(spacing)
    rng = np.random.default_rng(seed)
    base = rng.integers(0, n, size=n_new)
    normals = rng.normal(size=(n_new, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    alpha = rng.normal(loc=d, scale=d, size=n_new)
    new_pos = cloud.positions[base] + alpha[:, None] * normals
    new_col = cloud.colors[base].copy()
    new_col[:, 3] = 0.0
    return PointCloud(
        np.concatenate([cloud.positions, new_pos]),
        np.concatenate([cloud.colors, new_col]),
        np.concatenate([cloud.origin_flags, np.zeros(n_new, bool)]),
    )
