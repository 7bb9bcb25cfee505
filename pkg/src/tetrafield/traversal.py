"""BVH-accelerated enumeration of the tetrahedra a ray crosses, in order.

The mesh's unique triangular faces go into a binned-SAH BVH. A traced ray
yields a RaySegmentTrace: per crossed tet, the entry/exit distances and the
entry/exit barycentric coordinates lifted from the 2D face hits. Barycentric
coordinates are affine along the ray inside a tet, so any interior sample's
coordinates come from linear interpolation of the two face crossings.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import OutOfSegment
from .geometry import FACE_SLOTS
from .triangulation import BOUNDARY

_SAH_BINS = 16
_LEAF_SIZE = 4


@dataclass
class FaceBvh:
    """Flat BVH over the unique faces of a TetMesh.

    Leaf payloads identify faces; each face knows its (up to two) adjacent
    tets and its three vertex ids, which is all the tracer needs to lift 2D
    hit coordinates into tet barycentrics.
    """

    node_bmin: np.ndarray   # (K,3) float64
    node_bmax: np.ndarray   # (K,3) float64
    node_left: np.ndarray   # (K,) int32: child id (inner) or face range start (leaf)
    node_count: np.ndarray  # (K,) int32: 0 for inner nodes, else leaf face count
    face_order: np.ndarray  # (F,) int32 permutation grouping faces by leaf
    face_verts: np.ndarray  # (F,3) int32 vertex ids
    face_tets: np.ndarray   # (F,2) int32 adjacent tets, -1 when on the hull
    face_slots: np.ndarray  # (F,2) int32 face slot within each adjacent tet
    tri: np.ndarray         # (F,3,3) float64 triangle vertex positions

    @property
    def num_faces(self):
        return len(self.face_verts)


class Segment(NamedTuple):
    tet: int
    t_in: float
    t_out: float
    bary_in: np.ndarray
    bary_out: np.ndarray


@dataclass
class RaySegmentTrace:
    """Ordered tets crossed by one ray, with entry/exit data per segment."""

    tets: np.ndarray      # (S,) int32
    t_in: np.ndarray      # (S,) float64, strictly increasing
    t_out: np.ndarray     # (S,) float64
    bary_in: np.ndarray   # (S,4) float64
    bary_out: np.ndarray  # (S,4) float64
    truncated: bool

    def __len__(self):
        return len(self.tets)

    @property
    def segments(self):
        return [
            Segment(int(self.tets[i]), float(self.t_in[i]), float(self.t_out[i]),
                    self.bary_in[i], self.bary_out[i])
            for i in range(len(self.tets))
        ]


@dataclass
class FlatTraces:
    """Batch of traces in flattened form: ray i owns segments
    seg_off[i]:seg_off[i+1]."""

    seg_off: np.ndarray   # (N+1,) int64
    tets: np.ndarray      # (M,) int32
    t_in: np.ndarray      # (M,) float64
    t_out: np.ndarray     # (M,) float64
    bary_in: np.ndarray   # (M,4) float64
    bary_out: np.ndarray  # (M,4) float64
    truncated: np.ndarray  # (N,) bool

    @property
    def num_rays(self):
        return len(self.seg_off) - 1

    def ray_trace(self, i):
        a, b = self.seg_off[i], self.seg_off[i + 1]
        return RaySegmentTrace(
            self.tets[a:b], self.t_in[a:b], self.t_out[a:b],
            self.bary_in[a:b], self.bary_out[a:b], bool(self.truncated[i]),
        )


def unique_faces(mesh):
    """Enumerate each face of the mesh exactly once.

    Returns (face_verts, face_tets, face_slots); shared faces carry both
    adjacent tets, hull faces have -1 in the second slot.
    """
    first = {}
    fv, ft, fs = [], [], []
    for t in range(mesh.num_tets):
        for s in range(4):
            verts = tuple(sorted(int(mesh.tets[t, j]) for j in FACE_SLOTS[s]))
            if verts in first:
                f = first[verts]
                ft[f][1] = t
                fs[f][1] = s
            else:
                first[verts] = len(fv)
                fv.append([int(mesh.tets[t, j]) for j in FACE_SLOTS[s]])
                ft.append([t, BOUNDARY])
                fs.append([s, BOUNDARY])
    return (
        np.asarray(fv, dtype=np.int32),
        np.asarray(ft, dtype=np.int32),
        np.asarray(fs, dtype=np.int32),
    )


def build_bvh(mesh):
    """Binned-SAH BVH over the mesh's unique faces. Deterministic."""
    face_verts, face_tets, face_slots = unique_faces(mesh)
    tri = mesh.vertices[face_verts]  # (F,3,3)
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    centroid = tri.mean(axis=1)

    node_bmin, node_bmax, node_left, node_count = [], [], [], []
    face_order = np.empty(len(face_verts), dtype=np.int32)
    cursor = 0

    def alloc():
        node_bmin.append(np.zeros(3))
        node_bmax.append(np.zeros(3))
        node_left.append(0)
        node_count.append(0)
        return len(node_left) - 1

    stack = [(alloc(), np.arange(len(face_verts), dtype=np.int32))]
    while stack:
        node, idx = stack.pop()
        node_bmin[node] = lo[idx].min(axis=0)
        node_bmax[node] = hi[idx].max(axis=0)
        if len(idx) <= _LEAF_SIZE:
            face_order[cursor:cursor + len(idx)] = idx
            node_left[node] = cursor
            node_count[node] = len(idx)
            cursor += len(idx)
            continue
        left_idx, right_idx = _sah_split(centroid[idx], lo[idx], hi[idx], idx)
        lchild = alloc()
        rchild = alloc()
        assert rchild == lchild + 1
        node_left[node] = lchild
        node_count[node] = 0
        stack.append((rchild, right_idx))
        stack.append((lchild, left_idx))

    return FaceBvh(
        node_bmin=np.asarray(node_bmin),
        node_bmax=np.asarray(node_bmax),
        node_left=np.asarray(node_left, dtype=np.int32),
        node_count=np.asarray(node_count, dtype=np.int32),
        face_order=face_order,
        face_verts=face_verts,
        face_tets=face_tets,
        face_slots=face_slots,
        tri=np.ascontiguousarray(tri),
    )


def _sah_split(cent, flo, fhi, idx):
    best = None
    for axis in range(3):
        cmin = cent[:, axis].min()
        cmax = cent[:, axis].max()
        if cmax - cmin < 1e-300:
            continue
        bins = np.minimum(
            ((cent[:, axis] - cmin) / (cmax - cmin) * _SAH_BINS).astype(np.int64),
            _SAH_BINS - 1,
        )
        counts = np.bincount(bins, minlength=_SAH_BINS)
        bmin = np.full((_SAH_BINS, 3), np.inf)
        bmax = np.full((_SAH_BINS, 3), -np.inf)
        np.minimum.at(bmin, bins, flo)
        np.maximum.at(bmax, bins, fhi)
        # prefix/suffix sweeps of box areas and counts
        lmin = np.minimum.accumulate(bmin, axis=0)
        lmax = np.maximum.accumulate(bmax, axis=0)
        rmin = np.minimum.accumulate(bmin[::-1], axis=0)[::-1]
        rmax = np.maximum.accumulate(bmax[::-1], axis=0)[::-1]
        lcnt = np.cumsum(counts)
        rcnt = np.cumsum(counts[::-1])[::-1]
        larea = _half_area(lmin, lmax)
        rarea = _half_area(rmin, rmax)
        for cut in range(_SAH_BINS - 1):
            nl = lcnt[cut]
            nr = rcnt[cut + 1]
            if nl == 0 or nr == 0:
                continue
            cost = larea[cut] * nl + rarea[cut + 1] * nr
            if best is None or cost < best[0]:
                best = (cost, axis, cut, cmin, cmax)
    if best is None:
        half = len(idx) // 2  # all centroids coincide: arbitrary even split
        return idx[:half], idx[half:]
    _, axis, cut, cmin, cmax = best
    bins = np.minimum(
        ((cent[:, axis] - cmin) / (cmax - cmin) * _SAH_BINS).astype(np.int64),
        _SAH_BINS - 1,
    )
    mask = bins <= cut
    return idx[mask], idx[~mask]


def _half_area(bmin, bmax):
    ext = np.maximum(bmax - bmin, 0.0)
    return ext[:, 0] * ext[:, 1] + ext[:, 1] * ext[:, 2] + ext[:, 2] * ext[:, 0]


def trace_rays(bvh, mesh, origins, dirs, t_min=None, t_max=None, max_hits=512,
               chunk=4096):
    """Trace a batch of rays; returns FlatTraces.

    Face hits are collected in t order up to max_hits per ray (truncated flag
    set beyond that); consecutive hits bounding a common tet become segments.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = len(origins)
    if t_min is None:
        t_min = np.zeros(n)
    t_min = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,))
    if t_max is None:
        t_max = np.full(n, np.inf)
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))

    # cap per-ray hit storage; all interesting meshes have far fewer faces
    max_hits = int(min(max_hits, 4 * mesh.num_tets + 8))

    parts = []
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        parts.append(_trace_chunk(bvh, mesh, origins[a:b], dirs[a:b],
                                  t_min[a:b], t_max[a:b], max_hits))
    if len(parts) == 1:
        return parts[0]
    off = [np.zeros(1, dtype=np.int64)]
    base = 0
    for p in parts:
        off.append(p.seg_off[1:] + base)
        base += int(p.seg_off[-1])
    return FlatTraces(
        seg_off=np.concatenate(off),
        tets=np.concatenate([p.tets for p in parts]),
        t_in=np.concatenate([p.t_in for p in parts]),
        t_out=np.concatenate([p.t_out for p in parts]),
        bary_in=np.concatenate([p.bary_in for p in parts]),
        bary_out=np.concatenate([p.bary_out for p in parts]),
        truncated=np.concatenate([p.truncated for p in parts]),
    )


def _trace_chunk(bvh, mesh, origins, dirs, t_min, t_max, max_hits):
    hit_t, hit_face, hit_u, hit_v, order, n_used, n_total, seg_count = (
        _kernels.trace_batch(
            origins, dirs, np.ascontiguousarray(t_min),
            np.ascontiguousarray(t_max), max_hits,
            bvh.node_bmin, bvh.node_bmax, bvh.node_left, bvh.node_count,
            bvh.face_order, bvh.tri, bvh.face_tets, bvh.face_verts, mesh.tets,
        )
    )
    seg_off = np.zeros(len(origins) + 1, dtype=np.int64)
    np.cumsum(seg_count, out=seg_off[1:])
    m = int(seg_off[-1])
    tets = np.empty(m, dtype=np.int64)
    tin = np.empty(m)
    tout = np.empty(m)
    bin_ = np.empty((m, 4))
    bout = np.empty((m, 4))
    _kernels.fill_segments(
        hit_t, hit_face, hit_u, hit_v, order, n_used, seg_off,
        bvh.face_tets, bvh.face_verts, mesh.tets,
        tets, tin, tout, bin_, bout,
    )
    return FlatTraces(
        seg_off=seg_off,
        tets=tets.astype(np.int32),
        t_in=tin,
        t_out=tout,
        bary_in=bin_,
        bary_out=bout,
        truncated=n_total > max_hits,
    )


def trace_ray(bvh, mesh, ray, max_hits=512):
    """Trace a single Ray through the mesh."""
    flat = trace_rays(
        bvh, mesh, ray.origin[None], ray.direction[None],
        np.array([ray.t_min]), np.array([ray.t_max]), max_hits,
    )
    return flat.ray_trace(0)


def barycentric_at(segment, t):
    """Barycentric coordinates at distance t inside a traced segment.

    Linear interpolation between the entry and exit face coordinates, valid
    because barycentric coordinates are affine along a straight line.
    """
    t = float(t)
    if not (segment.t_in <= t <= segment.t_out):
        raise OutOfSegment(
            f"t={t} outside [{segment.t_in}, {segment.t_out}]"
        )
    s = (t - segment.t_in) / (segment.t_out - segment.t_in)
    return segment.tet, (1.0 - s) * segment.bary_in + s * segment.bary_out
