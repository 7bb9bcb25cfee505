"""Incremental Delaunay tetrahedralization and point location.

Bowyer-Watson insertion with a single symbolic infinite vertex closing the
hull (every face always has a neighbor, and the finite cells tile the convex
hull exactly). Predicates are plain float64 arithmetic with scale-relative
tolerances; cospherical ties resolve by a deterministic index rule.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, TooFewPoints
from .geometry import BARY_EPS, FACE_SLOTS, barycentric_coords_many

BOUNDARY = -1
_INF = -1  # symbolic infinite vertex id used only during construction

# Predicate tie thresholds, relative to the cloud's bounding-box diagonal.
# orient determinants scale like length^3, insphere like length^4.
_ORIENT_REL = 1e-12
_INSPHERE_REL = 1e-12

# orient(face verts of slot k in ascending order, x) has this sign when x is
# on the same side as the tet's own vertex k (tet positively oriented).
_APEX_SIGN = (-1.0, 1.0, -1.0, 1.0)


@dataclass
class TetMesh:
    """Tetrahedralization: vertices, cells, and face adjacency.

    neighbors[t][s] is the tet sharing the face opposite vertex slot s of tet
    t, or BOUNDARY for hull faces. All tets are positively oriented.
    """

    vertices: np.ndarray   # (V, 3) float64
    tets: np.ndarray       # (T, 4) int32
    neighbors: np.ndarray  # (T, 4) int32, BOUNDARY = -1

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_tets(self):
        return len(self.tets)

    def tet_vertices(self, t):
        return self.vertices[self.tets[t]]

    def digest(self):
        """Stable content hash used to tie checkpoints to a mesh."""
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.tets).tobytes())
        return h.hexdigest()[:16]


def format_mesh_text(mesh):
    """Debug dump: one `v x y z` line per vertex, one `t i0 i1 i2 i3` per tet."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices]
    lines += [f"t {a} {b} {c} {d}" for a, b, c, d in mesh.tets]
    return "\n".join(lines) + "\n"


def write_mesh_text(mesh, path):
    with open(path, "w") as f:
        f.write(format_mesh_text(mesh))


def _orient(a, b, c, d):
    # det [b-a; c-a; d-a]; > 0 for positively oriented (a,b,c,d)
    bx, by, bz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    cx, cy, cz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    dx, dy, dz = d[0] - a[0], d[1] - a[1], d[2] - a[2]
    return (
        bx * (cy * dz - cz * dy)
        - by * (cx * dz - cz * dx)
        + bz * (cx * dy - cy * dx)
    )


def _insphere(a, b, c, d, p):
    """> 0 when p lies strictly inside the circumsphere of positively
    oriented (a,b,c,d)."""
    aex, aey, aez = a[0] - p[0], a[1] - p[1], a[2] - p[2]
    bex, bey, bez = b[0] - p[0], b[1] - p[1], b[2] - p[2]
    cex, cey, cez = c[0] - p[0], c[1] - p[1], c[2] - p[2]
    dex, dey, dez = d[0] - p[0], d[1] - p[1], d[2] - p[2]
    ab = aex * bey - bex * aey
    bc = bex * cey - cex * bey
    cd = cex * dey - dex * cey
    da = dex * aey - aex * dey
    ac = aex * cey - cex * aey
    bd = bex * dey - dex * bey
    abc = aez * bc - bez * ac + cez * ab
    bcd = bez * cd - cez * bd + dez * bc
    cda = cez * da + dez * ac + aez * cd
    dab = dez * ab + aez * bd + bez * da
    alift = aex * aex + aey * aey + aez * aez
    blift = bex * bex + bey * bey + bez * bez
    clift = cex * cex + cey * cey + cez * cez
    dlift = dex * dex + dey * dey + dez * dez
    # positive when p is inside, given our positive-orientation convention
    return alift * bcd - blift * cda + clift * dab - dlift * abc


def _circumcircle_contains(a, b, c, p, tol2):
    """In-plane circumcircle test for a point (near-)coplanar with (a,b,c).

    Returns +1 inside, -1 outside, 0 on-circle within tol2 (squared units).
    """
    a = np.asarray(a)
    u = np.asarray(b) - a
    v = np.asarray(c) - a
    n = np.cross(u, v)
    nn = float(n @ n)
    if nn == 0.0:
        return -1
    cc = a + (float(u @ u) * np.cross(v, n) + float(v @ v) * np.cross(n, u)) / (2.0 * nn)
    r2 = float((cc - a) @ (cc - a))
    d2 = float((cc - np.asarray(p)) @ (cc - np.asarray(p)))
    val = r2 - d2
    if val > tol2:
        return 1
    if val < -tol2:
        return -1
    return 0


class _Triangulator:
    def __init__(self, points):
        self.np_pts = np.asarray(points, dtype=np.float64)
        self.pts = [tuple(map(float, q)) for q in self.np_pts]
        lo = self.np_pts.min(axis=0)
        hi = self.np_pts.max(axis=0)
        scale = float(np.linalg.norm(hi - lo))
        if scale == 0.0:
            raise DegenerateInput("all points coincide")
        self.tol_orient = _ORIENT_REL * scale**3
        self.tol_insphere = _INSPHERE_REL * scale**4
        self.tol_circle2 = 1e-12 * scale**2
        self.tets = []       # list[[v0,v1,v2,v3]] with _INF allowed
        self.nbr = []        # list[[t0,t1,t2,t3]]
        self.alive = []
        self.interior = None  # fixed strictly interior point (tuple)
        self.last = 0
        self._walk_shift = 0

    # -- predicates ---------------------------------------------------------

    def _tie_break(self, p_idx, verts):
        # Deterministic resolution for (near-)cospherical configurations:
        # the new point conflicts a tied cell iff its index precedes every
        # finite vertex of that cell.
        return p_idx < min(v for v in verts if v != _INF)

    def _conflict(self, t, p, p_idx):
        verts = self.tets[t]
        k = _infinite_slot(verts)
        if k < 0:
            d = _insphere(*(self.pts[v] for v in verts), p)
            if d > self.tol_insphere:
                return True
            if d < -self.tol_insphere:
                return False
            return self._tie_break(p_idx, verts)
        a, b, c = (self.pts[verts[j]] for j in FACE_SLOTS[k])
        o = _orient(a, b, c, p) * _APEX_SIGN[k]
        # o has the sign of "p on the infinite side" because the cell is
        # oriented so its interior-facing evaluation is negative.
        if o > self.tol_orient:
            return True
        if o < -self.tol_orient:
            return False
        side = _circumcircle_contains(a, b, c, p, self.tol_circle2)
        if side > 0:
            return True
        if side < 0:
            return False
        return self._tie_break(p_idx, verts)

    # -- structure helpers --------------------------------------------------

    def _new_tet(self, verts, nbrs):
        self.tets.append(list(verts))
        self.nbr.append(list(nbrs))
        self.alive.append(True)
        return len(self.tets) - 1

    def _orient_inf(self, verts):
        """orient() of a cell with the infinite vertex replaced by the fixed
        interior point; must be negative by convention."""
        coords = [self.interior if v == _INF else self.pts[v] for v in verts]
        return _orient(*coords)

    # -- initialization -----------------------------------------------------

    def _initial_tet(self, order):
        lo = self.np_pts.min(axis=0)
        hi = self.np_pts.max(axis=0)
        scale = float(np.linalg.norm(hi - lo))
        sel = [int(order[0])]
        for idx in order[1:]:
            idx = int(idx)
            q = self.np_pts[idx]
            if len(sel) == 1:
                if np.linalg.norm(q - self.np_pts[sel[0]]) > 1e-12 * scale:
                    sel.append(idx)
            elif len(sel) == 2:
                u = self.np_pts[sel[1]] - self.np_pts[sel[0]]
                if np.linalg.norm(np.cross(u, q - self.np_pts[sel[0]])) > 1e-12 * scale**2:
                    sel.append(idx)
            else:
                o = _orient(*(self.pts[s] for s in sel), self.pts[idx])
                if abs(o) > self.tol_orient:
                    sel.append(idx)
                    break
        if len(sel) != 4:
            raise DegenerateInput("points are collinear or coplanar")
        if _orient(*(self.pts[s] for s in sel)) < 0:
            sel[0], sel[1] = sel[1], sel[0]
        self.interior = tuple(self.np_pts[sel].mean(axis=0))

        t0 = self._new_tet(sel, [0, 0, 0, 0])
        inf_ids = []
        for k in range(4):
            face = [sel[j] for j in FACE_SLOTS[k]]
            verts = [face[0], face[1], face[2], _INF]
            if self._orient_inf(verts) > 0:
                verts[0], verts[1] = verts[1], verts[0]
            ti = self._new_tet(verts, [BOUNDARY] * 4)
            inf_slot = 3
            self.nbr[ti][inf_slot] = t0
            self.nbr[t0][k] = ti
            inf_ids.append(ti)
        # wire infinite cells to each other across the initial tet's edges
        self._wire_by_face_key(inf_ids)
        return sel

    def _wire_by_face_key(self, tet_ids):
        seen = {}
        for t in tet_ids:
            for s in range(4):
                if self.nbr[t][s] != BOUNDARY:
                    continue
                key = tuple(sorted(self.tets[t][j] for j in FACE_SLOTS[s]))
                if key in seen:
                    ot, os_ = seen.pop(key)
                    self.nbr[t][s] = ot
                    self.nbr[ot][os_] = t
                else:
                    seen[key] = (t, s)
        if seen:
            raise AssertionError("unmatched faces while wiring adjacency")

    # -- location -----------------------------------------------------------

    def _walk(self, p):
        t = self.last
        if not self.alive[t] or _infinite_slot(self.tets[t]) >= 0:
            t = next(i for i, a in enumerate(self.alive)
                     if a and _infinite_slot(self.tets[i]) < 0)
        steps = 0
        limit = 4 * len(self.tets) + 64
        while True:
            verts = self.tets[t]
            if _infinite_slot(verts) >= 0:
                return t
            self._walk_shift += 1
            moved = False
            for j in range(4):
                s = (j + self._walk_shift) % 4
                a, b, c = (self.pts[verts[i]] for i in FACE_SLOTS[s])
                o = _orient(a, b, c, p) * _APEX_SIGN[s]
                if o < -self.tol_orient:
                    t = self.nbr[t][s]
                    moved = True
                    break
            if not moved:
                return t
            steps += 1
            if steps > limit:  # defensive; Delaunay walks terminate
                raise AssertionError("point-location walk failed to terminate")

    def _find_conflict_seed(self, t0, p, p_idx):
        if self._conflict(t0, p, p_idx):
            return t0
        seen = {t0}
        queue = [t0]
        while queue:
            t = queue.pop()
            for nb in self.nbr[t]:
                if nb in seen:
                    continue
                seen.add(nb)
                if self._conflict(nb, p, p_idx):
                    return nb
                queue.append(nb)
        return t0  # fall back to the located cell; repair loop copes

    # -- insertion ----------------------------------------------------------

    def insert(self, p_idx):
        p = self.pts[p_idx]
        t0 = self._walk(p)
        if _infinite_slot(self.tets[t0]) < 0:
            for v in self.tets[t0]:
                if self.pts[v] == p:
                    raise DegenerateInput(f"duplicate point at index {p_idx}")
        seed = self._find_conflict_seed(t0, p, p_idx)

        cavity = {seed}
        stack = [seed]
        while stack:
            t = stack.pop()
            for nb in self.nbr[t]:
                if nb not in cavity and self._conflict(nb, p, p_idx):
                    cavity.add(nb)
                    stack.append(nb)

        # Grow the cavity until no boundary face would create a degenerate
        # cell (p coplanar with a finite boundary face).
        while True:
            boundary = []
            grow = None
            for t in cavity:
                for s in range(4):
                    nb = self.nbr[t][s]
                    if nb in cavity:
                        continue
                    face = [self.tets[t][j] for j in FACE_SLOTS[s]]
                    if _INF not in face:
                        o = _orient(*(self.pts[v] for v in face), p)
                        if abs(o) <= self.tol_orient:
                            grow = nb
                            break
                    boundary.append((face, nb, t))
                if grow is not None:
                    break
            if grow is None:
                break
            cavity.add(grow)

        new_ids = []
        for face, nb, t in boundary:
            verts = [face[0], face[1], face[2], p_idx]
            if _INF in face:
                if self._orient_inf(verts) > 0:
                    i, j = [s for s in range(3) if verts[s] != _INF]
                    verts[i], verts[j] = verts[j], verts[i]
            else:
                if _orient(*(self.pts[v] for v in verts)) < 0:
                    verts[0], verts[1] = verts[1], verts[0]
            nt = self._new_tet(verts, [BOUNDARY, BOUNDARY, BOUNDARY, BOUNDARY])
            # outer face (opposite the new point, slot 3) joins the old mesh
            s_nb = self.nbr[nb].index(t)
            self.nbr[nt][3] = nb
            self.nbr[nb][s_nb] = nt
            new_ids.append(nt)

        for t in cavity:
            self.alive[t] = False
        self._wire_by_face_key(new_ids)
        self.last = new_ids[-1]

    # -- output -------------------------------------------------------------

    def finish(self):
        old_ids = [i for i, a in enumerate(self.alive)
                   if a and _infinite_slot(self.tets[i]) < 0]
        remap = {old: new for new, old in enumerate(old_ids)}
        tets = np.array([self.tets[i] for i in old_ids], dtype=np.int32)
        nbrs = np.full((len(old_ids), 4), BOUNDARY, dtype=np.int32)
        for new, old in enumerate(old_ids):
            for s in range(4):
                nb = self.nbr[old][s]
                if nb in remap:
                    nbrs[new, s] = remap[nb]
        return TetMesh(self.np_pts.copy(), tets, nbrs)


def _infinite_slot(verts):
    for i in range(4):
        if verts[i] == _INF:
            return i
    return -1


def delaunay_triangulate(points):
    """Delaunay-tetrahedralize a point set.

    The result's vertex array is the input array unchanged, so tet indices
    refer to input point order. Requires at least 5 points that are not all
    coplanar. Deterministic: insertion order comes from a fixed-seed shuffle.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must have shape (N, 3)")
    if len(points) < 5:
        raise TooFewPoints(f"need >= 5 points, got {len(points)}")
    if not np.all(np.isfinite(points)):
        raise DegenerateInput("points contain non-finite values")

    tri = _Triangulator(points)
    order = np.random.default_rng(0x7E7A).permutation(len(points))
    used = set(tri._initial_tet(order))
    for idx in order:
        idx = int(idx)
        if idx in used:
            continue
        tri.insert(idx)
    return tri.finish()


def locate_point(mesh, p, hint=None):
    """Find a tet whose barycentric coordinates for p are all >= -BARY_EPS.

    Returns the tet id, or None when p lies outside the convex hull. A point
    on a shared face may report either adjacent tet.
    """
    p = np.asarray(p, dtype=np.float64)
    t = int(hint) if hint is not None else 0
    if not (0 <= t < mesh.num_tets):
        t = 0
    verts = mesh.vertices
    tets = mesh.tets
    nbrs = mesh.neighbors
    pt = tuple(map(float, p))

    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    tol = _ORIENT_REL * float(np.linalg.norm(hi - lo)) ** 3

    steps = 0
    limit = 4 * mesh.num_tets + 64
    shift = 0
    while True:
        vs = tets[t]
        moved = False
        shift += 1
        for j in range(4):
            s = (j + shift) % 4
            a, b, c = (tuple(verts[vs[i]]) for i in FACE_SLOTS[s])
            o = _orient(a, b, c, pt) * _APEX_SIGN[s]
            if o < -tol:
                nb = nbrs[t][s]
                if nb == BOUNDARY:
                    return None
                t = int(nb)
                moved = True
                break
        if not moved:
            break
        steps += 1
        if steps > limit:
            return _locate_brute(mesh, p)

    lam = barycentric_coords_many(p[None], mesh.tet_vertices(t)[None])[0]
    if lam.min() >= -BARY_EPS:
        return t
    # Walk ended within tolerance of a face; nudge to the neighbor that
    # actually contains p, if any.
    for s in np.argsort(lam):
        nb = nbrs[t][s]
        if nb == BOUNDARY:
            continue
        lam2 = barycentric_coords_many(p[None], mesh.tet_vertices(nb)[None])[0]
        if lam2.min() >= -BARY_EPS:
            return int(nb)
    return t if lam.min() >= -1e-7 else None


def _locate_brute(mesh, p):
    lams = barycentric_coords_many(
        np.broadcast_to(p, (mesh.num_tets, 3)), mesh.vertices[mesh.tets]
    )
    ok = lams.min(axis=1) >= -BARY_EPS
    hits = np.nonzero(ok)[0]
    return int(hits[0]) if len(hits) else None
