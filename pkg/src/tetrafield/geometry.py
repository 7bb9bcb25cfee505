"""3D primitives: rays, signed volumes, barycentric coordinates, triangle hits.

All geometry runs in float64. Feature/network math elsewhere may be float32,
but traversal robustness is set by these routines, so they stay in double
precision throughout.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTetra

# Inside/outside tolerance for barycentric coordinates. Points within EPS of a
# face count as inside both adjacent tetrahedra; traversal order breaks ties.
BARY_EPS = 1e-9

# A tetra is degenerate when |signed volume| < VOLUME_EPS_REL * diag^3 with
# diag the tetra's bounding-box diagonal (scale-relative, survives unit changes).
VOLUME_EPS_REL = 1e-12

# Vertex slots of the face opposite each tetra vertex slot, in ascending order.
# lift_barycentric and the mesh/BVH face enumeration all share this table.
FACE_SLOTS = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))


def point3(x, y, z):
    """Build a finite 3D point as a float64 array."""
    p = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("point components must be finite")
    return p


@dataclass
class Ray:
    """Origin plus unit direction, restricted to distances [t_min, t_max]."""

    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = field(default=np.inf)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got norm {n}")
        if self.t_min < 0 or self.t_min > self.t_max:
            raise ValueError("require 0 <= t_min <= t_max")

    def at(self, t):
        return self.origin + t * self.direction


def signed_volume(a, b, c, d):
    """Signed volume of tetra (a,b,c,d): det([b-a, c-a, d-a]) / 6.

    Positive for a positively oriented tetra; antisymmetric under any
    single vertex transposition; zero for coplanar inputs.
    """
    ax, ay, az = float(a[0]), float(a[1]), float(a[2])
    bx, by, bz = float(b[0]) - ax, float(b[1]) - ay, float(b[2]) - az
    cx, cy, cz = float(c[0]) - ax, float(c[1]) - ay, float(c[2]) - az
    dx, dy, dz = float(d[0]) - ax, float(d[1]) - ay, float(d[2]) - az
    return (
        bx * (cy * dz - cz * dy)
        - by * (cx * dz - cz * dx)
        + bz * (cx * dy - cy * dx)
    ) / 6.0


def tetra_is_degenerate(verts):
    """True when |volume| falls below the scale-relative epsilon."""
    verts = np.asarray(verts, dtype=np.float64)
    diag = float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))
    vol = signed_volume(verts[0], verts[1], verts[2], verts[3])
    return abs(vol) < VOLUME_EPS_REL * diag**3


def barycentric_coords(p, verts):
    """Barycentric weights of p w.r.t. a tetra given as a (4,3) vertex array.

    Weight i is the volume of the tetra with vertex i replaced by p, divided
    by the full volume. Weights sum to 1 and reconstruct p as sum(w_i * v_i).

    Raises DegenerateTetra when the full volume is below the volume epsilon.
    """
    verts = np.asarray(verts, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    v0, v1, v2, v3 = verts
    vol = signed_volume(v0, v1, v2, v3)
    diag = float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))
    if abs(vol) < VOLUME_EPS_REL * diag**3:
        raise DegenerateTetra(f"tetra volume {vol} below epsilon for diag {diag}")
    l0 = signed_volume(p, v1, v2, v3) / vol
    l1 = signed_volume(v0, p, v2, v3) / vol
    l2 = signed_volume(v0, v1, p, v3) / vol
    l3 = signed_volume(v0, v1, v2, p) / vol
    return np.array([l0, l1, l2, l3])


def barycentric_coords_many(points, verts):
    """Vectorized barycentric weights: (N,3) points against (N,4,3) tetras."""
    points = np.asarray(points, dtype=np.float64)
    verts = np.asarray(verts, dtype=np.float64)
    # Solve [v0-v3, v1-v3, v2-v3] @ l[:3] = p - v3, then l3 = 1 - sum.
    m = np.stack([verts[:, 0] - verts[:, 3],
                  verts[:, 1] - verts[:, 3],
                  verts[:, 2] - verts[:, 3]], axis=2)
    rhs = points - verts[:, 3]
    lam3 = np.linalg.solve(m, rhs[..., None])[..., 0]
    return np.concatenate([lam3, 1.0 - lam3.sum(axis=1, keepdims=True)], axis=1)


def ray_triangle_intersect(ray, tri):
    """Watertight ray/triangle test.

    Returns (t, u, v) where the hit point is u*A + v*B + (1-u-v)*C for the
    triangle (A, B, C), or None on a miss. Hits are only reported for
    t in [ray.t_min, ray.t_max]. Edge and vertex crossings are reported
    (weights may be exactly 0), which keeps shared mesh faces watertight.
    """
    tri = np.asarray(tri, dtype=np.float64)
    hit = _watertight_intersect(
        ray.origin, ray.direction, tri[0], tri[1], tri[2], ray.t_min, ray.t_max
    )
    return hit


def _watertight_intersect(orig, dirv, va, vb, vc, t_min, t_max):
    # Woop/Benthin/Wald style: shear-transform so the ray maps to +z, then
    # evaluate 2D edge functions. In float64 the fallback branch is omitted.
    ad = np.abs(dirv)
    kz = int(np.argmax(ad))
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if dirv[kz] < 0.0:
        kx, ky = ky, kx
    sx = dirv[kx] / dirv[kz]
    sy = dirv[ky] / dirv[kz]
    sz = 1.0 / dirv[kz]

    a = va - orig
    b = vb - orig
    c = vc - orig
    ax = a[kx] - sx * a[kz]
    ay = a[ky] - sy * a[kz]
    bx = b[kx] - sx * b[kz]
    by = b[ky] - sy * b[kz]
    cx = c[kx] - sx * c[kz]
    cy = c[ky] - sy * c[kz]

    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return None
    det = u + v + w
    if det == 0.0:
        return None
    az = sz * a[kz]
    bz = sz * b[kz]
    cz = sz * c[kz]
    t = (u * az + v * bz + w * cz) / det
    if not (t_min <= t <= t_max):
        return None
    return t, u / det, v / det


def lift_barycentric(face_uv, face_index_in_tet):
    """Lift triangle barycentrics onto a tetra (zero at the opposite vertex).

    face_uv is (u, v) with the third weight implied as 1-u-v, ordered like
    FACE_SLOTS[face_index_in_tet]; the returned 4-vector places them at the
    face's vertex slots.
    """
    u, v = float(face_uv[0]), float(face_uv[1])
    w = 1.0 - u - v
    lam = np.zeros(4)
    s = FACE_SLOTS[face_index_in_tet]
    lam[s[0]] = u
    lam[s[1]] = v
    lam[s[2]] = w
    return lam
