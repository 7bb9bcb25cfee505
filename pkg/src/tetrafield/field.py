"""Trainable per-vertex feature field with barycentric interpolation.

One feature vector per mesh vertex; a query inside a tet blends the four
vertex vectors with its barycentric weights. The adjoint scatters upstream
gradients back onto the vertices with the same weights.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import SizeMismatch


@dataclass
class FeatureField:
    features: np.ndarray  # (V, F)
    grad: np.ndarray      # (V, F), zeroed between optimizer steps

    @property
    def num_vertices(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def dtype(self):
        return self.features.dtype

    def zero_grad(self):
        self.grad[:] = 0


def init_field(mesh, cloud, seed=0, feature_dim=64, init_scale=1e-4,
               dtype=np.float32):
    """Feature field aligned 1:1 with mesh vertices / cloud points.

    Dimensions 0..3 seed from the point's RGBA color (synthetic points carry
    alpha 0); the rest start uniform in [-init_scale, init_scale].
    """
    if mesh.num_vertices != len(cloud):
        raise SizeMismatch(
            f"mesh has {mesh.num_vertices} vertices, cloud has {len(cloud)} points"
        )
    if feature_dim < 4:
        raise ValueError("feature_dim must be >= 4 to hold the RGBA seed")
    rng = np.random.default_rng(seed)
    feats = rng.uniform(-init_scale, init_scale,
                        size=(mesh.num_vertices, feature_dim)).astype(dtype)
    feats[:, :4] = cloud.colors.astype(dtype)
    return FeatureField(features=feats, grad=np.zeros_like(feats))


def interpolate(field, tet, lam):
    """Blend the four vertex features of `tet` with barycentric weights."""
    tet = np.asarray(tet)
    lam = np.asarray(lam, dtype=field.dtype)
    return lam @ field.features[tet]


def interpolate_many(field, tets, lams):
    """Batch interpolate: (M,4) vertex-id rows against (M,4) weight rows."""
    lams = np.asarray(lams, dtype=field.dtype)
    gathered = field.features[tets]  # (M,4,F)
    return np.einsum("ms,msf->mf", lams, gathered)


def interpolate_backward(field, tet, lam, upstream_grad):
    """Accumulate grad[v_i] += lam_i * upstream_grad for the tet's vertices."""
    tet = np.asarray(tet)
    lam = np.asarray(lam, dtype=field.grad.dtype)
    up = np.asarray(upstream_grad, dtype=field.grad.dtype)
    for s in range(4):
        field.grad[tet[s]] += lam[s] * up


def interpolate_backward_many(field, tets, lams, upstream_grads):
    """Batch adjoint; serial accumulation order, so results are reproducible."""
    _kernels.scatter_add_features(
        field.grad,
        np.ascontiguousarray(tets, dtype=np.int32),
        np.ascontiguousarray(lams, dtype=field.grad.dtype),
        np.ascontiguousarray(upstream_grads, dtype=field.grad.dtype),
    )
