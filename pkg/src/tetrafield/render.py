"""Sampling along traced rays and the differentiable rendering integral.

Samples live in occupied-space arc length: each ray's crossed segments are
concatenated into one interval of total length L, so stratified and
importance sampling never land in empty space. Distances (t) are recovered
from arc length (s) through the segment table. For a full trace of a convex
hull the two parameterizations coincide up to the entry offset.

The color of a ray is C = sum_i w_i c_i + T_final * background with
w_i = (1 - exp(-sigma_i delta_i)) * exp(-sum_{j<i} sigma_j delta_j).
"""

from dataclasses import dataclass

import numpy as np

from . import field as field_mod
from . import network
from .errors import EmptyTrace
from .traversal import FlatTraces

_MIN_DENOM = 1e-30


def background_rgb(background, dtype=np.float64):
    if isinstance(background, str):
        if background == "white":
            return np.ones(3, dtype=dtype)
        if background == "black":
            return np.zeros(3, dtype=dtype)
        raise ValueError(f"unknown background {background!r}")
    return np.asarray(background, dtype=dtype)


@dataclass
class RenderOutput:
    color: np.ndarray        # (3,)
    depth: float             # expected termination distance, 0 if vacuum
    accumulation: float      # sum of rendering weights in [0, 1]


def compute_weights(sigma, delta):
    """Per-sample rendering weights (works on (..., n) arrays).

    w_i = (1 - exp(-sigma_i delta_i)) * exp(-sum_{j<i} sigma_j delta_j).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    tau = sigma * delta
    csum = np.cumsum(tau, axis=-1)
    transmittance = np.exp(-(csum - tau))
    return -np.expm1(-tau) * transmittance


# ---------------------------------------------------------------------------
# occupied-space parameterization
# ---------------------------------------------------------------------------


class _Occupancy:
    """Arc-length bookkeeping for a batch of traces (active rays only)."""

    def __init__(self, flat: FlatTraces, active):
        self.flat = flat
        self.active = active  # indices of rays with >= 1 segment
        self.off = flat.seg_off
        seg_len = flat.t_out - flat.t_in
        self.gcum = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.ray_base = self.gcum[self.off[active]]
        self.total = self.gcum[self.off[active + 1]] - self.ray_base  # (A,)
        self.lo = self.off[active]
        self.hi = self.off[active + 1] - 1

    def s_to_segment(self, s):
        """Map local arc length (A, k) to (global segment id, t)."""
        s_global = s + self.ray_base[:, None]
        seg = np.searchsorted(self.gcum, s_global, side="right") - 1
        seg = np.clip(seg, self.lo[:, None], self.hi[:, None])
        t = self.flat.t_in[seg] + (s_global - self.gcum[seg])
        return seg, np.minimum(t, self.flat.t_out[seg])


def _stratified(total, n, u):
    """One uniform draw per equal stratum of [0, total); u is (A, n)."""
    k = np.arange(n)
    return (k[None, :] + u) / n * total[:, None]


def _importance(total, wbar, u):
    """Inverse-CDF draws from the piecewise-constant pdf over the coarse
    strata; rows with zero total weight fall back to stratified uniform."""
    a, n_c = wbar.shape
    n_f = u.shape[1]
    tot_w = wbar.sum(axis=1)
    ok = tot_w > 0
    s = np.empty((a, n_f))
    if not ok.all():
        s[~ok] = _stratified(total[~ok], n_f, u[~ok])
    if ok.any():
        w = wbar[ok]
        cdf = np.cumsum(w, axis=1)
        cdf /= cdf[:, -1:]
        rows = np.arange(len(cdf))
        shifted_cdf = (cdf + 2.0 * rows[:, None]).ravel()
        uu = np.clip(u[ok], 0.0, 1.0 - 1e-12)
        shifted_u = uu + 2.0 * rows[:, None]
        pos = np.searchsorted(shifted_cdf, shifted_u.ravel(), side="right")
        idx = np.clip(pos.reshape(len(cdf), n_f) - rows[:, None] * n_c, 0, n_c - 1)
        prev = np.where(idx > 0, np.take_along_axis(
            np.concatenate([np.zeros((len(cdf), 1)), cdf], axis=1), idx, axis=1
        ), 0.0)
        cur = np.take_along_axis(cdf, idx, axis=1)
        frac = (uu - prev) / np.maximum(cur - prev, _MIN_DENOM)
        s[ok] = (idx + np.clip(frac, 0.0, 1.0)) / n_c * total[ok][:, None]
    return s


# ---------------------------------------------------------------------------
# field samplers: sample position -> feature vector (+ adjoint)
# ---------------------------------------------------------------------------


class TetraSampler:
    """Features by barycentric blending inside the traced tetrahedra."""

    def __init__(self, feats, mesh, flat):
        self.field = feats
        self.tets = mesh.tets
        self.flat = flat

    def gather(self, ray_idx, seg, t):
        frac = (t - self.flat.t_in[seg]) / np.maximum(
            self.flat.t_out[seg] - self.flat.t_in[seg], _MIN_DENOM
        )
        lam = ((1.0 - frac)[:, None] * self.flat.bary_in[seg]
               + frac[:, None] * self.flat.bary_out[seg])
        vert_ids = self.tets[self.flat.tets[seg]]
        ctx = (vert_ids, lam.astype(self.field.dtype))
        return field_mod.interpolate_many(self.field, vert_ids, ctx[1]), ctx

    def backward(self, ctx, dfeats):
        vert_ids, lam = ctx
        field_mod.interpolate_backward_many(self.field, vert_ids, lam, dfeats)


# ---------------------------------------------------------------------------
# single-ray sampling surface
# ---------------------------------------------------------------------------


def _single_occupancy(trace):
    if len(trace) == 0:
        raise EmptyTrace("ray crosses no tetrahedra")
    flat = FlatTraces(
        seg_off=np.array([0, len(trace)], dtype=np.int64),
        tets=trace.tets, t_in=trace.t_in, t_out=trace.t_out,
        bary_in=trace.bary_in, bary_out=trace.bary_out,
        truncated=np.array([trace.truncated]),
    )
    return _Occupancy(flat, np.array([0]))


def sample_coarse(trace, n_coarse, rng):
    """Stratified sample distances over the ray's occupied intervals."""
    occ = _single_occupancy(trace)
    u = rng.random((1, n_coarse))
    s = _stratified(occ.total, n_coarse, u)
    _, t = occ.s_to_segment(s)
    return t[0]


def sample_fine(trace, wbar, coarse_t, n_fine, rng):
    """Importance-sample distances from the coarse-pass weights."""
    occ = _single_occupancy(trace)
    wbar = np.asarray(wbar, dtype=np.float64)[None]
    u = rng.random((1, n_fine))
    s = _importance(occ.total, wbar, u)
    _, t = occ.s_to_segment(s)
    return t[0]


# ---------------------------------------------------------------------------
# batch rendering
# ---------------------------------------------------------------------------


@dataclass
class RenderTape:
    sampler: object
    ctx: object
    mlp: object
    mlp_tape: object
    delta: np.ndarray     # (A, M)
    sigma: np.ndarray     # (A, M)
    rgb: np.ndarray       # (A, M, 3)
    weights: np.ndarray   # (A, M) float64
    t_final: np.ndarray   # (A,)
    bg: np.ndarray        # (3,)
    active: np.ndarray    # ray indices
    n_rays: int


def render_rays(feats, mlp, mesh, flat, dirs, config, rng, need_tape=True):
    """Render a batch of traced rays.

    Returns (colors (N,3), depths (N,), accumulation (N,), tape). Empty
    traces render pure background with zero accumulation and depth.
    """
    n = flat.num_rays
    bg = background_rgb(config.background)
    colors = np.tile(bg, (n, 1))
    depths = np.zeros(n)
    accum = np.zeros(n)

    counts = np.diff(flat.seg_off)
    active = np.nonzero(counts > 0)[0]
    if len(active) == 0:
        return colors, depths, accum, None

    occ = _Occupancy(flat, active)
    sampler = TetraSampler(feats, mesh, flat)
    dirs_act = np.asarray(dirs)[active]

    out = _render_core(sampler, occ, dirs_act, mlp, config, rng, bg, need_tape)
    color_act, depth_act, acc_act, tape = out
    colors[active] = color_act
    depths[active] = depth_act
    accum[active] = acc_act
    if tape is not None:
        tape.active = active
        tape.n_rays = n
    return colors, depths, accum, tape


def _render_core(sampler, occ, dirs_act, mlp, config, rng, bg, need_tape):
    a = len(occ.active)
    n_c, n_f = config.n_coarse, config.n_fine

    # coarse pass: stratified in arc length, forward only
    u_c = rng.random((a, n_c))
    s_c = _stratified(occ.total, n_c, u_c)
    seg_c, t_c = occ.s_to_segment(s_c)
    ray_rows = np.repeat(np.arange(a), n_c)
    feats_c, _ = sampler.gather(ray_rows, seg_c.ravel(), t_c.ravel())
    sigma_c, _, _ = network.forward_batch(
        mlp, feats_c, np.repeat(dirs_act, n_c, axis=0), need_tape=False
    )
    delta_c = np.diff(s_c, axis=1)
    delta_c = np.concatenate([delta_c, (occ.total[:, None] - s_c[:, -1:])], axis=1)
    wbar = compute_weights(sigma_c.reshape(a, n_c), delta_c)

    # fine pass: importance draws from the coarse weights
    u_f = rng.random((a, n_f))
    s_f = _importance(occ.total, wbar, u_f)

    # merged pass: evaluate the union once more, with the tape
    s_all = np.sort(np.concatenate([s_c, s_f], axis=1), axis=1)
    m = n_c + n_f
    seg_all, t_all = occ.s_to_segment(s_all)
    rows_all = np.repeat(np.arange(a), m)
    feats_all, ctx = sampler.gather(rows_all, seg_all.ravel(), t_all.ravel())
    sigma_flat, rgb_flat, mlp_tape = network.forward_batch(
        mlp, feats_all, np.repeat(dirs_act, m, axis=0), need_tape=need_tape
    )
    sigma = sigma_flat.reshape(a, m)
    rgb = rgb_flat.reshape(a, m, 3)

    delta = np.diff(s_all, axis=1)
    delta = np.concatenate([delta, (occ.total[:, None] - s_all[:, -1:])], axis=1)
    w = compute_weights(sigma, delta)
    acc = w.sum(axis=1)
    t_final = np.exp(-(np.asarray(sigma, np.float64) * delta).sum(axis=1))

    color = np.einsum("am,amc->ac", w, rgb.astype(np.float64))
    color += t_final[:, None] * bg[None, :]
    wsum = np.maximum(acc, _MIN_DENOM)
    depth = np.where(acc > 0, (w * t_all).sum(axis=1) / wsum, 0.0)

    tape = None
    if need_tape:
        tape = RenderTape(
            sampler=sampler, ctx=ctx, mlp=mlp, mlp_tape=mlp_tape,
            delta=delta, sigma=np.asarray(sigma, np.float64), rgb=rgb,
            weights=w, t_final=t_final, bg=bg, active=None, n_rays=0,
        )
    return color, depth, acc, tape


def render_rays_backward(tape, dcolors):
    """Back-propagate color gradients through the rendering integral.

    Gradients reach the color head directly and the density through both its
    own opacity term and every later sample's transmittance, then continue
    into the network and the feature field.
    """
    if tape is None:
        return
    dc_act = np.asarray(dcolors, dtype=np.float64)[tape.active]  # (A,3)
    w = tape.weights
    a, m = w.shape

    dc_dot_c = np.einsum("ac,amc->am", dc_act, tape.rgb.astype(np.float64))
    drgb = w[:, :, None] * dc_act[:, None, :]

    # suffix sums of (dC . c_j) w_j for the transmittance chain
    prod = dc_dot_c * w
    suffix = np.cumsum(prod[:, ::-1], axis=1)[:, ::-1] - prod
    dc_dot_bg = dc_act @ tape.bg
    tau = tape.sigma * tape.delta
    t_i = np.exp(-(np.cumsum(tau, axis=1) - tau))
    dsigma = tape.delta * (
        np.exp(-tau) * t_i * dc_dot_c
        - suffix
        - dc_dot_bg[:, None] * tape.t_final[:, None]
    )

    dfeats = network.backward_batch(
        tape.mlp, tape.mlp_tape,
        dsigma.reshape(a * m), drgb.reshape(a * m, 3),
    )
    tape.sampler.backward(tape.ctx, dfeats)


def render_ray(feats, mlp, mesh, trace, d, config, rng):
    """Render one traced ray; returns (RenderOutput, tape)."""
    flat = FlatTraces(
        seg_off=np.array([0, len(trace)], dtype=np.int64),
        tets=trace.tets, t_in=trace.t_in, t_out=trace.t_out,
        bary_in=trace.bary_in, bary_out=trace.bary_out,
        truncated=np.array([trace.truncated]),
    )
    colors, depths, accum, tape = render_rays(
        feats, mlp, mesh, flat, np.asarray(d)[None], config, rng,
    )
    out = RenderOutput(color=colors[0], depth=float(depths[0]),
                       accumulation=float(accum[0]))
    return out, tape


def render_ray_backward(tape, dcolor):
    """Back-propagate a single ray's color gradient."""
    render_rays_backward(tape, np.asarray(dcolor, dtype=np.float64)[None])
