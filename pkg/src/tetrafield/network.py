"""Radiance head: 3-layer trunk -> (density, appearance), then a single
linear color layer over appearance + Fourier-encoded view direction.

Reverse-mode gradients are hand-written for exactly this architecture; the
tape from a forward pass holds every intermediate the backward pass needs.
Weights are float32 for training throughput; float64 mode exists for
finite-difference gradient checks.
"""

from dataclasses import dataclass, field as dfield

import numpy as np
from scipy.special import expit

from .errors import NonFiniteActivation


@dataclass
class DirEncoding:
    """Identity + sin/cos at frequencies 2^k * pi, k = 0..L-1, per axis."""

    frequencies: int

    @property
    def width(self):
        return 3 + 6 * self.frequencies


def encode_directions(dirs, frequencies):
    """Fourier-encode unit directions: concat(d, sin(2^k pi d), cos(2^k pi d))."""
    dirs = np.asarray(dirs)
    parts = [dirs]
    for k in range(frequencies):
        ang = (2.0**k * np.pi) * dirs
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    return np.concatenate(parts, axis=-1)


def encode_direction(d, frequencies):
    """Single-direction convenience wrapper."""
    return encode_directions(np.asarray(d, dtype=np.float64), frequencies)


@dataclass
class RadianceMlp:
    w1: np.ndarray  # (F, H)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, H)
    b2: np.ndarray  # (H,)
    w3: np.ndarray  # (H, 1+A)
    b3: np.ndarray  # (1+A,)
    wc: np.ndarray  # (A+E, 3)
    bc: np.ndarray  # (3,)
    grads: dict = dfield(default_factory=dict)
    dir_frequencies: int = 4

    def __post_init__(self):
        if not self.grads:
            self.grads = {n: np.zeros_like(p) for n, p in self.named_params()}

    def named_params(self):
        return [
            ("w1", self.w1), ("b1", self.b1),
            ("w2", self.w2), ("b2", self.b2),
            ("w3", self.w3), ("b3", self.b3),
            ("wc", self.wc), ("bc", self.bc),
        ]

    @property
    def feature_dim(self):
        return self.w1.shape[0]

    @property
    def appearance_dim(self):
        return self.w3.shape[1] - 1

    @property
    def dtype(self):
        return self.w1.dtype

    def zero_grad(self):
        for g in self.grads.values():
            g[:] = 0


def init_mlp(feature_dim=64, hidden=128, appearance_dim=128, dir_frequencies=4,
             seed=0, dtype=np.float32):
    """Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    enc_width = DirEncoding(dir_frequencies).width

    def kaiming(fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)

    return RadianceMlp(
        w1=kaiming(feature_dim, hidden),
        b1=np.zeros(hidden, dtype=dtype),
        w2=kaiming(hidden, hidden),
        b2=np.zeros(hidden, dtype=dtype),
        w3=kaiming(hidden, 1 + appearance_dim),
        b3=np.zeros(1 + appearance_dim, dtype=dtype),
        wc=kaiming(appearance_dim + enc_width, 3),
        bc=np.zeros(3, dtype=dtype),
        dir_frequencies=dir_frequencies,
    )


@dataclass
class Tape:
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    raw_sigma: np.ndarray
    color_in: np.ndarray  # appearance concat encoded direction
    rgb: np.ndarray


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def forward_batch(mlp, feats, dirs, check_finite=True, need_tape=True):
    """Evaluate density and color for a batch of interpolated features.

    Returns (sigma (M,), rgb (M,3), tape). Direction enters only the color
    head, after Fourier encoding; density is softplus of the first trunk
    output, color is sigmoid of the head output.
    """
    dtype = mlp.dtype
    x = np.asarray(feats, dtype=dtype)
    z1 = x @ mlp.w1 + mlp.b1
    a1 = np.maximum(z1, 0)
    z2 = a1 @ mlp.w2 + mlp.b2
    a2 = np.maximum(z2, 0)
    trunk = a2 @ mlp.w3 + mlp.b3
    raw_sigma = trunk[:, 0]
    appearance = trunk[:, 1:]
    enc = encode_directions(np.asarray(dirs, dtype=dtype), mlp.dir_frequencies)
    color_in = np.concatenate([appearance, enc.astype(dtype)], axis=1)
    raw_rgb = color_in @ mlp.wc + mlp.bc
    rgb = expit(raw_rgb)
    sigma = _softplus(raw_sigma)
    if check_finite and not (np.isfinite(sigma).all() and np.isfinite(rgb).all()):
        raise NonFiniteActivation("non-finite density or color in forward pass")
    tape = Tape(x, z1, a1, z2, a2, raw_sigma, color_in, rgb) if need_tape else None
    return sigma, rgb, tape


def forward(mlp, feature, d, check_finite=True):
    """Single-query wrapper around forward_batch."""
    sigma, rgb, tape = forward_batch(
        mlp, np.asarray(feature)[None], np.asarray(d)[None], check_finite
    )
    return float(sigma[0]), rgb[0], tape


def backward_batch(mlp, tape, dsigma, drgb):
    """Accumulate parameter grads; return gradient w.r.t. input features.

    The encoded direction is an input, not a parameter, so it receives no
    gradient.
    """
    dtype = mlp.dtype
    dsigma = np.asarray(dsigma, dtype=dtype)
    drgb = np.asarray(drgb, dtype=dtype)
    g = mlp.grads

    draw_rgb = drgb * tape.rgb * (1 - tape.rgb)          # sigmoid'
    g["wc"] += tape.color_in.T @ draw_rgb
    g["bc"] += draw_rgb.sum(axis=0)
    dcolor_in = draw_rgb @ mlp.wc.T

    app_dim = mlp.appearance_dim
    draw_sigma = dsigma * expit(tape.raw_sigma)          # softplus'
    dtrunk = np.concatenate([draw_sigma[:, None], dcolor_in[:, :app_dim]], axis=1)
    g["w3"] += tape.a2.T @ dtrunk
    g["b3"] += dtrunk.sum(axis=0)
    da2 = dtrunk @ mlp.w3.T

    dz2 = da2 * (tape.z2 > 0)
    g["w2"] += tape.a1.T @ dz2
    g["b2"] += dz2.sum(axis=0)
    da1 = dz2 @ mlp.w2.T

    dz1 = da1 * (tape.z1 > 0)
    g["w1"] += tape.x.T @ dz1
    g["b1"] += dz1.sum(axis=0)
    return dz1 @ mlp.w1.T


def backward(mlp, tape, dsigma, drgb):
    """Single-query wrapper around backward_batch."""
    dfeat = backward_batch(
        mlp, tape, np.asarray([dsigma]), np.asarray(drgb)[None]
    )
    return dfeat[0]
