"""Rotary position embedding geometry and per-frequency position scaling.

A rotary embedding splits a head vector of even dimension d into d/2 planar
pairs and rotates pair i at position m by the angle omega_i * m, with the
geometric frequency law omega_i = base**(-2i/d). Position interpolation
compresses the phase of pair i by a per-pair factor s_i, so the scaled phase
is omega_i * f(m) / s_i for a monotone warp f (identity in v1, the hook is
kept for non-linear warps). Everything downstream (diagnostics, search,
evaluation) works in terms of this scaled phase.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PAIRINGS = ("half_split", "interleaved")
WARPS = ("identity",)


@dataclass(frozen=True)
class RoPEConfig:
    """Rotary geometry for one attention head.

    head_dim: even head dimension d; the head has d/2 rotation pairs.
    base: frequency base of the geometric law (10000.0 for LLaMA-family).
    pairing: how pair i maps to vector indices. "half_split" pairs index i
        with i + d/2 (LLaMA rotate-half), "interleaved" pairs 2i with 2i+1
        (GPT-NeoX order).
    train_window: context length the frequencies were trained at; used as
        the reference window by ramp constructors and diagnostics defaults.
    """

    head_dim: int
    base: float = 10000.0
    pairing: str = "half_split"
    train_window: int = 2048

    def __post_init__(self) -> None:
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if not (math.isfinite(self.base) and self.base > 1.0):
            raise ValueError(f"base must be a finite real > 1, got {self.base}")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")
        if self.train_window <= 0:
            raise ValueError(f"train_window must be positive, got {self.train_window}")

    @property
    def num_pairs(self) -> int:
        return self.head_dim // 2


@dataclass(frozen=True)
class ScalingScheme:
    """Per-pair interpolation factors s_i >= 1 plus the phase warp name.

    scales are stored as a tuple so schemes hash and compare by value; use
    scale_array() for vector math.
    """

    scales: tuple[float, ...]
    warp: str = "identity"

    def __post_init__(self) -> None:
        if self.warp not in WARPS:
            raise ValueError(f"warp must be one of {WARPS}, got {self.warp!r}")
        if len(self.scales) == 0:
            raise ValueError("scales must be non-empty")
        for i, s in enumerate(self.scales):
            if not (math.isfinite(s) and s >= 1.0):
                raise ValueError(f"scale s_{i} must be a finite real >= 1, got {s}")

    @property
    def num_pairs(self) -> int:
        return len(self.scales)

    def scale_array(self) -> np.ndarray:
        return np.asarray(self.scales, dtype=np.float64)

    @classmethod
    def none(cls, num_pairs: int) -> "ScalingScheme":
        """The unscaled scheme, s_i = 1 for all pairs."""
        return cls(scales=(1.0,) * num_pairs)

    @classmethod
    def uniform(cls, num_pairs: int, factor: float) -> "ScalingScheme":
        """Linear position interpolation: one global factor for every pair."""
        if not (math.isfinite(factor) and factor >= 1.0):
            raise ValueError(f"interpolation factor must be >= 1, got {factor}")
        return cls(scales=(float(factor),) * num_pairs)

    @classmethod
    def ramp(
        cls,
        config: RoPEConfig,
        factor: float,
        low_rotations: float = 1.0,
        high_rotations: float = 32.0,
    ) -> "ScalingScheme":
        """Frequency-dependent interpolation between 1 and the global factor.

        Pairs are placed by how many full rotations r_i = train_window *
        omega_i / (2*pi) they complete inside the training window. Pairs
        rotating at least high_rotations times keep s_i = 1, pairs below
        low_rotations get the full factor, and the ramp is linear in r_i
        between the two knees. This is the usual NTK-by-parts shape.
        """
        if not (math.isfinite(factor) and factor >= 1.0):
            raise ValueError(f"interpolation factor must be >= 1, got {factor}")
        if not (0 <= low_rotations < high_rotations):
            raise ValueError(
                f"need 0 <= low_rotations < high_rotations, got {low_rotations}, {high_rotations}"
            )
        freqs = pair_frequencies(config)
        rotations = config.train_window * freqs / (2.0 * math.pi)
        t = np.clip((rotations - low_rotations) / (high_rotations - low_rotations), 0.0, 1.0)
        scales = factor + (1.0 - factor) * t
        return cls(scales=tuple(float(s) for s in scales))


@dataclass(frozen=True)
class PairVector:
    """One 2d point living in a single rotation plane."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"pair components must be finite, got ({self.x}, {self.y})")


def pair_frequencies(config: RoPEConfig) -> np.ndarray:
    """Angular frequencies omega_i = base**(-2i/d), descending, shape (d/2,)."""
    i = np.arange(config.num_pairs, dtype=np.float64)
    return config.base ** (-2.0 * i / config.head_dim)


def _check_pair(config: RoPEConfig, pair: int) -> None:
    if not 0 <= pair < config.num_pairs:
        raise ValueError(f"pair index {pair} out of range [0, {config.num_pairs})")


def _check_scheme(config: RoPEConfig, scheme: ScalingScheme) -> None:
    if scheme.num_pairs != config.num_pairs:
        raise ValueError(
            f"scheme has {scheme.num_pairs} scales but config has {config.num_pairs} pairs"
        )


def warp_position(scheme: ScalingScheme, position: float) -> float:
    """The monotone position warp f(m). Identity in v1."""
    if scheme.warp == "identity":
        return float(position)
    raise ValueError(f"unknown warp {scheme.warp!r}")


def scaled_phase(
    config: RoPEConfig, scheme: ScalingScheme, position: float, pair: int
) -> float:
    """Interpolated rotation angle omega_i * f(m) / s_i for one pair."""
    _check_scheme(config, scheme)
    _check_pair(config, pair)
    if position < 0:
        raise ValueError(f"position must be non-negative, got {position}")
    omega = float(pair_frequencies(config)[pair])
    return omega * warp_position(scheme, position) / scheme.scales[pair]


def phase_deviation(
    config: RoPEConfig,
    scheme: ScalingScheme,
    displacement: float,
    reference: float,
    pair: int,
) -> float:
    """Phase error eps_i(D) = omega_i * (f(D)/s_i - D0) of the scaled phase
    against the unscaled phase at a reference displacement D0."""
    _check_scheme(config, scheme)
    _check_pair(config, pair)
    omega = float(pair_frequencies(config)[pair])
    return omega * (warp_position(scheme, displacement) / scheme.scales[pair] - reference)


def rotate_pair(u: PairVector, phase: float) -> PairVector:
    """Rotate one pair by an angle. Norm-preserving by construction."""
    c, s = math.cos(phase), math.sin(phase)
    return PairVector(c * u.x - s * u.y, s * u.x + c * u.y)


def rotate_pairs(xy: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Rotate a batch of 2-vectors, shape (..., 2), by per-element angles.

    phases must broadcast against xy.shape[:-1].
    """
    xy = np.asarray(xy, dtype=np.float64)
    if xy.shape[-1] != 2:
        raise ValueError(f"expected trailing dimension 2, got shape {xy.shape}")
    c = np.cos(phases)
    s = np.sin(phases)
    out = np.empty(np.broadcast_shapes(xy.shape[:-1], np.shape(phases)) + (2,))
    out[..., 0] = c * xy[..., 0] - s * xy[..., 1]
    out[..., 1] = s * xy[..., 0] + c * xy[..., 1]
    return out


def split_pairs(v: np.ndarray, pairing: str) -> tuple[np.ndarray, np.ndarray]:
    """Split trailing head_dim axis into (first, second) pair components,
    each of shape (..., d/2), according to the pairing convention."""
    if pairing == "half_split":
        half = v.shape[-1] // 2
        return v[..., :half], v[..., half:]
    if pairing == "interleaved":
        return v[..., 0::2], v[..., 1::2]
    raise ValueError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")


def merge_pairs(a: np.ndarray, b: np.ndarray, pairing: str) -> np.ndarray:
    """Inverse of split_pairs."""
    if pairing == "half_split":
        return np.concatenate([a, b], axis=-1)
    if pairing == "interleaved":
        out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=np.result_type(a, b))
        out[..., 0::2] = a
        out[..., 1::2] = b
        return out
    raise ValueError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")


def rotate_vector(
    v: np.ndarray, config: RoPEConfig, scheme: ScalingScheme, position: float
) -> np.ndarray:
    """Apply the full scaled rotary map to head vectors.

    v has shape (..., head_dim); every trailing vector is rotated pairwise by
    the scaled phases at the given position. Returns float64.
    """
    _check_scheme(config, scheme)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != config.head_dim:
        raise ValueError(f"expected trailing dimension {config.head_dim}, got shape {v.shape}")
    if position < 0:
        raise ValueError(f"position must be non-negative, got {position}")
    phases = (
        pair_frequencies(config) * warp_position(scheme, position) / scheme.scale_array()
    )
    a, b = split_pairs(v, config.pairing)
    c, s = np.cos(phases), np.sin(phases)
    return merge_pairs(a * c - b * s, a * s + b * c, config.pairing)


def phase_table(
    config: RoPEConfig, scheme: ScalingScheme, positions: np.ndarray
) -> np.ndarray:
    """Scaled phases for a batch of positions, shape (len(positions), d/2)."""
    _check_scheme(config, scheme)
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 1:
        raise ValueError(f"positions must be a 1d array, got shape {positions.shape}")
    if np.any(positions < 0):
        raise ValueError("positions must be non-negative")
    if scheme.warp != "identity":
        raise ValueError(f"unknown warp {scheme.warp!r}")
    return positions[:, None] * (pair_frequencies(config) / scheme.scale_array())[None, :]


def rotate_tokens(
    x: np.ndarray,
    config: RoPEConfig,
    scheme: ScalingScheme,
    positions: np.ndarray,
) -> np.ndarray:
    """Rotate a batch of per-token head vectors.

    x: (n_tokens, n_heads, head_dim), positions: (n_tokens,). Every head of
    token t is rotated by the scaled phases at positions[t].
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != config.head_dim:
        raise ValueError(
            f"expected shape (n_tokens, n_heads, {config.head_dim}), got {x.shape}"
        )
    phases = phase_table(config, scheme, positions)[:, None, :]  # (N, 1, P)
    a, b = split_pairs(x, config.pairing)
    c, s = np.cos(phases), np.sin(phases)
    return merge_pairs(a * c - b * s, a * s + b * c, config.pairing)
