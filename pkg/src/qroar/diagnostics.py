"""Interpolation pressure and tail inflation diagnostics.

Two complementary signals localize where position interpolation and
quantization interact:

* Interpolation pressure IP_i = omega_i * f(D) / s_i**2 measures how
  sensitive the phase error of pair i at displacement D is to its
  interpolation factor, |d eps_i / d s_i|. High-frequency pairs under strong
  compression dominate.

* Tail inflation ratios compare upper quantiles of magnitudes between a long
  evaluation context and the short training-window context. TIR_W looks at
  pre-rotation projection rows |w_r . h|; TIR_A looks at the post-rotation
  infinity norm of each rotary pair, with the scaled phase in the numerator
  and the unscaled phase on the same samples in the denominator. Ratios near
  1 mean the long context adds no new dynamic range for the quantizer to
  absorb; large ratios flag rows and pairs whose tails inflate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bands import BandPartition, band_rows
from .rope import RoPEConfig, ScalingScheme, pair_frequencies, rotate_pairs, warp_position

DEFAULT_EPS = 0.01


@dataclass
class ActivationCache:
    """Hidden states and rotary pair samples for one (short, long) context pair.

    Hidden rows are run-major: n_runs consecutive blocks of length tokens,
    token t of run r at row r * length + t. Pair samples are pooled over
    tokens and heads; pair_values[i] holds n samples of the 2d pre-rotation
    value of pair i, with pair_positions giving each sample's token position.

    min_samples is the floor on per-side sample counts needed for stable
    upper quantiles.
    """

    short_hidden: np.ndarray
    long_hidden: np.ndarray
    short_pair_values: np.ndarray
    short_pair_positions: np.ndarray
    long_pair_values: np.ndarray
    long_pair_positions: np.ndarray
    short_length: int
    long_length: int
    n_short_runs: int = 1
    n_long_runs: int = 1
    scheme_id: str = ""
    min_samples: int = 1000

    def __post_init__(self) -> None:
        for name in (
            "short_hidden",
            "long_hidden",
            "short_pair_values",
            "short_pair_positions",
            "long_pair_values",
            "long_pair_positions",
        ):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (0 < self.short_length < self.long_length):
            raise ValueError(
                f"need 0 < short_length < long_length, got {self.short_length}, {self.long_length}"
            )
        if self.short_hidden.ndim != 2 or self.long_hidden.ndim != 2:
            raise ValueError("hidden arrays must be 2d (n_tokens, d_model)")
        if self.short_hidden.shape[1] != self.long_hidden.shape[1]:
            raise ValueError("short and long hidden widths differ")
        if self.short_hidden.shape[0] != self.n_short_runs * self.short_length:
            raise ValueError("short_hidden rows must equal n_short_runs * short_length")
        if self.long_hidden.shape[0] != self.n_long_runs * self.long_length:
            raise ValueError("long_hidden rows must equal n_long_runs * long_length")
        for side, vals, pos, length in (
            ("short", self.short_pair_values, self.short_pair_positions, self.short_length),
            ("long", self.long_pair_values, self.long_pair_positions, self.long_length),
        ):
            if vals.ndim != 3 or vals.shape[2] != 2:
                raise ValueError(f"{side}_pair_values must have shape (P, n, 2)")
            if pos.shape != (vals.shape[1],):
                raise ValueError(f"{side}_pair_positions must match the sample axis")
            if pos.size and (pos.min() < 0 or pos.max() >= length):
                raise ValueError(f"{side} pair positions must lie in [0, {length})")
        if self.short_pair_values.shape[0] != self.long_pair_values.shape[0]:
            raise ValueError("short and long sides disagree on the number of pairs")
        counts = (
            self.short_hidden.shape[0],
            self.long_hidden.shape[0],
            self.short_pair_values.shape[1],
            self.long_pair_values.shape[1],
        )
        if min(counts) < self.min_samples:
            raise ValueError(
                f"need at least {self.min_samples} samples per side for quantile "
                f"stability, got {counts}"
            )
        for name in ("short_hidden", "long_hidden", "short_pair_values", "long_pair_values"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def num_pairs(self) -> int:
        return self.short_pair_values.shape[0]

    @property
    def d_model(self) -> int:
        return self.short_hidden.shape[1]


def interpolation_pressure(
    config: RoPEConfig, scheme: ScalingScheme, displacement: float
) -> np.ndarray:
    """Per-pair sensitivity |d eps_i / d s_i| = omega_i * f(D) / s_i**2.

    eps_i is the phase deviation of the scaled rotation at displacement D, so
    this is the exact magnitude of its derivative in the interpolation factor.
    """
    if scheme.num_pairs != config.num_pairs:
        raise ValueError(
            f"scheme has {scheme.num_pairs} scales but config has {config.num_pairs} pairs"
        )
    if not (math.isfinite(displacement) and displacement > 0):
        raise ValueError(f"displacement must be a positive real, got {displacement}")
    s = scheme.scale_array()
    return pair_frequencies(config) * warp_position(scheme, displacement) / (s * s)


def quantile(samples: np.ndarray, level: float) -> float:
    """Linear-interpolation quantile of a 1d sample set.

    With sorted samples a_0 <= ... <= a_(n-1) and h = level * (n - 1), returns
    a_floor(h) + (h - floor(h)) * (a_floor(h)+1 - a_floor(h)); level 1.0 is
    the maximum. Matches numpy's default method; kept explicit because tail
    ratios are contractually defined against this formula.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("quantile of an empty sample set")
    if not (0.0 < level <= 1.0):
        raise ValueError(f"level must be in (0, 1], got {level}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite values")
    a = np.sort(x)
    h = level * (a.size - 1)
    lo = int(math.floor(h))
    if lo == a.size - 1:
        return float(a[-1])
    frac = h - lo
    return float(a[lo] + frac * (a[lo + 1] - a[lo]))


def tir_weight(
    weight_rows: np.ndarray, cache: ActivationCache, eps: float = DEFAULT_EPS
) -> np.ndarray:
    """Per-row tail inflation of pre-rotation projections.

    For each projection row w_r, the ratio of the (1-eps) quantile of
    |w_r . h| over long-context hidden states to the same quantile over the
    short side. Returns one ratio per row.
    """
    _check_eps(eps)
    w = np.asarray(weight_rows, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"weight_rows must be 2d (rows, d_model), got shape {w.shape}")
    if w.shape[1] != cache.d_model:
        raise ValueError(
            f"weight rows have width {w.shape[1]} but the cache has d_model {cache.d_model}"
        )
    level = 1.0 - eps
    long_abs = np.abs(cache.long_hidden @ w.T)  # (n_long, rows)
    short_abs = np.abs(cache.short_hidden @ w.T)
    out = np.empty(w.shape[0])
    for r in range(w.shape[0]):
        denom = quantile(short_abs[:, r], level)
        if denom == 0.0:
            raise ValueError(
                f"short-context quantile of row {r} is zero; the tail ratio is undefined"
            )
        out[r] = quantile(long_abs[:, r], level) / denom
    return out


def tir_activation(
    cache: ActivationCache,
    config: RoPEConfig,
    scheme: ScalingScheme,
    eps: float = DEFAULT_EPS,
) -> np.ndarray:
    """Per-pair tail inflation of post-rotation magnitudes.

    Long-side pair samples are rotated twice: by the scaled phase
    omega_i * f(m) / s_i and by the unscaled phase omega_i * m, both at each
    sample's own position m. The ratio of the (1-eps) quantiles of the
    rotated infinity norms (scaled over unscaled) is pooled over all cached
    positions. With the identity scheme the two rotations coincide and every
    ratio is exactly 1.
    """
    _check_eps(eps)
    if scheme.num_pairs != config.num_pairs:
        raise ValueError(
            f"scheme has {scheme.num_pairs} scales but config has {config.num_pairs} pairs"
        )
    if cache.num_pairs != config.num_pairs:
        raise ValueError(
            f"cache has {cache.num_pairs} pairs but config has {config.num_pairs}"
        )
    level = 1.0 - eps
    freqs = pair_frequencies(config)
    positions = cache.long_pair_positions
    out = np.empty(config.num_pairs)
    for i in range(config.num_pairs):
        u = cache.long_pair_values[i]
        scaled = rotate_pairs(u, freqs[i] * positions / scheme.scales[i])
        unscaled = rotate_pairs(u, freqs[i] * positions)
        num = quantile(np.abs(scaled).max(axis=-1), level)
        den = quantile(np.abs(unscaled).max(axis=-1), level)
        if den == 0.0:
            raise ValueError(
                f"unscaled quantile of pair {i} is zero; the tail ratio is undefined"
            )
        out[i] = num / den
    return out


def tir_activation_curves(
    cache: ActivationCache,
    config: RoPEConfig,
    scheme: ScalingScheme,
    eps: float = DEFAULT_EPS,
    num_bins: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Position-resolved view of tir_activation for inspection.

    Long positions are split into num_bins contiguous bins and the quantile
    ratio computed within each. Returns (bin_edges, ratios) with ratios of
    shape (P, num_bins); bins with an all-zero denominator yield nan rather
    than raising, since sparse bins are expected at the far tail.
    """
    _check_eps(eps)
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    level = 1.0 - eps
    freqs = pair_frequencies(config)
    positions = cache.long_pair_positions
    edges = np.linspace(0.0, float(cache.long_length), num_bins + 1)
    ratios = np.full((config.num_pairs, num_bins), np.nan)
    for j in range(num_bins):
        mask = (positions >= edges[j]) & (positions < edges[j + 1])
        if not mask.any():
            continue
        m = positions[mask]
        for i in range(config.num_pairs):
            u = cache.long_pair_values[i][mask]
            scaled = rotate_pairs(u, freqs[i] * m / scheme.scales[i])
            unscaled = rotate_pairs(u, freqs[i] * m)
            den = quantile(np.abs(unscaled).max(axis=-1), level)
            if den > 0.0:
                ratios[i, j] = quantile(np.abs(scaled).max(axis=-1), level) / den
    return edges, ratios


@dataclass
class DiagnosticsReport:
    """Band-aggregated diagnostics driving the rescale search.

    Per-band entries are maxima over the band's members: ip over pair
    pressures, tir_w over the rows the band touches in W_Q, tir_a over pair
    ratios. Per-pair vectors are kept for inspection; extras holds optional
    serialized attachments (position curves).
    """

    partition: BandPartition
    ip_per_pair: np.ndarray
    tir_a_per_pair: np.ndarray
    band_ip: np.ndarray
    band_tir_w: np.ndarray
    band_tir_a: np.ndarray
    eps: float
    displacement: float
    pairing: str
    num_heads: int
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        b = self.partition.num_bands
        p = self.partition.num_pairs
        self.ip_per_pair = np.asarray(self.ip_per_pair, dtype=np.float64)
        self.tir_a_per_pair = np.asarray(self.tir_a_per_pair, dtype=np.float64)
        self.band_ip = np.asarray(self.band_ip, dtype=np.float64)
        self.band_tir_w = np.asarray(self.band_tir_w, dtype=np.float64)
        self.band_tir_a = np.asarray(self.band_tir_a, dtype=np.float64)
        if self.ip_per_pair.shape != (p,) or self.tir_a_per_pair.shape != (p,):
            raise ValueError(f"per-pair vectors must have shape ({p},)")
        for name in ("band_ip", "band_tir_w", "band_tir_a"):
            v = getattr(self, name)
            if v.shape != (b,):
                raise ValueError(f"{name} must have shape ({b},), got {v.shape}")
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise ValueError(f"{name} entries must be finite and positive")


def aggregate_report(
    partition: BandPartition,
    ip: np.ndarray,
    tir_w_rows: np.ndarray,
    tir_a: np.ndarray,
    *,
    pairing: str,
    num_heads: int,
    eps: float,
    displacement: float,
    extras: dict | None = None,
) -> DiagnosticsReport:
    """Reduce per-pair and per-row diagnostics to per-band maxima.

    tir_w_rows must cover the full stacked W_Q (num_heads * head_dim rows);
    each band takes the max over the rows band_rows() assigns to it.
    """
    ip = np.asarray(ip, dtype=np.float64)
    tir_a = np.asarray(tir_a, dtype=np.float64)
    tir_w_rows = np.asarray(tir_w_rows, dtype=np.float64)
    p = partition.num_pairs
    head_dim = 2 * p
    if ip.shape != (p,) or tir_a.shape != (p,):
        raise ValueError(f"ip and tir_a must have shape ({p},)")
    if tir_w_rows.shape != (num_heads * head_dim,):
        raise ValueError(
            f"tir_w_rows must cover all {num_heads * head_dim} projection rows, "
            f"got shape {tir_w_rows.shape}"
        )
    band_ip = np.empty(partition.num_bands)
    band_tw = np.empty(partition.num_bands)
    band_ta = np.empty(partition.num_bands)
    for b, (lo, hi) in enumerate(partition.bands):
        band_ip[b] = ip[lo:hi].max()
        band_ta[b] = tir_a[lo:hi].max()
        rows = band_rows(partition, b, pairing, head_dim, num_heads)
        band_tw[b] = tir_w_rows[rows].max()
    return DiagnosticsReport(
        partition=partition,
        ip_per_pair=ip,
        tir_a_per_pair=tir_a,
        band_ip=band_ip,
        band_tir_w=band_tw,
        band_tir_a=band_ta,
        eps=eps,
        displacement=displacement,
        pairing=pairing,
        num_heads=num_heads,
        extras=dict(extras or {}),
    )


def compute_report(
    bundle,
    num_bands: int,
    eps: float = DEFAULT_EPS,
    displacement: float | None = None,
    with_curves: bool = False,
) -> DiagnosticsReport:
    """Run the full diagnostic pass on a model bundle.

    Uses the longest cached context. displacement defaults to that context's
    last position (long_length - 1), the largest displacement the cache can
    witness. bundle needs .w_q, .rope, .scheme, .num_heads and .caches.
    """
    from .bands import partition_log_freq  # local alias for readability

    if not bundle.caches:
        raise ValueError("bundle has no activation caches")
    longest = max(bundle.caches)
    cache = bundle.caches[longest]
    config: RoPEConfig = bundle.rope
    scheme: ScalingScheme = bundle.scheme
    if displacement is None:
        displacement = float(cache.long_length - 1)
    partition = partition_log_freq(pair_frequencies(config), num_bands)
    ip = interpolation_pressure(config, scheme, displacement)
    tw = tir_weight(bundle.w_q, cache, eps)
    ta = tir_activation(cache, config, scheme, eps)
    extras = {}
    if with_curves:
        edges, curves = tir_activation_curves(cache, config, scheme, eps)
        extras["tir_a_curves"] = {"bin_edges": edges.tolist(), "ratios": curves.tolist()}
    return aggregate_report(
        partition,
        ip,
        tw,
        ta,
        pairing=config.pairing,
        num_heads=bundle.num_heads,
        eps=eps,
        displacement=displacement,
        extras=extras,
    )


def _check_eps(eps: float) -> None:
    if not (0.0 < eps < 1.0):
        raise ValueError(f"eps must be in (0, 1), got {eps}")
