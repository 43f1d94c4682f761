"""Log-frequency band partition of the rotary pair index range.

Because the pair frequencies follow a geometric law, equal-width intervals in
log-frequency correspond to equal-width intervals in pair index. A partition
into B bands is therefore the index split [floor(b*P/B), floor((b+1)*P/B)),
with band 0 holding the highest frequencies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rope import PAIRINGS


@dataclass(frozen=True)
class BandPartition:
    """Contiguous pair-index bands plus the frequencies they partition.

    bands are half-open [lo, hi) index ranges, ascending and disjoint,
    covering [0, P) exactly. freqs is the full descending frequency ladder,
    kept alongside so that band statistics need no rope config.
    """

    bands: tuple[tuple[int, int], ...]
    freqs: tuple[float, ...]

    def __post_init__(self) -> None:
        p = len(self.freqs)
        if p == 0:
            raise ValueError("freqs must be non-empty")
        for i, f in enumerate(self.freqs):
            if not (math.isfinite(f) and f > 0):
                raise ValueError(f"frequency {i} must be finite and positive, got {f}")
        for i in range(p - 1):
            if not self.freqs[i] > self.freqs[i + 1]:
                raise ValueError("frequencies must be strictly decreasing")
        if len(self.bands) == 0:
            raise ValueError("partition must contain at least one band")
        cursor = 0
        for b, (lo, hi) in enumerate(self.bands):
            if lo != cursor or hi <= lo:
                raise ValueError(
                    f"band {b} range [{lo}, {hi}) must continue at index {cursor} and be non-empty"
                )
            cursor = hi
        if cursor != p:
            raise ValueError(f"bands cover [0, {cursor}) but there are {p} pairs")

    @property
    def num_bands(self) -> int:
        return len(self.bands)

    @property
    def num_pairs(self) -> int:
        return len(self.freqs)

    def freq_array(self) -> np.ndarray:
        return np.asarray(self.freqs, dtype=np.float64)


def partition_log_freq(freqs: np.ndarray, num_bands: int) -> BandPartition:
    """Split a descending frequency ladder into num_bands equal log-width bands.

    Band boundaries fall at floor(b * P / num_bands); when num_bands does not
    divide P the earlier (higher-frequency) bands are the smaller ones.
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    if freqs.ndim != 1:
        raise ValueError(f"freqs must be 1d, got shape {freqs.shape}")
    p = freqs.shape[0]
    if not 1 <= num_bands <= p:
        raise ValueError(f"num_bands must be in [1, {p}], got {num_bands}")
    edges = [(b * p) // num_bands for b in range(num_bands + 1)]
    bands = tuple((edges[b], edges[b + 1]) for b in range(num_bands))
    return BandPartition(bands=bands, freqs=tuple(float(f) for f in freqs))


def band_freq_stats(partition: BandPartition, band_index: int) -> tuple[float, float, float]:
    """(band median, global minimum, median/global-minimum) frequencies.

    The median of an even-sized band is the geometric mean of its two middle
    frequencies, the natural average on a log-spaced ladder. The ratio is
    taken against the lowest frequency of the whole head, so high-frequency
    bands get large ratios (and then tight search windows) while the lowest
    band's ratio approaches 1.
    """
    if not 0 <= band_index < partition.num_bands:
        raise ValueError(f"band index {band_index} out of range [0, {partition.num_bands})")
    lo, hi = partition.bands[band_index]
    f = partition.freq_array()[lo:hi]
    n = hi - lo
    if n % 2 == 1:
        med = float(f[n // 2])
    else:
        med = float(math.sqrt(f[n // 2 - 1] * f[n // 2]))
    fmin = float(partition.freqs[-1])
    return med, fmin, med / fmin


def band_of_pair(partition: BandPartition, pair: int) -> int:
    """Index of the band containing a pair."""
    if not 0 <= pair < partition.num_pairs:
        raise ValueError(f"pair index {pair} out of range [0, {partition.num_pairs})")
    for b, (lo, hi) in enumerate(partition.bands):
        if lo <= pair < hi:
            return b
    raise AssertionError("partition invariant violated")  # unreachable


def band_rows(
    partition: BandPartition,
    band_index: int,
    pairing: str,
    head_dim: int,
    num_heads: int = 1,
) -> np.ndarray:
    """Projection-matrix row indices belonging to one band.

    For a stacked projection of shape (num_heads * head_dim, d_model) laid out
    head-major, each pair i of head h touches two rows: (h*head_dim + i,
    h*head_dim + i + head_dim/2) under half_split, (h*head_dim + 2i,
    h*head_dim + 2i + 1) under interleaved. Returns sorted unique indices.
    """
    if pairing not in PAIRINGS:
        raise ValueError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")
    if head_dim != 2 * partition.num_pairs:
        raise ValueError(
            f"head_dim must be {2 * partition.num_pairs} for this partition, got {head_dim}"
        )
    if num_heads < 1:
        raise ValueError(f"num_heads must be >= 1, got {num_heads}")
    if not 0 <= band_index < partition.num_bands:
        raise ValueError(f"band index {band_index} out of range [0, {partition.num_bands})")
    lo, hi = partition.bands[band_index]
    pairs = np.arange(lo, hi)
    if pairing == "half_split":
        within = np.concatenate([pairs, pairs + partition.num_pairs])
    else:
        within = np.concatenate([2 * pairs, 2 * pairs + 1])
    rows = (np.arange(num_heads)[:, None] * head_dim + within[None, :]).ravel()
    return np.sort(rows)
