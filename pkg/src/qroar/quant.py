"""Round-to-nearest integer quantization with symmetric per-structure scales.

The quantizer maps a float tensor to integer codes c = clip(round(x / s), -qmax,
qmax) with qmax = 2**(bits-1) - 1 and one scale s = max|x| / qmax per group.
Three groupings are supported: one scale for the whole tensor, one per output
row (axis 0), or one per contiguous group of columns within a row.

Rounding is round-half-to-even (np.round), matching IEEE default rounding and
making the quantizer a pure function of the bits pattern. The raw scale
max|x|/qmax is not always a fixed point of requantization in float64, so it is
stabilized by passing it through s -> fl(fl(qmax*s)/qmax) once; after that,
dequantize followed by quantize reproduces codes and scales bit-exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GRANULARITIES = ("per_tensor", "per_output_channel", "per_group")


@dataclass(frozen=True)
class QuantSpec:
    """Bit width and scale granularity of a symmetric integer quantizer."""

    bits: int
    granularity: str = "per_output_channel"
    group_size: int | None = None
    symmetric: bool = True

    def __post_init__(self) -> None:
        if not (isinstance(self.bits, int) and 2 <= self.bits <= 8):
            raise ValueError(f"bits must be an integer in [2, 8], got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(
                f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}"
            )
        if self.granularity == "per_group":
            if not (isinstance(self.group_size, int) and self.group_size > 0):
                raise ValueError(
                    f"per_group requires a positive integer group_size, got {self.group_size}"
                )
        elif self.group_size is not None:
            raise ValueError(f"group_size only applies to per_group, got {self.group_size}")

    @property
    def qmax(self) -> int:
        """Largest representable code magnitude, 2**(bits-1) - 1."""
        return (1 << (self.bits - 1)) - 1


@dataclass
class QuantizedTensor:
    """Integer codes plus the scales needed to dequantize them.

    codes has the same shape as the source tensor. scales has one entry per
    group: shape () for per_tensor, (d0,) for per_output_channel, and
    (*leading, n_groups) for per_group where n_groups = ceil(d_last /
    group_size).
    """

    codes: np.ndarray
    scales: np.ndarray
    spec: QuantSpec

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        if np.any(np.abs(self.codes) > self.spec.qmax):
            raise ValueError(f"codes exceed the {self.spec.bits}-bit range +-{self.spec.qmax}")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise ValueError("scales must be finite and positive")


def _stabilized_scales(raw: np.ndarray, qmax: int) -> np.ndarray:
    """Make each scale a fixed point of s -> fl(fl(qmax*s)/qmax).

    One application suffices in practice; the loop is a cheap guarantee that
    the returned scales requantize to themselves exactly.
    """
    s = raw
    for _ in range(4):
        t = (qmax * s) / qmax
        if np.array_equal(t, s):
            return s
        s = t
    return s


def _group_layout(shape: tuple[int, ...], spec: QuantSpec) -> tuple[int, ...]:
    """Column widths of the per_group chunks along the last axis."""
    last = shape[-1]
    full, tail = divmod(last, spec.group_size)
    return (spec.group_size,) * full + ((tail,) if tail else ())


def quantize_rtn(weights: np.ndarray, spec: QuantSpec) -> QuantizedTensor:
    """Round-to-nearest quantization of a float tensor.

    All-zero groups get scale 1.0 and all-zero codes so that dequantization
    reproduces them exactly. Non-finite inputs are rejected.
    """
    if not spec.symmetric:
        raise NotImplementedError("asymmetric quantization is not implemented in v1")
    x = np.asarray(weights, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(x)):
        raise ValueError("weights contain non-finite values")
    qmax = spec.qmax

    if spec.granularity == "per_tensor":
        gmax = np.asarray(np.max(np.abs(x)), dtype=np.float64)
    elif spec.granularity == "per_output_channel":
        if x.ndim < 1:
            raise ValueError("per_output_channel needs at least one axis")
        gmax = np.abs(x).reshape(x.shape[0], -1).max(axis=1)
    else:  # per_group
        widths = _group_layout(x.shape, spec)
        rows = np.abs(x).reshape(-1, x.shape[-1])
        edges = np.cumsum((0,) + widths)
        gmax = np.stack(
            [rows[:, edges[j] : edges[j + 1]].max(axis=1) for j in range(len(widths))],
            axis=1,
        ).reshape(x.shape[:-1] + (len(widths),))

    scales = np.where(gmax == 0.0, 1.0, gmax / qmax)
    scales = _stabilized_scales(scales, qmax)

    if spec.granularity == "per_tensor":
        per_elem = scales
    elif spec.granularity == "per_output_channel":
        per_elem = scales.reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    else:
        per_elem = np.repeat(scales, _group_layout(x.shape, spec), axis=-1)

    codes = np.clip(np.round(x / per_elem), -qmax, qmax).astype(np.int32)
    return QuantizedTensor(codes=codes, scales=scales, spec=spec)


def scale_map(q: QuantizedTensor) -> np.ndarray:
    """Per-element scale array broadcast to the codes' shape."""
    spec = q.spec
    if spec.granularity == "per_tensor":
        return np.broadcast_to(q.scales, q.codes.shape)
    if spec.granularity == "per_output_channel":
        return np.broadcast_to(
            q.scales.reshape((q.codes.shape[0],) + (1,) * (q.codes.ndim - 1)), q.codes.shape
        )
    return np.repeat(q.scales, _group_layout(q.codes.shape, spec), axis=-1)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Map codes back to floats, codes * scale, as float64."""
    return q.codes.astype(np.float64) * scale_map(q)


def fake_quant(weights: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Quantize-dequantize in one step; the standard PTQ error model."""
    return dequantize(quantize_rtn(weights, spec))


def max_quant_error(spec: QuantSpec, scales: np.ndarray) -> np.ndarray:
    """Worst-case absolute rounding error per group, scale / 2.

    Holds for every in-range input because round-to-nearest lands within half
    a step; clipping never engages since max|x| maps to exactly qmax codes.
    """
    return np.asarray(scales, dtype=np.float64) / 2.0


def code_range(spec: QuantSpec) -> tuple[int, int]:
    """Inclusive integer code interval of the symmetric grid."""
    return -spec.qmax, spec.qmax


__all__ = [
    "GRANULARITIES",
    "QuantSpec",
    "QuantizedTensor",
    "quantize_rtn",
    "dequantize",
    "fake_quant",
    "scale_map",
    "max_quant_error",
    "code_range",
]


def _self_check() -> None:  # pragma: no cover
    """Quick interactive sanity run: python3 -m qroar.quant"""
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 16))
    for spec in (
        QuantSpec(4, "per_tensor"),
        QuantSpec(4),
        QuantSpec(4, "per_group", group_size=4),
    ):
        q = quantize_rtn(x, spec)
        y = dequantize(q)
        err = np.max(np.abs(x - y))
        bound = np.max(max_quant_error(spec, q.scales))
        print(f"{spec.granularity:>20}: max err {err:.6f} bound {bound:.6f}")
        assert err <= bound + 1e-12
    print("ok")


if __name__ == "__main__":  # pragma: no cover
    _self_check()
