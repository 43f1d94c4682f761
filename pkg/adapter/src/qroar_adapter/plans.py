"""Reading qroar plan files and expanding them into per-row weight factors.

A plan file is a version-1 JSON document with mode ("symmetric" or "shared"),
one positive scale per band, half-open [lo, hi) band ranges that tile the
rotary pairs of one head, the pairing convention, and rope geometry. This
module parses the subset the adapter needs and ignores provenance it does
not (search metadata stays untouched on disk).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

MODES = ("shared", "symmetric")
PAIRINGS = ("half_split", "interleaved")
PLAN_VERSION = 1


class PlanError(ValueError):
    """The document is not a usable version-1 plan."""


@dataclass(frozen=True)
class LoadedPlan:
    mode: str
    scales: tuple[float, ...]
    bands: tuple[tuple[int, int], ...]
    pairing: str
    head_dim: int

    @property
    def num_pairs(self) -> int:
        return self.head_dim // 2

    @property
    def num_bands(self) -> int:
        return len(self.bands)


def _validate(mode, scales, bands, pairing, head_dim) -> LoadedPlan:
    if mode not in MODES:
        raise PlanError(f"mode must be one of {MODES}, got {mode!r}")
    if pairing not in PAIRINGS:
        raise PlanError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")
    if not isinstance(head_dim, int) or head_dim < 2 or head_dim % 2:
        raise PlanError(f"head_dim must be a positive even integer, got {head_dim!r}")
    if not isinstance(scales, (list, tuple)) or not scales:
        raise PlanError("scales must be a non-empty list")
    clean_scales = []
    for g in scales:
        if not isinstance(g, (int, float)) or not math.isfinite(g) or g <= 0:
            raise PlanError(f"scales must be positive finite numbers, got {g!r}")
        clean_scales.append(float(g))
    if not isinstance(bands, (list, tuple)) or len(bands) != len(scales):
        raise PlanError("bands must be a list of [lo, hi) ranges, one per scale")
    clean_bands = []
    for rng in bands:
        if (
            not isinstance(rng, (list, tuple))
            or len(rng) != 2
            or not all(isinstance(edge, int) for edge in rng)
            or rng[0] >= rng[1]
        ):
            raise PlanError(f"band ranges must be [lo, hi) integer pairs, got {rng!r}")
        clean_bands.append((rng[0], rng[1]))
    num_pairs = head_dim // 2
    cursor = 0
    for lo, hi in clean_bands:
        if lo != cursor:
            raise PlanError(
                f"bands must tile the pairs contiguously; expected a band starting "
                f"at {cursor}, got [{lo}, {hi})"
            )
        cursor = hi
    if cursor != num_pairs:
        raise PlanError(
            f"bands cover pairs [0, {cursor}) but the head has {num_pairs} pairs"
        )
    return LoadedPlan(
        mode=mode,
        scales=tuple(clean_scales),
        bands=tuple(clean_bands),
        pairing=pairing,
        head_dim=head_dim,
    )


def plan_from_document(doc) -> LoadedPlan:
    if not isinstance(doc, dict):
        raise PlanError(f"plan document must be an object, got {type(doc).__name__}")
    version = doc.get("version")
    if version != PLAN_VERSION:
        raise PlanError(f"unsupported plan version {version!r}, expected {PLAN_VERSION}")
    for key in ("mode", "scales", "bands", "pairing", "rope"):
        if key not in doc:
            raise PlanError(f"plan document is missing {key!r}")
    rope = doc["rope"]
    if not isinstance(rope, dict) or "head_dim" not in rope:
        raise PlanError("plan rope metadata must carry head_dim")
    return _validate(doc["mode"], doc["scales"], doc["bands"], doc["pairing"], rope["head_dim"])


def load_plan(path: str) -> LoadedPlan:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise PlanError(f"{path} is not valid JSON: {exc.msg}") from exc
    return plan_from_document(doc)


def plan_from_wire(plan: dict, head_dim: int) -> LoadedPlan:
    """Build a plan from the protocol's eval payload for a known model head."""
    for key in ("mode", "scales", "bands", "pairing"):
        if key not in plan:
            raise PlanError(f"wire plan is missing {key!r}")
    return _validate(plan["mode"], plan["scales"], plan["bands"], plan["pairing"], head_dim)


def pair_rows(plan: LoadedPlan, pair: int) -> tuple[int, int]:
    """The two within-head rows a rotary pair occupies."""
    if plan.pairing == "half_split":
        return pair, pair + plan.num_pairs
    return 2 * pair, 2 * pair + 1


def row_factors(plan: LoadedPlan, num_rows: int, role: str) -> np.ndarray:
    """Per-row multiplicative factors for one projection tensor.

    Matches the plan producer's convention: the factor repeats across heads,
    query rows always get g, and key rows get g in shared mode and 1/g in
    symmetric mode.
    """
    if role not in ("q", "k"):
        raise ValueError(f"role must be 'q' or 'k', got {role!r}")
    if num_rows % plan.head_dim or num_rows == 0:
        raise ValueError(
            f"{num_rows} rows is not a positive multiple of head_dim {plan.head_dim}; "
            "the plan does not match this checkpoint"
        )
    num_heads = num_rows // plan.head_dim
    per_head = np.ones(plan.head_dim)
    for (lo, hi), scale in zip(plan.bands, plan.scales):
        g = float(scale)
        if role == "k":
            g = g if plan.mode == "shared" else 1.0 / g
        for pair in range(lo, hi):
            for row in pair_rows(plan, pair):
                per_head[row] *= g
    return np.tile(per_head, num_heads)
