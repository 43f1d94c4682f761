"""Band-wise weight-rescale search.

The search assigns one multiplicative factor g_b per frequency band to the
band's rows of W_Q and W_K, then picks the factors minimizing a long-context
degradation objective under quantization. Two application modes exist:

* symmetric: W_Q rows scaled by g_b, W_K rows by 1/g_b. Full-precision logits
  are exactly invariant (the rotation commutes with scalars, so q.k picks up
  g_b * 1/g_b = 1); only the quantizer sees the difference.
* shared: both W_Q and W_K rows scaled by g_b, inflating band logits by
  g_b**2. Used as the fallback when the symmetric objective misbehaves.

Per band, the candidate factors live in a multiplicative window around a
center pulled toward kappa / TIR_W(b), with the window radius gamma_b shrunk
for wide bands so that intra-band phase spread stays bounded. Every window
contains 1.0, so the identity plan is always a candidate and the search can
never return something worse than doing nothing.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .bands import BandPartition, band_freq_stats, band_rows
from .rope import PAIRINGS

logger = logging.getLogger("qroar.search")

MODES = ("shared", "symmetric")
STRATEGIES = ("coordinate", "joint")
GLOBAL_CLAMP = (0.25, 4.0)


class SearchError(RuntimeError):
    """Search failed; the message carries pass/band/candidate context."""


class NonFiniteObjective(SearchError):
    """The evaluator returned nan or inf for a candidate plan."""


class SearchStageError(RuntimeError):
    """A pipeline stage failed; .stage names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"search pipeline failed at stage '{stage}': {message}")
        self.stage = stage


@dataclass(frozen=True)
class SearchConfig:
    """Knobs of the band-rescale search.

    lengths/length_weights: evaluation contexts and their objective weights;
    both empty means "use the bundle's cached lengths, weighted
    proportionally to length". num_bands and grid_points are permissive here;
    the CLI enforces the supported envelope (B in {6, 8}, K in [5, 9]) unless
    overridden.
    """

    num_bands: int = 8
    grid_points: int = 7
    strategy: str = "coordinate"
    kappa: float = 1.2
    tau: float = 0.3
    eta: float = 1e-4
    max_passes: int = 3
    lengths: tuple[int, ...] = ()
    length_weights: tuple[float, ...] = ()
    global_clamp: tuple[float, float] = GLOBAL_CLAMP
    joint_budget: int = 100_000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_bands < 1:
            raise ValueError(f"num_bands must be >= 1, got {self.num_bands}")
        if self.grid_points < 2:
            raise ValueError(f"grid_points must be >= 2, got {self.grid_points}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 1.0 <= self.kappa <= 1.3:
            raise ValueError(f"kappa must be in [1.0, 1.3], got {self.kappa}")
        if not 0.2 <= self.tau <= 0.5:
            raise ValueError(f"tau must be in [0.2, 0.5], got {self.tau}")
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise ValueError(f"eta must be a finite real >= 0, got {self.eta}")
        if self.max_passes < 1:
            raise ValueError(f"max_passes must be >= 1, got {self.max_passes}")
        lo, hi = self.global_clamp
        if not (0 < lo <= 1.0 <= hi and math.isfinite(hi)):
            raise ValueError(f"global_clamp must satisfy 0 < lo <= 1 <= hi, got {self.global_clamp}")
        if any(length <= 0 for length in self.lengths):
            raise ValueError(f"lengths must be positive, got {self.lengths}")
        if self.length_weights:
            if len(self.length_weights) != len(self.lengths):
                raise ValueError("length_weights must match lengths")
            if any(not (math.isfinite(w) and w > 0) for w in self.length_weights):
                raise ValueError("length_weights must be finite and positive")
        if self.joint_budget < 1:
            raise ValueError(f"joint_budget must be >= 1, got {self.joint_budget}")


def gamma_bound(omega_ratio: float, tau: float) -> float:
    """Window radius gamma = 1 + tau / (1 + ln(omega_med / omega_min)).

    omega_ratio compares the band's median frequency against the lowest
    frequency of the whole head. High-frequency bands (large ratio) spin
    fast and are the most sensitive to a shared rescale, so they get tight
    windows; the slowest band's ratio approaches 1 and its radius tops out
    at 1 + tau.
    """
    if not (math.isfinite(omega_ratio) and omega_ratio >= 1.0):
        raise ValueError(f"omega_ratio must be >= 1, got {omega_ratio}")
    if not 0.2 <= tau <= 0.5:
        raise ValueError(f"tau must be in [0.2, 0.5], got {tau}")
    return 1.0 + tau / (1.0 + math.log(omega_ratio))


def band_window(
    gamma: float,
    tir_w: float,
    kappa: float,
    global_clamp: tuple[float, float] = GLOBAL_CLAMP,
) -> tuple[float, float]:
    """Multiplicative search window [c/gamma, c*gamma] for one band.

    The center c = kappa / tir_w counteracts observed tail inflation (a band
    whose tails inflated by TIR_W wants its rows shrunk by about that much),
    clamped into [1/gamma, gamma] so the window always contains 1.0, then the
    window is intersected with the global clamp.
    """
    if not (math.isfinite(gamma) and gamma > 1.0):
        raise ValueError(f"gamma must be > 1, got {gamma}")
    if not (math.isfinite(tir_w) and tir_w > 0):
        raise ValueError(f"tir_w must be positive, got {tir_w}")
    if not 1.0 <= kappa <= 1.3:
        raise ValueError(f"kappa must be in [1.0, 1.3], got {kappa}")
    clo, chi = global_clamp
    if not (0 < clo <= 1.0 <= chi):
        raise ValueError(f"global_clamp must satisfy lo <= 1 <= hi, got {global_clamp}")
    center = min(max(kappa / tir_w, 1.0 / gamma), gamma)
    lo = max(center / gamma, clo)
    hi = min(center * gamma, chi)
    # rounding of center/gamma and center*gamma can land one ulp past 1.0;
    # force containment so the identity factor is always reachable
    lo = min(lo, 1.0)
    hi = max(hi, 1.0)
    if not lo <= hi:
        raise ValueError(f"window [{lo}, {hi}] is empty after clamping")
    return lo, hi


def build_grid(window: tuple[float, float], num_points: int) -> np.ndarray:
    """num_points log-spaced candidates in the window, with exactly 1.0 present.

    When the window contains 1.0 (guaranteed for windows from band_window),
    the grid point nearest to 1.0 in log distance is replaced by 1.0 so the
    identity factor is always a literal candidate. Returned ascending.
    num_points == 1 is allowed only for a degenerate window (lo == hi).
    """
    lo, hi = window
    if not (0 < lo <= hi and math.isfinite(hi)):
        raise ValueError(f"window must satisfy 0 < lo <= hi, got {window}")
    if num_points < 1 or (num_points == 1 and lo != hi):
        raise ValueError(f"num_points must be >= 2 for a non-degenerate window, got {num_points}")
    if num_points == 1:
        grid = np.asarray([lo], dtype=np.float64)
    else:
        grid = np.geomspace(lo, hi, num_points)
    if lo <= 1.0 <= hi:
        idx = int(np.argmin(np.abs(np.log(grid))))
        grid = grid.copy()
        grid[idx] = 1.0
    return grid


@dataclass
class ScalePlan:
    """Per-band multiplicative factors plus how to apply them.

    scales[b] multiplies the band's W_Q rows; W_K rows get scales[b] in
    shared mode and 1/scales[b] in symmetric mode. provenance carries search
    metadata (windows, objective values, rope geometry) and is round-tripped
    by the plan file format.
    """

    mode: str
    scales: np.ndarray
    partition: BandPartition
    pairing: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")
        self.scales = np.asarray(self.scales, dtype=np.float64)
        if self.scales.shape != (self.partition.num_bands,):
            raise ValueError(
                f"need one scale per band ({self.partition.num_bands}), got shape {self.scales.shape}"
            )
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise ValueError("scales must be finite and positive")
        windows = self.provenance.get("search", {}).get("windows")
        if windows is not None:
            for b, (g, (lo, hi)) in enumerate(zip(self.scales, windows)):
                if not (lo - 1e-12 <= g <= hi + 1e-12):
                    raise ValueError(f"scale {g} of band {b} lies outside its window [{lo}, {hi}]")

    @property
    def num_bands(self) -> int:
        return self.partition.num_bands

    @classmethod
    def identity(
        cls, partition: BandPartition, pairing: str, mode: str = "symmetric"
    ) -> "ScalePlan":
        return cls(mode=mode, scales=np.ones(partition.num_bands), partition=partition, pairing=pairing)


def apply_scale_plan(
    w_q: np.ndarray, w_k: np.ndarray, plan: ScalePlan
) -> tuple[np.ndarray, np.ndarray]:
    """Rescale projection rows band by band; returns new arrays.

    Projections are stacked head-major, shape (num_heads * head_dim, d_model)
    with head_dim = 2 * P from the plan's partition. Query and key may have
    different head counts (grouped-query attention).
    """
    w_q = np.array(w_q, dtype=np.float64)
    w_k = np.array(w_k, dtype=np.float64)
    head_dim = 2 * plan.partition.num_pairs
    for name, w in (("w_q", w_q), ("w_k", w_k)):
        if w.ndim != 2 or w.shape[0] % head_dim != 0 or w.shape[0] == 0:
            raise ValueError(
                f"{name} must be 2d with rows a positive multiple of head_dim {head_dim}, "
                f"got shape {w.shape}"
            )
    heads_q = w_q.shape[0] // head_dim
    heads_k = w_k.shape[0] // head_dim
    for b in range(plan.num_bands):
        g = plan.scales[b]
        w_q[band_rows(plan.partition, b, plan.pairing, head_dim, heads_q)] *= g
        gk = g if plan.mode == "shared" else 1.0 / g
        w_k[band_rows(plan.partition, b, plan.pairing, head_dim, heads_k)] *= gk
    return w_q, w_k


class _Memo:
    """Memoized plan evaluator; counts only actual backend calls."""

    def __init__(self, evaluate, partition: BandPartition, pairing: str, mode: str):
        self._evaluate = evaluate
        self._partition = partition
        self._pairing = pairing
        self._mode = mode
        self._cache: dict[tuple[float, ...], float] = {}
        self.evaluations = 0

    def plan_for(self, scales: np.ndarray) -> ScalePlan:
        return ScalePlan(
            mode=self._mode,
            scales=np.asarray(scales, dtype=np.float64).copy(),
            partition=self._partition,
            pairing=self._pairing,
        )

    def __call__(self, scales: np.ndarray, context: str) -> float:
        key = tuple(float(g) for g in scales)
        if key in self._cache:
            return self._cache[key]
        try:
            value = float(self._evaluate(self.plan_for(scales)))
        except SearchError:
            raise
        except Exception as exc:
            raise SearchError(f"evaluator failed at {context} with scales {key}: {exc}") from exc
        self.evaluations += 1
        logger.info("eval %d %s scales=%s objective=%.8g", self.evaluations, context, key, value)
        if not math.isfinite(value):
            raise NonFiniteObjective(f"objective is {value} at {context} with scales {key}")
        self._cache[key] = value
        return value


def _tie_key(objective: float, g: float) -> tuple[float, float, float]:
    # prefer lower objective, then factors closest to 1, then the smaller one
    return (objective, abs(g - 1.0), g)


def coordinate_search(
    evaluate,
    grids: list[np.ndarray],
    config: SearchConfig,
    partition: BandPartition,
    pairing: str,
    mode: str = "symmetric",
    band_order: np.ndarray | None = None,
) -> ScalePlan:
    """Greedy per-band descent over the candidate grids.

    Starts from the identity plan and sweeps bands in band_order (default:
    given order), replacing each band's factor with the grid argmin while the
    others stay fixed. Repeated evaluations of the same plan hit a memo, so
    the evaluation counter stays within max_passes * B * K when every grid
    contains the current factors (true whenever grids come from build_grid).
    Stops early when a full pass improves the objective by less than eta.

    The returned plan's objective never exceeds the identity objective as
    long as each grid contains 1.0.
    """
    if len(grids) != partition.num_bands:
        raise ValueError(f"need one grid per band, got {len(grids)} for {partition.num_bands}")
    order = np.arange(partition.num_bands) if band_order is None else np.asarray(band_order)
    if sorted(order.tolist()) != list(range(partition.num_bands)):
        raise ValueError(f"band_order must be a permutation of the bands, got {order}")
    memo = _Memo(evaluate, partition, pairing, mode)
    g = np.ones(partition.num_bands)
    best = memo(g, f"{mode}/coordinate identity")
    identity_objective = best
    passes_run = 0
    for pass_idx in range(config.max_passes):
        passes_run += 1
        pass_start = best
        for b in order:
            candidates = []
            for cand in grids[b]:
                trial = g.copy()
                trial[b] = cand
                obj = memo(trial, f"{mode}/coordinate pass={pass_idx} band={b} g={cand:.6g}")
                candidates.append((cand, obj))
            winner, best = min(candidates, key=lambda t: _tie_key(t[1], t[0]))
            g[b] = winner
        if pass_start - best < config.eta:
            break
    plan = memo.plan_for(g)
    plan.provenance["search"] = {
        "strategy": "coordinate",
        "objective_value": best,
        "identity_objective": identity_objective,
        "evaluations": memo.evaluations,
        "passes": passes_run,
    }
    return plan


def joint_search(
    evaluate,
    grids: list[np.ndarray],
    config: SearchConfig,
    partition: BandPartition,
    pairing: str,
    mode: str = "symmetric",
) -> ScalePlan:
    """Exhaustive search over the grid product, for small B * K only.

    Ties break toward the plan with the smallest total log-distance from
    identity, then lexicographically. Refuses products beyond
    config.joint_budget.
    """
    if len(grids) != partition.num_bands:
        raise ValueError(f"need one grid per band, got {len(grids)} for {partition.num_bands}")
    total = math.prod(len(grid) for grid in grids)
    if total > config.joint_budget:
        raise ValueError(
            f"joint search would evaluate {total} plans, over the budget {config.joint_budget}"
        )
    memo = _Memo(evaluate, partition, pairing, mode)
    best_key = None
    best_g = None
    for combo in itertools.product(*[list(map(float, grid)) for grid in grids]):
        g = np.asarray(combo)
        obj = memo(g, f"{mode}/joint")
        key = (obj, float(np.sum(np.abs(np.log(g)))), combo)
        if best_key is None or key < best_key:
            best_key = key
            best_g = g
    plan = memo.plan_for(best_g)
    plan.provenance["search"] = {
        "strategy": "joint",
        "objective_value": best_key[0],
        "identity_objective": memo(np.ones(partition.num_bands), f"{mode}/joint identity"),
        "evaluations": memo.evaluations,
        "passes": 1,
    }
    return plan


def run_qroar(bundle, report, config: SearchConfig, evaluate=None) -> ScalePlan:
    """Windows, grids, search, fallback: the full calibration pipeline.

    bundle supplies the model and caches, report the band diagnostics,
    config the knobs. evaluate maps a ScalePlan to an objective value; None
    builds the built-in quantized-logit-distortion evaluator. Tries the
    symmetric mode first and falls back to shared if the symmetric search
    yields a non-finite objective or fails to hold the never-worse
    invariant. Raises SearchStageError with the failing stage's name.
    """
    partition: BandPartition = report.partition
    stage = "validate"
    try:
        if partition.num_bands != config.num_bands:
            raise ValueError(
                f"report has {partition.num_bands} bands but config wants {config.num_bands}"
            )
        lengths = (
            tuple(config.lengths)
            or tuple(getattr(bundle, "eval_lengths", ()))
            or tuple(sorted(bundle.caches))
        )
        if not any(length > bundle.rope.train_window for length in lengths):
            raise ValueError(
                f"need at least one evaluation length beyond the training window "
                f"{bundle.rope.train_window}, got {lengths}"
            )

        stage = "band-windows"
        windows = []
        gammas = []
        grids = []
        for b in range(partition.num_bands):
            _, _, ratio = band_freq_stats(partition, b)
            gamma = gamma_bound(ratio, config.tau)
            window = band_window(gamma, float(report.band_tir_w[b]), config.kappa, config.global_clamp)
            gammas.append(gamma)
            windows.append(window)
            grids.append(build_grid(window, config.grid_points))
            logger.info(
                "band %d: gamma=%.6g tir_w=%.6g window=[%.6g, %.6g]",
                b, gamma, report.band_tir_w[b], window[0], window[1],
            )

        stage = "band-order"
        order = np.argsort(-report.band_ip, kind="stable")

        stage = "evaluator"
        evaluator_kind = "external"
        if evaluate is None:
            from .evaluator import LogitDistortionEvaluator, ObjectiveSpec

            weights = tuple(config.length_weights) or ()
            spec = ObjectiveSpec(
                lengths=lengths,
                weights=weights or ObjectiveSpec.proportional_weights(lengths),
                seed=config.seed,
            )
            evaluate = LogitDistortionEvaluator(bundle, spec)
            evaluator_kind = "logit_mse"

        def run(mode: str) -> ScalePlan:
            if config.strategy == "coordinate":
                return coordinate_search(
                    evaluate, grids, config, partition, report.pairing, mode, band_order=order
                )
            return joint_search(evaluate, grids, config, partition, report.pairing, mode)

        stage = "search-symmetric"
        fallback = False
        try:
            plan = run("symmetric")
            meta = plan.provenance["search"]
            if meta["objective_value"] > meta["identity_objective"]:
                raise NonFiniteObjective(
                    f"symmetric search ended above identity "
                    f"({meta['objective_value']} > {meta['identity_objective']})"
                )
        except NonFiniteObjective as exc:
            stage = "search-shared"
            logger.warning("symmetric search unstable (%s); falling back to shared mode", exc)
            fallback = True
            plan = run("shared")

        stage = "finalize"
        meta = plan.provenance["search"]
        meta.update(
            {
                "kappa": config.kappa,
                "tau": config.tau,
                "B": config.num_bands,
                "K": config.grid_points,
                "eta": config.eta,
                "evaluator": evaluator_kind,
                "seed": config.seed,
                "fallback": fallback,
                "windows": [[float(lo), float(hi)] for lo, hi in windows],
                "gamma": [float(gm) for gm in gammas],
                "lengths": [int(length) for length in lengths],
            }
        )
        plan.provenance["rope"] = {
            "base": float(bundle.rope.base),
            "head_dim": int(bundle.rope.head_dim),
            "scheme": {
                "warp": bundle.scheme.warp,
                "scales": [float(s) for s in bundle.scheme.scales],
            },
        }
        # re-run plan validation now that windows are attached
        ScalePlan(
            mode=plan.mode,
            scales=plan.scales,
            partition=plan.partition,
            pairing=plan.pairing,
            provenance=plan.provenance,
        )
        return plan
    except SearchStageError:
        raise
    except Exception as exc:
        raise SearchStageError(stage, str(exc)) from exc


def default_lengths(train_window: int) -> tuple[int, ...]:
    """Canonical evaluation ladder {L0/2, L0, 2L0, 4L0, 8L0}."""
    if train_window < 2:
        raise ValueError(f"train_window must be >= 2, got {train_window}")
    return (train_window // 2, train_window, 2 * train_window, 4 * train_window, 8 * train_window)
