"""Objective evaluation for candidate scale plans.

Two evaluators share one calling convention (plan in, scalar objective out,
lower is better):

* LogitDistortionEvaluator: the built-in surrogate. For each evaluation
  length L it draws (query, key) position pairs stratified by displacement
  scale, computes full-precision rotary attention logits as the reference,
  and measures the variance-normalized mean squared logit error of the
  quantized model under the candidate plan. The weighted sum over lengths is
  the objective. Reference logits depend only on the bundle, so they are
  computed once and shared across all candidate plans.

* ExternalEvaluator: drives a user-supplied backend process speaking
  line-delimited JSON over stdin/stdout, for objectives the surrogate cannot
  see (true perplexity on a real checkpoint). The wire protocol is versioned
  and documented in the message helpers below.

The module also builds the synthetic desk-scale model bundles used for tests
and demos: tiny rotary attention layers with heavy-tailed outlier channels
whose magnitude grows beyond the training window, the failure shape that
makes position interpolation and quantization couple.
"""
from __future__ import annotations

import json
import math
import select
import shlex
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import ActivationCache
from .quant import QuantSpec, fake_quant
from .rope import (
    RoPEConfig,
    ScalingScheme,
    merge_pairs,
    pair_frequencies,
    phase_table,
    split_pairs,
)
from .search import ScalePlan, apply_scale_plan

PROTOCOL_VERSION = 1
OBJECTIVE_KINDS = ("logit_mse",)


@dataclass(frozen=True)
class ObjectiveSpec:
    """What the objective averages over: contexts, weights, sample budget.

    weights are normalized to sum to 1 at construction. window is the
    sliding-window size forwarded to perplexity backends; the built-in
    logit objective does not use it.
    """

    lengths: tuple[int, ...]
    weights: tuple[float, ...] = ()
    kind: str = "logit_mse"
    samples_per_length: int = 4096
    window: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.lengths) == 0:
            raise ValueError("need at least one evaluation length")
        if any(not (isinstance(length, int) and length > 1) for length in self.lengths):
            raise ValueError(f"lengths must be integers > 1, got {self.lengths}")
        if len(set(self.lengths)) != len(self.lengths):
            raise ValueError(f"lengths must be distinct, got {self.lengths}")
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"kind must be one of {OBJECTIVE_KINDS}, got {self.kind!r}")
        if self.samples_per_length < 16:
            raise ValueError(f"samples_per_length must be >= 16, got {self.samples_per_length}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        weights = self.weights or self.proportional_weights(self.lengths)
        if len(weights) != len(self.lengths):
            raise ValueError("weights must match lengths")
        if any(not (math.isfinite(w) and w > 0) for w in weights):
            raise ValueError(f"weights must be finite and positive, got {weights}")
        total = float(sum(weights))
        object.__setattr__(self, "weights", tuple(w / total for w in weights))

    @staticmethod
    def proportional_weights(lengths: tuple[int, ...]) -> tuple[float, ...]:
        """Weights proportional to context length, normalized."""
        total = float(sum(lengths))
        return tuple(length / total for length in lengths)


@dataclass(frozen=True)
class OutlierSpec:
    """Synthetic activation pathology injected by synth_model.

    channels: hidden channels carrying heavy-tailed (Student-t) activations.
    target_pairs: rotary pair indices whose W_Q rows get their outlier-channel
        entries boosted by row_gain, so the pathology lands in an
        identifiable frequency band.
    amp: amplitude multiplier of the outlier channels.
    growth: how much the outlier channels grow by position 8 * train_window
        (linear ramp starting right after the training window).
    tail_df: degrees of freedom of the Student-t draws; lower is heavier.
    leak: residual weight every non-target projection row keeps on the
        outlier channels. Small leak concentrates the tail inflation in the
        target band instead of smearing it over the whole head.
    """

    channels: tuple[int, ...] = (3, 11, 27)
    target_pairs: tuple[int, ...] = (2, 3)
    row_gain: float = 8.0
    amp: float = 3.0
    growth: float = 4.0
    tail_df: float = 3.0
    leak: float = 0.125

    def __post_init__(self) -> None:
        if any(c < 0 for c in self.channels):
            raise ValueError(f"channels must be non-negative, got {self.channels}")
        if any(p < 0 for p in self.target_pairs):
            raise ValueError(f"target_pairs must be non-negative, got {self.target_pairs}")
        for name in ("row_gain", "amp", "growth", "leak"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if not (math.isfinite(self.tail_df) and self.tail_df > 2.0):
            raise ValueError(f"tail_df must be > 2 for finite variance, got {self.tail_df}")


@dataclass
class ModelBundle:
    """One rotary attention layer plus everything needed to evaluate plans.

    w_q and w_k are stacked head-major, (num_heads * head_dim, d_model).
    caches map a long context length to the (short, long) activation cache
    at that length; every evaluation length must be covered by some cache at
    least that long. quant is the weight quantizer the plan is judged under
    (None means full precision, which makes every plan score identically);
    act_quant optionally fake-quantizes hidden states on the candidate side.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    rope: RoPEConfig
    scheme: ScalingScheme
    num_heads: int
    caches: dict[int, ActivationCache] = field(default_factory=dict)
    quant: QuantSpec | None = None
    act_quant: QuantSpec | None = None
    eval_lengths: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        self.w_q = np.asarray(self.w_q, dtype=np.float64)
        self.w_k = np.asarray(self.w_k, dtype=np.float64)
        rows = self.num_heads * self.rope.head_dim
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k)):
            if w.ndim != 2 or w.shape[0] != rows:
                raise ValueError(f"{name} must have shape ({rows}, d_model), got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"{name} contains non-finite values")
        if self.w_q.shape[1] != self.w_k.shape[1]:
            raise ValueError("w_q and w_k disagree on d_model")
        if self.scheme.num_pairs != self.rope.num_pairs:
            raise ValueError("scheme and rope disagree on the number of pairs")
        for length, cache in self.caches.items():
            if cache.long_length != length:
                raise ValueError(f"cache key {length} does not match its long_length {cache.long_length}")
            if cache.num_pairs != self.rope.num_pairs:
                raise ValueError(f"cache at {length} has {cache.num_pairs} pairs, expected {self.rope.num_pairs}")
            if cache.d_model != self.w_q.shape[1]:
                raise ValueError(f"cache at {length} has d_model {cache.d_model}, expected {self.w_q.shape[1]}")

    @property
    def head_dim(self) -> int:
        return self.rope.head_dim

    @property
    def d_model(self) -> int:
        return self.w_q.shape[1]

    def cache_for_length(self, length: int) -> ActivationCache:
        """Smallest cache whose long side covers the requested context."""
        covering = [c for c in self.caches.values() if c.long_length >= length]
        if not covering:
            raise ValueError(
                f"no cache covers length {length}; cached long lengths are "
                f"{sorted(c.long_length for c in self.caches.values())}"
            )
        return min(covering, key=lambda c: c.long_length)


def _outlier_hidden(
    rng: np.random.Generator,
    length: int,
    d_model: int,
    train_window: int,
    outliers: OutlierSpec | None,
) -> np.ndarray:
    """One run of synthetic hidden states, (length, d_model).

    Baseline is unit Gaussian. Outlier channels draw from a Student-t scaled
    by amp, and grow linearly with position once past the training window,
    reaching the full growth factor at 8x the window. The growth law depends
    only on absolute position, so a shorter context is statistically a
    prefix of a longer one.
    """
    h = rng.normal(size=(length, d_model))
    if outliers is None:
        return h
    cols = [c for c in outliers.channels if c < d_model]
    if cols:
        t = rng.standard_t(outliers.tail_df, size=(length, len(cols)))
        h[:, cols] = outliers.amp * t
        positions = np.arange(length, dtype=np.float64)
        ramp = np.clip((positions - train_window) / (7.0 * train_window), 0.0, 1.0)
        h[:, cols] *= (1.0 + (outliers.growth - 1.0) * ramp)[:, None]
    return h


def _pair_samples(
    hidden: np.ndarray, w_q: np.ndarray, num_heads: int, pairing: str
) -> tuple[np.ndarray, np.ndarray]:
    """Pre-rotation pair values pooled over tokens and heads.

    Returns (values, positions): values (P, n_tokens * num_heads, 2),
    positions (n_tokens * num_heads,) with each token position repeated once
    per head. Token positions are assumed to be row index modulo nothing,
    i.e. hidden is a single run.
    """
    n, _ = hidden.shape
    head_dim = w_q.shape[0] // num_heads
    pre = (hidden @ w_q.T).reshape(n, num_heads, head_dim)
    a, b = split_pairs(pre, pairing)  # each (n, heads, P)
    p = a.shape[-1]
    vals = np.stack([a, b], axis=-1)  # (n, heads, P, 2)
    vals = vals.transpose(2, 0, 1, 3).reshape(p, n * num_heads, 2)
    positions = np.repeat(np.arange(n), num_heads).astype(np.float64)
    return vals, positions


def synth_model(
    seed: int = 0,
    *,
    d_model: int = 64,
    num_heads: int = 4,
    head_dim: int = 16,
    train_window: int = 256,
    pi_factor: float = 8.0,
    base: float = 10000.0,
    pairing: str = "half_split",
    lengths: tuple[int, ...] = (128, 512, 2048),
    outliers: OutlierSpec | None = OutlierSpec(),
    quant: QuantSpec | None = QuantSpec(4, "per_tensor"),
    act_quant: QuantSpec | None = None,
    min_samples: int = 1000,
) -> ModelBundle:
    """Deterministic desk-scale rotary layer with a planted pathology.

    The same seed and arguments always produce bit-identical bundles. The
    default pathology boosts the W_Q rows of pairs (2, 3) (band 1 of an
    8-pair head split into B >= 4 bands) on three heavy-tailed channels, so
    TIR_W localizes there and per-tensor 4-bit quantization couples the
    inflated rows to everyone else through the shared scale.

    lengths are the intended evaluation contexts; caches are built for each
    length beyond the training window, with the training window itself as
    the short side.
    """
    if num_heads < 1:
        raise ValueError(f"num_heads must be >= 1, got {num_heads}")
    if d_model < 1:
        raise ValueError(f"d_model must be >= 1, got {d_model}")
    rope = RoPEConfig(head_dim=head_dim, base=base, pairing=pairing, train_window=train_window)
    scheme = ScalingScheme.uniform(rope.num_pairs, pi_factor)
    if not lengths:
        raise ValueError("lengths must be non-empty")
    if max(lengths) <= train_window:
        raise ValueError(
            f"need at least one length beyond the training window {train_window}, got {lengths}"
        )

    rows = num_heads * head_dim
    rng = np.random.default_rng([seed, 1])
    w_q = rng.normal(size=(rows, d_model)) / math.sqrt(d_model)
    w_k = rng.normal(size=(rows, d_model)) / math.sqrt(d_model)
    if outliers is not None:
        # touch only the outlier columns: whole-row gains cancel in the
        # long/short tail ratio. Non-target rows keep a small leak onto the
        # growing channels, target rows get row_gain there, so the inflation
        # is band-localized while per-tensor quantization still couples it
        # to everything through the shared max.
        cols = [c for c in outliers.channels if c < d_model]
        if cols:
            w_q[:, cols] *= outliers.leak
            w_k[:, cols] *= outliers.leak
            for pair in outliers.target_pairs:
                if pair >= rope.num_pairs:
                    continue
                if pairing == "half_split":
                    within = (pair, pair + rope.num_pairs)
                else:
                    within = (2 * pair, 2 * pair + 1)
                for h in range(num_heads):
                    for r in within:
                        w_q[h * head_dim + r, cols] *= outliers.row_gain / outliers.leak

    def runs_for(length: int, side_tag: int) -> np.ndarray:
        n_runs = max(1, math.ceil(min_samples / length))
        blocks = [
            _outlier_hidden(
                np.random.default_rng([seed, 2, side_tag, length, run]),
                length,
                d_model,
                train_window,
                outliers,
            )
            for run in range(n_runs)
        ]
        return np.concatenate(blocks, axis=0)

    caches: dict[int, ActivationCache] = {}
    scheme_id = f"uniform_pi_{pi_factor:g}"
    for length in sorted({length for length in lengths if length > train_window}):
        short_hidden = runs_for(train_window, 0)
        long_hidden = runs_for(length, 1)
        n_short_runs = short_hidden.shape[0] // train_window
        n_long_runs = long_hidden.shape[0] // length
        sv_parts, sp_parts, lv_parts, lp_parts = [], [], [], []
        for run in range(n_short_runs):
            block = short_hidden[run * train_window : (run + 1) * train_window]
            v, p = _pair_samples(block, w_q, num_heads, pairing)
            sv_parts.append(v)
            sp_parts.append(p)
        for run in range(n_long_runs):
            block = long_hidden[run * length : (run + 1) * length]
            v, p = _pair_samples(block, w_q, num_heads, pairing)
            lv_parts.append(v)
            lp_parts.append(p)
        caches[length] = ActivationCache(
            short_hidden=short_hidden,
            long_hidden=long_hidden,
            short_pair_values=np.concatenate(sv_parts, axis=1),
            short_pair_positions=np.concatenate(sp_parts),
            long_pair_values=np.concatenate(lv_parts, axis=1),
            long_pair_positions=np.concatenate(lp_parts),
            short_length=train_window,
            long_length=length,
            n_short_runs=n_short_runs,
            n_long_runs=n_long_runs,
            scheme_id=scheme_id,
            min_samples=min_samples,
        )

    return ModelBundle(
        w_q=w_q,
        w_k=w_k,
        rope=rope,
        scheme=scheme,
        num_heads=num_heads,
        caches=caches,
        quant=quant,
        act_quant=act_quant,
        eval_lengths=tuple(int(length) for length in lengths),
        seed=seed,
    )


def _sample_pairs(
    rng: np.random.Generator, length: int, n_samples: int, n_runs: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified (m, n) query/key positions plus run assignment.

    Displacements d = m - n are stratified over power-of-two bins {0}, [1,2),
    [2,4), ... capped at the context length, so short- and long-range
    interactions are equally represented no matter how long the context is.
    """
    bins = [(0, 1)]
    low = 1
    while low < length:
        bins.append((low, min(2 * low, length)))
        low *= 2
    bin_idx = rng.integers(0, len(bins), size=n_samples)
    lows = np.array([b[0] for b in bins])
    highs = np.array([b[1] for b in bins])
    d = rng.integers(lows[bin_idx], highs[bin_idx])
    m = rng.integers(d, length)
    n = m - d
    runs = rng.integers(0, n_runs, size=n_samples)
    return m, n, runs


class LogitDistortionEvaluator:
    """Variance-normalized quantized-logit error against cached references.

    Construction precomputes, per evaluation length: sampled position pairs,
    the gathered hidden states (optionally fake-quantized for the candidate
    side), the rotation tables, and the full-precision reference logits.
    Calling the evaluator with a ScalePlan then costs two projections and
    two rotations per length.
    """

    def __init__(self, bundle: ModelBundle, spec: ObjectiveSpec):
        if spec.kind != "logit_mse":
            raise ValueError(f"unsupported objective kind {spec.kind!r}")
        self.bundle = bundle
        self.spec = spec
        self._per_length = []
        inv_sqrt = 1.0 / math.sqrt(bundle.head_dim)
        for length, weight in zip(spec.lengths, spec.weights):
            cache = bundle.cache_for_length(length)
            rng = np.random.default_rng([spec.seed, length])
            m, n, runs = _sample_pairs(rng, length, spec.samples_per_length, cache.n_long_runs)
            base_rows = runs * cache.long_length
            h_m = cache.long_hidden[base_rows + m]
            h_n = cache.long_hidden[base_rows + n]
            phases_m = phase_table(bundle.rope, bundle.scheme, m.astype(np.float64))
            phases_n = phase_table(bundle.rope, bundle.scheme, n.astype(np.float64))
            trig = (
                np.cos(phases_m)[:, None, :],
                np.sin(phases_m)[:, None, :],
                np.cos(phases_n)[:, None, :],
                np.sin(phases_n)[:, None, :],
            )
            ref = self._logits(h_m, h_n, bundle.w_q, bundle.w_k, trig, inv_sqrt)
            var = float(ref.var())
            if not var > 0:
                raise ValueError(f"reference logits at length {length} have zero variance")
            cand_m = fake_quant(h_m, bundle.act_quant) if bundle.act_quant else h_m
            cand_n = fake_quant(h_n, bundle.act_quant) if bundle.act_quant else h_n
            self._per_length.append(
                {
                    "length": length,
                    "weight": weight,
                    "trig": trig,
                    "h_m": cand_m,
                    "h_n": cand_n,
                    "ref": ref,
                    "var": var,
                }
            )

    def _logits(self, h_m, h_n, w_q, w_k, trig, inv_sqrt) -> np.ndarray:
        b = self.bundle
        cm, sm, cn, sn = trig
        q = (h_m @ w_q.T).reshape(h_m.shape[0], b.num_heads, b.head_dim)
        k = (h_n @ w_k.T).reshape(h_n.shape[0], b.num_heads, b.head_dim)
        qa, qb = split_pairs(q, b.rope.pairing)
        ka, kb = split_pairs(k, b.rope.pairing)
        q_rot = merge_pairs(qa * cm - qb * sm, qa * sm + qb * cm, b.rope.pairing)
        k_rot = merge_pairs(ka * cn - kb * sn, ka * sn + kb * cn, b.rope.pairing)
        return np.einsum("nhd,nhd->nh", q_rot, k_rot) * inv_sqrt

    def reference_logits(self, length: int) -> np.ndarray:
        for entry in self._per_length:
            if entry["length"] == length:
                return entry["ref"].copy()
        raise ValueError(f"length {length} is not part of the objective")

    def __call__(self, plan: ScalePlan) -> float:
        b = self.bundle
        if plan.pairing != b.rope.pairing:
            raise ValueError(
                f"plan pairing {plan.pairing!r} does not match the bundle's {b.rope.pairing!r}"
            )
        if 2 * plan.partition.num_pairs != b.head_dim:
            raise ValueError(
                f"plan partition covers {plan.partition.num_pairs} pairs, bundle has "
                f"{b.rope.num_pairs}"
            )
        w_q, w_k = apply_scale_plan(b.w_q, b.w_k, plan)
        if b.quant is not None:
            w_q = fake_quant(w_q, b.quant)
            w_k = fake_quant(w_k, b.quant)
        inv_sqrt = 1.0 / math.sqrt(b.head_dim)
        total = 0.0
        for entry in self._per_length:
            logits = self._logits(entry["h_m"], entry["h_n"], w_q, w_k, entry["trig"], inv_sqrt)
            mse = float(np.mean((logits - entry["ref"]) ** 2))
            total += entry["weight"] * mse / entry["var"]
        return total


def logit_mse(bundle: ModelBundle, plan: ScalePlan, spec: ObjectiveSpec | None = None) -> float:
    """One-shot objective evaluation; build a LogitDistortionEvaluator for reuse."""
    if spec is None:
        lengths = bundle.eval_lengths or tuple(sorted(bundle.caches))
        spec = ObjectiveSpec(lengths=lengths, seed=bundle.seed)
    return LogitDistortionEvaluator(bundle, spec)(plan)


# ---------------------------------------------------------------------------
# External evaluator protocol: line-delimited JSON over a child's stdio.
# Client sends hello, backend answers hello, then any number of eval
# requests each answered by exactly one ok or error message.
# ---------------------------------------------------------------------------


class BackendError(RuntimeError):
    """The backend process failed: died, timed out, or reported an error."""


class ProtocolError(BackendError):
    """The backend sent something the protocol does not allow."""


def encode_message(message: dict) -> str:
    """Canonical wire form: sorted keys, no whitespace, one line."""
    return json.dumps(message, sort_keys=True, separators=(",", ":"))


def hello_message() -> dict:
    return {"type": "hello", "version": PROTOCOL_VERSION}


def plan_to_wire(plan: ScalePlan) -> dict:
    """The protocol's plan object: mode, per-band scales, band ranges, pairing."""
    return {
        "mode": plan.mode,
        "scales": [float(g) for g in plan.scales],
        "bands": [[int(lo), int(hi)] for lo, hi in plan.partition.bands],
        "pairing": plan.pairing,
    }


def eval_request(plan: ScalePlan, lengths: tuple[int, ...], window: int) -> dict:
    return {
        "type": "eval",
        "plan": plan_to_wire(plan),
        "lengths": [int(length) for length in lengths],
        "window": int(window),
    }


def _fail(line: str, why: str) -> ProtocolError:
    shown = line if len(line) <= 200 else line[:200] + "..."
    return ProtocolError(f"{why}; offending line: {shown!r}")


def decode_message(line: str) -> dict:
    """Parse and validate one protocol line, raising ProtocolError on anything
    outside the message grammar."""
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise _fail(line, f"not valid JSON ({exc.msg})") from exc
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        raise _fail(line, "message must be an object with a string 'type'")
    mtype = msg["type"]
    if mtype == "hello":
        if set(msg) != {"type", "version"} or not isinstance(msg["version"], int):
            raise _fail(line, "hello must carry exactly an integer 'version'")
    elif mtype == "eval":
        if set(msg) != {"type", "plan", "lengths", "window"}:
            raise _fail(line, "eval must carry exactly 'plan', 'lengths', 'window'")
        plan = msg["plan"]
        if not isinstance(plan, dict) or set(plan) != {"mode", "scales", "bands", "pairing"}:
            raise _fail(line, "eval plan must carry exactly mode/scales/bands/pairing")
        if plan["mode"] not in ("shared", "symmetric"):
            raise _fail(line, f"unknown plan mode {plan['mode']!r}")
        if plan["pairing"] not in ("half_split", "interleaved"):
            raise _fail(line, f"unknown plan pairing {plan['pairing']!r}")
        scales = plan["scales"]
        if (
            not isinstance(scales, list)
            or not scales
            or any(not isinstance(g, (int, float)) or not math.isfinite(g) or g <= 0 for g in scales)
        ):
            raise _fail(line, "plan scales must be a non-empty list of positive numbers")
        bands = plan["bands"]
        if (
            not isinstance(bands, list)
            or len(bands) != len(scales)
            or any(
                not (isinstance(rng, list) and len(rng) == 2
                     and all(isinstance(x, int) for x in rng) and rng[0] < rng[1])
                for rng in bands
            )
        ):
            raise _fail(line, "plan bands must be [lo, hi) integer ranges, one per scale")
        lengths = msg["lengths"]
        if (
            not isinstance(lengths, list)
            or not lengths
            or any(not isinstance(length, int) or length < 1 for length in lengths)
        ):
            raise _fail(line, "lengths must be a non-empty list of positive integers")
        if not isinstance(msg["window"], int) or msg["window"] < 1:
            raise _fail(line, "window must be a positive integer")
    elif mtype == "ok":
        if set(msg) != {"type", "ppl"} or not isinstance(msg["ppl"], dict) or not msg["ppl"]:
            raise _fail(line, "ok must carry exactly a non-empty 'ppl' object")
        for key, value in msg["ppl"].items():
            if not (isinstance(key, str) and key.isdigit() and int(key) > 0):
                raise _fail(line, f"ppl key {key!r} is not a positive integer string")
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
                raise _fail(line, f"ppl value for {key} must be a positive finite number")
    elif mtype == "error":
        if set(msg) != {"type", "message"} or not isinstance(msg["message"], str):
            raise _fail(line, "error must carry exactly a string 'message'")
    else:
        raise _fail(line, f"unknown message type {mtype!r}")
    return msg


class ExternalEvaluator:
    """Client side of the backend protocol, usable as a search objective.

    command is the backend argv (a string is shlex-split). The handshake
    happens at construction; evaluate() sends one request and returns the
    per-length perplexities; calling the object aggregates them with the
    spec's weights so it plugs directly into the search as evaluate(plan).
    """

    def __init__(self, command, spec: ObjectiveSpec, timeout: float = 60.0):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.spec = spec
        self.timeout = timeout
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise BackendError(f"could not start backend {argv!r}: {exc}") from exc
        self._send(hello_message())
        reply = self._receive()
        if reply["type"] != "hello":
            raise ProtocolError(f"expected hello, got {reply['type']!r}")
        if reply["version"] != PROTOCOL_VERSION:
            raise ProtocolError(
                f"backend speaks protocol version {reply['version']}, "
                f"client speaks {PROTOCOL_VERSION}"
            )

    def _send(self, message: dict) -> None:
        if self._proc.poll() is not None:
            raise BackendError(f"backend exited with code {self._proc.returncode}")
        try:
            self._proc.stdin.write(encode_message(message) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BackendError(f"backend pipe closed while sending: {exc}") from exc

    def _receive(self) -> dict:
        stream = self._proc.stdout
        ready, _, _ = select.select([stream], [], [], self.timeout)
        if not ready:
            self._proc.kill()
            raise BackendError(f"backend did not answer within {self.timeout}s")
        line = stream.readline()
        if line == "":
            code = self._proc.poll()
            raise BackendError(f"backend closed its stdout (exit code {code})")
        return decode_message(line)

    def evaluate(self, plan: ScalePlan, lengths: tuple[int, ...] | None = None) -> dict[int, float]:
        """One round trip; returns {length: perplexity}."""
        lengths = tuple(lengths) if lengths is not None else tuple(self.spec.lengths)
        self._send(eval_request(plan, lengths, self.spec.window))
        reply = self._receive()
        if reply["type"] == "error":
            raise BackendError(f"backend reported: {reply['message']}")
        if reply["type"] != "ok":
            raise ProtocolError(f"expected ok or error, got {reply['type']!r}")
        ppl = {int(k): float(v) for k, v in reply["ppl"].items()}
        missing = [length for length in lengths if length not in ppl]
        if missing:
            raise ProtocolError(f"backend response is missing lengths {missing}")
        return ppl

    def __call__(self, plan: ScalePlan) -> float:
        ppl = self.evaluate(plan)
        return float(sum(w * ppl[length] for length, w in zip(self.spec.lengths, self.spec.weights)))

    def close(self) -> None:
        proc = self._proc
        if proc.poll() is None:
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __enter__(self) -> "ExternalEvaluator":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
