"""File formats: tensor container, plan JSON, report JSON, bundle directories.

The tensor container is the safetensors layout: an 8-byte little-endian
unsigned header length, a UTF-8 JSON header mapping tensor names to {dtype,
shape, data_offsets}, then the raw little-endian payload. Offsets are
relative to the end of the header. Only F32 and F16 are accepted; F16 is
widened to F32 in memory. Files written here load in the reference
safetensors implementation and vice versa.

Plan files are versioned JSON documents with a closed schema: unknown keys
are rejected so that a plan written by a newer tool fails loudly instead of
being silently half-applied. Scales are serialized with Python's repr, which
round-trips float64 exactly.
"""
from __future__ import annotations

import fnmatch
import json
import math
import os
import struct

import numpy as np

from .bands import BandPartition, band_rows, partition_log_freq
from .diagnostics import ActivationCache, DiagnosticsReport
from .quant import QuantSpec
from .rope import PAIRINGS, RoPEConfig, ScalingScheme, pair_frequencies
from .search import MODES, ScalePlan

PLAN_VERSION = 1
REPORT_VERSION = 1

_DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2")}

DEFAULT_Q_PATTERNS = ("*q_proj.weight", "*q_proj*", "*attention.wq*", "*attn.wq*")
DEFAULT_K_PATTERNS = ("*k_proj.weight", "*k_proj*", "*attention.wk*", "*attn.wk*")


class TensorFileError(Exception):
    """Base class for tensor container problems."""


class MalformedHeaderError(TensorFileError):
    """The length prefix or JSON header cannot be parsed or is inconsistent."""


class OverlappingOffsetsError(TensorFileError):
    """Two tensors claim overlapping payload ranges."""


class TruncatedPayloadError(TensorFileError):
    """The payload is shorter than the offsets require."""


class PlanFormatError(ValueError):
    """A plan or report document violates its schema."""


class PlanVersionError(PlanFormatError):
    """The document's version is not supported."""


# ---------------------------------------------------------------------------
# tensor container
# ---------------------------------------------------------------------------


def write_tensors(
    tensors: dict[str, np.ndarray],
    path: str,
    dtypes: dict[str, str] | None = None,
    metadata: dict[str, str] | None = None,
) -> None:
    """Write a name -> array map in the container layout.

    Arrays are stored under the dtype named in dtypes (default F32), in name
    order, with contiguous ascending offsets; the byte output is a pure
    function of the inputs.
    """
    dtypes = dtypes or {}
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        dtype_name = dtypes.get(name, "F32")
        if dtype_name not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype_name!r} for tensor {name!r}")
        arr = np.ascontiguousarray(tensors[name], dtype=_DTYPES[dtype_name])
        raw = arr.tobytes()
        header[name] = {
            "dtype": dtype_name,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for chunk in chunks:
            fh.write(chunk)


def read_tensors(path: str) -> tuple[dict[str, np.ndarray], dict[str, str], dict[str, str]]:
    """Read a container; returns (tensors, dtypes, metadata).

    Tensors come back as float32 arrays (F16 payloads are widened). Header
    and offset problems raise the specific TensorFileError subclass; unknown
    dtypes and shape/offset mismatches are header errors, and a payload
    shorter than the promised ranges is a truncation error.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise MalformedHeaderError(f"{path}: file is shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise MalformedHeaderError(
            f"{path}: header length {header_len} exceeds the file size {len(blob)}"
        )
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")
    payload = blob[8 + header_len :]

    metadata: dict[str, str] = {}
    entries: list[tuple[str, str, tuple[int, ...], int, int]] = []
    for name, entry in header.items():
        if name == "__metadata__":
            if not isinstance(entry, dict):
                raise MalformedHeaderError(f"{path}: __metadata__ must be an object")
            metadata = {str(k): str(v) for k, v in entry.items()}
            continue
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise MalformedHeaderError(
                f"{path}: tensor {name!r} must carry exactly dtype/shape/data_offsets"
            )
        dtype_name = entry["dtype"]
        if dtype_name not in _DTYPES:
            raise MalformedHeaderError(f"{path}: tensor {name!r} has unsupported dtype {dtype_name!r}")
        shape = entry["shape"]
        if not isinstance(shape, list) or any(not isinstance(s, int) or s < 0 for s in shape):
            raise MalformedHeaderError(f"{path}: tensor {name!r} has an invalid shape {shape!r}")
        offsets = entry["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or any(not isinstance(o, int) or o < 0 for o in offsets)
            or offsets[0] > offsets[1]
        ):
            raise MalformedHeaderError(f"{path}: tensor {name!r} has invalid offsets {offsets!r}")
        begin, end = offsets
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype_name].itemsize
        if end - begin != expected:
            raise MalformedHeaderError(
                f"{path}: tensor {name!r} spans {end - begin} bytes but its shape needs {expected}"
            )
        entries.append((name, dtype_name, tuple(shape), begin, end))

    by_begin = sorted(entries, key=lambda e: e[3])
    for (name_a, _, _, _, end_a), (name_b, _, _, begin_b, _) in zip(by_begin, by_begin[1:]):
        if begin_b < end_a:
            raise OverlappingOffsetsError(
                f"{path}: tensors {name_a!r} and {name_b!r} overlap in the payload"
            )
    if entries:
        max_end = max(e[4] for e in entries)
        if max_end > len(payload):
            raise TruncatedPayloadError(
                f"{path}: payload has {len(payload)} bytes but offsets reach {max_end}"
            )

    tensors: dict[str, np.ndarray] = {}
    dtypes: dict[str, str] = {}
    for name, dtype_name, shape, begin, end in entries:
        arr = np.frombuffer(payload[begin:end], dtype=_DTYPES[dtype_name]).reshape(shape)
        tensors[name] = arr.astype(np.float32)
        dtypes[name] = dtype_name
    return tensors, dtypes, metadata


# ---------------------------------------------------------------------------
# plan files
# ---------------------------------------------------------------------------

_SEARCH_REQUIRED = ("kappa", "tau", "B", "K", "eta", "objective_value", "evaluator")
_SEARCH_OPTIONAL = (
    "strategy",
    "identity_objective",
    "evaluations",
    "passes",
    "seed",
    "fallback",
    "windows",
    "gamma",
    "lengths",
)


def plan_to_document(plan: ScalePlan) -> dict:
    """The JSON form of a plan; pure and deterministic."""
    rope_meta = plan.provenance.get("rope") or {
        "base": 10000.0,
        "head_dim": 2 * plan.partition.num_pairs,
        "scheme": {"warp": "identity", "scales": [1.0] * plan.partition.num_pairs},
    }
    search_meta = plan.provenance.get("search", {})
    search_doc: dict[str, object] = {key: search_meta.get(key) for key in _SEARCH_REQUIRED}
    for key in _SEARCH_OPTIONAL:
        if key in search_meta:
            search_doc[key] = search_meta[key]
    return {
        "version": PLAN_VERSION,
        "mode": plan.mode,
        "scales": [float(g) for g in plan.scales],
        "bands": [[int(lo), int(hi)] for lo, hi in plan.partition.bands],
        "pairing": plan.pairing,
        "rope": {
            "base": float(rope_meta["base"]),
            "head_dim": int(rope_meta["head_dim"]),
            "scheme": {
                "warp": str(rope_meta["scheme"]["warp"]),
                "scales": [float(s) for s in rope_meta["scheme"]["scales"]],
            },
        },
        "search": search_doc,
    }


def write_plan(plan: ScalePlan, path: str) -> None:
    """Serialize a plan; the bytes are a pure function of the plan."""
    doc = plan_to_document(plan)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _require_keys(obj: dict, allowed: set[str], required: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise PlanFormatError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise PlanFormatError(f"{where}: missing keys {sorted(missing)}")


def _check_number(value, where: str, *, positive: bool = False, nullable: bool = False) -> None:
    if value is None:
        if nullable:
            return
        raise PlanFormatError(f"{where} must be a number, got null")
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise PlanFormatError(f"{where} must be a finite number, got {value!r}")
    if positive and value <= 0:
        raise PlanFormatError(f"{where} must be positive, got {value!r}")


def plan_from_document(doc: dict) -> ScalePlan:
    """Validate a plan document against the closed v1 schema and rebuild it."""
    if not isinstance(doc, dict):
        raise PlanFormatError("plan document must be a JSON object")
    _require_keys(
        doc,
        {"version", "mode", "scales", "bands", "pairing", "rope", "search"},
        {"version", "mode", "scales", "bands", "pairing", "rope", "search"},
        "plan",
    )
    if doc["version"] != PLAN_VERSION:
        raise PlanVersionError(f"unsupported plan version {doc['version']!r}, expected {PLAN_VERSION}")
    if doc["mode"] not in MODES:
        raise PlanFormatError(f"plan mode must be one of {MODES}, got {doc['mode']!r}")
    if doc["pairing"] not in PAIRINGS:
        raise PlanFormatError(f"plan pairing must be one of {PAIRINGS}, got {doc['pairing']!r}")
    scales = doc["scales"]
    if not isinstance(scales, list) or not scales:
        raise PlanFormatError("plan scales must be a non-empty list")
    for i, g in enumerate(scales):
        _check_number(g, f"scales[{i}]", positive=True)
    bands = doc["bands"]
    if not isinstance(bands, list) or len(bands) != len(scales):
        raise PlanFormatError("plan bands must be a list with one [lo, hi) range per scale")
    for i, rng in enumerate(bands):
        if (
            not isinstance(rng, list)
            or len(rng) != 2
            or any(not isinstance(x, int) or isinstance(x, bool) for x in rng)
        ):
            raise PlanFormatError(f"bands[{i}] must be a pair of integers, got {rng!r}")

    rope = doc["rope"]
    if not isinstance(rope, dict):
        raise PlanFormatError("plan rope must be an object")
    _require_keys(rope, {"base", "head_dim", "scheme"}, {"base", "head_dim", "scheme"}, "rope")
    _check_number(rope["base"], "rope.base", positive=True)
    if not isinstance(rope["head_dim"], int) or rope["head_dim"] < 2 or rope["head_dim"] % 2:
        raise PlanFormatError(f"rope.head_dim must be a positive even integer, got {rope['head_dim']!r}")
    scheme = rope["scheme"]
    if not isinstance(scheme, dict):
        raise PlanFormatError("rope.scheme must be an object")
    _require_keys(scheme, {"warp", "scales"}, {"warp", "scales"}, "rope.scheme")
    if not isinstance(scheme["scales"], list) or not scheme["scales"]:
        raise PlanFormatError("rope.scheme.scales must be a non-empty list")
    for i, s in enumerate(scheme["scales"]):
        _check_number(s, f"rope.scheme.scales[{i}]", positive=True)

    search = doc["search"]
    if not isinstance(search, dict):
        raise PlanFormatError("plan search must be an object")
    _require_keys(search, set(_SEARCH_REQUIRED) | set(_SEARCH_OPTIONAL), set(_SEARCH_REQUIRED), "search")
    for key in ("kappa", "tau", "eta", "objective_value"):
        _check_number(search[key], f"search.{key}", nullable=True)
    for key in ("B", "K"):
        if search[key] is not None and (not isinstance(search[key], int) or search[key] < 1):
            raise PlanFormatError(f"search.{key} must be a positive integer or null")
    if search["evaluator"] is not None and not isinstance(search["evaluator"], str):
        raise PlanFormatError("search.evaluator must be a string or null")

    config = RoPEConfig(head_dim=rope["head_dim"], base=float(rope["base"]))
    freqs = pair_frequencies(config)
    if len(scales) > config.num_pairs:
        raise PlanFormatError(
            f"plan has {len(scales)} bands but the head only has {config.num_pairs} pairs"
        )
    try:
        partition = BandPartition(
            bands=tuple((lo, hi) for lo, hi in bands),
            freqs=tuple(float(f) for f in freqs),
        )
        rope_scheme = ScalingScheme(
            scales=tuple(float(s) for s in scheme["scales"]), warp=str(scheme["warp"])
        )
        if rope_scheme.num_pairs != config.num_pairs:
            raise ValueError(
                f"scheme has {rope_scheme.num_pairs} scales for {config.num_pairs} pairs"
            )
        provenance = {
            "rope": {
                "base": float(rope["base"]),
                "head_dim": int(rope["head_dim"]),
                "scheme": {"warp": str(scheme["warp"]), "scales": [float(s) for s in scheme["scales"]]},
            },
            "search": {k: v for k, v in search.items()},
        }
        return ScalePlan(
            mode=doc["mode"],
            scales=np.asarray(scales, dtype=np.float64),
            partition=partition,
            pairing=doc["pairing"],
            provenance=provenance,
        )
    except ValueError as exc:
        raise PlanFormatError(str(exc)) from exc


def read_plan(path: str) -> ScalePlan:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PlanFormatError(f"{path}: not valid JSON: {exc}") from exc
    return plan_from_document(doc)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def report_to_document(report: DiagnosticsReport) -> dict:
    doc = {
        "version": REPORT_VERSION,
        "eps": float(report.eps),
        "displacement": float(report.displacement),
        "pairing": report.pairing,
        "num_heads": int(report.num_heads),
        "freqs": [float(f) for f in report.partition.freqs],
        "ip_per_pair": [float(v) for v in report.ip_per_pair],
        "tir_a_per_pair": [float(v) for v in report.tir_a_per_pair],
        "bands": [
            {
                "range": [int(lo), int(hi)],
                "ip": float(report.band_ip[b]),
                "tir_w": float(report.band_tir_w[b]),
                "tir_a": float(report.band_tir_a[b]),
            }
            for b, (lo, hi) in enumerate(report.partition.bands)
        ],
    }
    if "tir_a_curves" in report.extras:
        doc["tir_a_curves"] = report.extras["tir_a_curves"]
    return doc


def write_report(report: DiagnosticsReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_document(report), fh, sort_keys=True, indent=2)
        fh.write("\n")


def report_from_document(doc: dict) -> DiagnosticsReport:
    if not isinstance(doc, dict):
        raise PlanFormatError("report document must be a JSON object")
    required = {
        "version", "eps", "displacement", "pairing", "num_heads",
        "freqs", "ip_per_pair", "tir_a_per_pair", "bands",
    }
    _require_keys(doc, required | {"tir_a_curves"}, required, "report")
    if doc["version"] != REPORT_VERSION:
        raise PlanVersionError(f"unsupported report version {doc['version']!r}")
    bands = doc["bands"]
    if not isinstance(bands, list) or not bands:
        raise PlanFormatError("report bands must be a non-empty list")
    ranges = []
    band_ip, band_tw, band_ta = [], [], []
    for i, entry in enumerate(bands):
        if not isinstance(entry, dict):
            raise PlanFormatError(f"bands[{i}] must be an object")
        _require_keys(entry, {"range", "ip", "tir_w", "tir_a"}, {"range", "ip", "tir_w", "tir_a"}, f"bands[{i}]")
        rng = entry["range"]
        if not isinstance(rng, list) or len(rng) != 2 or any(not isinstance(x, int) for x in rng):
            raise PlanFormatError(f"bands[{i}].range must be a pair of integers")
        ranges.append((rng[0], rng[1]))
        for key, dst in (("ip", band_ip), ("tir_w", band_tw), ("tir_a", band_ta)):
            _check_number(entry[key], f"bands[{i}].{key}", positive=True)
            dst.append(float(entry[key]))
    for key in ("freqs", "ip_per_pair", "tir_a_per_pair"):
        if not isinstance(doc[key], list) or not doc[key]:
            raise PlanFormatError(f"report {key} must be a non-empty list")
        for i, v in enumerate(doc[key]):
            _check_number(v, f"{key}[{i}]", positive=(key == "freqs"))
    _check_number(doc["eps"], "eps", positive=True)
    _check_number(doc["displacement"], "displacement", positive=True)
    if doc["pairing"] not in PAIRINGS:
        raise PlanFormatError(f"report pairing must be one of {PAIRINGS}")
    if not isinstance(doc["num_heads"], int) or doc["num_heads"] < 1:
        raise PlanFormatError("report num_heads must be a positive integer")
    try:
        partition = BandPartition(bands=tuple(ranges), freqs=tuple(float(f) for f in doc["freqs"]))
        extras = {}
        if "tir_a_curves" in doc:
            extras["tir_a_curves"] = doc["tir_a_curves"]
        return DiagnosticsReport(
            partition=partition,
            ip_per_pair=np.asarray(doc["ip_per_pair"], dtype=np.float64),
            tir_a_per_pair=np.asarray(doc["tir_a_per_pair"], dtype=np.float64),
            band_ip=np.asarray(band_ip),
            band_tir_w=np.asarray(band_tw),
            band_tir_a=np.asarray(band_ta),
            eps=float(doc["eps"]),
            displacement=float(doc["displacement"]),
            pairing=doc["pairing"],
            num_heads=doc["num_heads"],
            extras=extras,
        )
    except ValueError as exc:
        raise PlanFormatError(str(exc)) from exc


def read_report(path: str) -> DiagnosticsReport:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PlanFormatError(f"{path}: not valid JSON: {exc}") from exc
    return report_from_document(doc)


# ---------------------------------------------------------------------------
# checkpoint patching
# ---------------------------------------------------------------------------


def plan_row_scales(plan: ScalePlan, num_rows: int, role: str) -> np.ndarray:
    """Per-row multiplicative factors a plan implies for one projection.

    role is "q" or "k". num_rows must be a multiple of the plan's head_dim;
    the factors repeat per head.
    """
    if role not in ("q", "k"):
        raise ValueError(f"role must be 'q' or 'k', got {role!r}")
    head_dim = 2 * plan.partition.num_pairs
    if num_rows % head_dim or num_rows == 0:
        raise ValueError(
            f"{num_rows} rows is not a positive multiple of head_dim {head_dim}; "
            "the plan's pairing or head_dim does not match this checkpoint"
        )
    num_heads = num_rows // head_dim
    out = np.ones(num_rows)
    for b in range(plan.num_bands):
        g = float(plan.scales[b])
        if role == "k":
            g = g if plan.mode == "shared" else 1.0 / g
        out[band_rows(plan.partition, b, plan.pairing, head_dim, num_heads)] *= g
    return out


def inverse_plan(plan: ScalePlan) -> ScalePlan:
    """The plan that exactly undoes this one (scales inverted, same mode)."""
    return ScalePlan(
        mode=plan.mode,
        scales=1.0 / plan.scales,
        partition=plan.partition,
        pairing=plan.pairing,
    )


def patch_checkpoint(
    checkpoint_path: str,
    plan: ScalePlan,
    out_path: str,
    q_patterns: tuple[str, ...] = DEFAULT_Q_PATTERNS,
    k_patterns: tuple[str, ...] = DEFAULT_K_PATTERNS,
) -> list[tuple[str, str]]:
    """Apply a plan to a tensor-container checkpoint, writing a new file.

    Tensors matching the query/key glob patterns get their rows rescaled in
    float64 and are stored back under their original dtype; everything else
    is copied through bit-identically. Returns the (name, role) list of
    patched tensors. The input file is never modified.
    """
    if os.path.abspath(checkpoint_path) == os.path.abspath(out_path):
        raise ValueError("refusing to patch a checkpoint onto itself; pick a new output path")
    tensors, dtypes, metadata = read_tensors(checkpoint_path)

    def role_of(name: str) -> str | None:
        is_q = any(fnmatch.fnmatch(name, pat) for pat in q_patterns)
        is_k = any(fnmatch.fnmatch(name, pat) for pat in k_patterns)
        if is_q and is_k:
            raise ValueError(f"tensor {name!r} matches both query and key patterns")
        return "q" if is_q else "k" if is_k else None

    patched: list[tuple[str, str]] = []
    out: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        role = role_of(name)
        if role is None:
            out[name] = arr
            continue
        if arr.ndim != 2:
            raise ValueError(f"tensor {name!r} matched {role} patterns but is not 2d: shape {arr.shape}")
        factors = plan_row_scales(plan, arr.shape[0], role)
        out[name] = (arr.astype(np.float64) * factors[:, None]).astype(_DTYPES[dtypes[name]])
        patched.append((name, role))
    if not patched:
        raise ValueError(
            f"no tensors matched the query/key patterns {list(q_patterns)} / {list(k_patterns)}"
        )
    write_tensors(out, out_path, dtypes=dtypes, metadata=metadata)
    return patched


# ---------------------------------------------------------------------------
# bundle directories
# ---------------------------------------------------------------------------

_BUNDLE_JSON = "bundle.json"
_BUNDLE_MODEL = "model.safetensors"
_BUNDLE_CACHES = "caches.safetensors"


def _quant_doc(spec: QuantSpec | None) -> dict | None:
    if spec is None:
        return None
    return {
        "bits": spec.bits,
        "granularity": spec.granularity,
        "group_size": spec.group_size,
        "symmetric": spec.symmetric,
    }


def _quant_from_doc(doc: dict | None) -> QuantSpec | None:
    if doc is None:
        return None
    return QuantSpec(
        bits=doc["bits"],
        granularity=doc["granularity"],
        group_size=doc["group_size"],
        symmetric=doc["symmetric"],
    )


def write_bundle(bundle, dir_path: str) -> None:
    """Persist a model bundle as a directory: weights, caches, metadata.

    Arrays are stored as F32, so reading back rounds float64 values to
    float32 once; all downstream results are deterministic functions of the
    stored file.
    """
    os.makedirs(dir_path, exist_ok=True)
    write_tensors(
        {"attn.q_proj.weight": bundle.w_q, "attn.k_proj.weight": bundle.w_k},
        os.path.join(dir_path, _BUNDLE_MODEL),
    )
    cache_tensors: dict[str, np.ndarray] = {}
    cache_meta = []
    for length in sorted(bundle.caches):
        cache = bundle.caches[length]
        prefix = f"cache.{length}."
        cache_tensors[prefix + "short_hidden"] = cache.short_hidden
        cache_tensors[prefix + "long_hidden"] = cache.long_hidden
        cache_tensors[prefix + "short_pair_values"] = cache.short_pair_values
        cache_tensors[prefix + "short_pair_positions"] = cache.short_pair_positions
        cache_tensors[prefix + "long_pair_values"] = cache.long_pair_values
        cache_tensors[prefix + "long_pair_positions"] = cache.long_pair_positions
        cache_meta.append(
            {
                "long_length": cache.long_length,
                "short_length": cache.short_length,
                "n_short_runs": cache.n_short_runs,
                "n_long_runs": cache.n_long_runs,
                "scheme_id": cache.scheme_id,
                "min_samples": cache.min_samples,
            }
        )
    write_tensors(cache_tensors, os.path.join(dir_path, _BUNDLE_CACHES))
    doc = {
        "version": 1,
        "rope": {
            "head_dim": bundle.rope.head_dim,
            "base": bundle.rope.base,
            "pairing": bundle.rope.pairing,
            "train_window": bundle.rope.train_window,
        },
        "scheme": {"warp": bundle.scheme.warp, "scales": list(bundle.scheme.scales)},
        "num_heads": bundle.num_heads,
        "quant": _quant_doc(bundle.quant),
        "act_quant": _quant_doc(bundle.act_quant),
        "eval_lengths": list(bundle.eval_lengths),
        "seed": bundle.seed,
        "caches": cache_meta,
    }
    with open(os.path.join(dir_path, _BUNDLE_JSON), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_bundle(dir_path: str):
    """Load a bundle directory written by write_bundle."""
    from .evaluator import ModelBundle  # deferred: evaluator imports io consumers

    json_path = os.path.join(dir_path, _BUNDLE_JSON)
    try:
        with open(json_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"{dir_path} is not a bundle directory ({_BUNDLE_JSON} missing)")
    except json.JSONDecodeError as exc:
        raise PlanFormatError(f"{json_path}: not valid JSON: {exc}") from exc
    if doc.get("version") != 1:
        raise PlanVersionError(f"unsupported bundle version {doc.get('version')!r}")
    model, _, _ = read_tensors(os.path.join(dir_path, _BUNDLE_MODEL))
    caches_raw, _, _ = read_tensors(os.path.join(dir_path, _BUNDLE_CACHES))
    rope = RoPEConfig(
        head_dim=doc["rope"]["head_dim"],
        base=doc["rope"]["base"],
        pairing=doc["rope"]["pairing"],
        train_window=doc["rope"]["train_window"],
    )
    scheme = ScalingScheme(scales=tuple(doc["scheme"]["scales"]), warp=doc["scheme"]["warp"])
    caches: dict[int, ActivationCache] = {}
    for meta in doc["caches"]:
        length = meta["long_length"]
        prefix = f"cache.{length}."
        caches[length] = ActivationCache(
            short_hidden=caches_raw[prefix + "short_hidden"],
            long_hidden=caches_raw[prefix + "long_hidden"],
            short_pair_values=caches_raw[prefix + "short_pair_values"],
            short_pair_positions=caches_raw[prefix + "short_pair_positions"],
            long_pair_values=caches_raw[prefix + "long_pair_values"],
            long_pair_positions=caches_raw[prefix + "long_pair_positions"],
            short_length=meta["short_length"],
            long_length=length,
            n_short_runs=meta["n_short_runs"],
            n_long_runs=meta["n_long_runs"],
            scheme_id=meta["scheme_id"],
            min_samples=meta["min_samples"],
        )
    return ModelBundle(
        w_q=model["attn.q_proj.weight"],
        w_k=model["attn.k_proj.weight"],
        rope=rope,
        scheme=scheme,
        num_heads=doc["num_heads"],
        caches=caches,
        quant=_quant_from_doc(doc["quant"]),
        act_quant=_quant_from_doc(doc["act_quant"]),
        eval_lengths=tuple(doc["eval_lengths"]),
        seed=doc["seed"],
    )
