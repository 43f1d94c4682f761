"""Tensor container, plan/report JSON schemas, checkpoint patching, bundles."""
import json
import struct

import numpy as np
import pytest

from qroar.bands import BandPartition, partition_log_freq
from qroar.diagnostics import compute_report
from qroar.evaluator import LogitDistortionEvaluator, ObjectiveSpec, synth_model
from qroar.io import (
    MalformedHeaderError,
    OverlappingOffsetsError,
    PlanFormatError,
    PlanVersionError,
    TruncatedPayloadError,
    inverse_plan,
    patch_checkpoint,
    plan_from_document,
    plan_row_scales,
    plan_to_document,
    read_bundle,
    read_plan,
    read_report,
    read_tensors,
    report_from_document,
    report_to_document,
    write_bundle,
    write_plan,
    write_report,
    write_tensors,
)
from qroar.rope import pair_frequencies
from qroar.search import ScalePlan, SearchConfig, run_qroar


def toy_plan(scales=(2.0,), mode="symmetric", num_pairs=None, provenance=None):
    p = num_pairs or 4 * len(scales)
    part = partition_log_freq(np.geomspace(1.0, 1e-3, p), len(scales))
    return ScalePlan(
        mode=mode,
        scales=np.asarray(scales, dtype=np.float64),
        partition=part,
        pairing="half_split",
        provenance=provenance or {},
    )


def searched_plan(small_bundle):
    report = compute_report(small_bundle, num_bands=3)
    return run_qroar(small_bundle, report, SearchConfig(num_bands=3, grid_points=5, seed=1))


def test_tensor_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(71)
    tensors = {
        "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "b.bias": rng.standard_normal(16).astype(np.float32),
        "c": rng.standard_normal((2, 3, 4)).astype(np.float32),
    }
    path = str(tmp_path / "t.safetensors")
    write_tensors(tensors, path, metadata={"origin": "test"})
    loaded, dtypes, metadata = read_tensors(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float32
        assert loaded[name].tobytes() == tensors[name].tobytes()
    assert dtypes == {name: "F32" for name in tensors}
    assert metadata == {"origin": "test"}
    # writing the loaded map again reproduces the file byte for byte
    path2 = str(tmp_path / "t2.safetensors")
    write_tensors(loaded, path2, metadata=metadata)
    assert open(path, "rb").read() == open(path2, "rb").read()


def test_tensor_empty_map(tmp_path):
    path = str(tmp_path / "empty.safetensors")
    write_tensors({}, path)
    tensors, dtypes, metadata = read_tensors(path)
    assert tensors == {} and dtypes == {} and metadata == {}
    blob = open(path, "rb").read()
    (header_len,) = struct.unpack("<Q", blob[:8])
    assert blob[8 : 8 + header_len] == b"{}"


def test_tensor_f16_widening(tmp_path):
    rng = np.random.default_rng(73)
    x = rng.standard_normal((8, 8)).astype(np.float16).astype(np.float64)
    path = str(tmp_path / "h.safetensors")
    write_tensors({"x": x}, path, dtypes={"x": "F16"})
    loaded, dtypes, _ = read_tensors(path)
    assert dtypes == {"x": "F16"}
    assert loaded["x"].dtype == np.float32
    assert np.array_equal(loaded["x"], x.astype(np.float32))
    # narrowing back is round-trip exact: re-writing changes nothing
    path2 = str(tmp_path / "h2.safetensors")
    write_tensors(loaded, path2, dtypes=dtypes)
    assert open(path, "rb").read() == open(path2, "rb").read()


def containered(header: dict, payload: bytes) -> bytes:
    raw = json.dumps(header).encode()
    return struct.pack("<Q", len(raw)) + raw + payload


def test_tensor_error_classes(tmp_path):
    path = str(tmp_path / "bad.safetensors")

    def expect(error, blob):
        with open(path, "wb") as fh:
            fh.write(blob)
        with pytest.raises(error):
            read_tensors(path)

    expect(MalformedHeaderError, b"\x01\x02")  # shorter than the prefix
    expect(MalformedHeaderError, struct.pack("<Q", 999) + b"{}")  # prefix past EOF
    expect(MalformedHeaderError, struct.pack("<Q", 3) + b"{]?")  # not JSON
    expect(MalformedHeaderError, containered({"x": {"dtype": "F64", "shape": [1], "data_offsets": [0, 8]}}, b"\x00" * 8))
    expect(MalformedHeaderError, containered({"x": {"dtype": "F32", "shape": [2]}}, b"\x00" * 8))
    expect(MalformedHeaderError, containered({"x": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}, b"\x00" * 8))
    expect(
        OverlappingOffsetsError,
        containered(
            {
                "x": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                "y": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
            },
            b"\x00" * 12,
        ),
    )
    expect(
        TruncatedPayloadError,
        containered({"x": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, b"\x00" * 8),
    )


def test_tensor_interop_with_reference_implementation(tmp_path):
    safetensors_numpy = pytest.importorskip("safetensors.numpy")
    rng = np.random.default_rng(79)
    ours = str(tmp_path / "ours.safetensors")
    theirs = str(tmp_path / "theirs.safetensors")
    w = rng.standard_normal((4, 6)).astype(np.float32)
    h = rng.standard_normal((3, 3)).astype(np.float16)
    # our writer, their reader
    write_tensors({"w": w, "h": h.astype(np.float64)}, ours, dtypes={"h": "F16"})
    loaded = safetensors_numpy.load_file(ours)
    assert np.array_equal(loaded["w"], w)
    assert np.array_equal(loaded["h"], h)
    # their writer, our reader
    safetensors_numpy.save_file({"w": w, "h": h}, theirs)
    back, dtypes, _ = read_tensors(theirs)
    assert np.array_equal(back["w"], w)
    assert dtypes == {"w": "F32", "h": "F16"}
    assert np.array_equal(back["h"], h.astype(np.float32))


def test_plan_round_trip_value_exact(tmp_path, small_bundle):
    plan = searched_plan(small_bundle)
    path = str(tmp_path / "plan.json")
    write_plan(plan, path)
    back = read_plan(path)
    assert back.mode == plan.mode
    assert back.pairing == plan.pairing
    assert back.partition.bands == plan.partition.bands
    assert np.array_equal(back.scales, plan.scales)  # bit-identical floats
    meta, meta_back = plan.provenance["search"], back.provenance["search"]
    for key in ("kappa", "tau", "B", "K", "eta", "objective_value", "evaluator",
                "strategy", "evaluations", "passes", "seed", "fallback",
                "windows", "gamma", "lengths", "identity_objective"):
        assert meta_back[key] == meta[key]
    assert back.provenance["rope"] == plan.provenance["rope"]
    # a second write of the re-read plan is byte-identical
    path2 = str(tmp_path / "plan2.json")
    write_plan(back, path2)
    assert open(path).read() == open(path2).read()


def test_plan_17_digit_scales(tmp_path):
    g = 1.2599210498948732  # cube root of 2, needs all 17 digits
    plan = toy_plan(scales=(g,))
    path = str(tmp_path / "p.json")
    write_plan(plan, path)
    assert read_plan(path).scales[0] == g
    assert f"{g!r}" in open(path).read()


def test_plan_minimal_provenance_round_trip(tmp_path):
    # a plan that never went through the search still serializes: required
    # search keys are emitted as nulls
    plan = toy_plan(scales=(1.0, 0.8), num_pairs=8)
    doc = plan_to_document(plan)
    assert doc["search"]["objective_value"] is None
    rebuilt = plan_from_document(doc)
    assert np.array_equal(rebuilt.scales, plan.scales)
    path = str(tmp_path / "p.json")
    write_plan(plan, path)
    assert np.array_equal(read_plan(path).scales, plan.scales)


def test_plan_schema_rejections(tmp_path):
    good = plan_to_document(toy_plan())

    def mutated(**changes):
        doc = json.loads(json.dumps(good))
        doc.update(changes)
        return doc

    with pytest.raises(PlanVersionError):
        plan_from_document(mutated(version=2))
    with pytest.raises(PlanFormatError, match="unknown keys"):
        plan_from_document(mutated(comment="hello"))
    with pytest.raises(PlanFormatError):
        plan_from_document(mutated(mode="diagonal"))
    with pytest.raises(PlanFormatError):
        plan_from_document(mutated(pairing="zipped"))
    with pytest.raises(PlanFormatError):
        plan_from_document(mutated(scales=[]))
    with pytest.raises(PlanFormatError):
        plan_from_document(mutated(scales=[-1.0]))
    with pytest.raises(PlanFormatError):
        plan_from_document(mutated(scales=[1.0, 2.0]))  # bands no longer match
    with pytest.raises(PlanFormatError):
        plan_from_document(mutated(bands=[[0, 2]]))  # does not cover the head
    doc = mutated()
    doc["search"].pop("kappa")
    with pytest.raises(PlanFormatError, match="missing keys"):
        plan_from_document(doc)
    doc = mutated()
    doc["search"]["surprise"] = 1
    with pytest.raises(PlanFormatError, match="unknown keys"):
        plan_from_document(doc)
    doc = mutated()
    doc["rope"]["head_dim"] = 7
    with pytest.raises(PlanFormatError):
        plan_from_document(doc)
    doc = mutated()
    doc["rope"]["scheme"]["scales"] = [1.0]
    with pytest.raises(PlanFormatError):
        plan_from_document(doc)
    path = str(tmp_path / "broken.json")
    with open(path, "w") as fh:
        fh.write("{nope")
    with pytest.raises(PlanFormatError):
        read_plan(path)


def test_report_round_trip(tmp_path, small_bundle):
    report = compute_report(small_bundle, num_bands=3, with_curves=True)
    path = str(tmp_path / "report.json")
    write_report(report, path)
    back = read_report(path)
    assert back.partition.bands == report.partition.bands
    assert np.array_equal(back.ip_per_pair, report.ip_per_pair)
    assert np.array_equal(back.tir_a_per_pair, report.tir_a_per_pair)
    assert np.array_equal(back.band_ip, report.band_ip)
    assert np.array_equal(back.band_tir_w, report.band_tir_w)
    assert np.array_equal(back.band_tir_a, report.band_tir_a)
    assert back.eps == report.eps and back.displacement == report.displacement
    assert back.extras["tir_a_curves"] == report.extras["tir_a_curves"]


def test_report_schema_rejections(small_bundle):
    report = compute_report(small_bundle, num_bands=3)
    good = report_to_document(report)

    def mutated(**changes):
        doc = json.loads(json.dumps(good))
        doc.update(changes)
        return doc

    with pytest.raises(PlanVersionError):
        report_from_document(mutated(version=99))
    with pytest.raises(PlanFormatError, match="unknown keys"):
        report_from_document(mutated(note="hi"))
    with pytest.raises(PlanFormatError):
        report_from_document(mutated(eps=0.0))
    with pytest.raises(PlanFormatError):
        report_from_document(mutated(pairing="zipped"))
    doc = mutated()
    doc["bands"][0]["ip"] = -1.0
    with pytest.raises(PlanFormatError):
        report_from_document(doc)
    doc = mutated()
    del doc["bands"][0]["tir_w"]
    with pytest.raises(PlanFormatError, match="missing keys"):
        report_from_document(doc)


def test_plan_row_scales_layout():
    plan = toy_plan(scales=(2.0,), mode="symmetric")  # one band over 4 pairs
    q = plan_row_scales(plan, 16, "q")  # two heads of dim 8
    k = plan_row_scales(plan, 8, "k")  # GQA: single key head
    assert np.all(q == 2.0) and q.shape == (16,)
    assert np.all(k == 0.5) and k.shape == (8,)
    shared = toy_plan(scales=(2.0,), mode="shared")
    assert np.all(plan_row_scales(shared, 8, "k") == 2.0)
    two = toy_plan(scales=(3.0, 1.0), num_pairs=4)
    factors = plan_row_scales(two, 8, "q")
    # half_split: band 0 holds pairs {0, 1}, touching rows {0, 1, 4, 5}
    assert factors.tolist() == [3.0, 3.0, 1.0, 1.0, 3.0, 3.0, 1.0, 1.0]
    with pytest.raises(ValueError):
        plan_row_scales(plan, 12, "q")  # not a multiple of head_dim 8
    with pytest.raises(ValueError):
        plan_row_scales(plan, 8, "v")


def test_patch_checkpoint_roles_and_immutability(tmp_path):
    rng = np.random.default_rng(83)
    w_q = rng.standard_normal((8, 10)).astype(np.float32)
    w_k = rng.standard_normal((8, 10)).astype(np.float32)
    embed = rng.standard_normal((12, 10)).astype(np.float32)
    src = str(tmp_path / "model.safetensors")
    write_tensors(
        {
            "model.layers.0.self_attn.q_proj.weight": w_q,
            "model.layers.0.self_attn.k_proj.weight": w_k,
            "model.embed_tokens.weight": embed,
        },
        src,
    )
    before = open(src, "rb").read()
    plan = toy_plan(scales=(2.0,), mode="symmetric")
    dst = str(tmp_path / "patched.safetensors")
    patched = patch_checkpoint(src, plan, dst)
    assert sorted(patched) == [
        ("model.layers.0.self_attn.k_proj.weight", "k"),
        ("model.layers.0.self_attn.q_proj.weight", "q"),
    ]
    assert open(src, "rb").read() == before  # source untouched
    out, _, _ = read_tensors(dst)
    assert np.array_equal(out["model.layers.0.self_attn.q_proj.weight"], 2.0 * w_q)
    assert np.array_equal(out["model.layers.0.self_attn.k_proj.weight"], 0.5 * w_k)
    assert out["model.embed_tokens.weight"].tobytes() == embed.tobytes()


def test_patch_checkpoint_identity_is_byte_stable(tmp_path):
    rng = np.random.default_rng(89)
    src = str(tmp_path / "m.safetensors")
    write_tensors(
        {
            "attn.wq.weight": rng.standard_normal((8, 4)).astype(np.float32),
            "attn.wk.weight": rng.standard_normal((8, 4)).astype(np.float32),
        },
        src,
    )
    plan = toy_plan(scales=(1.0,))
    dst = str(tmp_path / "same.safetensors")
    patch_checkpoint(src, plan, dst)
    assert open(src, "rb").read() == open(dst, "rb").read()


def test_patch_checkpoint_error_paths(tmp_path):
    rng = np.random.default_rng(97)
    src = str(tmp_path / "m.safetensors")
    write_tensors({"mlp.weight": rng.standard_normal((8, 4)).astype(np.float32)}, src)
    plan = toy_plan(scales=(1.0,))
    with pytest.raises(ValueError, match="no tensors matched"):
        patch_checkpoint(src, plan, str(tmp_path / "out.safetensors"))
    with pytest.raises(ValueError, match="onto itself"):
        patch_checkpoint(src, plan, src)
    src2 = str(tmp_path / "m2.safetensors")
    write_tensors(
        {
            "attn.wq.weight": rng.standard_normal((8, 4)).astype(np.float32),
            "attn.wk.weight": rng.standard_normal((8, 4)).astype(np.float32),
        },
        src2,
    )
    with pytest.raises(ValueError, match="matches both"):
        patch_checkpoint(
            src2, plan, str(tmp_path / "out.safetensors"),
            q_patterns=("attn.*",), k_patterns=("*wk*",),
        )
    src3 = str(tmp_path / "m3.safetensors")
    write_tensors({"attn.wq.bias": rng.standard_normal(8).astype(np.float32)}, src3)
    with pytest.raises(ValueError, match="not 2d"):
        patch_checkpoint(src3, plan, str(tmp_path / "out.safetensors"))
    # a plan whose head_dim does not divide the rows is a layout error
    src4 = str(tmp_path / "m4.safetensors")
    write_tensors(
        {
            "attn.wq.weight": rng.standard_normal((6, 4)).astype(np.float32),
            "attn.wk.weight": rng.standard_normal((6, 4)).astype(np.float32),
        },
        src4,
    )
    with pytest.raises(ValueError, match="multiple of head_dim"):
        patch_checkpoint(src4, plan, str(tmp_path / "out.safetensors"))


def test_patch_then_inverse_restores_weights(tmp_path):
    rng = np.random.default_rng(101)
    w_q = rng.standard_normal((16, 12)).astype(np.float32)
    w_k = rng.standard_normal((16, 12)).astype(np.float32)
    src = str(tmp_path / "m.safetensors")
    write_tensors({"a.q_proj.weight": w_q, "a.k_proj.weight": w_k}, src)
    for mode in ("symmetric", "shared"):
        plan = toy_plan(scales=tuple(rng.uniform(0.4, 2.5, 2)), mode=mode, num_pairs=4)
        inverse = inverse_plan(plan)
        assert np.array_equal(inverse.scales, 1.0 / plan.scales)
        assert inverse.mode == mode
        once = str(tmp_path / f"p_{mode}.safetensors")
        back = str(tmp_path / f"b_{mode}.safetensors")
        patch_checkpoint(src, plan, once)
        patch_checkpoint(once, inverse, back)
        restored, _, _ = read_tensors(back)
        for name, original in (("a.q_proj.weight", w_q), ("a.k_proj.weight", w_k)):
            err = np.abs(restored[name] - original)
            assert err.max() <= 1e-6 * np.abs(original).max()


def test_bundle_round_trip(tmp_path, small_bundle):
    path = str(tmp_path / "bundle")
    write_bundle(small_bundle, path)
    back = read_bundle(path)
    assert np.array_equal(back.w_q, small_bundle.w_q.astype(np.float32))
    assert back.rope == small_bundle.rope
    assert back.scheme == small_bundle.scheme
    assert back.num_heads == small_bundle.num_heads
    assert back.quant == small_bundle.quant
    assert back.act_quant is None
    assert back.eval_lengths == small_bundle.eval_lengths
    assert back.seed == small_bundle.seed
    assert sorted(back.caches) == sorted(small_bundle.caches)
    cache = back.caches[256]
    ref = small_bundle.caches[256]
    assert np.array_equal(cache.long_hidden, ref.long_hidden.astype(np.float32))
    assert cache.n_long_runs == ref.n_long_runs
    assert cache.scheme_id == ref.scheme_id
    # the reloaded bundle is a working evaluator input
    spec = ObjectiveSpec(lengths=(128,), seed=0)
    part = partition_log_freq(pair_frequencies(back.rope), 3)
    value = LogitDistortionEvaluator(back, spec)(ScalePlan.identity(part, back.rope.pairing))
    assert np.isfinite(value) and value > 0


def test_bundle_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="bundle"):
        read_bundle(str(tmp_path / "nowhere"))
    path = str(tmp_path / "bad")
    bundle = synth_model(0, lengths=(64, 256), train_window=128,
                         d_model=16, num_heads=1, head_dim=8, min_samples=128)
    write_bundle(bundle, path)
    doc = json.load(open(f"{path}/bundle.json"))
    doc["version"] = 9
    json.dump(doc, open(f"{path}/bundle.json", "w"))
    with pytest.raises(PlanVersionError):
        read_bundle(path)
