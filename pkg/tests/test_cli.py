"""End-to-end flows through the command-line front end."""
import csv
import itertools
import json
import os
import sys

import numpy as np
import pytest

from conftest import ECHO_BACKEND

from qroar.cli import EXIT_BACKEND, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from qroar.evaluator import LogitDistortionEvaluator, ObjectiveSpec
from qroar.io import (
    read_bundle,
    read_plan,
    read_report,
    report_from_document,
    write_plan,
    write_tensors,
)
from qroar.search import ScalePlan, build_grid

SMALL = (
    "--d-model", "32", "--heads", "2", "--head-dim", "16",
    "--train-window", "64", "--pi-factor", "4.0",
    "--lengths", "32,128,256", "--min-samples", "256",
)


def run(*argv):
    return main([str(a) for a in argv])


def read_dir_bytes(path):
    return {name: open(os.path.join(path, name), "rb").read() for name in sorted(os.listdir(path))}


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("cli") / "bundle")
    assert run("synth", "--out", path, "--seed", 3, *SMALL) == EXIT_OK
    return path


@pytest.fixture(scope="module")
def report_path(bundle_dir, tmp_path_factory):
    path = str(tmp_path_factory.mktemp("cli") / "report.json")
    assert run("diagnose", "--bundle", bundle_dir, "--out", path, "--bands", 8) == EXIT_OK
    return path


def test_synth_is_deterministic(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run("synth", "--out", a, "--seed", 7, *SMALL) == EXIT_OK
    assert run("synth", "--out", b, "--seed", 7, *SMALL) == EXIT_OK
    assert read_dir_bytes(a) == read_dir_bytes(b)
    c = str(tmp_path / "c")
    assert run("synth", "--out", c, "--seed", 8, *SMALL) == EXIT_OK
    assert read_dir_bytes(a) != read_dir_bytes(c)


def test_synth_rejects_odd_head_dim(tmp_path, capsys):
    code = run("synth", "--out", str(tmp_path / "x"), "--heads", 3, "--head-dim", 15)
    assert code == EXIT_VALIDATION
    assert "head_dim" in capsys.readouterr().err


def test_seed_flag_overrides_env(tmp_path, monkeypatch):
    flagged = str(tmp_path / "flagged")
    enved = str(tmp_path / "enved")
    both = str(tmp_path / "both")
    plain = str(tmp_path / "plain")
    assert run("synth", "--out", flagged, "--seed", 5, *SMALL) == EXIT_OK
    monkeypatch.setenv("QROAR_SEED", "5")
    assert run("synth", "--out", enved, *SMALL) == EXIT_OK
    monkeypatch.setenv("QROAR_SEED", "9")
    assert run("synth", "--out", both, "--seed", 5, *SMALL) == EXIT_OK
    monkeypatch.delenv("QROAR_SEED")
    assert run("synth", "--out", plain, *SMALL) == EXIT_OK
    want = read_dir_bytes(flagged)
    assert read_dir_bytes(enved) == want
    assert read_dir_bytes(both) == want
    assert read_dir_bytes(plain) != want  # defaults to seed 0
    zero = str(tmp_path / "zero")
    assert run("synth", "--out", zero, "--seed", 0, *SMALL) == EXIT_OK
    assert read_dir_bytes(plain) == read_dir_bytes(zero)


def test_seed_env_must_be_integer(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("QROAR_SEED", "soup")
    assert run("synth", "--out", str(tmp_path / "x"), *SMALL) == EXIT_VALIDATION
    assert "QROAR_SEED" in capsys.readouterr().err


def test_diagnose_outlier_band_has_max_weight_tir(report_path):
    report = read_report(report_path)
    # synth targets pairs 2 and 3; with 8 bands over 8 pairs those are bands 2, 3
    assert int(np.argmax(report.band_tir_w)) in (2, 3)


def test_diagnose_without_interpolation_keeps_activation_tir_at_one(tmp_path):
    bundle = str(tmp_path / "nopi")
    report = str(tmp_path / "nopi.json")
    args = list(SMALL)
    args[args.index("--pi-factor") + 1] = "1.0"
    assert run("synth", "--out", bundle, "--seed", 4, *args) == EXIT_OK
    assert run("diagnose", "--bundle", bundle, "--out", report, "--bands", 8) == EXIT_OK
    back = read_report(report)
    assert np.all(back.tir_a_per_pair == 1.0)
    assert np.all(back.band_tir_a == 1.0)


def test_diagnose_rejects_eps_zero(bundle_dir, tmp_path, capsys):
    code = run("diagnose", "--bundle", bundle_dir, "--out", str(tmp_path / "r.json"), "--eps", 0)
    assert code == EXIT_VALIDATION
    assert "eps" in capsys.readouterr().err


def test_band_count_gate(bundle_dir, tmp_path, capsys):
    out = str(tmp_path / "r.json")
    assert run("diagnose", "--bundle", bundle_dir, "--out", out, "--bands", 7) == EXIT_VALIDATION
    assert "--allow-nonstandard" in capsys.readouterr().err
    assert run("diagnose", "--bundle", bundle_dir, "--out", out,
               "--bands", 7, "--allow-nonstandard") == EXIT_OK
    for bands in (6, 8):
        assert run("diagnose", "--bundle", bundle_dir, "--out", out, "--bands", bands) == EXIT_OK


def test_grid_count_gate(bundle_dir, tmp_path, capsys):
    out = str(tmp_path / "p.json")
    code = run("search", "--bundle", bundle_dir, "--out", out, "--grid", 4)
    assert code == EXIT_VALIDATION
    assert "--grid" in capsys.readouterr().err


def test_search_joint_matches_exhaustive_enumeration(bundle_dir, tmp_path):
    out = str(tmp_path / "joint.json")
    code = run(
        "search", "--bundle", bundle_dir, "--out", out, "--strategy", "joint",
        "--bands", 3, "--grid", 5, "--samples", 512, "--seed", 3, "--allow-nonstandard",
    )
    assert code == EXIT_OK
    plan = read_plan(out)
    meta = plan.provenance["search"]
    bundle = read_bundle(bundle_dir)
    spec = ObjectiveSpec(lengths=bundle.eval_lengths, samples_per_length=512, window=256, seed=3)
    evaluate = LogitDistortionEvaluator(bundle, spec)
    grids = [build_grid((lo, hi), 5) for lo, hi in meta["windows"]]
    best = min(
        evaluate(ScalePlan(mode="symmetric", scales=np.asarray(combo),
                           partition=plan.partition, pairing=plan.pairing))
        for combo in itertools.product(*grids)
    )
    assert meta["objective_value"] == best
    assert evaluate(plan) == best


def test_search_huge_eta_stops_after_one_pass(bundle_dir, tmp_path):
    out = str(tmp_path / "one_pass.json")
    code = run(
        "search", "--bundle", bundle_dir, "--out", out, "--bands", 6,
        "--grid", 5, "--samples", 256, "--eta", 1e9, "--seed", 3,
    )
    assert code == EXIT_OK
    assert read_plan(out).provenance["search"]["passes"] == 1


def test_search_is_byte_deterministic(bundle_dir, tmp_path):
    paths = [str(tmp_path / f"plan{i}.json") for i in range(2)]
    for path in paths:
        code = run(
            "search", "--bundle", bundle_dir, "--out", path, "--bands", 6,
            "--grid", 5, "--samples", 256, "--seed", 11,
        )
        assert code == EXIT_OK
    assert open(paths[0], "rb").read() == open(paths[1], "rb").read()


def test_search_external_echo_backend(bundle_dir, tmp_path, capsys):
    out = str(tmp_path / "echo.json")
    backend = f"{sys.executable} {ECHO_BACKEND} --ppl 7.0"
    code = run(
        "search", "--bundle", bundle_dir, "--out", out, "--bands", 6, "--grid", 5,
        "--evaluator", "external", "--backend", backend, "--seed", 3,
    )
    assert code == EXIT_OK
    meta = read_plan(out).provenance["search"]
    # a constant backend cannot beat the identity plan, whose objective is the
    # echoed perplexity itself (weights sum to one)
    assert meta["objective_value"] == pytest.approx(7.0, rel=1e-12)
    assert meta["evaluator"] == "external"
    assert np.all(read_plan(out).scales == 1.0)


def test_search_backend_flag_pairing(bundle_dir, tmp_path, capsys):
    out = str(tmp_path / "p.json")
    assert run("search", "--bundle", bundle_dir, "--out", out,
               "--evaluator", "external") == EXIT_VALIDATION
    assert "--backend" in capsys.readouterr().err
    assert run("search", "--bundle", bundle_dir, "--out", out,
               "--backend", "cat") == EXIT_VALIDATION


def test_search_backend_failure_exits_3(bundle_dir, tmp_path):
    out = str(tmp_path / "p.json")
    backend = f"{sys.executable} {ECHO_BACKEND} --mode die"
    code = run(
        "search", "--bundle", bundle_dir, "--out", out, "--bands", 6, "--grid", 5,
        "--evaluator", "external", "--backend", backend, "--timeout", 5.0,
    )
    assert code == EXIT_BACKEND
    assert not os.path.exists(out)


def test_missing_bundle_exits_2(tmp_path, capsys):
    code = run("diagnose", "--bundle", str(tmp_path / "nothing"),
               "--out", str(tmp_path / "r.json"))
    assert code == EXIT_IO


def test_search_rejects_mismatched_report(bundle_dir, tmp_path, capsys):
    six = str(tmp_path / "six.json")
    assert run("diagnose", "--bundle", bundle_dir, "--out", six, "--bands", 6) == EXIT_OK
    code = run("search", "--bundle", bundle_dir, "--report", six,
               "--out", str(tmp_path / "p.json"), "--bands", 8)
    assert code == EXIT_VALIDATION
    assert "6 bands" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert run("no-such-command") == EXIT_VALIDATION
    capsys.readouterr()
    assert run("diagnose") == EXIT_VALIDATION  # missing required flags
    assert "error" in capsys.readouterr().err


def make_plan_file(tmp_path, scales, mode="symmetric"):
    from qroar.bands import partition_log_freq

    part = partition_log_freq(np.geomspace(1.0, 1e-3, 8), len(scales))
    plan = ScalePlan(mode=mode, scales=np.asarray(scales, float),
                     partition=part, pairing="half_split", provenance={})
    path = str(tmp_path / "plan.json")
    write_plan(plan, path)
    return path


def test_apply_doubles_and_halves(tmp_path, capsys):
    rng = np.random.default_rng(5)
    w_q = rng.standard_normal((16, 8)).astype(np.float32)
    w_k = rng.standard_normal((16, 8)).astype(np.float32)
    src = str(tmp_path / "m.safetensors")
    write_tensors({"h.q_proj.weight": w_q, "h.k_proj.weight": w_k}, src)
    plan = make_plan_file(tmp_path, [2.0])
    dst = str(tmp_path / "out.safetensors")
    assert run("apply", "--checkpoint", src, "--plan", plan, "--out", dst) == EXIT_OK
    out = capsys.readouterr().out
    assert "patched 2 tensors" in out
    assert "h.q_proj.weight\tq" in out and "g=2" in out
    from qroar.io import read_tensors

    patched, _, _ = read_tensors(dst)
    assert np.array_equal(patched["h.q_proj.weight"], 2.0 * w_q)
    assert np.array_equal(patched["h.k_proj.weight"], 0.5 * w_k)


def test_apply_identity_is_noop(tmp_path):
    rng = np.random.default_rng(6)
    src = str(tmp_path / "m.safetensors")
    write_tensors(
        {
            "h.q_proj.weight": rng.standard_normal((16, 8)).astype(np.float32),
            "h.k_proj.weight": rng.standard_normal((16, 8)).astype(np.float32),
        },
        src,
    )
    plan = make_plan_file(tmp_path, [1.0, 1.0])
    dst = str(tmp_path / "out.safetensors")
    assert run("apply", "--checkpoint", src, "--plan", plan, "--out", dst) == EXIT_OK
    assert open(src, "rb").read() == open(dst, "rb").read()


def test_apply_no_match_exits_1(tmp_path, capsys):
    rng = np.random.default_rng(7)
    src = str(tmp_path / "m.safetensors")
    write_tensors({"mlp.weight": rng.standard_normal((8, 8)).astype(np.float32)}, src)
    plan = make_plan_file(tmp_path, [2.0])
    code = run("apply", "--checkpoint", src, "--plan", plan,
               "--out", str(tmp_path / "out.safetensors"))
    assert code == EXIT_VALIDATION
    assert "matched" in capsys.readouterr().err


def test_report_text_defaults_identity_factor(report_path, capsys):
    assert run("report", "--report", report_path) == EXIT_OK
    out = capsys.readouterr().out
    assert "bands=8" in out
    rows = [line for line in out.splitlines() if line.strip()[:1].isdigit()]
    assert len(rows) == 8
    assert all(row.split()[-1] == "1" for row in rows)  # g* column, no plan joined


def test_report_csv_has_eight_columns(bundle_dir, report_path, tmp_path, capsys):
    plan_path = str(tmp_path / "plan.json")
    code = run("search", "--bundle", bundle_dir, "--report", report_path, "--out", plan_path,
               "--bands", 8, "--grid", 5, "--samples", 256, "--seed", 3)
    assert code == EXIT_OK
    capsys.readouterr()
    out_csv = str(tmp_path / "table.csv")
    assert run("report", "--report", report_path, "--plan", plan_path,
               "--format", "csv", "--out", out_csv) == EXIT_OK
    with open(out_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["band", "omega_med", "ip", "tir_w", "tir_a", "g_min", "g_max", "g_star"]
    assert all(len(row) == 8 for row in rows)
    assert len(rows) == 9
    plan = read_plan(plan_path)
    got = [float(row[-1]) for row in rows[1:]]
    assert got == pytest.approx(list(plan.scales), rel=1e-11)


def test_report_json_round_trips_schema(report_path, capsys):
    assert run("report", "--report", report_path, "--format", "json") == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    back = report_from_document(doc)
    assert back.partition.num_bands == 8


def test_report_rejects_band_mismatch(report_path, tmp_path, capsys):
    plan = make_plan_file(tmp_path, [1.0, 1.0, 1.0])
    assert run("report", "--report", report_path, "--plan", plan) == EXIT_VALIDATION
    assert "bands" in capsys.readouterr().err
