import os
import shutil
import subprocess
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

# the protocol golden fixture is shared with the plan producer's test suite
GOLDEN_PROTOCOL = os.path.normpath(
    os.path.join(os.path.dirname(__file__), "..", "..", "tests", "fixtures",
                 "protocol_golden.jsonl")
)

QROAR = shutil.which("qroar")

torch.set_num_threads(1)


def run_qroar(*argv: str) -> None:
    """Drive the plan producer's CLI; the only way these tests touch it."""
    assert QROAR is not None, "the qroar CLI must be installed for cross-checks"
    proc = subprocess.run(
        [QROAR, *argv], capture_output=True, text=True, timeout=300
    )
    assert proc.returncode == 0, f"qroar {argv[0]} failed:\n{proc.stderr}"


@pytest.fixture(scope="session")
def demo_model_dir(tmp_path_factory):
    """A seeded toy checkpoint directory plus its eval corpus."""
    from qroar_adapter.cli import main

    path = str(tmp_path_factory.mktemp("demo") / "model")
    assert main(["init-demo", "--out", path, "--seed", "0",
                 "--docs", "2", "--doc-tokens", "512"]) == 0
    return path


@pytest.fixture(scope="session")
def demo_corpus_path(demo_model_dir):
    return os.path.join(demo_model_dir, "corpus.json")


@pytest.fixture(scope="session")
def searched_plan_path(tmp_path_factory):
    """A real plan file produced end-to-end by the qroar CLI, with the same
    head geometry as the demo model (2 heads of dim 16, half_split)."""
    root = tmp_path_factory.mktemp("primary")
    bundle = str(root / "bundle")
    report = str(root / "report.json")
    plan = str(root / "plan.json")
    run_qroar("synth", "--out", bundle, "--seed", "3", "--d-model", "32",
              "--heads", "2", "--head-dim", "16", "--train-window", "64",
              "--pi-factor", "4.0", "--lengths", "32,128,256",
              "--min-samples", "256")
    run_qroar("diagnose", "--bundle", bundle, "--out", report, "--bands", "6")
    run_qroar("search", "--bundle", bundle, "--report", report, "--out", plan,
              "--bands", "6", "--grid", "5", "--samples", "256", "--seed", "3")
    return plan
