import os
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

ROOT = Path(__file__).resolve().parent.parent
TOY_CONFIG = ROOT / "configs" / "toy.yaml"

_CRITERIA = {}


def record_criterion(number, ok, detail):
    """Remember one acceptance line; printed again in the terminal summary."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])


@pytest.fixture(scope="session")
def toy_world(tmp_path_factory):
    """Detectors, datasets and run config from the bundled toy config (detectors cached)."""
    from enspatch import cli
    from enspatch.datasets import generate_synthetic

    if not os.environ.get(cli.CACHE_ENV):
        os.environ[cli.CACHE_ENV] = str(tmp_path_factory.mktemp("cache"))
    rc = cli.load_run_config(TOY_CONFIG)
    detectors = {mid: cli.build_detector(rc, mid) for mid in rc.detectors}
    return {
        "rc": rc,
        "detectors": detectors,
        "train": generate_synthetic(rc.dataset["synthetic"], split="train"),
        "eval": generate_synthetic(rc.eval_dataset["synthetic"], split="eval"),
    }
