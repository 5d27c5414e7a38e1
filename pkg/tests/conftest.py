import numpy as np
import pytest
import torch

from lpsr.data import DataConfig, Manifest, build_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory) -> Manifest:
    """24 plates (16/4/4) rendered once per session."""
    out = tmp_path_factory.mktemp("tiny_data")
    cfg = DataConfig(
        out_dir=str(out), num_plates=24, split_fractions={"train": 16 / 24, "val": 4 / 24, "test": 4 / 24}, seed=5
    )
    return build_dataset(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
