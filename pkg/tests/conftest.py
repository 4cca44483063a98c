"""Session-wide fixtures for the long end-to-end acceptance runs."""

import pytest


@pytest.fixture(scope="session")
def overfit_result(tmp_path_factory) -> dict:
    from edgegate.harness import run_overfit

    return run_overfit(tmp_path_factory.mktemp("overfit"))


@pytest.fixture(scope="session")
def ablation_result(tmp_path_factory) -> dict:
    from edgegate.harness import run_ablation

    return run_ablation(tmp_path_factory.mktemp("ablation"))
