import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from videdit import pipeline  # noqa: E402
from videdit.config import RunConfig  # noqa: E402


@pytest.fixture(scope="session")
def small_config(tmp_path_factory):
    """A fast end-to-end configuration with its own briefly pretrained weights."""
    root = tmp_path_factory.mktemp("small")
    config = RunConfig(seed=0, target_prompt="a blue square moving right", output_dir=str(root / "run"),
                       weights=str(root / "weights.npz"), pretrain_steps=300, pretrain_dataset_size=512,
                       sampler_steps=10, sdedit_t0=5, finetune_steps=20, nti_inner_iters=3,
                       num_frames=4)
    pipeline.pretrain(config, Path(config.weights))
    return config


@pytest.fixture(scope="session")
def small_session(small_config):
    return pipeline.prepare(small_config)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
