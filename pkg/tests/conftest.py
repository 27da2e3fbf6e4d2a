import pytest

from pcrwkv.data import Manifest, build_benchmark
from pcrwkv.harness.runconfig import RunConfig, TrainSettings
from pcrwkv.model import ModelConfig

TINY_MODEL = ModelConfig(
    stage_blocks=(1, 1, 1, 1), stage_widths=(8, 8, 8, 8), stage_points=(16, 8, 4, 2), head_init="random"
)


@pytest.fixture(scope="session")
def tiny_bench(tmp_path_factory):
    """Small materialised benchmark: 4 domains, 5 classes, 32 points per cloud."""
    root = tmp_path_factory.mktemp("bench") / "data"
    build_benchmark(Manifest(points=32, train_per_class=2, test_per_class=2, seed=3), root)
    return root


@pytest.fixture
def tiny_run(tiny_bench, tmp_path):
    return RunConfig(
        data_root=str(tiny_bench),
        target="occluded",
        model=TINY_MODEL,
        train=TrainSettings(epochs=2, batch_per_domain=2, lr=1e-3, eval_batch=8),
        seed=0,
        out_dir=str(tmp_path / "run"),
    )


# criterion number -> one-line verdict, filled by test_acceptance and echoed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
