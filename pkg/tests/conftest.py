import time

import numpy as np
import pytest

from dicnet.data import DatasetSpec, SynthParams
from dicnet.distill import TrainConfig
from dicnet.model import BackboneConfig
from dicnet.pipeline import Pipeline, RunConfig

GATES: list[tuple[str, bool, str]] = []


def record_gate(criterion: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}" + (f"  ({detail})" if detail else "")
    GATES.append((criterion, ok, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not GATES:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(GATES, key=lambda g: g[0]):
        terminalreporter.write_line(line)


def small_spec(**kw) -> DatasetSpec:
    sizes = kw.pop("split_sizes", {"train": 16, "val": 8, "test": 8})
    return DatasetSpec(resolution=(32, 32), synth=SynthParams(split_sizes=sizes), **kw)


def small_config(out_dir, **kw) -> RunConfig:
    return RunConfig(
        dataset=small_spec(),
        teacher_model=BackboneConfig(family="tiny", feature_channels=16, width_mult=0.5, seed=1),
        teacher_train=TrainConfig(batch_size=8, epochs=2, seed=1),
        student_model=BackboneConfig(family="tiny", feature_channels=16, width_mult=0.5, seed=2),
        student_train=TrainConfig(batch_size=8, epochs=2, seed=2, snapshot_epochs=[0, 2]),
        output_dir=str(out_dir),
        **kw,
    )


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """The default toy benchmark, trained once per session."""
    pipe = Pipeline(RunConfig(output_dir=str(tmp_path_factory.mktemp("toy"))), reuse=False)
    t0 = time.perf_counter()
    pipe.teacher, pipe.student, pipe.stats  # noqa: B018
    pipe.report = pipe.evaluate("test", "dicnet")
    pipe.elapsed = time.perf_counter() - t0
    return pipe


@pytest.fixture(scope="session")
def small_pipe(tmp_path_factory):
    pipe = Pipeline(small_config(tmp_path_factory.mktemp("small")), reuse=False)
    pipe.teacher, pipe.student, pipe.stats  # noqa: B018
    return pipe


@pytest.fixture
def rng():
    return np.random.default_rng(0)
