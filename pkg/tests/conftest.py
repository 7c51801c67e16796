import dataclasses

import pytest

from pmnet.data import SynthConfig, synth_generate
from pmnet.optim import TrainSchedule
from pmnet.trainer import PipelineConfig

TINY_SYNTH = SynthConfig(num_scenes=4, feature_dim=8, samples_per_scene=20, num_multiscene=30,
                         num_multiscene_test=60, noise_sigma=0.5, center_scale=2.0, seed=0)


def tiny_config(**kw) -> PipelineConfig:
    base = PipelineConfig(
        embed_dim=8, hidden=(16,), num_heads=2, key_dim=8, value_dim=8,
        phase1=TrainSchedule(learning_rate=5e-3, max_epochs=10),
        phase2=TrainSchedule(learning_rate=5e-3, max_epochs=15),
    )
    return dataclasses.replace(base, **kw)


@pytest.fixture(scope="session")
def tiny_data():
    return synth_generate(TINY_SYNTH)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with its measured detail."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_criterion_" not in getattr(rep, "nodeid", "") or rep.when != "call":
                continue
            props = dict(rep.user_properties)
            lines.append((props.get("criterion", 0), outcome, props.get("title", rep.nodeid),
                          props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num, outcome, title, detail in sorted(lines):
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num}: {mark}  {title}  {detail}".rstrip())
