import numpy as np
import pytest

from garmentforge.procedural import build_humanoid


@pytest.fixture(scope="session")
def humanoid():
    return build_humanoid()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(humanoid):
    from garmentforge import synth

    return synth.generate(humanoid, synth.SynthConfig(n_subjects=5, seed=1, holdout_subjects=0.2, holdout_sizes=0.25))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
