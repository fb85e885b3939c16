import pytest

from spgcde.datasets import SynthSpec, write_synthetic
from spgcde.harness import AblationConfig, RunConfig, TrainConfig, train
from spgcde.network import ModelConfig

# criterion number -> (name, passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def tiny_run_config(preset="full", steps=12, seed=0, **train_kw):
    kw = dict(base_lr=0.05, max_steps=steps, input_size=(64, 64), batch_size=2, seed=seed, val_every=2)
    kw.update(train_kw)
    return RunConfig(ModelConfig(num_classes=4, width=16), TrainConfig(**kw), AblationConfig.preset(preset))


@pytest.fixture(scope="session")
def tiny_store(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_store")
    write_synthetic(SynthSpec(num_cases=8, split_fractions=(0.5, 0.25, 0.25), seed=3), root)
    return root


@pytest.fixture(scope="session")
def tiny_run(tiny_store, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_run")
    manifest = train(tiny_store, tiny_run_config(), out)
    return out, manifest


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {name}: {detail}")
