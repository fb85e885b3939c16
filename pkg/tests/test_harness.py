import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from spgcde import cli
from spgcde.datasets import CaseStore, SynthSpec, write_synthetic
from spgcde.errors import CheckpointMismatch, ConfigError, DataError, MissingPrior
from spgcde.harness import (
    AblationConfig,
    CheckpointManifest,
    RunConfig,
    TrainConfig,
    config_hash,
    evaluate,
    fit,
    load_prior_segmenter,
    load_run,
    lr_at,
    predict,
    run_ablation_grid,
    train,
    train_prior,
)
from spgcde.harness.training import Sample, recalibrate_bn
from spgcde.network import ModelConfig

from conftest import tiny_run_config


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.base_lr, c.momentum, c.weight_decay) == (5e-3, 0.9, 1e-4)
    assert c.lr_schedule == "poly" and c.poly_power == 0.9 and c.input_size == (224, 224)
    assert (c.lambda1, c.lambda2) == (0.4, 0.6)
    for bad in [dict(base_lr=0), dict(batch_size=0), dict(lr_schedule="cosine"), dict(max_steps=-1)]:
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1.0})


def test_ablation_invariants_and_presets():
    with pytest.raises(ConfigError):
        AblationConfig(use_prior=False, use_local_encoder=True, fusion="none")
    with pytest.raises(ConfigError):
        AblationConfig(use_prior=True, use_local_encoder=False, fusion="sca")
    with pytest.raises(ConfigError):
        AblationConfig(prior_source="atlas")
    assert AblationConfig.preset("model1") == AblationConfig(False, False, "none")
    assert AblationConfig.preset("model2") == AblationConfig(True, True, "none")
    assert AblationConfig.preset("full") == AblationConfig(True, True, "sca")
    AblationConfig(use_prior=True, use_local_encoder=False, fusion="none")  # gated single stream


def test_config_hash():
    m = ModelConfig(num_classes=4, width=16)
    a = AblationConfig.preset("full")
    h = config_hash(m, a)
    assert h == config_hash(ModelConfig(num_classes=4, width=16), AblationConfig.preset("full"))
    assert h == config_hash(m, AblationConfig.preset("full", prior_source="ground-truth-oracle"))
    assert h != config_hash(m, AblationConfig.preset("model2"))
    assert h != config_hash(ModelConfig(num_classes=4, width=8), a)


def poly_oracle(base, t, total, power=0.9):
    return base * math.exp(power * math.log1p(-t / total)) if t < total else 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 100000), st.floats(1e-6, 1.0), st.data())
def test_schedule_law(total, base, data):
    t = data.draw(st.integers(0, total - 1))
    cfg = TrainConfig(base_lr=base)
    assert abs(lr_at(cfg, t, total) - poly_oracle(base, t, total)) <= 1e-12
    assert lr_at(TrainConfig(base_lr=base, lr_schedule="constant"), t, total) == base


def test_fit_applies_schedule(monkeypatch):
    seen = []
    real_step = torch.optim.SGD.step

    def spy(self, *a, **k):
        seen.append(self.param_groups[0]["lr"])
        return real_step(self, *a, **k)

    monkeypatch.setattr(torch.optim.SGD, "step", spy)
    model = torch.nn.Conv2d(1, 3, 1)
    rng = np.random.default_rng(0)
    samples = [Sample(str(i), rng.random((8, 8), dtype=np.float32), None, rng.integers(0, 3, (8, 8)).astype(np.uint8))
               for i in range(5)]
    cfg = TrainConfig(base_lr=0.1, batch_size=2, max_epochs=3, augment=False)
    res = fit(model, samples, cfg, lambda m, x, xl: m(x))
    assert res.steps == 9 and res.epochs == 3 and len(seen) == 9
    for t, lr in enumerate(seen):
        assert abs(lr - poly_oracle(0.1, t, 9)) <= 1e-12


def test_recalibrate_bn_matches_train_mode():
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Conv2d(1, 4, 3, padding=1), torch.nn.BatchNorm2d(4), torch.nn.ReLU(),
                              torch.nn.Conv2d(4, 2, 1), torch.nn.BatchNorm2d(2))
    rng = np.random.default_rng(1)
    samples = [Sample(str(i), rng.random((8, 8), dtype=np.float32), None, np.zeros((8, 8), np.uint8))
               for i in range(3)]
    x = torch.from_numpy(np.stack([s.image for s in samples])[:, None])
    recalibrate_bn(net, samples, batch_size=3, forward=lambda m, x, xl: m(x))
    with torch.no_grad():
        eval_out = net.eval()(x)
        train_out = net.train()(x)
    assert torch.allclose(train_out, eval_out, atol=1e-5)


def test_run_directory_contents(tiny_run):
    out, manifest = tiny_run
    for name in ("config.json", "best.pt", "last.pt", "manifest.json", "train_log.jsonl"):
        assert (out / name).is_file()
    m = CheckpointManifest.load(out)
    assert m == manifest
    assert m.step == 12 and m.checkpoints == {"best": "best.pt", "last": "last.pt"}
    assert m.metric_snapshot["num_cases"] == 2
    log = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == list(range(1, m.epoch + 1))
    assert all("val_dsc" in r for r in log if r["epoch"] % 2 == 0)
    run, model = load_run(out, "last")
    assert run.ablation == AblationConfig.preset("full")


def test_config_errors(tiny_store, tmp_path):
    with pytest.raises(ConfigError):
        train(tiny_store, RunConfig(ModelConfig(num_classes=9, width=16), TrainConfig(max_steps=1, input_size=(64, 64)),
                                    AblationConfig.preset("model1")), tmp_path / "r")
    with pytest.raises(ConfigError):
        tiny_run_config(preset="nope")


def test_empty_splits(tmp_path, tiny_run):
    root = tmp_path / "store"
    write_synthetic(SynthSpec(num_cases=2, split_fractions=(0.0, 0.0, 1.0)), root)
    with pytest.raises(DataError):
        train(root, tiny_run_config(steps=1), tmp_path / "r")
    root2 = tmp_path / "store2"
    write_synthetic(SynthSpec(num_cases=2, split_fractions=(1.0, 0.0, 0.0)), root2)
    with pytest.raises(DataError):
        evaluate(root2, tiny_run[0], split="test")


def test_missing_prior_files(tmp_path):
    root = tmp_path / "store"
    write_synthetic(SynthSpec(num_cases=2, split_fractions=(1.0, 0.0, 0.0), prior_dilation=None), root)
    with pytest.raises(MissingPrior):
        train(root, tiny_run_config(steps=1), tmp_path / "r")


def test_checkpoint_mismatch(tiny_store, tiny_run, tmp_path):
    src, _ = tiny_run
    bad = tmp_path / "run"
    bad.mkdir()
    for name in ("best.pt", "last.pt", "manifest.json"):
        (bad / name).write_bytes((src / name).read_bytes())
    cfg = json.loads((src / "config.json").read_text())
    cfg["ablation"]["fusion"] = "none"
    (bad / "config.json").write_text(json.dumps(cfg))
    with pytest.raises(CheckpointMismatch):
        evaluate(tiny_store, bad, split="val")
    with pytest.raises(CheckpointMismatch):
        load_run(src, expected_hash="0" * 64)
    with pytest.raises(CheckpointMismatch):
        load_run(tmp_path / "nowhere")


def test_evaluate_report_and_prior_swap(tiny_store, tiny_run):
    out, manifest = tiny_run
    rep = evaluate(tiny_store, out, split="val")
    assert rep.class_names == ["organ1", "organ2", "organ3"]
    assert rep.summary() == manifest.metric_snapshot
    oracle = evaluate(tiny_store, out, split="val", prior_source="ground-truth-oracle")
    assert sorted(oracle.per_case) == sorted(rep.per_case)
    header = rep.table().splitlines()[0].split()
    assert header[:3] == ["Model", "DSC(%)", "HD"] and header[3:] == rep.class_names


def test_predict_outputs(tiny_store, tiny_run, tmp_path):
    out, manifest = tiny_run
    case_dir = tiny_store / CaseStore(tiny_store).case_ids("test")[0]
    bundle = predict(case_dir / "image.f32", out, out_dir=tmp_path, overlay=True)
    pred = np.fromfile(tmp_path / "pred.u8", dtype=np.uint8)
    assert pred.size == 64 * 64 and pred.max() < 4
    assert np.array_equal(pred.reshape(64, 64), bundle.mask)
    assert (tmp_path / "overlay.png").stat().st_size > 0
    assert bundle.config_hash == manifest.config_hash
    assert np.allclose(bundle.probabilities.sum(0), 1.0, atol=1e-5)
    lone = tmp_path / "lone"
    lone.mkdir()
    for name in ("image.f32", "meta.json"):
        (lone / name).write_bytes((case_dir / name).read_bytes())
    with pytest.raises(MissingPrior):
        predict(lone / "image.f32", out, out_dir=tmp_path)
    predict(lone / "image.f32", out, prior_path=case_dir / "prior.u8", out_dir=tmp_path / "p2")


def test_single_preset_grid_equals_standalone(tiny_store, tmp_path):
    run = tiny_run_config(preset="model2", steps=6)
    grid = run_ablation_grid(tiny_store, ["model2"], run.model, run.train, tmp_path / "grid", split="val")
    assert len(grid.rows) == 1
    train(tiny_store, run, tmp_path / "solo")
    solo = evaluate(tiny_store, tmp_path / "solo", split="val")
    assert grid.rows[0].report.to_json() == solo.to_json()
    assert (tmp_path / "grid" / "model2" / "seed0" / "best.pt").read_bytes() == (tmp_path / "solo" / "best.pt").read_bytes()


def test_fusion_grid_rows(tiny_store, tmp_path):
    run = tiny_run_config(steps=2)
    names = ["fusion-none", "fusion-concat", "fusion-cross_attention", "fusion-sca"]
    grid = run_ablation_grid(tiny_store, names, run.model, run.train, tmp_path, split="val")
    lines = grid.table.splitlines()
    body = [l.split()[0] for l in lines[4:] if l.strip()]
    assert body == names
    assert [r.steps for r in grid.rows] == [2] * 4


def test_builtin_prior(tiny_store, tmp_path):
    cfg = TrainConfig(base_lr=0.05, max_steps=5, input_size=(64, 64), batch_size=2)
    d = train_prior(tiny_store, tmp_path / "prior", cfg)
    seg = load_prior_segmenter(d)
    img = CaseStore(tiny_store).load_split("val")[0].image
    out = seg.predict(img)
    assert out.shape == img.shape and out.dtype == np.uint8 and out.max() < 4
    assert seg.identity.startswith("builtin-unet-like:")
    big = np.kron(img, np.ones((2, 2), np.float32))
    assert seg.predict(big).shape == big.shape
    with pytest.raises(CheckpointMismatch):
        load_prior_segmenter(tmp_path)


def test_model1_overfit_loss(tmp_path):
    root = tmp_path / "store"
    write_synthetic(SynthSpec(num_cases=4, split_fractions=(1.0, 0.0, 0.0)), root)
    run = tiny_run_config(preset="model1", steps=200, batch_size=4, augment=False)
    manifest = train(root, run, tmp_path / "run")
    assert manifest.final_loss < 0.1


# ---------------------------------------------------------------------------
# CLI

def test_cli_end_to_end(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"num_cases": 6, "split_fractions": [0.5, 0.25, 0.25]}))
    data = tmp_path / "data"
    assert cli.main(["gen-synth", "--spec", str(spec), "--out", str(data)]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": {"width": 16},
                               "train": {"input_size": [64, 64], "batch_size": 2, "base_lr": 0.05}}))
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(data), "--config", str(cfg), "--preset", "model2",
                     "--out", str(run), "--max-steps", "3"]) == 0
    saved = json.loads((run / "config.json").read_text())
    assert saved["model"]["num_classes"] == 4 and saved["ablation"]["fusion"] == "none"
    report = tmp_path / "rep.json"
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(run), "--report", str(report)]) == 0
    assert json.loads(report.read_text())["aggregates"]["num_cases"] == len(CaseStore(data).case_ids("test"))
    assert report.with_suffix(".txt").is_file()
    case = next(p for p in sorted(data.iterdir()) if p.is_dir())
    assert cli.main(["predict", "--image", str(case / "image.f32"), "--ckpt", str(run),
                     "--out", str(tmp_path / "pred"), "--overlay"]) == 0
    assert (tmp_path / "pred" / "overlay.png").is_file()
    capsys.readouterr()
    assert cli.main(["defaults"]) == 0
    defaults = json.loads(capsys.readouterr().out)
    assert defaults["train"]["base_lr"] == 5e-3 and defaults["synth"]["contrast_gap"] == 0.2


def test_cli_exit_codes(tmp_path, tiny_store, tiny_run):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["train", "--data", str(tiny_store), "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    bad.write_text(json.dumps({"ablation": {"use_prior": False, "use_local_encoder": True}}))
    assert cli.main(["train", "--data", str(tiny_store), "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert cli.main(["gen-synth", "--out", str(tmp_path / "s"), "--spec", str(bad)]) == 2
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 3
    assert cli.main(["eval", "--data", str(tiny_store), "--ckpt", str(tmp_path / "none")]) == 4
