import importlib
import json

import numpy as np
import pytest

from canreid import cli
from canreid.data import generate_synthetic, load_manifest
from canreid.model import build_model, load_checkpoint
from canreid.train import TrainConfig, TrainingDiverged, evaluate_checkpoint, lr_at, paper_config, train

train_mod = importlib.import_module("canreid.train")

TINY = dict(branches=[1, 3], embed_dim=8, stem_channels=4, widths=[4, 4, 6, 6], P=2, K=2,
            eval_every=0)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    generate_synthetic(d, num_ids=4, per_id=6, seed=0)
    return d


def test_lr_paper_schedule():
    cfg = paper_config()
    assert lr_at(100, cfg) == pytest.approx(3e-4, rel=1e-12)
    assert lr_at(249, cfg) == pytest.approx(3e-4, rel=1e-12)
    assert lr_at(250, cfg) == pytest.approx(3e-5, rel=1e-12)
    assert lr_at(350, cfg) == pytest.approx(3e-6, rel=1e-12)
    assert lr_at(599, cfg) == pytest.approx(3e-7, rel=1e-12)
    levels = [lr_at(e, cfg) for e in range(cfg.epochs)]
    assert all(a >= b for a, b in zip(levels, levels[1:]))
    assert len(set(levels)) == len(cfg.decay_epochs) + 1
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_paper_config_shapes():
    cfg = paper_config()
    assert cfg.backbone().output_hw == (24, 8)
    assert cfg.P * cfg.K == 32 and cfg.embed_dim == 256 and cfg.center_weight == 0.0005


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(decay_epochs=[10, 10])
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 3, "branches": [1, 3]}))
    cfg = TrainConfig.from_json(tmp_path / "c.json")
    assert cfg.epochs == 3 and TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_epochs_checkpoint_is_init(dataset, tmp_path):
    cfg = TrainConfig(**TINY, epochs=0, seed=4)
    res = train(cfg, load_manifest(dataset), tmp_path / "run", evaluate_at_end=False)
    loaded = load_checkpoint(res.checkpoint)
    model_seed = int(np.random.SeedSequence(4).generate_state(2)[0])
    fresh = build_model(cfg.backbone(), loaded.branches, 8, 4, model_seed)
    for a, b in zip(fresh.parameters(), loaded.parameters()):
        assert a.name == b.name and np.array_equal(a.data, b.data)
    assert not res.log.steps


def test_deterministic_loss_sequence(dataset):
    m = load_manifest(dataset)
    cfg = TrainConfig(**TINY, epochs=100, max_steps=10, seed=7)
    a, b = train(cfg, m), train(cfg, m)
    assert len(a.log.steps) == 10
    assert a.log.loss_values() == b.log.loss_values()
    assert a.report.to_dict() == b.report.to_dict()
    c = train(TrainConfig(**TINY, epochs=100, max_steps=10, seed=8), m)
    assert c.log.loss_values() != a.log.loss_values()


def test_metrics_log_contents(dataset, tmp_path):
    cfg = TrainConfig(**{**TINY, "eval_every": 1}, epochs=3, decay_epochs=[2], checkpoint_every=2)
    res = train(cfg, load_manifest(dataset), tmp_path / "run")
    steps = res.log.steps
    assert [s["step"] for s in steps] == list(range(len(steps)))
    for s in steps:
        assert s["lr"] == lr_at(s["epoch"], cfg)
        assert abs(s["total"] - (s["ce"] + s["triplet"] + cfg.center_weight * s["center"])) <= 1e-10
    assert [e["epoch"] for e in res.log.evals] == [0, 1, 2]
    run = tmp_path / "run"
    assert (run / "checkpoint_epoch0002" / "meta.json").exists()
    assert len((run / "metrics.jsonl").read_text().splitlines()) == len(steps) + 3
    assert (run / "evals.csv").read_text().startswith("epoch,mAP,rank1")
    r1 = evaluate_checkpoint(res.checkpoint, load_manifest(dataset))
    r2 = evaluate_checkpoint(res.checkpoint, load_manifest(dataset))
    assert r1.to_dict() == r2.to_dict() == res.report.to_dict()


def test_nan_loss_aborts(dataset, monkeypatch):
    real = train_mod.composite_loss

    def poisoned(*args, **kwargs):
        br = real(*args, **kwargs)
        br.total = br.total * float("nan")
        return br

    monkeypatch.setattr(train_mod, "composite_loss", poisoned)
    with pytest.raises(TrainingDiverged):
        train(TrainConfig(**TINY, epochs=1), load_manifest(dataset))


def test_pk_violation_rejected(dataset):
    with pytest.raises(ValueError):
        train(TrainConfig(**{**TINY, "K": 4}, epochs=1), load_manifest(dataset))


def test_cli_smoke(tmp_path, capsys):
    data, run = tmp_path / "d", tmp_path / "run"
    assert cli.main(["synth", "--ids", "4", "--per-id", "6", "--out", str(data)]) == 0
    assert json.loads(capsys.readouterr().out)["records"] == 24
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--data", str(data),
                     "--out", str(run), "--epochs", "1", "--set", "seed=3"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] > 0 and (run / "metrics.jsonl").exists()
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint"), "--data", str(data),
                     "--max-rank", "3", "--rank-csv", str(tmp_path / "r.csv")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"mAP", "cmc", "queries_evaluated", "queries_skipped"}
    assert (tmp_path / "r.csv").exists()
    assert cli.main(["inspect", "--checkpoint", str(run / "checkpoint")]) == 0
    assert "b1_p3.local1" in capsys.readouterr().out


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(tmp_path), "--data", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err
    (tmp_path / "c.json").write_text(json.dumps({"nope": 1}))
    generate_synthetic(tmp_path / "d", 4, 4)
    assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / "r")]) == 1
    with pytest.raises(SystemExit):
        cli.main(["train", "--unknown-flag"])


def test_cli_gradcheck(capsys):
    assert cli.main(["gradcheck", "--trials", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
    assert any("composite_loss_toy_model" in line for line in lines)
