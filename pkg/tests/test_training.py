import csv
import json

import numpy as np
import pytest
import yaml

from xae.data import stack_sequences
from xae.models import ModelSpec
from xae.training import (EvalReport, FoldResult, GroupConfig, RunConfig, TrainingError, confusion,
                          cross_validate, mean_loss, per_class_f1, plan_runs, split_by_interaction, train,
                          weighted_f1, weighted_mean, write_loss_csv)


def brute_f1(pred, true, n=3):
    """Textbook weighted F1 from explicit TP/FP/FN counting."""
    total = 0.0
    for c in range(n):
        tp = sum(1 for p, t in zip(pred, true) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, true) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, true) if p != c and t == c)
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        total += f1 * sum(1 for t in true if t == c)
    return total / len(true)


# -- metrics -----------------------------------------------------------------------------------

def test_perfect_predictions():
    y = [0, 1, 2, 2, 1]
    assert weighted_f1(y, y) == 1.0
    cm = confusion(y, y)
    assert np.array_equal(cm, np.diag([1, 2, 2]))


def test_single_class_predictions():
    y = [0, 1, 2] * 4
    assert weighted_f1([1] * 12, y) == pytest.approx(1 / 6, abs=1e-4)


def test_single_off_diagonal():
    cm = confusion([1], [0])      # true LEFT(0), predicted ROBOT(1)
    assert cm.sum() == 1 and cm[0, 1] == 1


def test_confusion_rows_are_true_class():
    cm = confusion([2, 2, 0], [0, 1, 0])
    assert cm[0].tolist() == [1, 0, 1] and cm[1].tolist() == [0, 0, 1]


def test_metrics_reject_empty_and_mismatched():
    with pytest.raises(ValueError):
        weighted_f1([], [])
    with pytest.raises(ValueError):
        confusion([0, 1], [0])


def test_metrics_match_brute_force_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        pred, true = rng.integers(0, 3, n), rng.integers(0, 3, n)
        assert weighted_f1(pred, true) == pytest.approx(brute_f1(pred, true), abs=1e-12)
        pcf = per_class_f1(pred, true)
        assert pcf.shape == (3,) and np.all((pcf >= 0) & (pcf <= 1))


def test_weighted_mean_example():
    assert weighted_mean([0.8, 0.6], [300, 100]) == pytest.approx(0.75)


# -- configuration -------------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["iae_default", "xae_default", "tiny_xae", "sweep_xae"])
def test_config_yaml_roundtrip(tmp_path, name):
    cfg = RunConfig.preset(name)
    cfg.dump(tmp_path / "c.yaml")
    back = RunConfig.load(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict()


def test_xae_default_hyperparameters():
    cfg = RunConfig.xae_default()
    assert cfg.batch_size == 4 and cfg.num_epochs == 8
    assert cfg.groups["net4"].optimizer == "Adam"
    assert cfg.groups["net3"].gamma == pytest.approx(0.51241)
    iae = RunConfig.iae_default()
    assert iae.batch_size == 16 and iae.num_epochs == 15


def test_config_preset_key_and_nested_override(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"preset": "tiny_xae", "num_epochs": 2, "model": {"d_inner": 12}}))
    cfg = RunConfig.load(path)
    assert cfg.num_epochs == 2 and cfg.model.d_inner == 12
    assert cfg.model.embed_dim == RunConfig.tiny_xae().model.embed_dim
    assert RunConfig.load("tiny_xae").to_dict() == RunConfig.tiny_xae().to_dict()


def test_config_errors(tmp_path):
    with pytest.raises(KeyError):
        RunConfig.preset("huge")
    with pytest.raises(FileNotFoundError):
        RunConfig.load(tmp_path / "missing.yaml")
    with pytest.raises(ValueError):
        RunConfig(normalization="MINMAX")
    with pytest.raises(ValueError):
        RunConfig(batch_size=0)


# -- fold planning ---------------------------------------------------------------------------------

def test_plan_runs_counts():
    runs = plan_runs([f"int{i}" for i in range(10)], range(5))
    assert len(runs) == 50
    assert len(set(runs)) == 50


def test_plan_runs_needs_two_interactions():
    with pytest.raises(ValueError):
        plan_runs(["a", "a"], [0])


def test_split_is_disjoint(small_synth):
    seqs = small_synth.sequences
    tr, te = split_by_interaction(seqs, "int01")
    assert te and all(s.source_id == "int01" for s in te)
    assert all(s.source_id != "int01" for s in tr)
    assert len(tr) + len(te) == len(seqs)


def test_report_aggregation():
    folds = [FoldResult("a", 0, 0.8, 300, np.eye(3, dtype=int).tolist(), [1, 1, 1]),
             FoldResult("b", 0, 0.6, 100, np.eye(3, dtype=int).tolist(), [1, 1, 1]),
             FoldResult("a", 1, 1.0, 300, np.eye(3, dtype=int).tolist(), [1, 1, 1])]
    rep = EvalReport.aggregate(folds)
    assert rep.per_seed_f1[0] == pytest.approx(0.75)
    assert rep.per_seed_f1[1] == pytest.approx(1.0)
    assert rep.n_sequences == 700
    assert rep.confusion == (3 * np.eye(3, dtype=int)).tolist()


# -- training loop ---------------------------------------------------------------------------------

def small_setup(small_synth, epochs=1):
    cfg = RunConfig.tiny_xae()
    cfg.num_epochs = epochs
    faces, poses, y = stack_sequences(small_synth.sequences)
    return cfg, faces, poses, y


def snapshot(net):
    return [p.data.copy() for p in net.parameters()]


def test_zero_epochs_leaves_params(small_synth):
    cfg, faces, poses, y = small_setup(small_synth, epochs=0)
    net = cfg.model.build(np.random.default_rng(0))
    before = snapshot(net)
    res = train(net, faces, poses, y, cfg)
    assert res.epoch_loss == []
    for a, b in zip(before, snapshot(net)):
        np.testing.assert_array_equal(a, b)


def test_training_deterministic(small_synth):
    cfg, faces, poses, y = small_setup(small_synth)
    nets = [cfg.model.build(np.random.default_rng(4)) for _ in range(2)]
    for net in nets:
        train(net, faces, poses, y, cfg, seed=9)
    for a, b in zip(snapshot(nets[0]), snapshot(nets[1])):
        np.testing.assert_array_equal(a, b)


def test_frozen_group_unchanged(small_synth):
    cfg, faces, poses, y = small_setup(small_synth)
    net = cfg.model.build(np.random.default_rng(0))
    before = [p.data.copy() for p in net.param_groups()["net1"]]
    train(net, faces, poses, y, cfg, frozen=("net1",))
    for a, p in zip(before, net.param_groups()["net1"]):
        np.testing.assert_array_equal(a, p.data)


def test_nan_loss_aborts(small_synth):
    cfg, faces, poses, y = small_setup(small_synth)
    net = cfg.model.build(np.random.default_rng(0))
    with pytest.raises(TrainingError, match="epoch 0, batch 0"):
        train(net, faces, poses, y, cfg, prepare=lambda f, rng, training: np.full_like(f, np.nan))


def test_lr_recorded_per_group(small_synth, tmp_path):
    cfg, faces, poses, y = small_setup(small_synth, epochs=2)
    cfg.groups["net1"] = GroupConfig("SGD", 0.01, 0.5)
    res = train(cfg.model.build(np.random.default_rng(0)), faces, poses, y, cfg, track_initial=True)
    assert res.lrs["net1"] == pytest.approx([0.01, 0.005])
    assert np.isfinite(res.initial_loss)
    write_loss_csv(tmp_path / "loss.csv", res)
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["epoch", "loss"] and len(rows) == 3


def test_trained_loss_below_initial(tiny_model, synth_train):
    """300 sequences, 8 epochs: loss after training is below the loss at initialization."""
    faces, poses, y = stack_sequences(synth_train.sequences)
    cfg = tiny_model._config()
    fresh = cfg.model.build(np.random.default_rng(tiny_model.random_state))
    prepared = tiny_model._prepare(faces, None, False)
    initial = mean_loss(fresh, prepared, poses, y)
    final = mean_loss(tiny_model.net_, prepared, poses, y)
    assert final < initial
    assert tiny_model.history_.epoch_loss[-1] < tiny_model.history_.epoch_loss[0]


# -- cross-validation --------------------------------------------------------------------------------

def test_cross_validate_small(small_synth, tmp_path):
    cfg = RunConfig.tiny_xae(8, embed_dim=8, depth=1)
    cfg.num_epochs = 1
    rep = cross_validate(cfg, small_synth.sequences, seeds=[0, 1], test_ids=["int00", "int02"])
    assert len(rep.folds) == 4
    assert {(f.test_id, f.seed) for f in rep.folds} == {("int00", 0), ("int00", 1), ("int02", 0), ("int02", 1)}
    assert 0.0 <= rep.f1 <= 1.0
    n_test = sum(1 for s in small_synth.sequences if s.source_id in ("int00", "int02"))
    assert rep.n_sequences == 2 * n_test
    assert np.sum(rep.confusion) == rep.n_sequences
    rep.write(tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["n_sequences"] == rep.n_sequences
    assert (tmp_path / "folds.csv").exists() and (tmp_path / "confusion.csv").exists()


def test_model_spec_roundtrip():
    spec = ModelSpec.tiny_xae(16)
    assert ModelSpec.from_dict(spec.to_dict()) == spec
