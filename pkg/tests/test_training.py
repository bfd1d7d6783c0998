import json
from dataclasses import replace

import numpy as np
import pytest

from msupercon import model as M
from msupercon import numerics as nx
from msupercon import training as T
from msupercon.data import AugmentPolicy, Dataset, Sample
from msupercon.errors import ConfigError, NumericalError, UsageError
from oracles import adam_reference

SMALL_MODEL = M.ModelConfig(image_shape=(3, 8, 8), rep_dim=6, proj_hidden=8, proj_out=4, conv_channels=(3, 4),
                            classifier_hidden=(8,), num_aux=2)


def toy_dataset(n=24, seed=0, aux_names=M.CANONICAL_AUX):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        y = i % 4
        img = np.clip(0.5 + 0.1 * y + 0.05 * rng.standard_normal((3, 8, 8)), 0, 1)
        aux = {name: y + 0.1 * rng.standard_normal((4, 4)) for name in aux_names}
        samples.append(Sample(f"s{i}", img, aux, y))
    return Dataset(samples)


def config(**kw):
    base = dict(epochs_stage1=2, epochs_stage2=2, batch_size=8, model=SMALL_MODEL)
    base.update(kw)
    return T.TrainConfig(**base)


# ---------------------------------------------------------------- optimizer


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(0)
    params = M.init_params(SMALL_MODEL, 0)
    name = "classifier/fc2.w"
    w0 = params[name].data.copy()
    grads = [rng.standard_normal(w0.shape) for _ in range(5)]
    opt = T.Optimizer(T.OptimizerConfig(learning_rate=0.01))
    for g in grads:
        opt.step(params, {name: g})
    np.testing.assert_allclose(params[name].data, adam_reference(w0, grads, 0.01), rtol=0, atol=1e-15)
    assert opt.iteration == 5


def test_sgd_exact():
    params = M.init_params(SMALL_MODEL, 0)
    g = {n: np.full(t.shape, 0.5) for n, t in params.named()}
    old = {n: t.data.copy() for n, t in params.named()}
    T.optimizer_step(params, g, T.Optimizer(T.OptimizerConfig(kind="sgd", learning_rate=0.1)))
    for n, t in params.named():
        assert np.max(np.abs(t.data - (old[n] - 0.1 * g[n]))) == 0


def test_optimizer_skips_frozen_and_checks_shapes():
    params = M.init_params(SMALL_MODEL, 0).freeze("encoder")
    before = params.checksum(["encoder"])
    g = {n: np.ones(t.shape) for n, t in params.named()}
    T.Optimizer().step(params, g)
    assert params.checksum(["encoder"]) == before
    with pytest.raises(UsageError):
        T.Optimizer().step(params, {"classifier/fc1.b": np.ones(3)})


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_learning_rate_changes_nothing(kind):
    ds = toy_dataset()
    cfg = config(optimizer_stage1=T.OptimizerConfig(kind=kind, learning_rate=0.0),
                 optimizer_stage2=T.OptimizerConfig(kind=kind, learning_rate=0.0))
    params = M.init_params(SMALL_MODEL, 0)
    before = M.serialize(params)
    params, _ = T.train_representation(ds, cfg, params)
    params, _ = T.train_classifier(ds, params, cfg)
    assert M.serialize(params) == before


@pytest.mark.parametrize("kw", [{"epochs_stage1": 0}, {"batch_size": 1}, {"classification_loss": "hinge"}])
def test_train_config_rejects(kw):
    with pytest.raises(ConfigError):
        config(**kw)


def test_optimizer_config_rejects():
    with pytest.raises(ConfigError):
        T.OptimizerConfig(kind="rmsprop")


def test_defaults():
    cfg = T.TrainConfig()
    assert (cfg.epochs_stage1, cfg.epochs_stage2, cfg.batch_size) == (15, 10, 16)
    assert cfg.optimizer_stage1.kind == "adam" and cfg.optimizer_stage1.learning_rate == 1e-3
    assert cfg.loss.tau == 0.1 and not cfg.two_view


# ------------------------------------------------------------------- stages


def test_stage1_touches_only_encoder_and_projection():
    ds = toy_dataset()
    params = M.init_params(SMALL_MODEL, 0)
    other = params.checksum(["aux_featurizer", "classifier"])
    mine = params.checksum(["encoder", "projection"])
    params, report = T.train_representation(ds, config(), params)
    assert params.checksum(["aux_featurizer", "classifier"]) == other
    assert params.checksum(["encoder", "projection"]) != mine
    assert [r.epoch for r in report.records] == [1, 2]
    assert all(r.stage == 1 and r.train_accuracy is None for r in report.records)
    assert report.counters["stage1_batches"] == 6


def test_stage2_freezes_encoder_and_projection_bitwise():
    ds = toy_dataset()
    params = M.init_params(SMALL_MODEL, 0)
    frozen = b"".join(t.data.tobytes() for _, t in params.named(["encoder", "projection"]))
    params, report = T.train_classifier(ds, params, config(epochs_stage2=3))
    after = b"".join(t.data.tobytes() for _, t in params.named(["encoder", "projection"]))
    assert after == frozen
    assert len(report.records) == 3 and all(0 <= r.train_accuracy <= 1 for r in report.records)


def test_stage2_requires_aux_in_dataset():
    ds = toy_dataset(aux_names=("slope",))
    with pytest.raises(ConfigError, match="altitude"):
        T.train_classifier(ds, M.init_params(SMALL_MODEL, 0), config())


def test_stage2_learns_toy_problem():
    ds = toy_dataset(48)
    cfg = config(epochs_stage2=30, optimizer_stage2=T.OptimizerConfig(learning_rate=1e-2))
    params, report = T.train_classifier(ds, M.init_params(SMALL_MODEL, 0), cfg)
    losses = report.losses(2)
    assert losses[-1] < losses[0]
    assert report.records[-1].train_accuracy > 0.9


def test_no_positive_batches_are_counted_not_stepped():
    # four samples, four classes: no anchor has a positive
    ds = toy_dataset(4)
    params = M.init_params(SMALL_MODEL, 0)
    before = params.checksum()
    params, report = T.train_representation(ds, config(batch_size=4), params)
    assert report.counters["stage1_no_positive_batches"] == 2
    assert params.checksum() == before


def test_singleton_batch_skipped():
    ds = toy_dataset(9)
    _, report = T.train_representation(ds, config(batch_size=8))
    assert report.counters["stage1_skipped_singletons"] == 2


def test_non_finite_loss_reports_location():
    ds = toy_dataset()
    params = M.init_params(SMALL_MODEL, 0)
    params["classifier/fc2.b"].data[0] = np.nan
    with pytest.raises(NumericalError) as info:
        T.train_classifier(ds, params, config())
    assert (info.value.stage, info.value.epoch, info.value.batch) == (2, 1, 0)


def test_two_view_doubles_batch():
    ds = toy_dataset(8)
    cfg = config(two_view=True, batch_size=8, augment=AugmentPolicy(elastic=False))
    images, labels = T._stage1_batch(ds, np.arange(8), cfg, epoch=1)
    assert images.shape[0] == 16 and np.array_equal(labels[:8], labels[8:])


# ------------------------------------------------------------------ reports


def test_epoch_record_keys():
    rec = T.EpochRecord(1, 3, 0.5, None, 1.25)
    assert list(json.loads(rec.to_json())) == ["stage", "epoch", "mean_loss", "train_accuracy", "seconds"]


def test_pipeline_deterministic_and_outputs(tmp_path, monkeypatch):
    monkeypatch.setenv("MSCN_DETERMINISTIC", "1")
    ds = toy_dataset()
    cfg = config()
    outs = []
    for k in range(2):
        T.run_pipeline(cfg, ds, val=ds, test=ds, out_dir=tmp_path / str(k))
        outs.append({name: (tmp_path / str(k) / name).read_bytes() for name in (T.CHECKPOINT_NAME, T.REPORT_NAME, T.SUMMARY_NAME)})
    assert outs[0] == outs[1]
    lines = outs[0][T.REPORT_NAME].decode().splitlines()
    assert len(lines) == 4 and all(json.loads(x)["seconds"] == 0.0 for x in lines)
    summary = json.loads(outs[0][T.SUMMARY_NAME])
    assert set(summary["final"]) == {"val", "test"} and "accuracy" in summary["final"]["test"]
    assert [v["stage"] for v in summary["validation"]] == [1, 1, 2, 2]


def test_stage1_only_keeps_classifier_at_init(tmp_path):
    ds = toy_dataset()
    cfg = config()
    params, report = T.run_pipeline(cfg, ds, out_dir=tmp_path, stage1_only=True)
    assert len(report.records) == cfg.epochs_stage1
    loaded = M.load_checkpoint(tmp_path / T.CHECKPOINT_NAME)
    init = M.init_params(SMALL_MODEL, cfg.seed)
    assert loaded.checksum(["aux_featurizer", "classifier"]) == init.checksum(["aux_featurizer", "classifier"])


def test_thread_limits_env(monkeypatch):
    monkeypatch.setenv("MSCN_THREADS", "1")
    with T.thread_limits():
        pass
    monkeypatch.delenv("MSCN_THREADS")
    monkeypatch.setenv("MSCN_DETERMINISTIC", "1")
    assert T.deterministic_mode()


def test_contrastive_loss_on_matches_manual():
    ds = toy_dataset(8)
    params = M.init_params(SMALL_MODEL, 0)
    from msupercon.losses import supervised_contrastive_loss

    z = M.projection_forward(M.encoder_forward(ds.images(), params), params)
    want = supervised_contrastive_loss(z, ds.labels, 0.1).item()
    assert abs(T.contrastive_loss_on(params, ds, 0.1, batch_size=8) - want) <= 1e-12
