import json

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xraynet.autodiff import Variable
from xraynet.checkpoint import save_checkpoint
from xraynet.dataset import DataBundle, SampleRecord
from xraynet.nn import build_model, mini_resnet
from xraynet.rng import Pcg32, derive_stream
from xraynet.synth import synthetic_bundle
from xraynet.training import (Adam, EpochMetrics, PRESETS, RunRecord, TrainConfig,
                              TrainingAborted, canonical_preset, evaluate, export_metrics, fit,
                              lr_at_epoch, make_loss, parse_metrics_csv, train_epoch,
                              _epoch_indices)


def cfg(preset="RCE", **kw):
    kw.setdefault("input_size", 32)
    kw.setdefault("batch_size", 4)
    kw.setdefault("epochs", 1)
    return TrainConfig(preset=preset, **kw)


class TestSchedule:
    def test_paper_values_exact(self):
        c = cfg(epochs=20)
        for e in range(10):
            assert lr_at_epoch(e, c) == 0.001
        for e in range(10, 20):
            assert lr_at_epoch(e, c) == 0.0005

    def test_epoch_zero_is_base(self):
        assert lr_at_epoch(0, cfg(base_lr=0.037)) == 0.037

    def test_closed_form_e25(self):
        assert lr_at_epoch(25, cfg()) == 0.001 * 0.5 ** 2 == 0.00025

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 500), st.integers(1, 40))
    def test_closed_form_everywhere(self, epoch, step):
        c = cfg(lr_step=step)
        assert lr_at_epoch(epoch, c) == c.base_lr * c.lr_factor ** (epoch // step)
        if epoch > 0:
            assert lr_at_epoch(epoch, c) <= lr_at_epoch(epoch - 1, c)

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_at_epoch(-1, cfg())


class TestAdam:
    def test_single_scalar_bias_corrected_step(self):
        p = Variable(np.array([1.0], dtype=np.float64), requires_grad=True)
        p._grad = np.array([2.0], dtype=np.float64)
        adam = Adam()
        adam.step({"p": p}, lr=0.001)
        # hand evaluation: mhat = 2, vhat = 4 -> delta = 0.001 * 2 / (2 + 1e-8)
        expected_delta = 0.001 * 2.0 / (2.0 + 1e-8)
        assert p.data[0] == pytest.approx(1.0 - expected_delta, abs=1e-15)
        assert expected_delta == pytest.approx(0.0009999999950, abs=1e-12)

    def test_zero_gradient_fresh_state_is_identity(self):
        p = Variable(np.array([3.0, -2.0], dtype=np.float32), requires_grad=True)
        p._grad = np.zeros(2, dtype=np.float32)
        before = p.data.copy()
        Adam().step({"p": p}, lr=0.1)
        npt.assert_array_equal(p.data, before)

    def test_frozen_parameter_untouched(self):
        p = Variable(np.array([1.0], dtype=np.float32), requires_grad=False)
        p._grad = np.array([5.0], dtype=np.float32)
        before = p.data.copy()
        Adam().step({"p": p}, lr=0.1)
        npt.assert_array_equal(p.data, before)

    def test_non_finite_gradient_aborts(self):
        p = Variable(np.array([1.0], dtype=np.float32), requires_grad=True)
        p._grad = np.array([np.nan], dtype=np.float32)
        with pytest.raises(TrainingAborted, match="'p'"):
            Adam().step({"p": p}, lr=0.1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(1e-5, 0.1))
    def test_first_step_bounded_by_lr(self, seed, lr):
        rng = Pcg32(seed, 0)
        p = Variable(rng.uniform_array((10,), -1, 1).astype(np.float32), requires_grad=True)
        p._grad = rng.uniform_array((10,), -5, 5).astype(np.float32)
        before = p.data.astype(np.float64)
        Adam().step({"p": p}, lr=lr)
        moved = np.abs(p.data.astype(np.float64) - before)
        # slack: the bias-corrected ratio bound plus float32 storage rounding
        storage_ulp = np.finfo(np.float32).eps * np.abs(before).max()
        assert moved.max() <= lr * (1.0 + 1e-6) + storage_ulp + 1e-12

    def test_step_counter_increments(self):
        adam = Adam()
        p = Variable(np.array([1.0], dtype=np.float32), requires_grad=True)
        for t in range(1, 4):
            p._grad = np.array([1.0], dtype=np.float32)
            adam.step({"p": p}, lr=0.01)
            assert adam.t == t


class TestPresets:
    def test_table_resolution(self):
        spec = PRESETS["PDCXFL"]
        assert (spec.family, spec.pretrained, spec.loss, spec.sampler) == \
            ("densenet", True, "focal", "plain")
        spec = PRESETS["PRCEW"]
        assert (spec.family, spec.pretrained, spec.loss, spec.sampler) == \
            ("resnet", True, "ce", "weighted")
        spec = PRESETS["RCE"]
        assert (spec.family, spec.pretrained, spec.loss, spec.sampler) == \
            ("resnet", False, "ce", "plain")

    def test_prcw_alias(self):
        assert canonical_preset("PRCW") == "PRCEW"
        assert canonical_preset("prfl") == "PRFL"

    def test_unknown_preset_lists_valid_codes(self):
        with pytest.raises(ValueError, match="PDCXCE"):
            canonical_preset("NOPE")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(preset="RCE", epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(preset="RCE", base_lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(preset="RCE", num_classes=1)


class TestEpochLoop:
    def test_vanishing_lr_leaves_parameters_bit_identical(self):
        bundle = synthetic_bundle(2, size=32, seed=3)
        # smallest subnormal: every Adam update underflows to exactly zero
        config = cfg(epochs=1, seed=3, base_lr=5e-324)
        model = build_model(mini_resnet(4, 32), derive_stream(3, "init"))
        before = {n: p.data.copy() for n, p in model.store.params.items()}
        metrics = train_epoch(model, bundle, config, Adam(), epoch=0)
        for name, data in before.items():
            npt.assert_array_equal(model.store.params[name].data, data)
        assert 0.0 <= metrics.train_acc <= 1.0
        assert np.isfinite(metrics.train_loss)

    def test_all_one_class_predictor_scores_prevalence(self):
        bundle = synthetic_bundle((6, 2, 0, 0), size=32, seed=4,
                                  test_per_class=(6, 2, 0, 0), binary=(0, 1))
        model = build_model(mini_resnet(2, 32), derive_stream(4, "init"))
        model.store.params["head.weight"].data[...] = 0.0
        model.store.params["head.bias"].data[...] = np.array([10.0, 0.0], dtype=np.float32)
        loss_fn = make_loss(cfg(num_classes=2))
        loss, acc, conf = evaluate(model, bundle.test, bundle, loss_fn, batch_size=4)
        assert acc == pytest.approx(6 / 8)
        assert conf[:, 1].sum() == 0  # nothing predicted as class 1

    def test_empty_split_rejected(self):
        bundle = synthetic_bundle(2, size=32, seed=5)
        model = build_model(mini_resnet(4, 32), derive_stream(5, "init"))
        with pytest.raises(ValueError, match="empty"):
            evaluate(model, [], bundle, make_loss(cfg()), 4)

    def test_epoch_metrics_deterministic(self):
        def run():
            bundle = synthetic_bundle(2, size=32, seed=6)
            model = build_model(mini_resnet(4, 32), derive_stream(6, "init"))
            return train_epoch(model, bundle, cfg(seed=6), Adam(), epoch=0)

        assert run() == run()

    def test_weighted_sampler_equalizes_exposure(self):
        # 50 batches x 400 samples: class exposure within +-5% of uniform
        counts = [1600, 200, 150, 50]
        labels = np.repeat(np.arange(4), counts)
        records = [SampleRecord(f"r{i}", int(l), "Train") for i, l in enumerate(labels)]
        bundle = DataBundle(train=records * 10, val=[], test=[],
                            images=lambda ref: None, num_classes=4, input_size=32)
        config = cfg(preset="PRCEW", num_classes=4, seed=7)
        idx = _epoch_indices(bundle, config, epoch=0)
        assert len(idx) == 20000  # covers well over 50 batches at any batch size
        got = np.bincount([bundle.train[i].label for i in idx], minlength=4) / len(idx)
        npt.assert_allclose(got, 0.25, atol=0.05 * 0.25)

    def test_plain_sampler_is_permutation(self):
        bundle = synthetic_bundle(3, size=32, seed=8)
        idx = _epoch_indices(bundle, cfg(seed=8), epoch=0)
        assert sorted(idx.tolist()) == list(range(len(bundle.train)))


class TestFit:
    def test_missing_checkpoint_rejected_before_training(self):
        bundle = synthetic_bundle(2, size=32, seed=9)
        with pytest.raises(ValueError, match="checkpoint"):
            fit(cfg(preset="PRCE", seed=9), bundle)
        with pytest.raises(ValueError, match="not found"):
            fit(cfg(preset="PRCE", seed=9, checkpoint="/nonexistent.xrnc"), bundle)

    def test_run_artifacts_written(self, tmp_path):
        bundle = synthetic_bundle(2, size=32, seed=10)
        record = fit(cfg(epochs=2, seed=10), bundle, run_dir=tmp_path)
        assert (tmp_path / "config.json").exists()
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "run.json").exists()
        assert (tmp_path / "model.xrnc").exists()
        echoed = json.loads((tmp_path / "config.json").read_text())
        assert echoed["seed"] == 10 and echoed["preset"] == "RCE"
        summary = json.loads((tmp_path / "run.json").read_text())
        assert summary["epochs"] == 2
        assert summary["epoch_metrics"] == "metrics.csv"
        assert summary["test_accuracy"] == pytest.approx(record.test_accuracy)

    def test_freeze_keeps_backbone_fixed_through_training(self, tmp_path):
        pre_bundle = synthetic_bundle(2, size=32, seed=11)
        pre = fit(cfg(epochs=1, seed=11), pre_bundle)
        ckpt = tmp_path / "b.xrnc"
        save_checkpoint(pre.model, ckpt)

        bundle = synthetic_bundle(2, size=32, seed=12)
        record = fit(cfg(preset="PRCE", epochs=2, seed=12, checkpoint=str(ckpt), freeze=True),
                     bundle)
        trained = record.model
        for name, p in trained.store.params.items():
            if name.startswith("head."):
                continue
            npt.assert_array_equal(p.data, pre.model.store.params[name].data)
        assert not np.array_equal(trained.store.params["head.weight"].data,
                                  pre.model.store.params["head.weight"].data)

    def test_paired_runs_weighted_sampler_lifts_minority_recall(self, tmp_path):
        # frozen configuration where the weighted sampler strictly beats the
        # plain run on minority recall at an equal seed and epoch budget
        seed = 1
        pre_bundle = synthetic_bundle(8, size=64, seed=seed + 1000)
        pre = fit(TrainConfig(preset="RCE", epochs=3, batch_size=8, seed=seed + 1000), pre_bundle)
        ckpt = tmp_path / "backbone.xrnc"
        save_checkpoint(pre.model, ckpt, epoch=3, seed=seed)

        bundle = synthetic_bundle((100, 0, 10, 0), size=64, seed=seed,
                                  test_per_class=(30, 0, 30, 0), binary=(0, 2))
        recalls = {}
        for preset in ("PRCE", "PRCEW"):
            config = TrainConfig(preset=preset, num_classes=2, epochs=1, batch_size=8,
                                 seed=seed, checkpoint=str(ckpt))
            rec = fit(config, bundle)
            conf = rec.test_confusion
            recalls[preset] = conf[1, 1] / conf[1].sum()
        assert recalls["PRCEW"] > recalls["PRCE"]


class TestExport:
    def _fake_record(self, epochs=20):
        rng = Pcg32(13, 0)
        metrics = [EpochMetrics(e, 0.001 * 0.5 ** (e // 10), rng.uniform(), rng.uniform(),
                                rng.uniform(), rng.uniform()) for e in range(epochs)]
        return RunRecord(config={"preset": "RCE"}, epoch_metrics=metrics, test_loss=0.5,
                         test_accuracy=0.75,
                         train_acc_avg=float(np.mean([m.train_acc for m in metrics])),
                         val_acc_avg=float(np.mean([m.val_acc for m in metrics])),
                         wall_clock=1.0, seed=13)

    def test_twenty_rows_plus_header(self, tmp_path):
        csv_path, _ = export_metrics(self._fake_record(20), tmp_path)
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 21
        assert lines[0] == "epoch,lr,train_loss,train_acc,val_loss,val_acc"

    def test_round_trip_equals_in_memory(self, tmp_path):
        record = self._fake_record(7)
        csv_path, _ = export_metrics(record, tmp_path)
        assert parse_metrics_csv(csv_path) == record.epoch_metrics

    def test_summary_average_matches_csv_recomputation(self, tmp_path):
        record = self._fake_record(9)
        csv_path, json_path = export_metrics(record, tmp_path)
        rows = parse_metrics_csv(csv_path)
        summary = json.loads(json_path.read_text())
        assert summary["val_acc_avg"] == pytest.approx(np.mean([m.val_acc for m in rows]))
        assert summary["train_acc_avg"] == pytest.approx(np.mean([m.train_acc for m in rows]))
