import dataclasses
import datetime
import json

import numpy as np
import pytest

from conftest import ScriptedRng
from mvda.errors import DataError, NumericError
from mvda.imaging import AugPolicy
from mvda.losses import LossConfig
from mvda.manifest import (
    DatasetManifest,
    ImageRecord,
    auto_holdout,
    split_by_container,
    strip_labels,
    view_candidates,
)
from mvda.model import ModelParams
from mvda.synthetic import SynthConfig, generate_synthetic
from mvda.trainer import (
    PRESETS,
    TrainConfig,
    TrainData,
    TrainState,
    _ShuffledStream,
    apply_preset,
    config_from_pairs,
    config_to_pairs,
    init_state,
    load_images,
    load_train_config,
    lr_schedule,
    make_train_batch,
    parse_config_text,
    sgd_step,
    train,
)
from mvda.viewmining import ViewSet

LR_AT_ONE = 0.0005773502691896258


def quick_config(**kw):
    base = dict(epochs=2, source_batch=4, target_batch=4, input_side=16,
                n_views=2, nmi_bins=8, nmi_side=8, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_defaults(self):
        config = TrainConfig()
        assert config.epochs == 20
        assert config.source_batch == 4 and config.target_batch == 4
        assert config.lr0 == 3e-3
        assert config.momentum == 0.9
        assert config.weight_decay == 1e-3
        assert config.alpha == 8.0 and config.beta == 0.75
        assert config.n_views == 5
        assert config.mining == "sgvm"
        assert config.tau == 0.8

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epochs": 0},
            {"source_batch": 0},
            {"target_batch": 0},
            {"lr0": 0.0},
            {"momentum": 1.0},
            {"n_views": 0},
            {"mining": "psychic"},
            {"input_side": 10},
            {"nmi_bins": 1},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestConfigFiles:
    def test_parse_text(self):
        text = "epochs = 5\n# full-line comment\n\ntau = 0.5  # inline comment\n"
        assert parse_config_text(text) == {"epochs": "5", "tau": "0.5"}

    def test_parse_text_reports_line(self):
        with pytest.raises(DataError, match=r"cfg:2"):
            parse_config_text("epochs = 5\nepochs 7\n", origin="cfg")

    def test_pairs_to_config(self):
        config = config_from_pairs({
            "epochs": "3", "lr0": "0.01", "target_self": "false",
            "norm_mean": "0.1, 0.2, 0.3", "mining": "random", "tau": "0.25",
        })
        assert config.epochs == 3
        assert config.lr0 == 0.01
        assert config.loss.target_self is False
        assert config.norm_mean == (0.1, 0.2, 0.3)
        assert config.mining == "random"
        assert config.loss.tau == 0.25

    @pytest.mark.parametrize(
        "pairs",
        [
            {"banana": "1"},
            {"epochs": "two"},
            {"target_self": "maybe"},
            {"norm_mean": "0.1,0.2"},
            {"tau": "1.5"},
            {"mining": "psychic"},
        ],
    )
    def test_bad_pairs(self, pairs):
        with pytest.raises(DataError):
            config_from_pairs(pairs)

    def test_round_trip(self):
        config = quick_config(
            lr0=0.007, momentum=0.85,
            loss=LossConfig(tau=0.37, label_mode="soft", target_self=False),
        )
        again = config_from_pairs(config_to_pairs(config))
        assert again == config

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 4\nlabel_mode = soft\ntau = 0.0\n")
        config = load_train_config(path)
        assert config.epochs == 4
        assert config.loss.label_mode == "soft"
        assert config.loss.tau == 0.0


class TestPresets:
    def test_source_only(self):
        loss = apply_preset(TrainConfig(), "source-only").loss
        assert (loss.source_view, loss.target_view, loss.target_self) == (False, False, False)

    def test_fixmatch(self):
        loss = apply_preset(TrainConfig(), "fixmatch").loss
        assert (loss.source_view, loss.target_view, loss.target_self) == (False, False, True)
        assert loss.label_mode == "hard" and loss.tau == 0.8 and loss.view_aug == "strong"

    def test_mv_match_hard(self):
        assert apply_preset(TrainConfig(), "mv-match-hard").loss == LossConfig()

    def test_mv_match_soft(self):
        loss = apply_preset(TrainConfig(), "mv-match-soft").loss
        assert loss.label_mode == "soft" and loss.tau == 0.0
        assert loss.source_view and loss.target_view and loss.target_self

    def test_wa2_only(self):
        loss = apply_preset(TrainConfig(), "wa2-only").loss
        assert loss.view_aug == "weak"
        assert loss.source_view and loss.target_view and not loss.target_self

    def test_unknown(self):
        with pytest.raises(DataError, match="unknown loss preset"):
            apply_preset(TrainConfig(), "mystery")

    def test_all_presets_build_valid_configs(self):
        for name in PRESETS:
            apply_preset(TrainConfig(), name)


class TestLrSchedule:
    def test_initial_value_exact(self):
        assert lr_schedule(0.0) == 3e-3

    def test_final_value(self):
        assert abs(lr_schedule(1.0) - LR_AT_ONE) < 1e-12

    def test_zero_beta_is_constant(self):
        for p in (0.0, 0.3, 1.0):
            assert lr_schedule(p, beta=0.0) == 3e-3

    def test_strictly_decreasing(self):
        values = [lr_schedule(p) for p in np.linspace(0, 1, 11)]
        assert all(a > b for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("p", [-0.01, 1.01])
    def test_progress_out_of_range(self, p):
        with pytest.raises(ValueError):
            lr_schedule(p)


def scalar_state(w=1.0):
    params = ModelParams(8, 2, 0, {"w": np.array([w])})
    rng = np.random.default_rng(0)
    return TrainState(params=params, buffers={"w": np.zeros(1)}, step=0, total_steps=1,
                      rng_source=rng, rng_target=rng, rng_view=rng, rng_aug=rng)


class TestSgdStep:
    def test_fixed_point(self):
        state = scalar_state(1.0)
        sgd_step(state, {"w": np.zeros(1)}, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert state.params.arrays["w"][0] == 1.0

    def test_plain_gradient_descent(self):
        state = scalar_state(1.0)
        sgd_step(state, {"w": np.array([0.25])}, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert abs(state.params.arrays["w"][0] - 0.975) < 1e-12

    def test_weight_decay_hand_step(self):
        state = scalar_state(1.0)
        sgd_step(state, {"w": np.zeros(1)}, lr=1.0, momentum=0.0, weight_decay=1e-3)
        assert abs(state.params.arrays["w"][0] - 0.999) < 1e-12

    def test_momentum_accumulates(self):
        state = scalar_state(1.0)
        grad = {"w": np.array([0.5])}
        sgd_step(state, grad, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert abs(state.params.arrays["w"][0] - 0.95) < 1e-12
        sgd_step(state, grad, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert abs(state.params.arrays["w"][0] - 0.855) < 1e-12

    def test_non_finite_gradient(self):
        state = scalar_state(1.0)
        with pytest.raises(NumericError):
            sgd_step(state, {"w": np.array([np.nan])}, lr=0.1)


class TestShuffledStream:
    def test_each_cycle_covers_all_records(self):
        records = list(range(8))
        stream = _ShuffledStream(records, np.random.default_rng(0))
        drawn = stream.draw(16)
        assert sorted(drawn[:8]) == records
        assert sorted(drawn) == sorted(records * 2)

    def test_draw_across_cycle_boundary(self):
        records = list(range(8))
        stream = _ShuffledStream(records, np.random.default_rng(1))
        first = stream.draw(6) + stream.draw(6)
        assert sorted(first[:8]) == records

    def test_empty_records(self):
        with pytest.raises(DataError):
            _ShuffledStream([], np.random.default_rng(0))


def const_record(rid, domain, view, label=0):
    geno = "alpha" if domain == "source" else "beta"
    return ImageRecord(
        id=rid, path=f"{rid}.png", domain=domain, genotype=geno,
        container_id=f"{geno}-t0-r0", capture_date=datetime.date(2022, 6, 21),
        view_id=view, label=label,
    )


def const_image(value):
    return np.full((16, 16, 3), value)


class TestMakeTrainBatch:
    """Batch assembly checked with constant images and weak view augmentation
    (constant rasters are invariant under flips, so role values are exact)."""

    def setup_method(self):
        self.s0 = const_record("s0", "source", 0, label=1)
        self.s1 = const_record("s1", "source", 1, label=0)
        self.t0 = const_record("t0", "target", 0, label=None)
        self.t1 = const_record("t1", "target", 1, label=None)
        self.images = {"s0": const_image(0.2), "s1": const_image(0.7),
                       "t0": const_image(0.4), "t1": const_image(0.9)}
        self.by_id = {r.id: r for r in (self.s0, self.s1, self.t0, self.t1)}
        self.data = TrainData(
            source_train=DatasetManifest([self.s0, self.s1], 2, ["a", "b"]),
            target_train=DatasetManifest([self.t0, self.t1], 2, ["a", "b"]),
            images=self.images,
        )

    def run_batch(self, config, view_sets, src, tgt):
        state = init_state(config, class_count=2, total_steps=4)
        roles, labels = make_train_batch(
            state, config, self.data, src, tgt, AugPolicy(), self.by_id, view_sets
        )
        return state, roles, labels

    def test_single_view_always_chosen(self):
        config = quick_config(
            source_batch=1, target_batch=1, n_views=1,
            loss=LossConfig(target_self=False, view_aug="weak"),
        )
        view_sets = {"s0": ViewSet("s0", ["s1"], [0.1]),
                     "t0": ViewSet("t0", ["t1"], [0.2])}
        _, roles, labels = self.run_batch(config, view_sets, [self.s0], [self.t0])
        assert set(roles) == {"src_query", "src_view", "tgt_query", "tgt_view"}
        # constant 0.7 image normalized with mean 0.5 / std 0.5
        assert np.allclose(roles["src_view"], 0.4, atol=1e-9)
        assert np.allclose(roles["tgt_view"], 0.8, atol=1e-9)
        assert np.allclose(roles["src_query"], -0.6, atol=1e-9)
        assert list(labels) == [1]

    def test_empty_view_set_falls_back_to_query(self):
        config = quick_config(
            source_batch=1, target_batch=1,
            loss=LossConfig(target_view=False, target_self=False, view_aug="weak"),
        )
        view_sets = {"s0": ViewSet("s0", [], [])}
        state, roles, _ = self.run_batch(config, view_sets, [self.s0], [self.t0])
        assert state.fallback_views == 1
        assert np.allclose(roles["src_view"], roles["src_query"], atol=1e-9)

    def test_view_rng_consumed_even_on_fallback(self):
        config = quick_config(
            source_batch=2, target_batch=1,
            loss=LossConfig(target_view=False, target_self=False, view_aug="weak"),
        )
        view_sets = {"s0": ViewSet("s0", [], []),
                     "s1": ViewSet("s1", ["s0"], [0.3])}
        state = init_state(config, class_count=2, total_steps=4)
        state.rng_view = ScriptedRng(randoms=[0.9, 0.9])
        make_train_batch(state, config, self.data, [self.s0, self.s1], [self.t0],
                         AugPolicy(), self.by_id, view_sets)
        assert state.rng_view.random_calls == 2
        assert state.fallback_views == 1

    def test_missing_view_set_rejected(self):
        config = quick_config(source_batch=1, target_batch=1,
                              loss=LossConfig(target_view=False, target_self=False))
        with pytest.raises(DataError, match="no mined view set"):
            self.run_batch(config, {}, [self.s0], [self.t0])

    def test_source_only_roles(self):
        config = quick_config(
            source_batch=2, target_batch=1,
            loss=LossConfig(source_view=False, target_view=False, target_self=False),
        )
        _, roles, labels = self.run_batch(config, {}, [self.s0, self.s1], [self.t0])
        assert set(roles) == {"src_query"}
        assert roles["src_query"].shape == (2, 3, 16, 16)
        assert list(labels) == [1, 0]


def neighbor_view_sets(data):
    """Deterministic stand-in for mining: first other view of each group."""
    out = {}
    for split in (data.source_train, data.target_train):
        for rec in split:
            cands = view_candidates(rec, split)
            out[rec.id] = (ViewSet(rec.id, [cands[0].id], [0.0])
                           if cands else ViewSet(rec.id, [], []))
    return out


class TestTrainLoop:
    def test_role_arithmetic_twenty_images(self, small_train_data):
        config = quick_config(loss=LossConfig(tau=0.0))
        data = dataclasses.replace(small_train_data,
                                   view_sets=neighbor_view_sets(small_train_data))
        state = init_state(config, 3, 4)
        src = data.source_train.records[:4]
        tgt = data.target_train.records[:4]
        roles, _ = make_train_batch(state, config, data, src, tgt, AugPolicy(),
                                    {r.id: r for r in (*src, *tgt)}, data.view_sets)
        assert set(roles) == {"src_query", "src_view", "tgt_query", "tgt_self", "tgt_view"}
        assert sum(v.shape[0] for v in roles.values()) == 20

    def test_shapes_and_counts(self, small_train_data):
        config = quick_config()
        _, report = train(config, small_train_data)
        assert report.total_steps == 6  # 12 source records // 4 per batch * 2 epochs
        assert len(report.steps) == 6
        assert len(report.epochs) == 2
        assert report.steps[0].lr == 3e-3
        assert report.final_target_top1 is not None

    def test_epoch_rows_average_step_rows(self, small_train_data):
        config = quick_config()
        _, report = train(config, small_train_data)
        first = report.steps[:3]
        assert report.epochs[0].loss_total == pytest.approx(
            sum(s.loss_total for s in first) / 3, abs=1e-12
        )

    def test_determinism(self, small_train_data):
        config = quick_config()
        params_a, report_a = train(config, small_train_data)
        params_b, report_b = train(config, small_train_data)
        for name in params_a.arrays:
            assert params_a.arrays[name].tobytes() == params_b.arrays[name].tobytes()
        assert report_a.steps == report_b.steps

    def test_seed_changes_trajectory(self, small_train_data):
        _, a = train(quick_config(seed=3), small_train_data)
        _, b = train(quick_config(seed=4), small_train_data)
        assert a.steps != b.steps

    def test_source_only_is_pure_supervision(self, small_train_data):
        config = apply_preset(quick_config(), "source-only")
        _, report = train(config, small_train_data)
        for step in report.steps:
            assert step.loss_source_view == 0.0
            assert step.loss_target_view == 0.0
            assert step.loss_target_self == 0.0
            assert step.loss_total == step.loss_supervised

    def test_tau_one_masks_every_target_row(self, small_train_data):
        config = quick_config(loss=LossConfig(tau=1.0))
        _, report = train(config, small_train_data)
        for epoch in report.epochs:
            assert epoch.masked_frac_target_view == 1.0
            assert epoch.masked_frac_target_self == 1.0
            assert epoch.loss_target_view == 0.0
            assert epoch.loss_target_self == 0.0

    def test_no_target_test_leaves_top1_unset(self, small_train_data):
        data = dataclasses.replace(small_train_data, target_test=None)
        _, report = train(quick_config(), data)
        assert report.final_target_top1 is None
        assert all(e.target_test_top1 is None for e in report.epochs)

    def test_unstripped_target_rejected(self, small_dataset):
        _, manifest, root = small_dataset
        train_m, test_m = split_by_container(manifest, auto_holdout(manifest))
        data = TrainData(
            source_train=train_m.by_domain("source"),
            target_train=train_m.by_domain("target"),  # labels still present
            images=load_images(manifest, root),
        )
        with pytest.raises(DataError, match="label-stripped"):
            train(quick_config(), data)

    def test_oversized_batch_rejected(self, small_train_data):
        with pytest.raises(DataError, match="smaller than"):
            train(quick_config(source_batch=13), small_train_data)

    def test_missing_image_rejected(self, small_train_data):
        images = dict(small_train_data.images)
        images.pop(small_train_data.source_train.records[0].id)
        data = dataclasses.replace(small_train_data, images=images)
        with pytest.raises(DataError, match="no image loaded"):
            train(quick_config(), data)

    def test_single_view_dataset_counts_fallbacks(self, tmp_path):
        cfg = SynthConfig(class_count=2, containers_per_class_per_domain=2, dates=1,
                          views_per_container_per_date=1, image_size=16, seed=7)
        manifest = generate_synthetic(cfg, tmp_path)
        train_m, test_m = split_by_container(manifest, auto_holdout(manifest))
        data = TrainData(
            source_train=train_m.by_domain("source"),
            target_train=strip_labels(train_m.by_domain("target")),
            images=load_images(manifest, tmp_path),
            target_test=test_m.by_domain("target"),
        )
        config = quick_config(source_batch=2, target_batch=2)
        _, report = train(config, data)
        # 2 epochs x 1 step x (2 source + 2 target) empty view sets
        assert report.fallback_views == 8


class TestRunOutputs:
    def test_files_written(self, small_train_data, tmp_path):
        config = quick_config()
        train(config, small_train_data, out_dir=tmp_path / "run")
        out = tmp_path / "run"
        for name in ("checkpoint.bin", "metrics.csv", "steps.csv", "run.json"):
            assert (out / name).exists(), name

    def test_metrics_csv_shape(self, small_train_data, tmp_path):
        config = quick_config()
        _, report = train(config, small_train_data, out_dir=tmp_path / "run")
        lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert lines[0].split(",")[:3] == ["epoch", "loss_total", "loss_supervised"]
        assert len(lines) == 1 + len(report.epochs)
        steps = (tmp_path / "run" / "steps.csv").read_text().splitlines()
        assert steps[0].split(",")[:2] == ["step", "lr"]
        assert len(steps) == 1 + len(report.steps)

    def test_run_json_round_trips_config(self, small_train_data, tmp_path):
        config = quick_config()
        train(config, small_train_data, out_dir=tmp_path / "run")
        doc = json.loads((tmp_path / "run" / "run.json").read_text())
        assert config_from_pairs(doc["config"]) == config
        assert doc["seed"] == config.seed
        assert set(doc["manifest_sha256"]) == {"source_train", "target_train", "target_test"}

    def test_byte_identical_outputs(self, small_train_data, tmp_path):
        config = quick_config()
        train(config, small_train_data, out_dir=tmp_path / "a")
        train(config, small_train_data, out_dir=tmp_path / "b")
        for name in ("checkpoint.bin", "metrics.csv", "steps.csv", "run.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
