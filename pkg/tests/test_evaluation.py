import datetime
import json

import numpy as np
import pytest

from mvda.errors import DataError
from mvda.evaluation import (
    confusion_svg,
    evaluate,
    read_confusion_csv,
    write_report,
)
from mvda.manifest import DatasetManifest, ImageRecord
from mvda.model import init_params


def labeled_record(i, label):
    return ImageRecord(
        id=f"t{i:03d}", path=f"t{i:03d}.png", domain="target", genotype="beta",
        container_id="beta-t0-r0", capture_date=datetime.date(2022, 6, 21),
        view_id=i, label=label,
    )


def const_image(value, side=8):
    return np.full((side, side, 3), value)


def build_split(labels, reds, class_names=("a", "b")):
    records = [labeled_record(i, lab) for i, lab in enumerate(labels)]
    images = {r.id: const_image(reds[i]) for i, r in enumerate(records)}
    manifest = DatasetManifest(records, len(class_names), list(class_names))
    return manifest, images


def zero_params(side=8, class_count=2):
    params = init_params(side, class_count, seed=0)
    for arr in params.arrays.values():
        arr[:] = 0.0
    return params


def red_mean_params(side=8, class_count=2, threshold=2.0):
    """Hand-built network whose class-1 logit equals 4x the mean red value.

    One center tap per conv stage routes the red channel through both mean
    pools untouched, the dense row sums the four surviving block means, and
    a bias puts `threshold` on the competing class-0 logit.
    """
    params = zero_params(side, class_count)
    params.arrays["conv1_w"][0, 0, 1, 1] = 1.0
    params.arrays["conv2_w"][0, 0, 1, 1] = 1.0
    quarter = (side // 4) ** 2
    params.arrays["dense_w"][0:quarter, 1] = 1.0
    params.arrays["dense_b"][0] = threshold
    return params


IDENTITY_NORM = dict(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))


class TestEvaluate:
    def test_hand_counted_mixed_outcome(self):
        # preds: 4*0.2=0.8 < 2 -> class 0; 4*0.9=3.6 > 2 -> class 1
        manifest, images = build_split(labels=(0, 1, 1), reds=(0.2, 0.9, 0.2))
        report = evaluate(red_mean_params(), manifest, images, **IDENTITY_NORM)
        assert report.n == 3
        assert report.top1 == pytest.approx(2 / 3, abs=1e-12)
        assert report.confusion.tolist() == [[1, 0], [1, 1]]
        assert report.per_class == [1.0, 0.5]
        assert report.macro_avg == pytest.approx(0.75, abs=1e-12)
        assert report.micro_avg == report.top1

    def test_all_correct_is_diagonal(self):
        manifest, images = build_split(labels=(0, 1), reds=(0.2, 0.9))
        report = evaluate(red_mean_params(), manifest, images, **IDENTITY_NORM)
        assert report.top1 == 1.0
        assert report.confusion.tolist() == [[1, 0], [0, 1]]
        assert report.per_class == [1.0, 1.0]

    def test_constant_predictor_on_balanced_split(self):
        # zero weights -> zero logits -> argmax ties resolve to class 0
        manifest, images = build_split(labels=(0, 0, 1, 1), reds=(0.1, 0.9, 0.1, 0.9))
        report = evaluate(zero_params(), manifest, images, **IDENTITY_NORM)
        assert report.top1 == 0.5
        assert report.per_class == [1.0, 0.0]
        assert report.confusion.tolist() == [[2, 0], [2, 0]]

    def test_zero_support_class_is_undefined(self):
        manifest, images = build_split(labels=(0, 0, 0), reds=(0.1, 0.2, 0.3))
        report = evaluate(zero_params(), manifest, images, **IDENTITY_NORM)
        assert report.per_class == [1.0, None]
        assert report.macro_avg == 1.0  # averaged over defined classes only
        assert report.top1 == 1.0

    def test_chunked_batches_count_everything(self):
        labels = [i % 2 for i in range(70)]
        manifest, images = build_split(labels, reds=[0.3] * 70)
        report = evaluate(zero_params(), manifest, images, **IDENTITY_NORM)
        assert report.n == 70
        assert int(report.confusion.sum()) == 70
        assert report.top1 == 0.5

    def test_top1_is_trace_over_total(self, small_dataset, small_train_data):
        _, manifest, _ = small_dataset
        params = init_params(16, manifest.class_count, seed=0)
        report = evaluate(params, small_train_data.target_test, small_train_data.images)
        assert int(report.confusion.sum()) == report.n == len(small_train_data.target_test)
        trace = float(np.trace(report.confusion))
        assert abs(report.top1 - trace / report.n) < 1e-12
        assert abs(report.micro_avg - report.top1) < 1e-12

    def test_macro_equals_micro_on_balanced_split(self, small_dataset, small_train_data):
        # the held-out target split has equal support for every class
        _, manifest, _ = small_dataset
        params = init_params(16, manifest.class_count, seed=7)
        report = evaluate(params, small_train_data.target_test, small_train_data.images)
        support = report.confusion.sum(axis=1)
        assert len(set(support.tolist())) == 1
        assert abs(report.macro_avg - report.micro_avg) < 1e-12

    def test_empty_split(self):
        manifest = DatasetManifest([], 2, ["a", "b"])
        with pytest.raises(DataError, match="empty evaluation split"):
            evaluate(zero_params(), manifest, {})

    def test_class_count_mismatch(self):
        manifest, images = build_split(labels=(0, 1), reds=(0.1, 0.9),
                                       class_names=("a", "b", "c"))
        with pytest.raises(DataError, match="checkpoint was trained with"):
            evaluate(zero_params(class_count=2), manifest, images)

    def test_unlabeled_record(self):
        rec = labeled_record(0, None)
        manifest = DatasetManifest([rec], 2, ["a", "b"])
        with pytest.raises(DataError, match="has no label"):
            evaluate(zero_params(), manifest, {rec.id: const_image(0.5)})

    def test_missing_image(self):
        manifest, _ = build_split(labels=(0,), reds=(0.5,))
        with pytest.raises(DataError, match="no image loaded"):
            evaluate(zero_params(), manifest, {})


class TestReportFiles:
    @pytest.fixture()
    def report(self):
        manifest, images = build_split(labels=(0, 1, 1), reds=(0.2, 0.9, 0.2))
        return evaluate(red_mean_params(), manifest, images, **IDENTITY_NORM)

    def test_files_written(self, report, tmp_path):
        write_report(report, ["a", "b"], tmp_path)
        for name in ("eval.json", "confusion.csv", "confusion.svg"):
            assert (tmp_path / name).exists(), name

    def test_eval_json_contents(self, report, tmp_path):
        write_report(report, ["a", "b"], tmp_path)
        doc = json.loads((tmp_path / "eval.json").read_text())
        assert set(doc) == {"top1", "macro_avg", "micro_avg", "per_class", "n"}
        assert doc["n"] == 3
        assert doc["top1"] == pytest.approx(2 / 3)
        assert doc["per_class"] == {"a": 1.0, "b": 0.5}

    def test_eval_json_null_for_undefined_class(self, tmp_path):
        manifest, images = build_split(labels=(0, 0), reds=(0.1, 0.2))
        report = evaluate(zero_params(), manifest, images, **IDENTITY_NORM)
        write_report(report, ["a", "b"], tmp_path)
        doc = json.loads((tmp_path / "eval.json").read_text())
        assert doc["per_class"]["b"] is None

    def test_confusion_csv_round_trip(self, report, tmp_path):
        write_report(report, ["a", "b"], tmp_path)
        names, matrix = read_confusion_csv(tmp_path / "confusion.csv")
        assert names == ["a", "b"]
        assert np.array_equal(matrix, report.confusion)

    def test_non_square_csv_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,0\n")
        with pytest.raises(DataError, match="not square"):
            read_confusion_csv(path)

    def test_svg_has_one_rect_per_cell(self, report, tmp_path):
        write_report(report, ["a", "b"], tmp_path)
        svg = (tmp_path / "confusion.svg").read_text()
        assert svg.count("<rect") == 4

    def test_svg_axis_labels_and_names(self):
        confusion = np.array([[5, 1, 0], [0, 4, 2], [1, 1, 4]], dtype=np.int64)
        svg = confusion_svg(confusion, ["ctl", "low", "high"])
        assert ">predicted</text>" in svg and ">true</text>" in svg
        for name in ("ctl", "low", "high"):
            assert f">{name}</text>" in svg
        assert svg.count("<rect") == 9
        assert ">5</text>" in svg
