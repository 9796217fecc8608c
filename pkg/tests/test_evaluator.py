import copy
import math

import pytest
import torch
from torch import nn
from torch.nn import functional as F

from corruptions import CORRUPTION_KINDS, CorruptionSpec, full_suite
from dataio import DatasetHandle
from exceptions import ConfigurationError
from evaluator import (
    CORRUPTION_FIELDS, corruption_table, count_correct, eval_sample, evaluate_clean,
    evaluate_corruption_suite, mean_corruption_error, noise_robustness_curve, whitebox_eval,
)
from pyramid_attack import PyramidSpec


class ConstantModel(nn.Module):
    """Predicts class 0 for every image"""

    def __init__(self, n_classes=10):
        super().__init__()
        self.n_classes = n_classes

    def forward(self, pixels, drop=None, recorder=None):
        return torch.zeros(len(pixels), self.n_classes)


class MemorizingModel(nn.Module):
    """Returns the stored label of the nearest stored image"""

    def __init__(self, images, labels, n_classes):
        super().__init__()
        self.images = images.to(torch.float32).flatten(1) / 255.0
        self.labels = labels
        self.n_classes = n_classes

    def forward(self, pixels, drop=None, recorder=None):
        nearest = torch.cdist(pixels.flatten(1), self.images).argmin(dim=1)
        return F.one_hot(self.labels[nearest], self.n_classes).to(torch.float32)


def rows(errors):
    return [
        {"kind": kind, "severity": severity, "accuracy": 1.0 - error, "error": error}
        for kind, per_severity in errors.items()
        for severity, error in enumerate(per_severity, start=1)
    ]


def test_constant_model_scores_class_frequency(make_handle):
    handle = make_handle(n_eval=30, n_classes=10)
    assert evaluate_clean(ConstantModel(), handle, batch_size=7) == 0.1


def test_clean_eval_is_pure_and_repeatable(tiny_model, make_handle):
    handle = make_handle(n_eval=20)
    before = copy.deepcopy(tiny_model.state_dict())
    first = evaluate_clean(tiny_model, handle, batch_size=8)
    second = evaluate_clean(tiny_model, handle, batch_size=3)
    assert first == second
    assert all(torch.equal(before[k], v) for k, v in tiny_model.state_dict().items())


def test_count_correct_on_train_split(make_handle):
    handle = make_handle(n_train=12, n_classes=4)
    assert count_correct(ConstantModel(4), handle, 5, split="train") == (3, 12)


@pytest.mark.parametrize("batch_size", [5, 12, 256])
def test_memorized_train_split_scores_one(make_handle, batch_size):
    handle = make_handle(n_train=12, n_classes=4)
    model = MemorizingModel(handle.train_images, handle.train_labels, 4)
    assert count_correct(model, handle, batch_size, split="train") == (12, 12)
    assert evaluate_clean(model, handle, batch_size=batch_size, split="train") == 1.0


def test_empty_split_is_rejected(make_handle):
    handle = make_handle(n_train=4)
    empty = DatasetHandle(
        name="empty", n_classes=3, train_images=handle.train_images, train_labels=handle.train_labels,
        eval_images=handle.eval_images[:0], eval_labels=handle.eval_labels[:0], source="test",
    )
    with pytest.raises(ConfigurationError, match="no images"):
        evaluate_clean(ConstantModel(3), empty)


def test_corruption_rows_cover_every_spec(tiny_model, make_handle):
    report = evaluate_corruption_suite(tiny_model, make_handle(), full_suite(), seed=0, batch_size=4)
    assert len(report.rows) == len(CORRUPTION_KINDS) * 5
    assert all(list(row) == CORRUPTION_FIELDS for row in report.rows)
    assert all(row["error"] == pytest.approx(1.0 - row["accuracy"]) for row in report.rows)
    assert report.mce is None


def test_model_is_its_own_reference(tiny_model, make_handle):
    handle = make_handle()
    specs = full_suite(severities=(1, 3))
    assert evaluate_corruption_suite(tiny_model, handle, specs, reference=tiny_model).mce == 1.0
    twin = copy.deepcopy(tiny_model)
    assert evaluate_corruption_suite(tiny_model, handle, specs, reference=twin).mce == 1.0


def test_fewer_errors_than_reference_gives_mce_below_one():
    reference = rows({"contrast": [0.4, 0.6], "gaussian_blur": [0.5, 0.5]})
    better = rows({"contrast": [0.2, 0.3], "gaussian_blur": [0.25, 0.25]})
    assert mean_corruption_error(better, reference) == pytest.approx(0.5)
    assert mean_corruption_error(reference, reference) == 1.0


def test_error_free_reference():
    reference = rows({"contrast": [0.0, 0.0]})
    assert mean_corruption_error(rows({"contrast": [0.0, 0.0]}), reference) == 1.0
    assert math.isinf(mean_corruption_error(rows({"contrast": [0.1, 0.0]}), reference))


def test_mismatched_reference_kinds():
    with pytest.raises(KeyError):
        mean_corruption_error(rows({"contrast": [0.1]}), rows({"gaussian_blur": [0.1]}))


def test_corruption_table_does_not_depend_on_batch_size(tiny_model, make_handle):
    handle = make_handle(n_eval=12)
    specs = [CorruptionSpec("gaussian_noise", 5), CorruptionSpec("jpeg_blockiness_proxy", 2)]
    assert corruption_table(tiny_model, handle, specs, seed=3, batch_size=12) == \
        corruption_table(tiny_model, handle, specs, seed=3, batch_size=5)


def test_zero_norm_noise_matches_clean_accuracy(tiny_model, make_handle):
    handle = make_handle(n_eval=16)
    clean = evaluate_clean(tiny_model, handle, batch_size=4)
    curve = noise_robustness_curve(tiny_model, handle, "low_pass", [0, 1, 2, 4], l2_norm=0.0, batch_size=4)
    assert [row["cutoff"] for row in curve] == [0, 1, 2, 4]
    assert all(row["accuracy"] == clean and row["band"] == "low_pass" for row in curve)


def test_noise_curve_is_seeded(tiny_model, make_handle):
    handle = make_handle(n_eval=16)
    args = (tiny_model, handle, "high_pass", [1, 3], 4.0)
    assert noise_robustness_curve(*args, seed=1, batch_size=16) == noise_robustness_curve(*args, seed=1, batch_size=6)


def test_zero_budget_whitebox_matches_clean_accuracy(tiny_model, make_handle):
    handle = make_handle(n_eval=12)
    clean = evaluate_clean(tiny_model, handle, batch_size=4)
    zero = PyramidSpec(scales=(4, 1), multipliers=(10.0, 1.0), eps=(0.0, 0.0), n_steps=3)
    no_steps = PyramidSpec(scales=(1,), multipliers=(1.0,), eps=(4 / 255,), n_steps=0)
    rows_ = whitebox_eval(tiny_model, handle, {"zero": zero, "no_steps": no_steps}, batch_size=4)
    assert [row["attack"] for row in rows_] == ["zero", "no_steps"]
    assert all(row["accuracy"] == clean for row in rows_)


def test_eval_sample_takes_leading_images(make_handle):
    handle = make_handle(n_eval=10)
    sample = eval_sample(handle, 7, batch_size=3)
    assert len(sample) == 7
    assert torch.equal(sample.labels, handle.eval_labels[:7])
    assert len(eval_sample(handle, 50, batch_size=4)) == 10


SEEDS = (0, 1, 2)


def mean(values):
    values = list(values)
    return sum(values) / len(values)


def suite_accuracy(model, handle, specs, batch_size):
    return mean(row["accuracy"] for row in corruption_table(model, handle, specs, seed=0, batch_size=batch_size))


@pytest.mark.desk
def test_pyramid_training_keeps_clean_accuracy_and_resists_noise(desk_runs):
    handle, base, train = desk_runs
    size = base.eval.batch_size
    noise = [CorruptionSpec("gaussian_noise", 3)]
    clean, noisy = {}, {}
    for regime in ("baseline", "pyramid_at"):
        models = [train(regime, seed) for seed in SEEDS]
        clean[regime] = mean(evaluate_clean(m, handle, size) for m in models)
        noisy[regime] = mean(suite_accuracy(m, handle, noise, size) for m in models)
    assert clean["pyramid_at"] >= clean["baseline"] - 0.005
    assert noisy["pyramid_at"] >= noisy["baseline"] + 0.01


@pytest.mark.desk
def test_disabled_adversarial_dropout_trades_clean_for_corruption_accuracy(desk_runs):
    handle, base, train = desk_runs
    size = base.eval.batch_size
    clean, corrupted = {}, {}
    for mode in ("matched", "disabled_adv"):
        models = [train("pyramid_at", seed, drop_mode=mode) for seed in SEEDS]
        clean[mode] = mean(evaluate_clean(m, handle, size) for m in models)
        corrupted[mode] = mean(suite_accuracy(m, handle, full_suite(), size) for m in models)
    assert corrupted["disabled_adv"] > corrupted["matched"]
    assert clean["disabled_adv"] < clean["matched"]


@pytest.mark.desk
def test_pyramid_model_resists_low_frequency_noise(desk_runs):
    handle, base, train = desk_runs
    cutoff = min(base.analysis.cutoffs)
    accuracy = {}
    for regime in ("baseline", "pyramid_at"):
        accuracy[regime] = mean(
            noise_robustness_curve(train(regime, seed), handle, "low_pass", [cutoff], base.analysis.l2_norm,
                                   seed=0, batch_size=base.eval.batch_size)[0]["accuracy"]
            for seed in SEEDS
        )
    assert accuracy["pyramid_at"] >= accuracy["baseline"]


@pytest.mark.desk
def test_models_are_strongest_against_their_training_attack(desk_runs):
    handle, base, train = desk_runs
    attacks = {"pixel": base.pixel_spec(), "pyramid": base.pyramid_spec()}
    table = {
        regime: {row["attack"]: row["accuracy"] for row in
                 whitebox_eval(train(regime, 0), handle, attacks, seed=0, batch_size=base.eval.batch_size)}
        for regime in ("baseline", "pixel_at", "pyramid_at")
    }
    assert max(table, key=lambda regime: table[regime]["pixel"]) == "pixel_at"
    assert max(table, key=lambda regime: table[regime]["pyramid"]) == "pyramid_at"


@pytest.mark.desk
def test_corruption_accuracy_falls_with_severity(desk_runs):
    handle, base, train = desk_runs
    report = evaluate_corruption_suite(train("baseline", 0), handle, full_suite(), seed=0,
                                       batch_size=base.eval.batch_size)
    for kind in CORRUPTION_KINDS:
        accuracies = [report.accuracy(kind, severity) for severity in range(1, 6)]
        assert all(after <= before + 0.005 for before, after in zip(accuracies, accuracies[1:])), kind
