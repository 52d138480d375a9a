import numpy as np
import pytest
import torch
import torch.nn as nn

from labelboot.bootstrap import SplitResult
from labelboot.data import NoisyDataset
from labelboot.errors import OracleUnavailableError
from labelboot.evaluation import _topk_hits, clean_set_purity, evaluate, label_sweep
from labelboot.models import Classifier, ModelConfig, one_hot
from labelboot.seeding import SeedStreams


class _OracleModel(nn.Module):
    """Reads the class encoded in the image's top-left pixel; optionally noisy."""

    def __init__(self, num_classes, mode="perfect", seed=0):
        super().__init__()
        self.config = ModelConfig(variant="modified", backbone="tiny32", num_classes=num_classes)
        self.mode = mode
        self.g = torch.Generator().manual_seed(seed)

    def null_vector(self):
        return torch.zeros(self.config.num_classes)

    def set_dropout_override(self, value):
        pass

    def forward(self, images, label_input=None):
        k = self.config.num_classes
        if self.mode == "random":
            return torch.softmax(torch.randn(images.shape[0], k, generator=self.g), dim=1)
        cls = (images[:, 0, 0, 0] * k).round().long().clamp(0, k - 1)
        return one_hot(cls.numpy(), k) * 0.96 + 0.01


def _encoded_test_set(n, k, seed=0, with_noise=False):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(n, 8, 8, 3, generator=g)
    labels = torch.randint(0, k, (n,), generator=g).numpy()
    images[:, 0, 0, 0] = torch.as_tensor(labels, dtype=torch.float32) / k
    noisy = labels.copy()
    if with_noise:
        rng = np.random.default_rng(seed)
        flip = rng.random(n) < 0.4
        noisy[flip] = (noisy[flip] + 1) % k
    return NoisyDataset(images, noisy, k, true_labels=labels, split_tag="test")


class TestEvaluate:
    def test_perfect_model_scores_one(self):
        test = _encoded_test_set(100, 4)
        report = evaluate(_OracleModel(4), test, tta=False)
        assert report.top1 == 1.0
        assert report.top5 == 1.0
        assert report.per_class_accuracy == (1.0, 1.0, 1.0, 1.0)

    def test_uniform_random_model_is_chance_level(self):
        test = _encoded_test_set(2000, 10, seed=3)
        report = evaluate(_OracleModel(10, mode="random"), test, tta=False)
        assert abs(report.top1 - 0.1) <= 0.03
        assert abs(report.top5 - 0.5) <= 0.05

    def test_noisy_label_mode_requires_injected_noise(self):
        test = _encoded_test_set(50, 4)
        with pytest.raises(ValueError, match="noisy"):
            evaluate(_OracleModel(4), test, label_mode="noisy", tta=False)

    def test_noisy_label_mode_runs_with_injected_noise(self):
        test = _encoded_test_set(50, 4, with_noise=True)
        report = evaluate(_OracleModel(4), test, label_mode="noisy", tta=False)
        assert report.label_mode == "noisy"
        assert report.top1 == 1.0  # oracle ignores the label input

    def test_plain_mode_deterministic(self):
        torch.manual_seed(0)
        model = Classifier(ModelConfig(variant="modified", backbone="tiny32", num_classes=4))
        test = _encoded_test_set(64, 4, seed=5)
        a = evaluate(model, test, tta=False)
        b = evaluate(model, test, tta=False)
        assert a == b

    def test_tta_deterministic_given_seed(self):
        torch.manual_seed(0)
        model = Classifier(ModelConfig(variant="modified", backbone="tiny32", num_classes=4))
        test = _encoded_test_set(32, 4, seed=6)
        a = evaluate(model, test, tta=True, n_augs=3, streams=SeedStreams(4))
        b = evaluate(model, test, tta=True, n_augs=3, streams=SeedStreams(4))
        assert a == b

    def test_top5_capped_by_num_classes(self):
        test = _encoded_test_set(20, 4)
        report = evaluate(_OracleModel(4), test, tta=False)
        assert report.top5 == 1.0

    def test_report_roundtrip(self, tmp_path):
        test = _encoded_test_set(20, 4)
        report = evaluate(_OracleModel(4), test, tta=False)
        path = tmp_path / "eval.json"
        report.save_json(path)
        from labelboot.evaluation import EvalReport

        assert EvalReport.load_json(path) == report


class TestTopKTieBreak:
    def test_ties_resolve_to_lowest_class_index(self):
        probs = np.array([[0.4, 0.4, 0.2]])
        assert _topk_hits(probs, np.array([0]), 1)[0]
        assert not _topk_hits(probs, np.array([1]), 1)[0]
        assert _topk_hits(probs, np.array([1]), 2)[0]


class TestLabelSweep:
    def test_normal_variant_rows_identical(self):
        torch.manual_seed(1)
        model = Classifier(ModelConfig(variant="normal", backbone="tiny32", num_classes=4))
        rows = label_sweep(model, torch.rand(32, 32, 3))
        assert len(rows) == 5
        assert rows[0]["label_input"] == "null"
        assert len({(r["predicted_class"], round(r["confidence"], 9)) for r in rows}) == 1

    def test_zeroed_label_projection_rows_identical(self):
        torch.manual_seed(2)
        model = Classifier(ModelConfig(variant="modified", backbone="tiny32", num_classes=4))
        with torch.no_grad():
            model.head.label_proj.weight.zero_()
            model.head.label_proj.bias.zero_()
        rows = label_sweep(model, torch.rand(32, 32, 3))
        assert len({(r["predicted_class"], round(r["confidence"], 9)) for r in rows}) == 1

    def test_trained_modified_model_uses_labels(self, mini_run):
        # There exists a test image whose prediction changes with the label
        # input, and whose null-label confidence sits below the best
        # noisy-label confidence.
        model = mini_run["ssl_model"]
        test = mini_run["test"]
        found_argmax_difference = False
        found_confidence_gap = False
        for i in range(min(len(test), 40)):
            rows = label_sweep(model, test.images[i])
            preds = {r["predicted_class"] for r in rows[1:]}
            if len(preds) > 1:
                found_argmax_difference = True
            best_labelled = max(r["confidence"] for r in rows[1:])
            if rows[0]["confidence"] < best_labelled:
                found_confidence_gap = True
            if found_argmax_difference and found_confidence_gap:
                break
        assert found_argmax_difference
        assert found_confidence_gap


class TestCleanSetPurity:
    def test_all_correct_no_errors(self):
        ds = NoisyDataset(torch.zeros(4, 2, 2, 3), [0, 1, 0, 1], 2, true_labels=[0, 1, 0, 1])
        split = SplitResult(tuple((i, int(ds.noisy_labels[i]), int(ds.noisy_labels[i])) for i in range(4)), ())
        report = clean_set_purity(split, ds)
        assert report.errors == 0
        assert report.error_fraction == 0.0
        assert report.breakdown == {}

    def test_two_planted_mistakes_in_ten(self):
        truth = [0, 1] * 5
        ds = NoisyDataset(torch.zeros(10, 2, 2, 3), truth, 2, true_labels=truth)
        clean = []
        for i in range(10):
            predicted = truth[i] if i >= 2 else 1 - truth[i]  # two mistakes
            clean.append((i, truth[i], predicted))
        report = clean_set_purity(SplitResult(tuple(clean), ()), ds)
        assert report.errors == 2
        assert report.error_fraction == 0.2
        assert report.breakdown == {(0, 1): 1, (1, 0): 1}

    def test_oracle_required(self):
        ds = NoisyDataset(torch.zeros(2, 2, 2, 3), [0, 1], 2)
        with pytest.raises(OracleUnavailableError):
            clean_set_purity(SplitResult(((0, 0, 0),), ((1, 1),)), ds)
