import copy

import numpy as np
import pytest
import torch

from labelboot.data import NoisyDataset
from labelboot.final_train import FinalConfig, smooth_labels, train_final
from labelboot.fixmatch import RelabeledDataset
from labelboot.models import Classifier, ModelConfig, one_hot
from labelboot.seeding import SeedStreams, spy_streams

MC = ModelConfig(variant="modified", backbone="tiny32", num_classes=4)


class TestSmoothLabels:
    def test_zero_epsilon_identity(self):
        targets = one_hot([0, 2], 4)
        assert torch.equal(smooth_labels(targets, 0.0), targets)

    def test_standard_epsilon_arithmetic(self):
        targets = one_hot([0], 10)
        out = smooth_labels(targets, 0.1)
        expected = torch.full((1, 10), 0.01)
        expected[0, 0] = 0.91
        assert torch.allclose(out, expected, atol=1e-7)

    def test_rows_still_sum_to_one(self):
        g = torch.Generator().manual_seed(0)
        targets = torch.softmax(torch.randn(16, 6, generator=g), dim=1)
        out = smooth_labels(targets, 0.3)
        assert torch.allclose(out.sum(dim=1), torch.ones(16), atol=1e-6)

    def test_epsilon_range_validated(self):
        with pytest.raises(ValueError):
            smooth_labels(one_hot([0], 4), 1.0)


def _relabeled(n=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    ds = NoisyDataset(torch.rand(n, 32, 32, 3, generator=g), [i % 4 for i in range(n)], 4)
    view = ds.training_view()
    soft = np.eye(4)[[i % 4 for i in range(n)]].astype(np.float64)
    return RelabeledDataset(view, soft, soft.argmax(axis=1), soft.max(axis=1))


class TestTrainFinal:
    def test_zero_epochs_unchanged(self):
        torch.manual_seed(1)
        model = Classifier(MC)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train_final(_relabeled(), model, FinalConfig(epochs=0), SeedStreams(0))
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_label_drop_consumes_randomness_after_mixup(self):
        torch.manual_seed(2)
        model = Classifier(MC)
        streams, log = spy_streams(5)
        train_final(_relabeled(16), model, FinalConfig(epochs=1, batch_size=8), streams)
        per_batch = {}
        for pos, path in enumerate(log):
            if path and path[-1] in ("mixup", "drop") and "batch" in path:
                batch_key = path[: path.index("batch") + 2]
                per_batch.setdefault(batch_key, {})[path[-1]] = pos
        assert per_batch
        for sites in per_batch.values():
            assert set(sites) == {"mixup", "drop"}
            assert sites["mixup"] < sites["drop"]

    def test_full_drop_makes_noisy_labels_irrelevant(self):
        # With drop_prob=1 every (mixed) label input becomes the null label,
        # so runs that differ only in their noisy labels coincide bit-for-bit.
        relabeled_a = _relabeled(24, seed=3)
        view_b = NoisyDataset(
            relabeled_a.view.images, [(i + 2) % 4 for i in range(24)], 4
        ).training_view()
        relabeled_b = RelabeledDataset(
            view_b, relabeled_a.soft, relabeled_a.hard, relabeled_a.confidence
        )
        config = FinalConfig(epochs=2, batch_size=8, drop_prob=1.0)

        torch.manual_seed(4)
        model_a = Classifier(MC)
        model_b = copy.deepcopy(model_a)
        torch.manual_seed(99)
        train_final(relabeled_a, model_a, config, SeedStreams(6))
        torch.manual_seed(99)
        train_final(relabeled_b, model_b, config, SeedStreams(6))
        for (ka, va), (kb, vb) in zip(
            model_a.state_dict().items(), model_b.state_dict().items()
        ):
            assert ka == kb
            assert torch.equal(va, vb), f"{ka} differs"

    def test_soft_target_mode_runs(self):
        torch.manual_seed(5)
        model = Classifier(MC)
        relabeled = _relabeled(16, seed=6)
        relabeled.soft[:] = 0.25  # genuinely soft targets
        config = FinalConfig(epochs=1, batch_size=8, use_soft_targets=True)
        train_final(relabeled, model, config, SeedStreams(7))

    def test_parameters_change_on_real_run(self):
        torch.manual_seed(7)
        model = Classifier(MC)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train_final(_relabeled(16, seed=8), model, FinalConfig(epochs=1, batch_size=8), SeedStreams(8))
        assert any(not torch.equal(v, before[k]) for k, v in model.state_dict().items())

    def test_config_validation(self):
        assert FinalConfig(epochs=-1).validate()
        assert FinalConfig(mixup_alpha=0.0).validate()
        assert FinalConfig(label_smoothing=1.0).validate()
        assert not FinalConfig().validate()
