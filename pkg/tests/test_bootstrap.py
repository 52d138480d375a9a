import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from labelboot.bootstrap import (
    BootstrapConfig,
    ConfidenceRecord,
    class_balanced_select,
    estimate_transition_matrix,
    load_split_csv,
    noise_balanced_select,
    save_split_csv,
    score_confidences,
    train_bootstrap,
)
from labelboot.data import NoisyDataset
from labelboot.models import Classifier, ModelConfig
from labelboot.noise import TransitionMatrix, true_transition_matrix
from labelboot.seeding import SeedStreams


def _record(index, dist, num_classes=None):
    dist = np.asarray(dist, dtype=np.float64)
    cls = int(dist.argmax())
    return ConfidenceRecord(index, dist, float(dist[cls]), cls)


def _records_from(preds, confs, num_classes):
    """Records with the given predicted classes and confidences."""
    out = []
    for i, (p, c) in enumerate(zip(preds, confs)):
        dist = np.full(num_classes, (1.0 - c) / (num_classes - 1))
        dist[p] = c
        out.append(_record(i, dist))
    return out


class TestEstimateTransitionMatrix:
    def test_hand_built_fixture_matches_brute_force(self):
        # 12 records, 2 classes; fraction 0.9 keeps ceil(0.9*n) per predicted class.
        preds = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]
        confs = [0.99, 0.95, 0.90, 0.85, 0.80, 0.51, 0.98, 0.94, 0.88, 0.84, 0.79, 0.52]
        noisy = [0, 1, 0, 0, 1, 1, 1, 1, 0, 1, 0, 0]
        records = _records_from(preds, confs, 2)
        got = estimate_transition_matrix(records, noisy, 0.9)

        # Brute-force oracle: sort per predicted class, keep top ceil(0.9 n), count.
        kept = []
        for cls in (0, 1):
            rs = [r for r in records if r.predicted_class == cls]
            rs.sort(key=lambda r: (-r.confidence, r.index))
            kept += rs[: math.ceil(0.9 * len(rs))]
        counts = np.zeros((2, 2))
        for r in kept:
            counts[noisy[r.index], r.predicted_class] += 1
        np.testing.assert_array_equal(got.entries, counts / counts.sum())

    def test_fraction_one_perfect_predictor_equals_true_matrix(self):
        rng = np.random.default_rng(0)
        true = rng.integers(0, 5, size=400)
        noisy = rng.integers(0, 5, size=400)
        ds = NoisyDataset(torch.zeros(400, 2, 2, 3), noisy, 5, true_labels=true)
        records = _records_from(true, rng.uniform(0.3, 1.0, size=400), 5)
        got = estimate_transition_matrix(records, noisy, 1.0)
        expected = true_transition_matrix(ds)
        np.testing.assert_array_equal(got.entries, expected.entries)

    def test_empty_predicted_class_contributes_nothing(self):
        records = _records_from([0, 0, 0], [0.9, 0.8, 0.7], 3)
        got = estimate_transition_matrix(records, [0, 1, 2], 1.0)
        assert got.entries[:, 1].sum() == 0
        assert got.entries[:, 2].sum() == 0

    def test_fraction_validated(self):
        records = _records_from([0], [0.9], 2)
        with pytest.raises(ValueError):
            estimate_transition_matrix(records, [0], 0.0)


def _split_invariants(split, records, noisy, tau, quota_of_cell):
    by_index = {r.index: r for r in records}
    clean_idx = set(split.clean_indices.tolist())
    noisy_idx = set(split.noisy_indices.tolist())
    # partition
    assert clean_idx.isdisjoint(noisy_idx)
    assert clean_idx | noisy_idx == {r.index for r in records}
    # tau guarantee
    for r in records:
        if r.confidence > tau:
            assert r.index in clean_idx
    # per-cell quota and no confidence inversion
    cells = {}
    for r in records:
        cells.setdefault((int(noisy[r.index]), r.predicted_class), []).append(r)
    for cell, rs in cells.items():
        selected = [r for r in rs if r.index in clean_idx]
        unselected = [r for r in rs if r.index not in clean_idx]
        assert len(selected) >= min(quota_of_cell(cell), len(rs))
        if selected and unselected:
            assert max(u.confidence for u in unselected) <= min(
                s.confidence for s in selected
            )


class TestNoiseBalancedSelect:
    def test_quota_two_per_transition_fixture(self):
        # Four transition cells, three records each; quotas sized to pick
        # exactly 2 per cell; tau=1.0 disables the guarantee.
        preds, noisy, confs = [], [], []
        i = 0
        for cell_noisy, cell_pred in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            for conf in (0.9, 0.8, 0.7):
                preds.append(cell_pred)
                noisy.append(cell_noisy)
                confs.append(conf - 0.001 * i)  # unique confidences
                i += 1
        records = _records_from(preds, confs, 2)
        T = TransitionMatrix(np.full((2, 2), 0.25))
        # quota per cell = ceil(K * N * 0.25) = 2 with K=8/12/... pick K so that
        # K * 12 * 0.25 = 2  =>  K = 2/3.
        split = noise_balanced_select(records, noisy, T, 2 / 3, 1.0, 12)
        assert len(split.clean) == 8
        by_cell = {}
        for index, n, p in split.clean:
            by_cell.setdefault((n, p), []).append(records[index].confidence)
        for cell, cs in by_cell.items():
            assert len(cs) == 2
            cell_records = [
                r.confidence for r in records
                if (noisy[r.index], r.predicted_class) == cell
            ]
            assert sorted(cs, reverse=True) == sorted(cell_records, reverse=True)[:2]

    def test_k_zero_tau_zero_selects_everything(self):
        records = _records_from([0, 1, 0, 1], [0.4, 0.5, 0.6, 0.7], 2)
        T = TransitionMatrix(np.full((2, 2), 0.25))
        split = noise_balanced_select(records, [0, 0, 1, 1], T, 0.0, 0.0, 4)
        assert len(split.clean) == 4
        assert len(split.noisy) == 0

    def test_k_zero_tau_one_selects_nothing(self):
        records = _records_from([0, 1, 0, 1], [0.4, 0.5, 0.6, 0.7], 2)
        T = TransitionMatrix(np.full((2, 2), 0.25))
        split = noise_balanced_select(records, [0, 0, 1, 1], T, 0.0, 1.0, 4)
        assert len(split.clean) == 0
        assert len(split.noisy) == 4

    def test_quota_larger_than_cell_takes_all(self):
        records = _records_from([0, 0], [0.6, 0.5], 2)
        T = TransitionMatrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
        split = noise_balanced_select(records, [0, 0], T, 1.0, 1.0, 100)
        assert len(split.clean) == 2

    def test_literal_quota_convention_selects_more(self):
        rng = np.random.default_rng(3)
        preds = rng.integers(0, 4, 200)
        confs = rng.uniform(0.3, 0.99, 200)
        noisy = rng.integers(0, 4, 200)
        records = _records_from(preds, confs, 4)
        T = estimate_transition_matrix(records, noisy, 1.0)
        frac = noise_balanced_select(records, noisy, T, 0.1, 1.0, 200, "fraction")
        literal = noise_balanced_select(records, noisy, T, 0.1, 1.0, 200, "literal")
        assert len(literal.clean) >= len(frac.clean)


class TestClassBalancedSelect:
    def test_balanced_quota_arithmetic(self):
        # 1000 records, 10 classes, 100 per predicted class, K=0.1 =>
        # ceil(0.1 * 1000 / 10) = 10 per class; tau=1.0 adds nothing.
        rng = np.random.default_rng(1)
        preds = np.repeat(np.arange(10), 100)
        confs = rng.uniform(0.2, 0.999, size=1000)
        noisy = rng.integers(0, 10, size=1000)
        records = _records_from(preds, confs, 10)
        split = class_balanced_select(records, noisy, 0.1, 1.0, 1000)
        assert len(split.clean) == 100
        per_class = {}
        for index, _, p in split.clean:
            per_class[p] = per_class.get(p, 0) + 1
        assert all(v == 10 for v in per_class.values())

    def test_tau_zero_selects_all(self):
        records = _records_from([0, 1, 2], [0.5, 0.6, 0.7], 3)
        split = class_balanced_select(records, [0, 1, 2], 0.001, 0.0, 3)
        assert len(split.clean) == 3

    def test_per_class_winners_match_sort_oracle(self):
        rng = np.random.default_rng(2)
        preds = rng.integers(0, 3, 120)
        confs = rng.uniform(0.2, 0.95, 120)
        noisy = rng.integers(0, 3, 120)
        records = _records_from(preds, confs, 3)
        K, N = 0.1, 120
        split = class_balanced_select(records, noisy, K, 1.0, N)
        quota = math.ceil(K * N / 3)
        expected = set()
        for cls in range(3):
            rs = sorted(
                (r for r in records if r.predicted_class == cls),
                key=lambda r: (-r.confidence, r.index),
            )
            expected |= {r.index for r in rs[:quota]}
        assert set(split.clean_indices.tolist()) == expected


@st.composite
def _selection_fixture(draw):
    num_classes = draw(st.integers(2, 5))
    n = draw(st.integers(1, 60))
    preds = draw(st.lists(st.integers(0, num_classes - 1), min_size=n, max_size=n))
    noisy = draw(st.lists(st.integers(0, num_classes - 1), min_size=n, max_size=n))
    confs = draw(
        st.lists(
            st.floats(1.0 / num_classes, 1.0, exclude_max=False, allow_nan=False),
            min_size=n, max_size=n,
        )
    )
    K = draw(st.floats(0.0, 1.0))
    tau = draw(st.floats(0.0, 1.0))
    return num_classes, preds, noisy, confs, K, tau


class TestSelectionProperties:
    @settings(max_examples=500, deadline=None)
    @given(_selection_fixture())
    def test_noise_balanced_invariants(self, fixture):
        num_classes, preds, noisy, confs, K, tau = fixture
        records = _records_from(preds, confs, num_classes)
        T = estimate_transition_matrix(records, noisy, 1.0)
        split = noise_balanced_select(records, noisy, T, K, tau, len(records))

        def quota(cell):
            t = float(T.entries[cell])
            return math.ceil(K * len(records) * t) if t > 0 else 0

        _split_invariants(split, records, noisy, tau, quota)

    @settings(max_examples=500, deadline=None)
    @given(_selection_fixture())
    def test_class_balanced_invariants(self, fixture):
        num_classes, preds, noisy, confs, K, tau = fixture
        records = _records_from(preds, confs, num_classes)
        split = class_balanced_select(records, noisy, K, tau, len(records))
        clean_idx = set(split.clean_indices.tolist())
        noisy_idx = set(split.noisy_indices.tolist())
        assert clean_idx.isdisjoint(noisy_idx)
        assert clean_idx | noisy_idx == set(range(len(records)))
        for r in records:
            if r.confidence > tau:
                assert r.index in clean_idx
        quota = math.ceil(K * len(records) / num_classes)
        by_class = {}
        for r in records:
            by_class.setdefault(r.predicted_class, []).append(r)
        for rs in by_class.values():
            selected = [r for r in rs if r.index in clean_idx]
            unselected = [r for r in rs if r.index not in clean_idx]
            assert len(selected) >= min(quota, len(rs))
            if selected and unselected:
                assert max(u.confidence for u in unselected) <= min(
                    s.confidence for s in selected
                )


class TestTrainBootstrap:
    MC = ModelConfig(variant="modified", backbone="tiny32", num_classes=2)

    def test_zero_epochs_leaves_parameters_unchanged(self):
        torch.manual_seed(0)
        model = Classifier(self.MC)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        view = NoisyDataset(torch.rand(8, 32, 32, 3), [0, 1] * 4, 2).training_view()
        train_bootstrap(view, model, BootstrapConfig(epochs=0), SeedStreams(0))
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k])

    def _separable_dataset(self, n=80):
        g = torch.Generator().manual_seed(1)
        dark = torch.rand(n // 2, 32, 32, 3, generator=g) * 0.3
        bright = torch.rand(n // 2, 32, 32, 3, generator=g) * 0.3 + 0.7
        images = torch.cat([dark, bright])
        labels = [0] * (n // 2) + [1] * (n // 2)
        return NoisyDataset(images, labels, 2, true_labels=labels)

    def test_separable_task_reaches_train_accuracy(self):
        torch.manual_seed(2)
        model = Classifier(self.MC)
        ds = self._separable_dataset()
        config = BootstrapConfig(epochs=6, batch_size=16, lr=0.05, lr_milestones=(), train_augment="weak")
        train_bootstrap(ds.training_view(), model, config, SeedStreams(2))
        with torch.no_grad():
            preds = model(ds.images, None).argmax(dim=1).numpy()
        accuracy = (preds == ds.noisy_labels).mean()
        assert accuracy >= 0.95

    def test_degenerate_single_class_labels(self):
        torch.manual_seed(3)
        model = Classifier(self.MC)
        g = torch.Generator().manual_seed(4)
        ds = NoisyDataset(torch.rand(48, 32, 32, 3, generator=g), [1] * 48, 2)
        config = BootstrapConfig(epochs=6, batch_size=16, lr=0.05, lr_milestones=(), train_augment="weak")
        train_bootstrap(ds.training_view(), model, config, SeedStreams(3))
        with torch.no_grad():
            probs = model(ds.images, None)
        assert (probs[:, 1] >= 0.9).all()


class TestScoreConfidences:
    def test_single_noaug_matches_forward(self, mini_run):
        model = mini_run["boot_model"]
        view = mini_run["view"]
        records = score_confidences(model, view, 1, SeedStreams(0), eval_augment="none", dropout=False)
        with torch.no_grad():
            model.eval()
            expected = model(view.images[:4], None).numpy()
        for i in range(4):
            np.testing.assert_allclose(records[i].predicted_dist, expected[i], atol=1e-6)

    def test_confidence_at_least_chance(self, mini_run):
        for r in mini_run["records"]:
            assert r.confidence >= 1.0 / 4 - 1e-9

    def test_records_sorted_by_index(self, mini_run):
        assert [r.index for r in mini_run["records"]] == list(range(len(mini_run["view"])))

    def test_deterministic_given_streams(self, mini_run):
        model = mini_run["boot_model"]
        view = mini_run["view"]
        a = score_confidences(model, view, 2, SeedStreams(77))
        b = score_confidences(model, view, 2, SeedStreams(77))
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.predicted_dist, rb.predicted_dist)

    def test_clean_set_more_accurate_than_clean_fraction(self, mini_run):
        # High-confidence selections are mostly correct, so the clean set's
        # predicted labels beat the raw noisy-label accuracy.
        split = mini_run["split"]
        truth = mini_run["train"].true_labels_oracle()
        clean_fraction = (mini_run["view"].noisy_labels == truth).mean()
        predicted = np.array([c[2] for c in split.clean])
        indices = split.clean_indices
        clean_acc = (predicted == truth[indices]).mean()
        assert clean_acc > clean_fraction


class TestSplitPersistence:
    def test_csv_roundtrip(self, tmp_path):
        records = _records_from([0, 1, 1, 0], [0.9, 0.8, 0.7, 0.6], 2)
        noisy = [0, 0, 1, 1]
        T = estimate_transition_matrix(records, noisy, 1.0)
        split = noise_balanced_select(records, noisy, T, 0.5, 0.85, 4)
        path = tmp_path / "split.csv"
        save_split_csv(split, records, path)
        loaded, confidences = load_split_csv(path)
        assert loaded.clean == split.clean
        assert loaded.noisy == split.noisy
        for r in records:
            assert abs(confidences[r.index] - r.confidence) < 1e-9

    def test_config_validation_messages(self):
        config = BootstrapConfig(selection_fraction=1.5)
        assert "bootstrap.K must lie in (0,1]" in config.validate()
