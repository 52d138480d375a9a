"""Shared fixtures: one mini training run reused by tests that need a
trained model, and a pretraining-probe fixture with its sklearn oracle."""

import json

import pytest
import torch

from labelboot.bootstrap import (
    BootstrapConfig,
    estimate_transition_matrix,
    noise_balanced_select,
    score_confidences,
    train_bootstrap,
)
from labelboot.final_train import FinalConfig, train_final
from labelboot.fixmatch import SSLConfig, relabel_dataset, run_ssl
from labelboot.metrics import MetricsLogger
from labelboot.models import Classifier, ModelConfig
from labelboot.noise import inject_asymmetric_noise
from labelboot.pretrain import ContrastiveConfig, pretrain
from labelboot.seeding import SeedStreams
from labelboot.synthetic import confusable_pair_mapping, make_template_dataset

NUM_CLASSES = 4
NOISE_RATE = 0.4


def asym_noisy_dataset(train_size, test_size, seed=7, noise_seed=11, image_size=32):
    """Template dataset pair with 40% pairwise asymmetric label noise."""
    train = make_template_dataset(NUM_CLASSES, train_size, image_size, seed=seed)
    test = make_template_dataset(
        NUM_CLASSES, test_size, image_size, seed=seed + 1, split_tag="test"
    )
    mapping = confusable_pair_mapping(NUM_CLASSES)
    noisy = inject_asymmetric_noise(
        train.true_labels_oracle(), NOISE_RATE, mapping, seed=noise_seed
    )
    return train.with_noisy_labels(noisy), test


@pytest.fixture(scope="session")
def mini_run(tmp_path_factory):
    """A reduced but genuine pipeline run (all four stages) on 800 images."""
    torch.manual_seed(0)
    train, test = asym_noisy_dataset(1500, 300)
    view = train.training_view()
    streams = SeedStreams(0)
    metrics_path = tmp_path_factory.mktemp("mini") / "metrics.jsonl"
    metrics = MetricsLogger(metrics_path)

    model_config = ModelConfig(variant="modified", backbone="tiny32", num_classes=NUM_CLASSES)
    model = Classifier(model_config)
    pretrain(
        train.unlabeled_view(),
        ContrastiveConfig(epochs=16, batch_size=256, lr=0.3),
        model, streams, metrics,
    )
    boot_config = BootstrapConfig(
        epochs=20, batch_size=32, lr=0.03, lr_milestones=(13, 17), n_eval_augs=25,
        selection_fraction=0.25, confidence_guarantee=0.99,
    )
    train_bootstrap(view, model, boot_config, streams, metrics)
    records = score_confidences(model, view, boot_config.n_eval_augs, streams)
    transition = estimate_transition_matrix(records, view.noisy_labels, 0.9)
    split = noise_balanced_select(
        records, view.noisy_labels, transition, 0.25, 0.99, len(view)
    )
    boot_model = Classifier(model_config)
    boot_model.load_state_dict(model.state_dict())

    ssl_config = SSLConfig(
        iterations=400, clean_batch=16, unlabeled_ratio=3, ema_momentum=0.99,
        lr=0.005, log_every=25,
    )
    ssl_model = run_ssl(split, view, model, ssl_config, streams, metrics)
    relabeled = relabel_dataset(ssl_model, view, ssl_config, streams)

    torch.manual_seed(streams.derive("final_init"))
    final_model = Classifier(model_config)
    train_final(relabeled, final_model, FinalConfig(epochs=12, batch_size=64), streams, metrics)
    metrics.close()

    return {
        "train": train,
        "test": test,
        "view": view,
        "model_config": model_config,
        "boot_config": boot_config,
        "boot_model": boot_model,
        "records": records,
        "transition": transition,
        "split": split,
        "ssl_config": ssl_config,
        "ssl_model": ssl_model,
        "relabeled": relabeled,
        "final_model": final_model,
        "metrics_path": metrics_path,
    }


@pytest.fixture(scope="session")
def mini_metrics(mini_run):
    with open(mini_run["metrics_path"], encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


@pytest.fixture(scope="session")
def pretrain_probe():
    """SimCLR on 500 unlabeled images vs a random-init backbone, scored by a
    logistic-regression probe on the hidden true labels."""
    from sklearn.linear_model import LogisticRegression

    train = make_template_dataset(NUM_CLASSES, 500, 32, seed=21)
    test = make_template_dataset(NUM_CLASSES, 200, 32, seed=22, split_tag="test")

    def probe(backbone):
        with torch.no_grad():
            f_tr = backbone(train.images.permute(0, 3, 1, 2)).numpy()
            f_te = backbone(test.images.permute(0, 3, 1, 2)).numpy()
        clf = LogisticRegression(max_iter=2000)
        clf.fit(f_tr, train.true_labels_oracle())
        return float(clf.score(f_te, test.true_labels_oracle()))

    config = ModelConfig(variant="modified", backbone="tiny32", num_classes=NUM_CLASSES)
    torch.manual_seed(123)
    random_model = Classifier(config).eval()
    probe_random = probe(random_model.backbone)

    records = []

    class Capture(MetricsLogger):
        def __init__(self):
            super().__init__(None)

        def log(self, **rec):
            records.append(rec)

    torch.manual_seed(123)
    pretrained = Classifier(config)
    pretrain(
        train.unlabeled_view(),
        ContrastiveConfig(epochs=20, batch_size=128, lr=0.3),
        pretrained, SeedStreams(5), Capture(),
    )
    probe_pretrained = probe(pretrained.backbone.eval())
    epoch_losses = [r["mean_loss"] for r in records if "mean_loss" in r]
    return {
        "probe_random": probe_random,
        "probe_pretrained": probe_pretrained,
        "epoch_losses": epoch_losses,
    }
