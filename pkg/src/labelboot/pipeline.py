"""Stage sequencing, artifact persistence, and resumability.

A run directory holds one manifest plus per-stage artifacts::

    manifest.json           stage status map + frozen config snapshot
    metrics.jsonl           streaming metrics from every stage
    train_noise.csv         injected noisy labels (synthetic runs)
    pretrain.ckpt           backbone parameters
    bootstrap.ckpt          stage-1 classifier
    records.csv             per-sample confidences
    transition.json         estimated transition matrix
    split.csv               clean/noisy partition
    ssl.ckpt                stage-2 EMA classifier
    relabel.csv/.npy        whole-dataset relabelling
    final.ckpt              stage-3 classifier
    eval.json               final evaluation reports

Stages run strictly in order; a finished stage is never re-executed, so
a rerun after completion is a no-op and a crashed run resumes from the
last completed stage.  The config snapshot freezes once the first stage
completes.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .bootstrap import (
    class_balanced_select,
    estimate_transition_matrix,
    load_split_csv,
    noise_balanced_select,
    save_records_csv,
    save_split_csv,
    score_confidences,
    train_bootstrap,
)
from .config import RunConfig, canonical_yaml, config_from_dict, validate_config
from .data import NoisyDataset, load_blob_dataset, load_directory_dataset
from .errors import ConfigError
from .evaluation import evaluate
from .final_train import train_final
from .fixmatch import load_relabel, relabel_dataset, run_ssl, save_relabel
from .metrics import MetricsLogger
from .models import Classifier, load_checkpoint, save_checkpoint
from .noise import NoiseSpec, apply_noise_spec, save_noise_file
from .pretrain import pretrain, save_backbone
from .seeding import SeedStreams, derive_seed
from .synthetic import make_template_dataset

import yaml

STAGES = ("pretrain", "bootstrap", "ssl", "final", "eval")
MANIFEST_VERSION = 1
RUNS_DIR_ENV = "LABELBOOT_RUNS_DIR"


def default_runs_dir() -> Path:
    return Path(os.environ.get(RUNS_DIR_ENV, "runs"))


@dataclass
class RunManifest:
    run_id: str
    seed: int
    config_yaml: str
    created_at: float
    updated_at: float
    stages: dict  # name -> {"status": pending|done|skipped, "artifact": str|None, ...}

    @classmethod
    def fresh(cls, config: RunConfig) -> "RunManifest":
        now = time.time()
        return cls(
            run_id=config.run_id,
            seed=config.seed,
            config_yaml=canonical_yaml(config),
            created_at=now,
            updated_at=now,
            stages={name: {"status": "pending", "artifact": None} for name in STAGES},
        )

    def save(self, path: Path) -> None:
        self.updated_at = time.time()
        payload = {"format_version": MANIFEST_VERSION, **dataclasses.asdict(self)}
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        payload = json.loads(path.read_text(encoding="utf-8"))
        if payload.pop("format_version", None) != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version in {path}")
        return cls(**payload)

    def status(self, stage: str) -> str:
        return self.stages[stage]["status"]

    def mark(self, stage: str, status: str, artifact: str | None = None, **info) -> None:
        entry = {"status": status, "artifact": artifact, "completed_at": time.time()}
        entry.update(info)
        self.stages[stage] = entry

    def config(self) -> RunConfig:
        return config_from_dict(yaml.safe_load(self.config_yaml))

    def any_done(self) -> bool:
        return any(s["status"] == "done" for s in self.stages.values())


# ---------------------------------------------------------------------------
# Dataset assembly


def build_datasets(config: RunConfig) -> tuple[NoisyDataset, NoisyDataset]:
    """(noisy train set, clean test set) per the data + noise sections."""
    d = config.data
    if d.source == "synthetic":
        train = make_template_dataset(
            d.classes, d.train_size, d.image_size, seed=d.seed,
            noise_sigma=d.noise_sigma, split_tag="train",
        )
        test = make_template_dataset(
            d.classes, d.test_size, d.image_size, seed=d.seed + 1,
            noise_sigma=d.noise_sigma, split_tag="test",
        )
    elif d.source == "directory":
        train = load_directory_dataset(d.root, "train")
        test = load_directory_dataset(d.root, "test")
    else:
        train = load_blob_dataset(Path(d.root) / "train")
        test = load_blob_dataset(Path(d.root) / "test")
    if config.noise.kind == "aux_model":
        raise ConfigError(
            "aux_model noise needs a predictor object; inject it via the library API"
        )
    if config.noise.kind != "symmetric" or config.noise.rate:
        train = apply_noise_spec(train, config.noise)
    return train, test


def noisy_test_set(config: RunConfig, test: NoisyDataset) -> NoisyDataset:
    """Test-time noisy labels: same procedure as training noise, independent seed."""
    spec = config.noise
    test_spec = NoiseSpec(
        kind=spec.kind, rate=spec.rate, mapping=spec.mapping,
        seed=derive_seed(config.seed, "test_noise"), path=spec.path,
    )
    return apply_noise_spec(test, test_spec)


# ---------------------------------------------------------------------------
# Stage runners


def _stage_eval_top1(model: Classifier, test: NoisyDataset, streams: SeedStreams) -> float:
    return evaluate(model, test, label_mode="null", tta=False, streams=streams).top1


def run_pipeline(
    config: RunConfig,
    run_dir: str | Path | None = None,
    from_stage: str | None = None,
) -> RunManifest:
    """Execute pretrain -> bootstrap -> ssl -> final -> eval, resumably."""
    problems = validate_config(config)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    run_dir = Path(run_dir) if run_dir is not None else default_runs_dir() / config.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / "manifest.json"
    snapshot = canonical_yaml(config)
    if manifest_path.exists():
        manifest = RunManifest.load(manifest_path)
        if manifest.any_done() and manifest.config_yaml != snapshot:
            raise ConfigError(
                "config differs from the snapshot frozen in the manifest; "
                "start a new run_id to change configuration"
            )
    else:
        manifest = RunManifest.fresh(config)
        manifest.save(manifest_path)
    if from_stage is not None:
        if from_stage not in STAGES:
            raise ConfigError(f"unknown stage {from_stage!r}; stages: {STAGES}")
        for name in STAGES[: STAGES.index(from_stage)]:
            if manifest.status(name) == "pending":
                manifest.mark(name, "skipped", artifact=_expected_artifact(run_dir, name))

    train, test = build_datasets(config)
    if train.has_true_labels:
        save_noise_file(train.noisy_labels, run_dir / "train_noise.csv")
    streams = SeedStreams(config.seed)
    metrics = MetricsLogger(run_dir / "metrics.jsonl")

    try:
        _maybe_run_pretrain(config, manifest, run_dir, train, streams, metrics)
        _maybe_run_bootstrap(config, manifest, run_dir, train, test, streams, metrics)
        _maybe_run_ssl(config, manifest, run_dir, train, test, streams, metrics)
        _maybe_run_final(config, manifest, run_dir, train, test, streams, metrics)
        _maybe_run_eval(config, manifest, run_dir, test, streams)
    finally:
        metrics.close()
        manifest.save(manifest_path)
    return manifest


def _expected_artifact(run_dir: Path, stage: str) -> str:
    names = {
        "pretrain": "pretrain.ckpt",
        "bootstrap": "bootstrap.ckpt",
        "ssl": "ssl.ckpt",
        "final": "final.ckpt",
        "eval": "eval.json",
    }
    return str(run_dir / names[stage])


def _require_prior(manifest: RunManifest, stage: str) -> None:
    for name in STAGES[: STAGES.index(stage)]:
        if manifest.status(name) not in ("done", "skipped"):
            raise ConfigError(f"stage '{stage}' requires '{name}' to be done or skipped")


def _require_artifact(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ConfigError(f"stage '{stage}' needs missing artifact {path}")
    return path


def _maybe_run_pretrain(config, manifest, run_dir, train, streams, metrics) -> None:
    if manifest.status("pretrain") != "pending":
        return
    torch.manual_seed(streams.derive("init"))
    model = Classifier(config.model)
    backbone = pretrain(train.unlabeled_view(), config.pretrain, model, streams, metrics)
    path = run_dir / "pretrain.ckpt"
    save_backbone(backbone, path)
    manifest.mark("pretrain", "done", artifact=str(path))
    manifest.save(run_dir / "manifest.json")


def _maybe_run_bootstrap(config, manifest, run_dir, train, test, streams, metrics) -> None:
    if manifest.status("bootstrap") != "pending":
        return
    _require_prior(manifest, "bootstrap")
    torch.manual_seed(streams.derive("init"))
    model = Classifier(config.model)
    payload = torch.load(
        _require_artifact(run_dir / "pretrain.ckpt", "bootstrap"), map_location="cpu",
        weights_only=False,
    )
    model.backbone.load_state_dict(payload["backbone_state"])
    view = train.training_view()
    train_bootstrap(view, model, config.bootstrap, streams, metrics)
    records = score_confidences(
        model, view, config.bootstrap.n_eval_augs, streams, config.bootstrap.eval_augment
    )
    save_records_csv(records, run_dir / "records.csv")
    transition = estimate_transition_matrix(
        records, view.noisy_labels, config.bootstrap.top_confident_fraction
    )
    transition.save_json(run_dir / "transition.json")
    if config.effective_balancing() == "noise":
        split = noise_balanced_select(
            records, view.noisy_labels, transition,
            config.bootstrap.selection_fraction, config.bootstrap.confidence_guarantee,
            len(view), config.bootstrap.quota_convention,
        )
    else:
        split = class_balanced_select(
            records, view.noisy_labels,
            config.bootstrap.selection_fraction, config.bootstrap.confidence_guarantee,
            len(view),
        )
    save_split_csv(split, records, run_dir / "split.csv")
    path = run_dir / "bootstrap.ckpt"
    save_checkpoint(model, path, stage="bootstrap")
    top1 = _stage_eval_top1(model, test, streams.child("stage_eval", "bootstrap"))
    metrics.log(stage="bootstrap", event="test_eval", top1=top1)
    manifest.mark(
        "bootstrap", "done", artifact=str(path),
        clean_size=len(split.clean), test_top1=top1,
    )
    manifest.save(run_dir / "manifest.json")


def _maybe_run_ssl(config, manifest, run_dir, train, test, streams, metrics) -> None:
    if manifest.status("ssl") != "pending":
        return
    _require_prior(manifest, "ssl")
    model, _ = load_checkpoint(_require_artifact(run_dir / "bootstrap.ckpt", "ssl"))
    split, _ = load_split_csv(_require_artifact(run_dir / "split.csv", "ssl"))
    view = train.training_view()
    ema_model = run_ssl(split, view, model, config.ssl, streams, metrics)
    relabeled = relabel_dataset(ema_model, view, config.ssl, streams)
    save_relabel(relabeled, run_dir / "relabel.csv", run_dir / "relabel_soft.npy")
    path = run_dir / "ssl.ckpt"
    save_checkpoint(ema_model, path, stage="ssl")
    top1 = _stage_eval_top1(ema_model, test, streams.child("stage_eval", "ssl"))
    metrics.log(stage="ssl", event="test_eval", top1=top1)
    manifest.mark("ssl", "done", artifact=str(path), test_top1=top1)
    manifest.save(run_dir / "manifest.json")


def _maybe_run_final(config, manifest, run_dir, train, test, streams, metrics) -> None:
    if manifest.status("final") != "pending":
        return
    _require_prior(manifest, "final")
    view = train.training_view()
    relabeled = load_relabel(view, _require_artifact(run_dir / "relabel_soft.npy", "final"))
    if config.final.warm_start:
        model, _ = load_checkpoint(_require_artifact(run_dir / "ssl.ckpt", "final"))
    else:
        torch.manual_seed(streams.derive("final_init"))
        model = Classifier(config.model)
    train_final(relabeled, model, config.final, streams, metrics)
    path = run_dir / "final.ckpt"
    save_checkpoint(model, path, stage="final")
    top1 = _stage_eval_top1(model, test, streams.child("stage_eval", "final"))
    metrics.log(stage="final", event="test_eval", top1=top1)
    manifest.mark("final", "done", artifact=str(path), test_top1=top1)
    manifest.save(run_dir / "manifest.json")


def _maybe_run_eval(config, manifest, run_dir, test, streams) -> None:
    if manifest.status("eval") != "pending":
        return
    _require_prior(manifest, "eval")
    model, _ = load_checkpoint(_require_artifact(run_dir / "final.ckpt", "eval"))
    reports = {"plain_null": evaluate(model, test, label_mode="null", tta=False, streams=streams)}
    if config.eval.tta:
        reports["tta_null"] = evaluate(
            model, test, label_mode="null", tta=True, n_augs=config.eval.n_augs, streams=streams
        )
    if config.eval.with_noisy_labels:
        noisy_test = noisy_test_set(config, test)
        reports["plain_noisy"] = evaluate(
            model, noisy_test, label_mode="noisy", tta=False, streams=streams
        )
        if config.eval.tta:
            reports["tta_noisy"] = evaluate(
                model, noisy_test, label_mode="noisy", tta=True,
                n_augs=config.eval.n_augs, streams=streams,
            )
    path = run_dir / "eval.json"
    payload = {name: dataclasses.asdict(r) for name, r in reports.items()}
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    manifest.mark(
        "eval", "done", artifact=str(path),
        top1={name: r.top1 for name, r in reports.items()},
    )
    manifest.save(run_dir / "manifest.json")


def resume(run_dir: str | Path) -> RunManifest:
    """Continue a run from its manifest's frozen config."""
    run_dir = Path(run_dir)
    manifest = RunManifest.load(run_dir / "manifest.json")
    return run_pipeline(manifest.config(), run_dir)
