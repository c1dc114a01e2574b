"""Seeded training loop, learning-rate schedule, checkpoint evaluation."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import ImageStore, Manifest, PKSampler
from .evaluation import EvalReport, cosine_distance_matrix, evaluate
from .losses import CenterBank, LossConfig, center_update, composite_loss
from .model import (
    BackboneConfig,
    BranchSpec,
    CanModel,
    build_model,
    inference_descriptor,
    load_checkpoint,
    save_checkpoint,
)
from .optim import AdamState, adam_step
from .tensor import Tape

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    branches: list[int] = field(default_factory=lambda: [1, 3, 5, 7])
    embed_dim: int = 64
    num_classes: int = 0  # 0: number of training identities
    P: int = 4
    K: int = 4
    input_h: int = 96
    input_w: int = 32
    stem_channels: int = 16
    stem_stride: int = 2
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    strides: list[int] = field(default_factory=lambda: [1, 2, 2, 1])
    collaborative_attention: bool = True
    cosine_scale: float = 16.0
    margin: float = 0.3
    center_weight: float = 0.0005
    center_lr: float = 0.5
    center_unsquared: bool = False
    use_ce: bool = True
    use_triplet: bool = True
    use_center: bool = True
    supervise_local: bool = True
    base_lr: float = 1e-3
    decay_epochs: list[int] = field(default_factory=lambda: [120, 160])
    decay_factor: float = 0.1
    epochs: int = 200
    max_steps: int = 0  # 0: no cap
    seed: int = 0
    dtype: str = "float64"
    norm_mean: float = 0.5
    norm_std: float = 0.5
    eval_every: int = 20
    checkpoint_every: int = 0  # epochs; 0: final checkpoint only
    max_rank: int = 10

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if self.epochs < 0 or self.P < 1 or self.K < 1 or self.base_lr <= 0:
            raise ValueError("epochs >= 0, P, K >= 1 and base_lr > 0 required")
        if self.use_triplet and self.K < 2:
            raise ValueError("triplet loss needs K >= 2")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.stem_channels, self.stem_stride, tuple(self.widths),
                              tuple(self.strides), self.input_h, self.input_w)

    def loss(self) -> LossConfig:
        return LossConfig(self.use_ce, self.use_triplet, self.use_center, self.supervise_local,
                          self.margin, self.center_weight, self.center_unsquared)


def paper_config() -> TrainConfig:
    """Full-scale settings: 384x128 input, ResNet50-like widths, 600 epochs."""
    return TrainConfig(branches=[1, 3, 5, 7], embed_dim=256, P=8, K=4, input_h=384, input_w=128,
                       stem_channels=64, stem_stride=4, widths=[256, 512, 1024, 2048],
                       strides=[1, 2, 2, 1], base_lr=3e-4, decay_epochs=[250, 350, 450],
                       epochs=600, center_weight=0.0005)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Base rate times decay_factor per boundary already reached (epoch >= boundary)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for b in config.decay_epochs if epoch >= b)
    return config.base_lr * config.decay_factor ** passed


@dataclass
class MetricsLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def loss_values(self) -> list[float]:
        return [s["total"] for s in self.steps]


@dataclass
class TrainResult:
    model: CanModel
    log: MetricsLog
    checkpoint: Path | None
    report: EvalReport | None


def evaluate_model(model: CanModel, manifest: Manifest, store: ImageStore | None = None,
                   max_rank: int = 10) -> EvalReport:
    """Descriptors for query and gallery records, cosine distances, CMC/mAP."""
    if store is None:
        store = ImageStore(manifest, model.backbone.input_h, model.backbone.input_w, dtype=model.dtype)
    q, g = manifest.split("query"), manifest.split("gallery")
    if not q or not g:
        raise ValueError("manifest needs non-empty query and gallery splits")
    qf = inference_descriptor(model, store.batch(q))
    gf = inference_descriptor(model, store.batch(g))
    meta = lambda idx: ([manifest.records[i].person_id for i in idx],  # noqa: E731
                        [manifest.records[i].camera_id for i in idx])
    dm = cosine_distance_matrix(qf, gf, meta(q), meta(g))
    return evaluate(dm, max_rank=min(max_rank, len(g)))


def evaluate_checkpoint(checkpoint: str | os.PathLike, manifest: Manifest, max_rank: int = 10) -> EvalReport:
    model = load_checkpoint(checkpoint)
    extra = json.loads((Path(checkpoint) / "meta.json").read_text()).get("extra", {})
    cfg = extra.get("config", {})
    store = ImageStore(manifest, model.backbone.input_h, model.backbone.input_w,
                       cfg.get("norm_mean", 0.5), cfg.get("norm_std", 0.5), model.dtype)
    return evaluate_model(model, manifest, store, max_rank)


def train(config: TrainConfig, manifest: Manifest, out_dir: str | os.PathLike | None = None,
          evaluate_at_end: bool = True) -> TrainResult:
    """PK batch -> forward -> composite loss -> backward -> Adam -> center update, repeated."""
    manifest.validate_pk(config.P, config.K)
    ids = manifest.train_ids()
    label_of = {pid: i for i, pid in enumerate(ids)}
    num_classes = config.num_classes or len(ids)
    if num_classes < len(ids):
        raise ValueError(f"num_classes={num_classes} but {len(ids)} training ids")

    model_seed, sampler_seed = np.random.SeedSequence(config.seed).generate_state(2)
    model = build_model(config.backbone(), BranchSpec(tuple(config.branches)), config.embed_dim,
                        num_classes, int(model_seed), cosine_scale=config.cosine_scale,
                        collaborative_attention=config.collaborative_attention, dtype=config.dtype)
    bank = CenterBank(model.centers, lr=config.center_lr)
    loss_cfg = config.loss()
    store = ImageStore(manifest, config.input_h, config.input_w, config.norm_mean,
                       config.norm_std, model.dtype)
    sampler = PKSampler(manifest, config.P, config.K, int(sampler_seed))
    state = AdamState()
    metrics = MetricsLog()
    params = model.parameters()

    out = Path(out_dir) if out_dir is not None else None
    step_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
        step_log = open(out / "metrics.jsonl", "w")

    def checkpoint(name):
        if out is None:
            return None
        return save_checkpoint(model, out / name, extra={"config": config.to_dict()})

    def run_eval(epoch):
        if not (manifest.split("query") and manifest.split("gallery")):
            return None
        report = evaluate_model(model, manifest, store, config.max_rank)
        entry = {"type": "eval", "epoch": epoch, **report.to_dict()}
        metrics.evals.append(entry)
        if step_log:
            step_log.write(json.dumps(entry) + "\n")
        log.info("epoch %d: mAP %.4f rank-1 %.4f", epoch, report.mAP, report.rank1)
        return report

    step = 0
    report = None
    try:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            for idx, pids in sampler.epoch_batches():
                if config.max_steps and step >= config.max_steps:
                    break
                labels = np.array([label_of[p] for p in pids])
                model.zero_grad()
                with Tape() as tape:
                    output = model(store.batch(idx))
                    br = composite_loss(output, labels, loss_cfg, model.centers)
                total = br.total.item()
                if not np.isfinite(total):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {br.as_dict()}")
                recomposed = br.ce + br.triplet + config.center_weight * br.center
                if abs(total - recomposed) > 1e-10:
                    raise AssertionError(f"loss breakdown {recomposed} != total {total}")
                tape.backward(br.total)
                adam_step(params, state, lr)
                if config.use_center:
                    center_update(bank, output.features.data, labels)
                entry = {"type": "step", "epoch": epoch, "step": step, "lr": lr, **br.as_dict()}
                metrics.steps.append(entry)
                if step_log:
                    step_log.write(json.dumps(entry) + "\n")
                step += 1
            last = epoch == config.epochs - 1 or (config.max_steps and step >= config.max_steps)
            if config.eval_every and (epoch + 1) % config.eval_every == 0 and not last:
                run_eval(epoch)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0 and not last:
                checkpoint(f"checkpoint_epoch{epoch + 1:04d}")
            if last:
                break
        if evaluate_at_end:
            report = run_eval(max(config.epochs - 1, 0))
    finally:
        if step_log:
            step_log.close()
    ckpt = checkpoint("checkpoint")
    if out is not None and metrics.evals:
        with open(out / "evals.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mAP", "rank1"])
            for e in metrics.evals:
                w.writerow([e["epoch"], e["mAP"], e["cmc"][0]])
    return TrainResult(model, metrics, ckpt, report)
