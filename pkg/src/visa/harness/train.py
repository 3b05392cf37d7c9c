"""PK-sampled momentum-SGD training with a cosine learning-rate schedule."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np
import torch

from visa.harness.config import RunConfig, from_dict
from visa.losses import LossBreakdown, total_loss
from visa.model import ViSA
from visa.synthetic import SyntheticDataset, generate_dataset, load_dataset

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, component: str, step: int):
        super().__init__(f"non-finite {component} loss at step {step}")
        self.component = component


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    lr: float
    losses: Dict[str, float]
    expert_usage: Dict[str, List[int]]

    def to_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "step": self.step, "lr": self.lr, **self.losses,
             "expert_usage": self.expert_usage}
        )


@dataclass
class CheckpointRecord:
    model_state: Dict[str, torch.Tensor]
    optimizer_state: dict
    epoch: int
    config: dict
    config_hash: str
    format_version: int = FORMAT_VERSION
    logs: List[TrainLogRecord] = field(default_factory=list, repr=False)

    def payload(self) -> dict:
        return {
            "format_version": self.format_version,
            "config_hash": self.config_hash,
            "config": self.config,
            "epoch": self.epoch,
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
        }

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(self.payload(), buf)
        return buf.getvalue()

    def run_config(self) -> RunConfig:
        return from_dict(copy.deepcopy(self.config))


def save_checkpoint(record: CheckpointRecord, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(record.to_bytes())
    return path


def load_checkpoint(path: Union[str, Path]) -> CheckpointRecord:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')}")
    return CheckpointRecord(
        model_state=payload["model_state"],
        optimizer_state=payload["optimizer_state"],
        epoch=payload["epoch"],
        config=payload["config"],
        config_hash=payload["config_hash"],
        format_version=payload["format_version"],
    )


def cosine_lr(step: int, total_steps: int, lr: float, final_lr: float, warmup_steps: int = 0) -> float:
    """Linear warm-up, then cosine decay reaching ``final_lr`` exactly at the last step."""
    if warmup_steps and step < warmup_steps:
        return lr * (step + 1) / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return final_lr
    t = (step - warmup_steps) / span
    return final_lr + 0.5 * (lr - final_lr) * (1.0 + math.cos(math.pi * t))


class PKSampler:
    """Batches of P identities x K instances.

    Each epoch shuffles every identity's samples, cuts them into chunks of K
    (dropping the remainder), and draws P distinct identities per batch until
    fewer than P identities have chunks left. Identities with fewer than K
    samples never appear.
    """

    def __init__(self, labels: np.ndarray, p: int, k: int, seed: int):
        self.labels = np.asarray(labels)
        self.p, self.k, self.seed = p, k, seed
        ids, counts = np.unique(self.labels, return_counts=True)
        self.ids = ids[counts >= k]
        if len(self.ids) < p:
            raise ValueError(f"only {len(self.ids)} identities have >= {k} samples; need {p}")

    def epoch(self, epoch: int) -> Iterator[np.ndarray]:
        rng = np.random.default_rng([self.seed, epoch])
        chunks = {}
        for i in self.ids:
            idx = rng.permutation(np.flatnonzero(self.labels == i))
            n = len(idx) // self.k
            chunks[i] = [idx[j * self.k : (j + 1) * self.k] for j in range(n)]
        while True:
            avail = [i for i in self.ids if chunks[i]]
            if len(avail) < self.p:
                return
            chosen = rng.choice(avail, size=self.p, replace=False)
            yield np.concatenate([chunks[i].pop() for i in chosen])

    def __len__(self) -> int:
        return sum(1 for _ in self.epoch(0))


def configure_runtime(cfg: RunConfig) -> None:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def build_model(cfg: RunConfig, num_classes: int) -> ViSA:
    return ViSA(
        num_classes,
        copy.deepcopy(cfg.encoder),
        copy.deepcopy(cfg.etgm),
        copy.deepcopy(cfg.dlfm),
        copy.deepcopy(cfg.ablation),
    )


def load_data(cfg: RunConfig) -> SyntheticDataset:
    if cfg.data.root is not None:
        return load_dataset(Path(cfg.data.root))
    return generate_dataset(copy.deepcopy(cfg.data.synthetic))


@dataclass
class TrainSplit:
    pixels: torch.Tensor
    labels: torch.Tensor
    views: torch.Tensor
    num_classes: int


def train_split(ds: SyntheticDataset) -> TrainSplit:
    idx = ds.split_indices("train")
    if len(idx) == 0:
        raise ValueError("dataset has no training samples")
    raw = ds.column("identity_label", idx)
    classes, labels = np.unique(raw, return_inverse=True)
    return TrainSplit(
        pixels=torch.from_numpy(ds.pixels(idx)),
        labels=torch.from_numpy(labels.astype(np.int64)),
        views=torch.from_numpy(ds.column("view_label", idx).astype(np.int64)),
        num_classes=len(classes),
    )


def _check_finite(breakdown: LossBreakdown, step: int) -> None:
    for name in LossBreakdown.COMPONENTS + ("total",):
        if not torch.isfinite(getattr(breakdown, name)):
            raise NonFiniteLossError(name, step)


def _usage(out, num_experts: int) -> Dict[str, List[int]]:
    usage = {}
    for name, r in zip(("invariant", "specific"), out.routings):
        usage[name] = np.bincount(r.selected.flatten().numpy(), minlength=num_experts).tolist()
    return usage


def train(
    cfg: RunConfig,
    dataset: Optional[SyntheticDataset] = None,
    log_path: Optional[Union[str, Path]] = None,
) -> CheckpointRecord:
    """Train a model and return its final checkpoint record (with logs attached)."""
    cfg.validate()
    configure_runtime(cfg)
    ds = dataset if dataset is not None else load_data(cfg)
    split = train_split(ds)
    sampler = PKSampler(split.labels.numpy(), cfg.data.ids_per_batch, cfg.data.instances_per_id, cfg.seed)
    steps_per_epoch = len(sampler)
    if steps_per_epoch == 0:
        raise ValueError("PK sampler yields no batches for this dataset")

    torch.manual_seed(cfg.seed)
    model = build_model(cfg, split.num_classes)
    opt = torch.optim.SGD(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.optim.lr,
        momentum=cfg.optim.momentum,
        weight_decay=cfg.optim.weight_decay,
    )
    total_steps = cfg.optim.epochs * steps_per_epoch
    warmup = cfg.optim.warmup_epochs * steps_per_epoch

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if log_path is None and out_dir is not None:
        log_path = out_dir / "train_log.jsonl"
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w")

    logs: List[TrainLogRecord] = []
    step = 0
    try:
        model.train()
        for epoch in range(cfg.optim.epochs):
            for batch in sampler.epoch(epoch):
                lr = cosine_lr(step, total_steps, cfg.optim.lr, cfg.optim.final_lr, warmup)
                for group in opt.param_groups:
                    group["lr"] = lr
                idx = torch.from_numpy(batch)
                labels, views = split.labels[idx], split.views[idx]
                out = model(split.pixels[idx], views)
                breakdown = total_loss(out, labels, views, cfg.loss)
                _check_finite(breakdown, step)
                opt.zero_grad()
                breakdown.total.backward()
                if cfg.optim.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
                opt.step()
                if step % cfg.log_every == 0 or step == total_steps - 1:
                    rec = TrainLogRecord(
                        epoch, step, lr, breakdown.as_floats(), _usage(out, cfg.etgm.num_experts)
                    )
                    logs.append(rec)
                    if log_fh:
                        log_fh.write(rec.to_json() + "\n")
                step += 1
            if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(_record(model, opt, epoch, cfg), out_dir / f"epoch_{epoch + 1:03d}.pt")
    finally:
        if log_fh:
            log_fh.close()

    record = _record(model, opt, cfg.optim.epochs - 1, cfg)
    record.logs = logs
    if out_dir:
        save_checkpoint(record, out_dir / "final.pt")
    log.info("trained %d steps, final loss %.4f", step, logs[-1].losses["total"] if logs else float("nan"))
    return record


def _record(model: ViSA, opt: torch.optim.Optimizer, epoch: int, cfg: RunConfig) -> CheckpointRecord:
    return CheckpointRecord(
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer_state=copy.deepcopy(opt.state_dict()),
        epoch=epoch,
        config=cfg.to_dict(),
        config_hash=cfg.hash(),
    )
