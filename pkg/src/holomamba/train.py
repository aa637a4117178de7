"""Mini-batch teacher-forced training with per-epoch leave-one-out evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetSplit
from .metrics import evaluate
from .model import HoloMambaRec, window_targets
from .optim import AdamW
from .tensor import Rng, Tape

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    eval_k: int = 10


@dataclass
class MetricsReport:
    epochs: list[dict] = field(default_factory=list)
    bench: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.epochs[-1]


class Trainer:
    def __init__(self, model: HoloMambaRec, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.optimizer = AdamW(model.params.named(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                               eps=cfg.eps, weight_decay=cfg.weight_decay)

    def step(self, items, attrs, targets) -> float:
        """Forward, masked loss, backward and one AdamW update."""
        self.model.training = True
        self.optimizer.zero_grad()
        with Tape() as tape:
            loss = self.model.loss(items, attrs, targets)
        tape.backward(loss)
        self.optimizer.step()
        self.model.training = False
        return loss.item()

    def step_rows(self, split: DatasetSplit, rows) -> float | None:
        targets = split.train_targets[rows]
        if self.model.config.use_compression:
            if not window_targets(targets, self.model.config.bundle_k).any():
                return None
        elif not targets.any():
            return None
        return self.step(split.train_inputs[rows], split.train_attrs[rows], targets)


def epoch_order(seed: int, epoch: int, num_users: int) -> np.ndarray:
    return Rng(seed, 7, epoch).permutation(num_users)


def train(model: HoloMambaRec, split: DatasetSplit, cfg: TrainConfig, log_path=None,
          checkpoint_path=None) -> MetricsReport:
    """Run ``cfg.epochs`` epochs; evaluates HR/NDCG@``eval_k`` after each.

    The final short batch of every epoch is kept. Batches whose targets are
    all padding are skipped. Metrics are appended as JSON lines to
    ``log_path`` when given.
    """
    trainer = Trainer(model, cfg)
    report = MetricsReport()
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            order = epoch_order(model.config.seed, epoch, split.num_users)
            losses = []
            for b in range(0, len(order), cfg.batch_size):
                value = trainer.step_rows(split, np.sort(order[b:b + cfg.batch_size]))
                if value is not None:
                    losses.append(value)
            hr, ndcg = evaluate(model, split, cfg.eval_k)
            record = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                      "hr10": hr, "ndcg10": ndcg, "seconds": time.perf_counter() - start}
            report.epochs.append(record)
            log.info("epoch %d loss %.4f HR@%d %.4f NDCG@%d %.4f", epoch, record["loss"],
                     cfg.eval_k, hr, cfg.eval_k, ndcg)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        model.save(checkpoint_path)
    return report


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
