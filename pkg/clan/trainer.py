"""
SGD training loop with per-epoch evaluation, CSV log and checkpoints.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pytz

from clan import checkpoint
from clan.config import RunConfig, serialize_config
from clan.data import Sample, iterate_batches, load_or_generate
from clan.errors import DivergenceError
from clan.model import (
    BranchOutputs,
    ClanModel,
    build_model,
    clan_forward,
    clan_loss,
    clan_predict,
    default_subsets,
    resolve_branch_subset,
)
from clan.tensor import Tensor, backward, no_grad, set_precision

logger = logging.getLogger(__name__)

EVAL_BATCH = 128


class SGD:
    """
    Momentum SGD with L2 weight decay folded into the step:
        v ← μv + g;  w ← w − lr·v − lr·wd·w
    Parameters without a gradient this step are left untouched.
    """

    def __init__(self, params: Dict[str, Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def step(self, lr: float) -> None:
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            previous = self.velocity.get(name)
            velocity = tensor.grad if previous is None else self.momentum * previous + tensor.grad
            self.velocity[name] = velocity
            tensor.data = tensor.data - (lr * velocity + lr * self.weight_decay * tensor.data)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    accuracies: Dict[str, float]


def collect_outputs(model: ClanModel, samples: List[Sample], batch: int = EVAL_BATCH) -> BranchOutputs:
    """Forward the samples in dataset order and concatenate every branch's logits."""
    chunks: List[List[np.ndarray]] = []
    names: List[str] = []
    with no_grad():
        for start in range(0, len(samples), batch):
            chosen = samples[start:start + batch]
            outputs = clan_forward(model, Tensor(np.stack([s.image for s in chosen])))
            names = outputs.names
            chunks.append([t.data for t in outputs.logits])
    logits = [Tensor(np.concatenate([c[i] for c in chunks])) for i in range(len(names))]
    return BranchOutputs(names=names, logits=logits)


def evaluate(
    model: ClanModel, samples: List[Sample], subsets: Optional[Sequence[str]] = None
) -> Dict[str, float]:
    """Accuracy of each branch-subset expression on `samples`."""
    subsets = list(subsets) if subsets else default_subsets(model.branch_names)
    outputs = collect_outputs(model, samples)
    labels = np.array([s.label for s in samples])
    accuracies = {}
    for expression in subsets:
        chosen = resolve_branch_subset(outputs.names, expression)
        predictions = clan_predict(outputs, chosen)
        accuracies[expression] = float(np.mean(predictions == labels))
    return accuracies


def save_model(model: ClanModel, path: Path) -> Path:
    return checkpoint.save_tensors(path, model.state_dict())


def load_model(config: RunConfig, path: Path) -> ClanModel:
    """Build the configured model and fill it from a checkpoint."""
    model = build_model(config.model, config.seed)
    model.load_state_dict(checkpoint.load_tensors(path))
    return model


class Trainer:
    def __init__(self, config: RunConfig, output_dir: Optional[Path] = None):
        self.config = config
        self.output_dir = Path(output_dir or config.output_dir)
        set_precision(config.precision)
        self.model = build_model(config.model, config.seed)
        self.optimizer = SGD(
            self.model.named_parameters(),
            momentum=config.optim.momentum,
            weight_decay=config.optim.weight_decay,
        )
        self.subsets = default_subsets(self.model.branch_names)
        self.branch_weights = config.model.branch_weights
        self.train_set = load_or_generate(config.data, 'train', config.cache_dir or None)
        self.test_set = load_or_generate(config.data, 'test', config.cache_dir or None)

    @property
    def csv_path(self) -> Path:
        return self.output_dir / 'metrics.csv'

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / 'checkpoint.clan'

    def csv_header(self) -> List[str]:
        return ['epoch', 'lr', 'train_loss'] + [f"acc_{s}" for s in self.subsets]

    def train_epoch(self, epoch: int, lr: float) -> float:
        """One pass over the training set; returns the sample-weighted mean loss."""
        optim = self.config.optim
        total, seen = 0.0, 0
        batches = iterate_batches(self.train_set, optim.batch_size, self.config.seed, epoch)
        for step, (images, labels) in enumerate(batches):
            self.optimizer.zero_grad()
            outputs = clan_forward(self.model, images)
            loss = clan_loss(outputs, labels, self.branch_weights)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(
                    f"loss became {value} at epoch {epoch + 1}, batch {step + 1}"
                )
            backward(loss)
            self.optimizer.step(lr)
            total += value * len(labels)
            seen += len(labels)
        return total / seen

    def write_manifest(self) -> Path:
        manifest = {
            'started_at': datetime.now(pytz.UTC).isoformat(),
            'seed': self.config.seed,
            'precision': self.config.precision,
            'branches': self.model.branch_names,
            'subsets': self.subsets,
            'config': serialize_config(self.config),
        }
        path = self.output_dir / 'run_manifest.json'
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False)
        return path

    def run(self) -> List[EpochRecord]:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.write_manifest()
        records: List[EpochRecord] = []

        with open(self.csv_path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(self.csv_header())
            for epoch in range(self.config.optim.epochs):
                lr = self.config.optim.lr_at(epoch)
                train_loss = self.train_epoch(epoch, lr)
                accuracies = evaluate(self.model, self.test_set, self.subsets)
                record = EpochRecord(epoch + 1, lr, train_loss, accuracies)
                records.append(record)

                writer.writerow(
                    [record.epoch, repr(lr), repr(train_loss)]
                    + [repr(accuracies[s]) for s in self.subsets]
                )
                f.flush()
                save_model(self.model, self.checkpoint_path)
                save_model(self.model, self.output_dir / f"checkpoint_epoch{record.epoch:03d}.clan")

                metrics = ' '.join(f"acc_{s}={accuracies[s]:.4f}" for s in self.subsets)
                print(f"epoch={record.epoch} lr={lr:.6g} train_loss={train_loss:.6f} {metrics}")
                logger.info(f"Epoch {record.epoch}/{self.config.optim.epochs} done")
        return records
