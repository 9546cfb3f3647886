from __future__ import annotations

from typing import Any, Callable, Sequence

import torch
import tqdm
from accelerate import Accelerator
from torch.optim import Optimizer
from torch.optim.lr_scheduler import LRScheduler

from openintent.errors import DivergenceError

TrainerCallback = Callable[['Trainer'], None]


class Trainer:
    """Epoch loop shared by both training stages.

    `train_batches` is re-iterated every epoch; an epoch-end callback may resample it in place.
    `model(**batch)` returns a dict of scalar tensors: 'loss' is optimized, every entry is tracked.
    """

    def __init__(
        self,
        *,
        model: torch.nn.Module,
        train_batches: Sequence[dict[str, Any]],
        optimizer: Optimizer,
        accelerator: Accelerator,
        epochs: int = 3,
        lr_scheduler: LRScheduler | None = None,
        log_interval: int = 50,
        step_end_callbacks: list[TrainerCallback] | None = None,
        epoch_end_callbacks: list[TrainerCallback] | None = None,
        show_progress: bool = True,
        name: str = 'train',
    ):
        self.model = model
        self.optimizer = optimizer
        self.train_batches = train_batches
        self.lr_scheduler = lr_scheduler
        self.accelerator = accelerator
        self.epochs = epochs
        self.log_interval = log_interval
        self.name = name

        self.tracker = MetricTracker()
        self.progress_bar = EpochProgressBar(name, epochs, len(train_batches), disable=not show_progress)
        self.step_end_callbacks = step_end_callbacks or []
        self.epoch_end_callbacks = epoch_end_callbacks or []
        self.current_step = 0
        self.current_epoch = 0
        self.should_stop = False

    def train(self):
        for epoch in range(1, self.epochs + 1):
            self.current_epoch = epoch
            self.model.train()
            self.progress_bar.on_epoch_start(epoch)
            for batch in self.train_batches:
                self.training_step(batch)

            summary = self.tracker.on_epoch_end()
            self.accelerator.log(self.add_prefix(summary, self.name), step=epoch)
            self.progress_bar.on_epoch_end()

            for callback in self.epoch_end_callbacks:
                callback(self)
            if self.should_stop:
                self.accelerator.print(f'{self.name}: stopping early after epoch {epoch}')
                break

        self.accelerator.end_training()

    def training_step(self, batch: dict[str, Any]) -> None:
        self.optimizer.zero_grad()
        outputs = self.model(**batch)
        loss = outputs['loss']
        if not torch.isfinite(loss):
            raise DivergenceError(f'{self.name} loss became {float(loss)} at step {self.current_step}', step=self.current_step)
        self.accelerator.backward(loss)
        self.optimizer.step()
        if self.lr_scheduler is not None:
            self.lr_scheduler.step()
        self.tracker.update(outputs)
        for callback in self.step_end_callbacks:
            callback(self)

        self.current_step += 1
        self.progress_bar.update()
        if self.current_step % self.log_interval == 0:
            metrics = self.tracker.means()
            self.accelerator.log(self.add_prefix(metrics, f'{self.name}_step'), step=self.current_step)
            self.progress_bar.show_metrics(metrics)

    @staticmethod
    def add_prefix(values: dict[str, Any], prefix: str):
        return {f'{prefix}/{k}': v for k, v in values.items()}


class MetricTracker:
    """Running means of named scalars within an epoch, and the per-epoch means."""

    def __init__(self, ndigits: int = 6) -> None:
        self.ndigits = ndigits
        self.totals: dict[str, float] = {}
        self.count = 0
        self.history: list[dict[str, float]] = []

    def update(self, values: dict[str, torch.Tensor | float]) -> None:
        for name, value in values.items():
            self.totals[name] = self.totals.get(name, 0.0) + float(value)
        self.count += 1

    def means(self) -> dict[str, float]:
        if not self.count:
            return {}
        return {name: round(total / self.count, self.ndigits) for name, total in self.totals.items()}

    def on_epoch_end(self) -> dict[str, float]:
        summary = self.means()
        self.history.append(summary)
        self.totals = {}
        self.count = 0
        return summary


class EpochProgressBar:
    def __init__(self, name: str, epochs: int, steps_per_epoch: int, disable: bool = False) -> None:
        self.name = name
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.disable = disable
        self.bar: tqdm.tqdm | None = None

    def on_epoch_start(self, epoch: int) -> None:
        self.bar = tqdm.tqdm(
            total=self.steps_per_epoch, desc=f'{self.name} {epoch}/{self.epochs}', unit='step', disable=self.disable
        )

    def update(self) -> None:
        if self.bar is not None:
            self.bar.update()

    def show_metrics(self, metrics: dict[str, float]) -> None:
        if self.bar is not None:
            self.bar.set_postfix({name: f'{value:.4f}' for name, value in metrics.items()})

    def on_epoch_end(self) -> None:
        if self.bar is not None:
            self.bar.close()
            self.bar = None


def create_accelerator(project_dir: str | None = None, use_tensorboard: bool = False) -> Accelerator:
    if use_tensorboard and project_dir is not None:
        from accelerate.utils import ProjectConfiguration

        accelerator = Accelerator(
            cpu=True,
            project_config=ProjectConfiguration(project_dir=project_dir, logging_dir=project_dir),
            log_with=['tensorboard'],
        )
        accelerator.init_trackers('openintent')
        return accelerator
    return Accelerator(cpu=True)
