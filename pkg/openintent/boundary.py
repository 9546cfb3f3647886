from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import torch
from accelerate import Accelerator
from accelerate.utils import set_seed
from sklearn.metrics import f1_score

from openintent.config import Stage2Config
from openintent.criteria import LossOutput
from openintent.errors import CheckpointError, ConfigError, SamplingError
from openintent.trainer import Trainer, create_accelerator
from openintent.types import BoundaryMode, PathType, RadiusParametrization
from openintent.utils import create_adamw_optimizer, generate_batch_indices, make_rng


def compute_centers(embeddings: torch.Tensor, labels: torch.Tensor, num_known: int) -> torch.Tensor:
    counts = torch.bincount(labels, minlength=num_known)[:num_known]
    empty = (counts == 0).nonzero().flatten()
    if len(empty):
        raise SamplingError(f'class {int(empty[0])} has no instances to average', class_id=int(empty[0]))
    if labels.max() >= num_known or labels.min() < 0:
        raise ConfigError(f'labels must lie in [0, {num_known})')
    sums = torch.zeros(num_known, embeddings.size(1), dtype=embeddings.dtype).index_add_(0, labels, embeddings)
    return sums / counts.unsqueeze(-1).to(embeddings.dtype)


def center_distances(embeddings: torch.Tensor, centers: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return (embeddings - centers[labels]).norm(dim=-1)


class BoundaryModel(torch.nn.Module):
    """Per-class spheres: fixed centers and learnable radii."""

    def __init__(
        self,
        centers: torch.Tensor,
        radii: torch.Tensor,
        labels: Sequence[str] | None = None,
        parametrization: RadiusParametrization = RadiusParametrization.clamp,
    ):
        super().__init__()
        if centers.size(0) != radii.size(0):
            raise ConfigError(f'{centers.size(0)} centers but {radii.size(0)} radii')
        if not torch.isfinite(centers).all():
            raise ConfigError('decision centers must be finite')
        if (radii < 0).any():
            raise ConfigError('radii must be non-negative')
        self.register_buffer('centers', centers.detach().clone())
        self.labels = list(labels) if labels is not None else [str(i) for i in range(centers.size(0))]
        self.parametrization = RadiusParametrization(parametrization)
        radii = radii.detach().clone().to(centers.dtype)
        if self.parametrization == RadiusParametrization.softplus:
            # inverse softplus, floored so that zero radii stay representable
            radii = torch.log(torch.expm1(radii.clamp_min(1e-6)))
        self.raw_radii = torch.nn.Parameter(radii)

    @property
    def num_known(self) -> int:
        return self.centers.size(0)

    @property
    def hidden_size(self) -> int:
        return self.centers.size(1)

    @property
    def radii(self) -> torch.Tensor:
        if self.parametrization == RadiusParametrization.softplus:
            return torch.nn.functional.softplus(self.raw_radii)
        return self.raw_radii

    def constrain_(self) -> None:
        if self.parametrization == RadiusParametrization.clamp:
            with torch.no_grad():
                self.raw_radii.clamp_(min=0)

    def distances(self, embeddings: torch.Tensor) -> torch.Tensor:
        return torch.cdist(
            embeddings.to(self.centers.dtype), self.centers, compute_mode='donot_use_mm_for_euclid_dist'
        )

    def predict(self, embeddings: torch.Tensor, ratio: float = 1.0) -> torch.Tensor:
        with torch.no_grad():
            distances = self.distances(embeddings)
            outside = (distances > ratio * self.radii.unsqueeze(0)).all(dim=-1)
            # a zero row marks an instance the encoder could not embed
            outside |= embeddings.abs().sum(dim=-1) == 0
            nearest = distances.argmin(dim=-1)
            return torch.where(outside, torch.full_like(nearest, self.num_known), nearest)

    def to_dict(self) -> dict:
        return {
            'H': self.hidden_size,
            'labels': self.labels,
            'centers': self.centers.tolist(),
            'radii': self.radii.detach().tolist(),
        }

    def save(self, path: PathType) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + '\n')

    @classmethod
    def load(cls, path: PathType, hidden_size: int | None = None) -> BoundaryModel:
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f'boundary model not found: {path}')
        try:
            data = json.loads(path.read_text())
            stored_size = int(data['H'])
            centers = torch.tensor(data['centers'], dtype=torch.float64)
            radii = torch.tensor(data['radii'], dtype=torch.float64)
            labels = [str(label) for label in data['labels']]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f'corrupt boundary model: {path}') from e
        if hidden_size is not None and stored_size != hidden_size:
            raise CheckpointError(f'boundary model {path} has H={stored_size}, encoder produces H={hidden_size}')
        if centers.dim() != 2 or radii.dim() != 1 or centers.size(1) != stored_size or len(labels) != len(radii):
            raise CheckpointError(f'boundary model {path} has centers {tuple(centers.shape)} and radii {tuple(radii.shape)}')
        return cls(centers, radii, labels)


def _adb_terms(
    radii: torch.Tensor,
    centers: torch.Tensor,
    embeddings: torch.Tensor,
    labels: torch.Tensor,
) -> LossOutput:
    distances = center_distances(embeddings, centers, labels)
    radius = radii[labels]
    # outside only when strictly beyond the radius
    outside = distances > radius
    value = torch.where(outside, distances - radius, radius - distances).mean()
    per_instance = (1.0 - 2.0 * outside.to(radii.dtype)) / len(labels)
    gradient = torch.zeros_like(radii).index_add_(0, labels, per_instance)
    return LossOutput(value=value, gradient=gradient)


def _expand_shrink_terms(
    radii: torch.Tensor,
    centers: torch.Tensor,
    negatives: torch.Tensor,
    labels: torch.Tensor,
    config: Stage2Config,
) -> LossOutput:
    distances = center_distances(negatives, centers, labels)
    radius = radii[labels]
    expand = distances > radius + config.expansion
    shrink = distances < radius + config.shrink
    zero = torch.zeros_like(distances)
    per_instance = config.eta * (
        torch.where(expand, distances - (radius + config.expansion), zero)
        + torch.where(shrink, (radius + config.shrink) - distances, zero)
    )
    slope = (shrink.to(radii.dtype) - expand.to(radii.dtype)) * config.eta / len(labels)
    gradient = torch.zeros_like(radii).index_add_(0, labels, slope)
    return LossOutput(value=per_instance.mean(), gradient=gradient)


def _check_boundary_inputs(model: BoundaryModel, embeddings: torch.Tensor, labels: torch.Tensor) -> None:
    if not len(labels):
        raise SamplingError('boundary loss needs at least one instance')
    if embeddings.size(1) != model.hidden_size:
        raise ConfigError(f'embeddings have dimension {embeddings.size(1)}, boundary expects {model.hidden_size}')
    if labels.min() < 0 or labels.max() >= model.num_known:
        raise ConfigError(f'labels must be known-class ids in [0, {model.num_known})')


def adb_loss(model: BoundaryModel, embeddings: torch.Tensor, labels: torch.Tensor) -> LossOutput:
    _check_boundary_inputs(model, embeddings, labels)
    with torch.no_grad():
        return _adb_terms(model.radii, model.centers, embeddings.to(model.centers.dtype), labels)


def adbes_loss(
    model: BoundaryModel,
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    negatives: torch.Tensor,
    config: Stage2Config,
    negative_labels: torch.Tensor | None = None,
) -> LossOutput:
    _check_boundary_inputs(model, embeddings, labels)
    if negatives.shape != embeddings.shape:
        raise ConfigError(f'need one negative per instance, got {tuple(negatives.shape)} for {tuple(embeddings.shape)}')
    if negative_labels is not None and (negative_labels == labels).any():
        row = int((negative_labels == labels).nonzero()[0])
        raise SamplingError(f'negative for instance {row} shares its label', instance=row)
    with torch.no_grad():
        radii, centers = model.radii, model.centers
        adb = _adb_terms(radii, centers, embeddings.to(centers.dtype), labels)
        es = _expand_shrink_terms(radii, centers, negatives.to(centers.dtype), labels, config)
    return LossOutput(value=adb.value + es.value, gradient=adb.gradient + es.gradient)


class BoundaryLossFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, radii, centers, embeddings, labels, negatives, config):
        adb = _adb_terms(radii, centers, embeddings, labels)
        value, gradient = adb.value, adb.gradient
        if negatives is not None:
            es = _expand_shrink_terms(radii, centers, negatives, labels, config)
            value, gradient = value + es.value, gradient + es.gradient
        ctx.save_for_backward(gradient)
        return value

    @staticmethod
    def backward(ctx, grad_output):
        (gradient,) = ctx.saved_tensors
        return grad_output * gradient, None, None, None, None, None


class BoundaryForTrain(torch.nn.Module):
    def __init__(self, boundary: BoundaryModel, config: Stage2Config):
        super().__init__()
        self.boundary = boundary
        self.config = config

    def forward(
        self,
        embeddings: torch.Tensor,
        labels: torch.Tensor,
        negative_embeddings: torch.Tensor | None = None,
    ) -> dict[str, torch.Tensor]:
        loss = BoundaryLossFunction.apply(
            self.boundary.radii, self.boundary.centers, embeddings, labels, negative_embeddings, self.config
        )
        return {'loss': loss}


def sample_negative_indices(
    labels: np.ndarray,
    class_index: dict[int, np.ndarray],
    rng: np.random.Generator,
) -> np.ndarray:
    """One class-balanced negative per instance: a uniform other class, then a uniform member."""
    classes = [k for k, members in class_index.items() if len(members)]
    negatives = np.empty(len(labels), dtype=np.int64)
    for row, label in enumerate(labels):
        candidates = [k for k in classes if k != label]
        if not candidates:
            raise SamplingError(f'no negative class available for class {int(label)}')
        members = class_index[candidates[int(rng.integers(len(candidates)))]]
        negatives[row] = members[int(rng.integers(len(members)))]
    return negatives


class BoundaryBatches:
    def __init__(self, embeddings: torch.Tensor, labels: torch.Tensor, config: Stage2Config, rng: np.random.Generator):
        self.embeddings = embeddings
        self.labels = labels
        self.config = config
        self.rng = rng
        numpy_labels = labels.numpy()
        self.class_index = {int(k): np.flatnonzero(numpy_labels == k) for k in np.unique(numpy_labels)}
        self.create_or_refresh_data()

    def create_or_refresh_data(self):
        self.batches: list[dict] = []
        numpy_labels = self.labels.numpy()
        for index in generate_batch_indices(len(self.labels), self.config.batch_size, self.rng):
            batch = {'embeddings': self.embeddings[index], 'labels': self.labels[index]}
            if self.config.mode == BoundaryMode.adbes:
                negatives = sample_negative_indices(numpy_labels[index], self.class_index, self.rng)
                batch['negative_embeddings'] = self.embeddings[negatives]
            self.batches.append(batch)

    def __getitem__(self, index: int) -> dict:
        return self.batches[index]

    def __len__(self) -> int:
        return len(self.batches)


@dataclass
class BoundaryResult:
    boundary: BoundaryModel
    radius_trace: pd.DataFrame
    best_epoch: int | None = None


def init_radii(embeddings: torch.Tensor, labels: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    distances = center_distances(embeddings, centers, labels)
    sums = torch.zeros(centers.size(0), dtype=distances.dtype).index_add_(0, labels, distances)
    return sums / torch.bincount(labels, minlength=centers.size(0)).to(distances.dtype)


def train_boundary(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    config: Stage2Config,
    num_known: int | None = None,
    label_names: Sequence[str] | None = None,
    valid_embeddings: torch.Tensor | None = None,
    valid_labels: torch.Tensor | None = None,
    accelerator: Accelerator | None = None,
    show_progress: bool = True,
) -> BoundaryResult:
    set_seed(config.seed)
    accelerator = accelerator or create_accelerator()
    embeddings = embeddings.detach().to(torch.float64)
    num_known = num_known if num_known is not None else int(labels.max()) + 1

    centers = compute_centers(embeddings, labels, num_known)
    boundary = BoundaryModel(centers, init_radii(embeddings, labels, centers), label_names, config.radius_parametrization)
    model = BoundaryForTrain(boundary, config)
    batches = BoundaryBatches(embeddings, labels, config, make_rng(config.seed, 'stage2'))
    optimizer = create_adamw_optimizer(model, lr=config.learning_rate)

    trace: list[dict] = []

    def record_radii(epoch: int):
        for class_id, radius in enumerate(boundary.radii.detach().tolist()):
            trace.append({'epoch': epoch, 'class_id': class_id, 'label': boundary.labels[class_id], 'radius': radius})

    record_radii(0)
    early_stopping = EarlyStopping(boundary, config.patience, valid_embeddings, valid_labels)

    trainer = Trainer(
        model=model,
        train_batches=batches,
        optimizer=optimizer,
        accelerator=accelerator,
        epochs=config.epochs,
        log_interval=10,
        step_end_callbacks=[lambda trainer: boundary.constrain_()],
        epoch_end_callbacks=[
            lambda trainer: record_radii(trainer.current_epoch),
            early_stopping,
            lambda trainer: batches.create_or_refresh_data(),
        ],
        show_progress=show_progress,
        name='stage2',
    )
    trainer.train()
    early_stopping.restore()
    return BoundaryResult(
        boundary=boundary,
        radius_trace=pd.DataFrame(trace, columns=['epoch', 'class_id', 'label', 'radius']),
        best_epoch=early_stopping.best_epoch,
    )


class EarlyStopping:
    """Tracks known-class macro F1 on the validation split and keeps the best radii."""

    def __init__(
        self,
        boundary: BoundaryModel,
        patience: int | None,
        valid_embeddings: torch.Tensor | None,
        valid_labels: torch.Tensor | None,
    ):
        self.boundary = boundary
        self.enabled = patience is not None and valid_embeddings is not None and valid_labels is not None
        self.patience = patience or 0
        self.valid_embeddings = valid_embeddings
        self.valid_labels = valid_labels.numpy() if valid_labels is not None else None
        self.best_score = -1.0
        self.best_epoch: int | None = None
        self.best_state: torch.Tensor | None = None
        self.wait = 0

    def __call__(self, trainer: Trainer) -> None:
        if not self.enabled:
            return
        predictions = self.boundary.predict(self.valid_embeddings).numpy()
        score = f1_score(
            self.valid_labels,
            predictions,
            labels=list(range(self.boundary.num_known)),
            average='macro',
            zero_division=0,
        )
        trainer.accelerator.log({'stage2/valid_known_f1': score}, step=trainer.current_epoch)
        if score > self.best_score:
            self.best_score = float(score)
            self.best_epoch = trainer.current_epoch
            self.best_state = self.boundary.raw_radii.detach().clone()
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                trainer.should_stop = True

    def restore(self) -> None:
        if self.best_state is not None:
            with torch.no_grad():
                self.boundary.raw_radii.copy_(self.best_state)
