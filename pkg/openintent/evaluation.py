from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import accuracy_score, confusion_matrix, precision_recall_fscore_support

from openintent.boundary import BoundaryModel
from openintent.config import DEFAULT_SWEEP_RATIOS
from openintent.errors import ConfigError, SamplingError
from openintent.model import ClassifierHead
from openintent.types import PathType
from openintent.utils import make_rng

OPEN_LABEL = 'open'
DISTANCE_HEADER = '# distances are unclipped; clip for display only'


@dataclass
class Prediction:
    label_id: int
    distances: torch.Tensor

    def is_open(self, num_known: int) -> bool:
        return self.label_id == num_known


def _check_ratio(ratio: float) -> None:
    if ratio <= 0:
        raise ConfigError(f'boundary ratio must be > 0, got {ratio}')


def predict(boundary: BoundaryModel, embedding: torch.Tensor, ratio: float = 1.0) -> Prediction:
    _check_ratio(ratio)
    label = boundary.predict(embedding.reshape(1, -1), ratio)
    return Prediction(label_id=int(label[0]), distances=boundary.distances(embedding.reshape(1, -1))[0])


def msp_predict(head: ClassifierHead, embeddings: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Maximum softmax probability baseline: open when the most confident class is below threshold."""
    with torch.no_grad():
        probabilities = torch.softmax(head(embeddings.to(head.weight.dtype)), dim=-1)
        confidence, predicted = probabilities.max(dim=-1)
        undefined = embeddings.abs().sum(dim=-1) == 0
    return torch.where((confidence < threshold) | undefined, torch.full_like(predicted, head.out_features), predicted)


@dataclass
class EvalReport:
    accuracy: float
    macro_f1_all: float
    macro_f1_known: float
    f1_unknown: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    confusion: list[list[int]]
    labels: list[str]

    @property
    def num_known(self) -> int:
        return len(self.labels) - 1

    def to_dict(self, ndigits: int = 8) -> dict:
        return _round(asdict(self), ndigits)

    def save(self, path: PathType) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n')


def _round(value, ndigits: int):
    if isinstance(value, float):
        return round(value, ndigits)
    if isinstance(value, dict):
        return {k: _round(v, ndigits) for k, v in value.items()}
    if isinstance(value, list):
        return [_round(v, ndigits) for v in value]
    return value


def compute_report(
    true_labels: Sequence[int] | np.ndarray,
    predicted_labels: Sequence[int] | np.ndarray,
    num_known: int,
    label_names: Sequence[str] | None = None,
) -> EvalReport:
    y_true = np.asarray(true_labels, dtype=np.int64)
    y_pred = np.asarray(predicted_labels, dtype=np.int64)
    if not len(y_true):
        raise SamplingError('cannot evaluate an empty test set')
    class_ids = list(range(num_known + 1))
    precision, recall, f1, support = precision_recall_fscore_support(
        y_true, y_pred, labels=class_ids, average=None, zero_division=0
    )
    names = list(label_names) if label_names is not None else [str(i) for i in range(num_known)]
    return EvalReport(
        accuracy=float(accuracy_score(y_true, y_pred)),
        macro_f1_all=float(np.mean(f1)),
        macro_f1_known=float(np.mean(f1[:num_known])),
        f1_unknown=float(f1[num_known]),
        precision=[float(v) for v in precision],
        recall=[float(v) for v in recall],
        f1=[float(v) for v in f1],
        support=[int(v) for v in support],
        confusion=confusion_matrix(y_true, y_pred, labels=class_ids).tolist(),
        labels=[*names, OPEN_LABEL],
    )


def evaluate(boundary: BoundaryModel, embeddings: torch.Tensor, true_labels: torch.Tensor, ratio: float = 1.0) -> EvalReport:
    _check_ratio(ratio)
    if not len(true_labels):
        raise SamplingError('cannot evaluate an empty test set')
    predictions = boundary.predict(embeddings, ratio)
    return compute_report(true_labels.numpy(), predictions.numpy(), boundary.num_known, boundary.labels)


def boundary_sweep(
    boundary: BoundaryModel,
    embeddings: torch.Tensor,
    true_labels: torch.Tensor,
    ratios: Sequence[float] = DEFAULT_SWEEP_RATIOS,
) -> pd.DataFrame:
    rows = []
    for ratio in ratios:
        report = evaluate(boundary, embeddings, true_labels, ratio)
        rows.append(
            {
                'ratio': ratio,
                'accuracy': report.accuracy,
                'macro_f1_all': report.macro_f1_all,
                'macro_f1_known': report.macro_f1_known,
                'f1_unknown': report.f1_unknown,
            }
        )
    return pd.DataFrame(rows, columns=['ratio', 'accuracy', 'macro_f1_all', 'macro_f1_known', 'f1_unknown'])


def best_ratio(sweep: pd.DataFrame) -> float:
    # first maximum wins ties, so the smallest ratio reaching the best F1 is reported
    return float(sweep.loc[sweep['macro_f1_all'].idxmax(), 'ratio'])


def export_distances(
    boundary: BoundaryModel,
    embeddings: torch.Tensor,
    true_labels: torch.Tensor,
    path: PathType | None = None,
) -> pd.DataFrame:
    distances = boundary.distances(embeddings)
    nearest_distance, nearest = distances.min(dim=-1)
    radii = boundary.radii.detach()[nearest]
    table = pd.DataFrame(
        {
            'instance_id': np.arange(len(true_labels)),
            'true_label': true_labels.numpy(),
            'assigned_center': nearest.numpy(),
            'distance': nearest_distance.detach().numpy(),
            'radius': radii.numpy(),
            'is_open_truth': (true_labels == boundary.num_known).numpy(),
        }
    )
    if path is not None:
        with Path(path).open('w') as f:
            f.write(DISTANCE_HEADER + '\n')
            table.to_csv(f, index=False)
    return table


def sample_per_class(labels: np.ndarray, per_class: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [np.zeros(0, dtype=np.int64)]
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        if len(members) > per_class:
            members = np.sort(rng.choice(members, size=per_class, replace=False))
        chosen.append(members)
    return np.concatenate(chosen)


def similarity_curves(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    per_class: int | None = 10,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Mean pairwise cosine similarity within classes and across classes."""
    if per_class is not None:
        index = torch.from_numpy(sample_per_class(labels.numpy(), per_class, rng or make_rng(0, 'similarity')))
        embeddings, labels = embeddings[index], labels[index]

    normalized = torch.nn.functional.normalize(embeddings.to(torch.float64), dim=-1)
    cosine = normalized @ normalized.T
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    off_diagonal = ~torch.eye(len(labels), dtype=torch.bool)
    intra = cosine[same & off_diagonal]
    inter = cosine[~same]
    intra_mean = float(intra.mean()) if len(intra) else float('nan')
    inter_mean = float(inter.mean()) if len(inter) else float('nan')
    return intra_mean, inter_mean
