from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from openintent.errors import CorpusError
from openintent.types import PathType, Split


@dataclass(slots=True)
class RawRecord:
    text: str
    label: str


@dataclass(slots=True)
class RawCorpus:
    records: list[RawRecord]
    split: Split = Split.train

    def __post_init__(self):
        for line_number, record in enumerate(self.records, start=1):
            if not record.text.strip():
                raise CorpusError(f'empty text at record {line_number}', line=line_number)
            if not record.label.strip():
                raise CorpusError(f'empty label at record {line_number}', line=line_number)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> list[str]:
        return sorted({record.label for record in self.records})


@dataclass(slots=True)
class LabeledInstance:
    token_ids: list[int]
    label_id: int
    # line position in the source corpus, used to align precomputed embeddings
    source_index: int = -1


@dataclass(frozen=True)
class SplitPlan:
    known_class_ids: frozenset[int]
    proportion: float
    seed: int
    labels: tuple[str, ...] = field(default=())

    @property
    def num_known(self) -> int:
        return len(self.known_class_ids)

    @property
    def known_labels(self) -> list[str]:
        if not self.labels:
            raise CorpusError('split plan has no label names attached')
        return [self.labels[i] for i in sorted(self.known_class_ids)]

    def to_dict(self) -> dict:
        return {'proportion': self.proportion, 'seed': self.seed, 'known_labels': self.known_labels}

    def save(self, path: PathType) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n')

    @classmethod
    def load(cls, path: PathType, labels: list[str]) -> SplitPlan:
        path = Path(path)
        if not path.exists():
            raise CorpusError(f'split plan not found: {path}')
        try:
            data = json.loads(path.read_text())
            stored = [str(label) for label in data['known_labels']]
            proportion, seed = float(data['proportion']), int(data['seed'])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CorpusError(f'corrupt split plan: {path}') from e
        missing = set(stored) - set(labels)
        if missing:
            raise CorpusError(f'split plan names labels absent from the corpus: {sorted(missing)}')
        label_to_id = {label: i for i, label in enumerate(labels)}
        return cls(
            known_class_ids=frozenset(label_to_id[label] for label in stored),
            proportion=proportion,
            seed=seed,
            labels=tuple(labels),
        )


@dataclass(slots=True)
class ContrastiveSample:
    anchor: int
    positives: list[int]
    negatives: list[int]
