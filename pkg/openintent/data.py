from __future__ import annotations

import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from openintent.data_structures import LabeledInstance, RawCorpus, RawRecord, SplitPlan
from openintent.errors import CorpusError
from openintent.types import PathType, Split
from openintent.utils import make_rng, round_half_up

PAD_TOKEN = '[PAD]'
UNK_TOKEN = '[UNK]'
PAD_ID = 0
UNK_ID = 1
DEFAULT_MAX_LEN = 40
META_FILE = 'meta.json'

_PUNCTUATION_RE = re.compile(r'[^\w\s]', flags=re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _PUNCTUATION_RE.sub(' ', text.lower()).split()


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]

    def __post_init__(self):
        if self.token_to_id.get(PAD_TOKEN) != PAD_ID or self.token_to_id.get(UNK_TOKEN) != UNK_ID:
            raise CorpusError('vocabulary must map [PAD] to 0 and [UNK] to 1')
        if sorted(self.token_to_id.values()) != list(range(len(self.token_to_id))):
            raise CorpusError('vocabulary ids must be dense')

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def __len__(self) -> int:
        return self.size

    def encode(self, text: str, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
        token_ids = [self.token_to_id.get(token, UNK_ID) for token in tokenize(text)[:max_len]]
        return token_ids or [UNK_ID]

    def save(self, path: PathType) -> None:
        tokens = sorted(self.token_to_id, key=self.token_to_id.__getitem__)
        Path(path).write_text(json.dumps({'tokens': tokens}, ensure_ascii=False, indent=0) + '\n', encoding='utf-8')

    @classmethod
    def load(cls, path: PathType) -> Vocabulary:
        path = Path(path)
        if not path.exists():
            raise CorpusError(f'vocabulary file not found: {path}')
        try:
            tokens = json.loads(path.read_text(encoding='utf-8'))['tokens']
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorpusError(f'corrupt vocabulary file: {path}') from e
        return cls({token: i for i, token in enumerate(tokens)})


def load_corpus(path: PathType, split: Split | str = Split.train) -> RawCorpus:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f'corpus file not found: {path}', path=str(path))

    records: list[RawRecord] = []
    with path.open(encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip('\n').rstrip('\r')
            if not line.strip():
                continue
            parts = line.split('\t')
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise CorpusError(f'malformed line {line_number} in {path}', path=str(path), line=line_number)
            records.append(RawRecord(text=parts[0].strip(), label=parts[1].strip()))

    if not records:
        raise CorpusError(f'empty corpus: {path}', path=str(path))
    return RawCorpus(records=records, split=Split(split))


def load_dataset_dir(dataset_dir: PathType) -> dict[Split, RawCorpus]:
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise CorpusError(f'dataset directory not found: {dataset_dir}', path=str(dataset_dir))
    return {split: load_corpus(dataset_dir / f'{split.value}.tsv', split) for split in Split}


def label_space(corpora: Iterable[RawCorpus]) -> list[str]:
    return sorted({label for corpus in corpora for label in corpus.labels})


def build_vocabulary(corpus: RawCorpus, min_freq: int = 1) -> Vocabulary:
    if not len(corpus):
        raise CorpusError('cannot build a vocabulary from an empty corpus')
    counter = Counter(token for record in corpus.records for token in tokenize(record.text))
    kept = [(token, count) for token, count in counter.items() if count >= min_freq]
    kept.sort(key=lambda item: (-item[1], item[0]))
    token_to_id = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
    for token, _ in kept:
        token_to_id[token] = len(token_to_id)
    return Vocabulary(token_to_id)


def make_split_plan(
    num_classes: int,
    proportion: float,
    seed: int,
    labels: Sequence[str] | None = None,
    designated_known: Sequence[str] | None = None,
) -> SplitPlan:
    """Choose the known classes: `designated_known` when it has the right size, otherwise a seeded draw."""
    if num_classes < 2:
        raise CorpusError(f'need at least 2 classes to split, got {num_classes}')
    if not 0 < proportion <= 1:
        raise CorpusError(f'known-class proportion must be in (0, 1], got {proportion}')
    if labels is not None and len(labels) != num_classes:
        raise CorpusError(f'{len(labels)} label names given for {num_classes} classes')

    num_known = round_half_up(proportion * num_classes)
    if num_known < 1:
        raise CorpusError(f'proportion {proportion} of {num_classes} classes leaves no known class')

    if designated_known is not None and labels is not None and len(set(designated_known)) == num_known:
        missing = set(designated_known) - set(labels)
        if missing:
            raise CorpusError(f'designated known labels absent from the corpus: {sorted(missing)}')
        known = [list(labels).index(label) for label in designated_known]
    else:
        known = make_rng(seed, 'split').choice(num_classes, size=num_known, replace=False)
    return SplitPlan(
        known_class_ids=frozenset(int(i) for i in known),
        proportion=proportion,
        seed=seed,
        labels=tuple(labels) if labels is not None else (),
    )


def load_designated_known(dataset_dir: PathType) -> list[str] | None:
    """Known labels listed in the dataset's meta.json, if the dataset ships one."""
    path = Path(dataset_dir) / META_FILE
    if not path.exists():
        return None
    try:
        return [str(label) for label in json.loads(path.read_text(encoding='utf-8'))['known_labels']]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CorpusError(f'unreadable dataset metadata: {path}', path=str(path)) from e


def known_label_map(plan: SplitPlan) -> dict[str, int]:
    return {label: i for i, label in enumerate(plan.known_labels)}


def apply_split(
    corpus: RawCorpus,
    plan: SplitPlan,
    vocab: Vocabulary,
    max_len: int = DEFAULT_MAX_LEN,
) -> tuple[list[LabeledInstance], dict[str, int]]:
    label_map = known_label_map(plan)
    open_id = len(label_map)
    label_names = set(plan.labels)

    unknown_labels = set(corpus.labels) - label_names
    if unknown_labels:
        raise CorpusError(f'{corpus.split.value} corpus has labels outside the label space: {sorted(unknown_labels)}')

    instances: list[LabeledInstance] = []
    for index, record in enumerate(corpus.records):
        label_id = label_map.get(record.label)
        if label_id is None:
            if corpus.split != Split.test:
                continue
            label_id = open_id
        instances.append(
            LabeledInstance(token_ids=vocab.encode(record.text, max_len), label_id=label_id, source_index=index)
        )

    if corpus.split == Split.train:
        present = {instance.label_id for instance in instances}
        empty = [label for label, i in label_map.items() if i not in present]
        if empty:
            raise CorpusError(f'known classes without training instances: {empty}')
    return instances, label_map


def collate(instances: Sequence[LabeledInstance], pad_id: int = PAD_ID) -> dict[str, torch.Tensor]:
    max_length = max(len(instance.token_ids) for instance in instances)
    token_ids = torch.full((len(instances), max_length), pad_id, dtype=torch.long)
    for row, instance in enumerate(instances):
        token_ids[row, : len(instance.token_ids)] = torch.tensor(instance.token_ids, dtype=torch.long)
    labels = torch.tensor([instance.label_id for instance in instances], dtype=torch.long)
    return {'token_ids': token_ids, 'labels': labels}


class LabeledDataset:
    """Known-class training instances indexed by class, shared by both training stages."""

    def __init__(self, instances: Sequence[LabeledInstance], num_classes: int):
        self.instances = list(instances)
        self.num_classes = num_classes
        self.labels = np.array([instance.label_id for instance in self.instances], dtype=np.int64)
        self.class_index: dict[int, np.ndarray] = {}
        members: dict[int, list[int]] = defaultdict(list)
        for index, label in enumerate(self.labels):
            members[int(label)].append(index)
        for label in range(num_classes):
            self.class_index[label] = np.array(members.get(label, []), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.instances)

    def __getitem__(self, index: int) -> LabeledInstance:
        return self.instances[index]

    def classes_except(self, label: int) -> list[int]:
        return [k for k in range(self.num_classes) if k != label and len(self.class_index[k])]
