import numpy as np
import pytest

from openintent.data import (
    PAD_ID,
    UNK_ID,
    apply_split,
    build_vocabulary,
    collate,
    label_space,
    load_corpus,
    load_dataset_dir,
    load_designated_known,
    make_split_plan,
    tokenize,
)
from openintent.data_structures import LabeledInstance, RawCorpus, RawRecord, SplitPlan
from openintent.errors import CorpusError
from openintent.types import Split


def make_corpus(pairs, split=Split.train):
    return RawCorpus([RawRecord(text, label) for text, label in pairs], split)


def test_load_corpus(tmp_path):
    path = tmp_path / 'train.tsv'
    path.write_text('book a flight\tflight\ncheck balance\tbalance\n')

    corpus = load_corpus(path)

    assert len(corpus) == 2
    assert corpus.records[0] == RawRecord('book a flight', 'flight')
    assert corpus.labels == ['balance', 'flight']


def test_load_corpus_errors(tmp_path):
    empty = tmp_path / 'empty.tsv'
    empty.write_text('')
    with pytest.raises(CorpusError, match='empty corpus'):
        load_corpus(empty)

    malformed = tmp_path / 'malformed.tsv'
    malformed.write_text('no tab on this line\n')
    with pytest.raises(CorpusError, match='malformed line 1'):
        load_corpus(malformed)

    with pytest.raises(CorpusError, match='not found'):
        load_corpus(tmp_path / 'missing.tsv')


def test_load_dataset_dir(tiny_dataset_dir):
    corpora = load_dataset_dir(tiny_dataset_dir)

    assert set(corpora) == set(Split)
    assert label_space(corpora.values()) == ['balance', 'flight', 'music', 'weather']
    assert len(corpora[Split.train]) == 16


def test_tokenize():
    assert tokenize('Book a FLIGHT, to Paris!') == ['book', 'a', 'flight', 'to', 'paris']


def test_build_vocabulary():
    corpus = make_corpus([('a b', 'x'), ('a', 'y')])

    vocab = build_vocabulary(corpus)
    assert vocab.token_to_id == {'[PAD]': 0, '[UNK]': 1, 'a': 2, 'b': 3}
    assert build_vocabulary(corpus).token_to_id == vocab.token_to_id

    frequent = build_vocabulary(corpus, min_freq=2)
    assert frequent.token_to_id == {'[PAD]': 0, '[UNK]': 1, 'a': 2}
    assert frequent.encode('a b') == [2, UNK_ID]


def test_vocabulary_encode_truncates(tmp_path):
    vocab = build_vocabulary(make_corpus([('one two three four five', 'x')]))

    token_ids = vocab.encode('one two three four five six', max_len=3)

    assert len(token_ids) == 3
    assert all(i < vocab.size for i in token_ids)
    assert vocab.encode('!!!') == [UNK_ID]

    vocab.save(tmp_path / 'vocab.json')
    assert vocab.load(tmp_path / 'vocab.json') == vocab


@pytest.mark.parametrize(
    'num_classes, proportion, num_known',
    [(20, 0.25, 5), (4, 1.0, 4), (12, 0.75, 9), (150, 0.5, 75), (10, 0.25, 3), (2, 0.25, 1)],
)
def test_make_split_plan(num_classes: int, proportion: float, num_known: int):
    plan = make_split_plan(num_classes, proportion, seed=7)

    assert plan.num_known == num_known
    assert all(0 <= i < num_classes for i in plan.known_class_ids)
    assert make_split_plan(num_classes, proportion, seed=7) == plan


def test_make_split_plan_errors():
    with pytest.raises(CorpusError, match='no known class'):
        make_split_plan(2, 0.1, seed=0)
    with pytest.raises(CorpusError):
        make_split_plan(1, 1.0, seed=0)
    with pytest.raises(CorpusError):
        make_split_plan(4, 0.0, seed=0)


def test_make_split_plan_designated_known():
    labels = ['A', 'B', 'C', 'D']

    plan = make_split_plan(4, 0.5, seed=7, labels=labels, designated_known=['D', 'B'])
    assert plan.known_labels == ['B', 'D']

    # a designation of the wrong size gives way to the seeded draw
    drawn = make_split_plan(4, 0.75, seed=7, labels=labels, designated_known=['D', 'B'])
    assert drawn == make_split_plan(4, 0.75, seed=7, labels=labels)

    with pytest.raises(CorpusError, match='absent from the corpus'):
        make_split_plan(4, 0.5, seed=7, labels=labels, designated_known=['A', 'Z'])


def test_load_designated_known(tmp_path):
    assert load_designated_known(tmp_path) is None

    (tmp_path / 'meta.json').write_text('{"known_labels": ["A", "C"], "open_labels": ["B"]}')
    assert load_designated_known(tmp_path) == ['A', 'C']

    (tmp_path / 'meta.json').write_text('{"open_labels": ["B"]}')
    with pytest.raises(CorpusError, match='unreadable dataset metadata'):
        load_designated_known(tmp_path)


def _plan(labels, known):
    return SplitPlan(
        known_class_ids=frozenset(labels.index(label) for label in known),
        proportion=len(known) / len(labels),
        seed=0,
        labels=tuple(labels),
    )


def test_apply_split():
    labels = ['A', 'B', 'C']
    plan = _plan(labels, ['A', 'B'])
    train = make_corpus([('a one', 'A'), ('b one', 'B'), ('c one', 'C'), ('a two', 'A')])
    vocab = build_vocabulary(train)

    instances, label_map = apply_split(train, plan, vocab)
    assert label_map == {'A': 0, 'B': 1}
    assert [instance.label_id for instance in instances] == [0, 1, 0]
    assert [instance.source_index for instance in instances] == [0, 1, 3]
    assert apply_split(train, plan, vocab)[0] == instances

    test = make_corpus([('c two', 'C'), ('b two', 'B')], Split.test)
    test_instances, _ = apply_split(test, plan, vocab)
    assert [instance.label_id for instance in test_instances] == [2, 1]


def test_apply_split_known_class_without_training_data():
    labels = ['A', 'B', 'C']
    train = make_corpus([('a one', 'A'), ('c one', 'C')])

    with pytest.raises(CorpusError, match='without training instances'):
        apply_split(train, _plan(labels, ['A', 'B']), build_vocabulary(train))


def test_apply_split_tiny_dataset(tiny_dataset_dir):
    corpora = load_dataset_dir(tiny_dataset_dir)
    labels = label_space(corpora.values())
    plan = make_split_plan(len(labels), 0.75, seed=1, labels=labels)
    vocab = build_vocabulary(corpora[Split.train])

    known = {split: apply_split(corpus, plan, vocab)[0] for split, corpus in corpora.items()}

    for split in (Split.train, Split.valid):
        assert {instance.label_id for instance in known[split]} <= set(range(plan.num_known))
    assert {instance.label_id for instance in known[Split.test]} == set(range(plan.num_known + 1))
    assert len(known[Split.test]) == len(corpora[Split.test])


def test_split_plan_save_load(tmp_path):
    labels = ['balance', 'flight', 'music', 'weather']
    plan = make_split_plan(len(labels), 0.5, seed=3, labels=labels)

    plan.save(tmp_path / 'split_plan.json')

    assert SplitPlan.load(tmp_path / 'split_plan.json', labels) == plan
    with pytest.raises(CorpusError, match='absent from the corpus'):
        SplitPlan.load(tmp_path / 'split_plan.json', ['other', 'labels'])


def test_collate():
    batch = collate([LabeledInstance([5, 6, 7], 0), LabeledInstance([8], 1)])

    assert batch['token_ids'].tolist() == [[5, 6, 7], [8, PAD_ID, PAD_ID]]
    assert batch['labels'].tolist() == [0, 1]


def test_labeled_dataset(toy_dataset):
    assert len(toy_dataset) == 12
    assert np.array_equal(toy_dataset.class_index[1], np.array([4, 5, 6, 7]))
    assert toy_dataset.classes_except(1) == [0, 2]
