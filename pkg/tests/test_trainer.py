import math

import pytest
import torch
from accelerate import Accelerator

from openintent.config import Stage1Config
from openintent.data import PAD_ID, UNK_ID, LabeledDataset
from openintent.data_structures import LabeledInstance
from openintent.errors import DivergenceError
from openintent.stage1 import Stage1Batches, train_stage1
from openintent.trainer import MetricTracker, Trainer
from openintent.utils import make_rng


class ScaledSumModel(torch.nn.Module):
    def __init__(self, scale: float):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.ones(2))
        self.scale = scale

    def forward(self):
        return {'loss': self.weight.sum() * self.scale}


def build_trainer(model: torch.nn.Module, **kwargs) -> Trainer:
    return Trainer(
        model=model,
        train_batches=[{}, {}],
        optimizer=torch.optim.SGD(model.parameters(), lr=0.1),
        accelerator=Accelerator(cpu=True),
        show_progress=False,
        **kwargs,
    )


def test_trainer_raises_on_divergence():
    trainer = build_trainer(ScaledSumModel(math.nan), epochs=2)

    with pytest.raises(DivergenceError) as excinfo:
        trainer.train()

    assert excinfo.value.step == 0
    assert excinfo.value.code == 'divergence'


def test_trainer_stops_early():
    def stop(trainer: Trainer):
        trainer.should_stop = True

    trainer = build_trainer(ScaledSumModel(1.0), epochs=5, epoch_end_callbacks=[stop])
    trainer.train()

    assert trainer.current_epoch == 1
    assert trainer.current_step == 2
    assert len(trainer.tracker.history) == 1


def test_metric_tracker():
    tracker = MetricTracker(ndigits=3)
    tracker.update({'loss': torch.tensor(1.0), 'ce_loss': torch.tensor(0.5)})
    tracker.update({'loss': torch.tensor(2.0), 'ce_loss': torch.tensor(1.0)})

    assert tracker.means() == {'loss': 1.5, 'ce_loss': 0.75}
    assert tracker.on_epoch_end() == {'loss': 1.5, 'ce_loss': 0.75}
    assert tracker.history == [{'loss': 1.5, 'ce_loss': 0.75}]
    assert tracker.means() == {}


@pytest.fixture
def token_dataset():
    # each class owns five tokens; instances draw three of them
    rng = make_rng(0, 'token-dataset')
    instances = []
    for index in range(18):
        label = index % 3
        token_ids = (2 + 5 * label + rng.choice(5, size=3)).tolist()
        instances.append(LabeledInstance(token_ids=token_ids, label_id=label, source_index=index))
    return LabeledDataset(instances, num_classes=3)


def stage1_config(**kwargs) -> Stage1Config:
    values = {'token_dim': 8, 'hidden_size': 16, 'batch_size': 6, 'epochs': 12, 'num_positives': 2, 'temperature': 0.5}
    values.update(kwargs)
    return Stage1Config(**values)


def test_train_stage1(token_dataset):
    result = train_stage1(token_dataset, stage1_config(), vocab_size=20, show_progress=False)

    trace = result.trace
    assert list(trace.columns) == ['epoch', 'loss', 'contrastive_loss', 'ce_loss', 'intra_class_cos', 'inter_class_cos']
    assert trace['epoch'].tolist() == list(range(1, 13))
    assert trace['loss'].iloc[-1] < trace['loss'].iloc[0]
    mixed = 0.25 * trace['contrastive_loss'] + 0.75 * trace['ce_loss']
    assert (mixed - trace['loss']).abs().max() < 1e-5
    assert trace['intra_class_cos'].iloc[-1] > trace['inter_class_cos'].iloc[-1]
    assert result.head.weight.shape == (3, 16)


def test_train_stage1_is_deterministic(token_dataset):
    config = stage1_config(epochs=2, contrastive='kcl')

    first = train_stage1(token_dataset, config, vocab_size=20, show_progress=False)
    second = train_stage1(token_dataset, config, vocab_size=20, show_progress=False)

    for a, b in zip(first.encoder.state_dict().values(), second.encoder.state_dict().values()):
        assert torch.equal(a, b)
    assert first.trace.equals(second.trace)


def test_stage1_batches_token_dropout(token_dataset):
    clean = Stage1Batches(token_dataset, stage1_config(token_dropout=0.0), make_rng(0, 'stage1'))
    dropped = Stage1Batches(token_dataset, stage1_config(token_dropout=0.5), make_rng(0, 'stage1'))

    assert not any((batch['token_ids'] == UNK_ID).any() for batch in clean)
    # both draw the same first batch before the dropout mask consumes the stream
    before, after = clean[0], dropped[0]
    assert torch.equal(before['labels'], after['labels'])
    changed = before['token_ids'] != after['token_ids']
    assert changed.any()
    assert (after['token_ids'][changed] == UNK_ID).all()
    assert (before['token_ids'][changed] != PAD_ID).all()
