from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
import torch
from accelerate import Accelerator
from accelerate.utils import set_seed

from openintent.config import Stage1Config
from openintent.criteria import Stage1Loss, build_stage1_samples
from openintent.data import PAD_ID, UNK_ID, LabeledDataset, collate
from openintent.data_structures import ContrastiveSample
from openintent.evaluation import sample_per_class, similarity_curves
from openintent.model import ClassifierHead, EncoderModel, encode_dataset
from openintent.trainer import Trainer, create_accelerator
from openintent.utils import create_adamw_optimizer, create_lr_scheduler, generate_batch_indices, make_rng, make_torch_generator

SIMILARITY_SAMPLES_PER_CLASS = 10
TRACE_COLUMNS = ['epoch', 'loss', 'contrastive_loss', 'ce_loss', 'intra_class_cos', 'inter_class_cos']


class EncoderForStage1Train(torch.nn.Module):
    def __init__(self, encoder: EncoderModel, head: ClassifierHead, config: Stage1Config):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.criterion = Stage1Loss(config)

    def forward(
        self, token_ids: torch.Tensor, samples: Sequence[ContrastiveSample], labels: torch.Tensor
    ) -> dict[str, torch.Tensor]:
        embeddings = self.encoder(token_ids)
        return self.criterion(embeddings, self.head, samples, labels)


class Stage1Batches:
    """One epoch of anchor batches, each carrying its sampled positives and negatives."""

    def __init__(self, dataset: LabeledDataset, config: Stage1Config, rng: np.random.Generator):
        self.dataset = dataset
        self.config = config
        self.rng = rng
        self.create_or_refresh_data()

    def create_or_refresh_data(self):
        self.batches: list[dict] = []
        for anchors in generate_batch_indices(len(self.dataset), self.config.batch_size, self.rng):
            rows, samples = build_stage1_samples(
                self.dataset, anchors, self.config.num_positives, self.config.num_negatives, self.rng
            )
            token_ids = collate([self.dataset[i] for i in rows])['token_ids']
            if self.config.token_dropout > 0:
                # dropped tokens become [UNK]
                drop = torch.from_numpy(self.rng.random(tuple(token_ids.shape)) < self.config.token_dropout)
                token_ids[drop & (token_ids != PAD_ID)] = UNK_ID
            self.batches.append(
                {
                    'token_ids': token_ids,
                    'samples': samples,
                    'labels': torch.from_numpy(self.dataset.labels[anchors]),
                }
            )

    def __getitem__(self, index: int) -> dict:
        return self.batches[index]

    def __len__(self) -> int:
        return len(self.batches)


@dataclass
class Stage1Result:
    encoder: EncoderModel
    head: ClassifierHead
    trace: pd.DataFrame


def train_stage1(
    dataset: LabeledDataset,
    config: Stage1Config,
    vocab_size: int,
    accelerator: Accelerator | None = None,
    show_progress: bool = True,
) -> Stage1Result:
    set_seed(config.seed)
    accelerator = accelerator or create_accelerator()
    init_generator = make_torch_generator(make_rng(config.seed, 'init'))
    encoder = EncoderModel(vocab_size, config.token_dim, config.hidden_size, seed=config.seed, generator=init_generator)
    head = ClassifierHead(config.hidden_size, dataset.num_classes, generator=init_generator)
    model = EncoderForStage1Train(encoder, head, config)

    batches = Stage1Batches(dataset, config, make_rng(config.seed, 'stage1'))
    optimizer = create_adamw_optimizer(model, lr=config.learning_rate, weight_decay=config.weight_decay)
    lr_scheduler = create_lr_scheduler(optimizer, config.lr_scheduler, len(batches) * config.epochs, config.num_warmup_steps)

    similarity_rng = make_rng(config.seed, 'similarity')
    trace: list[dict[str, float]] = []

    def record_trace(trainer: Trainer):
        index = sample_per_class(dataset.labels, SIMILARITY_SAMPLES_PER_CLASS, similarity_rng)
        embeddings = encode_dataset(encoder, [dataset[i] for i in index], progress_bar=False)
        intra, inter = similarity_curves(embeddings, torch.from_numpy(dataset.labels[index]), per_class=None)
        losses = trainer.tracker.history[-1]
        trace.append({'epoch': trainer.current_epoch, **losses, 'intra_class_cos': intra, 'inter_class_cos': inter})
        trainer.accelerator.log({'stage1/intra_class_cos': intra, 'stage1/inter_class_cos': inter}, step=trainer.current_epoch)

    def refresh_data(trainer: Trainer):
        batches.create_or_refresh_data()

    trainer = Trainer(
        model=model,
        train_batches=batches,
        optimizer=optimizer,
        accelerator=accelerator,
        epochs=config.epochs,
        lr_scheduler=lr_scheduler,
        log_interval=10,
        epoch_end_callbacks=[record_trace, refresh_data],
        show_progress=show_progress,
        name='stage1',
    )
    trainer.train()
    model.eval()
    return Stage1Result(
        encoder=encoder,
        head=head,
        trace=pd.DataFrame(trace, columns=TRACE_COLUMNS),
    )
