import math
import zlib

import numpy as np
import torch
from transformers import get_scheduler

from openintent.types import LRSchedulerType

# PCG64 streams keyed by name; the same (seed, stream) pair gives the same draws on every platform.


def make_rng(seed: int, stream: str) -> np.random.Generator:
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(stream.encode('utf-8')),))
    return np.random.Generator(np.random.PCG64(sequence))


def make_torch_generator(rng: np.random.Generator) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return generator


def create_adamw_optimizer(model: torch.nn.Module, lr: float, weight_decay: float = 0.0):
    parameters = list(model.named_parameters())
    no_decay = ['bias', 'radii']
    optimizer_grouped_parameters = [
        {
            'params': [p for n, p in parameters if not any(nd in n for nd in no_decay)],
            'weight_decay': weight_decay,
        },
        {
            'params': [p for n, p in parameters if any(nd in n for nd in no_decay)],
            'weight_decay': 0.0,
        },
    ]
    optimizer_grouped_parameters = [group for group in optimizer_grouped_parameters if group['params']]
    # with weight_decay == 0 AdamW reduces to the plain Adam update (betas 0.9/0.999, eps 1e-8)
    optimizer = torch.optim.AdamW(optimizer_grouped_parameters, lr=lr, betas=(0.9, 0.999), eps=1e-8)
    return optimizer


def create_lr_scheduler(
    optimizer: torch.optim.Optimizer,
    scheduler_type: LRSchedulerType,
    total_steps: int,
    num_warmup_steps: float = 0.0,
):
    if num_warmup_steps < 1:
        num_warmup_steps = int(num_warmup_steps * total_steps)
    name = 'constant_with_warmup' if scheduler_type == LRSchedulerType.constant else scheduler_type.value
    return get_scheduler(
        name,
        optimizer=optimizer,
        num_warmup_steps=int(num_warmup_steps),
        num_training_steps=total_steps,
    )


def generate_batch_indices(num_items: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    order = rng.permutation(num_items) if rng is not None else np.arange(num_items)
    return [order[start : start + batch_size] for start in range(0, num_items, batch_size)]


def round_half_up(value: float) -> int:
    # 2.5 -> 3, where round() gives 2
    return math.floor(value + 0.5)
