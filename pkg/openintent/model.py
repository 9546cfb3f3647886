from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import Generator, Iterable, Literal, Sequence, TypeVar

import numpy as np
import torch
import tqdm

from openintent.data import PAD_ID, collate
from openintent.data_structures import LabeledInstance
from openintent.errors import CheckpointError, EmbeddingError
from openintent.types import PathType

T = TypeVar('T')

BACKWARD_NORM_EPS = 1e-12


def creat_mask_from_input_ids(input_ids: torch.Tensor, pad_token_id: int) -> torch.Tensor:
    return input_ids != pad_token_id


def mean_pooling(hidden_state: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    if mask is None:
        return torch.mean(hidden_state, dim=1)
    mask = mask.to(hidden_state.dtype)
    return torch.sum(hidden_state * mask.unsqueeze(-1), dim=1) / torch.sum(mask, dim=-1, keepdim=True)


@dataclass
class EmbeddingBatch:
    embeddings: torch.Tensor
    pre_norm: torch.Tensor


@dataclass
class EncoderGradients:
    token_embeddings: torch.Tensor
    weight: torch.Tensor
    bias: torch.Tensor


@dataclass
class _EncodeCache:
    token_ids: torch.Tensor
    mask: torch.Tensor
    pooled: torch.Tensor
    pre_activation: torch.Tensor
    hidden: torch.Tensor
    embeddings: torch.Tensor


def _encode_forward(
    token_embeddings: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    token_ids: torch.Tensor,
    allow_dead: bool = False,
) -> _EncodeCache:
    for name, tensor in (('token_embeddings', token_embeddings), ('weight', weight), ('bias', bias)):
        if not torch.isfinite(tensor).all():
            raise EmbeddingError(f'encoder parameter {name} has non-finite entries')

    mask = creat_mask_from_input_ids(token_ids, PAD_ID)
    empty = (~mask.any(dim=1)).nonzero().flatten()
    if len(empty):
        raise EmbeddingError(f'instance {int(empty[0])} has no tokens', instance=int(empty[0]))

    pooled = mean_pooling(token_embeddings[token_ids], mask)
    pre_activation = pooled @ weight.T + bias
    hidden = torch.relu(pre_activation)
    norms = hidden.norm(dim=-1)
    dead = (norms == 0).nonzero().flatten()
    if len(dead) and not allow_dead:
        raise EmbeddingError(
            f'instance {int(dead[0])} has a zero pre-norm vector; its embedding is undefined',
            instance=int(dead[0]),
        )
    # rows of an all-zero hidden vector stay zero when allowed
    embeddings = hidden / torch.where(norms > 0, norms, torch.ones_like(norms)).unsqueeze(-1)
    return _EncodeCache(token_ids, mask, pooled, pre_activation, hidden, embeddings)


def _encode_backward(
    cache: _EncodeCache,
    upstream: torch.Tensor,
    weight: torch.Tensor,
    vocab_size: int,
) -> EncoderGradients:
    if upstream.shape != cache.embeddings.shape:
        raise EmbeddingError(f'upstream gradient shape {tuple(upstream.shape)} != embeddings {tuple(cache.embeddings.shape)}')

    z = cache.embeddings
    norms = torch.sqrt((cache.hidden**2).sum(dim=-1, keepdim=True) + BACKWARD_NORM_EPS)
    # d(h / ||h||) / dh = (I - z z^T) / ||h||
    grad_hidden = (upstream - z * (z * upstream).sum(dim=-1, keepdim=True)) / norms
    grad_pre_activation = grad_hidden * (cache.pre_activation > 0).to(grad_hidden.dtype)

    grad_weight = grad_pre_activation.T @ cache.pooled
    grad_bias = grad_pre_activation.sum(dim=0)
    grad_pooled = grad_pre_activation @ weight

    counts = cache.mask.sum(dim=-1, keepdim=True).to(grad_pooled.dtype)
    per_token = (grad_pooled / counts).unsqueeze(1).expand(-1, cache.token_ids.size(1), -1)
    per_token = per_token * cache.mask.unsqueeze(-1).to(per_token.dtype)
    grad_token_embeddings = torch.zeros(vocab_size, weight.size(1), dtype=grad_pooled.dtype, device=grad_pooled.device)
    grad_token_embeddings.index_add_(0, cache.token_ids.reshape(-1), per_token.reshape(-1, weight.size(1)))
    return EncoderGradients(token_embeddings=grad_token_embeddings, weight=grad_weight, bias=grad_bias)


class SentenceEncodeFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, token_embeddings, weight, bias, token_ids):
        cache = _encode_forward(token_embeddings, weight, bias, token_ids)
        ctx.cache = cache
        ctx.save_for_backward(weight)
        ctx.vocab_size = token_embeddings.size(0)
        return cache.embeddings

    @staticmethod
    def backward(ctx, grad_embeddings):
        (weight,) = ctx.saved_tensors
        grads = _encode_backward(ctx.cache, grad_embeddings.contiguous(), weight, ctx.vocab_size)
        return grads.token_embeddings, grads.weight, grads.bias, None


class EncoderModel(torch.nn.Module):
    def __init__(
        self,
        vocab_size: int,
        token_dim: int = 64,
        hidden_size: int = 64,
        seed: int = 0,
        generator: torch.Generator | None = None,
        init_range: float = 0.1,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.token_dim = token_dim
        self.hidden_size = hidden_size
        self.seed = seed

        if generator is None:
            generator = torch.Generator()
            generator.manual_seed(seed)

        def uniform(*shape: int) -> torch.Tensor:
            return (torch.rand(*shape, generator=generator) * 2 - 1) * init_range

        self.token_embeddings = torch.nn.Parameter(uniform(vocab_size, token_dim))
        self.projection = torch.nn.Linear(token_dim, hidden_size)
        with torch.no_grad():
            self.projection.weight.copy_(uniform(hidden_size, token_dim))
            self.projection.bias.copy_(uniform(hidden_size))

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        return SentenceEncodeFunction.apply(self.token_embeddings, self.projection.weight, self.projection.bias, token_ids)

    def header(self) -> dict:
        return {'vocab_size': self.vocab_size, 'd_tok': self.token_dim, 'H': self.hidden_size, 'seed': self.seed}

    def save(self, path: PathType) -> None:
        header = {**self.header(), 'tensors': ['token_embeddings', 'W1', 'b1']}
        with Path(path).open('wb') as f:
            f.write(json.dumps(header, sort_keys=True).encode('utf-8') + b'\n')
            for tensor in (self.token_embeddings, self.projection.weight, self.projection.bias):
                f.write(tensor.detach().cpu().numpy().astype('<f4').tobytes())

    @classmethod
    def load(cls, path: PathType) -> EncoderModel:
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f'encoder checkpoint not found: {path}')
        with path.open('rb') as f:
            try:
                header = json.loads(f.readline().decode('utf-8'))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise CheckpointError(f'corrupt encoder checkpoint header: {path}') from e
            payload = f.read()

        try:
            vocab_size, token_dim, hidden_size = (int(header[key]) for key in ('vocab_size', 'd_tok', 'H'))
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f'corrupt encoder checkpoint header: {path}') from e
        shapes = [(vocab_size, token_dim), (hidden_size, token_dim), (hidden_size,)]
        expected = sum(int(np.prod(shape)) for shape in shapes) * 4
        if len(payload) != expected:
            raise CheckpointError(f'encoder checkpoint {path} holds {len(payload)} bytes, expected {expected}')

        model = cls(vocab_size, token_dim, hidden_size, seed=header.get('seed', 0))
        arrays = []
        offset = 0
        for shape in shapes:
            size = int(np.prod(shape)) * 4
            arrays.append(torch.from_numpy(np.frombuffer(payload[offset : offset + size], dtype='<f4').reshape(shape).copy()))
            offset += size
        with torch.no_grad():
            model.token_embeddings.copy_(arrays[0])
            model.projection.weight.copy_(arrays[1])
            model.projection.bias.copy_(arrays[2])
        return model


class ClassifierHead(torch.nn.Linear):
    def __init__(self, hidden_size: int, num_known: int, generator: torch.Generator | None = None, init_range: float = 0.1):
        super().__init__(hidden_size, num_known)
        if generator is not None:
            with torch.no_grad():
                self.weight.copy_((torch.rand(num_known, hidden_size, generator=generator) * 2 - 1) * init_range)
                self.bias.zero_()


def _as_token_ids(batch: Sequence[LabeledInstance] | torch.Tensor) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        return batch
    if any(not instance.token_ids for instance in batch):
        raise EmbeddingError('every instance needs at least one token')
    return collate(batch)['token_ids']


def encode(
    model: EncoderModel,
    batch: Sequence[LabeledInstance] | torch.Tensor,
    allow_dead: bool = False,
) -> EmbeddingBatch:
    """Unit-norm embeddings; with `allow_dead`, an all-zero hidden vector yields a zero row instead of an error."""
    with torch.no_grad():
        token_ids = _as_token_ids(batch)
        cache = _encode_forward(model.token_embeddings, model.projection.weight, model.projection.bias, token_ids, allow_dead)
    return EmbeddingBatch(embeddings=cache.embeddings, pre_norm=cache.hidden)


def encode_backward(
    model: EncoderModel,
    batch: Sequence[LabeledInstance] | torch.Tensor,
    upstream: torch.Tensor,
) -> EncoderGradients:
    with torch.no_grad():
        weight = model.projection.weight
        cache = _encode_forward(model.token_embeddings, weight, model.projection.bias, _as_token_ids(batch))
        return _encode_backward(cache, upstream.to(cache.embeddings.dtype), weight, model.vocab_size)


def generate_batch(data: Iterable[T], batch_size: int = 32) -> Generator[list[T], None, None]:
    iterator = iter(data)
    while batch := list(islice(iterator, batch_size)):
        yield batch


PROGRESS_BAR_THRESHOLD = 1000


def encode_dataset(
    model: EncoderModel,
    instances: Sequence[LabeledInstance],
    batch_size: int = 256,
    progress_bar: Literal['auto'] | bool = 'auto',
    allow_dead: bool = False,
) -> torch.Tensor:
    if progress_bar == 'auto':
        progress_bar = len(instances) > PROGRESS_BAR_THRESHOLD

    embeddings: list[torch.Tensor] = []
    for batch in tqdm.tqdm(
        generate_batch(instances, batch_size),
        disable=not progress_bar,
        total=-(-len(instances) // batch_size),
        unit='batch',
        desc='Encoding',
    ):
        embeddings.append(encode(model, batch, allow_dead).embeddings)
    if not embeddings:
        return torch.zeros(0, model.hidden_size)
    return torch.cat(embeddings, dim=0)


class PrecomputedEmbeddings:
    """Fixed embeddings produced outside this package, one row per corpus line."""

    def __init__(self, embeddings: torch.Tensor):
        self.embeddings = embeddings

    @property
    def hidden_size(self) -> int:
        return self.embeddings.size(1)

    def __len__(self) -> int:
        return self.embeddings.size(0)

    def __getitem__(self, ids) -> torch.Tensor:
        return self.embeddings[ids]

    def for_instances(self, instances: Sequence[LabeledInstance]) -> torch.Tensor:
        index = torch.tensor([instance.source_index for instance in instances], dtype=torch.long)
        if len(index) and (index.min() < 0 or index.max() >= len(self)):
            raise EmbeddingError('instance source index outside the precomputed embedding table')
        return self.embeddings[index]


def load_precomputed(path: PathType, hidden_size: int | None = None) -> PrecomputedEmbeddings:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f'precomputed embedding file not found: {path}')
    array = np.load(path, allow_pickle=False)
    if array.ndim != 2:
        raise EmbeddingError(f'precomputed embeddings must be a 2-d array, got shape {array.shape}')
    if hidden_size is not None and array.shape[1] != hidden_size:
        raise EmbeddingError(f'precomputed embeddings have dimension {array.shape[1]}, expected {hidden_size}')
    if not np.isfinite(array).all():
        raise EmbeddingError(f'precomputed embeddings in {path} contain non-finite values')

    embeddings = torch.from_numpy(array.astype(np.float32))
    norms = embeddings.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        row = int((norms.squeeze(-1) == 0).nonzero()[0])
        raise EmbeddingError(f'precomputed embedding {row} is the zero vector', instance=row)
    return PrecomputedEmbeddings(embeddings / norms)
