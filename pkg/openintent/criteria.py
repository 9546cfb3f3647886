from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from openintent.config import Stage1Config
from openintent.data import LabeledDataset
from openintent.data_structures import ContrastiveSample
from openintent.errors import ConfigError, SamplingError
from openintent.model import ClassifierHead
from openintent.types import ContrastiveType

HeadParams = ClassifierHead | tuple[torch.Tensor, torch.Tensor]


@dataclass
class LossOutput:
    value: torch.Tensor
    gradient: torch.Tensor


@dataclass
class CrossEntropyOutput(LossOutput):
    weight_gradient: torch.Tensor
    bias_gradient: torch.Tensor


@dataclass
class Stage1LossOutput(CrossEntropyOutput):
    contrastive_value: torch.Tensor
    ce_value: torch.Tensor


def sample_contrastive(
    dataset: LabeledDataset,
    anchor: int,
    num_positives: int,
    num_negatives: int,
    rng: np.random.Generator,
) -> ContrastiveSample:
    label = int(dataset.labels[anchor])
    members = dataset.class_index[label]
    if not len(members):
        raise SamplingError(f'anchor {anchor} has an empty class {label}')
    others = members[members != anchor]
    if not len(others):
        # a singleton class can only pair with itself
        others = members
    replace = len(others) < num_positives
    positives = rng.choice(others, size=num_positives, replace=replace)

    negative_classes = dataset.classes_except(label)
    if not negative_classes:
        raise SamplingError(f'no negative class available for anchor {anchor} of class {label}')
    negatives = []
    for _ in range(num_negatives):
        negative_class = negative_classes[int(rng.integers(len(negative_classes)))]
        candidates = dataset.class_index[negative_class]
        negatives.append(int(candidates[int(rng.integers(len(candidates)))]))
    return ContrastiveSample(anchor=anchor, positives=[int(i) for i in positives], negatives=negatives)


def build_stage1_samples(
    dataset: LabeledDataset,
    anchors: Sequence[int],
    num_positives: int,
    num_negatives: int,
    rng: np.random.Generator,
) -> tuple[list[int], list[ContrastiveSample]]:
    """Sample tuples for a batch of anchors and remap them onto the deduplicated rows to encode."""
    rows: list[int] = []
    row_of: dict[int, int] = {}

    def row(index: int) -> int:
        if index not in row_of:
            row_of[index] = len(rows)
            rows.append(index)
        return row_of[index]

    samples = []
    for anchor in anchors:
        sample = sample_contrastive(dataset, int(anchor), num_positives, num_negatives, rng)
        samples.append(
            ContrastiveSample(
                anchor=row(sample.anchor),
                positives=[row(i) for i in sample.positives],
                negatives=[row(i) for i in sample.negatives],
            )
        )
    return rows, samples


def _stack_samples(samples: Sequence[ContrastiveSample], device: torch.device):
    if not samples:
        raise SamplingError('no contrastive samples given')
    num_positives = len(samples[0].positives)
    num_negatives = len(samples[0].negatives)
    if any(len(s.positives) != num_positives or len(s.negatives) != num_negatives for s in samples):
        raise SamplingError('all samples in a batch need the same number of positives and negatives')
    anchors = torch.tensor([s.anchor for s in samples], dtype=torch.long, device=device)
    positives = torch.tensor([s.positives for s in samples], dtype=torch.long, device=device)
    negatives = torch.tensor([s.negatives for s in samples], dtype=torch.long, device=device)
    return anchors, positives, negatives


def _check_temperature(temperature: float) -> None:
    if temperature <= 0:
        raise ConfigError(f'temperature must be > 0, got {temperature}')


def _anchor_positive_loss(
    embeddings: torch.Tensor,
    anchors: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float,
) -> LossOutput:
    hidden = embeddings.size(1)
    anchor = embeddings[anchors]
    positive = embeddings[positives]
    negative = embeddings[negatives]

    pos_logits = torch.einsum('nkh,nh->nk', positive, anchor) / temperature
    neg_logits = torch.einsum('nmh,nh->nm', negative, anchor) / temperature
    log_denominator = torch.logaddexp(pos_logits, torch.logsumexp(neg_logits, dim=-1, keepdim=True))
    value = (log_denominator - pos_logits).mean()

    scale = 1.0 / pos_logits.numel()
    grad_pos = (torch.exp(pos_logits - log_denominator) - 1) * scale
    grad_neg = torch.exp(neg_logits.unsqueeze(1) - log_denominator.unsqueeze(-1)).sum(dim=1) * scale

    grad_anchor = torch.einsum('nk,nkh->nh', grad_pos, positive) + torch.einsum('nm,nmh->nh', grad_neg, negative)
    grad_anchor = grad_anchor / temperature
    grad_positive = grad_pos.unsqueeze(-1) * anchor.unsqueeze(1) / temperature
    grad_negative = grad_neg.unsqueeze(-1) * anchor.unsqueeze(1) / temperature

    gradient = torch.zeros_like(embeddings)
    gradient.index_add_(0, anchors, grad_anchor)
    gradient.index_add_(0, positives.reshape(-1), grad_positive.reshape(-1, hidden))
    gradient.index_add_(0, negatives.reshape(-1), grad_negative.reshape(-1, hidden))
    return LossOutput(value=value, gradient=gradient)


def cl_loss(embeddings: torch.Tensor, samples: Sequence[ContrastiveSample], temperature: float) -> LossOutput:
    """Single-positive supervised contrastive loss; positives beyond the first are ignored."""
    _check_temperature(temperature)
    anchors, positives, negatives = _stack_samples(samples, embeddings.device)
    return _anchor_positive_loss(embeddings, anchors, positives[:, :1], negatives, temperature)


def kcl_loss(embeddings: torch.Tensor, samples: Sequence[ContrastiveSample], temperature: float) -> LossOutput:
    """K-positive contrastive loss: the anchor-positive term averaged over the K positives."""
    _check_temperature(temperature)
    anchors, positives, negatives = _stack_samples(samples, embeddings.device)
    return _anchor_positive_loss(embeddings, anchors, positives, negatives, temperature)


def kccl_loss(embeddings: torch.Tensor, samples: Sequence[ContrastiveSample], temperature: float) -> LossOutput:
    """K-center contrastive loss.

    Every ordered pair (m, n), m != n, of the set {anchor} + K positives is contrasted against the
    anchor's shared negatives; each negative enters the denominator once through m and once through n.
    The value is normalized by N * K * (K + 1).
    """
    _check_temperature(temperature)
    anchors, positives, negatives = _stack_samples(samples, embeddings.device)
    hidden = embeddings.size(1)
    num_samples, num_positives = positives.shape
    if num_positives < 1:
        raise ConfigError('kccl_loss needs at least one positive per anchor')

    members = torch.cat([anchors.unsqueeze(1), positives], dim=1)
    group = embeddings[members]
    negative = embeddings[negatives]

    pair_logits = group @ group.transpose(1, 2) / temperature
    neg_logits = group @ negative.transpose(1, 2) / temperature
    log_neg = torch.logsumexp(neg_logits, dim=-1)
    size = num_positives + 1
    log_denominator = torch.logsumexp(
        torch.stack(
            [pair_logits, log_neg.unsqueeze(2).expand(-1, -1, size), log_neg.unsqueeze(1).expand(-1, size, -1)],
            dim=0,
        ),
        dim=0,
    )
    off_diagonal = ~torch.eye(size, dtype=torch.bool, device=embeddings.device)
    scale = 1.0 / (num_samples * num_positives * (num_positives + 1))
    value = ((log_denominator - pair_logits) * off_diagonal).sum() * scale

    grad_pair = (torch.exp(pair_logits - log_denominator) - 1) * off_diagonal * scale
    log_inverse = torch.where(off_diagonal, -log_denominator, torch.full_like(log_denominator, -math.inf))
    # negatives of member m appear in every pair (m, n) and (n, m)
    log_weight = torch.logaddexp(torch.logsumexp(log_inverse, dim=-1), torch.logsumexp(log_inverse, dim=-2))
    grad_neg = torch.exp(neg_logits + log_weight.unsqueeze(-1)) * scale

    grad_group = ((grad_pair + grad_pair.transpose(1, 2)) @ group + grad_neg @ negative) / temperature
    grad_negative = grad_neg.transpose(1, 2) @ group / temperature

    gradient = torch.zeros_like(embeddings)
    gradient.index_add_(0, members.reshape(-1), grad_group.reshape(-1, hidden))
    gradient.index_add_(0, negatives.reshape(-1), grad_negative.reshape(-1, hidden))
    return LossOutput(value=value, gradient=gradient)


ContrastiveLossFn = Callable[[torch.Tensor, Sequence[ContrastiveSample], float], LossOutput]

CONTRASTIVE_LOSSES: dict[ContrastiveType, ContrastiveLossFn] = {
    ContrastiveType.cl: cl_loss,
    ContrastiveType.kcl: kcl_loss,
    ContrastiveType.kccl: kccl_loss,
}


def _head_params(head: HeadParams) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(head, tuple):
        return head
    return head.weight, head.bias


def ce_loss(embeddings: torch.Tensor, head: HeadParams, labels: torch.Tensor) -> CrossEntropyOutput:
    weight, bias = _head_params(head)
    weight, bias = weight.detach(), bias.detach()
    num_known = weight.size(0)
    if len(labels) != embeddings.size(0):
        raise ConfigError(f'{len(labels)} labels for {embeddings.size(0)} embeddings')
    if len(labels) and (labels.min() < 0 or labels.max() >= num_known):
        raise ConfigError(f'labels must lie in [0, {num_known}), got range [{int(labels.min())}, {int(labels.max())}]')

    logits = embeddings @ weight.T + bias
    log_probs = torch.log_softmax(logits, dim=-1)
    value = -log_probs.gather(1, labels.unsqueeze(1)).mean()

    one_hot = torch.nn.functional.one_hot(labels, num_known).to(log_probs.dtype)
    grad_logits = (torch.exp(log_probs) - one_hot) / len(labels)
    return CrossEntropyOutput(
        value=value,
        gradient=grad_logits @ weight,
        weight_gradient=grad_logits.T @ embeddings,
        bias_gradient=grad_logits.sum(dim=0),
    )


def stage1_loss(
    embeddings: torch.Tensor,
    samples: Sequence[ContrastiveSample],
    head: HeadParams,
    labels: torch.Tensor,
    config: Stage1Config,
) -> Stage1LossOutput:
    """lambda * contrastive + (1 - lambda) * cross-entropy; cross-entropy runs on the anchor rows."""
    anchors, _, _ = _stack_samples(samples, embeddings.device)
    ce = ce_loss(embeddings[anchors], head, labels)
    ce_gradient = torch.zeros_like(embeddings).index_add_(0, anchors, ce.gradient)

    if config.contrastive == ContrastiveType.none:
        return Stage1LossOutput(
            value=ce.value,
            gradient=ce_gradient,
            weight_gradient=ce.weight_gradient,
            bias_gradient=ce.bias_gradient,
            contrastive_value=torch.zeros_like(ce.value),
            ce_value=ce.value,
        )

    contrastive = CONTRASTIVE_LOSSES[config.contrastive](embeddings, samples, config.temperature)
    weight = config.lambda_weight
    return Stage1LossOutput(
        value=weight * contrastive.value + (1 - weight) * ce.value,
        gradient=weight * contrastive.gradient + (1 - weight) * ce_gradient,
        weight_gradient=(1 - weight) * ce.weight_gradient,
        bias_gradient=(1 - weight) * ce.bias_gradient,
        contrastive_value=contrastive.value,
        ce_value=ce.value,
    )


class Stage1LossFunction(torch.autograd.Function):
    """Returns (loss, contrastive part, cross-entropy part); only the loss is differentiable."""

    @staticmethod
    def forward(ctx, embeddings, weight, bias, samples, labels, config):
        output = stage1_loss(embeddings.detach(), samples, (weight, bias), labels, config)
        ctx.save_for_backward(output.gradient, output.weight_gradient, output.bias_gradient)
        contrastive_value, ce_value = output.contrastive_value.clone(), output.ce_value.clone()
        ctx.mark_non_differentiable(contrastive_value, ce_value)
        return output.value, contrastive_value, ce_value

    @staticmethod
    def backward(ctx, grad_output, grad_contrastive, grad_ce):
        gradient, weight_gradient, bias_gradient = ctx.saved_tensors
        return grad_output * gradient, grad_output * weight_gradient, grad_output * bias_gradient, None, None, None


class Stage1Loss(torch.nn.Module):
    def __init__(self, config: Stage1Config):
        super().__init__()
        self.config = config

    def forward(
        self,
        embeddings: torch.Tensor,
        head: ClassifierHead,
        samples: Sequence[ContrastiveSample],
        labels: torch.Tensor,
    ) -> dict[str, torch.Tensor]:
        loss, contrastive, ce = Stage1LossFunction.apply(embeddings, head.weight, head.bias, samples, labels, self.config)
        return {'loss': loss, 'contrastive_loss': contrastive, 'ce_loss': ce}
