from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import torch

from openintent.boundary import BoundaryModel, BoundaryResult, train_boundary
from openintent.config import RunConfig
from openintent.data import (
    LabeledDataset,
    Vocabulary,
    apply_split,
    build_vocabulary,
    label_space,
    load_dataset_dir,
    load_designated_known,
    make_split_plan,
)
from openintent.data_structures import LabeledInstance, RawCorpus, SplitPlan
from openintent.errors import CheckpointError, ConfigError
from openintent.evaluation import (
    EvalReport,
    best_ratio,
    boundary_sweep,
    compute_report,
    evaluate,
    export_distances,
    msp_predict,
)
from openintent.model import ClassifierHead, EncoderModel, encode_dataset, load_precomputed
from openintent.stage1 import Stage1Result, train_stage1
from openintent.trainer import create_accelerator
from openintent.types import BoundaryMode, ContrastiveType, PathType, Split

CONFIG_FILE = 'config.json'
SPLIT_PLAN_FILE = 'split_plan.json'
VOCAB_FILE = 'vocab.json'
ENCODER_FILE = 'encoder.ckpt'
HEAD_FILE = 'head.json'
STAGE1_TRACE_FILE = 'stage1_trace.csv'
BOUNDARY_FILE = 'boundary.json'
RADIUS_TRACE_FILE = 'radius_trace.csv'
REPORT_FILE = 'report.json'
SWEEP_FILE = 'sweep.csv'
DISTANCES_FILE = 'distances.csv'
AGGREGATE_FILE = 'aggregate.json'
SUMMARY_METRICS = ['accuracy', 'macro_f1_all', 'macro_f1_known', 'f1_unknown']
ABLATION_CONTRASTIVE = [ContrastiveType.kccl, ContrastiveType.kcl, ContrastiveType.cl, ContrastiveType.none]
ABLATION_MODES = [BoundaryMode.adb, BoundaryMode.adbes]


def seed_dir(output_dir: PathType, seed: int) -> Path:
    return Path(output_dir) / f'seed_{seed}'


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + '\n')


@dataclass
class PreparedData:
    plan: SplitPlan
    vocab: Vocabulary
    instances: dict[Split, list[LabeledInstance]]

    @property
    def known_labels(self) -> list[str]:
        return self.plan.known_labels

    @property
    def num_known(self) -> int:
        return self.plan.num_known

    def dataset(self, split: Split = Split.train) -> LabeledDataset:
        return LabeledDataset(self.instances[split], self.num_known)

    def labels(self, split: Split) -> torch.Tensor:
        return torch.tensor([instance.label_id for instance in self.instances[split]], dtype=torch.long)


def prepare_split_plan(config: RunConfig, run_dir: PathType, labels: list[str] | None = None) -> SplitPlan:
    if labels is None:
        labels = label_space(load_dataset_dir(config.dataset_dir).values())
    designated = load_designated_known(config.dataset_dir)
    plan = make_split_plan(len(labels), config.proportion, config.split_seed, labels, designated)
    plan_path = Path(run_dir) / SPLIT_PLAN_FILE
    if plan_path.exists():
        stored = SplitPlan.load(plan_path, labels)
        if stored != plan:
            raise ConfigError(
                f'{plan_path} was written for proportion={stored.proportion}, split_seed={stored.seed} and '
                f'known labels {stored.known_labels}; use a fresh output directory for a different split'
            )
        return stored
    plan_path.parent.mkdir(parents=True, exist_ok=True)
    plan.save(plan_path)
    return plan


def prepare_data(config: RunConfig, run_dir: PathType) -> PreparedData:
    """Load the corpora, then create the split plan and vocabulary or check them against the ones in `run_dir`."""
    run_dir = Path(run_dir)
    corpora = load_dataset_dir(config.dataset_dir)
    plan = prepare_split_plan(config, run_dir, label_space(corpora.values()))

    # open classes stay unseen, so their words never enter the vocabulary
    known = set(plan.known_labels)
    train = corpora[Split.train]
    vocab = build_vocabulary(RawCorpus([r for r in train.records if r.label in known], Split.train), config.min_freq)
    vocab_path = run_dir / VOCAB_FILE
    if vocab_path.exists():
        if Vocabulary.load(vocab_path) != vocab:
            raise ConfigError(f'{vocab_path} does not match min_freq={config.min_freq}; use a fresh output directory')
    else:
        vocab.save(vocab_path)

    instances = {split: apply_split(corpus, plan, vocab, config.max_len)[0] for split, corpus in corpora.items()}
    return PreparedData(plan=plan, vocab=vocab, instances=instances)


def save_head(head: ClassifierHead, path: PathType) -> None:
    _write_json(Path(path), {'weight': head.weight.detach().tolist(), 'bias': head.bias.detach().tolist()})


def load_head(path: PathType) -> ClassifierHead:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f'classifier head not found: {path}')
    try:
        data = json.loads(path.read_text())
        weight = torch.tensor(data['weight'], dtype=torch.float32)
        bias = torch.tensor(data['bias'], dtype=torch.float32)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f'corrupt classifier head: {path}') from e
    if weight.dim() != 2 or bias.shape != (weight.size(0),):
        raise CheckpointError(f'classifier head {path} has weight {tuple(weight.shape)} and bias {tuple(bias.shape)}')
    head = ClassifierHead(weight.size(1), weight.size(0))
    with torch.no_grad():
        head.weight.copy_(weight)
        head.bias.copy_(bias)
    return head


def train_encoder_stage(config: RunConfig, run_dir: PathType, show_progress: bool = True) -> Stage1Result:
    if config.precomputed_dir is not None:
        raise ConfigError('stage 1 is skipped when precomputed embeddings are configured')
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / CONFIG_FILE)
    prepared = prepare_data(config, run_dir)

    accelerator = create_accelerator(str(run_dir), config.use_tensorboard)
    accelerator.print(f'stage 1: {len(prepared.instances[Split.train])} instances, {prepared.num_known} known classes')
    result = train_stage1(prepared.dataset(), config.stage1, prepared.vocab.size, accelerator, show_progress)
    result.encoder.save(run_dir / ENCODER_FILE)
    save_head(result.head, run_dir / HEAD_FILE)
    result.trace.to_csv(run_dir / STAGE1_TRACE_FILE, index=False)
    return result


def load_encoder(run_dir: PathType, prepared: PreparedData) -> EncoderModel:
    encoder = EncoderModel.load(Path(run_dir) / ENCODER_FILE)
    if encoder.vocab_size != prepared.vocab.size:
        raise CheckpointError(
            f'encoder checkpoint has vocab_size={encoder.vocab_size}, vocabulary has {prepared.vocab.size} entries'
        )
    return encoder


def embed_split(
    config: RunConfig,
    run_dir: PathType,
    prepared: PreparedData,
    split: Split,
    allow_dead: bool = False,
) -> torch.Tensor:
    instances = prepared.instances[split]
    if config.precomputed_dir is not None:
        table = load_precomputed(Path(config.precomputed_dir) / f'{split.value}.npy')
        return table.for_instances(instances)
    return encode_dataset(load_encoder(run_dir, prepared), instances, allow_dead=allow_dead)


def _stage_dir(run_dir: PathType, stage_dir: PathType | None) -> Path:
    path = Path(stage_dir) if stage_dir is not None else Path(run_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def train_boundary_stage(
    config: RunConfig,
    run_dir: PathType,
    stage_dir: PathType | None = None,
    show_progress: bool = True,
) -> BoundaryResult:
    """Fit the decision boundaries on the train split; artifacts go to `stage_dir` (default `run_dir`)."""
    run_dir = Path(run_dir)
    output = _stage_dir(run_dir, stage_dir)
    config.save(output / CONFIG_FILE)
    prepared = prepare_data(config, run_dir)

    valid_embeddings = valid_labels = None
    if config.stage2.patience is not None:
        valid_embeddings = embed_split(config, run_dir, prepared, Split.valid)
        valid_labels = prepared.labels(Split.valid)

    result = train_boundary(
        embed_split(config, run_dir, prepared, Split.train),
        prepared.labels(Split.train),
        config.stage2,
        num_known=prepared.num_known,
        label_names=prepared.known_labels,
        valid_embeddings=valid_embeddings,
        valid_labels=valid_labels,
        accelerator=create_accelerator(str(output), config.use_tensorboard),
        show_progress=show_progress,
    )
    result.boundary.save(output / BOUNDARY_FILE)
    result.radius_trace.to_csv(output / RADIUS_TRACE_FILE, index=False)
    return result


def evaluate_stage(config: RunConfig, run_dir: PathType, stage_dir: PathType | None = None) -> EvalReport:
    run_dir = Path(run_dir)
    output = _stage_dir(run_dir, stage_dir)
    prepared = prepare_data(config, run_dir)
    # undefined rows come back as zeros and are predicted open
    embeddings = embed_split(config, run_dir, prepared, Split.test, allow_dead=True)
    labels = prepared.labels(Split.test)
    boundary = BoundaryModel.load(output / BOUNDARY_FILE, hidden_size=embeddings.size(1))

    report = evaluate(boundary, embeddings, labels)
    sweep = boundary_sweep(boundary, embeddings, labels, config.sweep_ratios)
    sweep.to_csv(output / SWEEP_FILE, index=False)
    export_distances(boundary, embeddings, labels, output / DISTANCES_FILE)

    document = {
        **report.to_dict(),
        'best_sweep_ratio': best_ratio(sweep),
        'undefined_embeddings': int((embeddings.abs().sum(dim=-1) == 0).sum()),
    }
    head_path = run_dir / HEAD_FILE
    if config.precomputed_dir is None and head_path.exists():
        msp = msp_predict(load_head(head_path), embeddings, config.msp_threshold)
        baseline = compute_report(labels.numpy(), msp.numpy(), prepared.num_known, prepared.known_labels)
        document['baselines'] = {'msp': baseline.to_dict()}
    _write_json(output / REPORT_FILE, document)
    return report


def run_single(config: RunConfig, run_dir: PathType, show_progress: bool = False) -> EvalReport:
    """One seed end to end: prepare, stage 1 (unless precomputed), stage 2, evaluate."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / CONFIG_FILE)
    if config.precomputed_dir is None:
        train_encoder_stage(config, run_dir, show_progress)
    train_boundary_stage(config, run_dir, show_progress=show_progress)
    return evaluate_stage(config, run_dir)


def aggregate_reports(seeds: Sequence[int], reports: Sequence[EvalReport]) -> dict:
    table = pd.DataFrame([{metric: getattr(r, metric) for metric in SUMMARY_METRICS} for r in reports])
    return {
        'seeds': list(seeds),
        'metrics': {
            metric: {'mean': round(float(table[metric].mean()), 8), 'std': round(float(table[metric].std(ddof=0)), 8)}
            for metric in SUMMARY_METRICS
        },
        'runs': {str(seed): {m: round(getattr(r, m), 8) for m in SUMMARY_METRICS} for seed, r in zip(seeds, reports)},
    }


def run_experiment(config: RunConfig, workers: int = 1, show_progress: bool = False) -> dict:
    """Run every configured seed into `seed_{s}` directories and write the mean ± std aggregate."""
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    config.save(output_dir / CONFIG_FILE)
    seeds = list(config.seeds)
    jobs = [(config.for_seed(seed), seed_dir(output_dir, seed)) for seed in seeds]

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(run_single, job_config, job_dir, False) for job_config, job_dir in jobs]
            reports = [future.result() for future in futures]
    else:
        reports = [run_single(job_config, job_dir, show_progress) for job_config, job_dir in jobs]

    aggregate = aggregate_reports(seeds, reports)
    _write_json(output_dir / AGGREGATE_FILE, aggregate)
    return aggregate


def run_ablation(
    config: RunConfig,
    contrastive_types: Sequence[ContrastiveType] = ABLATION_CONTRASTIVE,
    modes: Sequence[BoundaryMode] = ABLATION_MODES,
    show_progress: bool = False,
) -> pd.DataFrame:
    """Every (stage-1 loss, boundary mode) pair over all seeds; one encoder is shared by the modes."""
    output_dir = Path(config.output_dir)
    reports: dict[tuple[ContrastiveType, BoundaryMode], list[EvalReport]] = {}
    for contrastive in contrastive_types:
        variant = replace(config, stage1=replace(config.stage1, contrastive=contrastive))
        for seed in config.seeds:
            run_config = variant.for_seed(seed)
            run_dir = output_dir / contrastive.value / f'seed_{seed}'
            run_dir.mkdir(parents=True, exist_ok=True)
            run_config.save(run_dir / CONFIG_FILE)
            train_encoder_stage(run_config, run_dir, show_progress)
            for mode in modes:
                mode_config = replace(run_config, stage2=replace(run_config.stage2, mode=mode))
                mode_dir = run_dir / mode.value
                train_boundary_stage(mode_config, run_dir, mode_dir, show_progress)
                reports.setdefault((contrastive, mode), []).append(evaluate_stage(mode_config, run_dir, mode_dir))

    rows = []
    for (contrastive, mode), runs in reports.items():
        scores = np.array([r.macro_f1_all for r in runs])
        rows.append(
            {
                'contrastive': contrastive.value,
                'mode': mode.value,
                'macro_f1_all_mean': round(float(scores.mean()), 8),
                'macro_f1_all_std': round(float(scores.std()), 8),
            }
        )
    table = pd.DataFrame(rows, columns=['contrastive', 'mode', 'macro_f1_all_mean', 'macro_f1_all_std'])
    output_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(output_dir / 'ablation.csv', index=False)
    return table


def run_k_sweep(config: RunConfig, ks: Sequence[int], workers: int = 1) -> pd.DataFrame:
    output_dir = Path(config.output_dir)
    rows = []
    for k in ks:
        variant = replace(
            config,
            output_dir=str(output_dir / f'k_{k}'),
            stage1=replace(config.stage1, num_positives=k),
        )
        aggregate = run_experiment(variant, workers)
        rows.append(
            {
                'num_positives': k,
                'macro_f1_all_mean': aggregate['metrics']['macro_f1_all']['mean'],
                'macro_f1_all_std': aggregate['metrics']['macro_f1_all']['std'],
            }
        )
    table = pd.DataFrame(rows, columns=['num_positives', 'macro_f1_all_mean', 'macro_f1_all_std'])
    table.to_csv(output_dir / 'k_sweep.csv', index=False)
    return table

