import json
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Iterator, Optional

import typer

from openintent.config import RunConfig, SyntheticConfig
from openintent.errors import OpenIntentError
from openintent.pipeline import (
    REPORT_FILE,
    evaluate_stage,
    prepare_data,
    run_ablation,
    run_experiment,
    run_k_sweep,
    seed_dir,
    train_boundary_stage,
    train_encoder_stage,
)
from openintent.synthetic import generate_synthetic
from openintent.types import BoundaryMode, ContrastiveType, RadiusParametrization, Split

OUTPUT_DIR_ENVVAR = 'OPENINTENT_OUTPUT_DIR'

app = typer.Typer(help='Two-stage open intent classification: contrastive encoder training and decision boundaries.')

ConfigOption = Annotated[Optional[Path], typer.Option('--config', help='Run config JSON.', rich_help_panel='Run')]
DatasetDirOption = Annotated[Optional[Path], typer.Option(help='Directory with train/valid/test TSV.', rich_help_panel='Run')]
OutputDirOption = Annotated[Optional[Path], typer.Option(envvar=OUTPUT_DIR_ENVVAR, rich_help_panel='Run')]
SeedOption = Annotated[
    Optional[int], typer.Option(help='Training seed; defaults to the first configured seed.', rich_help_panel='Run')
]
SeedsOption = Annotated[Optional[list[int]], typer.Option('--seed', help='Repeat for several seeds.', rich_help_panel='Run')]
ProportionOption = Annotated[Optional[float], typer.Option(help='Fraction of classes kept as known.', rich_help_panel='Data')]
SplitSeedOption = Annotated[Optional[int], typer.Option(rich_help_panel='Data')]
PrecomputedDirOption = Annotated[
    Optional[Path], typer.Option(help='Directory with {split}.npy embeddings; skips stage 1.', rich_help_panel='Data')
]
ProgressOption = Annotated[bool, typer.Option('--progress/--no-progress', rich_help_panel='Run')]
WorkersOption = Annotated[int, typer.Option(help='Process pool size for seeds.', rich_help_panel='Run')]


@contextmanager
def reported_errors() -> Iterator[None]:
    try:
        yield
    except OpenIntentError as e:
        typer.echo(json.dumps(e.to_dict(), sort_keys=True, default=str), err=True)
        raise typer.Exit(code=1) from e


def _str(path: Optional[Path]) -> Optional[str]:
    return str(path) if path is not None else None


def build_config(config_file: Optional[Path], **overrides) -> RunConfig:
    config = RunConfig.from_json(config_file) if config_file is not None else RunConfig()
    return config.override(**overrides)


def _single_run(config: RunConfig, seed: Optional[int]) -> tuple[RunConfig, Path]:
    seed = config.seeds[0] if seed is None else seed
    return config.for_seed(seed), seed_dir(config.output_dir, seed)


@app.command()
def prepare(
    config_file: ConfigOption = None,
    dataset_dir: DatasetDirOption = None,
    output_dir: OutputDirOption = None,
    proportion: ProportionOption = None,
    split_seed: SplitSeedOption = None,
    seed: SeedOption = None,
):
    """Draw the known-class split plan and build the vocabulary for one run directory."""
    with reported_errors():
        config = build_config(
            config_file,
            dataset_dir=_str(dataset_dir),
            output_dir=_str(output_dir),
            proportion=proportion,
            split_seed=split_seed,
        )
        config, run_dir = _single_run(config, seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        config.save(run_dir / 'config.json')
        prepared = prepare_data(config, run_dir)
        typer.echo(f'known classes ({prepared.num_known}): {", ".join(prepared.known_labels)}')
        for split in Split:
            typer.echo(f'{split.value}: {len(prepared.instances[split])} instances')
        typer.echo(f'vocabulary: {prepared.vocab.size} tokens -> {run_dir}')


@app.command()
def train_encoder(
    config_file: ConfigOption = None,
    dataset_dir: DatasetDirOption = None,
    output_dir: OutputDirOption = None,
    seed: SeedOption = None,
    # Stage 1
    contrastive: Annotated[Optional[ContrastiveType], typer.Option(rich_help_panel='Stage 1')] = None,
    num_positives: Annotated[Optional[int], typer.Option(rich_help_panel='Stage 1')] = None,
    num_negatives: Annotated[Optional[int], typer.Option(rich_help_panel='Stage 1')] = None,
    lambda_weight: Annotated[Optional[float], typer.Option(rich_help_panel='Stage 1')] = None,
    temperature: Annotated[Optional[float], typer.Option(rich_help_panel='Stage 1')] = None,
    lr: Annotated[Optional[float], typer.Option(rich_help_panel='Stage 1')] = None,
    epochs: Annotated[Optional[int], typer.Option(rich_help_panel='Stage 1')] = None,
    batch_size: Annotated[Optional[int], typer.Option(rich_help_panel='Stage 1')] = None,
    token_dropout: Annotated[Optional[float], typer.Option(rich_help_panel='Stage 1')] = None,
    use_tensorboard: Annotated[Optional[bool], typer.Option(rich_help_panel='Run')] = None,
    progress: ProgressOption = True,
):
    """Stage 1: train the sentence encoder with contrastive and cross-entropy losses."""
    with reported_errors():
        config = build_config(
            config_file,
            dataset_dir=_str(dataset_dir),
            output_dir=_str(output_dir),
            use_tensorboard=use_tensorboard,
            **{
                'stage1.contrastive': contrastive,
                'stage1.num_positives': num_positives,
                'stage1.num_negatives': num_negatives,
                'stage1.lambda_weight': lambda_weight,
                'stage1.temperature': temperature,
                'stage1.learning_rate': lr,
                'stage1.epochs': epochs,
                'stage1.batch_size': batch_size,
                'stage1.token_dropout': token_dropout,
            },
        )
        config, run_dir = _single_run(config, seed)
        result = train_encoder_stage(config, run_dir, show_progress=progress)
        last = result.trace.iloc[-1]
        typer.echo(
            f'encoder saved to {run_dir}: loss {last["loss"]:.4f}, '
            f'intra-class cos {last["intra_class_cos"]:.4f}, inter-class cos {last["inter_class_cos"]:.4f}'
        )


@app.command()
def train_boundary(
    config_file: ConfigOption = None,
    dataset_dir: DatasetDirOption = None,
    output_dir: OutputDirOption = None,
    seed: SeedOption = None,
    precomputed_dir: PrecomputedDirOption = None,
    # Stage 2
    mode: Annotated[Optional[BoundaryMode], typer.Option(rich_help_panel='Stage 2')] = None,
    eta: Annotated[Optional[float], typer.Option(rich_help_panel='Stage 2')] = None,
    expansion: Annotated[Optional[float], typer.Option(help='Expansion margin.', rich_help_panel='Stage 2')] = None,
    shrink: Annotated[Optional[float], typer.Option(help='Shrink margin.', rich_help_panel='Stage 2')] = None,
    radius_parametrization: Annotated[Optional[RadiusParametrization], typer.Option(rich_help_panel='Stage 2')] = None,
    lr: Annotated[Optional[float], typer.Option(rich_help_panel='Stage 2')] = None,
    epochs: Annotated[Optional[int], typer.Option(rich_help_panel='Stage 2')] = None,
    patience: Annotated[Optional[int], typer.Option(rich_help_panel='Stage 2')] = None,
    progress: ProgressOption = True,
):
    """Stage 2: learn one radius per known class around the frozen class centers."""
    with reported_errors():
        config = build_config(
            config_file,
            dataset_dir=_str(dataset_dir),
            output_dir=_str(output_dir),
            precomputed_dir=_str(precomputed_dir),
            **{
                'stage2.mode': mode,
                'stage2.eta': eta,
                'stage2.expansion': expansion,
                'stage2.shrink': shrink,
                'stage2.radius_parametrization': radius_parametrization,
                'stage2.learning_rate': lr,
                'stage2.epochs': epochs,
                'stage2.patience': patience,
            },
        )
        config, run_dir = _single_run(config, seed)
        result = train_boundary_stage(config, run_dir, show_progress=progress)
        radii = ', '.join(
            f'{label}={radius:.4f}' for label, radius in zip(result.boundary.labels, result.boundary.radii.detach().tolist())
        )
        typer.echo(f'boundary saved to {run_dir}: {radii}')


@app.command()
def evaluate(
    config_file: ConfigOption = None,
    dataset_dir: DatasetDirOption = None,
    output_dir: OutputDirOption = None,
    seed: SeedOption = None,
    precomputed_dir: PrecomputedDirOption = None,
):
    """Score the test split; writes the report, the boundary sweep and the distance export."""
    with reported_errors():
        config = build_config(
            config_file, dataset_dir=_str(dataset_dir), output_dir=_str(output_dir), precomputed_dir=_str(precomputed_dir)
        )
        config, run_dir = _single_run(config, seed)
        report = evaluate_stage(config, run_dir)
        typer.echo(
            f'accuracy {report.accuracy:.4f}  macro F1 {report.macro_f1_all:.4f}  '
            f'known F1 {report.macro_f1_known:.4f}  open F1 {report.f1_unknown:.4f}'
        )
        typer.echo(f'report written to {run_dir / REPORT_FILE}')


@app.command()
def experiment(
    config_file: ConfigOption = None,
    dataset_dir: DatasetDirOption = None,
    output_dir: OutputDirOption = None,
    seeds: SeedsOption = None,
    proportion: ProportionOption = None,
    precomputed_dir: PrecomputedDirOption = None,
    contrastive: Annotated[Optional[ContrastiveType], typer.Option(rich_help_panel='Stage 1')] = None,
    num_positives: Annotated[Optional[int], typer.Option(rich_help_panel='Stage 1')] = None,
    mode: Annotated[Optional[BoundaryMode], typer.Option(rich_help_panel='Stage 2')] = None,
    workers: WorkersOption = 1,
):
    """Run every seed end to end and aggregate mean and standard deviation of the metrics."""
    with reported_errors():
        config = build_config(
            config_file,
            dataset_dir=_str(dataset_dir),
            output_dir=_str(output_dir),
            seeds=list(seeds) if seeds else None,
            proportion=proportion,
            precomputed_dir=_str(precomputed_dir),
            **{'stage1.contrastive': contrastive, 'stage1.num_positives': num_positives, 'stage2.mode': mode},
        )
        aggregate = run_experiment(config, workers=workers)
        typer.echo(json.dumps(aggregate['metrics'], indent=2, sort_keys=True))


@app.command()
def ablation(
    config_file: ConfigOption = None,
    dataset_dir: DatasetDirOption = None,
    output_dir: OutputDirOption = None,
    seeds: SeedsOption = None,
    proportion: ProportionOption = None,
):
    """Mean macro F1 for every stage-1 loss variant under both boundary modes."""
    with reported_errors():
        config = build_config(
            config_file,
            dataset_dir=_str(dataset_dir),
            output_dir=_str(output_dir),
            seeds=list(seeds) if seeds else None,
            proportion=proportion,
        )
        table = run_ablation(config)
        typer.echo(table.to_string(index=False))


@app.command()
def k_sweep(
    ks: Annotated[list[int], typer.Argument(help='Numbers of positives to try.')],
    config_file: ConfigOption = None,
    dataset_dir: DatasetDirOption = None,
    output_dir: OutputDirOption = None,
    seeds: SeedsOption = None,
    workers: WorkersOption = 1,
):
    """Mean macro F1 as the number of positives per anchor varies."""
    with reported_errors():
        config = build_config(
            config_file, dataset_dir=_str(dataset_dir), output_dir=_str(output_dir), seeds=list(seeds) if seeds else None
        )
        table = run_k_sweep(config, ks, workers=workers)
        typer.echo(table.to_string(index=False))


@app.command()
def gen_synthetic(
    output_dir: Annotated[Path, typer.Argument()] = Path('data/synthetic'),
    classes: Annotated[int, typer.Option(rich_help_panel='Synthetic')] = 12,
    per_class: Annotated[int, typer.Option(help='Training instances per class.', rich_help_panel='Synthetic')] = 200,
    valid_per_class: Annotated[int, typer.Option(rich_help_panel='Synthetic')] = 20,
    test_per_class: Annotated[int, typer.Option(rich_help_panel='Synthetic')] = 50,
    open_fraction: Annotated[float, typer.Option(rich_help_panel='Synthetic')] = 1 / 3,
    spread: Annotated[float, typer.Option(rich_help_panel='Synthetic')] = 0.35,
    seed: Annotated[int, typer.Option(rich_help_panel='Synthetic')] = 0,
):
    """Write a clustered synthetic intent corpus with a designated set of open classes."""
    with reported_errors():
        config = SyntheticConfig(
            num_classes=classes,
            open_fraction=open_fraction,
            train_per_class=per_class,
            valid_per_class=valid_per_class,
            test_per_class=test_per_class,
            spread=spread,
            seed=seed,
        )
        generate_synthetic(config, output_dir)
        meta = json.loads((output_dir / 'meta.json').read_text())
        typer.echo(f'wrote {classes} classes to {output_dir}; open: {", ".join(meta["open_labels"])}')
        typer.echo(f'suggested --proportion {meta["suggested_proportion"]:.4f}')


if __name__ == '__main__':
    app()
