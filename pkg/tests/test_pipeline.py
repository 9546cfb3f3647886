import json
from dataclasses import replace

import pytest
import torch

from openintent.config import RunConfig, Stage1Config, Stage2Config
from openintent.errors import CheckpointError, ConfigError
from openintent.model import ClassifierHead, EncoderModel
from openintent.pipeline import (
    ENCODER_FILE,
    REPORT_FILE,
    VOCAB_FILE,
    evaluate_stage,
    load_head,
    prepare_data,
    save_head,
    train_boundary_stage,
    train_encoder_stage,
)
from openintent.types import Split


@pytest.fixture
def run_config(synthetic_dir) -> RunConfig:
    return RunConfig(
        dataset_dir=str(synthetic_dir),
        proportion=0.75,
        stage1=Stage1Config(epochs=2, batch_size=16, token_dim=8, hidden_size=16, num_positives=2),
        stage2=Stage2Config(epochs=3, batch_size=16),
    )


def test_prepare_data_keeps_designated_open_classes(run_config, synthetic_dir, tmp_path):
    meta = json.loads((synthetic_dir / 'meta.json').read_text())

    for split_seed in (0, 5):
        prepared = prepare_data(replace(run_config, split_seed=split_seed), tmp_path / f'split_{split_seed}')
        assert set(prepared.known_labels) == set(meta['known_labels'])
        test_labels = {instance.label_id for instance in prepared.instances[Split.test]}
        assert test_labels == set(range(prepared.num_known + 1))


def test_prepare_data_rejects_mismatched_artifacts(run_config, tmp_path):
    run_dir = tmp_path / 'run'
    prepared = prepare_data(run_config, run_dir)
    assert prepare_data(run_config, run_dir).known_labels == prepared.known_labels

    with pytest.raises(ConfigError, match='fresh output directory'):
        prepare_data(replace(run_config, proportion=0.5), run_dir)

    tokens = json.loads((run_dir / VOCAB_FILE).read_text(encoding='utf-8'))['tokens']
    (run_dir / VOCAB_FILE).write_text(json.dumps({'tokens': tokens[:-1]}), encoding='utf-8')
    with pytest.raises(ConfigError, match='min_freq'):
        prepare_data(run_config, run_dir)


def test_load_head(tmp_path):
    head = ClassifierHead(hidden_size=3, num_known=2)
    save_head(head, tmp_path / 'head.json')

    loaded = load_head(tmp_path / 'head.json')
    assert torch.allclose(loaded.weight, head.weight)
    assert torch.allclose(loaded.bias, head.bias)

    with pytest.raises(CheckpointError, match='not found'):
        load_head(tmp_path / 'missing.json')
    for content in ('{"weight": [[1.0, 2.0]]', '{"weight": [[1.0, 2.0]]}', '{"weight": [1.0], "bias": [0.0]}'):
        (tmp_path / 'head.json').write_text(content)
        with pytest.raises(CheckpointError, match='classifier head'):
            load_head(tmp_path / 'head.json')


def test_evaluation_survives_undefined_embeddings(run_config, tmp_path):
    run_dir = tmp_path / 'run'
    train_encoder_stage(run_config, run_dir, show_progress=False)
    train_boundary_stage(run_config, run_dir, show_progress=False)

    # a zeroed encoder maps every test instance to a zero pre-norm vector
    encoder = EncoderModel.load(run_dir / ENCODER_FILE)
    with torch.no_grad():
        encoder.token_embeddings.zero_()
        encoder.projection.bias.zero_()
    encoder.save(run_dir / ENCODER_FILE)

    report = evaluate_stage(run_config, run_dir)

    document = json.loads((run_dir / REPORT_FILE).read_text())
    num_test = sum(report.support)
    assert document['undefined_embeddings'] == num_test
    # everything is predicted open, so only the open instances are right
    assert report.accuracy == pytest.approx(report.support[-1] / num_test)
