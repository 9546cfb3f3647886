from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from openintent.config import SyntheticConfig
from openintent.data import META_FILE
from openintent.types import PathType, Split
from openintent.utils import make_rng, round_half_up


def _unit_rows(array: np.ndarray) -> np.ndarray:
    return array / np.linalg.norm(array, axis=-1, keepdims=True)


def class_label(class_id: int) -> str:
    return f'intent_{class_id:02d}'


def generate_synthetic(config: SyntheticConfig, output_dir: PathType) -> Path:
    """Write a token-level stand-in for an intent corpus.

    Classes are clusters on the unit sphere of a latent space. A sentence draws a latent point near its
    class center and samples tokens whose latent vectors align with that point; `noise_rate` of the
    tokens are drawn uniformly instead. A random `open_fraction` of the classes is listed as open in
    meta.json; preparing a run with the matching proportion keeps exactly those classes unseen.
    """
    rng = make_rng(config.seed, 'synthetic')
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    centers = _unit_rows(rng.standard_normal((config.num_classes, config.latent_dim)))
    token_vectors = _unit_rows(rng.standard_normal((config.vocab_size, config.latent_dim)))
    tokens = [f'w{j:03d}' for j in range(config.vocab_size)]
    labels = [class_label(k) for k in range(config.num_classes)]

    num_open = round_half_up(config.open_fraction * config.num_classes)
    open_ids = sorted(int(k) for k in rng.choice(config.num_classes, size=num_open, replace=False))

    counts = {Split.train: config.train_per_class, Split.valid: config.valid_per_class, Split.test: config.test_per_class}
    noise_scale = config.spread / np.sqrt(config.latent_dim)
    for split, per_class in counts.items():
        lines = []
        for class_id, center in enumerate(centers):
            for _ in range(per_class):
                point = _unit_rows(center + noise_scale * rng.standard_normal(config.latent_dim))
                logits = token_vectors @ point / config.token_temperature
                probabilities = np.exp(logits - logits.max())
                probabilities /= probabilities.sum()
                length = int(rng.integers(config.min_length, config.max_length + 1))
                words = rng.choice(config.vocab_size, size=length, p=probabilities)
                noisy = rng.random(length) < config.noise_rate
                words[noisy] = rng.integers(0, config.vocab_size, size=int(noisy.sum()))
                lines.append(f'{" ".join(tokens[w] for w in words)}\t{labels[class_id]}')
        order = rng.permutation(len(lines))
        (output_dir / f'{split.value}.tsv').write_text(''.join(lines[i] + '\n' for i in order), encoding='utf-8')

    meta = {
        'num_classes': config.num_classes,
        'open_labels': [labels[k] for k in open_ids],
        'known_labels': [labels[k] for k in range(config.num_classes) if k not in open_ids],
        'suggested_proportion': (config.num_classes - num_open) / config.num_classes,
        'config': {key: getattr(config, key) for key in config.__dataclass_fields__},
    }
    (output_dir / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + '\n')
    return output_dir
