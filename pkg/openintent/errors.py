from __future__ import annotations

from typing import Any


class OpenIntentError(Exception):
    code: str = 'openintent_error'

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        return {'error': self.code, 'message': self.message, **self.details}


class CorpusError(OpenIntentError):
    code = 'corpus_error'


class ConfigError(OpenIntentError):
    code = 'config_error'


class EmbeddingError(OpenIntentError):
    code = 'embedding_error'


class SamplingError(OpenIntentError):
    code = 'sampling_error'


class DivergenceError(OpenIntentError):
    code = 'divergence'

    def __init__(self, message: str, step: int, **details: Any) -> None:
        super().__init__(message, step=step, **details)
        self.step = step


class CheckpointError(OpenIntentError):
    code = 'checkpoint_error'
