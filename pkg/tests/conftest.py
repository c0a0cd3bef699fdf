from __future__ import annotations

import numpy as np
import pytest

from chainlm.engine import VOCAB_SIZE, Model, expected_file_size, generate_model


def build_model(hidden_dim: int = 4, max_context: int = 64, **overrides) -> Model:
    """All-zero-weight model; pass E/A/W/b arrays to override pieces."""
    v, d = VOCAB_SIZE, hidden_dim
    weights = {
        "E": np.zeros((v, d)),
        "A": np.zeros((d, d)),
        "W": np.zeros((v, d)),
        "b": np.zeros(v),
    }
    weights.update(overrides)
    return Model(
        vocab_size=v, hidden_dim=d, max_context=max_context,
        size_bytes=expected_file_size(d, v), **weights,
    )


@pytest.fixture
def one_hot_bias_model() -> Model:
    """Zero weights except b[65] = 1.0: every step greedy-decodes 'A'."""
    b = np.zeros(VOCAB_SIZE)
    b[ord("A")] = 1.0
    return build_model(b=b)


@pytest.fixture
def zero_model() -> Model:
    """All-zero weights: logits tie at 0.0, so greedy picks token 0 (EOS)."""
    return build_model()


@pytest.fixture
def small_random_model() -> Model:
    return generate_model(hidden_dim=4, max_context=64, seed=7)
