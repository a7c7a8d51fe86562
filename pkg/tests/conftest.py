"""Shared fixtures for the w2vj test suite."""

from pathlib import Path
from typing import List, Tuple

import numpy as np
import pytest

from w2vj.core.data import BLANK, ManifestEntry, Vocabulary, generate_synthetic_corpus
from w2vj.core.model import ModelConfig
from w2vj.utils import logging as w2vj_logging


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tone_vocab() -> Vocabulary:
    return Vocabulary([BLANK] + list("abcdefgh"))


@pytest.fixture
def gradcheck_config() -> ModelConfig:
    return ModelConfig.preset("gradcheck", frontend="fbank", encoder="transformer")


@pytest.fixture
def toy_config() -> ModelConfig:
    return ModelConfig.preset("toy", frontend="fbank", encoder="transformer")


@pytest.fixture(scope="session")
def synth_corpus(
    tmp_path_factory: pytest.TempPathFactory,
) -> Tuple[Path, List[ManifestEntry]]:
    """Ten short tone utterances (2-4 tokens) shared by the data-path tests."""
    out = tmp_path_factory.mktemp("synth")
    vocab = Vocabulary([BLANK] + list("abcdefgh"))
    return generate_synthetic_corpus(
        10, vocab, seed=3, out_dir=out, min_tokens=2, max_tokens=4
    )


@pytest.fixture(autouse=True)
def _propagate_logs() -> None:
    """Let caplog see package warnings regardless of earlier CLI runs."""
    import logging

    logging.getLogger("w2vj").propagate = True
    assert w2vj_logging.get_logger("test").name == "w2vj.test"
