import warnings

import numpy as np
import pytest

from lasskit.audio import AudioClip
from lasskit.corpus import load_manifest
from lasskit.model import ModelConfig
from lasskit.toy import make_multiclass_corpus, make_toy_corpus
from lasskit.training import TrainConfig, train

# Toy experiment used by the acceptance suite and the CLI tests.
TOY_STEPS = 2000
TOY_SEED = 0


@pytest.fixture(autouse=True)
def _quiet_wav_warnings():
    # scipy warns about the float32 WAV chunk layout; irrelevant here
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", module="scipy.io.wavfile")
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def noise_clip(rng, seconds=1.0, sr=8000, scale=0.3):
    return AudioClip(rng.standard_normal(int(seconds * sr)) * scale, sr)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_train")
    return load_manifest(make_toy_corpus(root, 16, 2.0, 8000, seed=0))


@pytest.fixture(scope="session")
def toy_heldout(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_heldout")
    return load_manifest(make_toy_corpus(root, 8, 2.0, 8000, seed=1))


@pytest.fixture(scope="session")
def toy_validation(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_validation")
    return load_manifest(make_toy_corpus(root, 8, 2.0, 8000, seed=3))


@pytest.fixture(scope="session")
def small_toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_small")
    return load_manifest(make_toy_corpus(root, 4, 2.0, 8000, seed=2))


@pytest.fixture(scope="session")
def captioned_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("captioned")
    return load_manifest(make_multiclass_corpus(root, 6, per_class=2, clip_seconds=1.0, varied_lengths=True))


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory, toy_corpus, toy_validation):
    """Desk-scale model trained on the two-class toy corpus (shared, trained once).

    Checkpoint selection uses ``toy_validation``; ``toy_heldout`` stays unseen.
    """
    out = tmp_path_factory.mktemp("toy_run")
    cfg = TrainConfig(max_steps=TOY_STEPS, eval_every=100, seed=TOY_SEED)
    return train(toy_corpus, ModelConfig(), cfg, out, eval_corpus=toy_validation)


def pytest_terminal_summary(terminalreporter):
    from tests.test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
