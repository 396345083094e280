"""Shared fixtures: the synthetic toy corpus and the two trained toy models.

The toy training runs are the expensive fixtures (minutes each); they are
session-scoped and shared between the overfit acceptance checks, the CLI
extraction check, and the avatar stability smoke test.
"""

import numpy as np
import pytest

from avatr.audio import synth_corpus_generate
from avatr.models import ModelConfig
from avatr.training import TrainConfig, run_training

TOY_RATE = 8000
TOY_CORPUS_SEED = 11
TOY_CLIP_SECONDS = 0.5


def toy_model_config(variant):
    """The pinned toy architecture: d=32, H=4; V1 uses L=2, V2 uses E=2/K=2."""
    return ModelConfig(
        variant=variant, hidden=32, blocks=2, enc_blocks=2, cond_blocks=2, heads=4,
        kernel=16, stride=8, dropout=0.0, emb_kernel=64, emb_stride=32,
        sample_rate=TOY_RATE)


def toy_train_config(max_epochs, seed=5):
    return TrainConfig(
        lr=3e-3, batch_size=8, max_epochs=max_epochs, batches_per_epoch=6,
        plateau_patience=15, val_episodes=12, clip_seconds=TOY_CLIP_SECONDS,
        ref_seconds=TOY_CLIP_SECONDS, mixture_type="s+s", seed=seed)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_corpus")
    return synth_corpus_generate(root, n_speakers=4, clips_per_speaker=5,
                                 seed=TOY_CORPUS_SEED, sample_rate=TOY_RATE,
                                 regime="closed")


@pytest.fixture(scope="session")
def toy_v1_result(toy_corpus):
    return run_training(toy_corpus.manifest, toy_model_config("v1"),
                        toy_train_config(max_epochs=60))


@pytest.fixture(scope="session")
def toy_v2_result(toy_corpus):
    return run_training(toy_corpus.manifest, toy_model_config("v2"),
                        toy_train_config(max_epochs=30))


@pytest.fixture(scope="session")
def toy_v1_checkpoint(toy_v1_result, tmp_path_factory):
    from avatr.models import write_checkpoint

    path = tmp_path_factory.mktemp("ckpt") / "toy_v1.avtr"
    write_checkpoint(toy_v1_result.model, path)
    return path


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
