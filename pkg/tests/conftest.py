import numpy as np
import pytest
import torch

from twobranch.artifacts import calibrate_pipeline
from twobranch.data import SynthConfig, Split, generate_synthetic
from twobranch.networks import ArchSpec, TrainHParams, init_networks, train

torch.set_num_threads(1)


def mini_synth_config(seed: int = 101) -> SynthConfig:
    return SynthConfig(
        image_size=(32, 32),
        object_count_range=(2, 2),
        disc_radius=4,
        defect_radius=2,
        train_count=32,
        validation_count=8,
        test_normal_count=8,
        test_structural_count=6,
        test_logical_count=6,
        seed=seed,
    )


@pytest.fixture(scope="session")
def mini_bundle():
    return generate_synthetic(mini_synth_config())


@pytest.fixture(scope="session")
def mini_pipeline(mini_bundle):
    """Small trained pipeline shared by evaluation-level tests."""
    arch = ArchSpec.for_size("S", h_in=32, w_in=32, c_in=1)
    nets = init_networks(arch, seed=11)
    hparams = TrainHParams(steps=250, learning_rate=1e-2, batch_size=8, seed=11)
    train(nets, mini_bundle.split(Split.TRAIN), hparams)
    artifact = calibrate_pipeline(nets, mini_bundle)
    return nets, artifact, mini_bundle


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
