"""Shared fixtures: a small rendered dataset and its banks."""

import pytest
import torch

from soundext.bank import build_event_bank, build_noise_bank, default_bank_spec
from soundext.scenes import GeneratorConfig, SceneStore, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_spec():
    return default_bank_spec(clips_per_class=4, seed=21)


@pytest.fixture(scope="session")
def small_banks(small_spec):
    return build_event_bank(small_spec), build_noise_bank(small_spec)


@pytest.fixture(scope="session")
def small_dataset(small_banks, tmp_path_factory):
    """8 train + 4 dev two-event scenes, stems included."""
    bank, noise = small_banks
    root = tmp_path_factory.mktemp("smalldata")
    cfg = GeneratorConfig(n_events=2, master_seed=77)
    generate_dataset(bank, noise, cfg, 8, "train", root)
    generate_dataset(
        bank, noise, GeneratorConfig(n_events=2, master_seed=78), 4, "dev", root
    )
    return {
        "root": root,
        "train": SceneStore(root / "train", cache=True),
        "dev": SceneStore(root / "dev", cache=True),
        "bank": bank,
        "noise": noise,
        "generator": cfg,
    }
