import json
from pathlib import Path

import numpy as np
import pytest

from amflow.model import DiTModel, ModelConfig, load_checkpoint, save_checkpoint
from amflow.synth import eps_mse, gen_dataset, train_toy_dit

# One trained toy model backs every model-dependent test. Training takes
# ~10 min, so the checkpoint is cached on disk keyed by the full recipe;
# delete tests/_model_cache to force a retrain.
TRAIN_RECIPE = {
    "dataset_count": 2048,
    "dataset_seed": 0,
    "epochs": 3,
    "lr": 3e-4,
    "batch_size": 8,
    "train_seed": 0,
    "recipe": "qkcalib-wd03-static3",  # calibrated QK init, weight decay, static share
}

CACHE_ROOT = Path(__file__).parent / "_model_cache"


def _cache_dir():
    cfg = ModelConfig()
    key = f"{cfg.config_hash()}-" + "-".join(str(v) for _, v in sorted(TRAIN_RECIPE.items()))
    return CACHE_ROOT / key


@pytest.fixture(scope="session")
def trained_model():
    cache = _cache_dir()
    if (cache / "checkpoint" / "manifest.json").exists():
        return load_checkpoint(cache / "checkpoint")
    cfg = ModelConfig()
    clips = gen_dataset(TRAIN_RECIPE["dataset_count"], TRAIN_RECIPE["dataset_seed"], cfg)
    untrained = eps_mse(DiTModel.init_random(cfg, seed=TRAIN_RECIPE["train_seed"]), clips[:64])
    model, history = train_toy_dit(
        clips, cfg,
        epochs=TRAIN_RECIPE["epochs"],
        lr=TRAIN_RECIPE["lr"],
        batch_size=TRAIN_RECIPE["batch_size"],
        seed=TRAIN_RECIPE["train_seed"],
    )
    cache.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, cache / "checkpoint")
    (cache / "history.json").write_text(json.dumps(
        {"untrained_mse": untrained, "history": history}, indent=2))
    return model


@pytest.fixture(scope="session")
def training_history(trained_model):
    # trained_model guarantees the cache exists
    return json.loads((_cache_dir() / "history.json").read_text())


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig()
