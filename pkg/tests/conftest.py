from pathlib import Path

import pytest
import torch

from backbone import ModelConfig, init_params
from config import Config, load_run_config
from dataio import DatasetHandle, load_dataset, load_from_config
from evaluator import evaluate_clean
from pyramid_attack import ImageBatch
from trainer import TrainConfig, train_loop

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SHAPES_MODEL = ModelConfig(
    image_size=32, patch_size=4, embed_dim=32, depth=2, n_heads=2, mlp_dim=64,
    n_classes=2, dropout_p=0.0, stochdepth_p=0.0,
)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow trend tests")
    parser.addoption("--rundesk", action="store_true", default=False,
                     help="run desk-scale CIFAR-10 trend tests (hours on CPU)")


def pytest_collection_modifyitems(config, items):
    skip_slow = pytest.mark.skip(reason="slow: pass --runslow to run")
    skip_desk = pytest.mark.skip(reason="desk-scale: pass --rundesk to run")
    for item in items:
        if "desk" in item.keywords and not config.getoption("--rundesk"):
            item.add_marker(skip_desk)
        elif "slow" in item.keywords and not config.getoption("--runslow"):
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    return ModelConfig(
        image_size=8, patch_size=4, embed_dim=16, depth=2, n_heads=2, mlp_dim=32,
        n_classes=3, dropout_p=0.0, stochdepth_p=0.0,
    )


@pytest.fixture
def tiny_model(tiny_config):
    return init_params(tiny_config, seed=0)


@pytest.fixture
def make_batch():
    def _make(n=4, channels=3, size=8, n_classes=3, seed=0, dtype=torch.float32):
        gen = torch.Generator().manual_seed(seed)
        pixels = torch.rand((n, channels, size, size), generator=gen, dtype=torch.float64).to(dtype)
        labels = torch.randint(0, n_classes, (n,), generator=gen)
        return ImageBatch(pixels, labels)
    return _make


@pytest.fixture
def make_handle():
    """In-memory DatasetHandle of random uint8 images"""
    def _make(n_train=8, n_eval=8, size=8, n_classes=3, seed=0):
        gen = torch.Generator().manual_seed(seed)
        def images(n):
            return torch.randint(0, 256, (n, 3, size, size), generator=gen, dtype=torch.uint8)
        return DatasetHandle(
            name="random",
            n_classes=n_classes,
            train_images=images(n_train),
            train_labels=torch.arange(n_train) % n_classes,
            eval_images=images(n_eval),
            eval_labels=torch.arange(n_eval) % n_classes,
            source="test",
        )
    return _make


@pytest.fixture(scope="session")
def shapes_dataset():
    return load_dataset("synthetic_shapes", n=128, seed=7, image_size=32)


@pytest.fixture(scope="session")
def fitted_shapes(tmp_path_factory):
    """
    Baseline tiny ViTs fit to a 128-image synthetic-shapes train split, one per seed.

    Each seed retrains with a longer schedule until the train split reaches 99%.
    """
    handle = load_dataset("synthetic_shapes", n=160, seed=11, eval_fraction=0.2)
    models = {}

    def _fit(seed):
        if seed not in models:
            for total_steps in (1500, 4000):
                config = TrainConfig(regime="baseline", weight_decay=0.0, warmup_steps=50, total_steps=total_steps,
                                     batch_size=32, seed=seed, checkpoint_every=total_steps)
                out = tmp_path_factory.mktemp(f"shapes-seed{seed}-{total_steps}")
                model = train_loop(config, SHAPES_MODEL, handle, out).model
                if evaluate_clean(model, handle, split="train") >= 0.99:
                    break
            models[seed] = model
        return models[seed]

    return handle, _fit


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """
    Desk-scale CIFAR-10 models from configs/base.yaml, trained on first use and
    cached by (regime, drop_mode, seed).
    """
    root = Config.data_root()
    if not (root / Config.CIFAR10_DIRNAME).is_dir():
        pytest.skip(f"CIFAR-10 not found under {root}")
    base = load_run_config(CONFIGS / "base.yaml", overrides=["eval.batch_size=512"])
    handle = load_from_config(base.dataset)
    models = {}

    def _train(regime, seed, drop_mode="matched"):
        key = (regime, drop_mode, seed)
        if key not in models:
            rc = load_run_config(
                CONFIGS / "base.yaml", seed=seed,
                overrides=[f"trainer.regime={regime}", f"trainer.drop_mode={drop_mode}"],
            )
            out = tmp_path_factory.mktemp(f"desk-{regime}-{drop_mode}-{seed}")
            models[key] = train_loop(
                TrainConfig.from_run_config(rc), rc.model.to_model_config(), handle, out
            ).model
        return models[key]

    return handle, base, _train
