import numpy as np
import pytest
import torch

from helpers import make_clip

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_clip():
    return make_clip(frames=7, size=64, seed=0)


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory, toy_clip):
    """A briefly trained toy checkpoint shared by coding/protocol/CLI tests."""
    from sttvc.config import TrainConfig, toy_config
    from sttvc.training import train_loop

    cfg = TrainConfig(lam=512.0, batch_size=1, crop=64, warmup_epochs=10,
                      total_steps=120, seed=1, clip_frames=3)
    result = train_loop([toy_clip], toy_config(), cfg, out_path=None)
    path = tmp_path_factory.mktemp("ckpt") / "toy.pt"
    torch.save(result.checkpoint, path)
    return {"model": result.model, "path": path, "lambda": 512.0,
            "checkpoint": result.checkpoint, "history": result.history}


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
