import numpy as np
import pytest
import torch

from cacdn.core_types import Split, TileSample


def make_sample(p=32, seed=0, split=Split.TRAIN, sample_id=None, with_mask=True):
    rng = np.random.default_rng(seed)
    grid = lambda c: rng.random((c, p, p)).astype(np.float32)
    mask = (rng.random((p, p)) < 0.2).astype(np.uint8) if with_mask else None
    return TileSample(id=sample_id or f"t{seed}", p=p, s1_pre=grid(2), s1_post=grid(2), s2_pre=grid(4),
                      dem=grid(4), mask=mask, split=split)


@pytest.fixture
def sample():
    return make_sample()


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
