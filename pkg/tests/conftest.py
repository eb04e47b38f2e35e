import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bnrobust.data import load_dataset  # noqa: E402
from bnrobust.nn import build_resnet  # noqa: E402
from bnrobust.training import TrainConfig, make_freeze_mask, train  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def micro_net(**kw):
    base = dict(depth_n=1, widths=[4, 8, 16], num_classes=10, in_channels=3, seed=0)
    base.update(kw)
    return build_resnet(**base)


@pytest.fixture(scope="session")
def blobs():
    """Two 8x8 single-channel classes separated by 0.5 in L-inf (robust classifier exists for eps < 0.25)."""
    return load_dataset("blobs", seed=0, n_train=256, n_test=128, num_classes=2, image_size=8, margin=0.5)


@pytest.fixture(scope="session")
def trained_blob_net(blobs):
    """A small normally trained net on the blob data, shared by read-only tests."""
    train_split, _ = blobs
    model = build_resnet(depth_n=1, widths=[4, 4, 8], num_classes=2, in_channels=1, seed=0)
    cfg = TrainConfig(epochs=6, batch_size=32, lr_schedule=[(0, 0.05)], augment=False, seed=0)
    train(model, train_split, make_freeze_mask(model, "normal"), cfg)
    model.eval()
    return model
