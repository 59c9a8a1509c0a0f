import numpy as np
import pytest
import torch

from respose.body_model import make_synthetic_model
from respose.dataset import DatasetManifest, SyntheticDataset, generate_dataset
from respose.geometry import CameraIntrinsics


@pytest.fixture(scope="session")
def model():
    return make_synthetic_model(0)


@pytest.fixture(scope="session")
def cam():
    return CameraIntrinsics.default(224)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """16 samples at the canonical resolution, half with 3D labels."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    generate_dataset(DatasetManifest(count=16, seed=5, fraction3d=0.5), str(root))
    return SyntheticDataset(str(root))


@pytest.fixture(scope="session")
def data64(tmp_path_factory):
    """Small 64px dataset for training-loop tests where step cost matters."""
    root = tmp_path_factory.mktemp("small64") / "data"
    generate_dataset(
        DatasetManifest(count=24, seed=6, fraction3d=0.5, canonical_size=64), str(root)
    )
    return SyntheticDataset(str(root))


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    np.random.seed(0)
