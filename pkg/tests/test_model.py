import pytest
import torch

from _support import gradient_check
from retina_wsss.encoder import EncoderConfig
from retina_wsss.errors import DimensionError
from retina_wsss.model import DualBranchNet, ModelConfig


def _net():
    cfg = ModelConfig(encoder=EncoderConfig.preset("tiny"), clip_dim=6, desc_dim=5)
    return DualBranchNet(cfg, torch.Generator().manual_seed(0))


def test_output_shapes():
    out = _net()(torch.rand(2, 32, 32), torch.rand(2, 32, 32), torch.rand(2, 5), torch.rand(3, 6))
    assert out["y1"].shape == (2, 3) and out["y2"].shape == (2, 2)
    assert out["sim3"].shape == (2, 3, 2, 2) and out["sim4"].shape == (2, 3, 1, 1)
    assert out["f4_plus"].shape == out["primary"][3].shape


def test_mismatched_branch_inputs():
    with pytest.raises(DimensionError):
        _net()(torch.rand(1, 32, 32), torch.rand(1, 64, 32), torch.rand(1, 5), torch.rand(3, 6))


def test_full_model_gradient_check():
    errors = gradient_check(preset="tiny", size=32, per_tensor=1)
    assert max(errors.values()) < 1e-4, errors
