import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from retina_wsss import checkpoint
from retina_wsss.encoder import EncoderConfig, MiTEncoder, freeze, init_weights
from retina_wsss.errors import CheckpointError, ConfigError, DimensionError
from retina_wsss.model import DualBranchNet, ModelConfig


def _encoder(seed=0, **overrides):
    enc = MiTEncoder(EncoderConfig.preset("toy", **overrides))
    init_weights(enc, torch.Generator().manual_seed(seed))
    return enc


def test_toy_pyramid_shapes():
    feats = _encoder()(torch.rand(2, 3, 64, 64))
    assert [tuple(f.shape) for f in feats] == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4), (2, 128, 2, 2)]


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3))
def test_shape_contract(mh, mw):
    h, w = 32 * mh, 32 * mw
    cfg = EncoderConfig.preset("tiny")
    feats = MiTEncoder(cfg)(torch.rand(1, 3, h, w))
    for s, f in enumerate(feats, start=1):
        assert tuple(f.shape[1:]) == cfg.stage_shape(s, h, w)


def test_zero_depth_stage():
    feats = _encoder(depths=(0, 1, 0, 1))(torch.rand(1, 3, 64, 64))
    assert tuple(feats[2].shape) == (1, 64, 4, 4)


def test_indivisible_input():
    with pytest.raises(DimensionError):
        _encoder()(torch.rand(1, 3, 48, 64))


def test_deterministic():
    x = torch.rand(1, 3, 64, 64)
    a, b = _encoder(3)(x), _encoder(3)(x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_injection_replaces_stage_output():
    enc = _encoder()
    x = torch.rand(1, 3, 64, 64)
    base = enc(x)
    replaced = torch.zeros_like(base[1])
    feats = enc(x, injected={2: replaced})
    assert torch.equal(feats[1], replaced)
    assert torch.equal(feats[0], base[0])
    assert not torch.equal(feats[2], base[2])
    with pytest.raises(DimensionError):
        enc(x, injected={2: torch.zeros(1, 1, 1, 1)})


def test_bad_config():
    with pytest.raises(ConfigError):
        EncoderConfig(channels=(16, 32, 64, 130), heads=(1, 2, 4, 4))
    with pytest.raises(ConfigError):
        EncoderConfig.preset("nope")
    with pytest.raises(ConfigError):
        freeze(_encoder(), ["5"])


def _trainable_names(enc):
    return {n for n, p in enc.named_parameters() if p.requires_grad}


def test_freeze_groups():
    enc = _encoder()
    freeze(enc, [])
    assert _trainable_names(enc) == {n for n, _ in enc.named_parameters()}
    freeze(enc, ["proj", "1", "2", "3", "4"])
    assert _trainable_names(enc) == set()
    freeze(enc, ["proj"])
    assert all(not n.startswith("stages.0.patch.") for n in _trainable_names(enc))
    assert any(n.startswith("stages.0.blocks.") for n in _trainable_names(enc))


def test_frozen_tensors_survive_optimizer_steps():
    enc = _encoder()
    freeze(enc, ["proj", "1", "2"])
    before = {n: p.detach().clone() for n, p in enc.named_parameters()}
    opt = torch.optim.Adam([p for p in enc.parameters() if p.requires_grad], lr=1e-2)
    gen = torch.Generator().manual_seed(0)
    for _ in range(10):
        opt.zero_grad()
        sum(f.square().mean() for f in enc(torch.rand(2, 3, 64, 64, generator=gen))).backward()
        opt.step()
    for n, p in enc.named_parameters():
        stage = int(n.split(".")[1]) + 1
        if stage <= 2:
            assert torch.equal(p, before[n]), n
    changed = [n for n, p in enc.named_parameters() if int(n.split(".")[1]) >= 2 and not torch.equal(p, before[n])]
    assert changed


def _net(seed=0, **kw):
    cfg = ModelConfig(encoder=EncoderConfig.preset("tiny"), clip_dim=6, desc_dim=5, **kw)
    return DualBranchNet(cfg, torch.Generator().manual_seed(seed))


def test_checkpoint_round_trip_with_optimizer(tmp_path):
    net = _net()
    opt = torch.optim.Adam([p for p in net.parameters() if p.requires_grad], lr=1e-3)
    out = net(torch.rand(2, 32, 32), torch.rand(2, 32, 32), torch.rand(2, 5), torch.rand(3, 6))
    out["y1"].sum().backward()
    opt.step()
    net.primary.stages[0].patch.proj.weight.requires_grad_(False)
    path = checkpoint.save(checkpoint.from_module(net, opt, {"epoch": 1}), tmp_path / "m.ckpt")
    ckpt = checkpoint.load(path)
    assert ckpt.meta == {"epoch": 1}

    other = _net(seed=9)
    other_opt = torch.optim.Adam([p for p in other.parameters() if p.requires_grad], lr=1e-3)
    report = checkpoint.load_into(other, ckpt, other_opt)
    assert not report["partial"]
    for (n, p), (_, q) in zip(net.state_dict().items(), other.state_dict().items()):
        assert p.numpy().tobytes() == q.numpy().tobytes(), n
    assert not other.primary.stages[0].patch.proj.weight.requires_grad
    src = dict(net.named_parameters())
    restored = [n for n, p in other.named_parameters() if p in other_opt.state]
    assert restored
    for n in restored:
        p = dict(other.named_parameters())[n]
        assert torch.equal(other_opt.state[p]["exp_avg"], opt.state[src[n]]["exp_avg"])


def test_scalar_tensor_keeps_shape(tmp_path):
    path = checkpoint.save(checkpoint.Checkpoint({"r": np.float32(2.0) * np.ones(())}), tmp_path / "s.ckpt")
    assert checkpoint.load(path).tensors["r"].shape == ()


def test_corrupt_payload_names_tensor(tmp_path):
    path = checkpoint.save(checkpoint.Checkpoint({"a": np.zeros(4, np.float32), "b": np.ones(4, np.float32)}),
                           tmp_path / "c.ckpt")
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="'b'"):
        checkpoint.load(path)


def test_truncated_and_bad_magic(tmp_path):
    path = checkpoint.save(checkpoint.Checkpoint({"a": np.zeros(8, np.float32)}), tmp_path / "t.ckpt")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="'a'"):
        checkpoint.load(path)
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.load(tmp_path / "x.ckpt")


def test_mismatched_config_is_shape_error():
    ckpt = checkpoint.from_module(_net())
    wide_enc = EncoderConfig.preset("tiny", channels=(8, 16, 32, 64))
    wide = DualBranchNet(ModelConfig(encoder=wide_enc, clip_dim=6, desc_dim=5))
    with pytest.raises(DimensionError):
        checkpoint.load_into(wide, ckpt)


def test_partial_load_encoders_only():
    src, dst = _net(seed=1), _net(seed=2)
    fresh_head = dst.head_primary.weight.detach().clone()
    report = checkpoint.load_into(dst, checkpoint.from_module(src), prefixes=("primary.", "structural."))
    assert report["partial"]
    assert "head_primary.weight" in report["fresh"]
    assert torch.equal(dst.head_primary.weight, fresh_head)
    assert torch.equal(dst.primary.stages[3].norm.weight, src.primary.stages[3].norm.weight)
    assert torch.equal(dst.structural.stages[1].patch.proj.weight, src.structural.stages[1].patch.proj.weight)
