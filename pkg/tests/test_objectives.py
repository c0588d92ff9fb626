import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from retina_wsss.errors import ConfigError
from retina_wsss.objectives import LossWeights, classify, gmp, loss_binary, loss_multilabel, total_loss

f64 = torch.float64


def test_gmp_examples():
    assert gmp(torch.tensor([[[1.0, 5.0], [3.0, 2.0]]])).tolist() == [5.0]
    assert gmp(torch.full((1, 3, 3), 0.7)).tolist() == [pytest.approx(0.7)]
    two = torch.tensor([[[1.0, 2.0], [3.0, 0.0]], [[-1.0, -4.0], [-2.0, -3.0]]])
    assert gmp(two).tolist() == [3.0, -1.0]


def test_gmp_gradient_goes_to_first_argmax():
    x = torch.tensor([[[2.0, 1.0], [2.0, 2.0]]], requires_grad=True)
    gmp(x).sum().backward()
    assert x.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_classify_hand():
    f = torch.tensor([[[[1.0, 0.0]], [[2.0, 3.0]]]])  # C=2, H=1, W=2 -> GMP (1, 3)
    w = torch.tensor([[1.0, 1.0], [2.0, -1.0]])  # (K, C)
    assert classify(f, w).tolist() == [[4.0, -1.0]]
    assert torch.all(classify(f, torch.zeros(2, 2)) == 0)


def test_classify_spatial_permutation_invariant():
    f = torch.randn(2, 3, 4, 4)
    w = torch.randn(5, 3)
    perm = torch.randperm(16)
    shuffled = f.flatten(2)[..., perm].reshape(f.shape)
    assert torch.equal(classify(f, w), classify(shuffled, w))


@pytest.mark.parametrize("y", [(1, 0, 0), (0, 1, 1), (1, 1, 1)])
def test_multilabel_ln2_at_zero_logits(y):
    assert loss_multilabel(torch.zeros(1, 3, dtype=f64), torch.tensor([y])).item() == pytest.approx(math.log(2),
                                                                                                   abs=1e-15)


def test_multilabel_saturation():
    per_term = loss_multilabel(torch.tensor([[20.0]], dtype=f64), torch.tensor([[1.0]])).item()
    assert 0 <= per_term <= 1e-8
    assert math.isfinite(loss_multilabel(torch.tensor([[1e4, -1e4]]), torch.tensor([[0.0, 1.0]])).item())


def test_multilabel_monotone():
    y = torch.tensor([[1.0, 0.0]])
    vals = [loss_multilabel(torch.tensor([[t, 0.3]], dtype=f64), y).item() for t in (-3, -1, 0, 1, 3)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_binary_examples():
    assert loss_binary(torch.zeros(1, 2, dtype=f64), torch.tensor([[0.0, 1.0]])).item() == pytest.approx(math.log(2))
    assert loss_binary(torch.tensor([[20.0, 0.0]], dtype=f64), torch.tensor([[1.0, 0.0]])).item() <= 1e-8
    logits = torch.tensor([[0.3, -1.2]], dtype=f64)
    assert loss_binary(logits, torch.tensor([[1.0, 0.0]])).item() == pytest.approx(
        loss_binary(logits.flip(-1), torch.tensor([[0.0, 1.0]])).item(), abs=1e-15)


@settings(max_examples=100)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.lists(st.booleans(), min_size=3, max_size=3))
def test_losses_nonnegative_finite(logits, bits):
    z = torch.tensor([logits], dtype=f64)
    y = torch.tensor([[float(b) for b in bits]])
    v = loss_multilabel(z, y).item()
    assert v >= 0 and math.isfinite(v)
    v = loss_binary(z[:, :2], torch.tensor([[1.0, 0.0]])).item()
    assert v >= 0 and math.isfinite(v)


def _outputs(seed=0):
    g = torch.Generator().manual_seed(seed)
    return {k: torch.randn(2, 2 if k == "y2" else 3, generator=g, dtype=f64) for k in ("y1", "y2", "y3", "y4")}


Y = torch.tensor([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
YB = torch.tensor([[0.0, 1.0], [1.0, 0.0]])


def test_single_term_ablation_is_exact():
    total, terms = total_loss(_outputs(), Y, YB, LossWeights(1, 0, 0, 0))
    assert total.item() == terms["L1"].double().item()


def test_half_weights():
    total, terms = total_loss(_outputs(), Y, YB, LossWeights(0.5, 0.5, 0.5, 0.5))
    assert total.item() == pytest.approx(0.5 * sum(t.item() for t in terms.values()), rel=1e-15)


def test_one_pixel_hand_instance():
    out = {"y1": torch.zeros(1, 3, dtype=f64), "y2": torch.zeros(1, 2, dtype=f64),
           "y3": torch.zeros(1, 3, dtype=f64), "y4": torch.zeros(1, 3, dtype=f64)}
    total, _ = total_loss(out, Y[:1], YB[:1], LossWeights())
    assert total.item() == pytest.approx(4 * math.log(2), abs=1e-14)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 5), min_size=4, max_size=4).filter(any),
       st.lists(st.floats(0, 5), min_size=4, max_size=4).filter(any))
def test_total_linear_in_weights(a, b):
    out = _outputs(1)
    ta, terms = total_loss(out, Y, YB, LossWeights(*a))
    tb, _ = total_loss(out, Y, YB, LossWeights(*b))
    tab, _ = total_loss(out, Y, YB, LossWeights(*(x + y for x, y in zip(a, b))))
    assert abs(tab.item() - (ta.item() + tb.item())) <= 1e-10 * max(1.0, abs(tab.item()))


def test_weight_validation():
    with pytest.raises(ConfigError):
        LossWeights(0, 0, 0, 0)
    with pytest.raises(ConfigError):
        LossWeights(1, -1, 0, 0)
    assert LossWeights.of({"l1": 2}).as_tuple() == (2.0, 1.0, 1.0, 1.0)
