import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from oracles import batch_hard_triplet
from visa.etgm import route_logits
from visa.losses import (
    DegenerateBatchError,
    LossBreakdown,
    LossConfig,
    balance_loss,
    id_loss,
    ortho_loss,
    total_loss,
    triplet_loss,
    view_loss,
)
from visa.model import ModelOutput

t64 = lambda x: torch.tensor(x, dtype=torch.float64)  # noqa: E731


def test_id_uniform_logits_give_log_c():
    assert abs(id_loss(torch.zeros(3, 7, dtype=torch.float64), torch.tensor([0, 3, 6])).item() - math.log(7)) < 1e-12


def test_id_worked_example():
    loss = id_loss(t64([[math.log(3), 0.0]]), torch.tensor([0]))
    assert abs(loss.item() - math.log(4 / 3)) < 1e-12


def test_id_confident_logits_approach_zero():
    assert id_loss(t64([[60.0, 0.0, 0.0]]), torch.tensor([0])).item() < 1e-20


def test_id_smoothing_floor():
    eps, c = 0.1, 4
    # optimum under smoothing: target distribution (1 - eps + eps/c, eps/c, ...)
    target = np.full(c, eps / c)
    target[0] += 1 - eps
    logits = torch.from_numpy(np.log(target))[None]
    floor = -(target * np.log(target)).sum()
    assert abs(id_loss(logits, torch.tensor([0]), eps).item() - floor) < 1e-12
    assert id_loss(t64([[50.0, 0, 0, 0]]), torch.tensor([0]), eps).item() > floor


def test_id_label_range_checked():
    with pytest.raises(ValueError):
        id_loss(torch.zeros(1, 3), torch.tensor([3]))


def test_triplet_examples():
    labels = torch.tensor([0, 0, 1, 1])
    # anchor equals its positive; nearest negative at squared distance 1
    f = t64([[0.0], [0.0], [1.0], [1.0]])
    assert triplet_loss(f, labels, 0.3).item() == 0.0
    # positive and negative both at squared distance 1
    f = t64([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert abs(triplet_loss(f, labels, 0.3).item() - 0.3) < 1e-12
    assert abs(triplet_loss(torch.ones(4, 3, dtype=torch.float64), labels, 0.3).item() - 0.3) < 1e-12


def test_triplet_needs_positive_and_negative():
    with pytest.raises(DegenerateBatchError):
        triplet_loss(torch.randn(3, 2), torch.tensor([0, 0, 1]))
    with pytest.raises(DegenerateBatchError):
        triplet_loss(torch.randn(2, 2), torch.tensor([0, 0]))


@given(p=st.integers(2, 4), k=st.integers(2, 4), d=st.integers(1, 5), seed=st.integers(0, 10_000), norm=st.booleans())
def test_triplet_matches_brute_force(p, k, d, seed, norm):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(p * k, d))
    labels = np.repeat(np.arange(p), k)
    rng.shuffle(labels)
    ref_feats = feats / np.linalg.norm(feats, axis=1, keepdims=True) if norm else feats
    ours = triplet_loss(torch.from_numpy(feats), torch.from_numpy(labels), 0.3, normalize=norm).item()
    assert abs(ours - batch_hard_triplet(ref_feats, labels.tolist(), 0.3)) < 1e-9


def test_view_loss_examples():
    assert abs(view_loss(torch.zeros(4, dtype=torch.float64), torch.tensor([0, 1, 1, 0])).item() - math.log(2)) < 1e-12
    assert abs(view_loss(t64([math.log(1 / 3)]), torch.tensor([1])).item() - math.log(4)) < 1e-12
    assert view_loss(t64([40.0, -40.0]), torch.tensor([1, 0])).item() < 1e-15


def test_ortho_examples():
    a = torch.randn(5, 4, dtype=torch.float64)
    assert abs(ortho_loss(a, a).item() - 1) < 1e-12
    assert abs(ortho_loss(a, -a).item() - 1) < 1e-12
    x, y = t64([[1.0, 0.0], [0.0, 2.0]]), t64([[0.0, 3.0], [-1.0, 0.0]])
    assert ortho_loss(x, y).item() == 0.0


@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(0.01, 100))
def test_ortho_range_and_scale_invariance(seed, s1, s2):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(4, 3, generator=g, dtype=torch.float64), torch.randn(4, 3, generator=g, dtype=torch.float64)
    v = ortho_loss(a, b).item()
    assert 0 <= v <= 1
    assert abs(ortho_loss(s1 * a, s2 * b).item() - v) < 1e-9


def _outputs(b=8, d=6, c=4, e=3, seed=0, requires_grad=False):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64).requires_grad_(requires_grad)  # noqa: E731
    return ModelOutput(
        z_inv=r(b, d), z_spe=r(b, d), global_logits=r(b, c), f_local=r(b, d), local_logits=r(b, c),
        view_logits=r(b), routings=(route_logits(r(b, e), 2), route_logits(r(b, e), 2)),
    )


LABELS = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
VIEWS = torch.tensor([0, 1, 0, 1, 0, 1, 0, 1])


@given(st.integers(0, 1_000_000))
def test_total_is_exact_composition(seed):
    out = _outputs(seed=seed)
    lb = total_loss(out, LABELS, VIEWS, LossConfig())
    expected = lb.id_global + lb.tri_global + lb.id_local + lb.tri_local + lb.ortho + lb.view + lb.lam * lb.balance
    assert lb.total.item() == expected.item()
    for name in LossBreakdown.COMPONENTS:
        assert getattr(lb, name).item() >= 0


def test_lambda_zero_ignores_routing():
    a, b = _outputs(seed=1), _outputs(seed=1)
    b.routings = tuple(route_logits(torch.zeros(8, 3, dtype=torch.float64), 1) for _ in range(2))
    cfg = LossConfig(lambda_balance=0.0)
    assert total_loss(a, LABELS, VIEWS, cfg).total.item() == total_loss(b, LABELS, VIEWS, cfg).total.item()


def test_default_lambda():
    assert LossConfig().lambda_balance == 0.001


def test_balance_is_mean_over_banks():
    r1 = route_logits(torch.zeros(4, 3), 1)
    collapsed = torch.full((4, 3), -1e4)
    collapsed[:, 0] = 0
    r2 = route_logits(collapsed, 1)
    assert abs(balance_loss([r1, r2]).item() - 2.0) < 1e-6


def test_total_gradient_is_sum_of_component_gradients():
    out = _outputs(requires_grad=True, seed=5)
    leaves = [out.z_inv, out.z_spe, out.global_logits, out.f_local, out.local_logits, out.view_logits]
    lb = total_loss(out, LABELS, VIEWS, LossConfig(lambda_balance=0.5))
    total_grads = torch.autograd.grad(lb.total, leaves, retain_graph=True, allow_unused=True)
    sums = [torch.zeros_like(x) for x in leaves]
    for name in ("id_global", "tri_global", "id_local", "tri_local", "view", "ortho"):
        gs = torch.autograd.grad(getattr(lb, name), leaves, retain_graph=True, allow_unused=True)
        for acc, g in zip(sums, gs):
            if g is not None:
                acc += g
    for t, s in zip(total_grads, sums):
        assert torch.allclose(t if t is not None else torch.zeros_like(s), s, atol=1e-9, rtol=0)


def test_ablated_heads_contribute_zero():
    out = _outputs()
    out.f_local = out.local_logits = out.view_logits = None
    out.routings = ()
    lb = total_loss(out, LABELS, VIEWS, LossConfig())
    assert lb.id_local.item() == lb.tri_local.item() == lb.view.item() == lb.ortho.item() == lb.balance.item() == 0
    assert lb.total.item() == (lb.id_global + lb.tri_global).item()


def test_query_ortho_option_adds_a_term():
    out = _outputs()
    from visa.etgm import QuerySet

    out.queries = QuerySet(torch.randn(8, 2, 6, dtype=torch.float64), torch.randn(8, 2, 6, dtype=torch.float64))
    base = total_loss(out, LABELS, VIEWS, LossConfig()).ortho.item()
    more = total_loss(out, LABELS, VIEWS, LossConfig(ortho_targets="global+queries")).ortho.item()
    assert more > base
    with pytest.raises(ValueError):
        LossConfig(ortho_targets="nope")


def test_as_floats_keys():
    d = total_loss(_outputs(), LABELS, VIEWS, LossConfig()).as_floats()
    assert set(d) == set(LossBreakdown.COMPONENTS) | {"total", "lambda"}
