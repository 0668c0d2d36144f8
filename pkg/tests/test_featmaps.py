import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dualform import featmaps as fm
from dualform.errors import (
    CausalityError,
    ConfigurationError,
    DimensionError,
    InvalidInputError,
    InvalidParameterError,
    SpanExceededError,
)

from oracles import psi_scalar

finite = st.floats(-50, 50, allow_nan=False)


def test_psi_examples():
    assert torch.equal(fm.psi(torch.tensor([0.0, 0.0])), torch.tensor([1.0, 1.0]))
    assert torch.equal(fm.psi(torch.tensor([1.0])), torch.tensor([2.0]))
    v = float(fm.psi(torch.tensor([-20.0], dtype=torch.float64)))
    assert 0 < v < 1e-8
    assert v == pytest.approx(math.exp(-20), rel=1e-12)


@given(st.lists(finite, min_size=1, max_size=16))
def test_psi_positive_and_matches_scalar(values):
    out = fm.psi(torch.tensor(values, dtype=torch.float64))
    assert bool((out > 0).all())
    for u, o in zip(values, out.tolist()):
        assert o == pytest.approx(psi_scalar(u), rel=1e-15, abs=1e-300)


def test_psi_monotone():
    u = torch.linspace(-30, 30, 2001, dtype=torch.float64)
    assert bool((fm.psi(u).diff() >= 0).all())


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_psi_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        fm.psi(torch.tensor([0.0, bad]))


def test_rotary_examples():
    u = torch.randn(8, dtype=torch.float64)
    assert torch.equal(fm.rotary_apply(u, 0.0, fm.RotaryBasis(8)), u)
    basis = fm.RotaryBasis(2)  # theta_1 = 1
    out = fm.rotary_apply(torch.tensor([1.0, 0.0], dtype=torch.float64), math.pi / 2, basis)
    assert torch.allclose(out, torch.tensor([0.0, 1.0], dtype=torch.float64), atol=1e-15)


def test_rotary_thetas():
    assert fm.RotaryBasis(8).thetas == pytest.approx([1.0, 10000**-0.25, 10000**-0.5, 10000**-0.75])


@given(st.integers(1, 16), st.floats(-1e4, 1e4, allow_nan=False), st.integers(0, 2**31))
def test_rotary_preserves_norm(half, t, seed):
    u = torch.randn(2 * half, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    out = fm.rotary_apply(u, t, fm.RotaryBasis(2 * half))
    assert float(out.norm()) == pytest.approx(float(u.norm()), rel=1e-12)


def test_rotary_norm_example():
    u = torch.randn(16, dtype=torch.float64)
    assert abs(float(fm.rotary_apply(u, 3.7, fm.RotaryBasis(16)).norm() - u.norm())) < 1e-12


def test_rotary_composes_additively():
    basis = fm.RotaryBasis(6)
    u = torch.randn(6, dtype=torch.float64)
    twice = fm.rotary_apply(fm.rotary_apply(u, 2.5, basis), 4.0, basis)
    assert torch.allclose(twice, fm.rotary_apply(u, 6.5, basis), atol=1e-13)


def test_rotary_relative_identity_small():
    basis = fm.RotaryBasis(10)
    g = torch.Generator().manual_seed(3)
    for _ in range(50):
        a, b = torch.randn(2, 10, generator=g, dtype=torch.float64)
        i, j = (torch.rand(2, generator=g, dtype=torch.float64) * 200).tolist()
        lhs = fm.rotary_apply(a, i, basis) @ fm.rotary_apply(b, j, basis)
        rhs = a @ fm.rotary_apply(b, j - i, basis)
        assert abs(float(lhs - rhs)) < 1e-9


def test_rotary_errors():
    with pytest.raises(DimensionError):
        fm.rotary_apply(torch.zeros(3), 1.0, fm.RotaryBasis(2))
    with pytest.raises(DimensionError):
        fm.RotaryBasis(5)
    with pytest.raises(DimensionError):
        fm.rotary_apply(torch.zeros(4), 1.0, fm.RotaryBasis(6))


def test_cos_reweight_examples():
    p = fm.ReweightParams(700)
    assert fm.cos_reweight(0, p) == 1.0
    assert fm.cos_reweight(700, p) == 0.0
    assert fm.cos_reweight(700 / 3, p) == pytest.approx(math.cos(math.pi / 6), abs=1e-15)
    assert fm.cos_reweight(700 / 3, p) == pytest.approx(0.8660254, abs=1e-7)


def test_cos_reweight_errors():
    p = fm.ReweightParams(700)
    with pytest.raises(SpanExceededError):
        fm.cos_reweight(701, p)
    with pytest.raises(CausalityError):
        fm.cos_reweight(-1, p)
    with pytest.raises(InvalidParameterError):
        fm.ReweightParams(0)


@given(st.floats(0, 700, allow_nan=False))
def test_cos_reweight_in_unit_interval(delta):
    assert 0.0 <= fm.cos_reweight(delta, fm.ReweightParams(700)) <= 1.0


def test_decay_examples():
    assert fm.decay_weight(1.0, 500) == 1.0
    assert fm.decay_weight(0.5, 3) == 0.125
    assert 0.6831 <= fm.decay_weight(0.96875, 12) < 0.6832
    assert fm.decay_weight(0.96875, 12) == pytest.approx(0.96875**12, rel=1e-15)
    assert fm.decay_weight(0.0, 0) == 1.0


@pytest.mark.parametrize("gamma", [-0.1, 1.5])
def test_decay_rejects_gamma(gamma):
    with pytest.raises(InvalidParameterError):
        fm.decay_weight(gamma, 1)


def test_feature_map_examples():
    u = torch.tensor([0.0, 0.0], dtype=torch.float64)
    assert torch.equal(fm.feature_map("linear", u, 0), torch.tensor([1.0, 1.0], dtype=torch.float64))
    v = torch.tensor([0.3, -1.2], dtype=torch.float64)
    cos = fm.feature_map("cosformer", v, 0.0)
    assert torch.equal(cos, torch.cat((fm.psi(v), torch.zeros(2, dtype=torch.float64))))
    rot = fm.feature_map("linroformer", torch.tensor([1.0, 0.0], dtype=torch.float64), 0.0)
    assert torch.equal(rot, torch.tensor([1.0, 0.5], dtype=torch.float64))
    key = fm.feature_map("linroformer", torch.tensor([1.0, 0.0], dtype=torch.float64), 0.0, side="key")
    assert torch.equal(key, torch.tensor([2.0, 1.0], dtype=torch.float64))


def test_feature_map_errors():
    with pytest.raises(ConfigurationError):
        fm.feature_map("nope", torch.zeros(2), 0)
    with pytest.raises(ConfigurationError):
        fm.feature_map("transformer_causal", torch.zeros(2), 0)
    with pytest.raises(SpanExceededError):
        fm.feature_map("time_cosformer", torch.zeros(2), 800.0)


@pytest.mark.parametrize("kind", ["cosformer", "time_cosformer"])
def test_cosformer_kernel_is_distance_reweighted(kind):
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(2, 4, generator=g, dtype=torch.float64)
    params = fm.ReweightParams(700)
    fa = fm.feature_map(kind, a, 300.0, params)
    fb = fm.feature_map(kind, b, 120.0, params, side="key")
    expected = float(fm.psi(a) @ fm.psi(b)) * fm.cos_reweight(180.0, params)
    assert float(fa @ fb) == pytest.approx(expected, rel=1e-12)


def test_phi_dim():
    assert fm.phi_dim("cosformer", 16) == 32
    assert fm.phi_dim("linear", 16) == 16
    assert fm.phi_dim("time_retention", 8) == 8
