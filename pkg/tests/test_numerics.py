import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prism import numerics as N


def test_value_and_grad_polynomial():
    v, g = N.value_and_grad(lambda p: (p["x"] ** 2).sum(), {"x": N.tensor([1.0, 2.0])})
    assert v == 5.0
    assert torch.equal(g["x"], torch.tensor([2.0, 4.0], dtype=torch.float64))


def test_value_and_grad_inactive_hinge():
    v, g = N.value_and_grad(lambda p: torch.relu(p["x"] - 1).sum(), {"x": N.tensor([0.5])})
    assert v == 0.0 and g["x"].item() == 0.0


def test_matmul_softmax_cross_entropy_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    params = {"W": torch.randn(3, 3, generator=gen, dtype=torch.float64),
              "x": torch.randn(3, generator=gen, dtype=torch.float64)}

    def f(p):
        return -torch.log_softmax(p["W"] @ p["x"], dim=0)[1]

    _, g = N.value_and_grad(f, params)
    fd = N.finite_difference_grad(f, params)
    for k in params:
        assert g[k].shape == params[k].shape
        assert N.relative_error(g[k], fd[k]) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_every_primitive_family_matches_finite_differences(seed):
    gen = torch.Generator().manual_seed(seed)
    p = {"a": torch.randn(4, 3, generator=gen, dtype=torch.float64),
         "b": torch.randn(3, 5, generator=gen, dtype=torch.float64),
         "k": torch.randn(3, 3, 2, generator=gen, dtype=torch.float64)}

    def f(q):
        h = q["a"] @ q["b"]  # matmul
        h = torch.cat([h, h[:, :2] * 0.5], dim=1)  # concatenate, slice, mul
        h = torch.softmax(h, dim=1) + torch.exp(-h * h - 1.0)  # softmax, exp, add
        h = torch.log(h + 1.0)  # log
        c = N.conv1d_dilated(q["a"][:, :3], q["k"], dilation=2)  # conv1d-dilated
        h = torch.relu(h - 0.2).mean() + torch.nn.functional.normalize(c, dim=-1).sum()
        return h

    _, g = N.value_and_grad(f, p)
    fd = N.finite_difference_grad(f, p)
    assert max(N.relative_error(g[k], fd[k]) for k in p) <= 1e-4


def test_value_and_grad_is_bit_deterministic():
    gen = torch.Generator().manual_seed(5)
    p = {"w": torch.randn(6, 6, generator=gen, dtype=torch.float64)}
    f = lambda q: torch.softmax(q["w"] @ q["w"].T, dim=0).log().sum()  # noqa: E731
    v1, g1 = N.value_and_grad(f, p)
    v2, g2 = N.value_and_grad(f, p)
    assert v1 == v2 and torch.equal(g1["w"], g2["w"])


def test_non_scalar_output_is_rejected():
    with pytest.raises(N.ContractError):
        N.value_and_grad(lambda p: p["x"] * 2, {"x": N.tensor([1.0, 2.0])})


def test_unsupported_primitive_is_named():
    with pytest.raises(N.UnsupportedPrimitiveError, match="Sin"):
        N.value_and_grad(lambda p: torch.sin(p["x"]).sum(), {"x": N.tensor([1.0])})


def test_unused_parameter_gets_zero_gradient():
    _, g = N.value_and_grad(lambda p: p["x"].sum(), {"x": N.tensor([1.0]), "y": N.tensor([3.0, 4.0])})
    assert torch.equal(g["y"], torch.zeros(2, dtype=torch.float64))


def test_tensor_rejects_non_finite_and_bad_shape():
    with pytest.raises(N.ContractError):
        N.tensor([1.0, math.nan])
    with pytest.raises(N.ContractError):
        N.tensor([1.0, 2.0, 3.0], shape=(2, 2))
    assert N.tensor([1.0, 2.0, 3.0, 4.0], shape=(2, 2)).shape == (2, 2)


def test_computation_record_lists_primitive_families():
    x = N.tensor([1.0, 2.0], requires_grad=True)
    rec = N.computation_record(torch.exp(x * 2).sum())
    assert rec == ["mul", "exp", "mean"]


def test_conv_identity_kernel():
    x = torch.randn(8, 3, dtype=torch.float64)
    k = torch.zeros(3, 3, 3, dtype=torch.float64)
    k[1] = torch.eye(3, dtype=torch.float64)
    assert torch.allclose(N.conv1d_dilated(x, k, 1, 1), x)


def test_conv_output_length_is_ceil():
    k = torch.randn(3, 2, 2, dtype=torch.float64)
    assert N.conv1d_dilated(torch.randn(7, 2, dtype=torch.float64), k, 1, 2).shape[0] == 4


def test_conv_impulse_response_dilation_four():
    x = torch.zeros(21, 1, dtype=torch.float64)
    x[10] = 1.0
    y = N.conv1d_dilated(x, torch.ones(3, 1, 1, dtype=torch.float64), dilation=4)
    assert np.flatnonzero(y[:, 0].numpy()).tolist() == [6, 10, 14]


def test_conv_even_kernel_rejected():
    with pytest.raises(N.ContractError):
        N.conv1d_dilated(torch.zeros(5, 1), torch.zeros(2, 1, 1), 1, 1)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 40), K=st.sampled_from([1, 3, 5]), dil=st.integers(1, 4), stride=st.integers(1, 3),
       seed=st.integers(0, 10_000))
def test_conv_matches_reference_and_length(T, K, dil, stride, seed):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(T, 2, generator=gen, dtype=torch.float64)
    k = torch.randn(K, 2, 3, generator=gen, dtype=torch.float64)
    y = N.conv1d_dilated(x, k, dil, stride)
    assert y.shape == (-(-T // stride), 3)
    assert torch.allclose(y, torch.as_tensor(N.conv1d_reference(x, k, dil, stride)), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(4, 40), dil=st.integers(1, 4), stride=st.integers(1, 2), seed=st.integers(0, 10_000),
       data=st.data())
def test_conv_locality_outside_receptive_field(T, dil, stride, seed, data):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(T, 1, generator=gen, dtype=torch.float64)
    k = torch.randn(3, 1, 1, generator=gen, dtype=torch.float64)
    y = N.conv1d_dilated(x, k, dil, stride)
    t_out = data.draw(st.integers(0, y.shape[0] - 1))
    # centre of output t_out in input coordinates and its reach
    left, _, _ = N.same_padding(T, 3, dil, stride)
    centre = t_out * stride - left + dil
    far = [t for t in range(T) if abs(t - centre) > dil]
    if not far:
        return
    x2 = x.clone()
    x2[data.draw(st.sampled_from(far))] += 5.0
    assert N.conv1d_dilated(x2, k, dil, stride)[t_out, 0] == y[t_out, 0]
