import numpy as np
import pytest

from flowvi import numcore as nc
from flowvi.errors import CapabilityError, ContractError, NumericError, ShapeError
from flowvi.flows import (
    INVERTIBLE_KINDS,
    KINDS,
    AffineCoupling,
    FlowStack,
    PlanarFlow,
    RadialFlow,
    RQSplineCoupling,
    SingularJacobianError,
    SylvesterFlow,
    build_layer,
    build_stack,
    constrain_params,
    flow_forward,
    flow_inverse,
    made_masks,
    numeric_logdet_oracle,
    perturb_parameters,
    stack_forward,
)
from flowvi.flows.autoregressive import MADE


def random_layer(kind, dim, seed, scale=0.5, index=0):
    rng = np.random.default_rng(seed)
    return perturb_parameters(build_layer(kind, dim, rng, index=index), rng, scale)


# --- identity parameterizations -------------------------------------------

def test_planar_zero_u_is_identity():
    layer = PlanarFlow(5, np.random.default_rng(0))
    layer.u.data[:] = 0.0
    layer = constrain_params(layer)  # u-hat of u=0 is not 0; bake u=0 as constrained
    layer.u.data[:] = 0.0
    z = np.random.default_rng(1).normal(size=5)
    out, ld = flow_forward(layer, z)
    np.testing.assert_array_equal(out.data, z)
    assert ld.item() == 0.0


def test_radial_zero_beta_is_identity():
    layer = constrain_params(RadialFlow(4, np.random.default_rng(0)))
    layer.beta_raw.data[:] = 0.0
    z = np.random.default_rng(2).normal(size=4)
    out, ld = flow_forward(layer, z)
    np.testing.assert_array_equal(out.data, z)
    assert ld.item() == 0.0


def test_radial_constrained_beta_zero_identity():
    layer = RadialFlow(4, np.random.default_rng(0))
    alpha = np.logaddexp(0.0, layer.alpha_raw.data)
    layer.beta_raw.data = np.log(np.expm1(alpha))  # softplus(beta_raw) = alpha -> beta = 0
    z = np.random.default_rng(2).normal(size=4)
    out, ld = flow_forward(layer, z)
    np.testing.assert_allclose(out.data, z, atol=1e-14)
    assert abs(ld.item()) < 1e-14


def test_realnvp_zero_conditioner_is_identity():
    layer = AffineCoupling(6, np.random.default_rng(0))  # last layer zero-initialised
    x = np.random.default_rng(3).normal(size=6)
    out, ld = flow_forward(layer, x)
    np.testing.assert_array_equal(out.data, x)
    assert ld.item() == 0.0
    np.testing.assert_array_equal(flow_inverse(layer, x).data, x)


@pytest.mark.parametrize("kind", ["rqnsf", "rlnsf"])
def test_spline_outside_bound_is_identity(kind):
    layer = random_layer(kind, 6, seed=4)
    rng = np.random.default_rng(5)
    z = rng.uniform(3.5, 9.0, size=6) * rng.choice([-1, 1], size=6)
    out, ld = flow_forward(layer, z)
    np.testing.assert_array_equal(out.data, z)
    assert ld.item() == 0.0


def test_spline_zero_params_identity_inside():
    layer = RQSplineCoupling(4, np.random.default_rng(0))
    z = np.array([0.3, -1.2, 2.5, -2.9])
    out, ld = flow_forward(layer, z)
    np.testing.assert_allclose(out.data, z, atol=1e-12)
    assert abs(ld.item()) < 1e-12


# --- log-det against the finite-difference oracle --------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_logdet_matches_oracle(kind):
    for trial in range(10):
        dim = 6
        layer = random_layer(kind, dim, seed=100 + trial, index=trial)
        z = np.random.default_rng(trial).normal(scale=1.5, size=dim)
        _, ld = flow_forward(layer, z)
        oracle = numeric_logdet_oracle(layer, z)
        assert abs(ld.item() - oracle) <= 1e-4 * max(1.0, abs(oracle))


def test_oracle_identity_stack_is_zero():
    assert numeric_logdet_oracle(FlowStack([], dim=3), np.ones(3)) == pytest.approx(0.0, abs=1e-10)


def test_oracle_planar_hand_value():
    layer = PlanarFlow(1, np.random.default_rng(0))
    layer.constrain = False
    layer.u.data[:] = 1.0
    layer.w.data[:] = 1.0
    layer.b.data[:] = 0.0
    assert numeric_logdet_oracle(layer, np.zeros(1)) == pytest.approx(np.log(2.0), abs=1e-9)
    assert flow_forward(layer, np.zeros(1))[1].item() == pytest.approx(np.log(2.0), abs=1e-15)


def test_oracle_reports_singular_jacobian():
    class Collapse:
        # projects onto the first coordinate; only the forward map is consulted
        def forward(self, z):
            out = z.data.copy()
            out[:, 1] = 0.0
            return nc.Tensor(out), None

    with pytest.raises(SingularJacobianError):
        numeric_logdet_oracle(Collapse(), np.zeros(2))


def test_two_layer_planar_stack_composite_logdet():
    rng = np.random.default_rng(7)
    stack = perturb_parameters(build_stack("planar", 2, 5, rng), rng, 0.7)
    z = rng.normal(size=5)
    _, lds = stack_forward(stack, z)
    assert len(lds) == 2
    oracle = numeric_logdet_oracle(stack, z)
    assert abs(sum(ld.item() for ld in lds) - oracle) <= 1e-4 * max(1.0, abs(oracle))


def test_empty_stack_is_identity():
    z = np.arange(3.0)
    out, lds = stack_forward(FlowStack([], dim=3), z)
    np.testing.assert_array_equal(out.data, z)
    assert lds == []


def test_reference_spline_config_runs():
    rng = np.random.default_rng(0)
    stack = build_stack("rqnsf", 4, 6, rng, bins=4, bound=3.0)
    perturb_parameters(stack, rng, 0.3)
    out, lds = stack_forward(stack, rng.normal(size=(10, 6)))
    assert out.shape == (10, 6) and len(lds) == 4
    assert all(layer.bins == 4 and layer.bound == 3.0 for layer in stack.layers)


# --- inverses ----------------------------------------------------------------

@pytest.mark.parametrize("kind", INVERTIBLE_KINDS)
def test_inverse_round_trip(kind):
    layer = random_layer(kind, 8, seed=11, scale=0.4, index=1)
    z = np.random.default_rng(12).normal(scale=2.0, size=(200, 8))
    with nc.no_grad():
        x, _ = layer.forward(nc.Tensor(z))
        back = layer.inverse(x)
    assert np.abs(back.data - z).max() <= 1e-8


def test_iaf_round_trip_single_vector():
    layer = random_layer("iaf", 5, seed=3)
    z = np.random.default_rng(4).normal(size=5)
    x, _ = flow_forward(layer, z)
    np.testing.assert_allclose(flow_inverse(layer, x).data, z, atol=1e-6)


@pytest.mark.parametrize("kind", ["planar", "radial", "sylvester"])
def test_no_closed_form_inverse_is_capability_error(kind):
    layer = build_layer(kind, 3, np.random.default_rng(0))
    with pytest.raises(CapabilityError, match="not invertible in closed form"):
        flow_inverse(layer, np.zeros(3))


# --- constraints ------------------------------------------------------------

def _planar_with_wtu(value):
    layer = PlanarFlow(3, np.random.default_rng(0))
    w = np.array([1.0, 2.0, -0.5])
    layer.w.data = w
    layer.u.data = w * value / (w @ w)
    return layer


def test_planar_constraint_negative():
    layer = constrain_params(_planar_with_wtu(-5.0))
    wtu_hat = layer.w.data @ layer.u.data
    assert wtu_hat == pytest.approx(-1.0 + np.log1p(np.exp(-5.0)), abs=1e-14)
    assert wtu_hat > -1.0


def test_planar_constraint_large_positive():
    layer = constrain_params(_planar_with_wtu(10.0))
    # m(a) = -1 + softplus(a) tends to a - 1
    assert layer.w.data @ layer.u.data == pytest.approx(9.0 + np.log1p(np.exp(-10.0)), abs=1e-12)


def test_planar_zero_w_is_degenerate():
    layer = PlanarFlow(3, np.random.default_rng(0))
    layer.w.data[:] = 0.0
    with pytest.raises(ContractError, match="w = 0"):
        constrain_params(layer)


def test_radial_constraint_beta():
    layer = RadialFlow(3, np.random.default_rng(0))
    layer.beta_raw.data[:] = -10.0
    fixed = constrain_params(layer)
    alpha, beta = fixed.alpha_raw.item(), fixed.beta_raw.item()
    assert alpha > 0
    assert beta - (-alpha) == pytest.approx(np.log1p(np.exp(-10.0)), rel=1e-10)
    assert beta > -alpha


def test_sylvester_orthonormal_and_diag_constraint():
    layer = random_layer("sylvester", 7, seed=2)
    q = layer.q().data
    np.testing.assert_allclose(q.T @ q, np.eye(layer.m), atol=1e-10)
    _, _, rd, rtd = layer.triangular()
    assert np.all(rd.data * rtd.data > -1.0)


def test_sylvester_fewer_hidden_units():
    rng = np.random.default_rng(0)
    layer = perturb_parameters(SylvesterFlow(6, rng, n_hidden=3), rng, 0.5)
    z = rng.normal(size=6)
    _, ld = flow_forward(layer, z)
    assert abs(ld.item() - numeric_logdet_oracle(layer, z)) < 1e-6
    with pytest.raises(ContractError):
        SylvesterFlow(3, rng, n_hidden=5)


# --- MADE masks -------------------------------------------------------------

@pytest.mark.parametrize("dim", [1, 2, 5])
def test_made_is_strictly_autoregressive(dim):
    rng = np.random.default_rng(dim)
    made = perturb_parameters(MADE(dim, [3 * dim + 1], rng), rng, 1.0)
    x = rng.normal(size=(1, dim))
    base_mu, base_alpha = (t.data for t in made(nc.Tensor(x)))
    for j in range(dim):
        x2 = x.copy()
        x2[0, j] += 1.0
        mu, alpha = (t.data for t in made(nc.Tensor(x2)))
        # outputs i <= j must not see input j
        np.testing.assert_array_equal(mu[0, : j + 1], base_mu[0, : j + 1])
        np.testing.assert_array_equal(alpha[0, : j + 1], base_alpha[0, : j + 1])


def test_made_masks_connectivity():
    masks = made_masks(4, [9])
    full = masks[0] @ masks[1]
    # output degree i (1-based) reachable only from inputs < i
    for i in range(4):
        for j in range(4):
            reach = full[j, i] > 0
            assert reach == (j < i)


# --- errors -----------------------------------------------------------------

def test_dimension_mismatch():
    layer = build_layer("planar", 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        flow_forward(layer, np.zeros(4))
    with pytest.raises(ShapeError):
        FlowStack([layer, build_layer("planar", 4, np.random.default_rng(0))])


def test_non_finite_names_layer_kind_and_index():
    rng = np.random.default_rng(0)
    stack = build_stack("iaf", 2, 3, rng)
    stack.layers[1].made.layers[-1].bias.data[3:] = 800.0  # exp(alpha) overflows
    with pytest.raises(NumericError, match=r"flow layer 1: iaf layer"):
        stack_forward(stack, np.ones(3))


def test_unknown_kind():
    with pytest.raises(ValueError):
        build_layer("glow", 3, np.random.default_rng(0))


# --- gradients through flows -------------------------------------------------

def test_planar_logdet_gradcheck():
    rng = np.random.default_rng(0)
    layer = random_layer("planar", 4, seed=1)
    x = nc.Tensor(rng.normal(size=4), requires_grad=True)
    rep = nc.grad_check(lambda t: flow_forward(layer, t)[1], x, h=1e-5)
    assert rep.max_rel_error <= 1e-4


@pytest.mark.parametrize("kind", KINDS)
def test_parameter_gradients(kind):
    layer = random_layer(kind, 4, seed=21, scale=0.4)
    z = np.random.default_rng(22).normal(size=(3, 4))
    worst = 0.0
    for name, p in layer.named_parameters():
        def fn(_, z=z):
            out, ld = layer.forward(nc.Tensor(z))
            return (out * out).sum() * 0.1 + ld.sum()
        coords = nc.sample_coords(p.shape, 4, np.random.default_rng(0))
        worst = max(worst, nc.grad_check(fn, p, h=1e-6, coords=coords).max_rel_error)
    assert worst <= 1e-4
