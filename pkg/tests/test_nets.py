import numpy as np
import pytest
from conftest import finite_diff_check, probe_indices

from equidiff.groups import (
    GroupElement,
    cyclic_elements,
    direct_sum,
    irrep,
    regular,
    regular_matrix,
    rep_matrix,
    trivial,
)
from equidiff.nets import (
    DenoiserConfig,
    DenoiserNetwork,
    EquivariantLinear,
    FieldType,
    FieldTypeError,
    GridEncoder,
    GridSpec,
    LiftedConv2d,
    ManifestMismatchError,
    PointwiseSoftplus,
    TemporalCore,
    build_matched_baseline,
    intertwiner_basis,
    load_network,
    regular_field,
    save_network,
)
from equidiff.se3 import absolute10_rep, relative13_rep


# --- intertwiner bases --------------------------------------------------------

def test_basis_trivial_to_trivial():
    for u in (1, 4, 8):
        basis = intertwiner_basis(trivial(1), trivial(1), u)
        assert basis.shape[0] == 1


def test_basis_irrep_to_trivial_is_empty():
    basis = intertwiner_basis(irrep(1), trivial(1), 8)
    assert basis.shape[0] == 0


def test_basis_regular_to_regular_is_group_algebra():
    basis = intertwiner_basis(regular(4), regular(4), 4)
    assert basis.shape[0] == 4
    # every element commutes with the generator's permutation
    P = regular_matrix(4, 1)
    for B in basis:
        assert np.max(np.abs(P @ B - B @ P)) < 1e-12


def test_layer_coeff_count_matches_full_basis():
    cases = [
        (direct_sum(irrep(1, 2), trivial(1)), regular(8, 2), 8),
        (regular(4, 3), regular(4, 2), 4),
        (relative13_rep(), regular(8, 1), 8),
        (regular(8, 2), absolute10_rep(), 8),
    ]
    rng = np.random.default_rng(0)
    for in_rep, out_rep, u in cases:
        layer = EquivariantLinear(
            "l", FieldType(in_rep, u), FieldType(out_rep, u), rng
        )
        full = intertwiner_basis(in_rep, out_rep, u)
        assert layer.n_coeffs == full.shape[0]


# --- equivariant linear ---------------------------------------------------------

def layer_cases():
    rng = np.random.default_rng(1)
    yield EquivariantLinear(
        "mixed_to_reg",
        FieldType(direct_sum(irrep(1, 3), trivial(2), irrep(2)), 8),
        regular_field(8, 4),
        rng,
    )
    yield EquivariantLinear(
        "reg_to_reg", regular_field(4, 3), regular_field(4, 5), rng
    )
    yield EquivariantLinear(
        "reg_to_action",
        regular_field(8, 6),
        FieldType(direct_sum(absolute10_rep(), absolute10_rep()), 8),
        rng,
    )
    yield EquivariantLinear(
        "conjugated_in",
        FieldType(relative13_rep(), 8),
        regular_field(8, 3),
        rng,
    )
    yield EquivariantLinear(
        "reg_to_conjugated",
        regular_field(8, 4),
        FieldType(relative13_rep(), 8),
        rng,
    )


@pytest.mark.parametrize("layer", list(layer_cases()), ids=lambda l: l.name)
def test_layer_weight_is_intertwiner(layer):
    assert layer.check_equivariance() < 1e-10


@pytest.mark.parametrize("layer", list(layer_cases()), ids=lambda l: l.name)
def test_layer_forward_equivariance(layer):
    rng = np.random.default_rng(2)
    layer.bias_coeffs[:] = rng.normal(size=layer.n_bias)
    x = rng.normal(size=(5, layer.in_type.dim))
    y = layer.forward(x)
    for g in cyclic_elements(layer.u):
        gin = rep_matrix(layer.in_type.rep, g)
        gout = rep_matrix(layer.out_type.rep, g)
        lhs = layer.forward(x @ gin.T)
        rhs = y @ gout.T
        assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_zero_coefficients_give_zero_output(rng):
    layer = EquivariantLinear(
        "z", regular_field(4, 2), regular_field(4, 3), rng
    )
    layer.coeffs[:] = 0.0
    x = rng.normal(size=(3, layer.in_type.dim))
    assert np.all(layer.forward(x) == 0.0)


def test_layer_shape_mismatch_raises(rng):
    layer = EquivariantLinear("s", regular_field(4, 2), regular_field(4, 2), rng)
    with pytest.raises(ValueError):
        layer.forward(np.zeros((2, 5)))


def test_linear_gradients_match_finite_differences(rng):
    layer = EquivariantLinear(
        "g",
        FieldType(direct_sum(irrep(1, 2), trivial(1)), 8),
        regular_field(8, 3),
        rng,
    )
    x = rng.normal(size=(4, layer.in_type.dim))
    v = rng.normal(size=(4, layer.out_type.dim))

    def objective():
        return float(np.sum(v * layer.forward(x)))

    objective()
    layer.zero_grad()
    grad_x = layer.backward(v)
    finite_diff_check(
        objective, layer.coeffs, layer.grad_coeffs,
        probe_indices(rng, layer.coeffs.size), rtol=1e-6,
    )
    finite_diff_check(
        objective, layer.bias_coeffs, layer.grad_bias,
        probe_indices(rng, layer.bias_coeffs.size), rtol=1e-6,
    )
    finite_diff_check(
        objective, x, grad_x, probe_indices(rng, x.size), rtol=1e-6
    )


def test_fault_injection_breaks_named_layer_check(rng):
    layer = EquivariantLinear("victim", regular_field(8, 2), regular_field(8, 2), rng)
    assert layer.check_equivariance() < 1e-10
    layer.pair_groups[0]["basis"][0, 0, 1] += 0.05
    assert layer.check_equivariance() > 1e-4


# --- pointwise nonlinearity ------------------------------------------------------

def test_softplus_commutes_with_permutations(rng):
    ft = regular_field(8, 3)
    sp = PointwiseSoftplus("sp", ft)
    x = rng.normal(size=(6, ft.dim))
    y = sp.forward(x)
    for g in cyclic_elements(8):
        M = rep_matrix(ft.rep, g)
        assert np.array_equal(sp.forward(x @ M.T), y @ M.T)


def test_softplus_monotone(rng):
    sp = PointwiseSoftplus("sp", regular_field(4, 1))
    x = np.sort(rng.normal(size=(1, 4)))
    y = sp.forward(x)
    assert np.all(np.diff(y[0]) > 0)


def test_softplus_rejects_non_regular_field():
    with pytest.raises(FieldTypeError):
        PointwiseSoftplus("sp", FieldType(irrep(1, 2), 8))


def test_softplus_gradient(rng):
    sp = PointwiseSoftplus("sp", regular_field(4, 2))
    x = rng.normal(size=(3, 8))
    v = rng.normal(size=(3, 8))

    def objective():
        return float(np.sum(v * sp.forward(x)))

    objective()
    gx = sp.backward(v)
    finite_diff_check(objective, x, gx, probe_indices(rng, x.size))


# --- lifting convolution ----------------------------------------------------------

def test_lift_conv_constant_input_has_equal_slices(rng):
    conv = LiftedConv2d("c", channels=3, kernel_size=3, rng=rng)
    grid = np.ones((2, 8, 8))
    y = conv.forward(grid)
    for m in range(1, 4):
        assert np.allclose(y[:, m], y[:, 0], atol=1e-12)


def test_lift_conv_rotation_equivariance(rng):
    conv = LiftedConv2d("c", channels=2, kernel_size=3, rng=rng)
    grid = rng.normal(size=(1, 9, 9))
    y = conv.forward(grid)
    y_rot = conv.forward(np.rot90(grid, 1, axes=(1, 2)).copy())
    for m in range(4):
        want = np.rot90(y[:, (m - 1) % 4], 1, axes=(2, 3))
        assert np.max(np.abs(y_rot[:, m] - want)) < 1e-10


def test_lift_conv_rejects_non_square(rng):
    conv = LiftedConv2d("c", channels=1, kernel_size=3, rng=rng)
    with pytest.raises(ValueError):
        conv.forward(np.zeros((1, 8, 9)))


def test_grid_encoder_field_transforms_regularly(rng):
    enc = GridEncoder("g", channels=3, kernel_size=3, rng=rng)
    grid = rng.normal(size=(2, 8, 8))
    f = enc.forward(grid)
    for t in range(4):
        rot = np.rot90(grid, t, axes=(1, 2)).copy()
        f_rot = enc.forward(rot)
        M = rep_matrix(enc.out_type.rep, GroupElement.from_index(t, 4))
        assert np.max(np.abs(f_rot - f @ M.T)) < 1e-10


def test_lift_conv_gradients(rng):
    enc = GridEncoder("g", channels=2, kernel_size=3, rng=rng)
    grid = rng.normal(size=(2, 7, 7))
    v = rng.normal(size=(2, 8))

    def objective():
        return float(np.sum(v * enc.forward(grid)))

    objective()
    enc.conv.zero_grad()
    g_grid = enc.backward(v)
    finite_diff_check(objective, enc.conv.K, enc.conv.gK,
                      probe_indices(rng, enc.conv.K.size))
    finite_diff_check(objective, enc.conv.b, enc.conv.gb,
                      probe_indices(rng, enc.conv.b.size))
    finite_diff_check(objective, grid, g_grid, probe_indices(rng, grid.size))


# --- temporal core ------------------------------------------------------------------

def test_core_gradients(rng):
    core = TemporalCore("core", d_in=6, width=16, depth=2, d_out=4,
                        embed_dim=8, rng=rng)
    x = rng.normal(size=(5, 6))
    k = rng.integers(1, 100, size=5)
    v = rng.normal(size=(5, 4))

    def objective():
        return float(np.sum(v * core.forward(x, k)))

    objective()
    for layer in core.sublayers():
        layer.zero_grad()
    gx = core.backward(v)
    params = [pp for l in core.sublayers() for pp in l.params()]
    grads = [gg for l in core.sublayers() for gg in l.grads()]
    for (pname, p), (gname, g) in zip(params, grads):
        assert pname == gname
        finite_diff_check(objective, p, g, probe_indices(rng, p.size, 10))
    finite_diff_check(objective, x, gx, probe_indices(rng, x.size, 10))


# --- full denoiser --------------------------------------------------------------------

def small_config(u=8, grid=None):
    obs_rep = direct_sum(irrep(1, 3), trivial(1))  # dim 7
    act_rep = direct_sum(*[absolute10_rep() for _ in range(2)])  # dim 20
    return DenoiserConfig(
        u=u, obs_rep=obs_rep, act_rep=act_rep,
        obs_hidden=6, obs_channels=5, act_channels=5,
        core_width=24, core_depth=1, core_out=5, step_embed_dim=8,
        grid=grid,
    )


def test_denoiser_structural_equivariance(rng):
    for seed in range(3):
        net = DenoiserNetwork(small_config(), seed=seed)
        obs = rng.normal(size=(2, net.config.obs_rep.dim))
        act = rng.normal(size=(2, net.config.act_rep.dim))
        res = net.equivariance_residual(obs, act, k=17)
        assert res < 1e-5, res


def test_denoiser_with_grid_equivariance(rng):
    cfg = small_config(u=4, grid=GridSpec(size=8, channels=3, kernel_size=3))
    net = DenoiserNetwork(cfg, seed=1)
    obs = rng.normal(size=(1, cfg.obs_rep.dim))
    act = rng.normal(size=(1, cfg.act_rep.dim))
    grid = rng.normal(size=(1, 8, 8))
    res = net.equivariance_residual(obs, act, k=3, grid=grid)
    assert res < 1e-5, res


def test_zero_parameter_network_predicts_zero(rng):
    net = DenoiserNetwork(small_config(), seed=0)
    net.set_flat(np.zeros(net.num_params()))
    obs = rng.normal(size=(3, net.config.obs_rep.dim))
    act = rng.normal(size=(3, net.config.act_rep.dim))
    assert np.all(net.forward(obs, act, 5) == 0.0)


def test_denoiser_gradients(rng):
    net = DenoiserNetwork(small_config(), seed=2)
    obs = rng.normal(size=(3, net.config.obs_rep.dim))
    act = rng.normal(size=(3, net.config.act_rep.dim))
    v = rng.normal(size=(3, net.config.act_rep.dim))
    k = np.array([1, 40, 99])

    flat = net.get_flat()

    def objective():
        net.set_flat(flat)
        return float(np.sum(v * net.forward(obs, act, k)))

    objective()
    net.zero_grads()
    gobs, gact = net.backward(v)
    analytic = net.grad_flat()
    finite_diff_check(objective, flat, analytic, probe_indices(rng, flat.size, 50))
    net.set_flat(flat)
    net.forward(obs, act, k)
    net.zero_grads()
    gobs, gact = net.backward(v)
    finite_diff_check(
        lambda: float(np.sum(v * net.forward(obs, act, k))),
        obs, gobs, probe_indices(rng, obs.size, 10),
    )
    finite_diff_check(
        lambda: float(np.sum(v * net.forward(obs, act, k))),
        act, gact, probe_indices(rng, act.size, 10),
    )


def test_zero_upstream_gives_zero_grads(rng):
    net = DenoiserNetwork(small_config(), seed=3)
    obs = rng.normal(size=(2, net.config.obs_rep.dim))
    act = rng.normal(size=(2, net.config.act_rep.dim))
    net.forward(obs, act, 7)
    net.zero_grads()
    net.backward(np.zeros((2, net.config.act_rep.dim)))
    assert np.all(net.grad_flat() == 0.0)


def test_structure_report_names_layers(rng):
    net = DenoiserNetwork(small_config(), seed=4)
    report = dict(net.check_structure())
    assert set(report) == {"obs_enc1", "obs_enc2", "act_enc", "decoder"}
    assert max(report.values()) < 1e-10


def test_baseline_capacity_matched_but_not_equivariant(rng):
    cfg = small_config()
    equi = DenoiserNetwork(cfg, seed=0)
    base = build_matched_baseline(cfg, seed=0)
    assert base.config.u == 1
    ratio = base.num_params() / equi.num_params()
    assert abs(ratio - 1.0) <= 0.10
    obs = rng.normal(size=(1, cfg.obs_rep.dim))
    act = rng.normal(size=(1, cfg.act_rep.dim))
    # the u=1 network is evaluated against the C_8 action on its data types
    violations = 0
    for seed in range(10):
        b = build_matched_baseline(cfg, seed=seed)
        res = _data_equivariance_residual(b, obs, act, 11, u=8)
        violations += res > 0.1
    assert violations >= 9


def _data_equivariance_residual(net, obs, act, k, u):
    base = net.forward(obs, act, k)
    worst = 0.0
    for g in cyclic_elements(u):
        Og = rep_matrix(net.config.obs_rep, g)
        Ag = rep_matrix(net.config.act_rep, g)
        out = net.forward(obs @ Og.T, act @ Ag.T, k)
        want = base @ Ag.T
        worst = max(worst, float(np.max(np.abs(out - want)) / max(1e-12, np.max(np.abs(want)))))
    return worst


# --- persistence -------------------------------------------------------------------

def test_save_load_round_trip(tmp_path, rng):
    net = DenoiserNetwork(small_config(), seed=5)
    save_network(net, tmp_path / "w")
    back = load_network(tmp_path / "w")
    assert np.array_equal(back.get_flat(), net.get_flat())
    obs = rng.normal(size=(2, net.config.obs_rep.dim))
    act = rng.normal(size=(2, net.config.act_rep.dim))
    assert np.array_equal(back.forward(obs, act, 9), net.forward(obs, act, 9))


def test_load_rejects_mismatched_config(tmp_path):
    net = DenoiserNetwork(small_config(), seed=6)
    save_network(net, tmp_path / "w")
    other = small_config(u=4)
    with pytest.raises(ManifestMismatchError):
        load_network(tmp_path / "w", config=other)
