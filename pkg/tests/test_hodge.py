"""Tests for the Hodge bridge: fundamental solution, pairing, symbol, higher times."""

import math

import numpy as np
import pytest

from froblax import models
from froblax.dressing import dress_loop
from froblax.flows import (
    FlowGenerator,
    GridState,
    LoopState,
    Trajectory,
    _grid_dressing,
    integrate_flow,
    phi_of_b,
)
from froblax.hodge import (
    FundamentalSolution,
    PairingWindow,
    check_eqprfrob,
    check_higher_time,
    fundamental_solution,
    isotropy_report,
    largest_extension_check,
    pairing_G,
    symbol_map,
)
from froblax.reduction import PathInconsistency
from froblax.series import HSeries

GEN_ID = FlowGenerator([[1.0, 1.0]])                   # hbar^{-1} Id
GEN2 = FlowGenerator([[0.0, 0.0], [1.0, 0.0]])         # hbar^{-2} diag(1, 0)


@pytest.fixture(scope="module")
def qh():
    return models.fixture("qh_p1")


@pytest.fixture(scope="module")
def trivial():
    return models.fixture("trivial_diag(2)")


@pytest.fixture(scope="module")
def fs_trivial(trivial):
    return fundamental_solution(trivial, shape=(33, 33), K_vhs=4)


@pytest.fixture(scope="module")
def fs_qh(qh):
    return fundamental_solution(qh, shape=(65, 65), K_vhs=4)


@pytest.fixture(scope="module")
def traj_r2(qh):
    state = GridState.from_model(qh, shape=(65, 65))
    return integrate_flow(state, GEN2, dt=5e-4, steps=4, record_every=1)


def node_point(fs, i, j):
    return np.array([fs.axes[0][i], fs.axes[1][j]])


# ---------------------------------------------------------------- #
# fundamental solution


def test_trivial_diag_closed_form(fs_trivial):
    # phi_k = diag(x)^k / k! for the constant diagonal family
    X = np.stack(np.meshgrid(*fs_trivial.axes, indexing="ij"), axis=-1)
    for k in range(fs_trivial.K_vhs + 1):
        D = np.zeros(X.shape[:-1] + (2, 2), dtype=complex)
        D[..., 0, 0] = X[..., 0] ** k / math.factorial(k)
        D[..., 1, 1] = X[..., 1] ** k / math.factorial(k)
        assert np.max(np.abs(fs_trivial.phi[..., k, :, :] - D)) < 1e-13
    assert fs_trivial.path_consistency == 0.0
    assert fs_trivial.residual_interior < 1e-12


def test_basepoint_is_identity(fs_qh):
    stack = fs_qh.coeffs_at(fs_qh.base_idx)
    assert np.array_equal(stack[0], np.eye(2))
    assert np.max(np.abs(stack[1:])) == 0.0


def test_qh_residuals(fs_qh):
    assert isinstance(fs_qh, FundamentalSolution)
    assert fs_qh.path_consistency < 1e-12
    assert fs_qh.residual_interior < 1e-6


def test_tree_choice_is_immaterial(qh):
    fs_r = fundamental_solution(qh, shape=(33, 33), K_vhs=3, tree="rows")
    fs_c = fundamental_solution(qh, shape=(33, 33), K_vhs=3, tree="cols")
    assert np.max(np.abs(fs_r.phi - fs_c.phi)) < 1e-12


def test_trapezoid_quadrature_is_coarser(qh):
    fs_s = fundamental_solution(qh, shape=(33, 33), K_vhs=4)
    fs_t = fundamental_solution(qh, shape=(33, 33), K_vhs=4,
                                quadrature="trapezoid")
    assert fs_t.quadrature == "trapezoid"
    assert fs_t.residual_interior > 100 * fs_s.residual_interior
    assert fs_t.path_consistency < 1e-12  # both trees share the rule


def test_non_flat_family_is_rejected():
    def bad_C(x):
        x = np.asarray(x, dtype=float)
        C = np.zeros(x.shape[:-1] + (2, 2, 2))
        C[..., 0, :, :] = np.eye(2)
        C[..., 1, 0, 1] = np.exp(x[..., 1])
        C[..., 1, 1, 0] = 1.0 + 0.5 * x[..., 0]   # breaks closedness
        return C

    bad = models.FrobeniusModel(
        name="broken", n=2, eta=np.array([[0.0, 1.0], [1.0, 0.0]]),
        unit=np.array([1.0, 0.0]), domain=((-1.0, 1.0), (-1.0, 1.0)),
        basepoint=np.zeros(2), eval_C=bad_C)
    with pytest.raises(PathInconsistency, match="paths disagree"):
        fundamental_solution(bad, shape=(33, 33), K_vhs=3)


def test_argument_validation(qh):
    with pytest.raises(ValueError, match="K_vhs"):
        fundamental_solution(qh, shape=(33, 33), K_vhs=0)
    with pytest.raises(ValueError, match="quadrature"):
        fundamental_solution(qh, shape=(33, 33), quadrature="simpson")
    with pytest.raises(ValueError, match="tree"):
        fundamental_solution(qh, shape=(33, 33), tree="diagonal")
    with pytest.raises(ValueError, match="17 nodes"):
        fundamental_solution(qh, shape=(9, 9))
    with pytest.raises(ValueError, match="entries"):
        fundamental_solution(qh, shape=(33,))


def test_node_lookup(fs_qh):
    x = node_point(fs_qh, 40, 7)
    assert fs_qh.node_of(x) == (40, 7)
    with pytest.raises(ValueError, match="not a grid node"):
        fs_qh.node_of(x + 1e-3)


# ---------------------------------------------------------------- #
# the structural identities


def test_eqprfrob_trivial_machine_zero(fs_trivial, trivial):
    rep = check_eqprfrob(fs_trivial, trivial)
    for key, val in rep.items():
        assert val < 1e-12, key


def test_eqprfrob_qh(fs_qh, qh):
    rep = check_eqprfrob(fs_qh, qh)
    assert rep["second_derivative"] < 1e-6
    assert rep["pairing_metric"] < 1e-6
    assert rep["unit_direction"] < 1e-6
    assert rep["eta_constancy"] < 1e-8


def test_eqprfrob_a2():
    a2 = models.fixture("a2_poly")
    fs = fundamental_solution(a2, shape=(65, 65), K_vhs=4)
    rep = check_eqprfrob(fs, a2)
    assert rep["second_derivative"] < 1e-7
    assert rep["pairing_metric"] < 1e-10
    assert rep["unit_direction"] < 1e-10
    assert rep["eta_constancy"] < 1e-12


# ---------------------------------------------------------------- #
# the pairing


def random_vectors(seed):
    rng = np.random.default_rng(seed)
    a = {0: rng.standard_normal(2) + 1j * rng.standard_normal(2),
         -2: rng.standard_normal(2)}
    b = {1: rng.standard_normal(2),
         -1: rng.standard_normal(2) + 1j * rng.standard_normal(2)}
    return a, b


def test_pairing_twisted_symmetry_is_exact(fs_qh):
    a, b = random_vectors(3)
    x = node_point(fs_qh, 22, 51)
    G_ab = pairing_G(a, b, fs_qh, x=x)
    G_ba = pairing_G(b, a, fs_qh, x=x)
    assert G_ab.exponents() == G_ba.exponents()
    n = fs_qh.n
    for m in G_ab.exponents():
        sign = (-1.0) ** ((n + m) % 2)
        assert complex(G_ab.coeff(m)) == sign * complex(G_ba.coeff(m))


def test_pairing_hbar_linearity_is_exact(fs_qh):
    a, b = random_vectors(4)
    x = node_point(fs_qh, 10, 30)
    G = pairing_G(a, b, fs_qh, x=x)
    a_up = {k + 1: v for k, v in a.items()}
    b_dn = {k + 1: -v for k, v in b.items()}
    G_up = pairing_G(a_up, b, fs_qh, x=x)
    G_dn = pairing_G(a, b_dn, fs_qh, x=x)
    assert G_up.k_min == G.k_min + 1 and G_up.k_max == G.k_max + 1
    for m in G.exponents():
        assert complex(G_up.coeff(m + 1)) == complex(G.coeff(m))
        assert complex(G_dn.coeff(m + 1)) == complex(G.coeff(m))


def test_pairing_x_independence(fs_qh):
    a, b = random_vectors(5)
    G = pairing_G(a, b, fs_qh, x=node_point(fs_qh, 48, 16))
    assert G.x_independence < 1e-6
    G0 = pairing_G(a, b, fs_qh)            # at the basepoint: zero by definition
    assert G0.x_independence == 0.0


def test_pairing_of_lattice_generator(fs_trivial):
    # a = b = phi rho_1: the pairing is -eta_11 hbar^n on the nose, nothing below
    idx = fs_trivial.node_of(node_point(fs_trivial, 20, 12))
    stack = fs_trivial.coeffs_at(idx)
    a = {-d: stack[d, :, 0] for d in range(fs_trivial.K_vhs + 1)}
    G = pairing_G(a, a, fs_trivial)
    n = fs_trivial.n
    assert complex(G.coeff(n)) == -1.0     # eta_11 = 1 for the diagonal fixture
    for m in G.exponents():
        if m < n:
            assert complex(G.coeff(m)) == 0.0


def test_pairing_window_guard(fs_qh):
    a, b = random_vectors(6)
    G = pairing_G(a, b, fs_qh)
    assert isinstance(G, PairingWindow)
    assert G.exponents() == list(range(G.k_min, G.k_max + 1))
    with pytest.raises(KeyError, match="outside reliable window"):
        G.coeff(G.k_min - 1)


def test_pairing_independent_of_construction_tree(qh):
    fs_r = fundamental_solution(qh, shape=(33, 33), K_vhs=4, tree="rows")
    fs_c = fundamental_solution(qh, shape=(33, 33), K_vhs=4, tree="cols")
    a, b = random_vectors(11)
    x = node_point(fs_r, 22, 9)
    G_r = pairing_G(a, b, fs_r, x=x)
    G_c = pairing_G(a, b, fs_c, x=x)
    for m in G_r.exponents():
        assert abs(complex(G_r.coeff(m)) - complex(G_c.coeff(m))) < 1e-12


def test_isotropy_window(fs_qh):
    rep = isotropy_report(fs_qh, x=node_point(fs_qh, 21, 16))
    assert rep["below_n"] < 1e-6
    assert 0.9 < rep["at_n"] < 1.1


# ---------------------------------------------------------------- #
# the symbol of d/dx


def test_symbol_recovers_multiplication(fs_qh, qh):
    rep = symbol_map(fs_qh, qh, x=node_point(fs_qh, 21, 43))
    assert rep["deviation"] < 1e-6
    assert rep["unit_direction"] < 1e-12
    assert rep["transversality"] < 1e-6
    assert rep["upper_window"] < 1e-12


def test_symbol_trivial_exact(fs_trivial, trivial):
    rep = symbol_map(fs_trivial, trivial, x=node_point(fs_trivial, 20, 12))
    for key, val in rep.items():
        assert val < 1e-12, key


# ---------------------------------------------------------------- #
# higher times along integrated trajectories


def test_higher_time_unit_flow_is_flat(qh):
    state = GridState.from_model(qh, shape=(33, 33))
    traj = integrate_flow(state, GEN_ID, dt=1e-3, steps=4, record_every=1)
    rep = check_higher_time(traj, GEN_ID)
    assert set(rep) == {-1, -2}
    for val in rep.values():
        assert val < 1e-12


def test_higher_time_r2(traj_r2):
    rep = check_higher_time(traj_r2, GEN2)
    assert set(rep) == {-1, -2, -3}
    for order, val in rep.items():
        assert val < 1e-5, order


def test_higher_time_ablation_detects_missing_term(traj_r2):
    full = check_higher_time(traj_r2, GEN2)
    ablated = check_higher_time(traj_r2, GEN2, ablate=2)
    assert ablated[-2] > 0.1
    assert ablated[-2] > 1e3 * full[-2]
    assert ablated[-3] == 0.0


def test_higher_time_guards(qh, traj_r2):
    short = Trajectory(times=traj_r2.times[:2], states=traj_r2.states[:2],
                       diagnostics={})
    with pytest.raises(ValueError, match="three recorded"):
        check_higher_time(short, GEN2)
    skewed = Trajectory(times=np.array([0.0, 1e-3, 3e-3]),
                        states=traj_r2.states[:3], diagnostics={})
    with pytest.raises(ValueError, match="cadence"):
        check_higher_time(skewed, GEN2)
    with pytest.raises(ValueError, match="neighbours"):
        check_higher_time(traj_r2, GEN2, index=0)
    with pytest.raises(ValueError, match="ablate"):
        check_higher_time(traj_r2, GEN2, ablate=3)
    loop = LoopState.from_model(qh)
    loop_traj = integrate_flow(loop, GEN_ID, dt=1e-3, steps=2, record_every=1)
    with pytest.raises(NotImplementedError, match="grid trajectories"):
        check_higher_time(loop_traj, GEN_ID)


# ---------------------------------------------------------------- #
# admissibility of candidate generators


@pytest.fixture(scope="module")
def dressed_T(traj_r2):
    state = traj_r2.states[0]
    _, _, T = _grid_dressing(state, state.C, 4, 1e-8, 1e-3)
    return T


def test_extension_round_trip(dressed_T):
    phi = phi_of_b(dressed_T, GEN2)
    candidate = HSeries({-1: phi.coeff(-1), -2: phi.coeff(-2)}, -2, -1)
    out = largest_extension_check(dressed_T, candidate)
    assert out["ok"]
    assert np.max(np.abs(out["entries"] - GEN2.entries)) < 1e-10
    assert all(v < 1e-10 for v in out["offdiag"].values())
    assert all(v < 1e-10 for v in out["nonconstancy"].values())


def test_extension_rejects_offdiagonal(trivial):
    # the diagonal fixture dresses trivially, so the conjugation is transparent
    state = GridState.from_model(trivial, shape=(17, 17))
    _, _, T = _grid_dressing(state, state.C, 2, 1e-8, 1e-3)
    candidate = HSeries({-1: np.array([[0.0, 0.3], [0.3, 0.0]],
                                      dtype=complex)}, -1, 1)
    out = largest_extension_check(T, candidate)
    assert not out["ok"]
    assert out["entries"] is None
    assert abs(out["offdiag"][-1] - 0.3) < 1e-12


def test_extension_rejects_nonconstant_b2(qh):
    loop = LoopState.from_model(qh)
    ld = dress_loop(loop.C, eta=loop.eta, K=4, s=loop.s)
    T = ld.T_full
    wobble = 1.0 + 0.3 * np.sin(loop.s)
    bad = np.zeros((loop.N, 2, 2), dtype=complex)
    bad[:, 1, 1] = wobble
    candidate = (T @ HSeries({-2: bad}, -2, 2)) @ T.inverse(order=4)
    out = largest_extension_check(T, candidate.clip(-2, -1))
    assert not out["ok"]
    assert abs(out["nonconstancy"][-2] - 0.3) < 1e-2
    assert out["offdiag"][-2] < 1e-6
