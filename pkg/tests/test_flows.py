"""Tests for Lax flows: generators, velocities, integration, Hamiltonians."""

import numpy as np
import pytest

from froblax import models
from froblax.diffops import loop_integral
from froblax.dressing import dress_loop
from froblax.flows import (
    FlowAborted,
    FlowGenerator,
    GridState,
    LinearFunctional,
    LoopState,
    check_commutativity,
    check_commutator_identity,
    check_dressed_gauge_evolution,
    check_hamiltonian_consistency,
    check_jacobi_pencil,
    conserved_quantities,
    conserved_table,
    hamiltonians,
    integrate_flow,
    lax_rhs_grid,
    lax_rhs_loop,
    max_relative_drift,
    phi_of_b,
    phi_well_defined,
    poisson_bracket,
    spectral_drift,
    _comm,
)

GEN1 = FlowGenerator([[1.0, 0.0]])                     # hbar^{-1} diag(1, 0)
GEN2 = FlowGenerator([[0.0, 0.0], [1.0, 0.0]])         # hbar^{-2} diag(1, 0)
GEN_MIX = FlowGenerator([[0.0, 2.0], [1.0, -1.0]])


@pytest.fixture(scope="module")
def qh():
    return models.fixture("qh_p1")


@pytest.fixture(scope="module")
def loop(qh):
    return LoopState.from_model(qh)


@pytest.fixture(scope="module")
def grid(qh):
    return GridState.from_model(qh, shape=(33, 33))


def scalar_loop(N=64):
    s = np.linspace(0.0, 2.0 * np.pi, N, endpoint=False)
    c = 1.5 + 0.3 * np.sin(s) + 0.1 * np.cos(2 * s)
    return LoopState(s=s, C=c[:, None, None].astype(complex),
                     eta=np.eye(1), t=0.0)


# --------------------------------------------------------------------- #
# generators


def test_generator_shape_and_pole_order():
    assert GEN1.m == 1 and GEN1.n == 2
    assert GEN2.m == 2
    # trailing zero rows do not inflate the pole order
    assert FlowGenerator([[1.0, 0.0], [0.0, 0.0]]).m == 1
    with pytest.raises(ValueError, match="zero generator"):
        FlowGenerator([[0.0, 0.0]])


def test_generator_series_window():
    b = GEN2.series(k_max=1)
    assert (b.k_min, b.k_max) == (-2, 1)
    assert np.array_equal(b.coeff(-2), np.diag([1.0, 0.0]))
    assert np.all(b.coeff(-1) == 0)


def test_generator_from_strings():
    g = FlowGenerator.from_strings(["2:0,1", "1:1,0"], n=2)
    assert g.m == 2
    assert np.array_equal(g.entries, np.array([[1, 0], [0, 1]], dtype=complex))
    for bad in (["x:1,0"], ["0:1,0"], ["1:1"]):
        with pytest.raises(ValueError):
            FlowGenerator.from_strings(bad, n=2)


# --------------------------------------------------------------------- #
# phi(b)


def test_phi_needs_window_at_least_pole_order(loop):
    ld = dress_loop(loop.C, eta=loop.eta, K=1, s=loop.s)
    with pytest.raises(ValueError, match="too small"):
        phi_of_b(ld.T_full, GEN2)


def test_phi_gauge_invariant(loop):
    ld = dress_loop(loop.C, eta=loop.eta, K=3, s=loop.s)
    assert phi_well_defined(ld.T_full, GEN2) < 1e-14


def test_commutator_identity_three_generators(loop):
    """[L, phi(b)_{<0}] = hbar^{-1}[C, phi(b)_0] per coefficient, < 1e-8."""
    for gen in (GEN1, GEN2, GEN_MIX):
        ld = dress_loop(loop.C, eta=loop.eta, K=gen.m, s=loop.s)
        res = check_commutator_identity(ld, gen)
        assert set(res) == {-j for j in range(1, gen.m + 2)}
        assert max(res.values()) < 1e-8, (gen.entries, res)


# --------------------------------------------------------------------- #
# stationary cases


def test_unit_generator_is_stationary(loop):
    """b = hbar^{-1} Id conjugates to itself: phi_0 is central, rhs == 0."""
    rhs = lax_rhs_loop(loop, FlowGenerator([[1.0, 1.0]]))
    assert np.max(np.abs(rhs)) < 1e-13


def test_n1_flow_identically_stationary():
    st = scalar_loop()
    gen = FlowGenerator([[2.0]])
    rhs = lax_rhs_loop(st, gen)
    assert np.array_equal(rhs, np.zeros_like(rhs))     # exact, not approximate
    traj = integrate_flow(st, gen, dt=1e-2, steps=3, dealias=False)
    assert np.array_equal(traj.states[-1].C, st.C)


def test_n1_hamiltonian_closed_forms():
    st = scalar_loop()
    H, Ht = hamiltonians(st, FlowGenerator([[2.0]]))
    assert H == 0.0                                    # I_0 vanishes identically
    expected = 2.0 * complex(loop_integral(-st.C[:, 0, 0]))
    assert abs(Ht - expected) < 1e-12 * abs(expected)


# --------------------------------------------------------------------- #
# conserved quantities


def test_conserved_quantities_shapes(loop):
    I = conserved_quantities(loop, K=3)
    assert set(I) == {-1, 0, 1, 2}
    assert all(v.shape == (2,) for v in I.values())
    # even-level densities vanish identically
    assert np.max(np.abs(I[0])) < 1e-15
    assert np.max(np.abs(I[2])) < 1e-15


def test_max_relative_drift_floor():
    # a quantity that starts at zero is measured against the table scale,
    # not against itself
    table = np.array([[[1.0, 0.0]], [[1.0, 1e-8]]])
    assert max_relative_drift(table, floor_scale=1e-6) == pytest.approx(1e-2)


def test_one_step_isospectral(loop):
    traj = integrate_flow(loop, GEN2, dt=1e-3, steps=1)
    assert spectral_drift(traj) < 1e-13


def test_second_order_flow_conservation(loop):
    """200 RK4 steps of the hbar^{-2} flow: every I_k^j held to < 1e-8,
    pointwise eigenvalues to < 1e-10, without the run being vacuous."""
    traj = integrate_flow(loop, GEN2, dt=1e-3, steps=200, record_every=20)
    displacement = float(np.max(np.abs(traj.states[-1].C - loop.C)))
    assert displacement > 1e-3                         # the field actually moved
    assert max_relative_drift(conserved_table(traj, K=3)) < 1e-8
    assert spectral_drift(traj) < 1e-10
    assert traj.diagnostics["reality_defect"] < 1e-13
    assert max(traj.diagnostics["edge_band"]) < 1e-8


def test_flows_commute_richardson(loop):
    """Defect of composing the hbar^{-1} and hbar^{-2} flows in both orders
    drops by ~8 under dt -> dt/2: the O(dt^2) term cancels iff they commute."""
    r = check_commutativity(loop, GEN1, GEN2, dt=1e-2)
    assert 7.0 < r["ratio"] < 9.0
    assert r["defect"] < 1e-8


# --------------------------------------------------------------------- #
# integration guards and diagnostics


def test_integrate_refuses_unresolved_loop(loop):
    rng = np.random.default_rng(3)
    rough = loop.C + 1e-6 * rng.standard_normal(loop.C.shape)
    st = LoopState(s=loop.s, C=rough, eta=loop.eta, t=0.0)
    with pytest.raises(ValueError, match="not spectrally resolved"):
        integrate_flow(st, GEN1, dt=1e-3, steps=1)


def test_abort_carries_flow_time(loop):
    # the spectrum gap of this loop is ~2, so a huge collision_tol trips the
    # dressing inside the first stage evaluation
    with pytest.raises(FlowAborted, match="gap") as ei:
        integrate_flow(loop, GEN1, dt=1e-3, steps=1, collision_tol=3.0)
    assert ei.value.t == 0.0
    # an impossible edge tolerance aborts at the first recording point
    with pytest.raises(FlowAborted, match="resolved band") as ei:
        integrate_flow(loop, GEN1, dt=1e-3, steps=2, record_every=1,
                       edge_tol=0.0)
    assert ei.value.t == pytest.approx(1e-3)


def test_trajectory_diagnostics_present(loop):
    traj = integrate_flow(loop, GEN1, dt=1e-3, steps=2, record_every=1)
    assert len(traj) == 3
    assert len(traj.diagnostics["nyquist_tail"]) == 3
    assert len(traj.diagnostics["edge_band"]) == 3
    assert traj.diagnostics["reality_defect"] < 1e-13
    assert traj.states[0].t == 0.0 and traj.states[-1].t == pytest.approx(2e-3)


# --------------------------------------------------------------------- #
# Hamiltonian structure


def test_hamiltonian_consistency(loop):
    """FD gradient of H_b matches -phi(b)_0 (transposed), and the flow is
    Hamiltonian for both brackets, all to 1e-4; a corrupted velocity of size
    1e-3 is seen by every comparison."""
    r = check_hamiltonian_consistency(loop, GEN2)
    assert r["grad_vs_phi0"] < 1e-4
    assert r["rhs_vs_bracket0_field"] < 1e-4
    assert r["rhs_vs_bracket1_field"] < 1e-4
    assert r["grad_tilde_vs_phi_minus1"] < 1e-4
    assert r["rhs_scale"] > 1e-3                       # comparisons not vacuous
    bad = check_hamiltonian_consistency(loop, GEN2, phi0_corruption=1e-3)
    for key in ("grad_vs_phi0", "rhs_vs_bracket0_field",
                "rhs_vs_bracket1_field"):
        assert bad[key] > 1e-4, key


def test_linear_functional_variational_field():
    rng = np.random.default_rng(11)
    N, n = 32, 2
    s = np.linspace(0.0, 2.0 * np.pi, N, endpoint=False)
    C = (rng.standard_normal((N, n, n)) @ np.diag([1.0, 0.5])).astype(complex)
    st = LoopState(s=s, C=C, eta=np.eye(n), t=0.0)
    kernel = rng.standard_normal((N, n, n)) + 0j
    f = LinearFunctional(kernel)
    # the functional is linear, so a large displacement is exact and keeps
    # the difference above cancellation noise
    eps, w = 1e-3, 2.0 * np.pi / N
    Cp = C.copy()
    Cp[5, 1, 0] += eps
    fd = (f.value(LoopState(s=s, C=Cp, eta=np.eye(n), t=0.0)) - f.value(st))
    assert fd / (w * eps) == pytest.approx(f.variational_field(st)[5, 1, 0],
                                           rel=1e-9)


def test_poisson_brackets_antisymmetric_and_closed_form():
    rng = np.random.default_rng(5)
    N, n = 32, 2
    s = np.linspace(0.0, 2.0 * np.pi, N, endpoint=False)
    base = rng.standard_normal((N, n, n)) + 0j
    st = LoopState(s=s, C=base, eta=np.eye(n), t=0.0)
    A = np.cos(s)[:, None, None] * rng.standard_normal((n, n)) + 0j
    B = np.sin(2 * s)[:, None, None] * rng.standard_normal((n, n)) + 0j
    F, G = np.swapaxes(A, -1, -2), np.swapaxes(B, -1, -2)
    for which in (0, 1):
        fg = poisson_bracket(F, G, which, st)
        gf = poisson_bracket(G, F, which, st)
        assert abs(fg + gf) < 1e-13
    closed0 = complex(loop_integral(
        np.einsum("...ij,...ji->...", _comm(A, B), st.C)))
    assert poisson_bracket(F, G, 0, st) == pytest.approx(closed0, abs=1e-13)


def test_jacobi_identity_bracket_pencil():
    assert check_jacobi_pencil(lams=(0.0, 1.0, -2.0), N=32) < 1e-10


# --------------------------------------------------------------------- #
# the flow in the diagonal gauge


def test_dressed_gauge_evolution(loop):
    traj = integrate_flow(loop, GEN1, dt=5e-3, steps=20, record_every=5)
    r = check_dressed_gauge_evolution(traj, GEN1)
    assert r["frame"] < 1e-5
    assert r["rotation"] < 1e-5
    assert r["eigenvalues"] < 1e-10


# --------------------------------------------------------------------- #
# grid flows


def test_grid_rhs_moves_family_along_shared_velocity(grid):
    rhs = lax_rhs_grid(grid, GEN1)
    assert np.max(np.abs(rhs[..., 0, :, :])) == 0.0    # unit direction frozen
    assert np.max(np.abs(rhs[..., 1, :, :])) > 1e-2
    assert np.max(np.abs(rhs.imag)) == 0.0


def test_grid_flow_preserves_flatness(grid):
    traj = integrate_flow(grid, GEN2, dt=1e-3, steps=4, record_every=1)
    eye = np.broadcast_to(np.eye(2), grid.C[..., 0, :, :].shape)
    for st in traj.states:
        flat = st.flatness()
        assert flat["commutator"] < 1e-14
        assert flat["curl"] < 1e-10
        assert np.array_equal(st.C[..., 0, :, :], eye)
        assert np.max(np.abs(np.asarray(st.C).imag)) == 0.0
    moved = float(np.max(np.abs(traj.states[-1].C - grid.C)))
    assert 1e-5 < moved < 1e-2


def test_integrate_refuses_nonflat_family(grid):
    import dataclasses
    C = grid.C.copy()
    C[5, 7, 1, 0, 1] += 1e-5                           # one-node dent: curl blows up
    bad = dataclasses.replace(grid, C=C)
    with pytest.raises(ValueError, match="not flat"):
        integrate_flow(bad, GEN1, dt=1e-3, steps=1)
