import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import GREEN_AT_ONE
from scatterlab.forward import (MeasurementSet, SolverDivergence, apply_A, apply_A_adjoint, assemble_G,
                                assemble_Gr, build_system, forward_solve, green, measure, relative_error,
                                rhs, synth_data)
from scatterlab.numkit import GmresOptions
from scatterlab.scene import build_grid, incident_fields, incident_set, receiver_ring


def test_green_value_and_diagonal():
    g = green(1.0, np.array([1.0]))[0]
    assert g.real == pytest.approx(GREEN_AT_ONE[0], abs=1e-9)
    assert g.imag == pytest.approx(GREEN_AT_ONE[1], abs=1e-9)
    G = assemble_G(build_grid(4, "zero"), 3.0)
    assert np.all(np.diag(G) == 0)


@pytest.mark.parametrize("n_side", [3, 6])
def test_G_symmetric_not_hermitian(n_side):
    G = assemble_G(build_grid(n_side, "zero"), 2 * np.pi)
    assert np.allclose(G, G.T, atol=1e-15)
    assert not np.allclose(G, G.conj().T)


def test_G_matches_pairwise_kernel():
    grid = build_grid(5, "zero")
    k = 4.0
    G = assemble_G(grid, k)
    p = grid.positions
    i, j = 3, 17
    assert G[i, j] == pytest.approx(green(k, np.array([np.linalg.norm(p[i] - p[j])]))[0], rel=1e-13)


def test_Gr_shape_and_entry():
    grid = build_grid(4, "q4")
    rec = receiver_ring(7, 0.8)
    gr = assemble_Gr(rec, grid, 5.0)
    assert gr.shape == (7, 16)
    r = np.linalg.norm(rec.positions[2] - grid.positions[9])
    assert gr[2, 9] == pytest.approx(green(5.0, np.array([r]))[0], rel=1e-13)


def test_zero_charges_give_identity_and_zero_field():
    sys = build_system(build_grid(4, "zero"), 7.0)
    assert np.array_equal(sys.dense(), np.eye(16))
    u, _ = forward_solve(sys, np.ones(16))
    assert np.all(u == 0)


def test_matrix_free_matches_dense():
    grid = build_grid(6, "q4")
    a = build_system(grid, 2 * np.pi * 3)
    b = build_system(grid, 2 * np.pi * 3, dense=False)
    v = np.random.default_rng(0).standard_normal(36) + 1j
    assert np.allclose(apply_A(a, v), apply_A(b, v), rtol=1e-13, atol=1e-13)
    assert np.allclose(apply_A_adjoint(a, v), apply_A_adjoint(b, v), rtol=1e-13, atol=1e-13)


def test_adjoint_inner_product():
    sys = build_system(build_grid(5, "q16"), 9.0)
    rng = np.random.default_rng(3)
    x = rng.standard_normal(25) + 1j * rng.standard_normal(25)
    y = rng.standard_normal(25) + 1j * rng.standard_normal(25)
    assert np.vdot(y, apply_A(sys, x)) == pytest.approx(np.vdot(apply_A_adjoint(sys, y), x), rel=1e-12)


def test_born_limit():
    # weak scatterers: u_scat ~ rhs to first order in q
    grid = build_grid(6, "q4")
    scale = 1e-5
    sys = build_system(grid.with_charges(grid.charges * scale), 2 * np.pi)
    u_inc = incident_fields(incident_set(sys.k, 1), grid.positions)[:, 0]
    u, _ = forward_solve(sys, u_inc)
    born = rhs(sys, u_inc)
    assert relative_error(u, born) < 1e-3


@settings(max_examples=15)
@given(st.integers(3, 10), st.sampled_from([1.0, 5.0]), st.integers(0, 2 ** 16))
def test_gmres_agrees_with_lu(n_side, freq, seed):
    rng = np.random.default_rng(seed)
    grid = build_grid(n_side, "zero").with_charges(0.1 * rng.random(n_side ** 2))
    sys = build_system(grid, 2 * np.pi * freq)
    u_inc = incident_fields(incident_set(sys.k, 1), grid.positions)[:, 0]
    ref, _ = forward_solve(sys, u_inc)
    u, rep = forward_solve(sys, u_inc, "gmres", GmresOptions(tol=1e-13, max_iter=2000))
    assert rep.converged
    assert relative_error(u, ref) <= 1e-8


def test_total_field_solves_lippmann_schwinger():
    grid = build_grid(5, "q4")
    sys = build_system(grid, 11.0)
    u_inc = incident_fields(incident_set(sys.k, 2), grid.positions)
    u, _ = forward_solve(sys, u_inc)
    tot = u_inc + u
    lhs = tot + sys.k ** 2 * sys.G @ (sys.q[:, None] * tot)
    assert np.allclose(lhs, u_inc, atol=1e-12)


def test_forward_errors():
    sys = build_system(build_grid(3, "q4"), 1.0)
    with pytest.raises(ValueError):
        forward_solve(sys, np.ones(4))
    with pytest.raises(ValueError):
        forward_solve(sys, np.ones(9), method="cg")
    with pytest.raises(ZeroDivisionError):
        relative_error(np.ones(2), np.zeros(2))


def test_measure_formula():
    grid = build_grid(4, "q4")
    rec = receiver_ring(5)
    sys = build_system(grid, 3.0)
    u_inc = incident_fields(incident_set(3.0, 1), grid.positions)[:, 0]
    u, _ = forward_solve(sys, u_inc)
    gr = assemble_Gr(rec, grid, 3.0)
    assert np.allclose(measure(sys, rec, u_inc, u), -9.0 * gr @ (sys.q * (u_inc + u)))


def test_reciprocity_of_far_data():
    # with the symmetric G the map from direction to data is transpose-symmetric in the
    # scatterer-to-scatterer block: A^T = I + k^2 Q G  so  G Q A^{-1} is symmetric
    grid = build_grid(5, "q16")
    sys = build_system(grid, 6.0)
    m = sys.G @ np.diag(sys.q) @ np.linalg.inv(sys.dense())
    assert np.allclose(m, m.T, atol=1e-12)


def test_synth_data_shapes_and_json_roundtrip(tmp_path):
    grid = build_grid(4, "q4")
    rec = receiver_ring(12)
    data = synth_data(grid, 2.5, 3, rec)
    assert data.data.shape == (3, 12)
    assert data.stacked().shape == (36,)
    path = tmp_path / "d.json"
    data.save(path)
    back = MeasurementSet.load(path)
    assert back.k == data.k and np.array_equal(back.data, data.data)
    assert np.array_equal(back.receivers.positions, rec.positions)


def test_synth_data_gmres_matches_lu_and_noise_is_seeded():
    grid = build_grid(5, "q4")
    rec = receiver_ring(10)
    a = synth_data(grid, 4.0, 2, rec)
    b = synth_data(grid, 4.0, 2, rec, solver="gmres", opts=GmresOptions(tol=1e-13, max_iter=500))
    assert relative_error(b.data, a.data) < 1e-9
    n1 = synth_data(grid, 4.0, 2, rec, noise=0.01, seed=5)
    n2 = synth_data(grid, 4.0, 2, rec, noise=0.01, seed=5)
    assert np.array_equal(n1.data, n2.data)
    assert 0.001 < relative_error(n1.data, a.data) < 0.05


def test_synth_data_reports_divergence():
    grid = build_grid(6, "q4")
    with pytest.raises(SolverDivergence):
        synth_data(grid, 30.0, 1, receiver_ring(4), solver="gmres", opts=GmresOptions(tol=1e-14, max_iter=2))
