import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracblowup import grid as gr
from fracblowup.linops import (OperatorSpec, apply, dense_operator, interpolate,
                               lowest_eigenpairs, quadratic_form, resolvent_kernel_decay_check,
                               sector_lift, sector_matrix, sector_restrict, solve_deflated)


def rel(g, f, ref):
    return gr.norm(g, f) / gr.norm(g, ref)


def test_kernel_identities_beta_two(gs2):
    g, q = gs2.grid, gs2.q
    Lp, Lm = OperatorSpec("Lplus", 2.0, gs2), OperatorSpec("Lminus", 2.0, gs2)
    assert rel(g, Lm.apply(q), q) < 1e-9
    assert rel(g, Lp.apply(gs2.dq), q) < 1e-8
    assert rel(g, Lp.apply(gs2.lam_q) + 2.0 * q, q) < 1e-8


def test_kernel_identities_beta_19(gs19):
    g, q = gs19.grid, gs19.q
    Lp, Lm = OperatorSpec("Lplus", 1.9, gs19), OperatorSpec("Lminus", 1.9, gs19)
    assert rel(g, Lm.apply(q), q) < 1e-9
    assert rel(g, Lp.apply(gs19.dq), q) < 1e-8
    # box-limited: the algebraic tail makes this converge like L^-2
    assert rel(g, Lp.apply(gs19.lam_q) + 1.9 * q, q) < 1e-5


def test_poschl_teller_spectrum(gs2):
    # L+ = -d^2 + 1 - 15 sech^2(2y): eigenvalues 1 - 4 (3/2 - n)^2 = -8, 0
    Lp = OperatorSpec("Lplus", 2.0, gs2)
    ev = lowest_eigenpairs(Lp, "both", 2)
    assert ev[0][0] == pytest.approx(-8.0, abs=1e-8)
    assert ev[1][0] == pytest.approx(0.0, abs=1e-8)
    assert ev[0][2]["parity"] == "even" and ev[1][2]["parity"] == "odd"
    # L- = -d^2 + 1 - 3 sech^2(2y): ground state energy 0 with eigenfunction Q
    Lm = OperatorSpec("Lminus", 2.0, gs2)
    val, f, _ = lowest_eigenpairs(Lm, "even", 1)[0]
    assert val == pytest.approx(0.0, abs=1e-8)
    q = gs2.q / gr.norm(gs2.grid, gs2.q)
    assert abs(gr.inner(gs2.grid, f, q)) == pytest.approx(1.0, abs=1e-8)


def test_deflated_solves_match_closed_forms(gs2):
    g, q, y = gs2.grid, gs2.q, gs2.grid.y
    Lm = OperatorSpec("Lminus", 2.0, gs2)
    s1 = solve_deflated(Lm, gs2.lam_q, [q])
    # at beta = 2, L-^{-1} Lam Q = -y^2 Q / 4 up to the kernel direction Q
    exact = -(y**2) * q / 4
    exact -= gr.inner(g, exact, q) / gr.inner(g, q, q) * q
    assert rel(g, s1 - exact, exact) < 1e-8
    g1 = solve_deflated(Lm, -gs2.dq, [q])
    assert rel(g, g1 - y * q / 2, q) < 1e-8
    Lp = OperatorSpec("Lplus", 2.0, gs2)
    x, info = solve_deflated(Lp, -2.0 * q, [gs2.dq], return_info=True)
    assert rel(g, x - gs2.lam_q, q) < 1e-8
    assert info.residual < 1e-10


def test_dense_and_sector_forms_agree(gs2, rng):
    gc = gs2.grid.coarsen(256)
    qc = gs2.q[:: gs2.grid.N // 256]
    A = dense_operator("Lplus", 2.0, gc, qc)
    f = np.exp(-(gc.y**2)) * (1 + 0.3 * gc.y**2)
    gsc = type(gs2)(**{**gs2.__dict__, "grid": gc, "q": qc})
    op = OperatorSpec("Lplus", 2.0, gsc)
    assert np.allclose(A @ f, apply(op, f), atol=1e-10)
    As = sector_matrix(A, "even")
    v = sector_restrict(f, "even")
    assert np.allclose(sector_lift(As @ v, gc.N, "even"), A @ f, atol=1e-10)
    assert quadratic_form(op, f) == pytest.approx(gc.h * f @ A @ f, rel=1e-12)


def test_interpolation_is_exact_for_band_limited(g2):
    gc = g2.coarsen(512)
    f = np.exp(-(gc.y**2) / 4)
    fine = interpolate(gc, f, g2)
    assert np.max(np.abs(fine - np.exp(-(g2.y**2) / 4))) < 1e-12
    assert np.array_equal(interpolate(g2, fine, gc), fine[:: 8])
    with pytest.raises(gr.GridError):
        interpolate(gc, f, gr.make_grid(10.0, 512))


@pytest.mark.parametrize("beta", [1.0, 1.5])
def test_resolvent_kernel_decay(beta):
    # the kernel of (|D|^beta + 1)^{-1} decays like |x|^{-1-beta}
    info = resolvent_kernel_decay_check(beta)
    assert info["slope"] == pytest.approx(-(1 + beta), abs=0.05)
    assert info["even_residual"] < 1e-12


def test_unknown_kind():
    with pytest.raises(ValueError):
        OperatorSpec("Lzero", 2.0, None)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(["Lplus", "Lminus", "Cal1", "Cal2", "Hbar1", "Hbar2"]),
       st.integers(0, 2**31))
def test_operators_are_symmetric(gs2, kind, seed):
    r = np.random.default_rng(seed)
    g = gs2.grid
    op = OperatorSpec(kind, 2.0, gs2)
    f = np.exp(-((g.y - r.uniform(-3, 3)) ** 2)) * r.standard_normal()
    h = np.exp(-((g.y - r.uniform(-3, 3)) ** 2) / 2) * r.standard_normal()
    a, b = gr.inner(g, apply(op, f), h), gr.inner(g, f, apply(op, h))
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)
