import warnings

import numpy as np
import pytest

from fracblowup import grid as gr
from fracblowup.ground import ConvergenceError
from fracblowup.profile import (assemble_W, build_profiles, dW_db, energy_expansion,
                                nonlinearity, residual_Psi, residual_slopes,
                                scaling_invariance_check, taylor_defect_report,
                                virial_pairing)


def _kernel_free(g, f, k):
    # remove the component along k
    return f - gr.inner(g, f, k) / gr.inner(g, k, k) * k


def test_solvability_and_parity(ps2, ps19):
    for ps in (ps2, ps19):
        assert max(ps.solvability_residuals.values()) < 1e-8
        assert max(ps.parity_residuals().values()) < 1e-12


def test_first_order_closed_forms(ps2):
    g, q = ps2.grid, ps2.q
    s1 = _kernel_free(g, -g.y**2 * q / 4, q)
    assert gr.norm(g, ps2.S1 - s1) / gr.norm(g, s1) < 1e-8
    g1 = g.y * q / 2
    assert gr.norm(g, ps2.G1 - g1) / gr.norm(g, g1) < 1e-8


def test_c0_closed_form(ps2):
    # c0 = |Q|^2 / 4 for the quartic-order operator
    assert ps2.c0 == pytest.approx(np.sqrt(3) * np.pi / 8, rel=1e-8)
    assert ps2.c0 == pytest.approx(0.6801747615895808, rel=1e-10)


def test_c0_from_energy(ps2):
    e = energy_expansion(ps2)
    assert e["c0_fit"] == pytest.approx(e["c0_formula"], rel=2e-2)
    assert e["E0"] == pytest.approx(0.0, abs=1e-9)


def test_W_at_origin_is_Q(ps2):
    assert np.max(np.abs(assemble_W(ps2, 0.0, 0.0) - ps2.q)) < 1e-14
    r = residual_Psi(ps2, 0.0, 0.0)
    assert r["norms"]["L2"] < 1e-9


def test_dW_db_matches_difference(ps2):
    h = 1e-5
    fd = (assemble_W(ps2, 0.01 + h, 0.0) - assemble_W(ps2, 0.01 - h, 0.0)) / (2 * h)
    assert np.max(np.abs(dW_db(ps2, 0.01, 0.0) - fd)) < 1e-8


def test_parameter_limits(ps2):
    with pytest.raises(ValueError):
        assemble_W(ps2, 0.31, 0.0)
    with pytest.warns(UserWarning):
        assemble_W(ps2, 0.2, 0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assemble_W(ps2, 0.05, 0.05)


def test_residual_slopes_beta2(ps2):
    s = residual_slopes(ps2)
    assert s["slope_b"] == pytest.approx(5.0, abs=0.3)
    assert s["slope_v"] == pytest.approx(3.0, abs=0.3)
    assert s["defect_floor_b"] < 1e-8


def test_derived_cascade_cancels_low_orders(gs2):
    rep = taylor_defect_report(gs2)
    d, p = rep["derived"], rep["printed"]
    for key in ("b^0", "b^1", "b^2", "b^3", "b^4", "v^0", "v^1", "v^2", "bv", "b^2v"):
        assert d[key] < 1e-9, key
    # the literal right-hand sides leave order-one defects
    for key in ("b^3", "v^2", "b^2v"):
        assert p[key] > 1e-2, key


def test_printed_variant_fails_solvability(gs2):
    with pytest.raises(ConvergenceError):
        build_profiles(gs2, variant="printed", solvability_limit=1e-8)


def test_scaling_identity(ps2):
    ok = scaling_invariance_check(ps2, 0.05, 0.02)
    bad = scaling_invariance_check(ps2, 0.05, 0.02, form="printed")
    assert ok["mismatch"] / ok["lhs_norm"] < 1e-9
    assert bad["mismatch"] / bad["lhs_norm"] > 1e-3


def test_virial_pairing(ps2):
    assert virial_pairing(ps2)["relative_gap"] < 1e-4


def test_nonlinearity_dealias_consistent(ps2):
    W = assemble_W(ps2, 0.03, 0.01)
    a = nonlinearity(W, 2.0, dealias=True)
    b = nonlinearity(W, 2.0, dealias=False)
    assert np.max(np.abs(a - b)) < 1e-8


def test_unknown_variant(gs2):
    with pytest.raises(ValueError):
        build_profiles(gs2, variant="other")
