import numpy as np
import pytest

from fracblowup import grid as gr
from fracblowup.spectral import (COMPACT_SUPPORT_CONSTANT, b_apply, b_form, b_weight,
                                 hardy_constant, hardy_ratio, index_counts, pencil_min,
                                 phi_quantities, q_formula, random_field,
                                 splitting_identity_residual, spectral_delta)


@pytest.fixture(scope="module")
def delta2(gs2, ps2):
    return spectral_delta(2.0, gs2, ps2)


def test_delta_positive_and_frozen(delta2):
    assert delta2["delta"] == pytest.approx(0.23955758162888321, rel=1e-6)
    assert delta2["minimizing_sector"] == "eps2_even"
    assert delta2["sector_minima"]["eps1_odd"] == pytest.approx(0.24008967904141917, rel=1e-6)
    assert delta2["constraint_residual"] < 1e-10
    assert delta2["certificate_gap"] < 1e-10


def test_constraints_are_needed(delta2):
    assert delta2["unconstrained_Cal1_min"] < 0


def test_minimizer_quotient(gs2, delta2):
    from fracblowup.spectral import h_form
    eps = delta2["minimizer"]
    assert h_form(gs2, eps) / b_form(gs2.grid, 2.0, eps) == pytest.approx(delta2["delta"],
                                                                          rel=1e-10)


def test_index_counts(gs2):
    ic = index_counts(2.0, gs2)
    assert ic["Hbar1"] == (1, 1)
    assert ic["Hbar2"] == (1, 0)
    assert ic["stable"]


def test_phi_quantities_positive(gs2):
    pq = phi_quantities(gs2)
    assert pq["q1"] == pytest.approx(0.19670953976163758, rel=1e-6)
    assert pq["q2"] == pytest.approx(0.8757717702573162, rel=1e-3)
    assert pq["q3"] == pytest.approx(0.12177033107054973, rel=1e-6)
    assert pq["stable"]


def test_q_formula():
    assert q_formula(2.0, 0.0, 1.0) == -2.0
    assert q_formula(-1.0, 3.0, 2.0) == pytest.approx(1.0 * (1 + 3.0 / 4))


def test_splitting_identity(gs2, rng):
    g = gs2.grid
    for _ in range(3):
        eps = random_field(g, rng) + 1j * random_field(g, rng)
        assert splitting_identity_residual(gs2, eps) < 1e-12


def test_pencil_identity_problem():
    # A = B gives every quotient one
    g = gr.make_grid(30.0, 512)
    r = pencil_min(g, lambda x: b_apply(g, 1.5, x), b_weight(g), 1.5, "even")
    assert r.value == pytest.approx(1.0, abs=1e-10)


def test_pencil_constraint_respected():
    g = gr.make_grid(30.0, 1024)
    c = np.exp(-g.y**2)
    pot = 2.0 * b_weight(g)
    free = pencil_min(g, lambda x: gr.frac_deriv(g, x, 2.0) + pot * x, pot, 2.0, "even",
                      reduced_points=512)
    con = pencil_min(g, lambda x: gr.frac_deriv(g, x, 2.0) + pot * x, pot, 2.0, "even",
                     constraints=[c], reduced_points=512)
    assert con.constraint_residual < 1e-10
    assert con.value >= free.value - 1e-12
    assert free.certificate_gap < 1e-6


def test_hardy_random_fields(rng):
    g = gr.make_grid(50.0, 2048)
    h = hardy_constant(1.5, g)
    assert h["sector"] == "even"
    assert h["C"] == pytest.approx(3.0332403263664474, rel=1e-6)
    for _ in range(20):
        f = random_field(g, rng, width=20.0)
        assert hardy_ratio(g, 1.5, f) <= h["C"] * (1 + 1e-9)


def test_compact_support_constant():
    assert COMPACT_SUPPORT_CONSTANT == pytest.approx(np.e)
