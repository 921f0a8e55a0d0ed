import numpy as np
import pytest

from fracblowup import grid as gr
from fracblowup.ground import (ConvergenceError, decay_fit, equation_residual, gn_quotient,
                               gn_sharp_constant, solve_ground_state)

from conftest import q_exact


def test_closed_form_at_beta_two(gs2, g2):
    assert np.max(np.abs(gs2.q - q_exact(g2.y))) < 1e-6
    assert gs2.residual_norm < 1e-9
    # ||Q||^2 = sqrt(3) pi / 2
    assert gs2.mass == pytest.approx(np.sqrt(3) * np.pi / 2, rel=1e-10)


def test_positive_even_peak_at_origin(gs19):
    g = gs19.grid
    assert gs19.q.min() >= 0
    assert gr.parity_residual(g, gs19.q, "even") < 1e-14
    assert np.argmax(gs19.q) == g.N // 2


def test_energy_vanishes(gs2, gs19):
    for gs in (gs2, gs19):
        assert abs(gs.diagnostics()["energy_ratio"]) < 1e-6


def test_gn_constant_oracle(gs2):
    # sharp constant (beta + 1) / ||Q||^{2 beta} = 4 / pi^2 at beta = 2
    info = gn_sharp_constant(gs2)
    assert info["C_star"] == pytest.approx(4 / np.pi**2, rel=1e-9)
    assert info["identity_mismatch"] < 1e-9


def test_gn_quotient_is_maximized_by_q(gs19, rng):
    g = gs19.grid
    c = gn_quotient(g, gs19.q, 1.9)
    for _ in range(10):
        f = gs19.q * (1 + 0.1 * rng.standard_normal()) + 0.05 * rng.standard_normal() * np.exp(
            -((g.y - rng.uniform(-2, 2)) ** 2))
        assert gn_quotient(g, f, 1.9) <= c * (1 + 1e-12)


def test_petviashvili_frozen_values(gs19):
    # frozen from a converged run on L = 200, N = 2^14
    assert gs19.q[gs19.grid.N // 2] == pytest.approx(1.3384035384660313, rel=1e-9)
    assert gs19.mass == pytest.approx(2.7002511921390995, rel=1e-9)
    assert gs19.iterations < 100


def test_decay_exponent_matches_one_plus_beta(gs19):
    info = decay_fit(gs19.grid, gs19.q, 1.9)
    assert info["image_corrected"] == pytest.approx(2.9, abs=0.05)
    assert info["exponent"] < info["image_corrected"]


def test_decay_exponential_at_beta_two(gs2):
    assert decay_fit(gs2.grid, gs2.q, 2.0)["non_algebraic"]


def test_gaussian_initialization_agrees(gs2, g2):
    other = solve_ground_state(2.0, g2, init="gaussian")
    assert np.max(np.abs(other.q - gs2.q)) < 1e-8


def test_rejects_bad_input(g2):
    with pytest.raises(ValueError):
        solve_ground_state(3.0, g2)
    with pytest.raises(ValueError):
        solve_ground_state(2.0, g2, init="box")
    with pytest.raises(ConvergenceError):
        solve_ground_state(2.0, g2, max_iter=3)


def test_equation_residual_of_exact_profile(g2):
    # the closed form solves the equation up to spectral accuracy
    assert equation_residual(g2, q_exact(g2.y), 2.0) < 1e-9
