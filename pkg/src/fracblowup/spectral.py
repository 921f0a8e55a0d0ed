"""Certification of the virial quadratic form and the Hardy-type estimate.

Every certificate is a generalized symmetric eigenproblem on a parity
sector: a dense solve on a coarse copy of the grid gives a starting vector,
shifted inverse iteration on the full grid refines it.  Linear constraints
(c, eps) = 0 are imposed by an explicit orthogonal projection, so the
restricted pencil stays symmetric with a positive definite right side.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, minres

from . import grid as gr
from .ground import GroundState, solve_ground_state
from .linops import (OperatorSpec, frac_matrix, interpolate, lowest_eigenpairs, sector_lift,
                     sector_matrix, sector_restrict, solve_deflated)

logger = logging.getLogger(__name__)


# --- quadratic forms ----------------------------------------------------------

def b_weight(g: gr.GridSpec) -> np.ndarray:
    return np.exp(-np.abs(g.y))


def poly_weight(g: gr.GridSpec, beta: float) -> np.ndarray:
    return (1.0 + np.abs(g.y)) ** (-beta)


def b_apply(g: gr.GridSpec, beta: float, f: np.ndarray) -> np.ndarray:
    """Operator of the form ||D|^{beta/2} f|^2 + int |f|^2 e^{-|y|}."""
    return gr.frac_deriv(g, f, beta) + b_weight(g) * f


def b_form(g: gr.GridSpec, beta: float, f: np.ndarray) -> float:
    return gr.hdot_sq(g, f.real, beta) + gr.hdot_sq(g, np.imag(f), beta) \
        + float(g.h * np.sum(np.abs(f) ** 2 * b_weight(g)))


def h_form(gs: GroundState, eps: np.ndarray) -> float:
    """(Cal1 eps1, eps1) + (Cal2 eps2, eps2)."""
    g = gs.grid
    e1, e2 = np.real(eps), np.imag(eps)
    c1, c2 = OperatorSpec("Cal1", gs.beta, gs), OperatorSpec("Cal2", gs.beta, gs)
    return gr.inner(g, e1, c1.apply(e1)) + gr.inner(g, e2, c2.apply(e2))


def splitting_identity_residual(gs: GroundState, eps: np.ndarray) -> float:
    """Relative gap in H = (1/10)(|eps|_{H^{b/2}}^2 + int |eps|^2 sech^2(10y/9))
    + (9/10)(Hbar1(eps1) + Hbar2(eps2))."""
    g, beta = gs.grid, gs.beta
    e1, e2 = np.real(eps), np.imag(eps)
    h1, h2 = OperatorSpec("Hbar1", beta, gs), OperatorSpec("Hbar2", beta, gs)
    bump = gr.sech(10.0 * g.y / 9.0) ** 2
    lhs = h_form(gs, eps)
    rhs = 0.1 * (gr.hdot_sq(g, e1, beta) + gr.hdot_sq(g, e2, beta)
                 + g.h * np.sum(np.abs(eps) ** 2 * bump)) \
        + 0.9 * (gr.inner(g, e1, h1.apply(e1)) + gr.inner(g, e2, h2.apply(e2)))
    scale = gr.hdot_sq(g, e1, beta) + gr.hdot_sq(g, e2, beta) + gr.norm(g, eps) ** 2
    return float(abs(lhs - rhs) / scale)


# --- constrained pencil solver ----------------------------------------------

def _proj(g, parity):
    if parity == "even":
        return lambda f: gr.even_part(g, f)
    return lambda f: gr.odd_part(g, f)


@dataclass
class PencilResult:
    value: float
    vector: np.ndarray
    coarse_value: float
    constraint_residual: float
    certificate_gap: float
    iterations_note: str = ""


def pencil_min(g: gr.GridSpec, a_apply, a_potential: np.ndarray, beta: float, parity: str,
               constraints=(), reduced_points: int = 4096, block: int = 3,
               refine: bool = True, largest: bool = False, a_dense=None,
               b_dense=None, b_apply_fn=None) -> PencilResult:
    """Extreme eigenvalue of (A, B) on a parity sector under (c, x) = 0.

    Dense generalized eigensolve on the coarse grid, then shifted inverse
    iteration on the full grid.

    Default pencil: A = |D|^beta + diag(a_potential), B = the weighted form.
    ``a_dense``/``b_dense`` override the coarse matrices (functions of the
    coarse grid) and ``b_apply_fn`` the fine B.
    """
    proj = _proj(g, parity)
    n_red = min(g.N, reduced_points)
    gc = g.coarsen(n_red)
    step = g.N // n_red
    if a_dense is None:
        Ad = frac_matrix(gc, beta)
        Ad[np.diag_indices_from(Ad)] += a_potential[::step]
    else:
        Ad = a_dense(gc)
    if b_dense is None:
        Bd = frac_matrix(gc, beta)
        Bd[np.diag_indices_from(Bd)] += b_weight(gc)
    else:
        Bd = b_dense(gc)
    As, Bs = sector_matrix(Ad, parity), sector_matrix(Bd, parity)
    cons = [proj(c) for c in constraints]
    cons = [c for c in cons if np.linalg.norm(c) > 1e-14 * max(1.0, np.linalg.norm(c))]
    if cons:
        C = np.column_stack([sector_restrict(c[::step], parity) for c in cons])
        Z = sla.null_space(C.T)
    else:
        Z = np.eye(As.shape[0])
    Az, Bz = Z.T @ As @ Z, Z.T @ Bs @ Z
    k = min(block, Az.shape[0])
    if largest:
        vals, vecs = sla.eigh(Az, Bz, subset_by_index=[Az.shape[0] - k, Az.shape[0] - 1])
        vals, vecs = vals[::-1], vecs[:, ::-1]
    else:
        vals, vecs = sla.eigh(Az, Bz, subset_by_index=[0, k - 1])
    coarse = float(vals[0])
    X0 = np.column_stack([proj(interpolate(gc, sector_lift(Z @ v, n_red, parity), g))
                          for v in vecs.T])
    bfun = b_apply_fn or (lambda x: b_apply(g, beta, x))
    note = "dense"
    if refine and g.N > n_red:
        x, note = _inverse_iteration(g, beta, a_apply, bfun, proj, cons, X0[:, 0], largest)
    else:
        x = X0[:, 0]
    # certificate: recompute the quotient of the returned minimizer
    q = float(x @ a_apply(x) / (x @ bfun(x)))
    res = 0.0
    for c in cons:
        res = max(res, abs(c @ x) / (np.linalg.norm(c) * np.linalg.norm(x)))
    x = x / np.sqrt(g.h * (x @ bfun(x)))
    return PencilResult(value=q, vector=x, coarse_value=coarse, constraint_residual=float(res),
                        certificate_gap=float(abs(q - coarse) / max(1.0, abs(q))),
                        iterations_note=note)


def _inverse_iteration(g, beta, a_apply, bfun, proj, cons, x0, largest, tol=1e-12,
                       max_steps=30):
    """Shifted inverse iteration for the pencil restricted to a sector
    and to the Euclidean complement of the constraints.

    The shift is the Rayleigh quotient of the interpolated coarse vector,
    pushed slightly outward, so the extreme eigenvalue is the one closest
    to it.  Each step solves P (A - sigma B) P y = P B x with MINRES.
    """
    if cons:
        Qc, _ = np.linalg.qr(np.column_stack(cons))
    else:
        Qc = np.zeros((g.N, 0))

    def P(f):
        f = proj(f)
        return f - Qc @ (Qc.T @ f)

    x = P(x0)
    x /= np.linalg.norm(x)
    rq = float(x @ a_apply(x) / (x @ bfun(x)))
    sigma = rq + (1e-3 if largest else -1e-3) * max(1.0, abs(rq))
    sym = 1.0 / (g.absk**beta + 1.0)
    M = LinearOperator((g.N, g.N), dtype=float,
                       matvec=lambda v: np.fft.ifft(sym * np.fft.fft(v)).real)
    Aop = LinearOperator((g.N, g.N), dtype=float,
                         matvec=lambda v: P(a_apply(P(v)) - sigma * bfun(P(v))))
    steps = 0
    for steps in range(1, max_steps + 1):
        rhs = P(bfun(x))
        y, _ = minres(Aop, rhs, M=M, rtol=1e-12, maxiter=5000)
        y = P(y)
        x_new = y / np.linalg.norm(y)
        if x_new @ x < 0:
            x_new = -x_new
        rq_new = float(x_new @ a_apply(x_new) / (x_new @ bfun(x_new)))
        done = abs(rq_new - rq) <= tol * max(1.0, abs(rq_new)) and np.linalg.norm(x_new - x) < 1e-7
        x, rq = x_new, rq_new
        if done:
            break
    return x, f"inverse iteration ({steps} steps, shift {sigma:.6g})"


# --- spectral property --------------------------------------------------------

def spectral_delta(beta: float, gs: GroundState, ps, reduced_points: int = 4096,
                   refine: bool = True) -> dict:
    """Constrained minimum of H(eps)/B(eps) over the four constraints.

    eps1 and eps2 decouple, and each splits further by parity: eps1 even
    carries (eps1, Q) = 0, eps1 odd carries (eps1, G1) = 0, eps2 even carries
    the two Lam-constraints and eps2 odd is unconstrained.
    """
    g = gs.grid
    if ps.grid != g:
        raise gr.GridError("profile set and ground state must share a grid")
    q, G1 = gs.q, ps.G1
    lq = gs.lam_q
    l2q = gr.lambda_op(g, lq, warn=False)
    c1, c2 = OperatorSpec("Cal1", beta, gs), OperatorSpec("Cal2", beta, gs)
    sectors = {
        "eps1_even": (c1, "even", [q]),
        "eps1_odd": (c1, "odd", [G1]),
        "eps2_even": (c2, "even", [lq, l2q]),
        "eps2_odd": (c2, "odd", []),
    }
    out = {}
    for name, (op, par, cons) in sectors.items():
        r = pencil_min(g, op.apply, op.potential, beta, par, cons, reduced_points,
                       refine=refine)
        out[name] = r
    best = min(out, key=lambda k: out[k].value)
    vec = out[best].vector
    eps = vec.astype(complex) if best.startswith("eps1") else 1j * vec
    # unconstrained Cal1 minimum shows the constraints are needed
    unc = min(pencil_min(g, c1.apply, c1.potential, beta, p, (), reduced_points,
                         refine=refine).value for p in ("even", "odd"))
    all_constraints = [(np.real(eps), q), (np.real(eps), G1), (np.imag(eps), lq),
                       (np.imag(eps), l2q)]
    ne = np.linalg.norm(eps)
    cres = max(abs(a @ c) / (np.linalg.norm(c) * ne) for a, c in all_constraints)
    return {
        "delta": float(out[best].value),
        "sector_minima": {k: v.value for k, v in out.items()},
        "coarse_minima": {k: v.coarse_value for k, v in out.items()},
        "minimizing_sector": best,
        "minimizer": eps,
        "constraint_residual": float(cres),
        "certificate_gap": float(abs(h_form(gs, eps) / b_form(g, beta, eps) - out[best].value)),
        "unconstrained_Cal1_min": float(unc),
    }


def equivalent_form_constant(gs: GroundState, ps, delta: float, draws: int = 50,
                             seed: int = 0) -> float:
    """Smallest K with H >= delta B - K * sum (constraint products)^2 on random draws."""
    g = gs.grid
    rng = np.random.default_rng(seed)
    q, G1, lq = gs.q, ps.G1, gs.lam_q
    l2q = gr.lambda_op(g, lq, warn=False)
    K = 0.0
    for _ in range(draws):
        eps = random_field(g, rng) + 1j * random_field(g, rng)
        h, bb = h_form(gs, eps), b_form(g, gs.beta, eps)
        s = (gr.inner(g, eps.real, q) ** 2 + gr.inner(g, eps.real, G1) ** 2
             + gr.inner(g, eps.imag, lq) ** 2 + gr.inner(g, eps.imag, l2q) ** 2)
        if delta * bb - h > 0:
            K = max(K, (delta * bb - h) / s)
    return float(K)


def random_field(g: gr.GridSpec, rng, width: float = 8.0) -> np.ndarray:
    """Smooth random real field localized on |y| <~ width."""
    n = 6
    centers = rng.uniform(-width, width, n)
    scales = rng.uniform(0.5, 3.0, n)
    amps = rng.normal(size=n)
    y = g.y
    return sum(a * np.exp(-0.5 * ((y - c) / s) ** 2) for a, c, s in zip(amps, centers, scales))


# --- index counts ------------------------------------------------------------

def index_counts(beta: float, gs: GroundState, count: int = 4, check_resolution: bool = True,
                 reduced_points: int = 2048) -> dict:
    """Negative eigenvalues of Hbar1, Hbar2 per parity sector."""

    def counts(state):
        res, vals = {}, {}
        for kind in ("Hbar1", "Hbar2"):
            op = OperatorSpec(kind, beta, state)
            pair = []
            for par in ("even", "odd"):
                ev = lowest_eigenpairs(op, par, count, reduced_points=reduced_points)
                vals[f"{kind}_{par}"] = [e[0] for e in ev]
                pair.append(sum(1 for e in ev if e[0] < 0))
            res[kind] = tuple(pair)
        return res, vals

    res, vals = counts(gs)
    out = {"Hbar1": res["Hbar1"], "Hbar2": res["Hbar2"], "eigenvalues": vals, "stable": True}
    if check_resolution:
        g2 = gr.make_grid(gs.grid.L, 2 * gs.grid.N)
        gs2 = solve_ground_state(beta, g2)
        res2, vals2 = counts(gs2)
        out["stable"] = res2 == res
        out["eigenvalues_2N"] = vals2
        if not out["stable"]:
            logger.warning("index counts change under refinement: %s -> %s", res, res2)
    return out


# --- phi quantities -----------------------------------------------------------

def q_formula(pairing: float, form_value: float, normalizer: float) -> float:
    """-(phi, f)(1 - H(g, g) (phi, f) / normalizer^2)."""
    return -pairing * (1.0 - form_value * pairing / normalizer**2)


def _phi_single(gs: GroundState, tol: float = 1e-10) -> dict:
    g, beta = gs.grid, gs.beta
    q, dq = gs.q, gs.dq
    lq = gs.lam_q
    qt = lq + 0.5 * gr.lambda_op(g, lq, warn=False)
    h1, h2 = OperatorSpec("Hbar1", beta, gs), OperatorSpec("Hbar2", beta, gs)
    yq = g.y * q

    def solve(op, rhs, parity):
        x = solve_deflated(op, rhs, (), tol=tol, maxiter=20000, floor=1e-8)
        return gr.even_part(g, x) if parity == "even" else gr.odd_part(g, x)

    phi1 = solve(h1, q, "even")
    phi2 = solve(h1, yq, "odd")
    phi3 = solve(h2, qt, "even")
    a1, a2, a3 = gr.inner(g, phi1, q), gr.inner(g, phi2, yq), gr.inner(g, phi3, qt)
    H1qq = gr.inner(g, q, h1.apply(q))
    H1dd = gr.inner(g, dq, h1.apply(dq))
    H2qq = gr.inner(g, q, h2.apply(q))
    n1 = gr.inner(g, q, q)
    n2 = gr.inner(g, dq, yq)
    n3 = gr.inner(g, q, qt)
    return {
        "q1": q_formula(a1, H1qq, n1), "q2": q_formula(a2, H1dd, n2),
        "q3": q_formula(a3, H2qq, n3),
        "pairings": [a1, a2, a3], "forms": [H1qq, H1dd, H2qq], "normalizers": [n1, n2, n3],
        "phi": [phi1, phi2, phi3],
    }


def phi_quantities(gs: GroundState, box_check: bool = True, tol: float = 1e-10) -> dict:
    """q1, q2, q3 and their drift under L -> 2L (N -> 2N at fixed spacing)."""
    base = _phi_single(gs, tol)
    out = {k: float(base[k]) for k in ("q1", "q2", "q3")}
    out.update(pairings=base["pairings"], forms=base["forms"], normalizers=base["normalizers"])
    if box_check:
        g2 = gr.make_grid(2 * gs.grid.L, 2 * gs.grid.N)
        big = _phi_single(solve_ground_state(gs.beta, g2), tol)
        drift = {k: float(abs(big[k] - base[k]) / abs(base[k])) for k in ("q1", "q2", "q3")}
        out["doubled"] = {k: float(big[k]) for k in ("q1", "q2", "q3")}
        out["drift"] = drift
        out["stable"] = all(d < 0.02 for d in drift.values())
    return out


# --- Hardy constant -----------------------------------------------------------

def hardy_constant(beta: float, grid: gr.GridSpec, reduced_points: int = 4096,
                   refine: bool = True) -> dict:
    """Largest eigenvalue of (poly-weight form, weighted form) = best constant.

    The optimizer is even (the weights are even and the top mode is nodeless),
    but both sectors are computed and the larger value returned.
    """
    g = grid
    w = poly_weight(g, beta)
    vals = {}
    for par in ("even", "odd"):
        r = pencil_min(
            g, lambda x: w * x, None, beta, par, (), reduced_points, block=2, refine=refine,
            largest=True,
            a_dense=lambda gc: np.diag(poly_weight(gc, beta)),
        )
        vals[par] = r
    best = max(vals, key=lambda k: vals[k].value)
    return {"C": float(vals[best].value), "sector": best,
            "sector_values": {k: v.value for k, v in vals.items()},
            "coarse_value": vals[best].coarse_value, "optimizer": vals[best].vector}


def hardy_ratio(g: gr.GridSpec, beta: float, f: np.ndarray) -> float:
    num = float(g.h * np.sum(np.abs(f) ** 2 * poly_weight(g, beta)))
    return num / b_form(g, beta, f)


COMPACT_SUPPORT_CONSTANT = float(np.e)


# --- report -------------------------------------------------------------------

@dataclass
class SpectralReport:
    beta: float
    delta: float
    index_Hbar1: tuple
    index_Hbar2: tuple
    q1: float
    q2: float
    q3: float
    hardy_constant: float
    resolution: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["index_Hbar1"] = list(self.index_Hbar1)
        d["index_Hbar2"] = list(self.index_Hbar2)
        return d


def certify(beta: float, gs: GroundState, ps, hardy: bool = True, box_check: bool = True,
            check_resolution: bool = True) -> SpectralReport:
    sd = spectral_delta(beta, gs, ps)
    ic = index_counts(beta, gs, check_resolution=check_resolution)
    pq = phi_quantities(gs, box_check=box_check)
    hc = hardy_constant(beta, gs.grid)["C"] if hardy else float("nan")
    res = {"L": gs.grid.L, "N": gs.grid.N, "sector_minima": sd["sector_minima"],
           "constraint_residual": sd["constraint_residual"],
           "unconstrained_Cal1_min": sd["unconstrained_Cal1_min"],
           "index_stable": ic["stable"], "phi_drift": pq.get("drift"),
           "phi_stable": pq.get("stable")}
    return SpectralReport(beta=beta, delta=sd["delta"], index_Hbar1=ic["Hbar1"],
                          index_Hbar2=ic["Hbar2"], q1=pq["q1"], q2=pq["q2"], q3=pq["q3"],
                          hardy_constant=hc, resolution=res)
