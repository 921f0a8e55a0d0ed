"""Linearized and virial operators around Q_beta: apply, invert, diagonalize.

All operators have the form |D|^beta + c + V(y) with a real potential, so
they are real symmetric on the periodic grid.  Inversion on the orthogonal
complement of a known kernel uses preconditioned MINRES; eigenvalues come
from a dense parity-resolved solve on a coarse copy of the grid, refined
matrix-free on the full grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, lobpcg, minres

from . import grid as gr
from .ground import ConvergenceError, GroundState

logger = logging.getLogger(__name__)

KINDS = ("Lplus", "Lminus", "Cal1", "Cal2", "Hbar1", "Hbar2", "FracResolvent")


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    kind: str
    beta: float
    gs: GroundState

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")

    @property
    def grid(self) -> gr.GridSpec:
        return self.gs.grid

    @cached_property
    def shift(self) -> float:
        return 1.0 if self.kind in ("Lplus", "Lminus", "FracResolvent") else 0.0

    @cached_property
    def potential(self) -> np.ndarray:
        return potential(self.kind, self.beta, self.grid, self.gs.q)

    def apply(self, f: np.ndarray) -> np.ndarray:
        return apply(self, f)


def potential(kind: str, beta: float, g: gr.GridSpec, q: np.ndarray) -> np.ndarray:
    """Multiplicative part of each operator, evaluated on grid g."""
    y = g.y
    dq = gr.deriv(g, q)
    virial = 2.0 * y * dq * q ** (2 * beta - 1)
    bump = gr.sech(10.0 * y / 9.0) ** 2 / 9.0
    return {
        "Lplus": -(2 * beta + 1) * q ** (2 * beta),
        "Lminus": -(q ** (2 * beta)),
        "Cal1": (2 * beta + 1) * virial,
        "Cal2": virial,
        "Hbar1": (10.0 / 9.0) * (2 * beta + 1) * virial - bump,
        "Hbar2": (10.0 / 9.0) * virial - bump,
        "FracResolvent": np.zeros_like(q),
    }[kind]


def apply(op: OperatorSpec, f: np.ndarray) -> np.ndarray:
    g = op.grid
    if np.shape(f) != (g.N,):
        raise gr.GridError("field does not live on the operator grid")
    if op.kind == "FracResolvent":
        return gr.resolvent(g, f, op.beta)
    return gr.frac_deriv(g, f, op.beta) + op.shift * f + op.potential * f


def quadratic_form(op: OperatorSpec, f: np.ndarray) -> float:
    return gr.inner(op.grid, f, apply(op, f))


def _orthonormal(g: gr.GridSpec, vectors) -> np.ndarray:
    if not len(vectors):
        return np.zeros((0, g.N))
    V = np.array(vectors, dtype=float).T
    Qm, _ = np.linalg.qr(V)
    return Qm.T


def _project(basis: np.ndarray, f: np.ndarray) -> np.ndarray:
    if len(basis) == 0:
        return f
    return f - basis.T @ (basis @ f)


@dataclass
class SolveInfo:
    residual: float
    kernel_fraction: float
    iterations: int
    max_kernel_overlap: float


def solve_deflated(op: OperatorSpec, rhs: np.ndarray, kernel=(), tol: float = 1e-12,
                   maxiter: int = 2000, return_info: bool = False, floor: float = 1e-10):
    """Solve op g = rhs with g and rhs orthogonal to ``kernel``.

    The component of rhs along the kernel is projected out and its relative
    size reported.  Every Krylov iterate lives in the complement, so the
    operator restricted there is invertible.
    """
    g = op.grid
    K = _orthonormal(g, kernel)
    nr = np.linalg.norm(rhs)
    if nr == 0:
        out = np.zeros(g.N)
        return (out, SolveInfo(0.0, 0.0, 0, 0.0)) if return_info else out
    b = _project(K, rhs)
    frac = float(np.linalg.norm(rhs - b) / nr)
    if frac > 1e-6:
        logger.warning("rhs has a kernel component of relative size %.2e (projected out)", frac)
    A = LinearOperator((g.N, g.N), matvec=lambda x: _project(K, apply(op, _project(K, x))),
                       dtype=float)
    symbol = 1.0 / (g.absk**op.beta + 1.0)
    M = LinearOperator((g.N, g.N), dtype=float,
                       matvec=lambda x: np.fft.ifft(symbol * np.fft.fft(x)).real)
    x = np.zeros(g.N)
    total_it = 0
    nb = np.linalg.norm(b)
    res = 1.0
    # MINRES stagnates near 1e-13; a few rounds of iterative refinement on
    # the true residual recover the last digits
    for _ in range(6):
        r = b - A.matvec(x)
        res = np.linalg.norm(r) / nb
        if res <= tol:
            break
        counter = [0]

        def cb(_xk):
            counter[0] += 1

        # minres measures its stop against |A||x|, which can leave the true
        # residual two orders above rtol on fine grids
        dx, _info = minres(A, r, M=M, rtol=max(1e-2 * tol * nb / np.linalg.norm(r), 1e-14),
                           maxiter=maxiter, callback=cb)
        total_it += counter[0]
        x = _project(K, x + dx)
    r = b - A.matvec(x)
    res = float(np.linalg.norm(r) / nb)
    if res > tol:
        # refinement has stagnated at the roundoff floor of the operator
        if res > floor:
            raise ConvergenceError(f"deflated solve stalled at relative residual {res:.2e}")
        logger.info("deflated solve reached %.2e (requested %.1e)", res, tol)
    overlap = 0.0
    nx = np.linalg.norm(x)
    for kvec in K:
        if nx > 0:
            overlap = max(overlap, abs(kvec @ x) / nx)
    info = SolveInfo(res, frac, total_it, overlap)
    return (x, info) if return_info else x


# --- dense, parity-resolved eigenvalue machinery --------------------------

def sector_indices(N: int, parity: str):
    """Node indices spanning the even or odd subspace (reflection j -> N-j)."""
    if parity == "even":
        return np.arange(0, N // 2 + 1)
    if parity == "odd":
        return np.arange(1, N // 2)
    raise ValueError(parity)


def sector_basis(N: int, parity: str) -> np.ndarray:
    """Orthonormal basis (N x n) of the parity sector."""
    idx = sector_indices(N, parity)
    P = np.zeros((N, len(idx)))
    sign = 1.0 if parity == "even" else -1.0
    for col, j in enumerate(idx):
        jr = (-j) % N
        if jr == j:
            P[j, col] = 1.0
        else:
            P[j, col] = 1.0 / np.sqrt(2)
            P[jr, col] = sign / np.sqrt(2)
    return P


def frac_matrix(g: gr.GridSpec, s: float) -> np.ndarray:
    """Dense symmetric circulant matrix of |D|^s on grid g."""
    col = np.fft.ifft(g.absk**s).real
    idx = (np.arange(g.N)[:, None] - np.arange(g.N)[None, :]) % g.N
    return col[idx]


def sector_matrix(A: np.ndarray, parity: str) -> np.ndarray:
    N = A.shape[0]
    idx = sector_indices(N, parity)
    ridx = (-idx) % N
    sign = 1.0 if parity == "even" else -1.0
    c = np.where(idx == ridx, 1.0, 1.0 / np.sqrt(2))
    # A_s[a, b] = sum over the (at most) two nodes of each basis vector
    blk = (A[np.ix_(idx, idx)] + sign * A[np.ix_(idx, ridx)]
           + sign * A[np.ix_(ridx, idx)] + A[np.ix_(ridx, ridx)])
    blk = blk * np.outer(c, c)
    # self-reflecting nodes were counted twice per side
    self_ref = idx == ridx
    blk[self_ref, :] *= 0.5
    blk[:, self_ref] *= 0.5
    return 0.5 * (blk + blk.T)


def sector_lift(v: np.ndarray, N: int, parity: str) -> np.ndarray:
    idx = sector_indices(N, parity)
    ridx = (-idx) % N
    sign = 1.0 if parity == "even" else -1.0
    c = np.where(idx == ridx, 1.0, 1.0 / np.sqrt(2))
    out = np.zeros(N)
    out[idx] += c * v
    out[ridx] += sign * c * v * (idx != ridx)
    return out


def sector_restrict(f: np.ndarray, parity: str) -> np.ndarray:
    N = len(f)
    idx = sector_indices(N, parity)
    ridx = (-idx) % N
    sign = 1.0 if parity == "even" else -1.0
    c = np.where(idx == ridx, 1.0, 1.0 / np.sqrt(2))
    return np.where(idx == ridx, f[idx], c * (f[idx] + sign * f[ridx]))


def dense_operator(kind: str, beta: float, g: gr.GridSpec, q: np.ndarray) -> np.ndarray:
    A = frac_matrix(g, beta)
    shift = 1.0 if kind in ("Lplus", "Lminus") else 0.0
    A[np.diag_indices_from(A)] += shift + potential(kind, beta, g, q)
    return A


def interpolate(g_from: gr.GridSpec, f: np.ndarray, g_to: gr.GridSpec) -> np.ndarray:
    """Band-limited interpolation between grids on the same box."""
    if g_from.L != g_to.L:
        raise gr.GridError("interpolation requires the same box")
    n1, n2 = g_from.N, g_to.N
    if n1 == n2:
        return np.array(f, copy=True)
    fh = np.fft.fftshift(np.fft.fft(f))
    if n2 >= n1:
        pad = np.zeros(n2, complex)
        pad[(n2 - n1) // 2:(n2 - n1) // 2 + n1] = fh
        # split the Nyquist coefficient symmetrically
        pad[(n2 - n1) // 2] *= 0.5
        pad[(n2 + n1) // 2] = pad[(n2 - n1) // 2]
        out = np.fft.ifft(np.fft.ifftshift(pad)) * (n2 / n1)
    else:
        out = f[:: n1 // n2]
    return out.real if np.isrealobj(f) else out


def _parity_projector(g: gr.GridSpec, parity: str):
    if parity == "even":
        return lambda f: gr.even_part(g, f)
    if parity == "odd":
        return lambda f: gr.odd_part(g, f)
    return lambda f: f


def lowest_eigenpairs(op: OperatorSpec, parity: str = "both", count: int = 3,
                      reduced_points: int = 2048, refine: bool = True,
                      rtol_flag: float = 1e-3):
    """Smallest eigenvalues and normalized eigenfunctions in a parity sector.

    Returns a list of (value, field, info) sorted by value.  ``info`` holds
    the coarse-grid value and the coarse/fine disagreement; a disagreement
    above ``rtol_flag`` is logged as under-resolution and flagged.
    """
    if count > 8:
        raise ValueError("at most 8 eigenpairs")
    if parity == "both":
        pairs = (lowest_eigenpairs(op, "even", count, reduced_points, refine, rtol_flag)
                 + lowest_eigenpairs(op, "odd", count, reduced_points, refine, rtol_flag))
        return sorted(pairs, key=lambda p: p[0])[:count]
    g = op.grid
    n_red = min(g.N, reduced_points)
    gc = g.coarsen(n_red)
    qc = op.gs.q[:: g.N // n_red]
    Ac = sector_matrix(dense_operator(op.kind, op.beta, gc, qc), parity)
    vals, vecs = sla.eigh(Ac, subset_by_index=[0, min(count, Ac.shape[0]) - 1])
    out = []
    proj = _parity_projector(g, parity)
    if refine and g.N > n_red:
        X0 = np.column_stack([proj(interpolate(gc, sector_lift(v, n_red, parity), g))
                              for v in vecs.T])
        X0 /= np.linalg.norm(X0, axis=0)
        symbol = 1.0 / (g.absk**op.beta + 1.0)
        A = LinearOperator((g.N, g.N), dtype=float,
                           matvec=lambda x: apply(op, proj(np.ravel(x))),
                           matmat=lambda X: np.column_stack([apply(op, proj(c)) for c in X.T]))
        M = LinearOperator((g.N, g.N), dtype=float,
                           matmat=lambda X: np.column_stack(
                               [proj(np.fft.ifft(symbol * np.fft.fft(c)).real) for c in X.T]),
                           matvec=lambda x: proj(np.fft.ifft(symbol * np.fft.fft(np.ravel(x))).real))
        fine_vals, fine_vecs = lobpcg(A, X0, M=M, largest=False, tol=1e-9, maxiter=400)
        order = np.argsort(fine_vals)
        fine_vals, fine_vecs = fine_vals[order], fine_vecs[:, order]
    else:
        fine_vals = vals
        fine_vecs = np.column_stack([interpolate(gc, sector_lift(v, n_red, parity), g)
                                     for v in vecs.T])
    for j in range(len(vals)):
        f = proj(fine_vecs[:, j])
        f = f / gr.norm(g, f)
        i_max = np.argmax(np.abs(f))
        if f[i_max] < 0:
            f = -f
        disagreement = abs(fine_vals[j] - vals[j]) / max(1.0, abs(vals[j]))
        info = {"coarse_value": float(vals[j]), "disagreement": float(disagreement),
                "under_resolved": bool(disagreement > rtol_flag), "parity": parity}
        if info["under_resolved"]:
            logger.warning("%s eigenvalue %d: coarse/fine disagreement %.2e", op.kind, j,
                           disagreement)
        out.append((float(fine_vals[j]), f, info))
    return out


def resolvent_kernel_decay_check(beta: float, grid: gr.GridSpec | None = None,
                                 window=(0.25, 0.5)) -> dict:
    """Tail slope of the kernel of (|D|^beta + 1)^{-1}."""
    from .ground import decay_fit

    g = grid or gr.make_grid(200.0, 2**14)
    kernel = np.fft.fftshift(np.fft.ifft(1.0 / (g.absk**beta + 1.0)).real) / g.h
    # fftshift puts x = 0 at index N/2, matching the node layout
    info = decay_fit(g, kernel, beta, window)
    return {"slope": -info["image_corrected"], "plain_slope": -info["exponent"],
            "kernel": kernel, "even_residual": gr.parity_residual(g, kernel, "even"),
            "center_value": float(kernel[g.N // 2])}
