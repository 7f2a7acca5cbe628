"""Primal-dual interior-point solver for convex QPs over linear and second-order cones.

Programs use the minimisation convention::

    minimise    1/2 x'Px + q'x + offset
    subject to  Ax = b            (dual y)
                Gx + s = h,  s in K   (dual z in K)

where K is a nonnegative orthant followed by zero or more second-order cones.
The Lagrangian is ``1/2 x'Px + q'x + y'(Ax - b) + z'(Gx - h)``, so the
stationarity condition reads ``Px + q + A'y + G'z = 0``.  Prices that the
market layer reads off equality constraints are therefore ``-y``.

The iteration is Mehrotra's predictor-corrector with Nesterov-Todd scaling.
Inequality rows with few nonzeros are folded into the primal block of the
KKT matrix; the remaining (dense) rows are kept in augmented form so that the
factorisation stays sparse.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

SOLVE_TOL = 1e-8
ACCEPT_TOL = 1e-6


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_TROUBLE = "NumericalTrouble"


class SolverError(RuntimeError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class InfeasibleError(SolverError):
    pass


class UnboundedError(SolverError):
    pass


class NumericalTroubleError(SolverError):
    pass


@dataclass
class ConvexProgram:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    soc_dims: tuple = ()
    offset: float = 0.0
    var_blocks: dict = field(default_factory=dict)
    eq_blocks: dict = field(default_factory=dict)
    ineq_blocks: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def n_linear(self) -> int:
        return self.G.shape[0] - int(sum(self.soc_dims))

    def validate(self, check_psd: bool = True) -> None:
        n = self.n
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.A.shape[1] != n or self.A.shape[0] != self.b.shape[0]:
            raise ValueError("equality block dimensions are inconsistent")
        if self.G.shape[1] != n or self.G.shape[0] != self.h.shape[0]:
            raise ValueError("inequality block dimensions are inconsistent")
        if self.n_linear < 0 or any(d < 1 for d in self.soc_dims):
            raise ValueError("cone dimensions exceed the inequality rows")
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-10 * (1.0 + abs(self.P).max()):
            raise ValueError("P is not symmetric")
        if check_psd and self.P.nnz:
            _check_psd(self.P)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.offset)


def _check_psd(P: sp.spmatrix) -> None:
    P = sp.csc_matrix(P)
    scale = abs(P).max()
    off = P - sp.diags(P.diagonal())
    if off.nnz == 0 or abs(off).max() == 0.0:
        if P.diagonal().min() < -1e-12 * scale:
            raise ValueError("P is not positive semidefinite")
        return
    shift = 1e-10 * scale
    try:
        lu = spla.splu(
            (P + shift * sp.identity(P.shape[0])).tocsc(),
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as exc:
        raise ValueError("P is not positive semidefinite") from exc
    if lu.U.diagonal().min() <= 0.0:
        raise ValueError("P is not positive semidefinite")


class ProgramBuilder:
    """Accumulates named variable and constraint blocks as coordinate triplets."""

    def __init__(self):
        self.n = 0
        self.var_blocks: dict[str, slice] = {}
        self._pd: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self._q: list[tuple[np.ndarray, np.ndarray]] = []
        self.offset = 0.0
        self._eq = _TripletBlock()
        self._lin = _TripletBlock()
        self._soc: list[tuple[str, _TripletBlock]] = []

    def variables(self, name: str, size: int) -> np.ndarray:
        sl = slice(self.n, self.n + size)
        self.var_blocks[name] = sl
        self.n += size
        return np.arange(sl.start, sl.stop)

    def add_quadratic(self, rows, cols, vals) -> None:
        """Add entries to P (both triangles must be supplied for off-diagonals)."""
        self._pd.append((np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float)))

    def add_linear(self, idx, vals) -> None:
        self._q.append((np.asarray(idx), np.asarray(vals, dtype=float)))

    def add_eq(self, name, rows, cols, vals, rhs) -> slice:
        return self._eq.add(name, rows, cols, vals, rhs)

    def add_ineq(self, name, rows, cols, vals, rhs) -> slice:
        return self._lin.add(name, rows, cols, vals, rhs)

    def add_soc(self, name, rows, cols, vals, rhs) -> None:
        blk = _TripletBlock()
        blk.add(name, rows, cols, vals, rhs)
        self._soc.append((name, blk))

    def build(self) -> ConvexProgram:
        n = self.n
        if self._pd:
            r = np.concatenate([t[0] for t in self._pd])
            c = np.concatenate([t[1] for t in self._pd])
            v = np.concatenate([t[2] for t in self._pd])
            P = sp.csc_matrix((v, (r, c)), shape=(n, n))
        else:
            P = sp.csc_matrix((n, n))
        q = np.zeros(n)
        for idx, vals in self._q:
            np.add.at(q, idx, vals)
        A, b, eq_blocks = self._eq.matrix(n)
        G, h, ineq_blocks = self._lin.matrix(n)
        soc_dims = []
        if self._soc:
            mats, rhs = [G], [h]
            offset = G.shape[0]
            for name, blk in self._soc:
                M, hb, _ = blk.matrix(n)
                mats.append(M)
                rhs.append(hb)
                ineq_blocks[name] = slice(offset, offset + M.shape[0])
                offset += M.shape[0]
                soc_dims.append(M.shape[0])
            G = sp.vstack(mats, format="csr")
            h = np.concatenate(rhs)
        return ConvexProgram(
            P=P, q=q, A=A, b=b, G=G, h=h, soc_dims=tuple(soc_dims),
            offset=self.offset, var_blocks=dict(self.var_blocks),
            eq_blocks=eq_blocks, ineq_blocks=ineq_blocks,
        )


class _TripletBlock:
    def __init__(self):
        self.m = 0
        self.blocks: dict[str, slice] = {}
        self.rows, self.cols, self.vals, self.rhs = [], [], [], []

    def add(self, name, rows, cols, vals, rhs) -> slice:
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        if name in self.blocks:
            raise ValueError(f"duplicate constraint block {name!r}")
        sl = slice(self.m, self.m + rhs.shape[0])
        self.blocks[name] = sl
        self.rows.append(np.asarray(rows, dtype=np.int64) + self.m)
        self.cols.append(np.asarray(cols, dtype=np.int64))
        self.vals.append(np.asarray(vals, dtype=float))
        self.rhs.append(rhs)
        self.m += rhs.shape[0]
        return sl

    def matrix(self, n):
        if not self.rhs:
            return sp.csr_matrix((0, n)), np.zeros(0), {}
        M = sp.csr_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.m, n),
        )
        M.sum_duplicates()
        return M, np.concatenate(self.rhs), dict(self.blocks)


@dataclass
class KKTResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


@dataclass
class Solution:
    status: Status
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    objective: float
    dual_objective: float
    kkt: KKTResiduals
    iterations: int
    program: ConvexProgram = field(repr=False)
    certificate: Optional[dict] = None
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL

    def primal(self, name: str) -> np.ndarray:
        return self.x[self.program.var_blocks[name]]

    def eq_dual(self, name: str) -> np.ndarray:
        return self.y[self.program.eq_blocks[name]]

    def ineq_dual(self, name: str) -> np.ndarray:
        return self.z[self.program.ineq_blocks[name]]

    def slack(self, name: str) -> np.ndarray:
        sl = self.program.ineq_blocks[name]
        return self.program.h[sl] - self.program.G[sl] @ self.x

    def raise_for_status(self) -> "Solution":
        if self.status is Status.OPTIMAL:
            return self
        cls = {
            Status.INFEASIBLE: InfeasibleError,
            Status.UNBOUNDED: UnboundedError,
        }.get(self.status, NumericalTroubleError)
        raise cls(f"{self.status.value}: {self.message}", self)


# ---------------------------------------------------------------------------
# cone arithmetic


class _Cones:
    def __init__(self, n_lin: int, soc_dims):
        self.l = n_lin
        self.q = list(soc_dims)
        self.blocks = []
        off = n_lin
        for d in self.q:
            self.blocks.append(slice(off, off + d))
            off += d
        self.m = off
        self.degree = n_lin + len(self.q)

    def e(self) -> np.ndarray:
        v = np.zeros(self.m)
        v[: self.l] = 1.0
        for b in self.blocks:
            v[b.start] = 1.0
        return v

    def dot(self, u, v):
        return float(u @ v)

    def prod(self, u, v):
        out = np.empty(self.m)
        out[: self.l] = u[: self.l] * v[: self.l]
        for b in self.blocks:
            ub, vb = u[b], v[b]
            out[b.start] = ub @ vb
            out[b.start + 1 : b.stop] = ub[0] * vb[1:] + vb[0] * ub[1:]
        return out

    def div(self, lam, v):
        """Return u with lam o u = v."""
        out = np.empty(self.m)
        out[: self.l] = v[: self.l] / lam[: self.l]
        for b in self.blocks:
            lb, vb = lam[b], v[b]
            det = lb[0] ** 2 - lb[1:] @ lb[1:]
            u0 = (lb[0] * vb[0] - lb[1:] @ vb[1:]) / det
            out[b.start] = u0
            out[b.start + 1 : b.stop] = (vb[1:] - u0 * lb[1:]) / lb[0]
        return out

    def min_eig(self, v) -> float:
        vals = []
        if self.l:
            vals.append(v[: self.l].min())
        for b in self.blocks:
            vals.append(v[b.start] - np.linalg.norm(v[b.start + 1 : b.stop]))
        return min(vals) if vals else np.inf

    def max_step(self, x, dx) -> float:
        step = np.inf
        if self.l:
            neg = dx[: self.l] < 0
            if neg.any():
                step = min(step, float(np.min(-x[: self.l][neg] / dx[: self.l][neg])))
        for b in self.blocks:
            xb, db = x[b], dx[b]
            a = db[0] ** 2 - db[1:] @ db[1:]
            bb = xb[0] * db[0] - xb[1:] @ db[1:]
            c = xb[0] ** 2 - xb[1:] @ xb[1:]
            disc = bb * bb - a * c
            if disc >= 0.0:
                denom = -bb + np.sqrt(disc)
                if denom > 0.0:
                    step = min(step, c / denom)
            if db[0] < 0.0:
                step = min(step, -xb[0] / db[0])
        return step


class _Scaling:
    """Nesterov-Todd scaling W with W z = W^-1 s = lam (W symmetric)."""

    def __init__(self, cones: _Cones, s, z):
        self.cones = cones
        l = cones.l
        self.d = np.sqrt(s[:l] / z[:l])
        self.lam = np.empty(cones.m)
        self.lam[:l] = np.sqrt(s[:l] * z[:l])
        self.W = []
        self.Winv = []
        for b in cones.blocks:
            sb, zb = s[b], z[b]
            J = np.ones(sb.shape[0])
            J[1:] = -1.0
            sn = np.sqrt(sb[0] ** 2 - sb[1:] @ sb[1:])
            zn = np.sqrt(zb[0] ** 2 - zb[1:] @ zb[1:])
            beta = np.sqrt(sn / zn)
            sbar, zbar = sb / sn, zb / zn
            gamma = np.sqrt((1.0 + sbar @ zbar) / 2.0)
            w = (sbar + J * zbar) / (2.0 * gamma)
            H = np.empty((sb.shape[0], sb.shape[0]))
            H[0, 0] = w[0]
            H[0, 1:] = w[1:]
            H[1:, 0] = w[1:]
            H[1:, 1:] = np.eye(sb.shape[0] - 1) + np.outer(w[1:], w[1:]) / (1.0 + w[0])
            Wb = beta * H
            Wi = (J[:, None] * H * J[None, :]) / beta
            self.W.append(Wb)
            self.Winv.append(Wi)
            self.lam[b] = Wb @ zb

    def apply(self, v, inverse=False):
        l = self.cones.l
        out = np.empty_like(v)
        out[:l] = v[:l] / self.d if inverse else v[:l] * self.d
        mats = self.Winv if inverse else self.W
        for b, M in zip(self.cones.blocks, mats):
            out[b] = M @ v[b]
        return out


# ---------------------------------------------------------------------------
# KKT system


class _KKT:
    """Factorises and solves the scaled Newton system.

    Orthant rows listed in ``fold`` are eliminated into the primal block; all
    others stay in augmented form with the -W'W block.
    """

    def __init__(self, P, A, G, cones: _Cones, fold_mask, reg=1e-9):
        self.P = sp.csc_matrix(P)
        self.A = sp.csc_matrix(A)
        self.G = sp.csr_matrix(G)
        self.cones = cones
        self.n = P.shape[0]
        self.p = A.shape[0]
        self.fold = np.flatnonzero(fold_mask)
        self.keep = np.flatnonzero(~fold_mask)
        self.Gf = self.G[self.fold].tocsc()
        self.Gk = self.G[self.keep].tocsc()
        self.reg = reg
        self._At = self.A.T.tocsc()
        self._Gkt = self.Gk.T.tocsc()
        # map kept rows back to cone blocks
        keep_pos = np.full(cones.m, -1)
        keep_pos[self.keep] = np.arange(self.keep.size)
        self._keep_pos = keep_pos
        self._soc_keep = [keep_pos[b] for b in cones.blocks]
        self._lin_keep = self.keep[self.keep < cones.l]

    def factor(self, scaling: Optional[_Scaling]):
        cones = self.cones
        nk = self.keep.size
        if scaling is None:
            dfold = np.ones(self.fold.size)
            wdiag = np.ones(self._lin_keep.size)
            socW2 = [np.eye(b.stop - b.start) for b in cones.blocks]
        else:
            dfold = 1.0 / scaling.d[self.fold] ** 2
            wdiag = scaling.d[self._lin_keep] ** 2
            socW2 = [W @ W for W in scaling.W]
        self.dfold = dfold
        H = self.P + self.Gf.T @ sp.diags(dfold) @ self.Gf
        # W'W for the kept rows
        rows, cols, vals = [], [], []
        lin_pos = self._keep_pos[self._lin_keep]
        rows.append(lin_pos)
        cols.append(lin_pos)
        vals.append(wdiag)
        for pos, W2 in zip(self._soc_keep, socW2):
            rr, cc = np.meshgrid(pos, pos, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(W2.ravel())
        W2k = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nk, nk),
        )
        self.H = sp.csc_matrix(H)
        self.W2k = W2k
        n, p = self.n, self.p
        K0 = sp.bmat(
            [
                [self.H, self._At, self._Gkt],
                [self.A, None, None],
                [self.Gk, None, -W2k],
            ],
            format="csc",
        )
        dreg = np.concatenate([
            np.full(n, self.reg),
            np.full(p, -self.reg),
            np.full(nk, -self.reg),
        ])
        self.K0 = K0
        self._sign = np.sign(dreg)
        self._factor_reg(self.reg)

    def _factor_reg(self, reg, pivot=0.0):
        self.cur_reg = reg
        self.cur_pivot = pivot
        Kreg = (self.K0 + sp.diags(reg * self._sign)).tocsc()
        # symmetric equilibration keeps pivots of comparable size
        d = np.ones(Kreg.shape[0])
        for _ in range(5):
            Ks = sp.diags(d) @ Kreg @ sp.diags(d)
            norms = abs(Ks).max(axis=1).toarray().ravel()
            norms[norms == 0] = 1.0
            d = d / np.sqrt(norms)
        self._eq = d
        Ks = (sp.diags(d) @ Kreg @ sp.diags(d)).tocsc()
        try:
            self.lu = spla.splu(
                Ks,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=pivot,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            log.debug("factorisation failed (%s); pivoting", exc)
            self.cur_pivot = 1.0
            self.lu = spla.splu(Ks, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=1.0)

    def _lusolve(self, r):
        return self._eq * self.lu.solve(self._eq * r)

    def _refined(self, rhs, refine):
        sol = self._lusolve(rhs)
        if not np.all(np.isfinite(sol)):
            return sol, np.inf
        rnorm = np.linalg.norm(rhs, np.inf)
        res = rhs - self.K0 @ sol
        err = np.linalg.norm(res, np.inf)
        for _ in range(refine):
            if err <= 1e-14 * (1.0 + rnorm):
                break
            cand = sol + self._lusolve(res)
            cres = rhs - self.K0 @ cand
            cerr = np.linalg.norm(cres, np.inf)
            if not cerr < err:
                break
            sol, res, err = cand, cres, cerr
        return sol, err / (1.0 + rnorm)

    def solve(self, rx, ry, rz, refine=4):
        """Solve P dx + A'dy + G'dz = rx; A dx = ry; G dx - W'W dz = rz."""
        rzf = rz[self.fold]
        rhs = np.concatenate([
            rx + self.Gf.T @ (self.dfold * rzf),
            ry,
            rz[self.keep],
        ])
        sol, err = self._refined(rhs, refine)
        # an unpivoted factor can lose accuracy on badly scaled systems;
        # trade exactness of the factor for stability and lean on refinement
        if err > 1e-9 and self.cur_pivot < 1.0:
            log.debug("kkt solve residual %.2e; refactoring with pivoting", err)
            self._factor_reg(self.cur_reg, pivot=1.0)
            sol, err = self._refined(rhs, 4 * refine)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("non-finite KKT solution")
        n, p = self.n, self.p
        dx = sol[:n]
        dy = sol[n : n + p]
        dz = np.empty(self.cones.m)
        dz[self.keep] = sol[n + p :]
        dz[self.fold] = self.dfold * (self.Gf @ dx - rzf)
        return dx, dy, dz


# ---------------------------------------------------------------------------
# main solve


def _row_scale(M: sp.csr_matrix) -> np.ndarray:
    if M.shape[0] == 0:
        return np.ones(0)
    norms = abs(M).max(axis=1).toarray().ravel()
    out = np.ones_like(norms)
    nz = norms > 0
    out[nz] = 1.0 / norms[nz]
    return out


def _inf(v) -> float:
    return float(np.linalg.norm(v, np.inf)) if v.size else 0.0


def kkt_residuals(program: ConvexProgram, x, y, z, relative: bool = True) -> KKTResiduals:
    """Infinity-norm KKT residuals of (x, y, z).

    With ``relative`` each residual is divided by one plus the size of the
    terms it balances, so the measure does not depend on the units chosen
    for the objective.
    """
    P, q, A, b, G, h = program.P, program.q, program.A, program.b, program.G, program.h
    cones = _Cones(program.n_linear, program.soc_dims)
    Px, Aty, Gtz = P @ x, A.T @ y, G.T @ z
    stat = Px + q + Aty + Gtz
    Gx = G @ x
    slack = h - Gx
    Ax = A @ x
    pres = [_inf(Ax - b)]
    dres = [0.0]
    comp = [0.0]
    l = cones.l
    if l:
        pres.append(max(0.0, float(-slack[:l].min())))
        dres.append(max(0.0, float(-z[:l].min())))
        comp.append(float(np.max(np.abs(z[:l] * slack[:l]))))
    for blk in cones.blocks:
        sb, zb = slack[blk], z[blk]
        pres.append(max(0.0, float(np.linalg.norm(sb[1:]) - sb[0])))
        dres.append(max(0.0, float(np.linalg.norm(zb[1:]) - zb[0])))
        comp.append(abs(float(sb @ zb)))
    s_stat, s_pri, s_dual, s_comp = 1.0, 1.0, 1.0, 1.0
    if relative:
        s_stat = 1.0 + max(_inf(Px), _inf(q), _inf(Aty), _inf(Gtz))
        s_pri = 1.0 + max(_inf(Ax), _inf(b), _inf(Gx), _inf(h))
        s_dual = 1.0 + max(_inf(y), _inf(z))
        s_comp = 1.0 + abs(float(0.5 * x @ Px + q @ x))
    return KKTResiduals(
        stationarity=_inf(stat) / s_stat,
        primal=float(max(pres)) / s_pri,
        dual=float(max(dres)) / s_dual,
        complementarity=float(max(comp)) / s_comp,
    )


def solve(
    program: ConvexProgram,
    tol: float = SOLVE_TOL,
    accept_tol: float = ACCEPT_TOL,
    max_iter: int = 150,
    fold_nnz: int = 12,
    classify: bool = True,
    validate: bool = True,
) -> Solution:
    """Solve ``program`` and return a KKT-certified :class:`Solution`.

    ``tol`` is the internal stopping tolerance on scaled residuals;
    ``accept_tol`` bounds the unscaled KKT residuals reported in the
    solution for it to be labelled optimal.  Failed solves are classified by
    a phase-1 margin problem when ``classify`` is set.
    """
    if validate:
        program.validate()
    cones = _Cones(program.n_linear, program.soc_dims)
    n = program.n
    ra = _row_scale(program.A)
    rg = np.ones(cones.m)
    rg[: cones.l] = _row_scale(program.G[: cones.l])
    A = sp.diags(ra) @ program.A
    b = ra * program.b
    G = sp.diags(rg) @ program.G
    h = rg * program.h
    P, q = program.P, program.q
    A = sp.csr_matrix(A)
    G = sp.csr_matrix(G)

    row_nnz = np.diff(G.indptr)
    fold_mask = np.zeros(cones.m, dtype=bool)
    fold_mask[: cones.l] = row_nnz[: cones.l] <= fold_nnz
    kkt = _KKT(P, A, G, cones, fold_mask)

    def finish(status, x, y, z, s, it, message=""):
        y_u = ra * y
        z_u = rg * z
        s_u = s / np.where(rg == 0, 1.0, rg)
        res = kkt_residuals(program, x, y_u, z_u)
        if status is Status.OPTIMAL and res.max() > accept_tol:
            status = Status.NUMERICAL_TROUBLE
            message = message or f"KKT residual {res.max():.2e} above {accept_tol:.0e}"
        pobj = program.objective(x)
        dobj = float(
            -0.5 * x @ (P @ x) - program.b @ y_u - program.h @ z_u + program.offset
        )
        return Solution(status, x, y_u, z_u, s_u, pobj, dobj, res, it, program, None, message)

    if cones.m == 0:
        try:
            kkt.factor(None)
            x, y, _ = kkt.solve(-q, b, np.zeros(0), refine=10)
        except (RuntimeError, np.linalg.LinAlgError) as exc:
            return finish(Status.NUMERICAL_TROUBLE, np.zeros(n), np.zeros(b.size),
                          np.zeros(0), np.zeros(0), 0, str(exc))
        return finish(Status.OPTIMAL, x, y, np.zeros(0), np.zeros(0), 1)

    e = cones.e()
    # initial point
    kkt.factor(None)
    x, y, zh = kkt.solve(-q, b, h)
    s = -zh
    z = zh.copy()
    ap = cones.min_eig(s)
    if ap <= 0:
        s = s + (1.0 - ap) * e
    ad = cones.min_eig(z)
    if ad <= 0:
        z = z + (1.0 - ad) * e

    qn = 1.0 + np.linalg.norm(q, np.inf)
    bn = 1.0 + (np.linalg.norm(b, np.inf) if b.size else 0.0)
    hn = 1.0 + np.linalg.norm(h, np.inf)
    status = Status.NUMERICAL_TROUBLE
    message = "iteration limit reached"
    it = 0
    best = None
    for it in range(1, max_iter + 1):
        rx = P @ x + q + A.T @ y + G.T @ z
        ry = A @ x - b
        rz = G @ x + s - h
        gap = float(s @ z)
        mu = gap / cones.degree
        pcost = float(0.5 * x @ (P @ x) + q @ x)
        pres = max(
            np.linalg.norm(ry, np.inf) / bn if ry.size else 0.0,
            np.linalg.norm(rz, np.inf) / hn,
        )
        dres = np.linalg.norm(rx, np.inf) / qn
        cmax = float(np.max(np.abs(cones.prod(s, z))))
        merit = max(pres, dres, cmax)
        log.debug("it %3d pres %.2e dres %.2e comp %.2e mu %.2e", it, pres, dres, cmax, mu)
        if best is None or merit < best[0]:
            best = (merit, x.copy(), y.copy(), z.copy(), s.copy(), it)
        if pres <= tol and dres <= tol and cmax <= tol:
            status = Status.OPTIMAL
            message = ""
            break
        if best[0] < 1e3 * tol and it - best[5] >= 8:
            message = "progress stalled"
            break
        if not (np.isfinite(merit)) or np.linalg.norm(x, np.inf) > 1e13 or np.linalg.norm(z, np.inf) > 1e13:
            message = "iterates diverged"
            break
        try:
            W = _Scaling(cones, s, z)
            kkt.factor(W)
            lam = W.lam
            # predictor
            rc = -cones.prod(lam, lam)
            ldiv = cones.div(lam, rc)
            dx, dy, dz = kkt.solve(-rx, -ry, -rz - W.apply(ldiv))
            ds = W.apply(ldiv) - W.apply(W.apply(dz))
            a_aff = min(1.0, cones.max_step(s, ds), cones.max_step(z, dz))
            sigma = (1.0 - a_aff) ** 3
            # corrector
            dst = W.apply(ds, inverse=True)
            dzt = W.apply(dz)
            rc = -cones.prod(lam, lam) - cones.prod(dst, dzt) + sigma * mu * e
            ldiv = cones.div(lam, rc)
            dx, dy, dz = kkt.solve(-rx, -ry, -rz - W.apply(ldiv))
            ds = W.apply(ldiv) - W.apply(W.apply(dz))
        except (RuntimeError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            message = f"linear algebra failure: {exc}"
            break
        step = min(1.0, 0.99 * min(cones.max_step(s, ds), cones.max_step(z, dz)))
        if step < 1e-12:
            message = "step length collapsed"
            break
        x = x + step * dx
        y = y + step * dy
        z = z + step * dz
        s = s + step * ds

    if status is not Status.OPTIMAL and best is not None:
        _, x, y, z, s, _ = best
        sol = finish(Status.OPTIMAL, x, y, z, s, it)
        if sol.optimal:
            sol.message = "accepted at reduced accuracy"
            return sol
    sol = finish(status, x, y, z, s, it, message)
    if sol.optimal or not classify:
        return sol
    return _classify_failure(program, sol)


def _classify_failure(program: ConvexProgram, sol: Solution) -> Solution:
    report = check_slater(program)
    if report.solution is not None and report.solution.optimal and report.margin < -1e-7:
        sol.status = Status.INFEASIBLE
        zc = report.solution.z
        m = program.G.shape[0]
        weights = zc[:m]
        ranked = {}
        for name, blk in program.ineq_blocks.items():
            ranked[name] = float(np.sum(np.abs(weights[blk])))
        sol.certificate = {
            "max_violation": float(-report.margin),
            "farkas_z": weights,
            "farkas_y": report.solution.y[: program.A.shape[0]],
            "block_weights": dict(sorted(ranked.items(), key=lambda kv: -kv[1])),
        }
        sol.message = f"no point satisfies all constraints; best max violation {-report.margin:.3e}"
    elif np.linalg.norm(sol.x, np.inf) > 1e12:
        sol.status = Status.UNBOUNDED
        sol.message = "primal iterates diverged on a feasible problem"
    return sol


@dataclass
class SlaterReport:
    margin: float
    holds: bool
    x: Optional[np.ndarray]
    solution: Optional[Solution] = None


def check_slater(program: ConvexProgram, cap: float = 1e3, threshold: float = 1e-7) -> SlaterReport:
    """Largest uniform inequality slack attainable under the equality constraints.

    Solves ``max t  s.t.  Ax = b,  h - Gx - t e in K,  t <= cap``.  A positive
    margin certifies a strictly feasible point; a negative one proves the
    constraint set empty.
    """
    n = program.n
    m = program.G.shape[0]
    cones = _Cones(program.n_linear, program.soc_dims)
    if m == 0:
        return SlaterReport(np.inf, True, None)
    e = cones.e()
    G = sp.hstack([program.G, sp.csr_matrix(e.reshape(-1, 1))], format="csr")
    cap_row = sp.csr_matrix(([1.0], ([0], [n])), shape=(1, n + 1))
    l = cones.l
    G = sp.vstack([G[:l], cap_row, G[l:]], format="csr")
    h = np.concatenate([program.h[:l], [cap], program.h[l:]])
    A = sp.hstack([program.A, sp.csr_matrix((program.A.shape[0], 1))], format="csr")
    q = np.zeros(n + 1)
    q[n] = -1.0
    phase1 = ConvexProgram(
        P=sp.csc_matrix((n + 1, n + 1)), q=q, A=A, b=program.b.copy(), G=G, h=h,
        soc_dims=program.soc_dims,
    )
    sol = solve(phase1, classify=False, validate=False)
    if sol.z.size:
        # reorder duals so the first m entries follow the original rows
        sol.z = np.concatenate([sol.z[:l], sol.z[l + 1 :], sol.z[l : l + 1]])
    if not sol.optimal:
        return SlaterReport(np.nan, False, None, sol)
    margin = float(sol.x[n])
    return SlaterReport(margin, margin > threshold, sol.x[:n], sol)


def dump_program(program: ConvexProgram, path) -> None:
    """Write ``program`` as a plain-text standard form (coordinate triplets)."""
    lines = [
        "# minimise 1/2 x'Px + q'x + offset s.t. Ax = b, h - Gx in K",
        f"n {program.n}",
        f"offset {program.offset!r}",
        f"cones linear {program.n_linear} soc {' '.join(map(str, program.soc_dims))}",
    ]

    def triplets(tag, M):
        M = sp.coo_matrix(M)
        lines.append(f"{tag} {M.shape[0]} {M.shape[1]} {M.nnz}")
        lines.extend(f"{i} {j} {v!r}" for i, j, v in zip(M.row, M.col, M.data))

    def vector(tag, v):
        lines.append(f"{tag} {v.shape[0]}")
        lines.extend(repr(float(t)) for t in v)

    triplets("P", program.P)
    vector("q", program.q)
    triplets("A", program.A)
    vector("b", program.b)
    triplets("G", program.G)
    vector("h", program.h)
    for kind, blocks in (("var", program.var_blocks), ("eq", program.eq_blocks),
                         ("ineq", program.ineq_blocks)):
        for name, sl in blocks.items():
            lines.append(f"block {kind} {name} {sl.start} {sl.stop}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
