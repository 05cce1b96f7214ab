"""Sparse convex QP solver based on operator splitting (ADMM).

Problem form::

    minimize    1/2 x'Qx + c'x + offset
    subject to  A_eq x = b_eq
                l_in <= A_in x <= u_in
                lb <= x <= ub

Internally every constraint family, including the variable bounds, is stacked
into one matrix ``K = [A_eq; A_in; I]`` with row bounds ``l <= Kx <= u``, so
changing variable bounds (as branch-and-bound does) never touches the matrix.
Dual vectors follow that stacked row order; a positive multiplier marks an
active upper bound and a negative one an active lower bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog, lsq_linear

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"

_INF = np.inf
_RHO_MIN = 1e-6
_RHO_MAX = 1e6
_RHO_EQ_FACTOR = 1e3


class QpError(ValueError):
    pass


def _csc(mat, shape) -> sp.csc_matrix:
    if mat is None:
        return sp.csc_matrix(shape)
    out = sp.csc_matrix(mat, dtype=float)
    if out.shape != shape:
        raise QpError(f"matrix shape {out.shape} != expected {shape}")
    return out


def _vec(v, n, fill) -> np.ndarray:
    if v is None:
        return np.full(n, fill, dtype=float)
    out = np.asarray(v, dtype=float).reshape(-1)
    if out.shape != (n,):
        raise QpError(f"vector length {out.shape[0]} != expected {n}")
    return out


@dataclass(frozen=True)
class QpProblem:
    Q: sp.csc_matrix
    c: np.ndarray
    A_eq: sp.csc_matrix | None = None
    b_eq: np.ndarray | None = None
    A_in: sp.csc_matrix | None = None
    l_in: np.ndarray | None = None
    u_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        n = len(np.asarray(self.c).reshape(-1))
        Q = _csc(self.Q, (n, n))
        if abs(Q - Q.T).max() > 1e-10 * max(1.0, abs(Q).max()):
            raise QpError("Q must be symmetric")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "c", _vec(self.c, n, 0.0))
        m_eq = 0 if self.A_eq is None else sp.csc_matrix(self.A_eq).shape[0]
        m_in = 0 if self.A_in is None else sp.csc_matrix(self.A_in).shape[0]
        object.__setattr__(self, "A_eq", _csc(self.A_eq, (m_eq, n)))
        object.__setattr__(self, "b_eq", _vec(self.b_eq, m_eq, 0.0))
        object.__setattr__(self, "A_in", _csc(self.A_in, (m_in, n)))
        object.__setattr__(self, "l_in", _vec(self.l_in, m_in, -_INF))
        object.__setattr__(self, "u_in", _vec(self.u_in, m_in, _INF))
        object.__setattr__(self, "lb", _vec(self.lb, n, -_INF))
        object.__setattr__(self, "ub", _vec(self.ub, n, _INF))
        for name in ("c", "b_eq"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise QpError(f"{name} must be finite")

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def m_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def m_in(self) -> int:
        return self.A_in.shape[0]

    def stacked(self) -> tuple[sp.csc_matrix, np.ndarray, np.ndarray]:
        K = sp.vstack([self.A_eq, self.A_in, sp.identity(self.n, format="csc")], format="csc")
        lo = np.concatenate([self.b_eq, self.l_in, self.lb])
        hi = np.concatenate([self.b_eq, self.u_in, self.ub])
        return K, lo, hi

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.Q @ x) + self.c @ x + self.offset)

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> QpProblem:
        return replace(self, lb=np.asarray(lb, float), ub=np.asarray(ub, float))


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    objective_value: float
    iterations: int
    polished: bool = False
    rho_updates: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@dataclass(frozen=True)
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 50_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    check_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    scaling_iter: int = 25
    eps_prim_inf: float = 1e-5
    eps_dual_inf: float = 1e-5
    divergence_window: int = 1000
    polish: bool = True
    polish_delta: float = 1e-9
    polish_refine: int = 5

    def __post_init__(self):
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise QpError("tolerances must be positive")
        if not 0 < self.alpha < 2:
            raise QpError("relaxation must lie in (0, 2)")
        if self.rho <= 0 or self.sigma <= 0:
            raise QpError("rho and sigma must be positive")
        if min(self.max_iter, self.check_interval, self.divergence_window) < 1 or self.scaling_iter < 0:
            raise QpError("iteration counts must be positive")
        if self.adaptive_rho_tolerance < 1 or self.polish_refine < 0:
            raise QpError("adaptive_rho_tolerance must be at least 1 and polish_refine non-negative")


def kkt_residuals(prob: QpProblem, x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Stationarity, primal-feasibility and complementarity residuals (inf-norms).

    ``y`` is ordered like :meth:`QpProblem.stacked`. Multipliers pushing on
    an infinite bound make complementarity infinite.
    """
    K, lo, hi = prob.stacked()
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if y.shape != (K.shape[0],):
        raise QpError("dual vector has the wrong length")
    Kx = K @ x
    stat = prob.Q @ x + prob.c + K.T @ y
    viol = np.maximum(lo - Kx, 0.0) + np.maximum(Kx - hi, 0.0)
    y_up = np.maximum(y, 0.0)
    y_lo = np.minimum(y, 0.0)
    with np.errstate(invalid="ignore"):
        comp_up = np.where(y_up > 0, y_up * (hi - Kx), 0.0)
        comp_lo = np.where(y_lo < 0, -y_lo * (Kx - lo), 0.0)
    comp = np.abs(comp_up) + np.abs(comp_lo)

    def norm(v):
        return float(np.max(np.abs(v), initial=0.0))

    return norm(stat), norm(viol), norm(comp)


class AdmmSolver:
    """Reusable ADMM workspace: scaling is fixed at setup, bounds can change.

    Branch-and-bound nodes share the matrix data and differ only in variable
    bounds, so :meth:`update_bounds` keeps the equilibration and re-factors
    only when the pattern of equality rows changes.
    """

    def __init__(self, prob: QpProblem, settings: QpSettings | None = None):
        self.prob = prob
        self.settings = settings or QpSettings()
        K, lo, hi = prob.stacked()
        self.n = prob.n
        self.m = K.shape[0]
        self._scale(prob.Q, prob.c, K)
        self.l_raw = lo
        self.u_raw = hi
        self._set_bounds(lo, hi)
        self._factor_key = None
        self._lu = None

    # scaling ----------------------------------------------------------

    def _scale(self, Q, c, K) -> None:
        s = self.settings
        n, m = self.n, self.m
        D = np.ones(n)
        E = np.ones(m)
        Qs = Q.copy()
        Ks = K.copy()
        for _ in range(s.scaling_iter):
            col_q = sp.linalg.norm(Qs, np.inf, axis=0) if n else np.zeros(0)
            col_k = sp.linalg.norm(Ks, np.inf, axis=0) if m else np.zeros(n)
            dcol = np.maximum(np.asarray(col_q).ravel(), np.asarray(col_k).ravel())
            row_k = np.asarray(sp.linalg.norm(Ks, np.inf, axis=1)).ravel() if m else np.zeros(0)
            d = 1.0 / np.sqrt(np.clip(dcol, 1e-4, 1e4))
            d[dcol == 0] = 1.0
            e = 1.0 / np.sqrt(np.clip(row_k, 1e-4, 1e4))
            e[row_k == 0] = 1.0
            Dm = sp.diags(d)
            Qs = (Dm @ Qs @ Dm).tocsc()
            Ks = (sp.diags(e) @ Ks @ Dm).tocsc()
            D *= d
            E *= e
        cs = c * D
        col_q = np.asarray(sp.linalg.norm(Qs, np.inf, axis=0)).ravel() if n else np.zeros(0)
        mean_q = float(col_q.mean()) if n else 0.0
        norm_c = float(np.max(np.abs(cs), initial=0.0))
        denom = max(mean_q, norm_c)
        cost = 1.0 / min(max(denom, 1e-4), 1e4) if denom > 0 else 1.0
        self.D = D
        self.E = E
        self.cost = cost
        self.Qs = (Qs * cost).tocsc()
        self.cs = cs * cost
        self.Ks = Ks
        self.KsT = Ks.T.tocsc()

    def _set_bounds(self, lo, hi) -> None:
        self.ls = np.where(np.isfinite(lo), lo * self.E, -_INF)
        self.us = np.where(np.isfinite(hi), hi * self.E, _INF)

    def update_bounds(self, lb: np.ndarray, ub: np.ndarray) -> None:
        """Replace the variable bounds (the trailing identity rows)."""
        n = self.n
        lo = self.l_raw.copy()
        hi = self.u_raw.copy()
        lo[self.m - n :] = lb
        hi[self.m - n :] = ub
        self.l_raw, self.u_raw = lo, hi
        self._set_bounds(lo, hi)

    # linear algebra ---------------------------------------------------

    def _rho_vector(self, rho: float) -> np.ndarray:
        r = np.full(self.m, float(rho))
        free = ~np.isfinite(self.ls) & ~np.isfinite(self.us)
        eq = np.isfinite(self.ls) & (np.abs(self.us - self.ls) < 1e-12 * np.maximum(1.0, np.abs(self.ls)))
        r[free] = _RHO_MIN
        r[eq] = _RHO_EQ_FACTOR * rho
        return r

    def _factor(self, rho_vec: np.ndarray) -> None:
        key = (rho_vec.tobytes(),)
        if key == self._factor_key:
            return
        # reduced system Q + sigma I + K' R K; positive definite, far less fill than the full KKT
        n = self.n
        mat = self.Qs + self.settings.sigma * sp.identity(n) + self.KsT @ sp.diags(rho_vec) @ self.Ks
        self._lu = spla.splu(sp.csc_matrix(mat), permc_spec="MMD_AT_PLUS_A")
        self._factor_key = key

    # main loop --------------------------------------------------------

    def solve(self, warm_x: np.ndarray | None = None, warm_y: np.ndarray | None = None) -> QpSolution:
        s = self.settings
        n, m = self.n, self.m
        if np.any(self.l_raw > self.u_raw + 1e-12):
            return self._result(np.zeros(n), np.zeros(m), INFEASIBLE, 0, math.inf, math.inf)
        x = np.zeros(n) if warm_x is None else np.asarray(warm_x, float) / self.D
        y = np.zeros(m) if warm_y is None else np.asarray(warm_y, float) * self.cost / self.E
        z = np.clip(self.Ks @ x, self.ls, self.us)
        rho = s.rho
        rho_vec = self._rho_vector(rho)
        self._factor(rho_vec)
        Q, c, K, KT = self.Qs, self.cs, self.Ks, self.KsT
        alpha = s.alpha
        sigma = s.sigma
        Dinv = 1.0 / self.D
        Einv = 1.0 / self.E
        rho_updates = 0
        history: list[tuple[int, float, float]] = []
        next_lp_check = 0
        status = MAX_ITER
        r_prim = r_dual = math.inf
        it = 0
        x_prev = x
        y_prev = y
        for it in range(1, s.max_iter + 1):
            x_prev, y_prev, z_prev = x, y, z
            x_t = self._lu.solve(sigma * x - c + KT @ (rho_vec * z - y))
            z_t = K @ x_t
            x = alpha * x_t + (1 - alpha) * x_prev
            z_relax = alpha * z_t + (1 - alpha) * z_prev
            z = np.clip(z_relax + y / rho_vec, self.ls, self.us)
            y = y + rho_vec * (z_relax - z)
            if it % s.check_interval and it != s.max_iter:
                continue
            Kx = K @ x
            Qx = Q @ x
            KTy = KT @ y
            r_prim = float(np.max(np.abs(Einv * (Kx - z)), initial=0.0))
            r_dual = float(np.max(np.abs(Dinv * (Qx + c + KTy)), initial=0.0)) / self.cost
            eps_p = s.eps_abs + s.eps_rel * max(
                np.max(np.abs(Einv * Kx), initial=0.0), np.max(np.abs(Einv * z), initial=0.0)
            )
            eps_d = s.eps_abs + s.eps_rel * max(
                np.max(np.abs(Dinv * Qx), initial=0.0),
                np.max(np.abs(Dinv * KTy), initial=0.0),
                np.max(np.abs(Dinv * c), initial=0.0),
            ) / self.cost
            if r_prim <= eps_p and r_dual <= eps_d:
                status = OPTIMAL
                break
            if self._primal_infeasible(y - y_prev):
                status = INFEASIBLE
                break
            if self._dual_infeasible(x - x_prev):
                status = UNBOUNDED
                break
            history.append((it, r_prim, float(np.max(np.abs(y), initial=0.0))))
            if it >= next_lp_check and self._diverging(history):
                # windowed suspicion only; certify with an exact feasibility check
                if not self.constraints_feasible():
                    status = INFEASIBLE
                    break
                next_lp_check = it + s.divergence_window
            # adaptive penalty, balanced in scaled space
            num = float(np.max(np.abs(Kx - z), initial=0.0)) / max(
                np.max(np.abs(Kx), initial=0.0), np.max(np.abs(z), initial=0.0), 1e-30
            )
            den = float(np.max(np.abs(Qx + c + KTy), initial=0.0)) / max(
                np.max(np.abs(Qx), initial=0.0),
                np.max(np.abs(KTy), initial=0.0),
                np.max(np.abs(c), initial=0.0),
                1e-30,
            )
            if den > 0 and num > 0:
                new_rho = float(np.clip(rho * math.sqrt(num / den), _RHO_MIN, _RHO_MAX))
                if new_rho > rho * s.adaptive_rho_tolerance or new_rho < rho / s.adaptive_rho_tolerance:
                    rho = new_rho
                    rho_vec = self._rho_vector(rho)
                    self._factor(rho_vec)
                    rho_updates += 1
        result = self._result(x, y, status, it, r_prim, r_dual, rho_updates=rho_updates)
        if status == OPTIMAL and s.polish:
            polished = self._polish(x, z, y)
            if polished is not None:
                px, py = polished
                cand = self._result(px, py, OPTIMAL, it, 0.0, 0.0, polished=True, rho_updates=rho_updates)
                cand.primal_residual, cand.dual_residual = self._unscaled_residuals(px, py)
                if (
                    cand.primal_residual <= max(result.primal_residual, s.eps_abs)
                    and cand.dual_residual <= max(result.dual_residual, s.eps_abs)
                ):
                    result = cand
        return result

    def _result(self, x, y, status, it, r_prim, r_dual, polished=False, rho_updates=0) -> QpSolution:
        xu = x * self.D
        yu = y * self.E / self.cost
        return QpSolution(
            x=xu,
            y=yu,
            status=status,
            primal_residual=r_prim,
            dual_residual=r_dual,
            objective_value=self.prob.objective(xu) if status != INFEASIBLE else math.inf,
            iterations=it,
            polished=polished,
            rho_updates=rho_updates,
        )

    def _unscaled_residuals(self, x, y) -> tuple[float, float]:
        Kx = self.Ks @ x
        zc = np.clip(Kx, self.ls, self.us)
        r_prim = float(np.max(np.abs((Kx - zc) / self.E), initial=0.0))
        r_dual = float(np.max(np.abs((self.Qs @ x + self.cs + self.KsT @ y) / self.D), initial=0.0)) / self.cost
        return r_prim, r_dual

    def _primal_infeasible(self, dy: np.ndarray) -> bool:
        s = self.settings
        dy_u = self.E * dy
        norm = float(np.max(np.abs(dy_u), initial=0.0))
        if norm < 1e-20:
            return False
        # normalise so the certificate test is scale free
        dy_s = dy / norm
        ktdy = (self.KsT @ dy_s) / self.D
        if np.max(np.abs(ktdy), initial=0.0) > s.eps_prim_inf:
            return False
        pos = np.maximum(dy_s, 0.0)
        neg = np.minimum(dy_s, 0.0)
        if np.any((pos > 0) & ~np.isfinite(self.us)) or np.any((neg < 0) & ~np.isfinite(self.ls)):
            # only certify with a tolerance on the unbounded parts
            if np.max(np.abs(pos[~np.isfinite(self.us)]), initial=0.0) > s.eps_prim_inf:
                return False
            if np.max(np.abs(neg[~np.isfinite(self.ls)]), initial=0.0) > s.eps_prim_inf:
                return False
        us = np.where(np.isfinite(self.us), self.us, 0.0)
        ls = np.where(np.isfinite(self.ls), self.ls, 0.0)
        return float(us @ pos + ls @ neg) < -s.eps_prim_inf

    def _dual_infeasible(self, dx: np.ndarray) -> bool:
        s = self.settings
        norm = float(np.max(np.abs(self.D * dx), initial=0.0))
        if norm < 1e-20:
            return False
        dx_s = dx / norm
        if np.max(np.abs((self.Qs @ dx_s) / self.D), initial=0.0) > s.eps_dual_inf * self.cost:
            return False
        if float(self.cs @ dx_s) / self.cost >= -s.eps_dual_inf:
            return False
        kdx = (self.Ks @ dx_s) / self.E
        tol = s.eps_dual_inf
        ok_hi = np.where(np.isfinite(self.us), kdx <= tol, True)
        ok_lo = np.where(np.isfinite(self.ls), kdx >= -tol, True)
        return bool(np.all(ok_hi & ok_lo))

    def _diverging(self, history) -> bool:
        """Windowed test: residual stalled over the window while multipliers grew."""
        w = self.settings.divergence_window
        if not history or history[-1][0] < w:
            return False
        last_it, r_last, y_last = history[-1]
        past = [h for h in history if h[0] <= last_it - w]
        if not past:
            return False
        _, r_then, y_then = past[-1]
        return r_last > 0.9 * r_then and y_last > 1.1 * max(y_then, 1e-12)

    def constraints_feasible(self) -> bool:
        """Exact feasibility of the current constraint set by linear programming."""
        prob = self.prob
        lo, hi = self.l_raw[self.m - self.n :], self.u_raw[self.m - self.n :]
        A_in, l_in, u_in = prob.A_in, self.l_raw[prob.m_eq : self.m - self.n], self.u_raw[prob.m_eq : self.m - self.n]
        up, dn = np.isfinite(u_in), np.isfinite(l_in)
        A_ub = sp.vstack([A_in[up], -A_in[dn]], format="csc")
        b_ub = np.concatenate([u_in[up], -l_in[dn]])
        res = linprog(
            np.zeros(self.n),
            A_ub=A_ub if A_ub.shape[0] else None,
            b_ub=b_ub if A_ub.shape[0] else None,
            A_eq=prob.A_eq if prob.m_eq else None,
            b_eq=self.l_raw[: prob.m_eq] if prob.m_eq else None,
            bounds=list(zip(np.where(np.isfinite(lo), lo, None), np.where(np.isfinite(hi), hi, None))),
            method="highs",
        )
        return res.status != 2

    # polishing --------------------------------------------------------

    def _polish(self, x, z, y):
        s = self.settings
        n = self.n
        lo_act = (z - self.ls < -y) | (np.isfinite(self.ls) & (self.ls == self.us))
        hi_act = (self.us - z < y) & ~lo_act
        rows_lo = np.flatnonzero(lo_act)
        rows_hi = np.flatnonzero(hi_act)
        rows = np.concatenate([rows_lo, rows_hi])
        K_act = self.Ks[rows]
        b = np.concatenate([self.ls[rows_lo], self.us[rows_hi]])
        if not np.all(np.isfinite(b)):
            return None
        na = len(rows)
        delta = s.polish_delta
        K_full = sp.bmat([[self.Qs, K_act.T], [K_act, None]], format="csc") if na else self.Qs.tocsc()
        reg = sp.bmat(
            [[self.Qs + delta * sp.identity(n), K_act.T], [K_act, -delta * sp.identity(na)]], format="csc"
        ) if na else (self.Qs + delta * sp.identity(n)).tocsc()
        try:
            lu = spla.splu(reg, permc_spec="COLAMD")
        except RuntimeError:
            return None
        rhs = np.concatenate([-self.cs, b])
        sol = lu.solve(rhs)
        for _ in range(s.polish_refine):
            resid = rhs - K_full @ sol
            sol = sol + lu.solve(resid)
        if not np.all(np.isfinite(sol)):
            return None
        xp = sol[:n]
        yp = np.zeros(self.m)
        yp[rows] = sol[n:]
        # reject an active set that produced wrong-signed multipliers
        tol = 1e-7 * max(1.0, float(np.max(np.abs(yp), initial=0.0)))
        eq_rows = np.isfinite(self.ls) & (self.ls == self.us)
        if np.any((yp[rows_lo] > tol) & ~eq_rows[rows_lo]) or np.any(yp[rows_hi] < -tol):
            # degenerate active sets admit many multipliers; look for one with valid signs
            yp = self._signed_multipliers(xp, rows_lo, rows_hi, eq_rows)
            if yp is None:
                return None
        return xp, yp

    def _signed_multipliers(self, xp, rows_lo, rows_hi, eq_rows, max_rows: int = 500):
        rows = np.concatenate([rows_lo, rows_hi])
        if len(rows) > max_rows:
            return None
        lo = np.concatenate([np.full(len(rows_lo), -np.inf), np.zeros(len(rows_hi))])
        hi = np.concatenate([np.where(eq_rows[rows_lo], np.inf, 0.0), np.full(len(rows_hi), np.inf)])
        target = -(self.Qs @ xp + self.cs)
        fit = lsq_linear(self.Ks[rows].T.toarray(), target, bounds=(lo, hi), method="bvls")
        scale = max(1.0, float(np.max(np.abs(target), initial=0.0)))
        if not np.max(np.abs(fit.fun), initial=0.0) <= 1e-9 * scale:
            return None
        yp = np.zeros(self.m)
        yp[rows] = fit.x
        return yp


def solve_qp(
    prob: QpProblem,
    eps_abs: float = 1e-6,
    eps_rel: float = 1e-6,
    max_iter: int = 50_000,
    settings: QpSettings | None = None,
) -> QpSolution:
    """Solve a convex QP; deterministic for identical inputs."""
    if settings is None:
        settings = QpSettings(eps_abs=eps_abs, eps_rel=eps_rel, max_iter=max_iter)
    return AdmmSolver(prob, settings).solve()


def dump_qp(prob: QpProblem, path) -> None:
    """Write the problem as ``row col value`` triplet sections for offline checks."""

    def triplets(name, mat):
        coo = sp.coo_matrix(mat)
        lines = [f"[{name}] {mat.shape[0]} {mat.shape[1]} {coo.nnz}"]
        order = np.lexsort((coo.col, coo.row))
        lines += [f"{coo.row[k]} {coo.col[k]} {coo.data[k]!r}" for k in order]
        return lines

    def vector(name, v):
        return [f"[{name}] {len(v)}"] + [repr(float(a)) for a in v]

    out = [f"# n={prob.n} m_eq={prob.m_eq} m_in={prob.m_in} offset={prob.offset!r}"]
    out += triplets("Q", prob.Q) + vector("c", prob.c)
    out += triplets("A_eq", prob.A_eq) + vector("b_eq", prob.b_eq)
    out += triplets("A_in", prob.A_in) + vector("l_in", prob.l_in) + vector("u_in", prob.u_in)
    out += vector("lb", prob.lb) + vector("ub", prob.ub)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")
