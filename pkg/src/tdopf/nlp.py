"""Primal-dual interior-point solver for smooth nonlinear programs.

Solves ``min f(x)  s.t.  c_E(x) = 0,  c_I(x) >= 0,  lb <= x <= ub`` with
analytic first derivatives supplied by the caller.  The Lagrangian Hessian is
approximated by central finite differences of the gradient, so problem
builders only ever provide first-order callbacks.  Inequalities get slack
variables and a logarithmic barrier; bound constraints enter the barrier
directly.  Variables with ``lb == ub`` are treated as fixed parameters and
eliminated internally without changing the problem's external dimension.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import ldl, solve_triangular

Array = np.ndarray

_FIXED_TOL = 1e-12       # lb/ub gap below this means the variable is pinned
_HESS_STEP = 1e-6        # central-difference step for the Lagrangian Hessian
_TAU = 0.995             # fraction-to-the-boundary factor
_KAPPA_EPS = 10.0        # inner loop stops when barrier KKT error <= KAPPA_EPS * mu
_KAPPA_SIGMA = 1e10      # dual safeguard corridor around mu/s
_STALL_WINDOW = 20       # infeasibility: constraint violation stalls this long
_STALL_FACTOR = 0.9
_MAX_INNER = 15          # iterations per barrier value before mu moves anyway
_MAX_BACKTRACKS = 30
_MAX_LS_FAILURES = 10


@dataclass
class NlpProblem:
    """Smooth NLP with analytic first derivatives.

    ``equalities``/``inequalities`` and their Jacobians may be ``None`` when
    absent.  Inequalities use the convention ``c_I(x) >= 0``.
    """
    dimension: int
    objective: Callable[[Array], float]
    gradient: Callable[[Array], Array]
    lower: Array
    upper: Array
    initial_point: Array
    equalities: Callable[[Array], Array] | None = None
    eq_jacobian: Callable[[Array], Array] | None = None
    inequalities: Callable[[Array], Array] | None = None
    ineq_jacobian: Callable[[Array], Array] | None = None
    name: str = ""

    def __post_init__(self):
        n = self.dimension
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.initial_point = np.asarray(self.initial_point, dtype=float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bound vectors must have length = dimension")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if self.initial_point.shape != (n,):
            raise ValueError("initial point must have length = dimension")
        if (self.equalities is None) != (self.eq_jacobian is None):
            raise ValueError("equalities and eq_jacobian must be given together")
        if (self.inequalities is None) != (self.ineq_jacobian is None):
            raise ValueError("inequalities and ineq_jacobian must be given together")


@dataclass
class SolveOptions:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    max_iter: int = 200
    mu_init: float = 0.1
    verbose: int = 0
    trace_file: str | None = None


@dataclass
class NlpSolution:
    status: str  # optimal | infeasible | iteration_limit | numerical_failure
    x: Array
    objective_value: float
    kkt_residual: float
    eq_multipliers: Array
    ineq_multipliers: Array
    iterations: int
    # per-iterate rows (iteration, mu, objective, feasibility, optimality)
    trace: list = field(default_factory=list)


@dataclass
class DerivativeReport:
    """Max relative errors of analytic derivatives vs central differences."""
    objective_error: float
    equality_error: float
    inequality_error: float
    worst_entries: dict

    @property
    def max_error(self) -> float:
        return max(self.objective_error, self.equality_error, self.inequality_error)


def solve(problem: NlpProblem, options: SolveOptions | None = None) -> NlpSolution:
    """Run the interior-point method on ``problem``."""
    return _InteriorPoint(problem, options or SolveOptions()).run()


# ---------------------------------------------------------------------------
# implementation
# ---------------------------------------------------------------------------

class _InteriorPoint:
    def __init__(self, problem: NlpProblem, options: SolveOptions):
        self.p = problem
        self.o = options
        lb, ub = problem.lower, problem.upper
        self.fixed = (ub - lb) <= _FIXED_TOL
        self.free = ~self.fixed
        self.x_full = problem.initial_point.copy()
        self.x_full[self.fixed] = lb[self.fixed]
        self.lb = lb[self.free]
        self.ub = ub[self.free]
        self.has_lb = np.isfinite(self.lb)
        self.has_ub = np.isfinite(self.ub)
        self.n = int(self.free.sum())

        probe = self._expand(self.x_full[self.free])
        self.m_eq = 0 if problem.equalities is None else len(np.atleast_1d(problem.equalities(probe)))
        self.m_in = 0 if problem.inequalities is None else len(np.atleast_1d(problem.inequalities(probe)))
        # internal objective scaling (max gradient 100 at the start point)
        # keeps multipliers moderate so the exact penalty does not smother
        # progress on badly scaled objectives
        g0 = np.asarray(problem.gradient(probe), dtype=float)[self.free]
        g0max = float(np.max(np.abs(g0))) if self.n else 1.0
        self.f_scale = min(1.0, 100.0 / max(g0max, 1e-8))

    # -- reduced-space evaluation ------------------------------------------
    def _expand(self, xr: Array) -> Array:
        x = self.x_full.copy()
        x[self.free] = xr
        return x

    def _f(self, xr):
        return self.f_scale * float(self.p.objective(self._expand(xr)))

    def _g(self, xr):
        return self.f_scale * np.asarray(self.p.gradient(self._expand(xr)), dtype=float)[self.free]

    def _ce(self, xr):
        if self.m_eq == 0:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self.p.equalities(self._expand(xr)), dtype=float))

    def _je(self, xr):
        if self.m_eq == 0:
            return np.zeros((0, self.n))
        return np.atleast_2d(np.asarray(self.p.eq_jacobian(self._expand(xr)), dtype=float))[:, self.free]

    def _ci(self, xr):
        if self.m_in == 0:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self.p.inequalities(self._expand(xr)), dtype=float))

    def _ji(self, xr):
        if self.m_in == 0:
            return np.zeros((0, self.n))
        return np.atleast_2d(np.asarray(self.p.ineq_jacobian(self._expand(xr)), dtype=float))[:, self.free]

    def _grad_lagrangian(self, xr, y, z):
        g = self._g(xr)
        if self.m_eq:
            g = g - self._je(xr).T @ y
        if self.m_in:
            g = g - self._ji(xr).T @ z
        return g

    # -- main loop ----------------------------------------------------------
    def run(self) -> NlpSolution:
        o = self.o
        x = self._interior_start()
        ci0 = self._ci(x)
        s = np.maximum(ci0, 1e-3) if self.m_in else np.zeros(0)
        mu = o.mu_init
        y = np.zeros(self.m_eq)
        z = mu / s if self.m_in else np.zeros(0)
        # unit bound duals regardless of the start gap; mu/gap would blow up
        # for variables boxed into narrow intervals and freeze them
        zl = np.zeros(self.n)
        zu = np.zeros(self.n)
        zl[self.has_lb] = 1.0
        zu[self.has_ub] = 1.0
        nu = 1.0
        trace = []
        theta_hist: deque = deque(maxlen=_STALL_WINDOW + 1)
        ls_failures = 0
        inner_count = 0
        status = "iteration_limit"
        it = 0

        for it in range(1, o.max_iter + 1):
            f = self._f(x)
            g = self._g(x)
            ce, je = self._ce(x), self._je(x)
            ci, ji = self._ci(x), self._ji(x)
            if not np.isfinite(f) or not np.all(np.isfinite(g)):
                status = "numerical_failure"
                break

            theta = self._theta(ce, ci, s)
            e0 = self._kkt_error(g, je, ji, ce, ci, s, y, z, zl, zu, x, 0.0)
            feas = max(_inf_norm(ce), _inf_norm(ci - s)) if (self.m_eq or self.m_in) else 0.0
            trace.append((it, mu, f / self.f_scale, feas, e0))
            if o.verbose >= 2:
                print(f"  it {it:3d}  mu={mu:.2e}  f={f / self.f_scale:.8e}  "
                      f"feas={feas:.2e}  kkt={e0:.2e}")
            if e0 <= o.opt_tol and feas <= o.feas_tol:
                status = "optimal"
                break

            if mu <= 1e-4:
                theta_hist.append(theta)
            else:
                theta_hist.clear()
            if (len(theta_hist) > _STALL_WINDOW
                    and theta > 10.0 * o.feas_tol
                    and theta > _STALL_FACTOR * theta_hist[0]):
                status = "infeasible"
                break

            emu = self._kkt_error(g, je, ji, ce, ci, s, y, z, zl, zu, x, mu)
            mu_floor = o.opt_tol / 10.0
            if emu <= _KAPPA_EPS * mu and mu > mu_floor:
                mu = max(mu_floor, 0.2 * mu)
                inner_count = 0
                continue
            inner_count += 1
            if inner_count > _MAX_INNER and mu > mu_floor:
                # barrier subproblem is stalling; keep mu moving so the
                # infeasibility test can engage, but still take the step
                mu = max(mu_floor, 0.2 * mu)
                inner_count = 0

            step = self._newton_step(x, s, y, z, zl, zu, g, ce, je, ci, ji, mu)
            if step is None:
                status = "numerical_failure"
                break
            dx, ds, dy, dz, w, resolve = step

            # exact penalty weight must dominate the trial multipliers; decay
            # recovers from transient spikes that would otherwise freeze the
            # line search for the rest of the run
            nu_req = 1.1 * max(_inf_norm(y + dy), _inf_norm(z + dz), 1.0) + 0.1
            if nu_req > nu:
                nu = nu_req
            elif nu > 10.0 * nu_req:
                nu = max(nu_req, 0.1 * nu)

            alpha_max = self._fraction_to_boundary_primal(x, s, dx, ds)
            alpha, dx, ds, soc_duals, ok = self._line_search(
                x, s, dx, ds, g, theta, mu, nu, alpha_max, resolve, ce, ci)
            if soc_duals is not None:
                dy, dz = soc_duals
            ls_failures = 0 if ok else ls_failures + 1
            if ls_failures >= _MAX_LS_FAILURES:
                # the merit cannot move any further; leftover constraint
                # violation means feasibility restoration has stalled
                status = "infeasible" if theta > 10.0 * o.feas_tol else "numerical_failure"
                break

            dzl, dzu = self._bound_dual_steps(x, s, zl, zu, dx, mu)
            alpha_z = self._fraction_to_boundary_dual(s, z, dz, x, zl, dzl, zu, dzu)
            x = x + alpha * dx
            s = s + alpha * ds
            y = y + alpha * dy
            z = z + alpha_z * dz
            zl = zl + alpha_z * dzl
            zu = zu + alpha_z * dzu
            # floating-point repair: a fraction-to-boundary step can round
            # exactly onto a bound once the gap nears one ulp
            m = self.has_lb
            x[m] = np.maximum(x[m], self.lb[m] + 1e-13 * np.maximum(1.0, np.abs(self.lb[m])))
            m = self.has_ub
            x[m] = np.minimum(x[m], self.ub[m] - 1e-13 * np.maximum(1.0, np.abs(self.ub[m])))
            if self.m_in:
                s = np.maximum(s, 1e-13)
            z, zl, zu = self._safeguard_duals(x, s, z, zl, zu, mu)

        else:
            it = o.max_iter

        f_raw = float(self.p.objective(self._expand(x)))
        g = self._g(x)
        ce, je = self._ce(x), self._je(x)
        ci, ji = self._ci(x), self._ji(x)
        e0 = self._kkt_error(g, je, ji, ce, ci, s, y, z, zl, zu, x, 0.0)
        feas = max(_inf_norm(ce), _inf_norm(ci - s)) if (self.m_eq or self.m_in) else 0.0
        if status == "optimal" and (e0 > o.opt_tol or feas > o.feas_tol):
            status = "numerical_failure"

        if o.trace_file:
            with open(o.trace_file, "w", newline="") as fh:
                wtr = csv.writer(fh)
                wtr.writerow(["iteration", "mu", "objective", "feasibility", "optimality"])
                wtr.writerows(trace)
        if o.verbose >= 1:
            print(f"[nlp] {self.p.name or 'problem'}: {status} in {it} iterations, "
                  f"f={f_raw:.8e}, kkt={e0:.2e}")

        return NlpSolution(status=status, x=self._expand(x), objective_value=f_raw,
                           kkt_residual=e0,
                           eq_multipliers=y / self.f_scale,
                           ineq_multipliers=z / self.f_scale,
                           iterations=it, trace=trace)

    # -- pieces --------------------------------------------------------------
    def _interior_start(self) -> Array:
        x = self.x_full[self.free].astype(float).copy()
        lo = np.full(self.n, -np.inf)
        hi = np.full(self.n, np.inf)
        if self.has_lb.any():
            lb = self.lb[self.has_lb]
            span = self.ub[self.has_lb] - lb  # inf where one-sided
            lo[self.has_lb] = lb + np.minimum(1e-2 * np.maximum(1.0, np.abs(lb)), 1e-2 * span)
        if self.has_ub.any():
            ub = self.ub[self.has_ub]
            span = ub - self.lb[self.has_ub]
            hi[self.has_ub] = ub - np.minimum(1e-2 * np.maximum(1.0, np.abs(ub)), 1e-2 * span)
        return np.clip(x, lo, hi)

    def _theta(self, ce, ci, s) -> float:
        t = 0.0
        if self.m_eq:
            t += float(np.abs(ce).sum())
        if self.m_in:
            t += float(np.abs(ci - s).sum())
        return t

    def _kkt_error(self, g, je, ji, ce, ci, s, y, z, zl, zu, x, mu) -> float:
        grad_l = g.copy()
        if self.m_eq:
            grad_l -= je.T @ y
        if self.m_in:
            grad_l -= ji.T @ z
        grad_l -= zl
        grad_l += zu
        n_mult = self.m_eq + self.m_in + int(self.has_lb.sum()) + int(self.has_ub.sum())
        mult_sum = (np.abs(y).sum() + np.abs(z).sum() + zl[self.has_lb].sum()
                    + zu[self.has_ub].sum())
        sd = max(100.0, mult_sum / max(1, n_mult)) / 100.0
        sc = max(100.0, (np.abs(z).sum() + zl[self.has_lb].sum() + zu[self.has_ub].sum())
                 / max(1, self.m_in + int(self.has_lb.sum()) + int(self.has_ub.sum()))) / 100.0
        err = _inf_norm(grad_l) / sd
        if self.m_eq:
            err = max(err, _inf_norm(ce))
        if self.m_in:
            err = max(err, _inf_norm(ci - s), _inf_norm(s * z - mu) / sc)
        if self.has_lb.any():
            m = self.has_lb
            err = max(err, _inf_norm((x[m] - self.lb[m]) * zl[m] - mu) / sc)
        if self.has_ub.any():
            m = self.has_ub
            err = max(err, _inf_norm((self.ub[m] - x[m]) * zu[m] - mu) / sc)
        return err

    def _hessian(self, xr, y, z) -> Array:
        n = self.n
        w = np.empty((n, n))
        h = _HESS_STEP
        for i in range(n):
            xp = xr.copy(); xp[i] += h
            xm = xr.copy(); xm[i] -= h
            w[:, i] = (self._grad_lagrangian(xp, y, z) - self._grad_lagrangian(xm, y, z)) / (2 * h)
        return 0.5 * (w + w.T)

    def _newton_step(self, x, s, y, z, zl, zu, g, ce, je, ci, ji, mu):
        n, mi, me = self.n, self.m_in, self.m_eq
        w = self._hessian(x, y, z)
        if not np.all(np.isfinite(w)):
            return None

        sig_l = np.zeros(n)
        sig_u = np.zeros(n)
        sig_l[self.has_lb] = (zl / (x - self.lb))[self.has_lb]
        sig_u[self.has_ub] = (zu / (self.ub - x))[self.has_ub]
        sig_s = z / s if mi else np.zeros(0)

        r1 = g.copy()
        if me:
            r1 -= je.T @ y
        if mi:
            r1 -= ji.T @ z
        r1[self.has_lb] -= (mu / (x - self.lb))[self.has_lb]
        r1[self.has_ub] += (mu / (self.ub - x))[self.has_ub]
        r2 = z - mu / s if mi else np.zeros(0)
        r3 = ce
        r4 = ci - s if mi else np.zeros(0)
        rhs = -np.concatenate([r1, r2, r3, r4])

        dim = n + mi + me + mi
        kkt = np.zeros((dim, dim))
        i_s = slice(n, n + mi)
        i_y = slice(n + mi, n + mi + me)
        i_z = slice(n + mi + me, dim)
        kkt[:n, :n] = w
        kkt[:n, :n][np.diag_indices(n)] += sig_l + sig_u
        if mi:
            kkt[i_s, i_s] = np.diag(sig_s)
            kkt[i_s, i_z] = -np.eye(mi)
            kkt[i_z, i_s] = -np.eye(mi)
            kkt[:n, i_z] = ji.T
            kkt[i_z, :n] = ji
        if me:
            kkt[:n, i_y] = je.T
            kkt[i_y, :n] = je

        resolve = self._solve_kkt(kkt, rhs, n + mi, me + mi)
        if resolve is None:
            return None
        sol = resolve(rhs)
        dx = sol[:n]
        ds = sol[i_s]
        dy = -sol[i_y]
        dz = -sol[i_z]
        return dx, ds, dy, dz, w, resolve

    def _bound_dual_steps(self, x, s, zl, zu, dx, mu):
        sig_l = np.zeros(self.n)
        sig_u = np.zeros(self.n)
        sig_l[self.has_lb] = (zl / (x - self.lb))[self.has_lb]
        sig_u[self.has_ub] = (zu / (self.ub - x))[self.has_ub]
        dzl = np.zeros(self.n)
        dzu = np.zeros(self.n)
        dzl[self.has_lb] = ((mu / (x - self.lb)) - zl - sig_l * dx)[self.has_lb]
        dzu[self.has_ub] = ((mu / (self.ub - x)) - zu + sig_u * dx)[self.has_ub]
        return dzl, dzu

    def _solve_kkt(self, kkt, rhs, want_pos, want_neg):
        """Factor with inertia correction (primal shift doubling from 1e-8).

        Returns a solve closure over the corrected factors, or None when no
        shift produces the required inertia.
        """
        dim = kkt.shape[0]
        diag = np.diag_indices(want_pos)
        delta = 0.0
        delta_c = 0.0
        for _ in range(60):
            m = kkt.copy()
            if delta:
                m[:want_pos, :want_pos][diag] += delta
            if delta_c:
                m[want_pos:, want_pos:][np.diag_indices(dim - want_pos)] -= delta_c
            try:
                lu, d, perm = ldl(m, lower=True)
            except np.linalg.LinAlgError:
                delta = 1e-8 if delta == 0.0 else 2.0 * delta
                continue
            pos, neg, zero = _block_inertia(d)
            if pos == want_pos and neg == want_neg and zero == 0:
                return lambda b: _ldl_solve(lu, d, perm, b, m)
            if zero > 0:
                delta_c = 1e-8 if delta_c == 0.0 else min(10.0 * delta_c, 1e-4)
            delta = 1e-8 if delta == 0.0 else 2.0 * delta
            if delta > 1e12:
                return None
        return None

    def _fraction_to_boundary_primal(self, x, s, dx, ds) -> float:
        alpha = 1.0
        if self.m_in:
            neg = ds < 0
            if neg.any():
                alpha = min(alpha, float(np.min(-_TAU * s[neg] / ds[neg])))
        lo_mask = self.has_lb & (dx < 0)
        if lo_mask.any():
            alpha = min(alpha, float(np.min(-_TAU * (x - self.lb)[lo_mask] / dx[lo_mask])))
        hi_mask = self.has_ub & (dx > 0)
        if hi_mask.any():
            alpha = min(alpha, float(np.min(_TAU * (self.ub - x)[hi_mask] / dx[hi_mask])))
        return alpha

    def _fraction_to_boundary_dual(self, s, z, dz, x, zl, dzl, zu, dzu) -> float:
        alpha = 1.0
        if self.m_in:
            neg = dz < 0
            if neg.any():
                alpha = min(alpha, float(np.min(-_TAU * z[neg] / dz[neg])))
        for mask, v, dv in ((self.has_lb, zl, dzl), (self.has_ub, zu, dzu)):
            m = mask & (dv < 0)
            if m.any():
                alpha = min(alpha, float(np.min(-_TAU * v[m] / dv[m])))
        return alpha

    def _merit(self, x, s, mu, nu) -> float:
        if np.any((x - self.lb)[self.has_lb] <= 0) or np.any((self.ub - x)[self.has_ub] <= 0):
            return np.inf
        if self.m_in and np.any(s <= 0):
            return np.inf
        val = self._f(x)
        if not np.isfinite(val):
            return np.inf
        if self.m_in:
            val -= mu * float(np.log(s).sum())
        val -= mu * float(np.log((x - self.lb)[self.has_lb]).sum())
        val -= mu * float(np.log((self.ub - x)[self.has_ub]).sum())
        theta = self._theta(self._ce(x), self._ci(x), s)
        return val + nu * theta

    def _line_search(self, x, s, dx, ds, g, theta, mu, nu, alpha_max, resolve, ce, ci):
        """Backtracking Armijo search on the L1-penalty barrier merit.

        On the first rejected trial a second-order correction re-solves the
        cached KKT system against the constraint values at the trial point,
        countering the curvature-induced violation growth of full steps.
        Returns (alpha, dx_used, ds_used, corrected_duals_or_None, accepted).
        """
        d_dir = float(g @ dx)
        if self.m_in:
            d_dir -= mu * float((ds / s).sum())
        d_dir -= mu * float((dx / (x - self.lb))[self.has_lb].sum())
        d_dir += mu * float((dx / (self.ub - x))[self.has_ub].sum())
        d_phi = d_dir - nu * theta

        phi0 = self._merit(x, s, mu, nu)
        # relative slack keeps zero-degree-of-freedom problems moving: the
        # primal may already sit at the (unique) feasible point, where only
        # the duals advance and the merit cannot strictly decrease
        eps_slack = 1e-12 * max(1.0, abs(phi0))
        alpha = alpha_max
        best_alpha, best_phi = alpha_max, np.inf
        for k in range(_MAX_BACKTRACKS):
            phi = self._merit(x + alpha * dx, s + alpha * ds, mu, nu)
            if phi <= phi0 + 1e-4 * alpha * d_phi + eps_slack:
                return alpha, dx, ds, None, True
            if k == 0 and (self.m_eq or self.m_in):
                soc = self._soc_step(x, s, dx, ds, alpha, ce, ci, resolve,
                                     phi0, d_phi, mu, nu)
                if soc is not None:
                    return soc
            if phi < best_phi:
                best_alpha, best_phi = alpha, phi
            alpha *= 0.5
        if best_phi < phi0:
            return best_alpha, dx, ds, None, True
        return min(alpha_max, 1e-3), dx, ds, None, False

    def _soc_step(self, x, s, dx, ds, alpha, ce, ci, resolve, phi0, d_phi, mu, nu):
        """Iterated second-order corrections against the cached KKT factors.

        Each round retargets the constraint rows at the latest trial point
        (Ipopt-style accumulation), shrinking the curvature-induced violation
        until the merit accepts or the correction stops paying off.
        """
        n, mi, me = self.n, self.m_in, self.m_eq
        x_t = x + alpha * dx
        s_t = s + alpha * ds
        ce_t = self._ce(x_t)
        ci_t = self._ci(x_t)
        theta_t = self._theta(ce_t, ci_t, s_t)
        if theta_t < self._theta(ce, ci, s):
            return None  # violation shrank; plain backtracking is fine

        ce_soc = alpha * ce + ce_t
        ci_soc = alpha * (ci - s) + (ci_t - s_t) if mi else np.zeros(0)
        theta_old = theta_t
        for _ in range(4):
            rhs = np.zeros(n + mi + me + mi)
            rhs[n + mi:n + mi + me] = -(ce_soc - ce)
            if mi:
                rhs[n + mi + me:] = -(ci_soc - (ci - s))
            sol = resolve(rhs)
            dx2 = dx + sol[:n]
            ds2 = ds + sol[n:n + mi]
            a2 = self._fraction_to_boundary_primal(x, s, dx2, ds2)
            x2 = x + a2 * dx2
            s2 = s + a2 * ds2
            phi = self._merit(x2, s2, mu, nu)
            if phi <= phi0 + 1e-4 * a2 * d_phi + 1e-12 * max(1.0, abs(phi0)):
                dy2 = -sol[n + mi:n + mi + me]
                dz2 = -sol[n + mi + me:]
                return a2, dx2, ds2, (dy2, dz2), True
            ce_2 = self._ce(x2)
            ci_2 = self._ci(x2)
            theta_2 = self._theta(ce_2, ci_2, s2)
            if theta_2 > 0.99 * theta_old:
                return None  # corrections stopped reducing the violation
            theta_old = theta_2
            ce_soc = a2 * ce_soc + ce_2
            ci_soc = a2 * ci_soc + (ci_2 - s2) if mi else np.zeros(0)
        return None

    def _safeguard_duals(self, x, s, z, zl, zu, mu):
        if self.m_in:
            z = np.clip(z, mu / (_KAPPA_SIGMA * s), _KAPPA_SIGMA * mu / s)
        zl = zl.copy()
        zu = zu.copy()
        lb_gap = x - self.lb
        ub_gap = self.ub - x
        m = self.has_lb
        zl[m] = np.clip(zl[m], mu / (_KAPPA_SIGMA * lb_gap[m]), _KAPPA_SIGMA * mu / lb_gap[m])
        m = self.has_ub
        zu[m] = np.clip(zu[m], mu / (_KAPPA_SIGMA * ub_gap[m]), _KAPPA_SIGMA * mu / ub_gap[m])
        return z, zl, zu


def _inf_norm(v: Array) -> float:
    return float(np.max(np.abs(v))) if len(v) else 0.0


def _block_inertia(d: Array) -> tuple[int, int, int]:
    """Eigenvalue signs of the LDL^T block-diagonal factor (1x1/2x2 blocks).

    Pivots are classified strictly by sign; KKT entries span many orders of
    magnitude near active bounds, so any magnitude threshold would misread
    legitimately small pivots.  Exact zeros mark singularity.
    """
    n = d.shape[0]
    pos = neg = zero = 0
    i = 0
    while i < n:
        if i + 1 < n and d[i + 1, i] != 0.0:
            a, b, c = d[i, i], d[i + 1, i], d[i + 1, i + 1]
            tr, det = a + c, a * c - b * b
            disc = np.sqrt(max(tr * tr - 4 * det, 0.0))
            for lam in ((tr + disc) / 2, (tr - disc) / 2):
                if lam > 0.0:
                    pos += 1
                elif lam < 0.0:
                    neg += 1
                else:
                    zero += 1
            i += 2
        else:
            lam = d[i, i]
            if lam > 0.0:
                pos += 1
            elif lam < 0.0:
                neg += 1
            else:
                zero += 1
            i += 1
    return pos, neg, zero


def _ldl_solve(lu, d, perm, b, m) -> Array:
    """Solve m @ x = b given scipy's LDL^T factors, one refinement pass."""
    def once(rhs):
        t = lu[perm]
        w = solve_triangular(t, rhs[perm], lower=True, unit_diagonal=True)
        u = _block_diag_solve(d, w)
        v = solve_triangular(t.T, u, lower=False, unit_diagonal=True)
        out = np.empty_like(v)
        out[perm] = v
        return out

    x = once(b)
    x += once(b - m @ x)
    return x


def _block_diag_solve(d: Array, w: Array) -> Array:
    n = d.shape[0]
    u = np.empty_like(w)
    i = 0
    while i < n:
        if i + 1 < n and d[i + 1, i] != 0.0:
            a, b, c = d[i, i], d[i + 1, i], d[i + 1, i + 1]
            det = a * c - b * b
            u[i] = (c * w[i] - b * w[i + 1]) / det
            u[i + 1] = (-b * w[i] + a * w[i + 1]) / det
            i += 2
        else:
            u[i] = w[i] / d[i, i]
            i += 1
    return u


# ---------------------------------------------------------------------------
# derivative verification
# ---------------------------------------------------------------------------

def check_derivatives(problem: NlpProblem, x: Array) -> DerivativeReport:
    """Compare analytic gradient/Jacobians against central finite differences.

    Steps are ``1e-6 * (1 + |x_i|)`` per coordinate.  Relative errors use
    ``max(1, |analytic|, |numeric|)`` denominators so small entries are
    judged absolutely.
    """
    x = np.asarray(x, dtype=float)
    n = problem.dimension

    def fd_column(func, i):
        h = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        return (np.asarray(func(xp), dtype=float) - np.asarray(func(xm), dtype=float)) / (2 * h)

    worst = {}

    g_an = np.asarray(problem.gradient(x), dtype=float)
    g_fd = np.array([fd_column(problem.objective, i) for i in range(n)])
    err = np.abs(g_an - g_fd) / np.maximum(1.0, np.maximum(np.abs(g_an), np.abs(g_fd)))
    obj_err = float(err.max()) if n else 0.0
    worst["objective"] = int(np.argmax(err)) if n else -1

    def jac_error(func, jac):
        j_an = np.atleast_2d(np.asarray(jac(x), dtype=float))
        j_fd = np.column_stack([fd_column(func, i) for i in range(n)])
        e = np.abs(j_an - j_fd) / np.maximum(1.0, np.maximum(np.abs(j_an), np.abs(j_fd)))
        flat = int(np.argmax(e))
        return float(e.max()), np.unravel_index(flat, e.shape)

    eq_err, in_err = 0.0, 0.0
    if problem.equalities is not None:
        eq_err, worst["equality"] = jac_error(problem.equalities, problem.eq_jacobian)
    if problem.inequalities is not None:
        in_err, worst["inequality"] = jac_error(problem.inequalities, problem.ineq_jacobian)
    return DerivativeReport(objective_error=obj_err, equality_error=eq_err,
                            inequality_error=in_err, worst_entries=worst)
