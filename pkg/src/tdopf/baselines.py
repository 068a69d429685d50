"""Reference methods: weighted centralized TDOPF and APP decomposition.

The centralized model stacks the transmission block, explicit boundary
variables, and every feeder block into one NLP, tying each boundary triple
(interface voltage, boundary active/reactive power) together with linking
equalities.  The APP baseline duplicates exactly those triples on the TSO and
DSO sides and iterates the auxiliary-problem-principle updates until the
duplicates agree, which takes the usual tens of exchanges and serves as the
iteration-count yardstick.  Boundary power duplicates are kept in MW/Mvar so
the unit penalty defaults act on cost-commensurate scales; the convergence
test applies in per-unit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acopf import (
    AcBlock, ObjectiveSpec, OpfVariables, _flow_callbacks, _single_network_objective,
)
from .netcase import IntegratedCase
from .nlp import NlpProblem, NlpSolution, SolveOptions, solve

Array = np.ndarray


class BaselineError(RuntimeError):
    """A baseline method failed to produce a usable solution."""


# MW-equivalent weight of 1 p.u. of boundary voltage inside the APP coupling.
# Both parties are orders of magnitude stiffer in voltage than in power, so an
# unweighted voltage link converges orders of magnitude slower than the power
# links; this conditions all three components comparably.
_V_WEIGHT = 50.0


@dataclass(frozen=True)
class WeightConfig:
    w_t: float
    w_d: float

    def __post_init__(self):
        if self.w_t <= 0.0 or self.w_d <= 0.0:
            raise BaselineError("objective weights must be positive")

    def label(self) -> str:
        def fmt(w):
            return f"{w:g}"
        lhs = "c_T" if self.w_t == 1.0 else f"{fmt(self.w_t)}c_T"
        rhs = "c_D" if self.w_d == 1.0 else f"{fmt(self.w_d)}c_D"
        return f"{lhs}+{rhs}"


@dataclass(frozen=True)
class AppConfig:
    # stable defaults follow the classical convention beta = 2*gamma; the
    # step keeps the dual update critically damped at desk scale
    penalty_beta: float = 2.0
    penalty_gamma: float = 1.0
    step_c: float = 0.5
    max_outer: int = 500
    boundary_tol: float = 1e-4  # p.u.

    def __post_init__(self):
        if min(self.penalty_beta, self.penalty_gamma, self.step_c,
               self.boundary_tol) <= 0.0 or self.max_outer < 1:
            raise BaselineError("APP parameters must be positive, max_outer >= 1")


# ---------------------------------------------------------------------------
# centralized TDOPF
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CentralizedResult:
    t_solution: OpfVariables
    d_solutions: tuple[OpfVariables, ...]
    c_t: float
    c_d_per_feeder: tuple[float, ...]
    c_d_total: float
    weighted_objective: float
    boundary: tuple[tuple[float, float, float], ...]  # per feeder (v pu, P MW, Q Mvar)
    link_multipliers: tuple[tuple[float, float, float], ...]
    nlp: NlpSolution


class _CentralizedModel:
    """Index bookkeeping and callbacks for the monolithic TDOPF NLP."""

    def __init__(self, case: IntegratedCase, weights: WeightConfig):
        self.case = case
        self.weights = weights
        self.t_block = AcBlock(case.transmission, offset=0)
        self.i_bound = self.t_block.nvar  # P,Q boundary pairs in transmission p.u.
        self.n_feeder = len(case.feeders)
        offset = self.i_bound + 2 * self.n_feeder
        self.d_blocks = []
        for f in case.feeders:
            block = AcBlock(f.network, offset=offset)
            self.d_blocks.append(block)
            offset += block.nvar
        self.nvar = offset
        t_idx = case.transmission.bus_index()
        self.if_bus = [t_idx[f.interface_bus] for f in case.feeders]
        self.root_gen = [b.root_import_gen() for b in self.d_blocks]
        self.base_ratio = [b.base / self.t_block.base for b in self.d_blocks]

        self.m_eq_t = 2 * self.t_block.nb
        self.m_eq_feeders = [2 * b.nb for b in self.d_blocks]
        self.m_eq = self.m_eq_t + sum(self.m_eq_feeders) + 3 * self.n_feeder
        self.m_in = self.t_block.nflow + sum(b.nflow for b in self.d_blocks)

    def p_col(self, f: int) -> int:
        return self.i_bound + 2 * f

    def q_col(self, f: int) -> int:
        return self.i_bound + 2 * f + 1

    def t_extras(self, x: Array) -> tuple[Array, Array]:
        p_extra = np.zeros(self.t_block.nb)
        q_extra = np.zeros(self.t_block.nb)
        for f in range(self.n_feeder):
            p_extra[self.if_bus[f]] += x[self.p_col(f)]
            q_extra[self.if_bus[f]] += x[self.q_col(f)]
        return p_extra, q_extra

    def equalities(self, x: Array) -> Array:
        p_extra, q_extra = self.t_extras(x)
        parts = [self.t_block.balance(x, p_extra, q_extra)]
        for block in self.d_blocks:
            parts.append(block.balance(x))
        link = np.empty(3 * self.n_feeder)
        for f, block in enumerate(self.d_blocks):
            root = block.slack
            _, _, pg, qg = block.split(x)
            link[3 * f] = x[self.t_block.i_v(self.if_bus[f])] - x[block.i_v(root)]
            link[3 * f + 1] = x[self.p_col(f)] - pg[self.root_gen[f]] * self.base_ratio[f]
            link[3 * f + 2] = x[self.q_col(f)] - qg[self.root_gen[f]] * self.base_ratio[f]
        parts.append(link)
        return np.concatenate(parts)

    def eq_jacobian(self, x: Array) -> Array:
        out = np.zeros((self.m_eq, self.nvar))
        self.t_block.balance_jac(x, out, 0)
        for f in range(self.n_feeder):
            out[self.if_bus[f], self.p_col(f)] = 1.0
            out[self.t_block.nb + self.if_bus[f], self.q_col(f)] = 1.0
        row = self.m_eq_t
        for block, m in zip(self.d_blocks, self.m_eq_feeders):
            block.balance_jac(x, out, row)
            row += m
        for f, block in enumerate(self.d_blocks):
            root = block.slack
            out[row, self.t_block.i_v(self.if_bus[f])] = 1.0
            out[row, block.i_v(root)] = -1.0
            out[row + 1, self.p_col(f)] = 1.0
            out[row + 1, block.i_pg(self.root_gen[f])] = -self.base_ratio[f]
            out[row + 2, self.q_col(f)] = 1.0
            out[row + 2, block.i_qg(self.root_gen[f])] = -self.base_ratio[f]
            row += 3
        return out

    def inequalities(self, x: Array) -> Array | None:
        if self.m_in == 0:
            return None
        parts = [self.t_block.flow_margins(x)]
        parts += [b.flow_margins(x) for b in self.d_blocks]
        return np.concatenate(parts)

    def ineq_jacobian(self, x: Array) -> Array | None:
        if self.m_in == 0:
            return None
        out = np.zeros((self.m_in, self.nvar))
        self.t_block.flow_jac(x, out, 0)
        row = self.t_block.nflow
        for block in self.d_blocks:
            block.flow_jac(x, out, row)
            row += block.nflow
        return out

    def c_t(self, x: Array) -> float:
        _, _, pg, _ = self.t_block.split(x)
        exports = sum(x[self.p_col(f)] for f in range(self.n_feeder))
        return self.t_block.base * (pg.sum() - self.t_block.pd.sum() - exports)

    def c_d(self, x: Array, f: int) -> float:
        block = self.d_blocks[f]
        _, _, pg, _ = block.split(x)
        pmw = pg * block.base
        cost = self.case.purchase_price * pmw[self.root_gen[f]]
        for i, g in enumerate(block.net.generators):
            if i == self.root_gen[f]:
                continue
            cost += g.cost_linear * pmw[i] + g.cost_quadratic * pmw[i] ** 2
        return float(cost)

    def objective(self, x: Array) -> float:
        total = self.weights.w_t * self.c_t(x)
        for f in range(self.n_feeder):
            total += self.weights.w_d * self.c_d(x, f)
        return total

    def gradient(self, x: Array) -> Array:
        g = np.zeros(self.nvar)
        tb = self.t_block
        g[tb.offset + 2 * tb.nb:tb.offset + 2 * tb.nb + tb.ng] = \
            self.weights.w_t * tb.base
        for f in range(self.n_feeder):
            g[self.p_col(f)] = -self.weights.w_t * tb.base
        for f, block in enumerate(self.d_blocks):
            _, _, pg, _ = block.split(x)
            c1 = np.array([gen.cost_linear for gen in block.net.generators])
            c2 = np.array([gen.cost_quadratic for gen in block.net.generators])
            c1[self.root_gen[f]] = self.case.purchase_price
            c2[self.root_gen[f]] = 0.0
            cols = slice(block.offset + 2 * block.nb,
                         block.offset + 2 * block.nb + block.ng)
            g[cols] = self.weights.w_d * block.base * (c1 + 2.0 * c2 * pg * block.base)
        return g

    def bounds(self) -> tuple[Array, Array]:
        lb = np.full(self.nvar, -np.inf)
        ub = np.full(self.nvar, np.inf)
        t_lb, t_ub = self.t_block.default_bounds()
        lb[:self.t_block.nvar] = t_lb
        ub[:self.t_block.nvar] = t_ub
        for f, block in enumerate(self.d_blocks):
            g = block.net.generators[self.root_gen[f]]
            lb[self.p_col(f)] = g.p_min / self.t_block.base
            ub[self.p_col(f)] = g.p_max / self.t_block.base
            lb[self.q_col(f)] = g.q_min / self.t_block.base
            ub[self.q_col(f)] = g.q_max / self.t_block.base
            b_lb, b_ub = block.default_bounds()
            lb[block.offset:block.offset + block.nvar] = b_lb
            ub[block.offset:block.offset + block.nvar] = b_ub
        return lb, ub

    def start(self, lb: Array, ub: Array) -> Array:
        x = np.empty(self.nvar)
        x[:self.t_block.nvar] = self.t_block.flat_start(
            lb[:self.t_block.nvar], ub[:self.t_block.nvar])
        for f, block in enumerate(self.d_blocks):
            load = block.pd.sum() * self.base_ratio[f]
            x[self.p_col(f)] = np.clip(load, lb[self.p_col(f)], ub[self.p_col(f)])
            x[self.q_col(f)] = np.clip(0.0, lb[self.q_col(f)], ub[self.q_col(f)])
            sl = slice(block.offset, block.offset + block.nvar)
            x[sl] = block.flat_start(lb[sl], ub[sl])
        return x

    def problem(self) -> NlpProblem:
        lb, ub = self.bounds()
        ineq = self.inequalities if self.m_in else None
        jineq = self.ineq_jacobian if self.m_in else None
        return NlpProblem(
            dimension=self.nvar, objective=self.objective, gradient=self.gradient,
            equalities=self.equalities, eq_jacobian=self.eq_jacobian,
            inequalities=ineq, ineq_jacobian=jineq,
            lower=lb, upper=ub, initial_point=self.start(lb, ub),
            name=f"centralized:{self.case.name or 'case'}[{self.weights.label()}]")


def build_centralized(case: IntegratedCase, weights: WeightConfig) -> NlpProblem:
    """Monolithic weighted TDOPF over the transmission grid and all feeders."""
    return _CentralizedModel(case, weights).problem()


def solve_centralized(case: IntegratedCase, weights: WeightConfig,
                      options: SolveOptions | None = None) -> CentralizedResult:
    model = _CentralizedModel(case, weights)
    sol = solve(model.problem(), options)
    if sol.status != "optimal":
        raise BaselineError(f"centralized TDOPF returned {sol.status}")
    x = sol.x
    t_solution = model.t_block.to_variables(x)
    d_solutions = tuple(b.to_variables(x) for b in model.d_blocks)
    c_t = model.c_t(x)
    c_ds = tuple(model.c_d(x, f) for f in range(model.n_feeder))
    boundary = []
    multipliers = []
    row = model.m_eq_t + sum(model.m_eq_feeders)
    for f in range(model.n_feeder):
        v = float(x[model.t_block.i_v(model.if_bus[f])])
        p_mw = float(x[model.p_col(f)]) * model.t_block.base
        q_mw = float(x[model.q_col(f)]) * model.t_block.base
        boundary.append((v, p_mw, q_mw))
        # APP fixed-point multipliers are the negated linking-row duals; the
        # power components convert from per-unit to the MW basis of the
        # boundary triples
        lam = sol.eq_multipliers[row + 3 * f: row + 3 * f + 3]
        multipliers.append((-float(lam[0]), -float(lam[1]) / model.t_block.base,
                            -float(lam[2]) / model.t_block.base))
    return CentralizedResult(
        t_solution=t_solution, d_solutions=d_solutions, c_t=c_t,
        c_d_per_feeder=c_ds, c_d_total=float(sum(c_ds)),
        weighted_objective=weights.w_t * c_t + weights.w_d * float(sum(c_ds)),
        boundary=tuple(boundary), link_multipliers=tuple(multipliers), nlp=sol)


# ---------------------------------------------------------------------------
# APP decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AppStart:
    """Warm start: per-feeder boundary triples (v pu, P MW, Q Mvar) and the
    matching multipliers (lambda_v, lambda_p, lambda_q)."""
    boundary: tuple[tuple[float, float, float], ...]
    multipliers: tuple[tuple[float, float, float], ...]


@dataclass
class AppResult:
    converged: bool
    outer_iterations: int
    residual_history: list  # (iteration, max gap pu, weighted objective)
    weighted_objective: float
    c_t: float
    c_d_per_feeder: tuple[float, ...]
    c_d_total: float
    t_solution: OpfVariables
    d_solutions: tuple[OpfVariables, ...]
    boundary_t: list
    boundary_d: list


def _app_terms(beta, gamma, w_k, other_k, lam, sign):
    """APP auxiliary objective for one boundary triple.

    sign=+1 on the TSO side, -1 on the DSO side: beta/2*||w - w_k||^2 +
    gamma*w.(w_k - other_k) + sign*lam.w  with other_k the opposite side's
    last iterate.
    """
    w_k = np.asarray(w_k)
    drift = gamma * (w_k - np.asarray(other_k)) + sign * np.asarray(lam)

    def value(w):
        return 0.5 * beta * float(np.sum((w - w_k) ** 2)) + float(drift @ w)

    def grad(w):
        return beta * (w - w_k) + drift

    return value, grad


def _solve_tso_subproblem(case, weights, cfg, w_t_k, w_d_k, lam, options):
    block = AcBlock(case.transmission, offset=0)
    n_feeder = len(case.feeders)
    i_bound = block.nvar
    nvar = i_bound + 2 * n_feeder
    t_idx = case.transmission.bus_index()
    if_bus = [t_idx[f.interface_bus] for f in case.feeders]
    base = block.base

    terms = [_app_terms(cfg.penalty_beta, cfg.penalty_gamma, w_t_k[f], w_d_k[f],
                        lam[f], +1.0) for f in range(n_feeder)]

    def extras(x):
        p_extra = np.zeros(block.nb)
        q_extra = np.zeros(block.nb)
        for f in range(n_feeder):
            p_extra[if_bus[f]] += x[i_bound + 2 * f]
            q_extra[if_bus[f]] += x[i_bound + 2 * f + 1]
        return p_extra, q_extra

    def w_of(x, f):
        return np.array([x[if_bus[f]] * _V_WEIGHT, x[i_bound + 2 * f] * base,
                         x[i_bound + 2 * f + 1] * base])

    def objective(x):
        _, _, pg, _ = block.split(x)
        exports = sum(x[i_bound + 2 * f] for f in range(n_feeder))
        total = weights.w_t * base * (pg.sum() - block.pd.sum() - exports)
        for f in range(n_feeder):
            total += terms[f][0](w_of(x, f))
        return total

    def gradient(x):
        g = np.zeros(nvar)
        g[2 * block.nb:2 * block.nb + block.ng] = weights.w_t * base
        for f in range(n_feeder):
            g[i_bound + 2 * f] = -weights.w_t * base
            gw = terms[f][1](w_of(x, f))
            g[if_bus[f]] += gw[0] * _V_WEIGHT
            g[i_bound + 2 * f] += gw[1] * base
            g[i_bound + 2 * f + 1] += gw[2] * base
        return g

    def equalities(x):
        p_extra, q_extra = extras(x)
        return block.balance(x, p_extra, q_extra)

    def eq_jacobian(x):
        out = np.zeros((2 * block.nb, nvar))
        block.balance_jac(x, out, 0)
        for f in range(n_feeder):
            out[if_bus[f], i_bound + 2 * f] = 1.0
            out[block.nb + if_bus[f], i_bound + 2 * f + 1] = 1.0
        return out

    lb = np.full(nvar, -np.inf)
    ub = np.full(nvar, np.inf)
    t_lb, t_ub = block.default_bounds()
    lb[:block.nvar] = t_lb
    ub[:block.nvar] = t_ub
    for f, feeder in enumerate(case.feeders):
        g = feeder.network.generators[AcBlock(feeder.network).root_import_gen()]
        lb[i_bound + 2 * f] = g.p_min / base
        ub[i_bound + 2 * f] = g.p_max / base
        lb[i_bound + 2 * f + 1] = g.q_min / base
        ub[i_bound + 2 * f + 1] = g.q_max / base

    ineq = jineq = None
    if block.nflow:
        def ineq(x):
            return block.flow_margins(x)

        def jineq(x):
            out = np.zeros((block.nflow, nvar))
            block.flow_jac(x, out, 0)
            return out

    x0 = np.empty(nvar)
    x0[:block.nvar] = block.flat_start(t_lb, t_ub)
    for f in range(n_feeder):
        x0[i_bound + 2 * f] = np.clip(w_t_k[f][1] / base, lb[i_bound + 2 * f],
                                      ub[i_bound + 2 * f])
        x0[i_bound + 2 * f + 1] = np.clip(w_t_k[f][2] / base, lb[i_bound + 2 * f + 1],
                                          ub[i_bound + 2 * f + 1])

    prob = NlpProblem(dimension=nvar, objective=objective, gradient=gradient,
                      equalities=equalities, eq_jacobian=eq_jacobian,
                      inequalities=ineq, ineq_jacobian=jineq,
                      lower=lb, upper=ub, initial_point=x0, name="app-tso")
    sol = solve(prob, options)
    if sol.status != "optimal":
        raise BaselineError(f"APP TSO subproblem returned {sol.status}")
    return sol, block.to_variables(sol.x), [w_of(sol.x, f) for f in range(n_feeder)]


def _solve_dso_subproblem(case, f_index, weights, cfg, w_d_k, w_t_k, lam, options):
    feeder = case.feeders[f_index]
    block = AcBlock(feeder.network, offset=0)
    root = block.slack
    imp = block.root_import_gen()
    base = block.base
    value, grad_w = _app_terms(cfg.penalty_beta, cfg.penalty_gamma, w_d_k, w_t_k,
                               lam, -1.0)
    base_obj, base_grad = _single_network_objective(
        block, ObjectiveSpec("dso_cost", case.purchase_price), None)

    def w_of(x):
        _, _, pg, qg = block.split(x)
        return np.array([x[root] * _V_WEIGHT, pg[imp] * base, qg[imp] * base])

    def objective(x):
        return weights.w_d * base_obj(x) + value(w_of(x))

    def gradient(x):
        g = weights.w_d * base_grad(x)
        gw = grad_w(w_of(x))
        g[root] += gw[0] * _V_WEIGHT
        g[block.i_pg(imp)] += gw[1] * base
        g[block.i_qg(imp)] += gw[2] * base
        return g

    lb, ub = block.default_bounds()  # root voltage keeps conventional bounds
    ineq, jineq = _flow_callbacks(block)

    def equalities(x):
        return block.balance(x)

    def eq_jacobian(x):
        out = np.zeros((2 * block.nb, block.nvar))
        block.balance_jac(x, out, 0)
        return out

    prob = NlpProblem(dimension=block.nvar, objective=objective, gradient=gradient,
                      equalities=equalities, eq_jacobian=eq_jacobian,
                      inequalities=ineq, ineq_jacobian=jineq,
                      lower=lb, upper=ub,
                      initial_point=block.flat_start(lb, ub),
                      name=f"app-dso:{f_index}")
    sol = solve(prob, options)
    if sol.status != "optimal":
        raise BaselineError(f"APP DSO subproblem {f_index} returned {sol.status}")
    return sol, block.to_variables(sol.x), w_of(sol.x)


def run_app(case: IntegratedCase, weights: WeightConfig,
            cfg: AppConfig | None = None, start: AppStart | None = None,
            options: SolveOptions | None = None) -> AppResult:
    """Distributed solve of the weighted TDOPF by the auxiliary problem principle.

    Returns the assembled solution with the outer-iteration count (one
    TSO<->DSO exchange round per outer iteration) and the residual history.
    A warm ``start`` seeds both boundary copies and the multipliers.
    """
    cfg = cfg or AppConfig()
    n_feeder = len(case.feeders)
    base = case.transmission.base_mva
    if start is not None:
        w_t = [np.array([b[0] * _V_WEIGHT, b[1], b[2]]) for b in start.boundary]
        w_d = [np.array([b[0] * _V_WEIGHT, b[1], b[2]]) for b in start.boundary]
        lam = [np.array([m[0] / _V_WEIGHT, m[1], m[2]]) for m in start.multipliers]
    else:
        w_t = [np.array([_V_WEIGHT, 0.0, 0.0]) for _ in range(n_feeder)]
        w_d = [np.array([_V_WEIGHT, 0.0, 0.0]) for _ in range(n_feeder)]
        lam = [np.zeros(3) for _ in range(n_feeder)]

    history = []
    converged = False
    outer = 0
    t_vars = d_vars = None
    for outer in range(1, cfg.max_outer + 1):
        _, t_vars, w_t_new = _solve_tso_subproblem(case, weights, cfg, w_t, w_d,
                                                   lam, options)
        d_vars = []
        w_d_new = []
        for f in range(n_feeder):
            _, vars_f, w_f = _solve_dso_subproblem(case, f, weights, cfg,
                                                   w_d[f], w_t[f], lam[f], options)
            d_vars.append(vars_f)
            w_d_new.append(w_f)
        w_t, w_d = w_t_new, w_d_new
        for f in range(n_feeder):
            lam[f] = lam[f] + cfg.step_c * (w_t[f] - w_d[f])
        gap = max(
            max(abs(w_t[f][0] - w_d[f][0]) / _V_WEIGHT,
                abs(w_t[f][1] - w_d[f][1]) / base,
                abs(w_t[f][2] - w_d[f][2]) / base)
            for f in range(n_feeder))
        obj = _assembled_objective(case, weights, t_vars, d_vars)
        history.append((outer, gap, obj))
        if gap <= cfg.boundary_tol:
            converged = True
            break

    c_t, c_ds = _party_objectives(case, t_vars, d_vars)
    return AppResult(
        converged=converged, outer_iterations=outer, residual_history=history,
        weighted_objective=weights.w_t * c_t + weights.w_d * sum(c_ds),
        c_t=c_t, c_d_per_feeder=tuple(c_ds), c_d_total=float(sum(c_ds)),
        t_solution=t_vars, d_solutions=tuple(d_vars),
        boundary_t=[[w[0] / _V_WEIGHT, w[1], w[2]] for w in w_t],
        boundary_d=[[w[0] / _V_WEIGHT, w[1], w[2]] for w in w_d])


def _party_objectives(case, t_vars, d_vars):
    t_load = sum(b.p_load for b in case.transmission.buses)
    c_ds = []
    exports = 0.0
    for f, feeder in enumerate(case.feeders):
        block = AcBlock(feeder.network)
        imp = block.root_import_gen()
        p_b = float(d_vars[f].pg[imp])
        exports += p_b
        cost = case.purchase_price * p_b
        for i, g in enumerate(feeder.network.generators):
            if i == imp:
                continue
            cost += g.cost_linear * d_vars[f].pg[i] + g.cost_quadratic * d_vars[f].pg[i] ** 2
        c_ds.append(float(cost))
    c_t = float(np.sum(t_vars.pg)) - t_load - exports
    return c_t, c_ds


def _assembled_objective(case, weights, t_vars, d_vars):
    c_t, c_ds = _party_objectives(case, t_vars, d_vars)
    return weights.w_t * c_t + weights.w_d * sum(c_ds)


def centralized_warm_start(result: CentralizedResult) -> AppStart:
    """APP warm start at a centralized optimum (consistent duplicates)."""
    return AppStart(boundary=result.boundary, multipliers=result.link_multipliers)
