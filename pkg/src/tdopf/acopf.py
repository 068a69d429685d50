"""AC optimal power flow problem builders (polar coordinates).

Each network becomes a variable block ``[v, theta, pg, qg]`` in per-unit with
analytic first derivatives; the NLP solver supplies Hessians by finite
differences.  Builders cover the plain transmission OPF with parametric
boundary injections, the distribution OPF in its four boundary modes, and a
transmission OPF whose boundary injections are tied affinely to the interface
voltage (used by the coordination protocol).  Branch apparent-power limits
are enforced as squared flows at both ends whenever a limit is set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcase import IntegratedCase, Network, build_ybus
from .nlp import NlpProblem

Array = np.ndarray


class BuildError(ValueError):
    """Raised when a problem cannot be assembled from the given network."""


@dataclass(frozen=True)
class OpfVariables:
    """Typed OPF solution for one network: voltages in p.u./rad, outputs in MW/Mvar."""
    v: Array
    theta: Array
    pg: Array
    qg: Array


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str  # transmission_loss | dso_cost | generation_cost
    purchase_price: float = 0.0  # $/MWh, dso_cost only

    def __post_init__(self):
        if self.kind not in ("transmission_loss", "dso_cost", "generation_cost"):
            raise BuildError(f"unknown objective kind {self.kind!r}")
        if self.kind == "dso_cost" and self.purchase_price <= 0.0:
            raise BuildError("dso_cost objective needs a positive purchase price")


@dataclass(frozen=True)
class BoundaryMode:
    """Root-bus treatment of a distribution OPF."""
    kind: str  # fixed_injection | fixed_voltage | free_voltage | extreme_voltage
    p_b: float = 0.0            # MW, fixed_injection
    q_b: float = 0.0            # Mvar, fixed_injection
    v_b: float = 1.0            # p.u., fixed_voltage
    window: tuple[float, float] = (0.0, 0.0)  # p.u., free_voltage
    direction: str = "max"      # extreme_voltage

    @classmethod
    def fixed_injection(cls, p_b: float, q_b: float):
        return cls(kind="fixed_injection", p_b=p_b, q_b=q_b)

    @classmethod
    def fixed_voltage(cls, v_b: float):
        return cls(kind="fixed_voltage", v_b=v_b)

    @classmethod
    def free_voltage(cls, lo: float, hi: float):
        if lo > hi:
            raise BuildError(f"empty voltage window [{lo}, {hi}]")
        return cls(kind="free_voltage", window=(lo, hi))

    @classmethod
    def extreme_voltage(cls, direction: str):
        if direction not in ("max", "min"):
            raise BuildError(f"direction must be max or min, got {direction!r}")
        return cls(kind="extreme_voltage", direction=direction)


@dataclass(frozen=True)
class SegmentTie:
    """Affine coupling P_B = a_p*V_B + b_p, Q_B = a_q*V_B + b_q on [v_lo, v_hi].

    Slopes/offsets are in MW (Mvar) per p.u. voltage; the tie is applied as a
    voltage-dependent load at one interface bus of the transmission system.
    """
    v_lo: float
    v_hi: float
    a_p: float
    b_p: float
    a_q: float
    b_q: float


# ---------------------------------------------------------------------------
# per-network block
# ---------------------------------------------------------------------------

class AcBlock:
    """Per-unit arrays and power-flow derivatives for one network.

    Variables occupy ``[offset, offset + nvar)`` of the global vector in the
    order v, theta, pg, qg.
    """

    def __init__(self, net: Network, offset: int = 0):
        self.net = net
        self.offset = offset
        self.base = net.base_mva
        self.nb = net.n_bus
        self.ng = len(net.generators)
        self.nvar = 2 * self.nb + 2 * self.ng
        idx = net.bus_index()
        self.slack = idx[net.slack_bus]

        self.ybus = build_ybus(net)
        self.pd = np.array([b.p_load for b in net.buses]) / self.base
        self.qd = np.array([b.q_load for b in net.buses]) / self.base
        self.v_min = np.array([b.v_min for b in net.buses])
        self.v_max = np.array([b.v_max for b in net.buses])
        self.gen_bus = np.array([idx[g.bus] for g in net.generators], dtype=int)
        self.pg_min = np.array([g.p_min for g in net.generators]) / self.base
        self.pg_max = np.array([g.p_max for g in net.generators]) / self.base
        self.qg_min = np.array([g.q_min for g in net.generators]) / self.base
        self.qg_max = np.array([g.q_max for g in net.generators]) / self.base
        # generator incidence: bus x gen
        self.cg = np.zeros((self.nb, self.ng))
        self.cg[self.gen_bus, np.arange(self.ng)] = 1.0

        # limited in-service branches for apparent-power constraints
        lim = [(idx[br.from_bus], idx[br.to_bus], br) for br in net.branches
               if br.status and br.flow_limit > 0.0]
        self.nflow = 2 * len(lim)
        self.f_idx = np.array([i for i, _, _ in lim], dtype=int)
        self.t_idx = np.array([j for _, j, _ in lim], dtype=int)
        ys = np.array([1.0 / complex(br.r, br.x) for _, _, br in lim])
        bc = np.array([1j * br.b_charging / 2.0 for _, _, br in lim])
        tau = np.array([br.tap_ratio for _, _, br in lim])
        self.yff = (ys + bc) / tau**2
        self.yft = -ys / tau
        self.ytf = -ys / tau
        self.ytt = ys + bc
        self.s_lim2 = np.array([(br.flow_limit / self.base) ** 2 for _, _, br in lim])

    # -- slices ------------------------------------------------------------
    def split(self, x: Array):
        o, nb, ng = self.offset, self.nb, self.ng
        return (x[o:o + nb], x[o + nb:o + 2 * nb],
                x[o + 2 * nb:o + 2 * nb + ng], x[o + 2 * nb + ng:o + self.nvar])

    def i_v(self, bus: int) -> int:
        return self.offset + bus

    def i_th(self, bus: int) -> int:
        return self.offset + self.nb + bus

    def i_pg(self, g: int) -> int:
        return self.offset + 2 * self.nb + g

    def i_qg(self, g: int) -> int:
        return self.offset + 2 * self.nb + self.ng + g

    # -- power flow ----------------------------------------------------------
    def s_bus(self, v: Array, th: Array) -> Array:
        vc = v * np.exp(1j * th)
        return vc * np.conj(self.ybus @ vc)

    def balance(self, x: Array, p_extra: Array | None = None,
                q_extra: Array | None = None) -> Array:
        """Mismatch S_calc + S_load + S_extra - S_gen per bus, P block then Q."""
        v, th, pg, qg = self.split(x)
        s = self.s_bus(v, th)
        rp = s.real + self.pd - self.cg @ pg
        rq = s.imag + self.qd - self.cg @ qg
        if p_extra is not None:
            rp = rp + p_extra
        if q_extra is not None:
            rq = rq + q_extra
        return np.concatenate([rp, rq])

    def ds_dv(self, v: Array, th: Array):
        """Complex dS/dv and dS/dtheta as dense matrices.

        S = diag(V) conj(Y V); differentiating in polar coordinates gives
        dS/dv = diag(E conj(I)) + diag(V) conj(Y diag(E)) with E = V/|V|,
        dS/dth = j diag(V) conj(diag(I) - Y diag(V)).
        """
        vc = v * np.exp(1j * th)
        e = vc / v
        ibus = self.ybus @ vc
        ds_dvm = np.diag(e * np.conj(ibus)) + vc[:, None] * np.conj(self.ybus * e[None, :])
        ds_dth = 1j * vc[:, None] * np.conj(np.diag(ibus) - self.ybus * vc[None, :])
        return ds_dvm, ds_dth

    def balance_jac(self, x: Array, out: Array, row0: int,
                    dv_extra: tuple[Array, Array] | None = None):
        """Write the 2*nb balance rows into ``out`` starting at ``row0``.

        ``dv_extra`` optionally adds per-bus d(extra)/dv terms (affine ties).
        """
        v, th, _, _ = self.split(x)
        ds_dvm, ds_dth = self.ds_dv(v, th)
        o, nb, ng = self.offset, self.nb, self.ng
        rp = slice(row0, row0 + nb)
        rq = slice(row0 + nb, row0 + 2 * nb)
        out[rp, o:o + nb] = ds_dvm.real
        out[rp, o + nb:o + 2 * nb] = ds_dth.real
        out[rq, o:o + nb] = ds_dvm.imag
        out[rq, o + nb:o + 2 * nb] = ds_dth.imag
        out[rp, o + 2 * nb:o + 2 * nb + ng] = -self.cg
        out[rq, o + 2 * nb + ng:o + 2 * nb + 2 * ng] = -self.cg
        if dv_extra is not None:
            dpdv, dqdv = dv_extra
            out[rp, o:o + nb][np.diag_indices(nb)] += dpdv
            out[rq, o:o + nb][np.diag_indices(nb)] += dqdv

    # -- branch flow limits ---------------------------------------------------
    def flow_margins(self, x: Array) -> Array:
        """limit^2 - |S|^2 at both ends of every limited branch (>= 0 feasible)."""
        if self.nflow == 0:
            return np.zeros(0)
        v, th, _, _ = self.split(x)
        vc = v * np.exp(1j * th)
        vf, vt = vc[self.f_idx], vc[self.t_idx]
        sf = vf * np.conj(self.yff * vf + self.yft * vt)
        st = vt * np.conj(self.ytf * vf + self.ytt * vt)
        return np.concatenate([self.s_lim2 - np.abs(sf) ** 2,
                               self.s_lim2 - np.abs(st) ** 2])

    def flow_jac(self, x: Array, out: Array, row0: int):
        if self.nflow == 0:
            return
        v, th, _, _ = self.split(x)
        vc = v * np.exp(1j * th)
        ef = vc[self.f_idx] / v[self.f_idx]
        et = vc[self.t_idx] / v[self.t_idx]
        vf, vt = vc[self.f_idx], vc[self.t_idx]
        i_f = self.yff * vf + self.yft * vt
        i_t = self.ytf * vf + self.ytt * vt
        sf = vf * np.conj(i_f)
        st = vt * np.conj(i_t)

        # complex flow sensitivities at each end
        dsf = {
            "vf": ef * np.conj(i_f) + vf * np.conj(self.yff * ef),
            "vt": vf * np.conj(self.yft * et),
            "thf": 1j * vf * np.conj(self.yft * vt),
            "tht": -1j * vf * np.conj(self.yft * vt),
        }
        dst = {
            "vf": vt * np.conj(self.ytf * ef),
            "vt": et * np.conj(i_t) + vt * np.conj(self.ytt * et),
            "thf": -1j * vt * np.conj(self.ytf * vf),
            "tht": 1j * vt * np.conj(self.ytf * vf),
        }
        nl = len(self.f_idx)
        rows_f = row0 + np.arange(nl)
        rows_t = row0 + nl + np.arange(nl)
        for s, ds, rows in ((sf, dsf, rows_f), (st, dst, rows_t)):
            for key, cols in (("vf", self.i_v(0) + self.f_idx),
                              ("vt", self.i_v(0) + self.t_idx),
                              ("thf", self.i_th(0) + self.f_idx),
                              ("tht", self.i_th(0) + self.t_idx)):
                grad = -2.0 * (s.real * ds[key].real + s.imag * ds[key].imag)
                np.add.at(out, (rows, cols), grad)

    # -- bounds / start --------------------------------------------------------
    def default_bounds(self):
        lb = np.concatenate([self.v_min, np.full(self.nb, -np.inf),
                             self.pg_min, self.qg_min])
        ub = np.concatenate([self.v_max, np.full(self.nb, np.inf),
                             self.pg_max, self.qg_max])
        # angle reference at the slack bus
        lb[self.nb + self.slack] = 0.0
        ub[self.nb + self.slack] = 0.0
        return lb, ub

    def flat_start(self, lb: Array, ub: Array) -> Array:
        nb, ng = self.nb, self.ng
        x = np.empty(self.nvar)
        x[:nb] = np.clip(1.0, lb[:nb], ub[:nb])
        x[nb:2 * nb] = 0.0
        fin_lo = np.where(np.isfinite(lb[2 * nb:2 * nb + ng]), lb[2 * nb:2 * nb + ng], 0.0)
        fin_hi = np.where(np.isfinite(ub[2 * nb:2 * nb + ng]), ub[2 * nb:2 * nb + ng], 0.0)
        x[2 * nb:2 * nb + ng] = 0.5 * (fin_lo + fin_hi)
        x[2 * nb + ng:] = np.clip(0.0, lb[2 * nb + ng:], ub[2 * nb + ng:])
        return x

    def to_variables(self, x: Array) -> OpfVariables:
        v, th, pg, qg = self.split(x)
        return OpfVariables(v=v.copy(), theta=th.copy(),
                            pg=pg * self.base, qg=qg * self.base)

    def root_import_gen(self) -> int:
        """Index of the grid-import generator sitting at the slack bus."""
        for i, g in enumerate(self.net.generators):
            if g.bus == self.net.slack_bus:
                return i
        raise BuildError("network has no generator at its slack bus")


# ---------------------------------------------------------------------------
# transmission OPF
# ---------------------------------------------------------------------------

def build_topf(net: Network, injections: dict[int, tuple[float, float]] | None = None,
               v_windows: dict[int, tuple[float, float]] | None = None,
               objective: ObjectiveSpec | None = None) -> NlpProblem:
    """Transmission OPF with fixed boundary injections (MW/Mvar) per interface.

    ``v_windows`` overrides the voltage-magnitude bounds at interface buses;
    a degenerate window pins the voltage.  Default objective is transmission
    loss in MW.
    """
    injections = injections or {}
    v_windows = v_windows or {}
    block = AcBlock(net)
    idx = net.bus_index()
    for bus in list(injections) + list(v_windows):
        if bus not in idx:
            raise BuildError(f"unknown interface bus {bus}")

    p_extra = np.zeros(block.nb)
    q_extra = np.zeros(block.nb)
    for bus, (p_mw, q_mvar) in injections.items():
        p_extra[idx[bus]] += p_mw / block.base
        q_extra[idx[bus]] += q_mvar / block.base

    lb, ub = block.default_bounds()
    for bus, (lo, hi) in v_windows.items():
        lb[idx[bus]] = lo
        ub[idx[bus]] = hi

    objective = objective or ObjectiveSpec(kind="transmission_loss")
    obj, grad = _single_network_objective(block, objective, p_extra)
    eq, jeq = _balance_callbacks(block, p_extra, q_extra)
    ineq, jineq = _flow_callbacks(block)
    return NlpProblem(dimension=block.nvar, objective=obj, gradient=grad,
                      equalities=eq, eq_jacobian=jeq,
                      inequalities=ineq, ineq_jacobian=jineq,
                      lower=lb, upper=ub, initial_point=block.flat_start(lb, ub),
                      name=f"topf:{net.name or 'net'}")


def build_modified_topf(net: Network, ties: dict[int, SegmentTie]) -> NlpProblem:
    """Transmission OPF with per-interface affine voltage-to-injection ties.

    Each interface bus consumes ``a*V + b`` (MW, Mvar) with its voltage
    bounded to the tie's segment interval; objective is transmission loss.
    """
    block = AcBlock(net)
    idx = net.bus_index()
    for bus in ties:
        if bus not in idx:
            raise BuildError(f"unknown interface bus {bus}")

    a_p = np.zeros(block.nb)
    b_p = np.zeros(block.nb)
    a_q = np.zeros(block.nb)
    b_q = np.zeros(block.nb)
    lb, ub = block.default_bounds()
    for bus, tie in ties.items():
        k = idx[bus]
        a_p[k] = tie.a_p / block.base
        b_p[k] = tie.b_p / block.base
        a_q[k] = tie.a_q / block.base
        b_q[k] = tie.b_q / block.base
        lb[k], ub[k] = tie.v_lo, tie.v_hi

    def p_extra_of(v):
        return a_p * v + b_p

    def q_extra_of(v):
        return a_q * v + b_q

    def obj(x):
        v, _, pg, _ = block.split(x)
        return block.base * (pg.sum() - block.pd.sum() - p_extra_of(v).sum())

    def grad(x):
        g = np.zeros(block.nvar)
        g[2 * block.nb:2 * block.nb + block.ng] = block.base
        g[:block.nb] = -block.base * a_p
        return g

    def eq(x):
        v, _, _, _ = block.split(x)
        return block.balance(x, p_extra_of(v), q_extra_of(v))

    def jeq(x):
        out = np.zeros((2 * block.nb, block.nvar))
        block.balance_jac(x, out, 0, dv_extra=(a_p, a_q))
        return out

    ineq, jineq = _flow_callbacks(block)
    return NlpProblem(dimension=block.nvar, objective=obj, gradient=grad,
                      equalities=eq, eq_jacobian=jeq,
                      inequalities=ineq, ineq_jacobian=jineq,
                      lower=lb, upper=ub, initial_point=block.flat_start(lb, ub),
                      name=f"topf-tied:{net.name or 'net'}")


# ---------------------------------------------------------------------------
# distribution OPF
# ---------------------------------------------------------------------------

def build_dopf(net: Network, mode: BoundaryMode,
               objective: ObjectiveSpec | None = None) -> NlpProblem:
    """Distribution OPF; the root (slack) bus is the T-D interface.

    The grid import enters through the root generator's output, so the
    boundary injections are ``(pg, qg)`` of that unit.  Root angle is fixed
    to zero; root voltage handling follows ``mode``.
    """
    block = AcBlock(net)
    root = block.slack
    block.root_import_gen()  # fails loudly when the import unit is missing

    lb, ub = block.default_bounds()
    if mode.kind == "fixed_voltage":
        lb[root] = ub[root] = mode.v_b
    elif mode.kind == "free_voltage":
        lb[root], ub[root] = mode.window
    elif mode.kind == "extreme_voltage":
        pass  # conventional root bounds from the case data
    elif mode.kind == "fixed_injection":
        raise BuildError("fixed_injection is a transmission-side mode; "
                         "use build_topf for the upstream network")
    else:
        raise BuildError(f"unknown boundary mode {mode.kind!r}")

    if mode.kind == "extreme_voltage":
        sign = -1.0 if mode.direction == "max" else 1.0

        def obj(x):
            return sign * x[root]

        def grad(x):
            g = np.zeros(block.nvar)
            g[root] = sign
            return g
    else:
        if objective is None or objective.kind != "dso_cost":
            raise BuildError("fixed/free voltage D-OPF requires a dso_cost objective")
        obj, grad = _single_network_objective(block, objective, None)

    eq, jeq = _balance_callbacks(block, None, None)
    ineq, jineq = _flow_callbacks(block)
    return NlpProblem(dimension=block.nvar, objective=obj, gradient=grad,
                      equalities=eq, eq_jacobian=jeq,
                      inequalities=ineq, ineq_jacobian=jineq,
                      lower=lb, upper=ub, initial_point=block.flat_start(lb, ub),
                      name=f"dopf:{net.name or 'net'}[{mode.kind}]")


def boundary_injection(net: Network, sol: OpfVariables) -> tuple[float, float]:
    """(p_b, q_b) in MW/Mvar drawn from the grid by a feeder solution."""
    block = AcBlock(net)
    g = block.root_import_gen()
    return float(sol.pg[g]), float(sol.qg[g])


# ---------------------------------------------------------------------------
# shared callback factories
# ---------------------------------------------------------------------------

def _balance_callbacks(block: AcBlock, p_extra, q_extra):
    def eq(x):
        return block.balance(x, p_extra, q_extra)

    def jeq(x):
        out = np.zeros((2 * block.nb, block.nvar))
        block.balance_jac(x, out, 0)
        return out

    return eq, jeq


def _flow_callbacks(block: AcBlock):
    if block.nflow == 0:
        return None, None

    def ineq(x):
        return block.flow_margins(x)

    def jineq(x):
        out = np.zeros((block.nflow, block.nvar))
        block.flow_jac(x, out, 0)
        return out

    return ineq, jineq


def _single_network_objective(block: AcBlock, spec: ObjectiveSpec, p_extra):
    """Objective and gradient callbacks for one network block at offset 0."""
    nb, ng, base = block.nb, block.ng, block.base
    if spec.kind == "transmission_loss":
        shift = block.pd.sum() + (p_extra.sum() if p_extra is not None else 0.0)

        def obj(x):
            _, _, pg, _ = block.split(x)
            return base * (pg.sum() - shift)

        def grad(x):
            g = np.zeros(block.nvar)
            g[2 * nb:2 * nb + ng] = base
            return g

        return obj, grad

    if spec.kind in ("dso_cost", "generation_cost"):
        c1 = np.array([g.cost_linear for g in block.net.generators])
        c2 = np.array([g.cost_quadratic for g in block.net.generators])
        if spec.kind == "dso_cost":
            imp = block.root_import_gen()
            c1 = c1.copy()
            c2 = c2.copy()
            c1[imp] = spec.purchase_price
            c2[imp] = 0.0

        def obj(x):
            _, _, pg, _ = block.split(x)
            pmw = pg * base
            return float(np.sum(c1 * pmw + c2 * pmw**2))

        def grad(x):
            _, _, pg, _ = block.split(x)
            g = np.zeros(block.nvar)
            g[2 * nb:2 * nb + ng] = base * (c1 + 2.0 * c2 * pg * base)
            return g

        return obj, grad

    raise BuildError(f"unsupported objective {spec.kind!r}")


# ---------------------------------------------------------------------------
# objective accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectiveValues:
    c_t: float                      # MW transmission loss
    c_d_total: float                # $ across all feeders
    c_d_per_feeder: tuple[float, ...]


def evaluate_objectives(case: IntegratedCase, t_solution: OpfVariables,
                        d_solutions: list[OpfVariables]) -> ObjectiveValues:
    """Party objectives: c_t in MW, c_d in $ (DG cost plus energy purchase)."""
    if len(d_solutions) != len(case.feeders):
        raise BuildError("one distribution solution per feeder required")
    t_load = sum(b.p_load for b in case.transmission.buses)
    exports = 0.0
    c_ds = []
    for feeder, sol in zip(case.feeders, d_solutions):
        net = feeder.network
        block = AcBlock(net)
        imp = block.root_import_gen()
        p_b = float(sol.pg[imp])
        exports += p_b
        cost = case.purchase_price * p_b
        for i, g in enumerate(net.generators):
            if i == imp:
                continue
            cost += g.cost_linear * sol.pg[i] + g.cost_quadratic * sol.pg[i] ** 2
        c_ds.append(float(cost))
    c_t = float(np.sum(t_solution.pg)) - t_load - exports
    return ObjectiveValues(c_t=c_t, c_d_total=float(sum(c_ds)),
                           c_d_per_feeder=tuple(c_ds))


def solution_from_nlp(net: Network, x: Array) -> OpfVariables:
    """Unpack a single-network NLP solution vector."""
    return AcBlock(net).to_variables(x)
