"""Response-function coordination between one TSO and its DSOs.

The protocol runs in six steps.  Each DSO first bounds the interface voltages
for which its own OPF stays solvable (extreme-voltage problems), then probes
its preferred operating point and two perturbed voltages to fit a two-segment
piecewise-linear response of the boundary injections to the interface voltage.
The TSO folds those responses into its OPF (one plain NLP per segment
combination), broadcasts the chosen interface voltages, and each DSO re-solves
at the received voltage.  If predicted and actual injections disagree beyond
tolerance, the TSO runs one final OPF with the boundary state pinned.  The
whole exchange needs at most two TSO-DSO round trips.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .acopf import (
    BoundaryMode, ObjectiveSpec, OpfVariables, SegmentTie, build_dopf,
    build_modified_topf, build_topf, evaluate_objectives, solution_from_nlp,
)
from .netcase import IntegratedCase, Network
from .nlp import NlpSolution, SolveOptions, solve

_DEGENERATE_TOL = 1e-9  # p.u.; below this a perturbation segment collapses


class FeederInfeasibleError(RuntimeError):
    """No interface voltage admits a feasible distribution OPF."""


class CoordinationError(RuntimeError):
    """The protocol cannot continue; message carries the step at fault."""


class ResponseDomainError(ValueError):
    """Voltage outside the fitted response-function domain."""


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VoltageWindow:
    """Nested interface-voltage intervals for one feeder (all p.u.)."""
    v_conventional: tuple[float, float]
    v_feasible: tuple[float, float]
    v_star: float | None = None
    v_perturbed: tuple[float, float] | None = None

    def validate_chain(self):
        lo, hi = self.v_conventional
        flo, fhi = self.v_feasible
        seq = [lo, flo]
        if self.v_perturbed is not None:
            seq += [self.v_perturbed[0]]
        if self.v_star is not None:
            seq += [self.v_star]
        if self.v_perturbed is not None:
            seq += [self.v_perturbed[1]]
        seq += [fhi, hi]
        for a, b in zip(seq, seq[1:]):
            if a > b + 1e-9:
                raise CoordinationError(
                    f"voltage window chain violated: {seq}")


@dataclass(frozen=True)
class Segment:
    """One affine piece P = a_p*v + b_p, Q = a_q*v + b_q on [v_lo, v_hi]."""
    index: int  # 1 = below the breakpoint, 2 = above
    v_lo: float
    v_hi: float
    a_p: float
    b_p: float
    a_q: float
    b_q: float


@dataclass(frozen=True)
class ResponseFunction:
    """Two-segment piecewise-linear boundary response fitted at three anchors.

    Slopes are MW (Mvar) per p.u. voltage.  Degenerate windows collapse to a
    single segment, or to a point when both perturbations clamp onto the
    preferred voltage.
    """
    breakpoint: float
    p_segments: tuple[tuple[float, float], ...]  # (slope, offset) per piece
    q_segments: tuple[tuple[float, float], ...]
    anchors_v: tuple[float, ...]
    anchors_p: tuple[float, ...]
    anchors_q: tuple[float, ...]
    degenerate_low: bool
    degenerate_high: bool

    @property
    def domain(self) -> tuple[float, float]:
        return self.anchors_v[0], self.anchors_v[-1]

    def segments(self) -> list[Segment]:
        v1, v2 = self.domain
        segs = []
        if not self.degenerate_low:
            a_p, b_p = self.p_segments[0]
            a_q, b_q = self.q_segments[0]
            segs.append(Segment(1, v1, self.breakpoint, a_p, b_p, a_q, b_q))
        if not self.degenerate_high:
            a_p, b_p = self.p_segments[-1]
            a_q, b_q = self.q_segments[-1]
            segs.append(Segment(2, self.breakpoint, v2, a_p, b_p, a_q, b_q))
        if not segs:
            # point response: voltage pinned at the breakpoint
            segs.append(Segment(1, self.breakpoint, self.breakpoint,
                                0.0, self.anchors_p[0], 0.0, self.anchors_q[0]))
        return segs


def evaluate_response(rf: ResponseFunction, v_b: float) -> tuple[float, float]:
    """Piecewise-affine boundary injections (MW, Mvar) at voltage ``v_b``."""
    lo, hi = rf.domain
    if not (lo - 1e-9 <= v_b <= hi + 1e-9):
        raise ResponseDomainError(f"v_b={v_b} outside response domain [{lo}, {hi}]")
    if v_b <= rf.breakpoint:
        a_p, b_p = rf.p_segments[0]
        a_q, b_q = rf.q_segments[0]
    else:
        a_p, b_p = rf.p_segments[-1]
        a_q, b_q = rf.q_segments[-1]
    return a_p * v_b + b_p, a_q * v_b + b_q


@dataclass(frozen=True)
class MismatchCheck:
    converged: bool
    p_gap_pu: float
    q_gap_pu: float


@dataclass(frozen=True)
class Step6Result:
    solution: OpfVariables
    nlp: NlpSolution
    voltage_deviation: bool
    deviations: dict[int, float]  # interface bus -> |achieved - requested| p.u.


@dataclass
class ExchangeLedger:
    """Ordered record of TSO<->DSO messages with payload size estimates."""
    messages: list = field(default_factory=list)  # (direction, feeder, kind, bytes)

    def send(self, direction: str, feeder: int, kind: str, n_floats: int):
        self.messages.append((direction, feeder, kind, 8 * n_floats))

    @property
    def round_trips(self) -> int:
        best = 0
        feeders = {m[1] for m in self.messages}
        for f in feeders:
            dirs = [m[0] for m in self.messages if m[1] == f]
            trips = sum(1 for a, b in zip(dirs, dirs[1:]) if a != b)
            best = max(best, trips)
        return best


@dataclass(frozen=True)
class InterfaceOutcome:
    interface_bus: int
    v_b_t: float       # p.u., chosen by the TSO
    p_b_d: float       # MW, actual DSO injection at v_b_t
    q_b_d: float       # Mvar
    mismatch_p: float  # MW, |actual - predicted|
    mismatch_q: float  # Mvar


@dataclass
class CoordinationResult:
    interfaces: list[InterfaceOutcome]
    exchange_count: int
    step6_invoked: bool
    c_t: float
    c_d_per_feeder: tuple[float, ...]
    c_d_total: float
    trace: list
    ledger: ExchangeLedger
    windows: list[VoltageWindow]
    responses: list[ResponseFunction]
    t_solution: OpfVariables
    d_solutions: list[OpfVariables]
    voltage_deviation: bool = False


# ---------------------------------------------------------------------------
# steps 1-2: window and response estimation (per feeder, DSO side)
# ---------------------------------------------------------------------------

def compute_voltage_window(feeder: Network, objective: ObjectiveSpec,
                           options: SolveOptions | None = None) -> VoltageWindow:
    """Bound the interface voltages that keep the feeder's OPF solvable.

    Solves the max- and min-voltage problems over the feeder constraint set;
    the DSO cost plays no role here, feasibility alone defines the window.
    """
    root = feeder.bus_index()[feeder.slack_bus]
    conventional = (feeder.buses[root].v_min, feeder.buses[root].v_max)
    bounds = {}
    for direction in ("max", "min"):
        sol = solve(build_dopf(feeder, BoundaryMode.extreme_voltage(direction)), options)
        if sol.status != "optimal":
            raise FeederInfeasibleError(
                f"step 1: no feasible interface voltage for feeder "
                f"{feeder.name or '?'} ({direction} problem: {sol.status})")
        bounds[direction] = float(solution_from_nlp(feeder, sol.x).v[root])
    v_feasible = (max(bounds["min"], conventional[0]),
                  min(bounds["max"], conventional[1]))
    window = VoltageWindow(v_conventional=conventional, v_feasible=v_feasible)
    window.validate_chain()
    return window


def estimate_response(feeder: Network, window: VoltageWindow, alpha: float,
                      objective: ObjectiveSpec,
                      options: SolveOptions | None = None
                      ) -> tuple[ResponseFunction, VoltageWindow]:
    """Perturbation-and-fitting estimate of the boundary response.

    Solves the free-voltage OPF for the preferred point, re-solves at voltages
    perturbed by ``alpha`` (clamped to the feasibility window), and
    interpolates one affine piece per side of the preferred voltage.
    """
    if not (0.0 <= alpha < 1.0):
        raise CoordinationError(f"alpha must lie in [0, 1), got {alpha}")
    flo, fhi = window.v_feasible

    free = solve(build_dopf(feeder, BoundaryMode.free_voltage(flo, fhi), objective),
                 options)
    if free.status != "optimal":
        raise FeederInfeasibleError(
            "step 2: free-voltage OPF failed inside the feasibility window "
            f"({free.status}); window computation is inconsistent")
    root = feeder.bus_index()[feeder.slack_bus]
    out = solution_from_nlp(feeder, free.x)
    v_star = float(np.clip(out.v[root], flo, fhi))
    p_star, q_star = _root_injection(feeder, out)

    v1 = max((1.0 - alpha) * v_star, flo)
    v2 = min((1.0 + alpha) * v_star, fhi)
    degenerate_low = (v_star - v1) <= _DEGENERATE_TOL
    degenerate_high = (v2 - v_star) <= _DEGENERATE_TOL

    def probe(v_fix):
        sol = solve(build_dopf(feeder, BoundaryMode.fixed_voltage(v_fix), objective),
                    options)
        if sol.status != "optimal":
            raise CoordinationError(
                f"step 2: fixed-voltage OPF at {v_fix:.5f} inside the feasible "
                f"window returned {sol.status}; this contradicts the window")
        return _root_injection(feeder, solution_from_nlp(feeder, sol.x))

    p1, q1 = (p_star, q_star) if degenerate_low else probe(v1)
    p2, q2 = (p_star, q_star) if degenerate_high else probe(v2)

    p_segments = []
    q_segments = []
    if not degenerate_low:
        p_segments.append(_interp((v1, p1), (v_star, p_star)))
        q_segments.append(_interp((v1, q1), (v_star, q_star)))
    if not degenerate_high:
        p_segments.append(_interp((v_star, p_star), (v2, p2)))
        q_segments.append(_interp((v_star, q_star), (v2, q2)))
    if not p_segments:  # point response
        p_segments.append((0.0, p_star))
        q_segments.append((0.0, q_star))

    rf = ResponseFunction(
        breakpoint=v_star,
        p_segments=tuple(p_segments), q_segments=tuple(q_segments),
        anchors_v=(v1, v_star, v2), anchors_p=(p1, p_star, p2),
        anchors_q=(q1, q_star, q2),
        degenerate_low=degenerate_low, degenerate_high=degenerate_high)
    completed = VoltageWindow(v_conventional=window.v_conventional,
                              v_feasible=window.v_feasible,
                              v_star=v_star, v_perturbed=(v1, v2))
    completed.validate_chain()
    return rf, completed


def _interp(p_lo, p_hi) -> tuple[float, float]:
    (x0, y0), (x1, y1) = p_lo, p_hi
    a = (y1 - y0) / (x1 - x0)
    return a, y0 - a * x0


def _root_injection(feeder: Network, out: OpfVariables) -> tuple[float, float]:
    for i, g in enumerate(feeder.generators):
        if g.bus == feeder.slack_bus:
            return float(out.pg[i]), float(out.qg[i])
    raise CoordinationError("feeder has no import unit at its root")


# ---------------------------------------------------------------------------
# step 3: modified transmission OPF (TSO side)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModifiedTopfResult:
    solution: OpfVariables
    nlp: NlpSolution
    v_b_t: dict[int, float]           # interface bus -> chosen voltage
    predicted: dict[int, tuple[float, float]]  # -> (P, Q) MW/Mvar from the tie
    chosen_segments: tuple[int, ...]
    candidates_solved: int


def solve_modified_topf(net: Network,
                        interfaces: dict[int, tuple[VoltageWindow, ResponseFunction]],
                        options: SolveOptions | None = None) -> ModifiedTopfResult:
    """Transmission OPF with each interface tied to its response function.

    The two-segment responses are handled by enumerating every segment
    assignment (at most 2^k plain NLPs) and keeping the best feasible
    candidate; ties resolve toward lexicographically smaller segment indices
    because only strict improvements replace the incumbent.
    """
    buses = sorted(interfaces)
    seg_lists = [interfaces[b][1].segments() for b in buses]
    idx = net.bus_index()

    best = None
    best_obj = np.inf
    n_solved = 0
    for combo in itertools.product(*seg_lists):
        ties = {b: SegmentTie(v_lo=s.v_lo, v_hi=s.v_hi, a_p=s.a_p, b_p=s.b_p,
                              a_q=s.a_q, b_q=s.b_q)
                for b, s in zip(buses, combo)}
        sol = solve(build_modified_topf(net, ties), options)
        n_solved += 1
        if sol.status != "optimal":
            continue
        if best is None or sol.objective_value < best_obj - 1e-7 * max(1.0, abs(best_obj)):
            best_obj = sol.objective_value
            best = (sol, combo)
    if best is None:
        raise CoordinationError(
            "step 3: every segment assignment left the transmission OPF "
            "infeasible; no admissible boundary state exists")

    sol, combo = best
    out = solution_from_nlp(net, sol.x)
    v_b_t = {}
    predicted = {}
    for b, seg in zip(buses, combo):
        v = float(np.clip(out.v[idx[b]], seg.v_lo, seg.v_hi))
        v_b_t[b] = v
        predicted[b] = (seg.a_p * v + seg.b_p, seg.a_q * v + seg.b_q)
    return ModifiedTopfResult(solution=out, nlp=sol, v_b_t=v_b_t,
                              predicted=predicted,
                              chosen_segments=tuple(s.index for s in combo),
                              candidates_solved=n_solved)


# ---------------------------------------------------------------------------
# steps 5-6: mismatch check and elimination
# ---------------------------------------------------------------------------

def check_mismatch(rf: ResponseFunction, v_b_t: float, p_b_d: float, q_b_d: float,
                   tol_pu: float, base_mva: float) -> MismatchCheck:
    """Compare actual DSO injections with the response prediction (p.u. gaps)."""
    p_hat, q_hat = evaluate_response(rf, v_b_t)
    p_gap = abs(p_b_d - p_hat) / base_mva
    q_gap = abs(q_b_d - q_hat) / base_mva
    return MismatchCheck(converged=(p_gap <= tol_pu and q_gap <= tol_pu),
                         p_gap_pu=p_gap, q_gap_pu=q_gap)


def resolve_mismatch(net: Network,
                     boundary: dict[int, tuple[float, float, float]],
                     windows: dict[int, tuple[float, float]] | None = None,
                     options: SolveOptions | None = None) -> Step6Result:
    """Final transmission OPF with boundary injections and voltages pinned.

    ``boundary`` maps interface bus -> (p_b_d MW, q_b_d Mvar, v_b_t p.u.).
    If pinning every interface voltage is infeasible, the voltages are
    relaxed once to the perturbation windows (injections stay pinned) and the
    result is flagged with the achieved deviations.
    """
    injections = {b: (p, q) for b, (p, q, _) in boundary.items()}
    pins = {b: (v, v) for b, (_, _, v) in boundary.items()}
    sol = solve(build_topf(net, injections=injections, v_windows=pins), options)
    idx = net.bus_index()
    if sol.status == "optimal":
        out = solution_from_nlp(net, sol.x)
        return Step6Result(solution=out, nlp=sol, voltage_deviation=False,
                           deviations={b: 0.0 for b in boundary})
    if windows is None:
        raise CoordinationError(
            f"step 6: boundary-pinned transmission OPF returned {sol.status} "
            "and no relaxation windows were provided")
    relaxed = solve(build_topf(net, injections=injections,
                               v_windows={b: windows[b] for b in boundary}), options)
    if relaxed.status != "optimal":
        raise CoordinationError(
            f"step 6: transmission OPF infeasible even with interface voltages "
            f"relaxed to the perturbation windows ({relaxed.status})")
    out = solution_from_nlp(net, relaxed.x)
    deviations = {b: abs(float(out.v[idx[b]]) - v) for b, (_, _, v) in boundary.items()}
    return Step6Result(solution=out, nlp=relaxed, voltage_deviation=True,
                       deviations=deviations)


# ---------------------------------------------------------------------------
# the full protocol
# ---------------------------------------------------------------------------

def run_coordination(case: IntegratedCase, alpha: float | None = None,
                     mismatch_tol: float | None = None,
                     options: SolveOptions | None = None) -> CoordinationResult:
    """Execute the complete six-step coordination on an integrated case."""
    alpha = case.alpha if alpha is None else alpha
    tol = case.mismatch_tol if mismatch_tol is None else mismatch_tol
    base = case.transmission.base_mva
    objective = ObjectiveSpec(kind="dso_cost", purchase_price=case.purchase_price)

    trace: list[dict] = []
    ledger = ExchangeLedger()

    def record(step, actor, kind, detail, status="ok", objective_value=None,
               elapsed=None):
        trace.append({"step": step, "actor": actor, "kind": kind, "detail": detail,
                      "status": status, "objective": objective_value,
                      "elapsed_s": elapsed})

    def timed(step, actor, detail, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except (FeederInfeasibleError, CoordinationError) as exc:
            record(step, actor, "solve", detail, status="error: " + str(exc),
                   elapsed=time.perf_counter() - t0)
            raise
        elapsed = time.perf_counter() - t0
        obj = getattr(getattr(result, "nlp", None), "objective_value", None)
        record(step, actor, "solve", detail, objective_value=obj, elapsed=elapsed)
        return result

    # steps 1-2, independently per feeder
    windows: list[VoltageWindow] = []
    responses: list[ResponseFunction] = []
    for k, feeder in enumerate(case.feeders):
        dso = f"dso:{k}"
        window = timed(1, dso, "voltage feasibility window",
                       compute_voltage_window, feeder.network, objective, options)
        rf, window = timed(2, dso, "response estimation",
                           lambda w=window, n=feeder.network: estimate_response(
                               n, w, alpha, objective, options))
        windows.append(window)
        responses.append(rf)
        ledger.send("DSO->TSO", k, "window+response", 5 + 8 + 9)
        record(3, dso, "message", "window and response functions to TSO")

    # step 3: modified transmission OPF and voltage broadcast
    interfaces = {f.interface_bus: (w, r)
                  for f, w, r in zip(case.feeders, windows, responses)}
    step3 = timed(3, "tso", "modified transmission OPF (segment enumeration)",
                  solve_modified_topf, case.transmission, interfaces, options)
    t_solution = step3.solution
    for k, feeder in enumerate(case.feeders):
        ledger.send("TSO->DSO", k, "interface voltage", 1)
        record(3, "tso", "message",
               f"v_b_t={step3.v_b_t[feeder.interface_bus]:.6f} to dso:{k}")

    # step 4: each DSO re-solves at the broadcast voltage
    d_solutions: list[OpfVariables] = []
    actuals: list[tuple[float, float]] = []
    for k, feeder in enumerate(case.feeders):
        v = step3.v_b_t[feeder.interface_bus]
        sol = solve(build_dopf(feeder.network, BoundaryMode.fixed_voltage(v),
                               objective), options)
        if sol.status != "optimal":
            record(4, f"dso:{k}", "solve", f"fixed-voltage OPF at v_b={v:.6f}",
                   status=sol.status, objective_value=sol.objective_value)
            raise CoordinationError(
                f"step 4: feeder {k} OPF at v_b={v:.6f} returned {sol.status}; "
                "the perturbation window guarantee is violated")
        out = solution_from_nlp(feeder.network, sol.x)
        d_solutions.append(out)
        p_d, q_d = _root_injection(feeder.network, out)
        actuals.append((p_d, q_d))
        record(4, f"dso:{k}", "solve",
               f"fixed-voltage OPF at v_b={v:.6f}: p_b={p_d:.6f} MW q_b={q_d:.6f} Mvar",
               status=sol.status, objective_value=sol.objective_value)

    # step 5: mismatch checks
    checks: list[MismatchCheck] = []
    any_mismatch = False
    for k, feeder in enumerate(case.feeders):
        v = step3.v_b_t[feeder.interface_bus]
        p_d, q_d = actuals[k]
        chk = check_mismatch(responses[k], v, p_d, q_d, tol, base)
        checks.append(chk)
        record(5, f"dso:{k}", "check",
               f"gaps p={chk.p_gap_pu:.3e} q={chk.q_gap_pu:.3e} pu "
               f"(tol {tol:g})", status="converged" if chk.converged else "mismatch")
        any_mismatch = any_mismatch or not chk.converged

    # step 6: eliminate boundary mismatches with one more TSO solve
    voltage_deviation = False
    if any_mismatch:
        boundary = {}
        for k, feeder in enumerate(case.feeders):
            p_d, q_d = actuals[k]
            boundary[feeder.interface_bus] = (p_d, q_d,
                                              step3.v_b_t[feeder.interface_bus])
            ledger.send("DSO->TSO", k, "boundary injections", 2)
            record(6, f"dso:{k}", "message", "actual boundary injections to TSO")
        relax = {f.interface_bus: w.v_perturbed
                 for f, w in zip(case.feeders, windows)}
        step6 = timed(6, "tso", "boundary-pinned transmission OPF",
                      resolve_mismatch, case.transmission, boundary, relax, options)
        t_solution = step6.solution
        voltage_deviation = step6.voltage_deviation
        if voltage_deviation:
            record(6, "tso", "check",
                   f"voltage deviation flagged: {step6.deviations}", status="degraded")

    objectives = evaluate_objectives(case, t_solution, d_solutions)
    record(6 if any_mismatch else 5, "protocol", "result",
           f"c_t={objectives.c_t!r} MW, c_d_total={objectives.c_d_total!r} $, "
           f"c_d_per_feeder={[repr(c) for c in objectives.c_d_per_feeder]}, "
           f"exchanges={2 if any_mismatch else 1}")
    outcomes = []
    for k, feeder in enumerate(case.feeders):
        p_d, q_d = actuals[k]
        outcomes.append(InterfaceOutcome(
            interface_bus=feeder.interface_bus,
            v_b_t=step3.v_b_t[feeder.interface_bus],
            p_b_d=p_d, q_b_d=q_d,
            mismatch_p=checks[k].p_gap_pu * base,
            mismatch_q=checks[k].q_gap_pu * base))

    exchange_count = 2 if any_mismatch else 1
    if ledger.round_trips != exchange_count:
        raise CoordinationError(
            f"exchange accounting mismatch: ledger says {ledger.round_trips}, "
            f"protocol says {exchange_count}")
    return CoordinationResult(
        interfaces=outcomes, exchange_count=exchange_count,
        step6_invoked=any_mismatch, c_t=objectives.c_t,
        c_d_per_feeder=objectives.c_d_per_feeder, c_d_total=objectives.c_d_total,
        trace=trace, ledger=ledger, windows=windows, responses=responses,
        t_solution=t_solution, d_solutions=d_solutions,
        voltage_deviation=voltage_deviation)


def write_trace_jsonl(path, result: CoordinationResult):
    """One JSON record per trace entry and per ledger message."""
    with open(path, "w") as fh:
        for rec in result.trace:
            fh.write(json.dumps(rec) + "\n")
        for direction, feeder, kind, size in result.ledger.messages:
            fh.write(json.dumps({"kind": "ledger", "direction": direction,
                                 "feeder": feeder, "payload": kind,
                                 "bytes": size}) + "\n")
