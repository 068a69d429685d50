import numpy as np
import pytest

from tdopf.acopf import ObjectiveSpec
from tdopf.coordination import (
    CoordinationError, ResponseDomainError, ResponseFunction, VoltageWindow,
    check_mismatch, compute_voltage_window, estimate_response, evaluate_response,
    resolve_mismatch, run_coordination, solve_modified_topf,
)
from tdopf.netcase import (
    Branch, Bus, Feeder, Generator, IntegratedCase, Network,
    bundled_case_path, load_integrated_case, parse_mcase,
)

from oracles import feeder_root_injection

DSO_OBJ = ObjectiveSpec("dso_cost", 40.0)


@pytest.fixture(scope="module")
def feeder33():
    return parse_mcase(bundled_case_path("feeder33.m").read_text())


@pytest.fixture(scope="module")
def t14d1():
    return load_integrated_case(bundled_case_path("t14d1.json"))


@pytest.fixture(scope="module")
def t14d1_result(t14d1):
    return run_coordination(t14d1)


def lossless_feeder(p_load=5.0, x=0.02):
    return Network(
        base_mva=100.0,
        buses=(Bus(id=1, v_min=0.95, v_max=1.05),
               Bus(id=2, p_load=p_load, q_load=0.0, v_min=0.9, v_max=1.1)),
        branches=(Branch(from_bus=1, to_bus=2, r=0.0, x=x),),
        generators=(Generator(bus=1, p_min=0.0, p_max=20.0, q_min=-10.0, q_max=10.0),),
        slack_bus=1, name="lossless")


# ---------------------------------------------------------------------------
# step 1: voltage windows
# ---------------------------------------------------------------------------

def test_window_loose_feeder_attains_conventional_bounds(feeder33):
    w = compute_voltage_window(feeder33, DSO_OBJ)
    assert w.v_conventional == (0.95, 1.05)
    assert w.v_feasible[0] == pytest.approx(0.95, abs=1e-5)
    assert w.v_feasible[1] == pytest.approx(1.05, abs=1e-5)


def test_window_high_dg_upper_bound_strictly_reduced():
    net = parse_mcase(bundled_case_path("feeder33_highdg.m").read_text())
    w = compute_voltage_window(net, DSO_OBJ)
    assert w.v_feasible[1] <= 1.05 - 0.005


def test_window_chain_enforced():
    with pytest.raises(CoordinationError, match="chain"):
        VoltageWindow(v_conventional=(0.95, 1.05),
                      v_feasible=(0.90, 1.05)).validate_chain()


# ---------------------------------------------------------------------------
# step 2: response estimation
# ---------------------------------------------------------------------------

def test_response_lossless_feeder_flat_active_response():
    # constant-power load behind a lossless line: P_B independent of voltage
    net = lossless_feeder()
    w = compute_voltage_window(net, DSO_OBJ)
    rf, w2 = estimate_response(net, w, alpha=0.01, objective=DSO_OBJ)
    for a, _ in rf.p_segments:
        assert a == pytest.approx(0.0, abs=1e-5)
    assert np.allclose(rf.anchors_p, 5.0, atol=1e-5)
    w2.validate_chain()


def test_response_anchors_match_newton_oracle():
    # 2-node resistive feeder: anchors and slopes against the power-flow oracle
    net = Network(
        base_mva=100.0,
        buses=(Bus(id=1, v_min=0.95, v_max=1.05),
               Bus(id=2, p_load=5.0, q_load=1.0, v_min=0.9, v_max=1.1)),
        branches=(Branch(from_bus=1, to_bus=2, r=0.05, x=0.05),),
        generators=(Generator(bus=1, p_min=0.0, p_max=20.0, q_min=-10.0, q_max=10.0),),
        slack_bus=1, name="resistive")
    w = compute_voltage_window(net, DSO_OBJ)
    rf, w2 = estimate_response(net, w, alpha=0.01, objective=DSO_OBJ)
    base = net.base_mva
    anchors = {}
    for v, p, q in zip(rf.anchors_v, rf.anchors_p, rf.anchors_q):
        _, _, s_root = feeder_root_injection(net, v, {}, {})
        assert p / base == pytest.approx(s_root.real, abs=1e-6)
        assert q / base == pytest.approx(s_root.imag, abs=1e-6)
        anchors[v] = s_root
    # fitted slopes equal finite-difference quotients of the oracle
    v1, vs, v2 = rf.anchors_v
    if not rf.degenerate_low:
        quot = (anchors[vs].real - anchors[v1].real) / (vs - v1) * base
        assert rf.p_segments[0][0] == pytest.approx(quot, abs=1e-4)
    if not rf.degenerate_high:
        quot = (anchors[v2].real - anchors[vs].real) / (v2 - vs) * base
        assert rf.p_segments[-1][0] == pytest.approx(quot, abs=1e-4)


def test_response_continuity_and_anchor_interpolation(feeder33):
    w = compute_voltage_window(feeder33, DSO_OBJ)
    rf, _ = estimate_response(feeder33, w, alpha=0.01, objective=DSO_OBJ)
    v1, vs, v2 = rf.anchors_v
    # interpolation exactness at the three anchors
    assert evaluate_response(rf, v1)[0] == pytest.approx(rf.anchors_p[0], abs=1e-10)
    assert evaluate_response(rf, vs)[0] == pytest.approx(rf.anchors_p[1], abs=1e-10)
    assert evaluate_response(rf, v2)[0] == pytest.approx(rf.anchors_p[2], abs=1e-10)
    assert evaluate_response(rf, v1)[1] == pytest.approx(rf.anchors_q[0], abs=1e-10)
    assert evaluate_response(rf, v2)[1] == pytest.approx(rf.anchors_q[2], abs=1e-10)
    # continuity at the breakpoint from both sides
    if not (rf.degenerate_low or rf.degenerate_high):
        a1, b1 = rf.p_segments[0]
        a2, b2 = rf.p_segments[1]
        assert a1 * vs + b1 == pytest.approx(a2 * vs + b2, abs=1e-10)


def test_response_alpha_monotonicity(feeder33):
    w = compute_voltage_window(feeder33, DSO_OBJ)
    _, w_small = estimate_response(feeder33, w, alpha=0.005, objective=DSO_OBJ)
    _, w_large = estimate_response(feeder33, w, alpha=0.01, objective=DSO_OBJ)
    assert w_large.v_perturbed[0] <= w_small.v_perturbed[0] + 1e-12
    assert w_small.v_perturbed[1] <= w_large.v_perturbed[1] + 1e-12


def test_response_alpha_zero_degenerates_to_point(feeder33):
    w = compute_voltage_window(feeder33, DSO_OBJ)
    rf, w2 = estimate_response(feeder33, w, alpha=0.0, objective=DSO_OBJ)
    assert rf.degenerate_low and rf.degenerate_high
    assert w2.v_perturbed[0] == w2.v_perturbed[1] == rf.breakpoint
    segs = rf.segments()
    assert len(segs) == 1 and segs[0].v_lo == segs[0].v_hi


def test_evaluate_response_midpoint_and_domain():
    rf = ResponseFunction(
        breakpoint=1.0,
        p_segments=((2.0, -1.0), (3.0, -2.0)), q_segments=((0.5, 0.0), (0.5, 0.0)),
        anchors_v=(0.99, 1.0, 1.01), anchors_p=(0.98, 1.0, 1.03),
        anchors_q=(0.495, 0.5, 0.505),
        degenerate_low=False, degenerate_high=False)
    mid = 0.995
    p_mid, _ = evaluate_response(rf, mid)
    assert p_mid == pytest.approx(0.5 * (0.98 + 1.0), abs=1e-12)
    with pytest.raises(ResponseDomainError):
        evaluate_response(rf, 1.02)
    with pytest.raises(ResponseDomainError):
        evaluate_response(rf, 0.98)


# ---------------------------------------------------------------------------
# step 3: modified transmission OPF
# ---------------------------------------------------------------------------

def test_modified_topf_flat_tie_break_prefers_segment_one():
    # lossless transmission: both flat segments give zero loss, so the
    # lexicographically smaller segment wins
    tnet = Network(
        base_mva=100.0,
        buses=(Bus(id=1, v_min=0.94, v_max=1.06), Bus(id=2, v_min=0.94, v_max=1.06)),
        branches=(Branch(from_bus=1, to_bus=2, r=0.0, x=0.1),),
        generators=(Generator(bus=1, p_min=0.0, p_max=50.0, q_min=-30.0, q_max=30.0),),
        slack_bus=1, name="lossless-t")
    rf = ResponseFunction(
        breakpoint=1.0,
        p_segments=((0.0, 5.0), (0.0, 5.0)), q_segments=((0.0, 1.0), (0.0, 1.0)),
        anchors_v=(0.99, 1.0, 1.01), anchors_p=(5.0, 5.0, 5.0),
        anchors_q=(1.0, 1.0, 1.0), degenerate_low=False, degenerate_high=False)
    window = VoltageWindow(v_conventional=(0.95, 1.05), v_feasible=(0.95, 1.05),
                           v_star=1.0, v_perturbed=(0.99, 1.01))
    result = solve_modified_topf(tnet, {2: (window, rf)})
    assert result.candidates_solved == 2
    assert result.chosen_segments == (1,)
    assert result.nlp.objective_value == pytest.approx(0.0, abs=1e-5)
    assert 0.99 - 1e-9 <= result.v_b_t[2] <= 1.01 + 1e-9


def test_modified_topf_unknown_bus(feeder33):
    w = compute_voltage_window(feeder33, DSO_OBJ)
    rf, w2 = estimate_response(feeder33, w, alpha=0.01, objective=DSO_OBJ)
    tnet = parse_mcase(bundled_case_path("ieee14.m").read_text())
    with pytest.raises(Exception, match="99"):
        solve_modified_topf(tnet, {99: (w2, rf)})


# ---------------------------------------------------------------------------
# step 5: mismatch checks
# ---------------------------------------------------------------------------

def _toy_rf():
    return ResponseFunction(
        breakpoint=1.0, p_segments=((0.0, 5.0),), q_segments=((0.0, 1.0),),
        anchors_v=(0.99, 1.0, 1.01), anchors_p=(5.0, 5.0, 5.0),
        anchors_q=(1.0, 1.0, 1.0), degenerate_low=False, degenerate_high=True)


def test_check_mismatch_exact_prediction():
    chk = check_mismatch(_toy_rf(), 1.0, 5.0, 1.0, tol_pu=1e-4, base_mva=100.0)
    assert chk.converged and chk.p_gap_pu == 0.0 and chk.q_gap_pu == 0.0


def test_check_mismatch_within_tolerance():
    # gap 9e-5 p.u. on a 100 MVA base = 9e-3 MW
    chk = check_mismatch(_toy_rf(), 1.0, 5.0 + 9e-3, 1.0, tol_pu=1e-4, base_mva=100.0)
    assert chk.converged
    assert chk.p_gap_pu == pytest.approx(9e-5, abs=1e-12)


def test_check_mismatch_threshold_crossing():
    chk = check_mismatch(_toy_rf(), 1.0, 5.0 + 2e-2, 1.0, tol_pu=1e-4, base_mva=100.0)
    assert not chk.converged
    assert chk.p_gap_pu == pytest.approx(2e-4, abs=1e-12)


# ---------------------------------------------------------------------------
# step 6: mismatch elimination
# ---------------------------------------------------------------------------

def test_resolve_mismatch_consistent_boundary(t14d1, t14d1_result):
    res = t14d1_result
    bus = res.interfaces[0].interface_bus
    boundary = {bus: (res.interfaces[0].p_b_d, res.interfaces[0].q_b_d,
                      res.interfaces[0].v_b_t)}
    windows = {bus: res.windows[0].v_perturbed}
    step6 = resolve_mismatch(t14d1.transmission, boundary, windows)
    assert not step6.voltage_deviation
    assert step6.nlp.objective_value == pytest.approx(res.c_t, abs=2e-3)


def test_resolve_mismatch_unreachable_voltage_flags_deviation():
    # the boundary draw is servable, but the line drop puts the pinned
    # voltage out of reach for any admissible source voltage, so the
    # relaxation path engages
    tnet = Network(
        base_mva=100.0,
        buses=(Bus(id=1, v_min=0.94, v_max=1.06),
               Bus(id=2, p_load=5.0, q_load=0.0, v_min=0.94, v_max=1.06)),
        branches=(Branch(from_bus=1, to_bus=2, r=0.01, x=0.2),),
        generators=(Generator(bus=1, p_min=0.0, p_max=50.0, q_min=-30.0, q_max=30.0),),
        slack_bus=1, name="drop-limited")
    boundary = {2: (5.0, 8.0, 1.05)}  # 8 Mvar over x=0.2 drops ~0.017 p.u.
    step6 = resolve_mismatch(tnet, boundary, windows={2: (0.94, 1.06)})
    assert step6.voltage_deviation
    assert step6.deviations[2] > 1e-3
    assert step6.nlp.status == "optimal"


# ---------------------------------------------------------------------------
# the full protocol
# ---------------------------------------------------------------------------

def test_run_coordination_t14d1_single_exchange(t14d1_result):
    res = t14d1_result
    assert res.exchange_count == 1
    assert not res.step6_invoked
    assert res.ledger.round_trips == 1
    assert res.c_t > 0.0
    assert res.c_d_total > 0.0
    assert len(res.c_d_per_feeder) == 1


def test_run_coordination_window_chain_holds(t14d1_result):
    for w in t14d1_result.windows:
        w.validate_chain()


def test_run_coordination_exact_affine_feeder_converges_tightly():
    # lossless feeder: the true response is affine, so step 5 sees only
    # solver-level noise and step 6 never runs
    tnet = Network(
        base_mva=100.0,
        buses=(Bus(id=1, v_min=0.94, v_max=1.06), Bus(id=2, v_min=0.94, v_max=1.06)),
        branches=(Branch(from_bus=1, to_bus=2, r=0.01, x=0.1),),
        generators=(Generator(bus=1, p_min=0.0, p_max=50.0, q_min=-30.0, q_max=30.0),),
        slack_bus=1, name="t2")
    case = IntegratedCase(
        transmission=tnet,
        feeders=(Feeder(network=lossless_feeder(p_load=5.0, x=0.01),
                        interface_bus=2, root_node=1),),
        purchase_price=40.0, alpha=0.01, mismatch_tol=1e-4, name="affine")
    res = run_coordination(case)
    assert res.exchange_count == 1
    assert not res.step6_invoked
    assert res.interfaces[0].mismatch_p / 100.0 <= 1e-8
    assert res.interfaces[0].mismatch_q / 100.0 <= 1e-7


def test_run_coordination_deterministic_trace(t14d1, t14d1_result):
    again = run_coordination(t14d1)

    def strip(trace):
        return [{k: v for k, v in rec.items() if k != "elapsed_s"} for rec in trace]

    assert strip(again.trace) == strip(t14d1_result.trace)
    assert again.ledger.messages == t14d1_result.ledger.messages
    assert again.c_t == t14d1_result.c_t


def test_run_coordination_dopf_always_feasible_in_window(t14d1, t14d1_result):
    # light version of the Remark-3 guarantee; the acceptance suite does the
    # randomized 50-scaling sweep
    from tdopf.acopf import BoundaryMode, build_dopf
    from tdopf.nlp import solve

    w = t14d1_result.windows[0]
    net = t14d1.feeders[0].network
    for v in np.linspace(w.v_perturbed[0], w.v_perturbed[1], 5):
        sol = solve(build_dopf(net, BoundaryMode.fixed_voltage(float(v)), DSO_OBJ))
        assert sol.status == "optimal", v
