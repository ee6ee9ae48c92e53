from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_grid
from oracles import dense_flows, grid_edges
from treegrid.cascade import (
    AgcRule,
    DroopRule,
    GridState,
    ProportionalRule,
    Termination,
    UnifiedControllerRule,
    proportional_balance,
    run_cascade,
)
from treegrid.case_io import load_bundled
from treegrid.errors import DegenerateIsland
from treegrid.network import Bus, GridCase, Line, dc_power_flow


def test_cascade4_two_stages():
    g = load_bundled("cascade4")
    chord = g.find_line(1, 3)
    tr = run_cascade(g, [chord], ProportionalRule())
    assert tr.n_stages == 2
    assert tr.terminal_status is Termination.TERMINATED
    assert tr.stages[1].tripped == {g.find_line(3, 4)}
    # stage 1: two equal two-line paths carry 1 pu each
    lines1 = tr.stages[0].topology.lines
    ref1, _ = dense_flows(4, grid_edges(g, lines1), g.injections)
    np.testing.assert_allclose(tr.stages[0].flows, ref1, atol=1e-12)
    np.testing.assert_allclose(np.abs(ref1), [1.0, 1.0, 1.0, 1.0], atol=1e-12)
    # stage 2: everything goes through bus 2
    lines2 = tr.stages[1].topology.lines
    ref2, _ = dense_flows(4, grid_edges(g, lines2), g.injections)
    np.testing.assert_allclose(tr.stages[1].flows, ref2, atol=1e-12)
    assert np.abs(ref2).max() == pytest.approx(2.0)
    assert tr.final.overloads == frozenset()


def test_single_stage_when_nothing_overloads():
    g = load_bundled("triangle")
    g = g.with_lines(type(ln)(ln.from_bus, ln.to_bus, ln.susceptance, 5.0) for ln in g.lines)
    tr = run_cascade(g, [0], ProportionalRule())
    assert tr.n_stages == 1 and tr.terminal_status is Termination.TERMINATED


def test_max_stages_reported():
    g = load_bundled("cascade4")
    tr = run_cascade(g, [g.find_line(1, 3)], ProportionalRule(), max_stages=1)
    assert tr.terminal_status is Termination.MAX_STAGES
    assert tr.n_stages == 1 and tr.final.overloads


@pytest.mark.parametrize("bad", [[], [99]])
def test_bad_initial_failures(bad):
    g = load_bundled("cascade4")
    with pytest.raises(ValueError):
        run_cascade(g, bad, ProportionalRule())


def test_max_stages_must_be_positive():
    g = load_bundled("cascade4")
    with pytest.raises(ValueError):
        run_cascade(g, [0], ProportionalRule(), max_stages=0)


def test_proportional_connected_unchanged():
    g = load_bundled("triangle")
    p = g.injections
    np.testing.assert_array_equal(proportional_balance(p, g.topology().without([0]), np.ones(3), np.ones(3)), p)


def test_proportional_two_bus_island():
    # one island {1,2} with sum p = 1 and alpha = D = 1: each bus takes 0.5
    g = GridCase((Bus(1), Bus(2), Bus(3)), (Line(1, 2, 1.0, 1.0), Line(2, 3, 1.0, 1.0)))
    top = g.topology().without([1])
    p = np.array([1.5, -0.5, 0.0])
    out = proportional_balance(p, top, np.ones(3), np.ones(3))
    np.testing.assert_allclose(out, [1.0, -1.0, 0.0])


def test_proportional_degenerate_island():
    g = GridCase((Bus(1), Bus(2)), ())
    with pytest.raises(DegenerateIsland):
        proportional_balance(np.array([1.0, -1.0]), g.topology(), np.zeros(2), np.zeros(2))


def test_zero_gain_island_is_zeroed():
    g = load_bundled("two_bus")
    rule = ProportionalRule(alpha=np.zeros(2), damping=np.zeros(2))
    tr = run_cascade(g, [0], rule)
    np.testing.assert_array_equal(tr.final.state.p, [0.0, 0.0])
    assert tr.shed() == pytest.approx(1.0)
    assert tr.stages[0].info["zeroed_islands"] == [0, 1]


def test_droop_rule_matches_proportional():
    g = load_bundled("six_bus")
    for k in range(g.n_lines):
        a = run_cascade(g, [k], ProportionalRule())
        b = run_cascade(g, [k], DroopRule())
        assert a.n_stages == b.n_stages
        for sa, sb in zip(a.stages, b.stages):
            assert sa.tripped == sb.tripped
            np.testing.assert_allclose(sa.state.p, sb.state.p, atol=1e-12)
            np.testing.assert_allclose(sa.flows, sb.flows, atol=1e-10)


@pytest.mark.parametrize("name", ["six_bus", "ieee39", "cascade4"])
def test_uc_single_stage(name):
    g = load_bundled(name)
    top = g.topology()
    if "partition" in g.metadata:
        from treegrid.partition import Partition

        top = Partition.from_grid(g).switched_topology()
    for k in top.lines:
        tr = run_cascade(g, [k], UnifiedControllerRule(), topology=top)
        assert tr.n_stages == 1 and not tr.final.overloads, g.line_label(k)


def test_agc_can_cascade():
    g = load_bundled("cascade4")
    tr = run_cascade(g, [g.find_line(1, 3)], AgcRule(areas=[1, 1, 1, 1]))
    assert tr.n_stages == 2
    assert AgcRule().name == "agc" and UnifiedControllerRule().name == "uc"


def test_trace_serialization():
    g = load_bundled("cascade4")
    tr = run_cascade(g, [g.find_line(1, 3)], ProportionalRule())
    d = tr.to_dict()
    assert d["terminal_status"] == "Terminated"
    assert d["stages"][1]["tripped"] == ["(3,4)"]
    rows = tr.to_csv_rows()
    assert rows[0] == ["stage", "line", "flow", "limit", "tripped_next"]
    assert sum(r[4] for r in rows[1:]) == 1


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(3, 9))
def test_property_trace_validity(seed, n):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, n, limit=float(rng.uniform(0.3, 1.5)))
    k = int(rng.integers(g.n_lines))
    tr = run_cascade(g, [k], ProportionalRule())
    prev = set(g.topology().lines)
    for i, stage in enumerate(tr.stages):
        # replay the stored stage
        s = dc_power_flow(stage.topology, stage.state.p, tol=1e-7)
        np.testing.assert_allclose(s.flows, stage.flows, atol=1e-8)
        surv = set(stage.topology.lines)
        assert surv < prev
        assert stage.tripped <= prev
        prev = surv
        # every island of the stage is balanced
        for comp in stage.topology.components:
            assert abs(stage.state.p[comp].sum()) < 1e-9
        if i + 1 < tr.n_stages:
            assert tr.stages[i + 1].tripped == stage.overloads
    if tr.terminal_status is Termination.TERMINATED:
        assert tr.final.overloads == frozenset()


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(3, 8))
def test_property_uc_single_stage(seed, n):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, n, limit=float(rng.uniform(0.3, 1.5)))
    k = int(rng.integers(g.n_lines))
    tr = run_cascade(g, [k], UnifiedControllerRule(areas=[1] * n))
    assert tr.n_stages == 1 and not tr.final.overloads


def test_nominal_state():
    g = load_bundled("two_bus")
    s = GridState.nominal(g)
    np.testing.assert_array_equal(s.p, g.injections)
