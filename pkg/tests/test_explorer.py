from __future__ import annotations

from math import comb

import pytest
from bruteforce import brute_force
from conftest import corpus_names, load

from guardedby import semantics
from guardedby.explorer import (
    LockInvariantError,
    Outcome,
    Seeded,
    StateCapExceeded,
    assert_lock_invariants,
    detect_deadlock,
    explore,
    parse_scheduler,
    replay,
    run_deterministic,
)
from guardedby.semantics import initial_config, is_terminated, try_step
from guardedby.syntax import parse_program


# --- deterministic schedulers ----------------------------------------------


def test_leftmost_is_deterministic(fig4):
    a = run_deterministic(fig4, "leftmost")
    b = run_deterministic(fig4, "leftmost")
    assert a.schedule == b.schedule and a.final == b.final


def test_seeded_scheduler_is_reproducible():
    p = load("race1_sync")
    a = run_deterministic(p, Seeded(7))
    b = run_deterministic(p, parse_scheduler("seed:7"))
    assert a.schedule == b.schedule and a.final == b.final
    assert a.outcome is Outcome.COMPLETED


def test_parse_scheduler_rejects_unknown_names():
    with pytest.raises(ValueError):
        parse_scheduler("fifo")


def test_round_robin_alternates_between_enabled_threads():
    p = load("race1_sync")
    t = run_deterministic(p, "roundrobin")
    assert t.outcome is Outcome.COMPLETED
    last = None
    switched = 0
    for s in t.steps:
        c = s.pre
        enabled = {c.thread(n).tid for n in semantics.enabled(p, c)}
        if last is not None and enabled - {last}:
            assert s.record.tid != last
            switched += 1
        last = s.record.tid
    assert switched > 0


@pytest.mark.parametrize("name", ["race1", "race1_sync", "deadlock2", "fig4", "leak"])
def test_replay_reproduces_a_run(name):
    p = load(name)
    t = run_deterministic(p, Seeded(3))
    r = replay(p, t.schedule)
    assert r.final == t.final
    assert r.outcome is t.outcome
    assert [s.record for s in r.steps] == [s.record for s in t.steps]


def test_replay_rejects_a_disabled_step(fig4):
    with pytest.raises(ValueError):
        replay(fig4, [2])


# --- exhaustive exploration ----------------------------------------------


@pytest.mark.parametrize("name", ["race1", "independent", "fig4", "stuck", "empty"])
def test_tree_exploration_agrees_with_brute_force(name):
    p = load(name)
    x = explore(p, 200)
    runs = brute_force(p)
    assert x.count_traces(None) == len(runs)
    assert sorted(t.schedule for t in x.traces()) == sorted(s for s, _, _ in runs)
    assert {t.final for t in x.traces()} == {c for _, _, c in runs}


@pytest.mark.parametrize("name", ["race1", "race1_sync", "independent", "fig4"])
def test_merging_identical_states_keeps_the_trace_count(name):
    p = load(name)
    tree = explore(p, 500)
    dag = explore(p, 500, dedup=True)
    assert dag.count_traces() == tree.count_traces()
    assert len(dag.nodes) <= len(tree.nodes)
    assert {dag.nodes[i].config for i in dag.leaves()} == {tree.nodes[i].config for i in tree.leaves()}


def test_independent_threads_interleave_binomially():
    # After the spawn, main takes j = 2 steps and the worker k = 3,
    # not counting the step that collects the finished worker.
    p = load("independent")
    x = explore(p, 200)
    orders = set()
    for t in x.traces():
        orders.add(tuple(s.record.tid for s in t.steps if s.record.rule not in ("end-l", "end-r")))
    assert len(orders) == comb(2 + 3, 3)
    assert x.count_traces() == len(brute_force(p))


def test_fig4_has_a_single_trace(fig4_x):
    assert fig4_x.count_traces() == 1
    assert fig4_x.stats()["states"] == 19
    (t,) = list(fig4_x.traces())
    assert t.schedule == run_deterministic(fig4_x.program, "leftmost").schedule


def test_deadlock_is_detected():
    p = load("deadlock2")
    x = explore(p, 500, dedup=True)
    dead = x.leaves(Outcome.DEADLOCK)
    assert dead
    for i in dead:
        c = x.nodes[i].config
        assert detect_deadlock(p, c)
        assert not is_terminated(c)
    for i in x.leaves(Outcome.COMPLETED):
        assert not detect_deadlock(p, x.nodes[i].config)


def test_stuck_leaf_is_reported():
    x = explore(load("stuck"), 100)
    (leaf,) = x.leaves()
    assert x.nodes[leaf].outcome is Outcome.STUCK
    assert "invoc" in x.nodes[leaf].diagnostic


def test_bound_exhaustion_marks_the_exploration_incomplete():
    x = explore(load("loop"), 30)
    assert not x.complete
    assert x.leaves() == x.leaves(Outcome.BOUND)
    assert x.stats()["bound_exhausted"] == 1


def test_coverage_grows_with_the_bound():
    p = load("race1_sync")
    prev = None
    for bound in (5, 10, 20, 40, 80):
        s = explore(p, bound, dedup=True).stats()
        if prev is not None:
            assert s["states"] >= prev["states"]
            assert s["completed_leaves"] >= prev["completed_leaves"]
        prev = s
    assert prev["complete"]


def test_state_cap_stops_a_large_exploration():
    with pytest.raises(StateCapExceeded):
        explore(load("two_sync"), 10_000, state_cap=500)


def test_bound_must_be_positive(fig4):
    with pytest.raises(ValueError):
        explore(fig4, 0)


# --- lock invariants -----------------------------------------------------


@pytest.mark.parametrize("name", corpus_names())
def test_lock_invariants_hold_on_the_corpus(name):
    x = explore(load(name), 300, dedup=True, check_invariants=True, strict=True)
    assert x.violations == []


def test_broken_release_is_caught(monkeypatch):
    real = semantics.release_lock

    def keeps_the_lock(obj, lockset, loc):
        new_obj, _, rule = real(obj, lockset, loc)
        return new_obj, lockset, rule

    monkeypatch.setattr(semantics, "release_lock", keeps_the_lock)
    with pytest.raises(LockInvariantError) as info:
        explore(load("race1_sync"), 300, dedup=True, check_invariants=True, strict=True)
    assert any("counter 0" in v or "bad release" in v for v in info.value.violations)


def test_invariant_checker_reports_double_ownership():
    p = parse_program("class W { method run() { skip; } } main { decl w = new W; spawn w.run(); sync (w) { skip; } }")
    c = initial_config(p)
    for n in (1, 1, 1, 2, 2):
        c, _ = try_step(p, c, n)
    bad = c.__class__((c.threads[0].__class__(c.threads[0].stack, frozenset({1}), c.threads[0].tid), *c.threads[1:]), c.memory, c.next_loc, c.next_tid)
    assert any("both hold" in v for v in assert_lock_invariants(bad))


def test_exploration_does_not_mutate_the_program():
    p = load("race1")
    before = repr(p)
    explore(p, 200)
    assert repr(p) == before
