from __future__ import annotations

import copy

import pytest
from conftest import annotations, load

from guardedby.checkers import (
    SoundnessError,
    Status,
    check,
    check_guard_wellformed,
    check_name_field,
    check_name_var,
    check_nonaliased,
    check_value_field,
    check_value_var,
    default_candidates,
    detect_races,
    infer_guards,
    verify_race_freedom,
)
from guardedby.explorer import explore
from guardedby.syntax import Annotation, FieldTarget, Semantics, VarTarget, parse_annotations, parse_expr, parse_program

ITSELF = parse_expr("itself")
THIS_X = parse_expr("this.x")
Z = VarTarget("K", "m", "z")
W = VarTarget("K", "m", "w")


def ann(text: str) -> Annotation:
    (a,) = parse_annotations(text)
    return a


# --- the running example's table ------------------------------------------------

# (target, semantics, guard or None for a dash, expected holds)
TABLE = [
    (FieldTarget("x"), Semantics.NAME, None),
    (FieldTarget("x"), Semantics.VALUE, ITSELF),
    (FieldTarget("y"), Semantics.NAME, THIS_X),
    (FieldTarget("y"), Semantics.VALUE, None),
    (Z, Semantics.NAME, ITSELF),
    (Z, Semantics.NAME, THIS_X),
    (Z, Semantics.VALUE, ITSELF),
    (W, Semantics.NAME, None),
    (W, Semantics.VALUE, None),
]


@pytest.mark.parametrize("target, sem, guard", TABLE)
def test_fig4_table(fig4_x, target, sem, guard):
    if guard is not None:
        v = check(fig4_x, Annotation(target, guard, sem))
        assert v.status is Status.HOLDS
        assert not v.vacuous
    else:
        inf = infer_guards(fig4_x, target, sem)
        assert inf.guards == []
        assert not inf.vacuous


@pytest.mark.parametrize(
    "a, step",
    [
        ("guard name field x by itself", 1),
        ("guard value field y by this.x", 14),
        ("guard name var K.m.w by itself", 10),
        ("guard value var K.m.w by itself", 14),
    ],
)
def test_fig4_counterexample_steps(fig4, fig4_x, a, step):
    v = check(fig4_x, ann(a))
    assert v.status is Status.VIOLATED
    cx = v.counterexample
    assert cx.step == step
    t = cx.trace(fig4)
    assert len(t.steps) > step


def test_value_counterexample_is_the_write_through_w(fig4, fig4_x):
    v = check_value_field(fig4_x, "y", THIS_X)
    t = v.counterexample.trace(fig4)
    assert t.steps[v.counterexample.step].record.head == "w.g := new Object {}"


def test_name_and_value_are_incomparable(fig4_x):
    # y is name protected but not value protected; x the other way round.
    assert check_name_field(fig4_x, "y", THIS_X).holds
    assert not check_value_field(fig4_x, "y", THIS_X).holds
    assert check_value_field(fig4_x, "x", ITSELF).holds
    assert not check_name_field(fig4_x, "x", ITSELF).holds


def test_unaccessed_targets_hold_vacuously(fig4_x):
    v = check_name_field(fig4_x, "nothere", ITSELF)
    assert v.status is Status.HOLDS and v.vacuous
    v = check_value_var(fig4_x, VarTarget("K", "m", "nothere"), ITSELF)
    assert v.status is Status.HOLDS and v.vacuous


def test_incomplete_exploration_only_holds_up_to_bound(fig4):
    x = explore(fig4, 5)
    assert check_name_var(x, Z, ITSELF).status is Status.HOLDS_UP_TO_BOUND


def test_unevaluable_guard_is_a_violation(fig4_x):
    v = check_name_field(fig4_x, "y", parse_expr("this.nothere"))
    assert v.status is Status.VIOLATED


def test_writing_an_absent_field_violates_name_protection():
    p = parse_program("class K { method m() { sync (this) { this.f := this; } } } main { decl k = new K; k.m(); }")
    x = explore(p, 100)
    v = check_name_field(x, "f", parse_expr("this.f"))
    assert v.status is Status.VIOLATED


def test_checkers_do_not_touch_the_exploration(fig4_x):
    snapshot = copy.deepcopy([(n.config, n.outcome) for n in fig4_x.nodes])
    for a in annotations("fig4"):
        check(fig4_x, a)
    check_nonaliased(fig4_x, W)
    detect_races(fig4_x)
    infer_guards(fig4_x, FieldTarget("y"), Semantics.NAME)
    assert [(n.config, n.outcome) for n in fig4_x.nodes] == snapshot


# --- races ----------------------------------------------------------------------


def test_race_on_unsynchronized_writes():
    p = load("race1")
    x = explore(p, 200)
    r = detect_races(x)
    assert r.sites == [(1, "f")]
    w = r.first_at(1, "f")
    assert w.modes == ("write", "write")
    assert w.threads[0] < w.threads[1]


def test_no_race_when_both_writes_hold_the_lock():
    x = explore(load("race1_sync"), 500, dedup=True)
    assert not detect_races(x)


def test_race_on_escaped_value():
    x = explore(load("leak"), 500, dedup=True)
    r = detect_races(x)
    assert (1, "item") in r.sites
    assert check(x, annotations("leak")[0]).status is Status.HOLDS


def test_single_thread_has_no_races(fig4_x):
    assert detect_races(fig4_x).races == []


# --- non-aliasing -------------------------------------------------------------------


def test_z_aliases_the_field_x(fig4_x):
    v = check_nonaliased(fig4_x, Z)
    assert v.status is Status.VIOLATED
    assert "z" in v.counterexample.explanation


def test_w_aliases_after_the_assignment(fig4_x):
    v = check_nonaliased(fig4_x, W)
    assert v.status is Status.VIOLATED


def test_fresh_unshared_variable_is_nonaliased():
    p = parse_program("class K { method m() { decl v = new Object; } } main { new K.m(); }")
    x = explore(p, 50)
    assert check_nonaliased(x, VarTarget("K", "m", "v")).status is Status.HOLDS


def test_field_sharing_its_value_with_a_variable_is_aliased():
    x = explore(load("thm2_value"), 500, dedup=True)
    assert check_nonaliased(x, FieldTarget("data")).status is Status.VIOLATED


# --- wellformedness ---------------------------------------------------------------


@pytest.mark.parametrize(
    "guard, sem, kind, ok",
    [
        ("this.x", Semantics.NAME, "field", True),
        ("this.x", Semantics.NAME, "var", False),
        ("this.x", Semantics.VALUE, "field", False),
        ("itself", Semantics.VALUE, "var", True),
        ("itself.f.g", Semantics.NAME, "var", True),
        ("guard", Semantics.NAME, "field", False),
        ("guard", Semantics.VALUE, "var", False),
    ],
)
def test_guard_wellformedness(guard, sem, kind, ok):
    w = check_guard_wellformed(parse_expr(guard), sem, kind)
    assert w.ok is ok
    assert bool(w.diagnostics) is not ok


def test_wellformedness_accepts_target_classes():
    assert check_guard_wellformed(THIS_X, Semantics.NAME, FieldTarget).ok
    assert not check_guard_wellformed(THIS_X, Semantics.NAME, VarTarget).ok


# --- theorem harness ------------------------------------------------------------------


@pytest.mark.parametrize("name, holding", [("thm1_nonaliased", 0), ("thm2_value", 0), ("two_sync", 1)])
def test_theorem_hypotheses_hold_and_no_race(name, holding):
    p = load(name)
    for a in annotations(name):
        rep = verify_race_freedom(p, a, 500)
        if rep.hypotheses in (Status.HOLDS, Status.HOLDS_UP_TO_BOUND):
            assert rep.conclusion == "no-races"
    rep = verify_race_freedom(p, annotations(name)[holding], 500)
    assert rep.hypotheses is Status.HOLDS


def test_ill_formed_guard_gives_no_guarantee():
    p = load("fig5_analog")
    rep = verify_race_freedom(p, annotations("fig5_analog")[0], 500)
    assert rep.hypotheses is None
    assert rep.conclusion == "no-guarantee"
    assert rep.wellformed.diagnostics
    # The methods race on the container's val slot, which is not a location bound to val.
    assert rep.races.races == []
    assert [f for _, f in detect_races(explore(p, 500, dedup=True)).sites] == ["val"]


def test_violated_hypothesis_gives_no_guarantee():
    p = load("leak")
    rep = verify_race_freedom(p, annotations("leak")[0], 500)
    assert rep.hypotheses is Status.VIOLATED  # listeners is aliased by the local l
    assert rep.conclusion == "no-guarantee"


def test_theorem_kind_follows_the_semantics():
    p = load("thm2_value")
    rep = verify_race_freedom(p, annotations("thm2_value")[0], 500)
    assert rep.theorem == "value" and rep.nonaliased is None


def test_soundness_error_is_raised_when_a_race_slips_through(monkeypatch):
    import guardedby.checkers as ch

    p = load("race1")
    a = ann("guard value field f by itself")
    monkeypatch.setattr(ch, "check", lambda x, a: ch.Verdict(Status.HOLDS, x.bound))
    monkeypatch.setattr(ch, "_bound_locations", lambda x, a: lambda i, loc: True)
    with pytest.raises(SoundnessError):
        verify_race_freedom(p, a, 200)


# --- inference ----------------------------------------------------------------------


def test_infer_name_guards_for_z(fig4_x):
    inf = infer_guards(fig4_x, Z, Semantics.NAME, [ITSELF, THIS_X])
    assert [str(g) for g in inf.guards] == ["itself", "this.x"]
    assert inf.complete


def test_infer_value_guard_for_x(fig4_x):
    assert "itself" in [str(g) for g in infer_guards(fig4_x, FieldTarget("x"), Semantics.VALUE).guards]


def test_infer_name_guard_for_y(fig4_x):
    assert "this.x" in [str(g) for g in infer_guards(fig4_x, FieldTarget("y"), Semantics.NAME).guards]


def test_infer_on_an_unaccessed_target_returns_everything(fig4_x):
    cands = default_candidates(fig4_x.program)
    inf = infer_guards(fig4_x, FieldTarget("nothere"), Semantics.NAME, cands)
    assert inf.vacuous
    assert len(inf.guards) == len(cands)


def test_default_candidates_are_rooted_at_itself_or_this(fig4):
    cands = [str(c) for c in default_candidates(fig4, depth=1)]
    assert cands[:2] == ["itself", "itself.f"]
    assert "this" in cands and "this.x" in cands
    assert all(c.split(".")[0] in ("itself", "this") for c in cands)
