"""Annotation checkers, race detection, non-aliasing and guard inference.

All checkers are read-only folds over an ``Exploration``. Guards are
evaluated against the stored memories; evaluation returns a new memory
that is simply dropped, so stored configurations are never changed.

The exploration may be a schedule tree or a merged state graph. Per-step
obligations (name protection, races) are checked edge by edge. The value
checks collect the set of locations bound to the target along a whole
trace, so a bad dereference on edge B is reported only when some binding
of the dereferenced location lies on a common root-to-leaf path with B.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .explorer import Edge, Exploration, Trace, explore, replay
from .semantics import Config, EvalError, FMap, Location, eval_expr
from .syntax import (
    ITSELF,
    THIS,
    Annotation,
    Expr,
    FieldAccess,
    FieldTarget,
    Program,
    Semantics,
    Target,
    Var,
    VarTarget,
    free_names,
)

MAX_VIOLATIONS = 50


class Status(str, enum.Enum):
    HOLDS = "holds"
    HOLDS_UP_TO_BOUND = "holds-up-to-bound"
    VIOLATED = "violated"


@dataclass(frozen=True)
class Violation:
    """One failing obligation, with a schedule that reaches it."""

    schedule: tuple[int, ...]
    step: int  # index into ``schedule`` of the offending step (or configuration index for state checks)
    explanation: str
    location: Location | None = None
    early: bool = False  # the location is bound to the target only after this step

    def trace(self, program: Program) -> Trace:
        return replay(program, list(self.schedule))


@dataclass
class Verdict:
    status: Status
    bound: int
    violations: list[Violation] = field(default_factory=list)
    total_violations: int = 0
    vacuous: bool = False  # no obligation arose on any explored step
    subject: str = ""

    @property
    def counterexample(self) -> Violation | None:
        return self.violations[0] if self.violations else None

    @property
    def holds(self) -> bool:
        return self.status is not Status.VIOLATED


def _verdict(x: Exploration, violations: list[Violation], total: int, vacuous: bool, subject: str) -> Verdict:
    if violations:
        status = Status.VIOLATED
    elif x.complete:
        status = Status.HOLDS
    else:
        status = Status.HOLDS_UP_TO_BOUND
    return Verdict(status, x.bound, violations, total, vacuous and not violations, subject)


# ---------------------------------------------------------------------------
# Guard evaluation
# ---------------------------------------------------------------------------


def _eval_guard(guard: Expr, env, mem: FMap, alloc: int, **bind: Location) -> Location:
    env2 = dict(env)
    env2.update({(ITSELF if k == "itself" else THIS): v for k, v in bind.items()})
    loc, _, _ = eval_expr(guard, env2, mem, alloc)
    return loc


def _pre(x: Exploration, e: Edge) -> Config:
    return x.nodes[e.src].config


def _step_schedule(x: Exploration, e: int) -> tuple[tuple[int, ...], int]:
    path = x.path_to(x.edges[e].src) + [e]
    return tuple(x.schedule(path)), len(path) - 1


def _where(x: Exploration, e: Edge) -> str:
    return f"thread {e.record.thread} at [{e.record.rule}] `{e.record.head}`"


# ---------------------------------------------------------------------------
# Name protection
# ---------------------------------------------------------------------------


def check_name_var(x: Exploration, target: VarTarget, guard: Expr) -> Verdict:
    """Every step of the target method that accesses the variable holds the guard's lock."""
    xv = Var(target.var)
    owner = (target.cls, target.method)
    out: list[Violation] = []
    total = 0
    obligations = 0
    for eid, e in enumerate(x.edges):
        if e.record.owner != owner or xv not in e.events.accessed:
            continue
        obligations += 1
        pre = _pre(x, e)
        env = pre.thread(e.record.thread).top.env
        held = e.events.locks_held
        try:
            itself = env[target.var]
            loc = _eval_guard(guard, env, pre.memory, pre.next_loc, itself=itself)
        except (KeyError, EvalError) as exc:
            why = f"guard not evaluable at {_where(x, e)}: {exc}"
            loc = None
        else:
            if loc in held:
                continue
            why = f"{target.var} accessed by {_where(x, e)} while guard {guard} = l{loc} is not held (locks {_fmt(held)})"
        total += 1
        if len(out) < MAX_VIOLATIONS:
            sched, idx = _step_schedule(x, eid)
            out.append(Violation(sched, idx, why, loc))
    return _verdict(x, out, total, obligations == 0, f"name {target} by {guard}")


def check_name_field(x: Exploration, field_name: str, guard: Expr) -> Verdict:
    """Every access ``E'.f`` holds the guard evaluated with ``this`` bound to the container."""
    out: list[Violation] = []
    total = 0
    obligations = 0
    for eid, e in enumerate(x.edges):
        accesses = [a for a in e.events.accessed if isinstance(a, FieldAccess) and a.field == field_name]
        if not accesses:
            continue
        pre = _pre(x, e)
        env = pre.thread(e.record.thread).top.env
        held = e.events.locks_held
        for a in sorted(accesses, key=str):
            obligations += 1
            try:
                container, mem2, alloc2 = eval_expr(a.receiver, env, pre.memory, pre.next_loc)
                try:
                    value = mem2[container].fields[field_name]
                except KeyError:
                    raise EvalError("undefined-field", a, f"l{container} has no field {field_name}") from None
                loc = _eval_guard(guard, env, mem2, alloc2, this=container, itself=value)
            except EvalError as exc:
                why = f"guard not evaluable for {a} at {_where(x, e)}: {exc}"
                loc = None
            else:
                if loc in held:
                    continue
                why = f"{a} accessed by {_where(x, e)} while guard {guard} = l{loc} is not held (locks {_fmt(held)})"
            total += 1
            if len(out) < MAX_VIOLATIONS:
                sched, idx = _step_schedule(x, eid)
                out.append(Violation(sched, idx, why, loc))
    return _verdict(x, out, total, obligations == 0, f"name field {field_name} by {guard}")


# ---------------------------------------------------------------------------
# Value protection
# ---------------------------------------------------------------------------


def var_bindings(x: Exploration, target: VarTarget) -> dict[Location, list[int]]:
    """Location -> edges whose firing record (target method, not at the root) binds the variable to it."""
    return x.memo(("var-bindings", target), lambda: _var_bindings(x, target))


def _var_bindings(x: Exploration, target: VarTarget) -> dict[Location, list[int]]:
    owner = (target.cls, target.method)
    out: dict[Location, list[int]] = {}
    for eid, e in enumerate(x.edges):
        if e.src == x.root or e.record.owner != owner:
            continue
        top = _pre(x, e).thread(e.record.thread).top
        loc = top.env.get(target.var)
        if loc is not None:
            out.setdefault(loc, []).append(eid)
    return out


def field_bindings(x: Exploration, field_name: str) -> dict[Location, list[int]]:
    """Location -> non-root nodes whose memory stores it in some object's field."""
    return x.memo(("field-bindings", field_name), lambda: _field_bindings(x, field_name))


def _field_bindings(x: Exploration, field_name: str) -> dict[Location, list[int]]:
    out: dict[Location, list[int]] = {}
    for i, nd in enumerate(x.nodes):
        if i == x.root:
            continue
        for obj in nd.config.memory.values():
            loc = obj.fields.get(field_name)
            if loc is not None:
                lst = out.setdefault(loc, [])
                if not lst or lst[-1] != i:
                    lst.append(i)
    return out


def _closures(x: Exploration, key, binders: dict[Location, list[int]], by_edge: bool):
    """Per location: nodes reachable after some binding, and nodes from which a binding is reachable."""

    def compute():
        after: dict[Location, set[int]] = {}
        before: dict[Location, set[int]] = {}
        for loc, ws in binders.items():
            if by_edge:
                after[loc] = x.forward(x.edges[w].dst for w in ws)
                before[loc] = x.backward(x.edges[w].src for w in ws)
            else:
                after[loc] = x.forward(ws)
                before[loc] = x.backward(ws)
        return after, before

    return x.memo(("closures", key), compute)


def _value_check(x: Exploration, guard: Expr, subject: str, target: Target) -> Verdict:
    by_edge = isinstance(target, VarTarget)
    binders = var_bindings(x, target) if by_edge else field_bindings(x, target.field)
    after_binding, before_binding = _closures(x, target, binders, by_edge)
    out: list[Violation] = []
    total = 0
    obligations = 0
    for bid, b in enumerate(x.edges):
        hits = b.events.deref_locations & binders.keys()
        if not hits:
            continue
        pre = _pre(x, b)
        top = pre.thread(b.record.thread).top
        for loc in sorted(hits):
            bound_before = b.src in after_binding[loc] or (by_edge and bid in binders[loc])
            if not bound_before and b.dst not in before_binding[loc]:
                continue
            obligations += 1
            held = b.events.locks_held
            try:
                g = _eval_guard(guard, top.env, pre.memory, pre.next_loc, itself=loc)
            except EvalError as exc:
                why = f"guard not evaluable when {_where(x, b)} dereferences l{loc}: {exc}"
                g = None
            else:
                if g in held:
                    continue
                why = f"l{loc} dereferenced by {_where(x, b)} while guard {guard} = l{g} is not held (locks {_fmt(held)})"
            total += 1
            if len(out) < MAX_VIOLATIONS:
                path, idx = _witness_path(x, bid, binders[loc], bound_before, by_edge)
                if not bound_before:
                    why += "; the location is bound to the target only later in this trace (early-dereference)"
                out.append(Violation(tuple(x.schedule(path)), idx, why, loc, not bound_before))
    return _verdict(x, out, total, obligations == 0, subject)


def _witness_path(x: Exploration, bid: int, binders: list[int], before: bool, by_edge: bool) -> tuple[list[int], int]:
    """A root-to-somewhere path through edge ``bid`` and one of ``binders``."""
    b = x.edges[bid]
    if before:
        if by_edge and bid in binders:
            prefix = x.path_to(b.src)
            return prefix + [bid], len(prefix)
        back = x.backward([b.src])
        for w in binders:
            if by_edge:
                a = x.edges[w]
                if a.dst in back:
                    prefix = x.path_to(a.src) + [w] + x.path_between(a.dst, b.src)
                    return prefix + [bid], len(prefix)
            elif w in back:
                prefix = x.path_to(w) + x.path_between(w, b.src)
                return prefix + [bid], len(prefix)
    ahead = x.forward([b.dst])
    prefix = x.path_to(b.src)
    for w in binders:
        if by_edge:
            a = x.edges[w]
            if a.src in ahead:
                return prefix + [bid] + x.path_between(b.dst, a.src) + [w], len(prefix)
        elif w in ahead:
            return prefix + [bid] + x.path_between(b.dst, w), len(prefix)
    raise AssertionError("no binding on a common path")


def check_value_var(x: Exploration, target: VarTarget, guard: Expr) -> Verdict:
    """Every dereference of a location ever bound to the variable holds the guard's lock."""
    return _value_check(x, guard, f"value {target} by {guard}", target)


def check_value_field(x: Exploration, field_name: str, guard: Expr) -> Verdict:
    """Every dereference of a location ever stored in the field holds the guard's lock."""
    return _value_check(x, guard, f"value field {field_name} by {guard}", FieldTarget(field_name))


def check(x: Exploration, a: Annotation) -> Verdict:
    t = a.target
    if a.semantics is Semantics.NAME:
        return check_name_var(x, t, a.guard) if isinstance(t, VarTarget) else check_name_field(x, t.field, a.guard)
    return check_value_var(x, t, a.guard) if isinstance(t, VarTarget) else check_value_field(x, t.field, a.guard)


# ---------------------------------------------------------------------------
# Data races
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Race:
    node: int
    location: Location
    field: str
    threads: tuple[int, int]  # positions (a, b); a writes
    modes: tuple[str, str]
    schedule: tuple[int, ...]


@dataclass
class RaceReport:
    races: list[Race]
    complete: bool
    bound: int

    @property
    def sites(self) -> list[tuple[Location, str]]:
        return sorted({(r.location, r.field) for r in self.races})

    def first_at(self, location: Location, fld: str) -> Race:
        return next(r for r in self.races if (r.location, r.field) == (location, fld))

    def __bool__(self) -> bool:
        return bool(self.races)


def _races_at(x: Exploration, i: int) -> Iterator[tuple[Location, str, int, int, str, str]]:
    outs = [x.edges[e] for e in x.nodes[i].out]
    for ea, eb in itertools.permutations(outs, 2):
        a, b = ea.record.thread, eb.record.thread
        for tok in ea.events.derefs:
            if tok.mode.value != "<-":
                continue
            for other in eb.events.derefs:
                if other.location == tok.location and other.field == tok.field:
                    if other.mode.value == "<-" and a > b:
                        continue  # write/write pairs are reported once, lower position first
                    yield tok.location, tok.field, a, b, "write", "write" if other.mode.value == "<-" else "read"


def _race_candidates(x: Exploration) -> list[tuple[int, set]]:
    def compute():
        out = []
        for i in range(len(x.nodes)):
            hits = set(_races_at(x, i))
            if hits:
                out.append((i, hits))
        return out

    return x.memo("race-candidates", compute)


def detect_races(x: Exploration, where=None) -> RaceReport:
    """Every configuration where two enabled threads touch the same field of the same object, one writing.

    ``where(node, location)`` optionally restricts which findings are kept.
    """
    found: set[Race] = set()
    for i, hits in _race_candidates(x):
        sched = tuple(x.schedule(x.path_to(i)))
        for loc, f, a, b, ma, mb in hits:
            if where is None or where(i, loc):
                found.add(Race(i, loc, f, (a, b), (ma, mb), sched))
    return RaceReport(sorted(found, key=lambda r: (len(r.schedule), r.location, r.field, r.threads, r.node)), x.complete, x.bound)


# ---------------------------------------------------------------------------
# Non-aliasing
# ---------------------------------------------------------------------------


def _holders(c: Config, tops, wanted: set[Location]) -> tuple[dict, dict]:
    """Variables (of top records) and fields holding each location in ``wanted``."""
    by_var: dict[Location, list[tuple[int, str]]] = {}
    for j, env in tops:
        for y, v in env.items():
            if v in wanted:
                by_var.setdefault(v, []).append((j, y))
    by_field: dict[Location, list[tuple[Location, str]]] = {}
    for owner, obj in c.memory.items():
        for y, v in obj.fields.items():
            if v in wanted:
                by_field.setdefault(v, []).append((owner, y))
    return by_var, by_field


def _alias_breaches(c: Config, target: Target) -> Iterator[str]:
    tops = [(j, t.top.env) for j, t in enumerate(c.threads, 1) if t.top is not None]
    if isinstance(target, VarTarget):
        x = target.var
        bound = [(j, env[x]) for j, env in tops if x in env]
        if not bound:
            return
        by_var, by_field = _holders(c, tops, {loc for _, loc in bound})
        for j, loc in bound:
            for k, y in by_var.get(loc, ()):
                if k == j and y != x:
                    yield f"{x} and {y} of thread {j} both hold l{loc}"
                elif k != j:
                    yield f"{x} of thread {j} and {y} of thread {k} both hold l{loc}"
            for owner, y in by_field.get(loc, ()):
                yield f"{x} of thread {j} and field l{owner}.{y} both hold l{loc}"
        return
    f = target.field
    held = [(owner, obj.fields[f]) for owner, obj in c.memory.items() if f in obj.fields]
    if not held:
        return
    by_var, by_field = _holders(c, tops, {loc for _, loc in held})
    for owner, loc in held:
        for j, y in by_var.get(loc, ()):
            yield f"l{owner}.{f} and {y} of thread {j} both hold l{loc}"
        for other, y in by_field.get(loc, ()):
            if (other, y) != (owner, f):
                yield f"l{owner}.{f} and l{other}.{y} both hold l{loc}"


def check_nonaliased(x: Exploration, target: Target) -> Verdict:
    """No configuration binds the target's value through a second name.

    Variables are matched by name in the top records of all threads. For a
    field, a second field of the same container holding the same location
    also counts as an alias.
    """
    return x.memo(("nonaliased", target), lambda: _check_nonaliased(x, target))


def _check_nonaliased(x: Exploration, target: Target) -> Verdict:
    out: list[Violation] = []
    total = 0
    seen_any = False
    for i, nd in enumerate(x.nodes):
        for why in _alias_breaches(nd.config, target):
            total += 1
            if len(out) < MAX_VIOLATIONS:
                path = x.path_to(i)
                out.append(Violation(tuple(x.schedule(path)), len(path), why))
            break
        if not seen_any:
            seen_any = _binds(nd.config, target)
    return _verdict(x, out, total, not seen_any, f"non-aliased {target}")


def _binds(c: Config, target: Target) -> bool:
    if isinstance(target, VarTarget):
        return any(t.top is not None and target.var in t.top.env for t in c.threads)
    return any(target.field in o.fields for o in c.memory.values())


# ---------------------------------------------------------------------------
# Theorem harness
# ---------------------------------------------------------------------------


@dataclass
class Wellformedness:
    ok: bool
    diagnostics: list[str]

    def __bool__(self) -> bool:
        return self.ok


def check_guard_wellformed(guard: Expr, semantics: Semantics, target_kind: type | str) -> Wellformedness:
    """Does the guard satisfy the variable restriction of the race-freedom theorems?"""
    kind = target_kind if isinstance(target_kind, str) else ("field" if target_kind is FieldTarget else "var")
    allowed = {ITSELF}
    if semantics is Semantics.NAME and kind == "field":
        allowed.add(THIS)
    extra = sorted(free_names(guard) - allowed)
    if not extra:
        return Wellformedness(True, [])
    names = ", ".join(sorted(allowed))
    return Wellformedness(
        False,
        [f"guard {guard} uses {', '.join(extra)}; only {names} may appear, so no mutual-exclusion guarantee follows"],
    )


class SoundnessError(AssertionError):
    """A race was found although every theorem hypothesis holds."""


@dataclass
class TheoremReport:
    annotation: Annotation
    wellformed: Wellformedness
    nonaliased: Verdict | None
    protection: Verdict
    races: RaceReport

    @property
    def hypotheses(self) -> Status | None:
        """Combined status of the hypotheses, or None when the guard is ill-formed."""
        if not self.wellformed:
            return None
        parts = [self.protection] + ([self.nonaliased] if self.nonaliased is not None else [])
        if any(v.status is Status.VIOLATED for v in parts):
            return Status.VIOLATED
        if all(v.status is Status.HOLDS for v in parts):
            return Status.HOLDS
        return Status.HOLDS_UP_TO_BOUND

    @property
    def conclusion(self) -> str:
        if self.hypotheses in (Status.HOLDS, Status.HOLDS_UP_TO_BOUND):
            return "no-races" if not self.races else "races"
        return "no-guarantee"

    @property
    def theorem(self) -> str:
        return "name" if self.annotation.semantics is Semantics.NAME else "value"


def _bound_locations(x: Exploration, a: Annotation):
    """``where(node, loc)`` predicate: is ``loc`` bound to the target at or before ``node``?"""
    t = a.target
    if a.semantics is Semantics.NAME:
        # currently bound at the racing configuration
        def current(i: int, loc: Location) -> bool:
            c = x.nodes[i].config
            if isinstance(t, VarTarget):
                return any(
                    th.top is not None and th.top.owner == (t.cls, t.method) and th.top.env.get(t.var) == loc
                    for th in c.threads
                )
            return any(o.fields.get(t.field) == loc for o in c.memory.values())

        return current

    if isinstance(t, VarTarget):
        binders = var_bindings(x, t)
        owner = (t.cls, t.method)
        after, _ = _closures(x, t, binders, True)

        def before_var(i: int, loc: Location) -> bool:
            if i in after.get(loc, ()):
                return True
            if i == x.root:
                return False
            c = x.nodes[i].config
            for e in x.nodes[i].out:
                top = c.thread(x.edges[e].record.thread).top
                if top is not None and top.owner == owner and top.env.get(t.var) == loc:
                    return True
            return False

        return before_var

    after_f, _ = _closures(x, t, field_bindings(x, t.field), False)

    def before_field(i: int, loc: Location) -> bool:
        return i in after_f.get(loc, ())

    return before_field


def verify_race_freedom(
    p: Program,
    a: Annotation,
    bound: int,
    *,
    exploration: Exploration | None = None,
    dedup: bool = True,
    state_cap: int | None = None,
) -> TheoremReport:
    """Check the hypotheses of the matching race-freedom theorem and look for races at the target's locations.

    Raises SoundnessError when all hypotheses hold yet a race is found.
    """
    if exploration is None:
        kw = {"state_cap": state_cap} if state_cap else {}
        exploration = explore(p, bound, dedup=dedup, **kw)
    x = exploration
    kind = "var" if isinstance(a.target, VarTarget) else "field"
    wf = check_guard_wellformed(a.guard, a.semantics, kind)
    nonaliased = check_nonaliased(x, a.target) if a.semantics is Semantics.NAME else None
    protection = check(x, a)
    races = detect_races(x, where=_bound_locations(x, a))
    report = TheoremReport(a, wf, nonaliased, protection, races)
    if report.hypotheses in (Status.HOLDS, Status.HOLDS_UP_TO_BOUND) and races:
        r = races.races[0]
        raise SoundnessError(
            f"{a}: hypotheses hold but threads {r.threads} race on l{r.location}.{r.field} after schedule {list(r.schedule)}"
        )
    return report


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def default_candidates(p: Program, depth: int = 2) -> list[Expr]:
    """``itself``, ``this`` and field paths of length at most ``depth`` rooted at them."""
    fields = sorted(p.field_names())
    out: list[Expr] = []
    for root in (ITSELF, THIS):
        layer: list[Expr] = [Var(root)]
        out.extend(layer)
        for _ in range(depth):
            layer = [FieldAccess(e, f) for e in layer for f in fields]
            out.extend(layer)
    return out


@dataclass
class Inference:
    guards: list[Expr]
    vacuous: bool
    verdicts: dict[str, Verdict]
    complete: bool


def infer_guards(x: Exploration, target: Target, semantics: Semantics, candidates: Iterable[Expr] | None = None) -> Inference:
    """Candidates whose protection verdict is not Violated over the exploration."""
    cands = list(candidates) if candidates is not None else default_candidates(x.program)
    verdicts: dict[str, Verdict] = {}
    guards: list[Expr] = []
    vacuous = True
    for g in cands:
        v = check(x, Annotation(target, g, semantics))
        verdicts[str(g)] = v
        vacuous = vacuous and v.vacuous
        if v.holds:
            guards.append(g)
    return Inference(guards, vacuous and bool(cands), verdicts, x.complete)


def _fmt(locs: Iterable[Location]) -> str:
    return "{" + ",".join(f"l{x}" for x in sorted(locs)) + "}"
