"""Semantic domains, expression evaluation and the one-step reduction relation.

Locations are plain ints handed out by a per-configuration allocation
counter; location 0 is the object of the distinguished main class.
Sequential composition is kept right-associated (see ``syntax.concat``), so
the first component of a ``Seq`` is never itself a ``Seq``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Iterator, Mapping

from .syntax import (
    MAIN_CLASS,
    MAIN_METHOD,
    OBJECT,
    AssignField,
    AssignVar,
    Call,
    Command,
    Decl,
    Expr,
    FieldAccess,
    Lock,
    New,
    Program,
    Seq,
    Skip,
    Spawn,
    Sync,
    Unlock,
    Var,
    _cached_hash,
    _hash_slot,
    concat,
    head,
    lookup,
)

Location = int

RULES = (
    "decl", "var-ass", "field-ass", "seq", "seq-skip", "invoc", "spawn", "sync",
    "acquire-lock", "reentrant-lock", "decrease-lock", "release-lock",
    "push", "pop", "par-l", "par-r", "end-l", "end-r",
)  # fmt: skip
STRUCTURAL_RULES = frozenset({"seq", "push", "par-l", "par-r"})


class FMap(Mapping):
    """Immutable hashable mapping; ``set`` returns an updated copy."""

    __slots__ = ("_d", "_h")

    def __init__(self, items=()):
        self._d = dict(items)
        self._h = None

    def __getitem__(self, k):
        return self._d[k]

    def __iter__(self):
        return iter(self._d)

    def __len__(self):
        return len(self._d)

    # Direct delegation; the Mapping mixins are noticeably slower.
    def __contains__(self, k):
        return k in self._d

    def get(self, k, default=None):
        return self._d.get(k, default)

    def keys(self):
        return self._d.keys()

    def items(self):
        return self._d.items()

    def values(self):
        return self._d.values()

    def __hash__(self):
        if self._h is None:
            self._h = hash(frozenset(self._d.items()))
        return self._h

    def __eq__(self, other):
        if isinstance(other, FMap):
            return self._d == other._d
        return NotImplemented

    def __repr__(self):
        return f"FMap({self._d!r})"

    def set(self, k, v) -> FMap:
        d = dict(self._d)
        d[k] = v
        return FMap(d)


EMPTY = FMap()


@dataclass(frozen=True, slots=True)
class Obj:
    cls: str
    fields: FMap = EMPTY
    locks: int = 0
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("cls", "fields", "locks")

    def with_field(self, f: str, loc: Location) -> Obj:
        return Obj(self.cls, self.fields.set(f, loc), self.locks)

    def inc(self) -> Obj:
        return Obj(self.cls, self.fields, self.locks + 1)

    def dec(self) -> Obj:
        return Obj(self.cls, self.fields, max(0, self.locks - 1))


@dataclass(frozen=True, slots=True)
class Record:
    cls: str
    method: str
    cont: Command
    env: FMap
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("cls", "method", "cont", "env")

    @property
    def owner(self) -> tuple[str, str]:
        return (self.cls, self.method)


@dataclass(frozen=True, slots=True)
class Thread:
    stack: tuple[Record, ...]  # top of stack first
    lockset: frozenset[Location] = frozenset()
    tid: int = 0  # creation serial number; not part of the calculus
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("stack", "lockset", "tid")

    @property
    def top(self) -> Record | None:
        return self.stack[0] if self.stack else None


@dataclass(frozen=True, slots=True)
class Config:
    threads: tuple[Thread, ...]
    memory: FMap
    next_loc: int
    next_tid: int = 1
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("threads", "memory", "next_loc", "next_tid")

    def thread(self, n: int) -> Thread:
        """Thread at 1-based position ``n``."""
        return self.threads[n - 1]


class EvalError(Exception):
    """Evaluation is undefined; ``cause`` names why."""

    def __init__(self, cause: str, expr: Expr, detail: str = ""):
        super().__init__(f"{cause}: {expr}" + (f" ({detail})" if detail else ""))
        self.cause = cause
        self.expr = expr


class Stuck(Exception):
    """No rule applies because a premise is undefined."""

    def __init__(self, rule: str, cause: str):
        super().__init__(f"[{rule}] {cause}")
        self.rule = rule
        self.cause = cause


class Blocked(Exception):
    """The thread waits on a lock held by another thread."""

    def __init__(self, loc: Location):
        super().__init__(f"blocked on l{loc}")
        self.loc = loc


class InternalError(AssertionError):
    """An internal-consistency failure of the reduction relation."""


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def eval_expr(
    e: Expr, env: Mapping[str, Location], mem: FMap, alloc: int, program: Program | None = None
) -> tuple[Location, FMap, int]:
    """Evaluate ``e``; returns (location, memory, next allocation index).

    Raises EvalError when the value is undefined.
    """
    if isinstance(e, Var):
        try:
            return env[e.name], mem, alloc
        except KeyError:
            raise EvalError("undefined-variable", e) from None
    if isinstance(e, FieldAccess):
        loc, mem, alloc = eval_expr(e.receiver, env, mem, alloc, program)
        obj = mem.get(loc)
        if obj is None:
            raise EvalError("dangling-location", e, f"l{loc}")
        try:
            return obj.fields[e.field], mem, alloc
        except KeyError:
            raise EvalError("undefined-field", e, f"l{loc} has no field {e.field}") from None
    if isinstance(e, New):
        if program is not None and not program.has_class(e.cls):
            raise EvalError("unknown-class", e)
        fields = {}
        for f, sub in e.inits:
            fields[f], mem, alloc = eval_expr(sub, env, mem, alloc, program)
        loc = alloc
        if loc in mem:
            raise InternalError(f"allocation counter reused l{loc}")
        return loc, mem.set(loc, Obj(e.cls, FMap(fields), 0)), alloc + 1
    raise TypeError(f"not an expression: {e!r}")


def initial_config(p: Program) -> Config:
    body = p.main if p.main is not None else Skip()
    rec = Record(MAIN_CLASS, MAIN_METHOD, body, FMap({"this": 0}))
    return Config((Thread((rec,), frozenset(), 0),), FMap({0: Obj(MAIN_CLASS)}), 1, 1)


# ---------------------------------------------------------------------------
# Reduction
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class StepRecord:
    """What happened in one reduction step."""

    thread: int  # 1-based position of the firing thread in the pre-state
    rule: str  # the axiom at the leaf of the derivation
    derivation: tuple[str, ...]  # rule names from the root of the derivation to its leaf
    head: str  # pretty-printed head of the firing continuation
    owner: tuple[str, str] | None  # owner of the firing top record
    tid: int
    lock: Location | None = None  # location for lock/unlock rules


def rule_name_of(rec: StepRecord) -> str:
    return rec.rule


@dataclass(slots=True)
class _Local:
    """Result of reducing the top activation record."""

    cont: Command
    env: FMap
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("cls", "method", "cont", "env")
    lockset: frozenset[Location]
    mem: FMap
    alloc: int
    path: list[str]
    lock: Location | None = None


def _eval(program: Program, rule: str, e: Expr, env, mem, alloc):
    try:
        return eval_expr(e, env, mem, alloc, program)
    except EvalError as exc:
        raise Stuck(rule, str(exc)) from None


def acquire_lock(obj: Obj, lockset: frozenset, loc: Location) -> tuple[Obj, frozenset, str]:
    return obj.inc(), lockset | {loc}, "acquire-lock"


def reentrant_lock(obj: Obj, lockset: frozenset, loc: Location) -> tuple[Obj, frozenset, str]:
    return obj.inc(), lockset, "reentrant-lock"


def decrease_lock(obj: Obj, lockset: frozenset, loc: Location) -> tuple[Obj, frozenset, str]:
    return obj.dec(), lockset, "decrease-lock"


def release_lock(obj: Obj, lockset: frozenset, loc: Location) -> tuple[Obj, frozenset, str]:
    return obj.dec(), lockset - {loc}, "release-lock"


def _reduce_atomic(program: Program, c: Command, env: FMap, lockset, mem: FMap, alloc: int) -> _Local:
    if isinstance(c, Decl):
        if c.var in env:
            raise Stuck("decl", f"{c.var} already declared")
        loc, mem, alloc = _eval(program, "decl", c.expr, env, mem, alloc)
        return _Local(Skip(), env.set(c.var, loc), lockset, mem, alloc, ["decl"])
    if isinstance(c, AssignVar):
        if c.var not in env:
            raise Stuck("var-ass", f"{c.var} not declared")
        loc, mem, alloc = _eval(program, "var-ass", c.expr, env, mem, alloc)
        return _Local(Skip(), env.set(c.var, loc), lockset, mem, alloc, ["var-ass"])
    if isinstance(c, AssignField):
        if c.var not in env:
            raise Stuck("field-ass", f"{c.var} not declared")
        target = env[c.var]
        loc, mem2, alloc = _eval(program, "field-ass", c.expr, env, mem, alloc)
        obj = mem[target]
        return _Local(Skip(), env, lockset, mem2.set(target, obj.with_field(c.field, loc)), alloc, ["field-ass"])
    if isinstance(c, Sync):
        loc, mem, alloc = _eval(program, "sync", c.guard, env, mem, alloc)
        cont = concat(Lock(loc), concat(c.body, Unlock(loc)))
        return _Local(cont, env, lockset, mem, alloc, ["sync"], loc)
    if isinstance(c, Lock):
        obj = mem[c.loc]
        if obj.locks == 0:
            rule = acquire_lock
        elif c.loc in lockset:
            rule = reentrant_lock
        else:
            raise Blocked(c.loc)
        obj, lockset, name = rule(obj, lockset, c.loc)
        return _Local(Skip(), env, lockset, mem.set(c.loc, obj), alloc, [name], c.loc)
    if isinstance(c, Unlock):
        obj = mem[c.loc]
        if obj.locks > 1:
            rule = decrease_lock
        elif obj.locks == 1:
            rule = release_lock
        else:
            raise InternalError(f"unlock(l{c.loc}) with lock counter 0")
        obj, lockset, name = rule(obj, lockset, c.loc)
        return _Local(Skip(), env, lockset, mem.set(c.loc, obj), alloc, [name], c.loc)
    if isinstance(c, (Call, Spawn)):
        raise Stuck("invoc" if isinstance(c, Call) else "spawn", "call outside sequence position")
    raise InternalError(f"no rule for {c!r}")


def _reduce_local(program: Program, c: Command, env: FMap, lockset, mem: FMap, alloc: int) -> _Local:
    if isinstance(c, Seq):
        if isinstance(c.first, Skip):
            return _Local(c.rest, env, lockset, mem, alloc, ["seq-skip"])
        r = _reduce_atomic(program, c.first, env, lockset, mem, alloc)
        r.cont = concat(r.cont, c.rest)
        r.path.insert(0, "seq")
        return r
    return _reduce_atomic(program, c, env, lockset, mem, alloc)


def _lookup_body(program: Program, rule: str, mem: FMap, loc: Location, method: str) -> tuple[str, Command]:
    cls = mem[loc].cls
    impl = lookup(program, cls, method)
    if impl is None:
        raise Stuck(rule, f"method-not-found: {cls}.{method}")
    return impl, program.class_def(impl).methods[method]


def _par(c: Config, n: int) -> list[str]:
    if len(c.threads) == 1:
        return []
    return ["par-l"] if n == 1 else ["par-r"]


@functools.lru_cache(maxsize=4096)
def _text(node) -> str:
    """Printed form of a syntax node, memoized because printing is costly on small steps."""
    return str(node)


def try_step(program: Program, c: Config, n: int) -> tuple[Config, StepRecord]:
    """Fire thread ``n`` (1-based) of ``c``.

    Raises Blocked when the thread waits for a lock, Stuck when no rule
    applies because of an undefined premise.
    """
    threads = c.threads
    t = threads[n - 1]
    pre = threads[: n - 1]
    post = threads[n:]
    if not t.stack:
        if len(threads) < 2:
            raise Stuck("end-r", "last thread has terminated")
        rule = "end-r" if n == len(threads) else "end-l"
        path = ["par-r", rule] if rule == "end-l" and n > 1 else [rule]
        rec = StepRecord(n, rule, tuple(path), "ε", None, t.tid)
        return Config(pre + post, c.memory, c.next_loc, c.next_tid), rec

    top, below = t.stack[0], t.stack[1:]
    cont = top.cont
    hd = _text(head(cont))
    par = _par(c, n)

    if isinstance(cont, Skip):
        new_t = Thread(below, t.lockset, t.tid)
        rec = StepRecord(n, "pop", tuple(par + ["pop"]), hd, top.owner, t.tid)
        return Config(pre + (new_t,) + post, c.memory, c.next_loc, c.next_tid), rec

    first = cont.first if isinstance(cont, Seq) else None
    if isinstance(first, (Call, Spawn)):
        rule = "invoc" if isinstance(first, Call) else "spawn"
        loc, mem, alloc = _eval(program, rule, first.receiver, top.env, c.memory, c.next_loc)
        impl, body = _lookup_body(program, rule, mem, loc, first.method)
        callee = Record(impl, first.method, body, FMap({"this": loc}))
        caller = Record(top.cls, top.method, cont.rest, top.env)
        rec = StepRecord(n, rule, tuple(par + [rule]), hd, top.owner, t.tid)
        if rule == "invoc":
            new_t = Thread((callee, caller) + below, t.lockset, t.tid)
            return Config(pre + (new_t,) + post, mem, alloc, c.next_tid), rec
        spawned = Thread((callee,), frozenset(), c.next_tid)
        cont_t = Thread((caller,) + below, t.lockset, t.tid)
        return Config(pre + (spawned, cont_t) + post, mem, alloc, c.next_tid + 1), rec

    r = _reduce_local(program, cont, top.env, t.lockset, c.memory, c.next_loc)
    new_top = Record(top.cls, top.method, r.cont, r.env)
    new_t = Thread((new_top,) + below, r.lockset, t.tid)
    path = par + (["push"] if below else []) + r.path
    rec = StepRecord(n, path[-1], tuple(path), hd, top.owner, t.tid, r.lock)
    return Config(pre + (new_t,) + post, r.mem, r.alloc, c.next_tid), rec


def step(program: Program, c: Config, n: int) -> tuple[Config, StepRecord]:
    """Fire thread ``n``; the caller guarantees ``n in enabled(program, c)``."""
    try:
        return try_step(program, c, n)
    except (Blocked, Stuck) as exc:
        raise ValueError(f"thread {n} is not enabled: {exc}") from None


def thread_status(program: Program, c: Config, n: int) -> str:
    """One of 'enabled', 'blocked', 'stuck', 'done'."""
    t = c.threads[n - 1]
    if not t.stack and len(c.threads) == 1:
        return "done"
    try:
        try_step(program, c, n)
    except Blocked:
        return "blocked"
    except Stuck:
        return "stuck"
    return "enabled"


def successors(program: Program, c: Config) -> Iterator[tuple[int, Config | Exception, StepRecord | None]]:
    """For every thread: (n, (post, record)) on success or (n, exception, None)."""
    for n in range(1, len(c.threads) + 1):
        try:
            post, rec = try_step(program, c, n)
        except (Blocked, Stuck) as exc:
            yield n, exc, None
        else:
            yield n, post, rec


def enabled(program: Program, c: Config) -> list[int]:
    return [n for n, post, _ in successors(program, c) if isinstance(post, Config)]


def is_terminated(c: Config) -> bool:
    return all(not t.stack for t in c.threads)


def locations(c: Config) -> Iterator[Location]:
    """Every location stored in an environment or object field of ``c``."""
    for t in c.threads:
        for r in t.stack:
            yield from r.env.values()
            for cmd in _locks_in(r.cont):
                yield cmd
    for obj in c.memory.values():
        yield from obj.fields.values()


def _locks_in(cmd: Command) -> Iterator[Location]:
    while isinstance(cmd, Seq):
        yield from _locks_in(cmd.first)
        cmd = cmd.rest
    if isinstance(cmd, (Lock, Unlock)):
        yield cmd.loc
    elif isinstance(cmd, Sync):
        yield from _locks_in(cmd.body)


def dangling(c: Config) -> set[Location]:
    return {loc for loc in locations(c) if loc not in c.memory}


def format_loc(loc: Location) -> str:
    return f"l{loc}"


def object_str(obj: Obj) -> str:
    fields = ",".join(f"{f}=l{v}" for f, v in sorted(obj.fields.items()))
    return f"{obj.cls}{{{fields}}}" + (f"#{obj.locks}" if obj.locks else "")

