"""Syntactic accesses and semantic dereferences of a single reduction step."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

from .semantics import Config, EvalError, FMap, Location, eval_expr
from .syntax import (
    AssignField,
    AssignVar,
    Call,
    Command,
    Decl,
    Expr,
    FieldAccess,
    Lock,
    New,
    Seq,
    Skip,
    Spawn,
    Sync,
    Unlock,
    Var,
)


class Mode(str, enum.Enum):
    READ = "->"
    WRITE = "<-"


@dataclass(frozen=True, slots=True, order=True)
class DerefToken:
    location: Location
    field: str
    mode: Mode

    def __str__(self) -> str:
        return f"l{self.location}.{self.field}{self.mode.value}"


def acc(c: Command | Expr) -> frozenset[Expr]:
    """Expressions accessed when ``c`` takes one step."""
    if isinstance(c, Var):
        return frozenset({c})
    if isinstance(c, FieldAccess):
        return acc(c.receiver) | {c}
    if isinstance(c, New):
        out: frozenset[Expr] = frozenset()
        for _, e in c.inits:
            out |= acc(e)
        return out
    if isinstance(c, Decl):
        return acc(c.expr)
    if isinstance(c, AssignVar):
        return acc(Var(c.var)) | acc(c.expr)
    if isinstance(c, AssignField):
        return acc(FieldAccess(Var(c.var), c.field)) | acc(c.expr)
    if isinstance(c, Seq):
        return acc(c.first)
    if isinstance(c, (Call, Spawn)):
        return acc(c.receiver)
    if isinstance(c, Sync):
        g = c.guard
        if isinstance(g, Var):
            return frozenset()
        if isinstance(g, FieldAccess):
            return acc(g.receiver)
        return acc(g)
    if isinstance(c, (Lock, Unlock, Skip)):
        return frozenset()
    raise TypeError(f"acc: unexpected {c!r}")


class DerefError(Exception):
    def __init__(self, expr: Expr, cause: EvalError):
        super().__init__(f"cannot dereference {expr}: {cause}")
        self.expr = expr
        self.cause = cause


def _deref_expr(e: Expr, env, mem: FMap, alloc: int) -> set[DerefToken]:
    if isinstance(e, Var):
        return set()
    if isinstance(e, FieldAccess):
        try:
            loc, _, _ = eval_expr(e.receiver, env, mem, alloc)
        except EvalError as exc:
            raise DerefError(e.receiver, exc) from None
        return {DerefToken(loc, e.field, Mode.READ)} | _deref_expr(e.receiver, env, mem, alloc)
    if isinstance(e, New):
        out: set[DerefToken] = set()
        for _, sub in e.inits:
            out |= _deref_expr(sub, env, mem, alloc)
        return out
    raise TypeError(f"deref: unexpected {e!r}")


def deref(c: Command | Expr, env: Mapping[str, Location], mem: FMap, alloc: int = 0) -> frozenset[DerefToken]:
    """Dereference tokens of one step of ``c``.

    Sub-evaluations run against the immutable ``mem``, so any allocation
    they perform is discarded. ``alloc`` should be the configuration's
    allocation counter so that fresh locations are named as the real step
    would name them.
    """
    if isinstance(c, (Var, FieldAccess, New)):
        return frozenset(_deref_expr(c, env, mem, alloc))
    if isinstance(c, (Decl, AssignVar)):
        return frozenset(_deref_expr(c.expr, env, mem, alloc))
    if isinstance(c, AssignField):
        if c.var not in env:
            raise DerefError(Var(c.var), EvalError("undefined-variable", Var(c.var)))
        return frozenset({DerefToken(env[c.var], c.field, Mode.WRITE)} | _deref_expr(c.expr, env, mem, alloc))
    if isinstance(c, Sync):
        return frozenset(_deref_expr(c.guard, env, mem, alloc))
    if isinstance(c, Seq):
        return deref(c.first, env, mem, alloc)
    if isinstance(c, (Call, Spawn)):
        return frozenset(_deref_expr(c.receiver, env, mem, alloc))
    if isinstance(c, (Lock, Unlock, Skip)):
        return frozenset()
    raise TypeError(f"deref: unexpected {c!r}")


def derefloc(c: Command | Expr, env: Mapping[str, Location], mem: FMap, alloc: int = 0) -> frozenset[Location]:
    return frozenset(t.location for t in deref(c, env, mem, alloc))


@dataclass(frozen=True, slots=True)
class StepEvents:
    accessed: frozenset[Expr]
    derefs: frozenset[DerefToken]
    locks_held: frozenset[Location]

    @property
    def deref_locations(self) -> frozenset[Location]:
        return frozenset(t.location for t in self.derefs)


NO_EVENTS = StepEvents(frozenset(), frozenset(), frozenset())


def events_of_step(pre: Config, n: int) -> StepEvents:
    """Accesses and dereferences of thread ``n``'s next step in ``pre``."""
    t = pre.thread(n)
    top = t.top
    if top is None:
        return StepEvents(frozenset(), frozenset(), t.lockset)
    return StepEvents(acc(top.cont), deref(top.cont, top.env, pre.memory, pre.next_loc), t.lockset)
