"""Random generator of small, statically valid programs.

Programs have at most three classes, at most two spawns and method bodies of
at most three statements (counting those nested in ``sync`` blocks). Names are drawn from small pools so that aliasing,
shared fields and nested synchronization are common.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from guardedby.syntax import (
    Annotation,
    FieldTarget,
    Semantics,
    VarTarget,
    parse_expr,
    parse_program,
    validate_program,
)

FIELDS = ("f", "g", "h")


@dataclass
class Generated:
    source: str
    annotations: list[Annotation]


class _Gen:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.classes = [f"C{i}" for i in range(rng.randint(1, 3))]
        self.methods = {c: [f"m{j}" for j in range(rng.randint(1, 2))] for c in self.classes}

    def pick(self, xs):
        return self.rng.choice(list(xs))

    def expr(self, scope: list[str], depth: int = 0) -> str:
        r = self.rng.random()
        if r < 0.35 or depth > 1:
            return self.pick(scope)
        if r < 0.7:
            return f"{self.pick(scope)}.{self.pick(FIELDS)}"
        if r < 0.85:
            return "new Object"
        cls = self.pick(self.classes)
        f = self.pick(FIELDS)
        return f"new {cls} {{ {f} = {self.expr(scope, depth + 1)} }}"

    def stmt(self, scope: list[str], fresh, budget: list[int], in_method: bool, depth: int = 0) -> list[str]:
        budget[0] -= 1
        r = self.rng.random()
        if r < 0.25:
            v = fresh()
            line = f"decl {v} = {self.expr(scope)};"
            scope.append(v)
            return [line]
        if r < 0.5:
            return [f"{self.pick(scope)}.{self.pick(FIELDS)} := {self.expr(scope)};"]
        if r < 0.6 and len(scope) > 1:
            v = self.pick([s for s in scope if s != "this"])
            return [f"{v} := {self.expr(scope)};"]
        if r < 0.8 and depth < 2 and budget[0] > 0:
            inner: list[str] = []
            for _ in range(self.rng.randint(1, 2)):
                if budget[0] <= 0:
                    break
                inner += self.stmt(scope, fresh, budget, in_method, depth + 1)
            guard = self.pick(scope) if self.rng.random() < 0.6 else f"{self.pick(scope)}.{self.pick(FIELDS)}"
            return [f"sync ({guard}) {{ {' '.join(inner) or 'skip;'} }}"]
        if r < 0.9 and in_method:
            cls = self.pick(self.classes)
            return [f"{self.pick(scope)}.{self.pick(self.methods[cls])}();"]
        return [f"{self.pick(scope)}.{self.pick(FIELDS)} := {self.pick(scope)};"]

    def body(self, params: list[str], in_method: bool) -> tuple[str, list[str]]:
        scope = list(params)
        counter = iter(range(100))
        fresh = lambda: f"v{next(counter)}"  # noqa: E731
        budget = [self.rng.randint(1, 3)]
        lines: list[str] = []
        while budget[0] > 0:
            lines += self.stmt(scope, fresh, budget, in_method)
        return " ".join(lines), scope

    def program(self) -> tuple[str, list[tuple[str, str, str]]]:
        out = []
        decls: list[tuple[str, str, str]] = []
        for c in self.classes:
            ms = []
            for m in self.methods[c]:
                body, scope = self.body(["this"], True)
                decls += [(c, m, v) for v in scope if v != "this"]
                ms.append(f"  method {m}() {{ {body} }}")
            out.append(f"class {c} {{\n" + "\n".join(ms) + "\n}")
        main = []
        objs = []
        for i in range(self.rng.randint(1, 2)):
            cls = self.pick(self.classes)
            inits = ", ".join(f"{f} = new Object" for f in self.rng.sample(FIELDS, self.rng.randint(1, 3)))
            main.append(f"decl o{i} = new {cls} {{ {inits} }};")
            objs.append((f"o{i}", cls))
        if len(objs) > 1 and self.rng.random() < 0.5:
            main.append(f"o1.{self.pick(FIELDS)} := o0;")
        for _ in range(self.rng.randint(0, 2)):
            o, cls = self.pick(objs)
            main.append(f"spawn {o}.{self.pick(self.methods[cls])}();")
        o, cls = self.pick(objs)
        main.append(f"{o}.{self.pick(self.methods[cls])}();")
        out.append("main { " + " ".join(main) + " }")
        return "\n".join(out) + "\n", decls


def generate(seed: int) -> Generated:
    """A valid program and a set of candidate annotations for it."""
    rng = random.Random(seed)
    while True:
        g = _Gen(rng)
        src, decls = g.program()
        p = parse_program(src)
        if validate_program(p).ok:
            break
    anns: list[Annotation] = []
    for f in sorted(p.field_names()):
        anns.append(Annotation(FieldTarget(f), parse_expr("itself"), Semantics.VALUE))
        anns.append(Annotation(FieldTarget(f), parse_expr("itself"), Semantics.NAME))
        anns.append(Annotation(FieldTarget(f), parse_expr(f"this.{rng.choice(FIELDS)}"), Semantics.NAME))
    for c, m, v in decls[:3]:
        anns.append(Annotation(VarTarget(c, m, v), parse_expr("itself"), Semantics.VALUE))
        anns.append(Annotation(VarTarget(c, m, v), parse_expr("itself"), Semantics.NAME))
    return Generated(src, anns)
