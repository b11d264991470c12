"""Abstract syntax, concrete grammar, static validation and method lookup.

Concrete grammar of ``.gbc`` program files::

    program  ::= (class | main)*
    class    ::= 'class' ID ['extends' ID] '{' method* '}'
    method   ::= 'method' ID '(' ')' '{' body '}'
    main     ::= 'main' '{' body '}'
    body     ::= stmt*
    stmt     ::= 'decl' ID '=' expr ';'
               | ID ':=' expr ';'
               | ID '.' ID ':=' expr ';'
               | expr '.' ID '(' ')' ';'
               | 'spawn' expr '.' ID '(' ')' ';'
               | 'sync' '(' expr ')' '{' body '}' [';']
               | 'skip' ';'
    expr     ::= atom ('.' ID)*
    atom     ::= ID | 'this' | 'new' ID ['{' [ID '=' expr (',' ID '=' expr)*] '}']

``//`` starts a comment running to the end of the line.

Annotation sidecar files (``.gba``) hold one annotation per line::

    guard (name|value) field F by EXPR
    guard (name|value) var CLASS.METHOD.VAR by EXPR

Guard expressions may use the reserved names ``this`` and ``itself``.
"""

from __future__ import annotations

import enum
import operator
import re
from dataclasses import dataclass, field
from typing import Iterator, Union

THIS = "this"
ITSELF = "itself"
OBJECT = "Object"
MAIN_CLASS = "main"
MAIN_METHOD = "main"

RESERVED = frozenset(
    {"this", "itself", "sync", "spawn", "decl", "skip", "new", "class", "method", "extends", "main"}
)


def _cached_hash(*names: str):
    """A ``__hash__`` over ``names`` that is computed once per instance.

    Configurations are hashed repeatedly while exploring, and continuations
    share long command tails, so caching keeps each hash O(1) after the first.
    """

    key = operator.attrgetter(*names, "__class__")
    setter = object.__setattr__

    def __hash__(self) -> int:
        h = self._hash
        if h is None:
            h = hash(key(self))
            setter(self, "_hash", h)
        return h

    return __hash__


def _hash_slot():
    return field(default=None, init=False, repr=False, compare=False)


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Var:
    name: str
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("name")

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True, slots=True)
class FieldAccess:
    receiver: Expr
    field: str
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("receiver", "field")

    def __str__(self) -> str:
        return f"{self.receiver}.{self.field}"


@dataclass(frozen=True, slots=True)
class New:
    cls: str
    inits: tuple[tuple[str, Expr], ...] = ()
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("cls", "inits")

    def __str__(self) -> str:
        if not self.inits:
            return f"new {self.cls} {{}}"
        body = ", ".join(f"{f} = {e}" for f, e in self.inits)
        return f"new {self.cls} {{ {body} }}"


Expr = Union[Var, FieldAccess, New]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Skip:
    def __str__(self) -> str:
        return "skip"


@dataclass(frozen=True, slots=True)
class Decl:
    var: str
    expr: Expr
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("var", "expr")

    def __str__(self) -> str:
        return f"decl {self.var} = {self.expr}"


@dataclass(frozen=True, slots=True)
class AssignVar:
    var: str
    expr: Expr
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("var", "expr")

    def __str__(self) -> str:
        return f"{self.var} := {self.expr}"


@dataclass(frozen=True, slots=True)
class AssignField:
    var: str
    field: str
    expr: Expr
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("var", "field", "expr")

    def __str__(self) -> str:
        return f"{self.var}.{self.field} := {self.expr}"


@dataclass(frozen=True, slots=True)
class Call:
    receiver: Expr
    method: str
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("receiver", "method")

    def __str__(self) -> str:
        return f"{self.receiver}.{self.method}()"


@dataclass(frozen=True, slots=True)
class Spawn:
    receiver: Expr
    method: str
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("receiver", "method")

    def __str__(self) -> str:
        return f"spawn {self.receiver}.{self.method}()"


@dataclass(frozen=True, slots=True)
class Sync:
    guard: Expr
    body: Command
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("guard", "body")

    def __str__(self) -> str:
        return f"sync ({self.guard}) {{ {self.body} }}"


@dataclass(frozen=True, slots=True)
class Lock:
    loc: int
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("loc")

    def __str__(self) -> str:
        return f"lock(l{self.loc})"


@dataclass(frozen=True, slots=True)
class Unlock:
    loc: int
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("loc")

    def __str__(self) -> str:
        return f"unlock(l{self.loc})"


@dataclass(frozen=True, slots=True)
class Seq:
    first: Command
    rest: Command
    _hash: int | None = _hash_slot()

    __hash__ = _cached_hash("first", "rest")

    def __str__(self) -> str:
        return f"{self.first}; {self.rest}"


Command = Union[Skip, Decl, AssignVar, AssignField, Call, Spawn, Sync, Lock, Unlock, Seq]

SKIP = Skip()


def seq(*cmds: Command) -> Command:
    """Right-associated sequence of ``cmds``; nested sequences are spliced."""
    if not cmds:
        return SKIP
    out = cmds[-1]
    for c in reversed(cmds[:-1]):
        out = concat(c, out)
    return out


def concat(c1: Command, c2: Command) -> Command:
    """``c1; c2`` keeping the first component of every Seq atomic."""
    if isinstance(c1, Seq):
        return Seq(c1.first, concat(c1.rest, c2))
    return Seq(c1, c2)


def head(c: Command) -> Command:
    while isinstance(c, Seq):
        c = c.first
    return c


def commands(c: Command) -> Iterator[Command]:
    """Top-level commands of a sequence, in order."""
    while isinstance(c, Seq):
        yield from commands(c.first)
        c = c.rest
    yield c


def method_body(*cmds: Command) -> Command:
    """A B-form body: ``cmds`` followed by the terminating skip."""
    return seq(*cmds, SKIP)


# ---------------------------------------------------------------------------
# Programs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassDef:
    name: str
    parent: str | None
    methods: dict[str, Command]


@dataclass(frozen=True)
class Program:
    classes: dict[str, ClassDef]
    main: Command | None

    def class_def(self, name: str) -> ClassDef | None:
        if name == MAIN_CLASS and self.main is not None:
            return ClassDef(MAIN_CLASS, OBJECT, {MAIN_METHOD: self.main})
        if name == OBJECT:
            return self.classes.get(OBJECT, ClassDef(OBJECT, None, {}))
        return self.classes.get(name)

    def has_class(self, name: str) -> bool:
        return self.class_def(name) is not None

    def method_bodies(self) -> Iterator[tuple[str, str, Command]]:
        if self.main is not None:
            yield MAIN_CLASS, MAIN_METHOD, self.main
        for cls in self.classes.values():
            for m, body in cls.methods.items():
                yield cls.name, m, body

    def field_names(self) -> set[str]:
        names: set[str] = set()
        for _, _, body in self.method_bodies():
            for c in walk_commands(body):
                if isinstance(c, AssignField):
                    names.add(c.field)
                for e in command_exprs(c):
                    for sub in walk_expr(e):
                        if isinstance(sub, FieldAccess):
                            names.add(sub.field)
                        elif isinstance(sub, New):
                            names.update(f for f, _ in sub.inits)
        return names


def superchain(p: Program, cls: str) -> list[str]:
    """The chain of classes from ``cls`` up to the root, inclusive."""
    chain = []
    seen = set()
    cur: str | None = cls
    while cur is not None:
        if cur in seen:
            raise ValueError(f"cyclic inheritance through {cur}")
        seen.add(cur)
        cd = p.class_def(cur)
        if cd is None:
            raise KeyError(cur)
        chain.append(cur)
        cur = cd.parent
    return chain


def lookup(p: Program, cls: str, method: str) -> str | None:
    """Nearest class in the superclass chain of ``cls`` implementing ``method``."""
    for k in superchain(p, cls):
        if method in p.class_def(k).methods:
            return k
    return None


# ---------------------------------------------------------------------------
# Traversals
# ---------------------------------------------------------------------------


def walk_expr(e: Expr) -> Iterator[Expr]:
    yield e
    if isinstance(e, FieldAccess):
        yield from walk_expr(e.receiver)
    elif isinstance(e, New):
        for _, sub in e.inits:
            yield from walk_expr(sub)


def free_names(e: Expr) -> set[str]:
    return {sub.name for sub in walk_expr(e) if isinstance(sub, Var)}


def walk_commands(c: Command) -> Iterator[Command]:
    yield c
    if isinstance(c, Seq):
        yield from walk_commands(c.first)
        yield from walk_commands(c.rest)
    elif isinstance(c, Sync):
        yield from walk_commands(c.body)


def command_exprs(c: Command) -> tuple[Expr, ...]:
    if isinstance(c, (Decl, AssignVar, AssignField)):
        return (c.expr,)
    if isinstance(c, (Call, Spawn)):
        return (c.receiver,)
    if isinstance(c, Sync):
        return (c.guard,)
    return ()


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------


class Semantics(str, enum.Enum):
    NAME = "name"
    VALUE = "value"


@dataclass(frozen=True, slots=True)
class FieldTarget:
    field: str

    def __str__(self) -> str:
        return f"field {self.field}"


@dataclass(frozen=True, slots=True)
class VarTarget:
    cls: str
    method: str
    var: str

    def __str__(self) -> str:
        return f"var {self.cls}.{self.method}.{self.var}"


Target = Union[FieldTarget, VarTarget]


@dataclass(frozen=True, slots=True)
class Annotation:
    target: Target
    guard: Expr
    semantics: Semantics

    def __str__(self) -> str:
        return f"guard {self.semantics.value} {self.target} by {self.guard}"


# ---------------------------------------------------------------------------
# Lexer / parser
# ---------------------------------------------------------------------------


class ParseError(Exception):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>//[^\n]*)
  | (?P<id>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>:=|[{}();.,=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True, slots=True)
class Token:
    kind: str  # 'id', 'op' or 'eof'
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind in ("id", "op"):
            tokens.append(Token(kind, m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def error(self, msg: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.tok
        return ParseError(msg, tok.line, tok.col)

    def at(self, text: str) -> bool:
        return self.tok.text == text and self.tok.kind != "eof"

    def expect(self, text: str) -> Token:
        if not self.at(text):
            found = self.tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {found!r}")
        return self.advance()

    def advance(self) -> Token:
        tok = self.tok
        self.i += 1
        return tok

    def ident(self, what: str = "identifier") -> str:
        tok = self.tok
        if tok.kind != "id":
            raise self.error(f"expected {what}, found {tok.text or 'end of input'!r}")
        if tok.text in RESERVED:
            raise self.error(f"reserved word {tok.text!r} used as {what}")
        self.advance()
        return tok.text

    # -- program ----------------------------------------------------------

    def program(self) -> Program:
        classes: dict[str, ClassDef] = {}
        main: Command | None = None
        while self.tok.kind != "eof":
            if self.at("class"):
                start = self.tok
                cd = self.class_def()
                if cd.name in classes or cd.name == OBJECT:
                    raise self.error(f"duplicate class {cd.name!r}", start)
                classes[cd.name] = cd
            elif self.at("main"):
                start = self.advance()
                if main is not None:
                    raise self.error("duplicate main block", start)
                main = self.block_body()
            else:
                raise self.error(f"expected 'class' or 'main', found {self.tok.text!r}")
        return Program(classes, main)

    def class_def(self) -> ClassDef:
        self.expect("class")
        name = self.ident("class name")
        parent = OBJECT
        if self.at("extends"):
            self.advance()
            tok = self.tok
            parent = self.ident("class name") if tok.text != OBJECT else self.advance().text
        self.expect("{")
        methods: dict[str, Command] = {}
        while not self.at("}"):
            start = self.expect("method")
            mname = self.ident("method name")
            if mname in methods:
                raise self.error(f"duplicate method {name}.{mname}", start)
            self.expect("(")
            self.expect(")")
            methods[mname] = self.block_body()
        self.expect("}")
        return ClassDef(name, parent, methods)

    def block_body(self) -> Command:
        return method_body(*self.block())

    def block(self) -> list[Command]:
        self.expect("{")
        stmts = []
        while not self.at("}"):
            if self.tok.kind == "eof":
                raise self.error("unterminated block")
            stmts.append(self.stmt())
        self.expect("}")
        return stmts

    # -- statements -------------------------------------------------------

    def stmt(self) -> Command:
        if self.at("decl"):
            self.advance()
            name = self.ident("variable name")
            self.expect("=")
            e = self.expr()
            self.expect(";")
            return Decl(name, e)
        if self.at("skip"):
            self.advance()
            self.expect(";")
            return SKIP
        if self.at("spawn"):
            self.advance()
            recv, m = self.call_target()
            self.expect(";")
            return Spawn(recv, m)
        if self.at("sync"):
            self.advance()
            self.expect("(")
            g = self.expr()
            self.expect(")")
            body = seq(*self.block())
            if self.at(";"):
                self.advance()
            return Sync(g, body)
        if self.tok.kind == "id" and self.peek().text == ":=":
            name = self.ident("variable name")
            self.advance()
            e = self.expr()
            self.expect(";")
            return AssignVar(name, e)
        start = self.tok
        e = self.expr()
        if self.at(":="):
            if not (isinstance(e, FieldAccess) and isinstance(e.receiver, Var)):
                raise self.error("field assignment needs the form x.f := E", start)
            self.advance()
            rhs = self.expr()
            self.expect(";")
            return AssignField(e.receiver.name, e.field, rhs)
        if self.at(".") and self.peek(2).text == "(":
            self.advance()
            m = self.ident("method name")
            self.expect("(")
            self.expect(")")
            self.expect(";")
            return Call(e, m)
        raise self.error("expected a statement", start)

    def call_target(self) -> tuple[Expr, str]:
        e = self.expr()
        self.expect(".")
        m = self.ident("method name")
        self.expect("(")
        self.expect(")")
        return e, m

    # -- expressions ------------------------------------------------------

    def expr(self, allow_guard_names: bool = False) -> Expr:
        e = self.atom(allow_guard_names)
        while self.at(".") and self.peek(2).text != "(":
            self.advance()
            e = FieldAccess(e, self.ident("field name"))
        return e

    def atom(self, allow_guard_names: bool) -> Expr:
        tok = self.tok
        if tok.text == "this":
            self.advance()
            return Var(THIS)
        if tok.text == "itself":
            if not allow_guard_names:
                raise self.error("'itself' may only appear in guard expressions")
            self.advance()
            return Var(ITSELF)
        if tok.text == "new":
            self.advance()
            cls = self.tok.text if self.tok.text == OBJECT else None
            if cls:
                self.advance()
            else:
                cls = self.ident("class name")
            inits: list[tuple[str, Expr]] = []
            if self.at("{"):
                self.advance()
                while not self.at("}"):
                    ftok = self.tok
                    f = self.ident("field name")
                    if any(f == g for g, _ in inits):
                        raise self.error(f"field {f!r} initialised twice", ftok)
                    self.expect("=")
                    inits.append((f, self.expr(allow_guard_names)))
                    if not self.at("}"):
                        self.expect(",")
                self.expect("}")
            return New(cls, tuple(inits))
        return Var(self.ident("expression"))


def parse_program(text: str) -> Program:
    return _Parser(text).program()


def parse_expr(text: str, guard: bool = True) -> Expr:
    """Parse a standalone expression; ``guard`` admits ``itself``."""
    p = _Parser(text)
    e = p.expr(allow_guard_names=guard)
    if p.tok.kind != "eof":
        raise p.error(f"trailing input {p.tok.text!r}")
    return e


_ANNOT_RE = re.compile(
    r"^guard\s+(?P<sem>name|value)\s+"
    r"(?:field\s+(?P<field>[A-Za-z_]\w*)|var\s+(?P<cls>[A-Za-z_]\w*)\.(?P<meth>[A-Za-z_]\w*)\.(?P<var>[A-Za-z_]\w*))"
    r"\s+by\s+(?P<guard>.+?)\s*$"
)


def parse_annotations(text: str) -> list[Annotation]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("//", 1)[0].strip()
        if not line:
            continue
        m = _ANNOT_RE.match(line)
        if m is None:
            raise ParseError("malformed annotation", lineno, 1)
        try:
            g = parse_expr(m["guard"])
        except ParseError as exc:
            raise ParseError(exc.message, lineno, m.start("guard") + exc.col) from None
        if m["field"]:
            target: Target = FieldTarget(m["field"])
        else:
            target = VarTarget(m["cls"], m["meth"], m["var"])
        out.append(Annotation(target, g, Semantics(m["sem"])))
    return out


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------


def _print_block(body: Command, indent: int, strip_skip: bool) -> list[str]:
    cmds = list(commands(body))
    if strip_skip and cmds and isinstance(cmds[-1], Skip):
        cmds = cmds[:-1]
    pad = "  " * indent
    lines = []
    for c in cmds:
        if isinstance(c, Sync):
            lines.append(f"{pad}sync ({c.guard}) {{")
            lines.extend(_print_block(c.body, indent + 1, strip_skip=False))
            lines.append(f"{pad}}}")
        else:
            lines.append(f"{pad}{c};")
    return lines


def print_program(p: Program) -> str:
    """Concrete syntax for ``p``; ``parse_program`` inverts it."""
    lines = []
    for cd in p.classes.values():
        ext = f" extends {cd.parent}" if cd.parent not in (None, OBJECT) else ""
        lines.append(f"class {cd.name}{ext} {{")
        for m, body in cd.methods.items():
            lines.append(f"  method {m}() {{")
            lines.extend(_print_block(body, 2, strip_skip=True))
            lines.append("  }")
        lines.append("}")
    if p.main is not None:
        lines.append("main {")
        lines.extend(_print_block(p.main, 1, strip_skip=True))
        lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    where: str
    detail: str

    def __str__(self) -> str:
        return f"{self.where}: {self.kind}: {self.detail}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def _check_body(where: str, body: Command, p: Program, out: list[Violation]) -> None:
    declared = {THIS}

    def use(e: Expr) -> None:
        for sub in walk_expr(e):
            if isinstance(sub, Var) and sub.name not in declared:
                out.append(Violation("free-variable", where, f"{sub.name} used before declaration"))
            if isinstance(sub, New) and not p.has_class(sub.cls):
                out.append(Violation("unknown-class", where, f"new {sub.cls}"))

    def visit(c: Command) -> None:
        if isinstance(c, Seq):
            visit(c.first)
            visit(c.rest)
        elif isinstance(c, Decl):
            use(c.expr)
            if c.var in declared:
                out.append(Violation("duplicate-declaration", where, f"{c.var} declared twice"))
            declared.add(c.var)
        elif isinstance(c, AssignVar):
            use(c.expr)
            if c.var not in declared:
                out.append(Violation("free-variable", where, f"{c.var} assigned before declaration"))
        elif isinstance(c, AssignField):
            use(c.expr)
            if c.var not in declared:
                out.append(Violation("free-variable", where, f"{c.var} used before declaration"))
        elif isinstance(c, (Call, Spawn)):
            use(c.receiver)
        elif isinstance(c, Sync):
            use(c.guard)
            visit(c.body)
        elif isinstance(c, (Lock, Unlock)):
            out.append(Violation("lock-in-source", where, str(c)))

    visit(body)
    last = list(commands(body))[-1]
    if not isinstance(last, Skip):
        out.append(Violation("not-skip-terminated", where, "body must end with skip"))


def validate_program(p: Program) -> ValidationReport:
    out: list[Violation] = []
    if p.main is None:
        out.append(Violation("missing-main", "program", "no main block"))
    for cd in p.classes.values():
        if cd.parent is not None and not p.has_class(cd.parent):
            out.append(Violation("unknown-parent", cd.name, f"extends unknown class {cd.parent}"))
            continue
        try:
            superchain(p, cd.name)
        except ValueError as exc:
            out.append(Violation("cyclic-inheritance", cd.name, str(exc)))
        except KeyError:
            pass
    for cls, m, body in p.method_bodies():
        _check_body(f"{cls}.{m}", body, p, out)
    return ValidationReport(out)
