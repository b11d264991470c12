"""Command-line front end: ``guardedby run|check|races|infer|explore``.

Exit codes: 0 success or holds, 1 violation / race / empty inference /
invariant failure, 2 input error, 3 bound or state cap exhausted,
4 deadlock, 5 stuck.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .checkers import (
    SoundnessError,
    Status,
    check,
    detect_races,
    infer_guards,
    verify_race_freedom,
)
from .explorer import (
    DEFAULT_STATE_CAP,
    Exploration,
    Outcome,
    StateCapExceeded,
    explore,
    parse_scheduler,
    run_deterministic,
)
from .report import build_report, dumps, inference_doc, races_doc, trace_jsonl, trace_text, verdict_doc
from .syntax import (
    Decl,
    FieldTarget,
    ParseError,
    Program,
    Semantics,
    VarTarget,
    parse_annotations,
    parse_program,
    validate_program,
    walk_commands,
)

log = logging.getLogger("guardedby")

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_INPUT = 2
EXIT_BOUND = 3
EXIT_DEADLOCK = 4
EXIT_STUCK = 5

STATE_CAP_ENV = "GUARDEDBY_STATE_CAP"
RUN_EXIT = {
    Outcome.COMPLETED: EXIT_OK,
    Outcome.DEADLOCK: EXIT_DEADLOCK,
    Outcome.STUCK: EXIT_STUCK,
    Outcome.BOUND: EXIT_BOUND,
}


class InputError(Exception):
    pass


@dataclass
class Loaded:
    path: str
    text: str
    program: Program


def load_program(path: str) -> Loaded:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: cannot read: {exc.strerror or exc}") from None
    try:
        program = parse_program(text)
    except ParseError as exc:
        raise InputError(f"{path}:{exc}") from None
    report = validate_program(program)
    if not report.ok:
        lines = "\n".join(f"  {v}" for v in report.violations)
        raise InputError(f"{path}: invalid program\n{lines}")
    return Loaded(path, text, program)


def _state_cap(args) -> int:
    if args.state_cap is not None:
        return args.state_cap
    env = os.environ.get(STATE_CAP_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"{STATE_CAP_ENV}={env!r} is not an integer") from None
    return DEFAULT_STATE_CAP


def _explore(args, loaded: Loaded, **kw) -> Exploration:
    return explore(loaded.program, args.bound, dedup=args.dedup, state_cap=_state_cap(args), **kw)


def _emit(args, doc: dict, text: str) -> None:
    sys.stdout.write(dumps(doc) if args.format == "json" else text)


def _stats_line(x: Exploration) -> str:
    s = x.stats()
    tail = "complete" if s["complete"] else f"bound {x.bound} reached on {s['bound_exhausted']} branch(es)"
    return (
        f"explored {s['states']} states, {s['transitions']} transitions, "
        f"{s['completed_traces']} completed trace(s); {tail}\n"
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    loaded = load_program(args.program)
    trace = run_deterministic(loaded.program, args.scheduler, args.bound)
    sys.stdout.write(trace_jsonl(trace) if args.format == "json" else trace_text(trace))
    return RUN_EXIT[trace.outcome]


def cmd_check(args) -> int:
    loaded = load_program(args.program)
    try:
        annotations = parse_annotations(Path(args.annotations).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"{args.annotations}: cannot read: {exc.strerror or exc}") from None
    except ParseError as exc:
        raise InputError(f"{args.annotations}:{exc}") from None
    x = _explore(args, loaded)
    verdicts = [(a, check(x, a)) for a in annotations]
    theorems = []
    soundness: list[str] = []
    if args.theorems:
        for a in annotations:
            try:
                theorems.append(verify_race_freedom(loaded.program, a, args.bound, exploration=x))
            except SoundnessError as exc:
                soundness.append(str(exc))
    statuses = {v.status for _, v in verdicts}
    if Status.VIOLATED in statuses or soundness:
        code = EXIT_VIOLATION
    elif Status.HOLDS_UP_TO_BOUND in statuses:
        code = EXIT_BOUND
    else:
        code = EXIT_OK
    n_bad = sum(v.status is Status.VIOLATED for _, v in verdicts)
    summary = f"{len(verdicts)} annotation(s), {n_bad} violated"
    if soundness:
        summary += f"; {len(soundness)} soundness failure(s)"
    doc = build_report(
        command="check",
        program_path=loaded.path,
        program_text=loaded.text,
        exit_code=code,
        summary=summary,
        exploration=x,
        verdicts=[verdict_doc(v, str(a)) for a, v in verdicts],
        theorems=theorems,
    )
    lines = [_stats_line(x)]
    for a, v in verdicts:
        lines.append(f"{v.status.value:<18} {a}\n")
        cx = v.counterexample
        if cx is not None:
            lines.append(f"    step {cx.step} of schedule {','.join(map(str, cx.schedule))}\n")
            lines.append(f"    {cx.explanation}\n")
    for t in theorems:
        lines.append(f"theorem ({t.theorem}) {t.annotation}: hypotheses {doc_hyp(t)}, conclusion {t.conclusion}\n")
        for d in t.wellformed.diagnostics:
            lines.append(f"    {d}\n")
    for s in soundness:
        lines.append(f"SOUNDNESS FAILURE: {s}\n")
    lines.append(summary + "\n")
    _emit(args, doc, "".join(lines))
    return code


def doc_hyp(t) -> str:
    return t.hypotheses.value if t.hypotheses is not None else "ill-formed"


def cmd_races(args) -> int:
    loaded = load_program(args.program)
    x = _explore(args, loaded)
    r = detect_races(x)
    code = EXIT_VIOLATION if r else (EXIT_OK if x.complete else EXIT_BOUND)
    summary = f"{len(r.sites)} racy site(s)" if r else "no races"
    doc = build_report(
        command="races",
        program_path=loaded.path,
        program_text=loaded.text,
        exit_code=code,
        summary=summary,
        exploration=x,
        races=r,
    )
    lines = [_stats_line(x)]
    for site in races_doc(r)["sites"]:
        a, b = site["threads"]
        lines.append(
            f"race at {site['location']}.{site['field']}: thread {a} {site['modes'][0]}s, thread {b} "
            f"{site['modes'][1]}s after schedule {','.join(map(str, site['schedule'])) or '(start)'}\n"
        )
    lines.append(summary + "\n")
    _emit(args, doc, "".join(lines))
    return code


def _resolve_target(p: Program, kind: str, name: str):
    if kind == "field":
        if name not in p.field_names():
            raise InputError(f"unknown field {name!r}")
        return FieldTarget(name)
    parts = name.split(".")
    if len(parts) != 3:
        raise InputError(f"variable target must be CLASS.METHOD.VAR, got {name!r}")
    cls, meth, var = parts
    cd = p.class_def(cls)
    if cd is None or meth not in cd.methods:
        raise InputError(f"unknown method {cls}.{meth}")
    if not any(isinstance(c, Decl) and c.var == var for c in walk_commands(cd.methods[meth])):
        raise InputError(f"{cls}.{meth} declares no variable {var!r}")
    return VarTarget(cls, meth, var)


def cmd_infer(args) -> int:
    loaded = load_program(args.program)
    target = _resolve_target(loaded.program, args.kind, args.name)
    sem = Semantics(args.semantics)
    x = _explore(args, loaded)
    inf = infer_guards(x, target, sem)
    if not inf.guards:
        code = EXIT_VIOLATION
    else:
        code = EXIT_OK if x.complete else EXIT_BOUND
    summary = f"{len(inf.guards)} guard(s) inferred" + (" (vacuously)" if inf.vacuous else "")
    doc = build_report(
        command="infer",
        program_path=loaded.path,
        program_text=loaded.text,
        exit_code=code,
        summary=summary,
        exploration=x,
        inference=inference_doc(str(target), sem.value, inf),
    )
    text = _stats_line(x) + "".join(f"{g}\n" for g in inf.guards) + summary + "\n"
    _emit(args, doc, text)
    return code


def cmd_explore(args) -> int:
    loaded = load_program(args.program)
    x = _explore(args, loaded, check_invariants=True)
    s = x.stats()
    if x.violations:
        code = EXIT_VIOLATION
    elif s["stuck"]:
        code = EXIT_STUCK
    elif s["deadlocks"]:
        code = EXIT_DEADLOCK
    elif s["bound_exhausted"]:
        code = EXIT_BOUND
    else:
        code = EXIT_OK
    summary = (
        f"{s['completed_leaves']} completed, {s['deadlocks']} deadlocked, {s['stuck']} stuck, "
        f"{s['bound_exhausted']} bound-exhausted end state(s); {len(x.violations)} invariant violation(s)"
    )
    doc = build_report(
        command="explore",
        program_path=loaded.path,
        program_text=loaded.text,
        exit_code=code,
        summary=summary,
        exploration=x,
    )
    text = _stats_line(x) + "".join(f"invariant violated: {v}\n" for v in x.violations) + summary + "\n"
    _emit(args, doc, text)
    return code


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _positive(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return n


def _scheduler(text: str):
    try:
        return parse_scheduler(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "json"), default="text", help="output format (default: text)")
    common.add_argument("--bound", type=_positive, default=10_000, help="maximum micro-steps per trace (default: 10000)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    explorer = argparse.ArgumentParser(add_help=False)
    explorer.add_argument(
        "--state-cap",
        type=_positive,
        default=None,
        help=f"maximum configurations to visit (default: ${STATE_CAP_ENV} or {DEFAULT_STATE_CAP})",
    )
    explorer.add_argument("--dedup", action="store_true", help="merge identical configurations into a state graph")

    parser = argparse.ArgumentParser(prog="guardedby", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="execute one schedule and dump its trace")
    p.add_argument("program")
    p.add_argument(
        "--scheduler", type=_scheduler, default="leftmost", help="leftmost, roundrobin or seed:N (default: leftmost)"
    )
    p.add_argument("--max-steps", dest="bound", type=_positive, default=argparse.SUPPRESS, help="alias for --bound")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", parents=[common, explorer], help="check the annotations of a sidecar file")
    p.add_argument("program")
    p.add_argument("annotations")
    p.add_argument("--theorems", action="store_true", help="also run the race-freedom harness per annotation")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("races", parents=[common, explorer], help="report data races over all schedules")
    p.add_argument("program")
    p.set_defaults(func=cmd_races)

    p = sub.add_parser("infer", parents=[common, explorer], help="infer guards for a field or variable")
    p.add_argument("program")
    p.add_argument("kind", choices=("field", "var"))
    p.add_argument("name", help="field name, or CLASS.METHOD.VAR for a variable")
    p.add_argument("--semantics", choices=("name", "value"), default="name")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("explore", parents=[common, explorer], help="explore all schedules and check lock invariants")
    p.add_argument("program")
    p.set_defaults(func=cmd_explore)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"guardedby: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StateCapExceeded as exc:
        print(f"guardedby: {exc}; raise --state-cap or use --dedup", file=sys.stderr)
        return EXIT_BOUND


if __name__ == "__main__":
    sys.exit(main())
