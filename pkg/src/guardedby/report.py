"""Trace dumps and versioned JSON reports.

The text trace format and the report schema are described in
``docs/trace-format.md`` and ``docs/report-schema.md``.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

from . import __version__
from .checkers import Inference, RaceReport, TheoremReport, Verdict, Violation
from .explorer import Exploration, Trace
from .semantics import Config, object_str

TRACE_VERSION = "v1"
REPORT_SCHEMA = "guardedby.report/v1"
TRACE_SCHEMA = "guardedby.trace/v1"


def _locs(locs) -> list[str]:
    return [f"l{x}" for x in sorted(locs)]


def memory_delta(pre: Config, post: Config) -> list[str]:
    """Changes from ``pre.memory`` to ``post.memory``, sorted by location.

    ``+lN:Cls{...}`` is a new object, ``lN.f=lM`` a field write and
    ``lN#k`` a lock counter that changed to ``k``.
    """
    out: list[str] = []
    for loc in sorted(post.memory):
        new = post.memory[loc]
        old = pre.memory.get(loc)
        if old is None:
            out.append(f"+l{loc}:{object_str(new)}")
            continue
        for f in sorted(new.fields):
            if old.fields.get(f) != new.fields[f]:
                out.append(f"l{loc}.{f}=l{new.fields[f]}")
        if old.locks != new.locks:
            out.append(f"l{loc}#{new.locks}")
    return out


def _posts(trace: Trace) -> list[Config]:
    return [s.pre for s in trace.steps[1:]] + [trace.final]


def trace_text(trace: Trace) -> str:
    lines = [f"# trace {TRACE_VERSION}"]
    for i, (s, post) in enumerate(zip(trace.steps, _posts(trace))):
        rec = s.record
        lockset = _firing_lockset(post, rec)
        acc = ",".join(sorted(str(e) for e in s.events.accessed))
        deref = ",".join(str(t) for t in sorted(s.events.derefs))
        delta = " ".join(memory_delta(s.pre, post)) or "-"
        lines.append(
            f"{i:04d}\tt{rec.thread}\t{rec.rule}\t{rec.head}\tL={{{','.join(_locs(lockset))}}}"
            f"\tacc={{{acc}}}\tderef={{{deref}}}\tΔ={delta}"
        )
    tail = f"# outcome {trace.outcome.value} after {len(trace.steps)} steps"
    if trace.diagnostic:
        tail += f": {trace.diagnostic}"
    lines.append(tail)
    return "\n".join(lines) + "\n"


def _same_thread(post: Config, rec) -> bool:
    """Does the firing thread still sit at its position in ``post``?"""
    if rec.rule in ("end-l", "end-r"):
        return False
    n = rec.thread + 1 if rec.rule == "spawn" else rec.thread
    return n <= len(post.threads)


def _firing_lockset(post: Config, rec) -> frozenset:
    if not _same_thread(post, rec):
        return frozenset()
    n = rec.thread + 1 if rec.rule == "spawn" else rec.thread
    return post.thread(n).lockset


def trace_jsonl(trace: Trace) -> str:
    rows: list[dict[str, Any]] = [{"format": TRACE_SCHEMA}]
    for i, (s, post) in enumerate(zip(trace.steps, _posts(trace))):
        rec = s.record
        rows.append(
            {
                "step": i,
                "thread": rec.thread,
                "tid": rec.tid,
                "rule": rec.rule,
                "derivation": list(rec.derivation),
                "head": rec.head,
                "lockset": _locs(_firing_lockset(post, rec)),
                "acc": sorted(str(e) for e in s.events.accessed),
                "deref": [str(t) for t in sorted(s.events.derefs)],
                "delta": memory_delta(s.pre, post),
            }
        )
    rows.append({"outcome": trace.outcome.value, "steps": len(trace.steps), "diagnostic": trace.diagnostic})
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows)


# ---------------------------------------------------------------------------
# Report documents
# ---------------------------------------------------------------------------


def digest(text: str) -> str:
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()


def violation_doc(v: Violation) -> dict[str, Any]:
    return {
        "schedule": list(v.schedule),
        "step": v.step,
        "explanation": v.explanation,
        "location": None if v.location is None else f"l{v.location}",
        "early_dereference": v.early,
    }


def verdict_doc(v: Verdict, annotation: str | None = None) -> dict[str, Any]:
    return {
        "annotation": annotation if annotation is not None else v.subject,
        "status": v.status.value,
        "bound": v.bound,
        "vacuous": v.vacuous,
        "violations_total": v.total_violations,
        "counterexample": violation_doc(v.counterexample) if v.counterexample else None,
    }


def races_doc(r: RaceReport) -> dict[str, Any]:
    sites = []
    for loc, f in r.sites:
        w = r.first_at(loc, f)
        sites.append(
            {
                "location": f"l{loc}",
                "field": f,
                "threads": list(w.threads),
                "modes": list(w.modes),
                "schedule": list(w.schedule),
                "occurrences": sum(1 for x in r.races if (x.location, x.field) == (loc, f)),
            }
        )
    return {"count": len(r.races), "complete": r.complete, "sites": sites}


def theorem_doc(t: TheoremReport) -> dict[str, Any]:
    hyp = t.hypotheses
    return {
        "annotation": str(t.annotation),
        "theorem": t.theorem,
        "guard_wellformed": t.wellformed.ok,
        "diagnostics": list(t.wellformed.diagnostics),
        "nonaliased": verdict_doc(t.nonaliased) if t.nonaliased is not None else None,
        "protection": verdict_doc(t.protection, str(t.annotation)),
        "hypotheses": hyp.value if hyp is not None else "ill-formed",
        "conclusion": t.conclusion,
        "races": races_doc(t.races),
    }


def inference_doc(target: str, semantics: str, inf: Inference) -> dict[str, Any]:
    return {
        "target": target,
        "semantics": semantics,
        "guards": [str(g) for g in inf.guards],
        "vacuous": inf.vacuous,
        "complete": inf.complete,
        "candidates": len(inf.verdicts),
    }


def exploration_doc(x: Exploration | None) -> dict[str, Any] | None:
    if x is None:
        return None
    doc = dict(x.stats())
    doc["bound"] = x.bound
    doc["dedup"] = x.dedup
    doc["invariant_violations"] = list(x.violations)
    return doc


def build_report(
    *,
    command: str,
    program_path: str,
    program_text: str,
    exit_code: int,
    summary: str,
    exploration: Exploration | None = None,
    verdicts: list[dict[str, Any]] | None = None,
    races: RaceReport | None = None,
    theorems: list[TheoremReport] | None = None,
    inference: dict[str, Any] | None = None,
) -> dict[str, Any]:
    return {
        "schema": REPORT_SCHEMA,
        "tool": {"name": "guardedby", "version": __version__},
        "program": {"path": program_path, "digest": digest(program_text)},
        "command": command,
        "outcome": {"exit_code": exit_code, "summary": summary},
        "exploration": exploration_doc(exploration),
        "verdicts": verdicts if verdicts is not None else [],
        "races": races_doc(races) if races is not None else None,
        "theorems": [theorem_doc(t) for t in theorems] if theorems else [],
        "inference": inference,
    }


def dumps(doc: dict[str, Any]) -> str:
    """Canonical serialization: re-serializing the parsed output yields the same bytes."""
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"
