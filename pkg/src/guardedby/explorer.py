"""Deterministic execution and bounded-exhaustive exploration of schedules.

Each rule application is deterministic for a fixed thread, so a schedule
(sequence of 1-based thread positions) fully determines a trace. The
exhaustive explorer branches on every enabled thread and records the result
as a graph of configurations. Without ``dedup`` the graph is the schedule
tree itself; with ``dedup`` identical configurations are merged, which
keeps every reachable configuration and every transition but shares common
suffixes.
"""

from __future__ import annotations

import enum
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator

from . import semantics
from .access import NO_EVENTS, StepEvents, events_of_step
from .semantics import Blocked, Config, Location, StepRecord, Stuck, initial_config
from .syntax import Program

log = logging.getLogger(__name__)

DEFAULT_STATE_CAP = 10**6


class Outcome(str, enum.Enum):
    COMPLETED = "completed"
    DEADLOCK = "deadlock"
    STUCK = "stuck"
    BOUND = "bound-exhausted"


class StateCapExceeded(RuntimeError):
    pass


class LockInvariantError(AssertionError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class TraceStep:
    pre: Config
    record: StepRecord
    events: StepEvents


@dataclass
class Trace:
    steps: list[TraceStep]
    final: Config
    outcome: Outcome
    diagnostic: str | None = None

    @property
    def schedule(self) -> list[int]:
        return [s.record.thread for s in self.steps]

    def configs(self) -> Iterator[Config]:
        for s in self.steps:
            yield s.pre
        yield self.final


def _terminal_outcome(program: Program, c: Config, failures: dict[int, Exception]) -> tuple[Outcome, str | None]:
    stuck = {n: exc for n, exc in failures.items() if isinstance(exc, Stuck)}
    if stuck:
        n, exc = min(stuck.items())
        return Outcome.STUCK, f"thread {n}: {exc}"
    if semantics.is_terminated(c):
        return Outcome.COMPLETED, None
    blocked = ", ".join(f"thread {n} on l{exc.loc}" for n, exc in sorted(failures.items()))
    return Outcome.DEADLOCK, f"all live threads blocked ({blocked})"


def _expand(program: Program, c: Config):
    ok: dict[int, tuple[Config, StepRecord]] = {}
    failures: dict[int, Exception] = {}
    for n, post, rec in semantics.successors(program, c):
        if rec is None:
            failures[n] = post
        else:
            ok[n] = (post, rec)
    if len(c.threads) == 1 and not c.threads[0].stack:
        failures.pop(1, None)
    return ok, failures


def detect_deadlock(program: Program, c: Config) -> bool:
    """True iff some thread is still running, none can move and some waits on a lock."""
    if semantics.is_terminated(c):
        return False
    ok, failures = _expand(program, c)
    return not ok and any(isinstance(exc, Blocked) for exc in failures.values())


@dataclass(frozen=True)
class Seeded:
    seed: int


Policy = str | Seeded


def parse_scheduler(text: str) -> Policy:
    if text in ("leftmost", "roundrobin"):
        return text
    if text.startswith("seed:"):
        return Seeded(int(text.split(":", 1)[1]))
    raise ValueError(f"unknown scheduler {text!r}; use leftmost, roundrobin or seed:N")


def run_deterministic(program: Program, policy: Policy = "leftmost", max_steps: int = 10_000) -> Trace:
    """Run one schedule chosen by ``policy`` for at most ``max_steps`` steps."""
    rng = random.Random(policy.seed) if isinstance(policy, Seeded) else None
    c = initial_config(program)
    steps: list[TraceStep] = []
    last_tid: int | None = None
    while True:
        ok, failures = _expand(program, c)
        if not ok:
            outcome, diag = _terminal_outcome(program, c, failures)
            return Trace(steps, c, outcome, diag)
        if len(steps) >= max_steps:
            return Trace(steps, c, Outcome.BOUND, f"stopped after {max_steps} steps")
        choices = sorted(ok)
        if policy == "leftmost":
            n = choices[0]
        elif policy == "roundrobin":
            n = _round_robin(c, choices, last_tid)
        elif rng is not None:
            n = rng.choice(choices)
        else:
            raise ValueError(f"unknown policy {policy!r}")
        post, rec = ok[n]
        steps.append(TraceStep(c, rec, events_of_step(c, n)))
        last_tid = rec.tid
        c = post


def _round_robin(c: Config, choices: list[int], last_tid: int | None) -> int:
    tids = [t.tid for t in c.threads]
    start = tids.index(last_tid) + 1 if last_tid in tids else 0
    k = len(tids)
    for off in range(k):
        n = (start + off) % k + 1
        if n in choices:
            return n
    return choices[0]


def replay(program: Program, schedule: list[int]) -> Trace:
    """Re-run ``schedule`` from the initial configuration."""
    c = initial_config(program)
    steps: list[TraceStep] = []
    for i, n in enumerate(schedule):
        if not 1 <= n <= len(c.threads):
            raise ValueError(f"schedule step {i}: no thread {n} (pool has {len(c.threads)})")
        try:
            post, rec = semantics.try_step(program, c, n)
        except (Blocked, Stuck) as exc:
            raise ValueError(f"schedule step {i}: thread {n} cannot move: {exc}") from None
        steps.append(TraceStep(c, rec, events_of_step(c, n)))
        c = post
    ok, failures = _expand(program, c)
    if ok:
        return Trace(steps, c, Outcome.BOUND, "schedule ended while threads could still move")
    outcome, diag = _terminal_outcome(program, c, failures)
    return Trace(steps, c, outcome, diag)


# ---------------------------------------------------------------------------
# Lock invariants
# ---------------------------------------------------------------------------


def _union(c: Config) -> frozenset[Location]:
    out: frozenset[Location] = frozenset()
    for t in c.threads:
        out |= t.lockset
    return out


def assert_lock_invariants(c: Config, record: StepRecord | None = None, pre: Config | None = None) -> list[str]:
    """Violations of the lock-soundness properties at ``c``.

    With ``record`` and ``pre`` the step ``pre -> c`` is checked as well.
    An empty list is the only correct answer on a reachable configuration.
    """
    out: list[str] = []
    threads = c.threads
    for i in range(len(threads)):
        for j in range(i + 1, len(threads)):
            common = threads[i].lockset & threads[j].lockset
            if common:
                out.append(f"threads {i + 1} and {j + 1} both hold {_locs(common)}")
    for i, t in enumerate(threads, 1):
        if not t.stack and t.lockset:
            out.append(f"terminated thread {i} still holds {_locs(t.lockset)}")
    for loc, obj in c.memory.items():
        holders = sum(loc in t.lockset for t in threads)
        if (obj.locks > 0) != (holders == 1):
            out.append(f"l{loc} has lock counter {obj.locks} but {holders} holder(s)")
    for loc in _union(c):
        if loc not in c.memory:
            out.append(f"held lock l{loc} is not allocated")
    missing = semantics.dangling(c)
    if missing:
        out.append(f"dangling references to {_locs(missing)}")
    if record is not None and pre is not None:
        out.extend(_transition_violations(pre, record, c))
    return out


def _locs(locs) -> str:
    return "{" + ",".join(f"l{x}" for x in sorted(locs)) + "}"


def _transition_violations(pre: Config, rec: StepRecord, post: Config) -> list[str]:
    out: list[str] = []
    n = rec.thread
    rule = rec.rule
    before, after = _union(pre), _union(post)
    tag = f"step by thread {n} [{rule}]"

    # frame: every other thread is untouched
    if rule == "spawn":
        others_pre = pre.threads[: n - 1] + pre.threads[n:]
        others_post = post.threads[: n - 1] + post.threads[n + 1 :]
        spawned = post.threads[n - 1]
        if spawned.lockset:
            out.append(f"{tag}: spawned thread starts holding {_locs(spawned.lockset)}")
        if post.threads[n].lockset != pre.threads[n - 1].lockset:
            out.append(f"{tag}: spawning thread's lockset changed")
    elif rule in ("end-l", "end-r"):
        others_pre = pre.threads[: n - 1] + pre.threads[n:]
        others_post = post.threads
    else:
        others_pre = pre.threads[: n - 1] + pre.threads[n:]
        others_post = post.threads[: n - 1] + post.threads[n:]
    if others_pre != others_post:
        out.append(f"{tag}: other threads changed")

    if after > before or (after - before):
        grown = after - before
        if rule != "acquire-lock":
            out.append(f"{tag}: lockset union grew by {_locs(grown)}")
    if before > after or (before - after):
        if rule != "release-lock":
            out.append(f"{tag}: lockset union lost {_locs(before - after)}")

    loc = rec.lock
    if rule in ("acquire-lock", "reentrant-lock", "decrease-lock", "release-lock"):
        l_pre = pre.threads[n - 1].lockset
        l_post = post.threads[n - 1].lockset
        c_pre = pre.memory[loc].locks
        c_post = post.memory[loc].locks
        if rule == "acquire-lock":
            if not (c_pre == 0 and c_post == 1 and l_post == l_pre | {loc} and loc not in before):
                out.append(f"{tag}: l{loc} counter {c_pre}->{c_post}, not a fresh acquisition")
        elif rule == "reentrant-lock":
            if loc not in l_pre or c_post != c_pre + 1 or l_post != l_pre:
                out.append(f"{tag}: re-entered l{loc} without holding it")
        elif rule == "decrease-lock":
            if loc not in l_pre or c_pre <= 1 or c_post != c_pre - 1 or l_post != l_pre:
                out.append(f"{tag}: bad decrement of l{loc} ({c_pre}->{c_post})")
        else:
            if loc not in l_pre or c_pre != 1 or c_post != 0 or l_pre != l_post | {loc} or loc in l_post:
                out.append(f"{tag}: bad release of l{loc} ({c_pre}->{c_post}, still held={loc in l_post})")
    return out


# ---------------------------------------------------------------------------
# Exhaustive exploration
# ---------------------------------------------------------------------------


@dataclass(slots=True)
class Edge:
    src: int
    dst: int
    record: StepRecord
    events: StepEvents


@dataclass(slots=True)
class Node:
    config: Config
    depth: int
    parent: int | None  # edge id of a shortest known path from the root
    out: list[int] = field(default_factory=list)
    inc: list[int] = field(default_factory=list)
    outcome: Outcome | None = None  # set on leaves
    diagnostic: str | None = None


@dataclass
class Exploration:
    program: Program
    bound: int
    dedup: bool
    nodes: list[Node]
    edges: list[Edge]
    violations: list[str] = field(default_factory=list)
    # Derived data shared by checkers (bindings, closures, race candidates).
    # Filled lazily; never holds or alters configurations.
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def memo(self, key, compute):
        """``compute()``, evaluated once per exploration for each ``key``."""
        try:
            return self.cache[key]
        except KeyError:
            value = self.cache[key] = compute()
            return value

    @property
    def root(self) -> int:
        return 0

    @property
    def complete(self) -> bool:
        """Every branch ended before the bound."""
        return not any(nd.outcome is Outcome.BOUND for nd in self.nodes)

    def leaves(self, outcome: Outcome | None = None) -> list[int]:
        return [i for i, nd in enumerate(self.nodes) if nd.outcome is not None and (outcome is None or nd.outcome is outcome)]

    def count_traces(self, outcome: Outcome | None = Outcome.COMPLETED) -> int:
        """Number of maximal root-to-leaf paths ending in ``outcome``."""
        memo: dict[int, int] = {}
        for i in reversed(self._topological()):
            nd = self.nodes[i]
            here = 1 if nd.outcome is not None and (outcome is None or nd.outcome is outcome) else 0
            memo[i] = here + sum(memo[self.edges[e].dst] for e in nd.out)
        return memo[self.root]

    def _topological(self) -> list[int]:
        indeg = [len(nd.inc) for nd in self.nodes]
        order, queue = [], deque(i for i, d in enumerate(indeg) if d == 0)
        while queue:
            i = queue.popleft()
            order.append(i)
            for e in self.nodes[i].out:
                d = self.edges[e].dst
                indeg[d] -= 1
                if indeg[d] == 0:
                    queue.append(d)
        if len(order) != len(self.nodes):
            raise ValueError("state graph has a cycle; trace counting is undefined")
        return order

    def traces(self) -> Iterator[Trace]:
        """Every maximal trace, depth first. Exponential on merged graphs."""
        stack: list[tuple[int, list[int]]] = [(self.root, [])]
        while stack:
            i, path = stack.pop()
            nd = self.nodes[i]
            if nd.outcome is not None:
                yield self.trace_of(path)
            for e in reversed(nd.out):
                stack.append((self.edges[e].dst, path + [e]))

    def trace_of(self, path: list[int]) -> Trace:
        steps = [TraceStep(self.nodes[self.edges[e].src].config, self.edges[e].record, self.edges[e].events) for e in path]
        last = self.edges[path[-1]].dst if path else self.root
        nd = self.nodes[last]
        return Trace(steps, nd.config, nd.outcome or Outcome.BOUND, nd.diagnostic)

    def path_to(self, node: int) -> list[int]:
        """Edge ids of a shortest known path from the root to ``node``."""
        path = []
        while self.nodes[node].parent is not None:
            e = self.nodes[node].parent
            path.append(e)
            node = self.edges[e].src
        return path[::-1]

    def path_between(self, src: int, dst: int) -> list[int]:
        if src == dst:
            return []
        prev: dict[int, int] = {}
        queue = deque([src])
        while queue:
            i = queue.popleft()
            for e in self.nodes[i].out:
                d = self.edges[e].dst
                if d not in prev and d != src:
                    prev[d] = e
                    if d == dst:
                        path = []
                        while d != src:
                            path.append(prev[d])
                            d = self.edges[prev[d]].src
                        return path[::-1]
                    queue.append(d)
        raise ValueError(f"node {dst} is not reachable from {src}")

    def schedule(self, path: list[int]) -> list[int]:
        return [self.edges[e].record.thread for e in path]

    def forward(self, starts) -> set[int]:
        seen = set(starts)
        queue = deque(seen)
        while queue:
            for e in self.nodes[queue.popleft()].out:
                d = self.edges[e].dst
                if d not in seen:
                    seen.add(d)
                    queue.append(d)
        return seen

    def backward(self, starts) -> set[int]:
        seen = set(starts)
        queue = deque(seen)
        while queue:
            for e in self.nodes[queue.popleft()].inc:
                s = self.edges[e].src
                if s not in seen:
                    seen.add(s)
                    queue.append(s)
        return seen

    def stats(self) -> dict[str, int | bool]:
        counts = {o: 0 for o in Outcome}
        for nd in self.nodes:
            if nd.outcome is not None:
                counts[nd.outcome] += 1
        return {
            "states": len(self.nodes),
            "transitions": len(self.edges),
            "completed_traces": self.count_traces(Outcome.COMPLETED),
            "completed_leaves": counts[Outcome.COMPLETED],
            "deadlocks": counts[Outcome.DEADLOCK],
            "stuck": counts[Outcome.STUCK],
            "bound_exhausted": counts[Outcome.BOUND],
            "complete": self.complete,
        }


def explore(
    program: Program,
    bound: int,
    *,
    dedup: bool = False,
    state_cap: int = DEFAULT_STATE_CAP,
    check_invariants: bool = False,
    strict: bool = False,
) -> Exploration:
    """Enumerate every schedule of at most ``bound`` steps.

    ``check_invariants`` runs ``assert_lock_invariants`` on every visited
    configuration and transition, collecting findings in
    ``Exploration.violations``; ``strict`` raises LockInvariantError on the
    first one instead.
    """
    if bound < 1:
        raise ValueError("bound must be positive")
    init = initial_config(program)
    nodes = [Node(init, 0, None)]
    edges: list[Edge] = []
    x = Exploration(program, bound, dedup, nodes, edges)
    index: dict[Config, int] = {init: 0} if dedup else {}

    def note(vs: list[str]) -> None:
        if vs:
            if strict:
                raise LockInvariantError(vs)
            x.violations.extend(vs)

    if check_invariants:
        note(assert_lock_invariants(init))

    frontier: deque[int] = deque([0])
    pop = frontier.popleft if dedup else frontier.pop
    while frontier:
        i = pop()
        nd = nodes[i]
        c = nd.config
        ok, failures = _expand(program, c)
        if not ok:
            nd.outcome, nd.diagnostic = _terminal_outcome(program, c, failures)
            continue
        if nd.depth >= bound:
            nd.outcome, nd.diagnostic = Outcome.BOUND, f"bound {bound} reached"
            continue
        children = []
        for n in sorted(ok):
            post, rec = ok[n]
            if check_invariants:
                note(assert_lock_invariants(post, rec, c))
            j = index.get(post) if dedup else None
            eid = len(edges)
            if j is None:
                j = len(nodes)
                if j >= state_cap:
                    raise StateCapExceeded(f"more than {state_cap} configurations visited")
                nodes.append(Node(post, nd.depth + 1, eid))
                if dedup:
                    index[post] = j
                children.append(j)
            edges.append(Edge(i, j, rec, events_of_step(c, n)))
            nd.out.append(eid)
            nodes[j].inc.append(eid)
        # DFS pops from the right: push children reversed so the leftmost runs first
        frontier.extend(reversed(children) if not dedup else children)
    log.debug("explored %d states, %d transitions", len(nodes), len(edges))
    return x


def edge_events(x: Exploration, e: int) -> StepEvents:
    return x.edges[e].events if e is not None else NO_EVENTS
