"""Reference data for the running example (fig4.gbc) under the leftmost scheduler."""

from __future__ import annotations

from guardedby.semantics import FMap, Obj

# Our allocation order differs from the hand numbering of the worked example.
# PAPER_NAME maps our location indices to the names used there.
PAPER_NAME = {0: "l0", 6: "l", 3: "l1", 5: "l2", 2: "l3", 4: "l4", 1: "l5", 7: "l6"}


def o(cls, locks=0, **fields):
    return Obj(cls, FMap(fields), locks)


# Memories of the worked example, written with its own location names.
O4 = o("Object")
MU1 = {
    "l0": o("main"),
    "l": o("K", x="l1", y="l2"),
    "l1": o("K1", f="l3"),
    "l2": o("K2", g="l4"),
    "l3": o("K2", g="l5"),
    "l4": O4,
    "l5": O4,
}
MU2 = {**MU1, "l6": O4}
MU3 = {**MU2, "l1": o("K1", 1, f="l3")}
MU4 = {**MU3, "l": o("K", x="l1", y="l3")}
MU5 = {**MU4, "l1": o("K1", f="l3")}
MU6_PRINTED = {**MU5, "l5": O4}

# Boundaries (index of the last step of each macro-step) in our leftmost trace.
MACRO_ENDS = [0, 2, 4, 7, 9, 11, 13, 16]


def renamed(mem) -> dict:
    """A memory of the fig4 run, with the example's location names."""
    out = {}
    for loc, obj in mem.items():
        fields = FMap({f: PAPER_NAME.get(v, f"l{v}") for f, v in obj.fields.items()})
        out[PAPER_NAME.get(loc, f"l{loc}")] = Obj(obj.cls, fields, obj.locks)
    return out


def isomorphic(a: dict, b: dict) -> bool:
    """Is there a bijection of locations that maps memory ``a`` onto ``b``?"""
    if len(a) != len(b):
        return False
    la, lb = sorted(a, key=str), list(b)

    def shape(obj):
        return (obj.cls, tuple(sorted(obj.fields)), obj.locks)

    def extend(i, m, used):
        if i == len(la):
            return all(
                {f: m[v] for f, v in a[x].fields.items()} == dict(b[m[x]].fields) for x in la
            )
        x = la[i]
        for y in lb:
            if y not in used and shape(a[x]) == shape(b[y]):
                if extend(i + 1, {**m, x: y}, used | {y}):
                    return True
        return False

    return extend(0, {}, frozenset())
