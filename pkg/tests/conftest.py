from __future__ import annotations

import sys
from pathlib import Path

import pytest

from guardedby.explorer import explore
from guardedby.syntax import Program, parse_annotations, parse_program

CORPUS = Path(__file__).resolve().parents[1] / "src" / "guardedby" / "corpus"
GOLDEN = Path(__file__).resolve().parent / "golden"

sys.path.insert(0, str(Path(__file__).resolve().parent))


def corpus_path(name: str) -> Path:
    return CORPUS / name


def load(name: str) -> Program:
    return parse_program((CORPUS / f"{name}.gbc").read_text())


def annotations(name: str):
    return parse_annotations((CORPUS / f"{name}.gba").read_text())


def corpus_names() -> list[str]:
    return sorted(p.stem for p in CORPUS.glob("*.gbc"))


@pytest.fixture(scope="session")
def fig4():
    return load("fig4")


@pytest.fixture(scope="session")
def fig4_x(fig4):
    return explore(fig4, 10_000)


# --- acceptance summary --------------------------------------------------------

ACCEPTANCE: list[str] = []


def report_criterion(number: int, ok: bool, what: str) -> None:
    """Record one acceptance line; they are printed together at the end of the run."""
    ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {what}")


def report_excluded(number: int, why: str) -> None:
    ACCEPTANCE.append(f"[EXCLUDED] criterion {number}: {why}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
