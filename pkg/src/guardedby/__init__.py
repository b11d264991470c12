"""Reference interpreter, schedule explorer and ``@GuardedBy`` checker for a small concurrent object calculus."""

from __future__ import annotations

__version__ = "0.1.0"
