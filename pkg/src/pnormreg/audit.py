"""Counters for runtime invariant checks.

Strictness defaults to the ``PNORMREG_STRICT`` environment variable
("1", "true", "yes" or "raise"); "raise" turns violations into exceptions.
"""
from __future__ import annotations

import os
from collections import Counter


class InvariantViolation(AssertionError):
    pass


def strict_from_env() -> str:
    val = os.environ.get("PNORMREG_STRICT", "").strip().lower()
    if val == "raise":
        return "raise"
    if val in ("1", "true", "yes", "on"):
        return "record"
    return "off"


class Audit:
    """Tally of named invariant checks.

    Parameters
    ----------
    mode : {"off", "record", "raise"}, optional
        Defaults to the environment setting.
    keep : int
        Number of violation details kept per invariant.
    advisory : iterable of str
        Checks that are recorded but never raise (claims known not to hold
        in general, kept for reporting).
    """

    def __init__(self, mode: str | None = None, keep: int = 5, advisory=("width_ratio_narrow",)):
        self.advisory = frozenset(advisory)
        self.mode = strict_from_env() if mode is None else mode
        if self.mode not in ("off", "record", "raise"):
            raise ValueError(f"unknown audit mode {self.mode!r}")
        self.keep = keep
        self.checks = Counter()
        self.violations = Counter()
        self.skipped = Counter()
        self.details = {}

    @property
    def enabled(self) -> bool:
        return self.mode != "off"

    def __call__(self, name: str, ok: bool, detail=None) -> bool:
        return self.check(name, ok, detail)

    def check(self, name: str, ok: bool, detail=None) -> bool:
        if not self.enabled:
            return ok
        self.checks[name] += 1
        if not ok:
            self.violations[name] += 1
            self.details.setdefault(name, [])
            if len(self.details[name]) < self.keep:
                self.details[name].append(detail)
            if self.mode == "raise" and name not in self.advisory:
                raise InvariantViolation(f"{name}: {detail}")
        return ok

    def skip(self, name: str) -> None:
        if self.enabled:
            self.skipped[name] += 1

    def merge(self, other: "Audit") -> None:
        self.checks.update(other.checks)
        self.violations.update(other.violations)
        self.skipped.update(other.skipped)
        for k, v in other.details.items():
            mine = self.details.setdefault(k, [])
            mine.extend(v[: max(0, self.keep - len(mine))])

    def summary(self) -> dict:
        names = sorted(set(self.checks) | set(self.skipped))
        return {n: {"checks": self.checks[n], "violations": self.violations[n],
                    "skipped": self.skipped[n]} for n in names}
