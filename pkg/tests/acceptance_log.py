"""Pass/fail record of the acceptance criteria, printed at session end."""

from __future__ import annotations

RESULTS: dict[int, tuple[bool, str]] = {}


def record(num: int, ok: bool, text: str) -> None:
    RESULTS[num] = (ok, text)
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {text}")
