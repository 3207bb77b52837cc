"""Collects the one-line PASS/FAIL verdict of each acceptance criterion."""

LINES: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} -- {detail}"
    LINES[number] = line
    print(line)
    return ok
