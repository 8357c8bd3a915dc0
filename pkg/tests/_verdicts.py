"""Collects one verdict per acceptance criterion for the terminal summary."""

VERDICTS: dict[int, tuple[str, str, str]] = {}


def record(n: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"ACCEPTANCE criterion {n:2d} [{title}]: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    VERDICTS[n] = ("PASS" if ok else "FAIL", title, line)
    print(line)
    return ok
