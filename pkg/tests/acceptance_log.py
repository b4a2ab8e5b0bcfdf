"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def report(number: int, ok: bool, detail: str, blocking: bool = True) -> bool:
    tag = "PASS" if ok else "FAIL"
    suffix = "" if blocking else " (non-blocking)"
    line = f"[criterion {number:>2}] {tag}{suffix}: {detail}"
    LINES.append(line)
    print(line)
    return ok
