"""Shared sink for the one-line acceptance verdicts printed after the run."""

RESULTS: list[str] = []


def record(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS.append(line)
    print(line)
    return ok
