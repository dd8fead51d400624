"""One summary line per acceptance criterion, collected across the session."""
RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    assert ok, RESULTS[n]
