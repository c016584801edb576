"""Collects one pass/fail line per acceptance criterion."""
RESULTS = {}


def record(key, ok, detail=""):
    RESULTS[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok
