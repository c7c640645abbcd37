"""Collects one verdict per acceptance criterion for the terminal summary."""

import contextlib

RESULTS = {}


@contextlib.contextmanager
def criterion(number, title):
    """Record PASS/FAIL for a criterion; ``notes`` collects the detail line."""
    notes = []
    try:
        yield notes
    except BaseException as exc:
        RESULTS[number] = (False, title, "; ".join(notes + [f"{type(exc).__name__}: {exc}".splitlines()[0]]))
        print(f"FAIL  [{number}] {title}")
        raise
    RESULTS[number] = (True, title, "; ".join(notes))
    print(f"PASS  [{number}] {title}")
