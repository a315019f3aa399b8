"""Shared record of acceptance outcomes, printed in the terminal summary."""

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok
