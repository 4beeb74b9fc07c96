"""Pass/fail registry for the acceptance criteria, printed in the terminal summary."""
import time
from contextlib import contextmanager

RESULTS = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    RESULTS[number] = line
    print(line)
    return passed


@contextmanager
def stopwatch():
    box = {}
    t = time.perf_counter()
    try:
        yield box
    finally:
        box["s"] = time.perf_counter() - t
