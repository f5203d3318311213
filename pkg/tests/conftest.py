import os

# single-threaded BLAS keeps timings honest and results bit-reproducible
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from stspp.synth import rasterize  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def disc_mask(side, cx, cy, r):
    return rasterize("ellipse", cx, cy, 2 * r, 2 * r, side)


def random_blob(rng, side):
    """A random union of 1-3 ellipses; never empty."""
    m = np.zeros((side, side), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        w, h = rng.uniform(0.2, 0.7, 2) * side
        cx, cy = rng.uniform(0.25, 0.75, 2) * side
        m |= rasterize("ellipse", cx, cy, w, h, side)
    if not m.any():
        m[side // 2, side // 2] = True
    return m


# ---- acceptance summary --------------------------------------------------
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one pass/fail line per acceptance criterion (later parts may only downgrade)."""
    prev = ACCEPTANCE.get(criterion)
    if prev is not None:
        ok = ok and prev[0]
        detail = f"{prev[1]}; {detail}"
    ACCEPTANCE[criterion] = (ok, detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k:2d}: {detail}")
