from __future__ import annotations

import numpy as np
import pytest

from spfkit.data import SegmentRecord, make_dataset

# Acceptance results collected by tests/test_acceptance.py and echoed in the terminal summary.
ACCEPTANCE: dict[int, dict] = {}


def record_cell(criterion: int, title: str, cell: str, ok: bool, detail: str = "") -> None:
    entry = ACCEPTANCE.setdefault(criterion, {"title": title, "cells": []})
    entry["cells"].append((cell, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[k]
        cells = entry["cells"]
        passed = all(ok for _, ok, _ in cells)
        n_ok = sum(ok for _, ok, _ in cells)
        tr.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'} ({n_ok}/{len(cells)} checks) {entry['title']}")
        for cell, ok, detail in cells:
            if not ok:
                tr.write_line(f"    failed: {cell} {detail}")


def central_gradient(f, x, h=1e-6):
    """Central finite differences with a relative step."""
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def seg(i, aadt=2000.0, length=1.0, years=5, crashes=3, region="A", cmfs=(), **cov):
    return SegmentRecord(f"S{i}", region, float(aadt), float(length), years, crashes, dict(cov), tuple(cmfs))


@pytest.fixture
def small_data():
    rng = np.random.default_rng(7)
    recs = [
        seg(
            i,
            aadt=rng.uniform(200, 9000),
            length=rng.uniform(0.2, 3.0),
            crashes=int(rng.poisson(4)),
            region=f"R{i % 3}",
            shoulder_width=rng.uniform(0, 10),
            lane_width_ge_10=float(rng.random() < 0.5),
        )
        for i in range(60)
    ]
    return make_dataset(recs)
