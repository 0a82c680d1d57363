import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# filled by test_acceptance.py; one (criterion, passed, detail) per sub-check
CRITERIA: list[tuple[int, bool, str]] = []

TITLES = {
    1: "losslessness",
    2: "stage-time replay",
    3: "Amdahl consistency",
    4: "drafting-method regimes",
    5: "draft-length trade-off",
    6: "asynchronous overlap",
    7: "heatmap shape",
    8: "scale and lag sensitivity",
    9: "simulator consistency",
}

_START = time.perf_counter()


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    by_id: dict[int, list[tuple[bool, str]]] = {}
    for cid, ok, detail in CRITERIA:
        by_id.setdefault(cid, []).append((ok, detail))
    if 9 in by_id:
        elapsed = time.perf_counter() - _START
        by_id[9].append((elapsed < 600, f"suite runtime {elapsed:.0f}s < 600s"))
    terminalreporter.section("acceptance criteria")
    for cid in sorted(by_id):
        parts = by_id[cid]
        ok = all(p for p, _ in parts)
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {cid}. {TITLES.get(cid, '')}: "
                                    + "; ".join(d for _, d in parts))
