"""Post-run assertions declared in a scenario's ``checks`` list.

Supported checks::

    {check: feasibility}                       infeasible exactly where alpha > k + 1
    {check: amdahl}                            sync e2e speedup never beats the Amdahl bound
    {check: e2e_within_rollout}                e2e lies between 1 and the rollout speedup
    {check: conservation}                      emitted tokens equal sampled lengths, AR and speculative
    {check: monotone, field, along, direction, where?, tol?}
    {check: band, field, max_rel_spread, where?}
    {check: compare, field, lhs: {...}, rhs: {...} | value: x, op: lt|gt}
"""

from __future__ import annotations

from collections import defaultdict
from typing import Any, Mapping

from .scenario import CellRecord, CheckResult, SweepResult

TOL = 1e-9


def _where(cells: list[CellRecord], where: Mapping[str, Any] | None) -> list[CellRecord]:
    if not where:
        return cells
    return [c for c in cells if all(c.coords.get(k) == v for k, v in where.items())]


def _feasibility(result: SweepResult, _: Mapping[str, Any]) -> tuple[bool, str]:
    bad = []
    for c in result.cells:
        if "k" not in c.values:
            continue
        expect = c.values["alpha_target"] <= c.values["k"] + 1
        if expect != c.feasible and "capacity" not in c.reason:
            bad.append(c.coords)
    return not bad, f"{len(bad)} mismatched cells" if bad else "mask matches alpha <= k + 1"


def _amdahl(result: SweepResult, _: Mapping[str, Any]) -> tuple[bool, str]:
    bad = [c.coords for c in result.cells
           if c.feasible and c.values.get("mode") == "sync_colocated"
           and c.values["e2e_speedup"] > c.values["amdahl_bound"] + TOL]
    return not bad, f"{len(bad)} cells above bound" if bad else "all sync cells within bound"


def _within(result: SweepResult, _: Mapping[str, Any]) -> tuple[bool, str]:
    bad = []
    for c in result.cells:
        if not c.feasible or "e2e_speedup" not in c.values:
            continue
        e, r = c.values["e2e_speedup"], c.values["rollout_speedup"]
        lo, hi = min(1.0, r), max(1.0, r)
        if not lo - TOL <= e <= hi + TOL:
            bad.append(c.coords)
    return not bad, f"{len(bad)} cells outside [1, rollout]" if bad else "e2e between 1 and rollout speedup"


def _conservation(result: SweepResult, _: Mapping[str, Any]) -> tuple[bool, str]:
    cells = [c for c in result.cells if "tokens_sampled" in c.values]
    bad = [c.coords for c in cells
           if not c.values["tokens"] == c.values["tokens_ar"] == c.values["tokens_sampled"]]
    if not cells:
        return False, "no simulated cells"
    return not bad, f"{len(bad)} cells lose tokens" if bad else f"exact in {len(cells)} cells"


def _monotone(result: SweepResult, spec: Mapping[str, Any]) -> tuple[bool, str]:
    fld, along = spec["field"], spec["along"]
    sign = 1 if spec.get("direction", "nondecreasing") == "nondecreasing" else -1
    tol = float(spec.get("tol", TOL))
    groups: dict[str, list[CellRecord]] = defaultdict(list)
    for c in _where(result.cells, spec.get("where")):
        if c.feasible and fld in c.values:
            key = repr(sorted((k, v) for k, v in c.coords.items() if k != along))
            groups[key].append(c)
    bad = []
    for key, cs in groups.items():
        cs.sort(key=lambda c: c.coords[along])
        for a, b in zip(cs, cs[1:]):
            if sign * (b.values[fld] - a.values[fld]) < -tol:
                bad.append(f"{key}: {along}={a.coords[along]}->{b.coords[along]}")
    return not bad, "; ".join(bad[:3]) if bad else f"{fld} {spec.get('direction', 'nondecreasing')} in {along}"


def _band(result: SweepResult, spec: Mapping[str, Any]) -> tuple[bool, str]:
    vals = [c.values[spec["field"]] for c in _where(result.cells, spec.get("where")) if c.feasible]
    if not vals:
        return False, "no cells selected"
    lo, hi = min(vals), max(vals)
    spread = (hi - lo) / lo
    ok = spread <= float(spec["max_rel_spread"])
    return ok, f"{spec['field']} in [{lo:.3g}, {hi:.3g}], relative spread {spread:.3f}"


def _compare(result: SweepResult, spec: Mapping[str, Any]) -> tuple[bool, str]:
    fld = spec["field"]
    a = result.lookup(**spec["lhs"]).values[fld]
    b = float(spec["value"]) if "value" in spec else result.lookup(**spec["rhs"]).values[fld]
    ok = a < b if spec.get("op", "lt") == "lt" else a > b
    return ok, f"{fld}: {a:.3g} {spec.get('op', 'lt')} {b:.3g}"


CHECKS = {"feasibility": _feasibility, "amdahl": _amdahl, "e2e_within_rollout": _within,
          "conservation": _conservation,
          "monotone": _monotone, "band": _band, "compare": _compare}


def run_checks(result: SweepResult) -> list[CheckResult]:
    out = []
    for spec in result.spec.checks:
        name = spec.get("name") or spec["check"]
        fn = CHECKS.get(spec["check"])
        if fn is None:
            out.append(CheckResult(name, False, f"unknown check {spec['check']!r}"))
            continue
        try:
            ok, detail = fn(result, spec)
        except (KeyError, ValueError) as exc:
            ok, detail = False, f"check failed to evaluate: {exc!r}"
        out.append(CheckResult(name, bool(ok), detail))
    return out
