"""Data checks of the instrument exclusion structure and instrument relevance.

These are diagnostics, never gates: every function returns a report.
Completeness of the instruments cannot be tested from data; the report only
carries first-stage relevance as a proxy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .vmm import InstrumentSet, instruments

COMPLETENESS_NOTE = "completeness of the instruments is not testable; first-stage R^2 is a relevance proxy only"


@dataclass(frozen=True)
class ExclusionReport:
    passed: bool
    violations: tuple
    excluded_present: tuple
    r_squared: dict = field(default_factory=dict)
    notes: tuple = (COMPLETENESS_NOTE,)

    def to_text(self) -> str:
        lines = ["instrument exclusion check: " + ("pass" if self.passed else "FAIL")]
        lines += [f"  violation: {v}" for v in self.violations]
        lines.append("  excluded demand shifters in z: " + (", ".join(self.excluded_present) or "none"))
        for name, r2 in self.r_squared.items():
            lines.append(f"  first-stage R^2 of {name} on z: {r2:.4f}")
        lines += [f"  note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["check", "item", "value"])
            wr.writerow(["exclusion", "passed", int(self.passed)])
            for v in self.violations:
                wr.writerow(["exclusion", "violation", v])
            for e in self.excluded_present:
                wr.writerow(["exclusion", "excluded_shifter", e])
            for name, r2 in self.r_squared.items():
                wr.writerow(["relevance", name, repr(float(r2))])


def first_stage_r2(y, z) -> float:
    """R^2 of the least-squares projection of ``y`` on ``[1, z]``."""
    y = np.asarray(y, dtype=float)
    Z = np.column_stack([np.ones(y.size), np.asarray(z, dtype=float)])
    coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
    tss = float(np.sum((y - y.mean()) ** 2))
    if tss == 0:
        return 0.0
    resid = y - Z @ coef
    return 1.0 - float(resid @ resid) / tss


def check_exclusion(inst: InstrumentSet, w_columns, endogenous: dict | None = None) -> ExclusionReport:
    """Exclusion structure of ``inst`` against the cost shifters.

    ``w_columns`` maps cost-shifter names to their data (or is a sequence of
    names, in which case only names are compared).  An instrument violates
    exclusion if it shares a name with, or duplicates the data of, a cost
    shifter.  ``endogenous`` maps names of encoded endogenous inputs to data
    for the first-stage relevance diagnostic.
    """
    if isinstance(w_columns, dict):
        w_items = {k: np.asarray(v, dtype=float) for k, v in w_columns.items()}
    else:
        w_items = {k: None for k in w_columns}
    violations = []
    for j, name in enumerate(inst.names):
        if name in w_items:
            violations.append(f"instrument {name} is a cost shifter")
            continue
        for wname, wcol in w_items.items():
            if wcol is not None and wcol.shape == inst.z[:, j].shape and np.array_equal(wcol, inst.z[:, j]) and np.ptp(wcol) > 0:
                violations.append(f"instrument {name} duplicates cost shifter {wname}")
    excluded = tuple(n for n in inst.excluded if n in inst.names and n not in w_items)
    if not excluded:
        violations.append("no excluded demand shifter among the instruments")
    r2 = {}
    for name, y in (endogenous or {}).items():
        r2[name] = first_stage_r2(y, inst.z)
    return ExclusionReport(not violations, tuple(violations), excluded, r2)


def dataset_report(dataset: Dataset) -> ExclusionReport:
    """:func:`check_exclusion` on the default instruments of a dataset."""
    inst = instruments(dataset)
    w = {f"w{k}": dataset.w[:, k] for k in range(1, dataset.w.shape[1])}
    endo = {"own_share": dataset.shares, "price": dataset.prices}
    return check_exclusion(inst, w, endo)
