from __future__ import annotations

import math
from dataclasses import dataclass, field


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


@dataclass(frozen=True)
class IdentityReport:
    """Outcome of one identity check: pass iff ``|estimate - target| <= tolerance``."""

    name: str
    estimate: float
    target: float
    standard_error: float
    tolerance: float
    metadata: dict = field(default_factory=dict)

    @property
    def discrepancy(self) -> float:
        return abs(self.estimate - self.target)

    @property
    def verdict(self) -> str:
        ok = math.isfinite(self.estimate) and self.discrepancy <= self.tolerance
        return "pass" if ok else "fail"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "estimate": _clean(float(self.estimate)),
            "target": _clean(float(self.target)),
            "standard_error": _clean(float(self.standard_error)),
            "tolerance": _clean(float(self.tolerance)),
            "verdict": self.verdict,
            "metadata": self.metadata,
        }

    def line(self) -> str:
        return (f"[{self.verdict.upper()}] {self.name}: estimate={self.estimate:.6g} "
                f"target={self.target:.6g} |diff|={self.discrepancy:.3g} tol={self.tolerance:.3g}")


def ratio_report(name: str, discrepancies, tolerances, standard_errors, metadata: dict | None = None
                 ) -> IdentityReport:
    """Fold per-probe checks ``|d_p| <= tol_p`` into one report.

    The estimate is ``max_p |d_p| / tol_p`` and the tolerance is 1, so the
    verdict passes exactly when every probe passes.
    """
    d = [abs(float(x)) for x in discrepancies]
    tol = [float(x) for x in tolerances]
    ratios = [di / ti if ti > 0 else (0.0 if di == 0 else math.inf) for di, ti in zip(d, tol)]
    worst = max(range(len(ratios)), key=ratios.__getitem__)
    meta = dict(metadata or {})
    meta.update({"probes": len(d), "worst_probe": worst, "worst_discrepancy": d[worst],
                 "worst_tolerance": tol[worst]})
    return IdentityReport(name, ratios[worst], 0.0, float(standard_errors[worst]), 1.0, meta)
