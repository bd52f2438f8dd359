"""Private Accuracy, Privacy Index and the per-cut privacy report."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

SCHEMA_VERSION = 1


def _clamp(v: float) -> float:
    return min(1.0, max(0.0, v))


def compute_pa(accuracy_u_prime: float, accuracy_u: float) -> tuple[float, float]:
    """PA = Accuracy_u' / Accuracy_u, returned as (clamped, raw)."""
    if accuracy_u <= 0:
        raise ZeroDivisionError("undefended accuracy is zero; PA undefined")
    raw = accuracy_u_prime / accuracy_u
    return _clamp(raw), raw


def compute_pi(accuracy_a: float, accuracy_a_prime: float, accuracy_r: float) -> tuple[float, float]:
    """PI = (Acc_a - Acc_a') / (Acc_a - Acc_R), returned as (clamped, raw)."""
    if accuracy_a <= accuracy_r:
        raise ZeroDivisionError(
            f"attacker baseline {accuracy_a} is no better than random {accuracy_r}; PI undefined")
    raw = (accuracy_a - accuracy_a_prime) / (accuracy_a - accuracy_r)
    return _clamp(raw), raw


@dataclass(frozen=True)
class PrivacyReport:
    cut: str
    pa: float
    pi: float
    pi_raw: float
    mi_reduction: float
    accuracy_u: float
    accuracy_u_prime: float
    accuracy_a: float
    accuracy_a_prime: float
    accuracy_r: float
    flops_ratio: float
    params_ratio: float
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


_INPUTS = ("cut", "mi_reduction", "accuracy_u", "accuracy_u_prime", "accuracy_a", "accuracy_a_prime",
           "accuracy_r", "flops_ratio", "params_ratio")


def build_report(provenance: dict | None = None, **measured) -> PrivacyReport:
    """Assemble a report from measured quantities; PA and PI are derived here."""
    missing = [k for k in _INPUTS if measured.get(k) is None]
    if missing:
        raise KeyError(f"missing report fields: {missing}")
    extra = set(measured) - set(_INPUTS)
    if extra:
        raise KeyError(f"unknown report fields: {sorted(extra)}")
    for k in ("accuracy_u", "accuracy_u_prime", "accuracy_a", "accuracy_a_prime", "accuracy_r",
              "flops_ratio", "params_ratio"):
        if not 0.0 <= measured[k] <= 1.0:
            raise ValueError(f"{k}={measured[k]} outside [0, 1]")
    pa, pa_raw = compute_pa(measured["accuracy_u_prime"], measured["accuracy_u"])
    pi, pi_raw = compute_pi(measured["accuracy_a"], measured["accuracy_a_prime"], measured["accuracy_r"])
    prov = dict(provenance or {})
    prov.setdefault("pa_raw", pa_raw)
    return PrivacyReport(pa=pa, pi=pi, pi_raw=pi_raw, provenance=prov, **measured)


def recompute_consistent(report: PrivacyReport, tol: float = 1e-12) -> bool:
    pa, _ = compute_pa(report.accuracy_u_prime, report.accuracy_u)
    pi, pi_raw = compute_pi(report.accuracy_a, report.accuracy_a_prime, report.accuracy_r)
    return abs(pa - report.pa) <= tol and abs(pi - report.pi) <= tol and abs(pi_raw - report.pi_raw) <= tol
