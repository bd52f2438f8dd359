"""CSV / JSON / plot emission for a finished run."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from ..metrics import SCHEMA_VERSION, PrivacyReport
from .pipeline import RunRecord

CSV_COLUMNS = ("cut", "pa", "pi", "pi_raw", "mi_reduction", "accuracy_u", "accuracy_u_prime", "accuracy_a",
               "accuracy_a_prime", "accuracy_r", "flops_ratio", "params_ratio", "normalized_accuracy")

_ACCURACY = {"type": "number", "minimum": 0, "maximum": 1}

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema_version", "config_digest", "reports", "failures"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "config_digest": {"type": "string"},
        "failures": {"type": "object", "additionalProperties": {"type": "string"}},
        "reports": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["schema_version", "cut", "pa", "pi", "pi_raw", "mi_reduction", "accuracy_u",
                             "accuracy_u_prime", "accuracy_a", "accuracy_a_prime", "accuracy_r",
                             "flops_ratio", "params_ratio", "provenance"],
                "properties": {
                    "schema_version": {"const": SCHEMA_VERSION},
                    "cut": {"type": "string"},
                    "pa": _ACCURACY, "pi": _ACCURACY,
                    "pi_raw": {"type": "number"},
                    "mi_reduction": {"type": "number"},
                    "accuracy_u": _ACCURACY, "accuracy_u_prime": _ACCURACY, "accuracy_a": _ACCURACY,
                    "accuracy_a_prime": _ACCURACY, "accuracy_r": _ACCURACY,
                    "flops_ratio": _ACCURACY, "params_ratio": _ACCURACY,
                    "provenance": {"type": "object"},
                },
            },
        },
    },
}


def _row(r: PrivacyReport) -> list[str]:
    normalized = r.accuracy_u_prime / r.accuracy_u
    values = [r.pa, r.pi, r.pi_raw, r.mi_reduction, r.accuracy_u, r.accuracy_u_prime, r.accuracy_a,
              r.accuracy_a_prime, r.accuracy_r, r.flops_ratio, r.params_ratio, normalized]
    return [r.cut] + [repr(float(v)) for v in values]


def render_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in record.reports:
        writer.writerow(_row(r))
    return buf.getvalue()


def render_json(record: RunRecord) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config_digest": record.config_digest,
        "failures": dict(sorted(record.failures.items())),
        "reports": [{"schema_version": SCHEMA_VERSION, **r.to_dict()} for r in record.reports],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _plots(record: RunRecord, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cuts = [r.cut for r in record.reports]
    paths = []
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(cuts, [r.accuracy_u_prime / r.accuracy_u for r in record.reports], "o-", label="accuracy")
    ax.plot(cuts, [r.mi_reduction for r in record.reports], "s-", label="MI reduction")
    ax.plot(cuts, [r.flops_ratio for r in record.reports], "^-", label="FLOPs")
    ax.plot(cuts, [r.params_ratio for r in record.reports], "v-", label="params")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("normalized")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out / "cut_profile.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax1.bar(cuts, [r.mi_reduction for r in record.reports])
    ax1.set_title("MI reduction")
    ax2.bar(cuts, [r.accuracy_a_prime for r in record.reports])
    if record.reports:
        ax2.axhline(record.reports[0].accuracy_a, ls="--", color="k", label="best")
        ax2.legend(fontsize=8)
    ax2.set_ylim(0, 1.05)
    ax2.set_title("attack accuracy")
    fig.tight_layout()
    p = out / "mi_vs_attack.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths


def emit_report(record: RunRecord, out_dir, formats=("csv", "json")) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    written = []
    if "csv" in formats:
        p = out / "reports.csv"
        p.write_bytes(render_csv(record).encode())
        written.append(p)
    if "json" in formats:
        p = out / "reports.json"
        p.write_bytes(render_json(record).encode())
        written.append(p)
    if "plots" in formats:
        written.extend(_plots(record, out))
    p = out / "run_record.json"
    p.write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True))
    written.append(p)
    return written
