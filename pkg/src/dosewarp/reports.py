"""Report documents: JSON with controlled float formatting, DVH CSV.

Every report embeds the tool version and the full configuration echo so a
result can always be traced back to the exact settings that produced it.
Floats are serialized with 9 significant digits; file writes are atomic.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import __version__

TOOL_NAME = "dosewarp"


def _fmt_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError("reports must not contain non-finite numbers")
    if x == int(x) and abs(x) < 1e15:
        return f"{x:.1f}"
    return format(x, ".9g")


def dumps_json(obj, indent: int = 2) -> str:
    """Deterministic JSON: insertion-ordered keys, 9-sig-digit floats."""
    out = []

    def emit(value, depth):
        pad = " " * (indent * depth)
        inner = " " * (indent * (depth + 1))
        if value is None:
            out.append("null")
        elif isinstance(value, bool):
            out.append("true" if value else "false")
        elif isinstance(value, (int, np.integer)):
            out.append(str(int(value)))
        elif isinstance(value, (float, np.floating)):
            out.append(_fmt_float(float(value)))
        elif isinstance(value, str):
            import json
            out.append(json.dumps(value))
        elif isinstance(value, dict):
            if not value:
                out.append("{}")
                return
            out.append("{\n")
            for i, (k, v) in enumerate(value.items()):
                if not isinstance(k, str):
                    raise ValueError(f"JSON keys must be strings, got {k!r}")
                import json
                out.append(inner + json.dumps(k) + ": ")
                emit(v, depth + 1)
                out.append(",\n" if i < len(value) - 1 else "\n")
            out.append(pad + "}")
        elif isinstance(value, (list, tuple, np.ndarray)):
            seq = list(value)
            if not seq:
                out.append("[]")
                return
            out.append("[\n")
            for i, v in enumerate(seq):
                out.append(inner)
                emit(v, depth + 1)
                out.append(",\n" if i < len(seq) - 1 else "\n")
            out.append(pad + "]")
        else:
            raise ValueError(f"cannot serialize {type(value).__name__}")

    emit(obj, 0)
    out.append("\n")
    return "".join(out)


def write_text_atomic(path: str, text: str):
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str, obj):
    write_text_atomic(path, dumps_json(obj))


def envelope(kind: str, config_echo: dict) -> dict:
    return {"tool": TOOL_NAME, "version": __version__, "report": kind,
            "config": config_echo}


def metrics_report(per_structure: dict, config_echo: dict) -> dict:
    doc = envelope("metrics", config_echo)
    doc["structures"] = per_structure
    return doc


def register_report(result, config_echo: dict, extra: dict | None = None) -> dict:
    from .field import displacement_magnitude, jacobian_determinant

    jac = jacobian_determinant(result.final_field).data
    mag = displacement_magnitude(result.final_field).data
    doc = envelope("register", config_echo)
    doc["per_step_loss"] = [b.as_dict() for b in result.per_step_loss]
    doc["iterations_used"] = list(result.iterations_used)
    doc["field"] = {
        "max_magnitude_mm": float(mag.max()),
        "mean_magnitude_mm": float(mag.mean()),
        "jacobian_min": float(jac.min()),
        "jacobian_max": float(jac.max()),
        "jacobian_negative_fraction": float((jac <= 0).mean()),
    }
    if extra:
        doc.update(extra)
    return doc


def constraint_report(results, config_echo: dict) -> dict:
    doc = envelope("constraints", config_echo)
    doc["constraints"] = [r.as_dict() for r in results]
    return doc


def compliance_report(rates: dict, n_reports: int, config_echo: dict) -> dict:
    doc = envelope("compliance", config_echo)
    doc["n_reports"] = n_reports
    doc["pass_rate_percent"] = {k: round(v, 1) for k, v in rates.items()}
    return doc


def stats_report(result, params: dict, config_echo: dict) -> dict:
    doc = envelope("stats", config_echo)
    doc.update(params)
    doc["result"] = result.as_dict()
    return doc


def dvh_csv(curve) -> str:
    """CSV serialization of one DVH curve: header plus one row per bin."""
    lines = ["level_gy,percent_volume"]
    for level, pct in zip(curve.levels_gy, curve.percent_volume):
        lines.append(f"{_fmt_float(float(level))},{_fmt_float(float(pct))}")
    return "\n".join(lines) + "\n"


def parse_dvh_csv(text: str):
    """Inverse of dvh_csv: returns (levels, percents) arrays."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != "level_gy,percent_volume":
        raise ValueError("not a DVH CSV document (bad header)")
    levels, pcts = [], []
    for ln in lines[1:]:
        a, b = ln.split(",")
        levels.append(float(a))
        pcts.append(float(b))
    return np.array(levels), np.array(pcts)
