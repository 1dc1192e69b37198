"""Campaign artifacts: anomalies.json, trajectory.csv, report.md and manifest.json."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

from .monitor import PAUSE_ANOMALY, AnomalyRecord
from .search import SearchResult, TrajectoryRow
from .simulator import _load_json
from .workload import FeaturePredicate, Mfs, ValidationError

REPORT_COLUMNS = ("#", "RNIC", "Direc.", "Transport", "MTU", "WQE", "SGE", "WQ depth",
                  "Message Pattern", "# of QPs", "Symptom")
TRAJECTORY_COLUMNS = ("eval_index", "counter_id", "normalized_value", "event")
TRAJECTORY_EVENTS = ("none", "anomaly-found", "mfs-extraction")


def _dump(data) -> str:
    return json.dumps(data, indent=2) + "\n"


# -- anomalies.json ----------------------------------------------------------------

def anomalies_document(result: SearchResult) -> dict:
    return {
        "anomalies": [r.to_dict() for r in result.records],
        "summary": {
            "evaluations": result.evals,
            "mfs_evaluations": result.mfs_evals,
            "tester_calls": result.tester_calls,
            "skipped_points": result.skips,
            "budget_exhausted": result.budget_exhausted,
            "zero_denominator_steps": result.zero_denominator_steps,
            "counter_ranking": [{"counter_id": c, "cv": v} for c, v in result.ranking],
            "error": result.error,
        },
    }


def load_anomalies(path: str | Path) -> list[AnomalyRecord]:
    data = _load_json(path)
    entries = data.get("anomalies") if isinstance(data, dict) else data
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: expected an object with an 'anomalies' list")
    return [AnomalyRecord.from_dict(e) for e in entries]


def stable_mfs(records: Iterable[AnomalyRecord]) -> list[Mfs]:
    """MFS of every record that reproduced; unstable ones never join the skip set."""
    return [r.mfs for r in records if r.mfs is not None and not r.unstable]


# -- trajectory.csv ----------------------------------------------------------------

def normalized_trajectory(rows: Sequence[TrajectoryRow]) -> list[tuple[int, str, float, str]]:
    """Scale each counter's values by that counter's maximum so traces share one axis."""
    peak: dict[str, float] = {}
    for r in rows:
        peak[r.counter_id] = max(peak.get(r.counter_id, 0.0), r.value)
    return [(r.eval_index, r.counter_id, r.value / peak[r.counter_id] if peak[r.counter_id] else 0.0, r.event)
            for r in rows]


def trajectory_csv(rows: Sequence[TrajectoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for idx, cid, value, event in normalized_trajectory(rows):
        w.writerow((idx, cid, repr(value), event))
    return buf.getvalue()


def load_trajectory(path: str | Path) -> list[tuple[int, str, float, str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != TRAJECTORY_COLUMNS:
            raise ValidationError(f"{path}: header must be {','.join(TRAJECTORY_COLUMNS)}")
        out = []
        for lineno, row in enumerate(reader, 2):
            try:
                idx, cid, value, event = row
                item = (int(idx), cid, float(value), event)
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if event not in TRAJECTORY_EVENTS or not 0 <= item[2] <= 1:
                raise ValidationError(f"{path}:{lineno}: bad event or value out of [0, 1]")
            out.append(item)
    return out


# -- report.md ---------------------------------------------------------------------

def _size(v: int) -> str:
    if v >= 1024 * 1024 and v % (1024 * 1024) == 0:
        return f"{v // (1024 * 1024)}MB"
    if v >= 1024 and v % 1024 == 0:
        return f"{v // 1024}KB"
    return f"{v}B"


def _count(v: int) -> str:
    return f"{v // 1024}K" if v >= 1024 and v % 1024 == 0 else str(v)


def _bound(p: FeaturePredicate, fmt=str) -> str:
    if p.kind == "any":
        return "-"
    if p.kind == "equals":
        return fmt(p.value)
    if p.kind == "at_least":
        return f"≥{fmt(p.value)}"
    if p.kind == "at_most":
        return f"≤{fmt(p.value)}"
    return f"{fmt(p.value)} to {fmt(p.high)}"


def _message_cell(mfs: Mfs) -> str:
    lo, hi = mfs.predicate("msg_size_min"), mfs.predicate("msg_size_max")
    parts = []
    if lo.kind == "at_most" and hi.kind == "at_least":
        parts.append(f"mix of ≤{_size(lo.value)} & ≥{_size(hi.value)}")
    else:
        if lo.constrained:
            parts.append(_bound(lo, _size) if lo.kind in ("at_least", "equals") else f"smallest {_bound(lo, _size)}")
        if hi.constrained:
            parts.append(_bound(hi, _size) if hi.kind in ("at_most", "equals") else f"largest {_bound(hi, _size)}")
    mr = mfs.predicate("mr_count")
    if mr.constrained:
        parts.append(f"{_bound(mr, _count)} MRs")
    mr_size = mfs.predicate("mr_size_bytes")
    if mr_size.constrained:
        parts.append(f"MR size {_bound(mr_size, _size)}")
    if mfs.predicate("loopback").constrained:
        parts.append("with loopback" if mfs.predicate("loopback").value else "no loopback")
    for fid, name in (("src_device", "src"), ("dst_device", "dst")):
        p = mfs.predicate(fid)
        if p.constrained:
            parts.append(f"{name} device {p.value}")
    return " and ".join(parts) if parts else "-"


def _direction_cell(p: FeaturePredicate) -> str:
    if not p.constrained:
        return "-"
    return "Bi-" if p.value == "bidirectional" else "Uni-"


def _transport_cell(p: FeaturePredicate) -> str:
    return "-" if not p.constrained else str(p.value).replace("SEND_RECV", "SEND")


def _wqe_cell(p: FeaturePredicate) -> str:
    if p.kind == "at_most" and p.value <= 1:
        return "No"  # no doorbell batching
    return _bound(p)


def report_row(record: AnomalyRecord, rnic: str) -> tuple[str, ...]:
    symptom = "pause frame" if record.symptom == PAUSE_ANOMALY else "low throughput"
    mfs = record.mfs
    if mfs is None:
        return ("-", rnic, *["-"] * 8, f"{symptom} (unstable)")
    return (
        f"#{mfs.anomaly_id}",
        rnic,
        _direction_cell(mfs.predicate("direction")),
        _transport_cell(mfs.predicate("transport")),
        _bound(mfs.predicate("mtu_bytes"), _count),
        _wqe_cell(mfs.predicate("wqe_count")),
        _bound(mfs.predicate("sge_per_wqe")),
        _bound(mfs.predicate("wq_depth")),
        _message_cell(mfs),
        _bound(mfs.predicate("qp_count")),
        symptom,
    )


def render_report(records: Sequence[AnomalyRecord], rnic: str, result: SearchResult | None = None) -> str:
    lines = [f"# Anomaly report: {rnic}", ""]
    if result is not None:
        lines += [
            f"{len(records)} anomalies in {result.evals} evaluations "
            f"(+{result.mfs_evals} for MFS extraction, {result.tester_calls} tester calls).",
            "",
        ]
        if result.error:
            lines += [f"Search stopped early: {result.error}", ""]
    lines.append("| " + " | ".join(REPORT_COLUMNS) + " |")
    lines.append("|" + "|".join("---" for _ in REPORT_COLUMNS) + "|")
    for rec in records:
        lines.append("| " + " | ".join(report_row(rec, rnic)) + " |")
    if not records:
        lines += ["", "No anomalies found."]
    return "\n".join(lines) + "\n"


def parse_report_columns(text: str) -> tuple[str, ...]:
    for line in text.splitlines():
        if line.startswith("| #"):
            return tuple(c.strip() for c in line.strip("|").split("|"))
    raise ValidationError("report has no table header")


# -- all artifacts -----------------------------------------------------------------

def write_artifacts(out_dir: str | Path, result: SearchResult, rnic: str, manifest: dict) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "anomalies": out / "anomalies.json",
        "trajectory": out / "trajectory.csv",
        "report": out / "report.md",
        "manifest": out / "manifest.json",
    }
    paths["anomalies"].write_text(_dump(anomalies_document(result)))
    paths["trajectory"].write_text(trajectory_csv(result.trajectory))
    paths["report"].write_text(render_report(result.records, rnic, result))
    paths["manifest"].write_text(_dump(manifest))
    return paths
