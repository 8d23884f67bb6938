import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Union

import pandas as pd

from core.allocator import PageAllocator
from core.errors import MetricsError

logger = logging.getLogger(__name__)

TIMELINE_COLUMNS = [
    "tick",
    "allocated",
    "loss",
    "stranded",
    "free",
    "overhead_vs_requested",
    "overhead_vs_total",
]
FORMATS = ("csv", "json")


@dataclass(frozen=True)
class MetricsSnapshot:
    tick: int
    allocated: int
    loss: int
    stranded: int
    free: int
    requested: int
    pt_pages: int = 0
    pt_loss: int = 0
    zone_guard_pages: int = 0
    zone_reserved_pages: int = 0

    @property
    def total(self) -> int:
        return self.allocated + self.loss + self.stranded + self.free

    @property
    def overhead(self) -> int:
        return self.loss + self.stranded

    @property
    def overhead_vs_requested(self) -> float:
        return self.overhead / self.requested if self.requested else 0.0

    @property
    def overhead_vs_total(self) -> float:
        return self.overhead / self.total if self.total else 0.0

    def row(self) -> Dict:
        return {
            "tick": self.tick,
            "allocated": self.allocated,
            "loss": self.loss,
            "stranded": self.stranded,
            "free": self.free,
            "overhead_vs_requested": self.overhead_vs_requested,
            "overhead_vs_total": self.overhead_vs_total,
        }


def snapshot(
    state: PageAllocator,
    tick: int = 0,
    pt_pages: int = 0,
    pt_loss: int = 0,
) -> MetricsSnapshot:
    """
    Page breakdown of `state` at `tick`.

    Page-table pages charged outside the allocator (siloz accounting) are
    taken out of the free pool, as requested memory plus guard loss.
    """
    pages = state.page_breakdown()
    total = state.geo.total_pages
    charge = pt_pages + pt_loss
    if charge > pages["free"]:
        logger.warning("page-table charge of %d pages exceeds the %d free pages", charge, pages["free"])
        pt_pages = min(pt_pages, pages["free"])
        pt_loss = min(pt_loss, pages["free"] - pt_pages)
    snap = MetricsSnapshot(
        tick=tick,
        allocated=pages["allocated"] + pt_pages,
        loss=pages["loss"] + pt_loss,
        stranded=pages["stranded"],
        free=pages["free"] - pt_pages - pt_loss,
        requested=pages["allocated"] + pt_pages,
        pt_pages=pt_pages,
        pt_loss=pt_loss,
        zone_guard_pages=pages["zone_guard_pages"],
        zone_reserved_pages=pages["zone_reserved_pages"],
    )
    if min(snap.allocated, snap.loss, snap.stranded, snap.free) < 0 or snap.total != total:
        raise MetricsError(
            f"tick {tick}: allocated {snap.allocated} + loss {snap.loss} + stranded {snap.stranded}"
            f" + free {snap.free} != {total} pages"
        )
    return snap


def timeline_frame(timeline: Sequence[MetricsSnapshot]) -> pd.DataFrame:
    return pd.DataFrame([s.row() for s in timeline], columns=TIMELINE_COLUMNS)


def summarize(
    timeline: Sequence[MetricsSnapshot],
    supported: bool = True,
    mode: Optional[str] = None,
    label: Optional[str] = None,
    oom_events: int = 0,
) -> Dict:
    if not timeline:
        raise MetricsError("cannot summarize an empty timeline")
    df = timeline_frame(timeline)
    total = timeline[0].total
    loss_frac = df["loss"] / total
    stranded_frac = df["stranded"] / total
    return {
        "mode": mode,
        "label": label or mode,
        "samples": len(df),
        "total_pages": int(total),
        "supported": bool(supported),
        "oom_events": int(oom_events),
        "avg_overhead_vs_requested": float(df["overhead_vs_requested"].mean()),
        "peak_overhead_vs_requested": float(df["overhead_vs_requested"].max()),
        "avg_overhead_vs_total": float(df["overhead_vs_total"].mean()),
        "peak_overhead_vs_total": float(df["overhead_vs_total"].max()),
        "avg_loss_vs_total": float(loss_frac.mean()),
        "avg_stranded_vs_total": float(stranded_frac.mean()),
        "avg_loss_pages": float(df["loss"].mean()),
        "avg_stranded_pages": float(df["stranded"].mean()),
        "peak_loss_pages": int(df["loss"].max()),
        "peak_stranded_pages": int(df["stranded"].max()),
        "peak_allocated_pages": int(df["allocated"].max()),
    }


def export(
    data: Union[Sequence[MetricsSnapshot], Dict],
    path: Union[str, Path],
    fmt: Optional[str] = None,
) -> Path:
    """Write a timeline or a summary as CSV or JSON (format from the suffix by default)."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in FORMATS:
        raise MetricsError(f"unsupported export format {fmt!r}; expected csv or json")
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, dict):
        if fmt == "json":
            path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        else:
            pd.DataFrame([data]).to_csv(path, index=False)
        return path
    df = timeline_frame(data)
    if fmt == "csv":
        df.to_csv(path, index=False)
    else:
        df.to_json(path, orient="records", indent=2)
    return path


def read_timeline(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if path.suffix.lower() == ".json":
        df = pd.read_json(path, orient="records")
    else:
        df = pd.read_csv(path)
    missing = [c for c in TIMELINE_COLUMNS if c not in df.columns]
    if missing:
        raise MetricsError(f"{path}: missing timeline columns {missing}")
    return df[TIMELINE_COLUMNS]


def read_summary(path: Union[str, Path]) -> Dict:
    path = Path(path)
    if not path.exists():
        raise MetricsError(f"{path}: no such summary file")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MetricsError(f"{path}: not a JSON summary ({e})") from e
    if not isinstance(data, dict) or "avg_overhead_vs_total" not in data:
        raise MetricsError(f"{path}: not a run summary")
    return data


def compare(summaries: Iterable[Dict]) -> pd.DataFrame:
    """One row per run, overheads in percent, ready for printing."""
    rows = []
    for s in summaries:
        rows.append(
            {
                "run": s.get("label") or s.get("mode") or "?",
                "mode": s.get("mode"),
                "supported": s.get("supported", True),
                "overhead_vs_requested_%": round(100 * s["avg_overhead_vs_requested"], 2),
                "peak_vs_requested_%": round(100 * s["peak_overhead_vs_requested"], 2),
                "overhead_vs_total_%": round(100 * s["avg_overhead_vs_total"], 3),
                "loss_vs_total_%": round(100 * s["avg_loss_vs_total"], 3),
                "stranded_vs_total_%": round(100 * s["avg_stranded_vs_total"], 3),
                "oom_events": s.get("oom_events", 0),
            }
        )
    return pd.DataFrame(rows)
