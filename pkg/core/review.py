from dataclasses import dataclass
from typing import Dict, List

from core.allocator import AllocatorParams
from core.workload import ReplayResult


@dataclass
class CheckStatus:
    level: str  # "PASS" | "WARN" | "FAIL" | "INFO"
    title: str
    details: List[str]

    def to_dict(self) -> Dict:
        return {"level": self.level, "title": self.title, "details": list(self.details)}


def isolation_check(result: ReplayResult, domain_names: Dict[int, str]) -> CheckStatus:
    bad = [r for r in result.checks if r.violation_count]
    if not bad:
        return CheckStatus(
            "PASS",
            "Rowhammer isolation",
            [f"No cross-domain rows within the blast radius at {len(result.checks)} checkpoint(s)."],
        )
    details = [f"{sum(r.violation_count for r in bad)} violating row pairs over {len(bad)} checkpoint(s)."]
    for v in bad[0].violations[:5]:
        d1 = domain_names.get(v.domain1, "shared" if v.domain1 < 0 else str(v.domain1))
        d2 = domain_names.get(v.domain2, "shared" if v.domain2 < 0 else str(v.domain2))
        details.append(
            f"{v.rank_parity}/{v.side}: row {v.row1} ({d1}, pfn {v.pfn1}) next to row {v.row2} ({d2}, pfn {v.pfn2})"
        )
    return CheckStatus("FAIL", "Rowhammer isolation", details)


def audit_check(result: ReplayResult) -> CheckStatus:
    findings = result.findings
    if not findings:
        return CheckStatus("PASS", "Allocator state audit", ["Bitvectors, zones and ledger agree."])
    return CheckStatus("FAIL", "Allocator state audit", findings[:10])


def support_check(result: ReplayResult) -> CheckStatus:
    if result.supported:
        return CheckStatus("PASS", "Workload support", ["Every allocation request was served."])
    names = ", ".join(result.oom_domains[:5])
    more = len(result.oom_domains) - 5
    if more > 0:
        names += f" and {more} more"
    return CheckStatus(
        "WARN",
        "Workload support",
        [f"{result.oom_events} page requests ran out of memory ({names}).", "Run is unsupported by this mode."],
    )


def loss_bound_check(result: ReplayResult, params: AllocatorParams) -> CheckStatus:
    """Zone guard loss stays within n_guard/chunk_rows of reserved zone memory."""
    bound = params.n_guard / params.chunk_rows
    if params.mode == "buddy" or params.all_zonelets:
        return CheckStatus("INFO", "Guard-loss bound", ["No guard-fronted zones in this mode."])
    worst = 0.0
    for snap in result.timeline:
        if snap.zone_reserved_pages:
            worst = max(worst, snap.zone_guard_pages / snap.zone_reserved_pages)
    line = f"Worst zone guard loss {100 * worst:.2f}% of reserved zone memory (bound {100 * bound:.2f}%)."
    if worst > bound + 1e-12:
        return CheckStatus("FAIL", "Guard-loss bound", [line])
    return CheckStatus("PASS", "Guard-loss bound", [line])


def conservation_check(result: ReplayResult) -> CheckStatus:
    total = result.timeline[0].total
    broken = [s.tick for s in result.timeline if s.total != total]
    if broken:
        return CheckStatus("FAIL", "Conservation", [f"Page totals drift at ticks {broken[:5]}."])
    return CheckStatus(
        "PASS", "Conservation", [f"allocated + loss + stranded + free = {total} pages at every sample."]
    )


def overhead_check(summary: Dict) -> CheckStatus:
    return CheckStatus(
        "INFO",
        "Memory overhead",
        [
            f"Average overhead {100 * summary['avg_overhead_vs_requested']:.2f}% of requested memory "
            f"(peak {100 * summary['peak_overhead_vs_requested']:.2f}%).",
            f"Average overhead {100 * summary['avg_overhead_vs_total']:.3f}% of total memory "
            f"(loss {100 * summary['avg_loss_vs_total']:.3f}%, stranding {100 * summary['avg_stranded_vs_total']:.3f}%).",
        ],
    )


def review_run(result: ReplayResult, params: AllocatorParams, summary: Dict) -> List[CheckStatus]:
    names = {v: k for k, v in result.domains.items()}
    return [
        isolation_check(result, names),
        audit_check(result),
        support_check(result),
        loss_bound_check(result, params),
        conservation_check(result),
        overhead_check(summary),
    ]


def recommendations(summary: Dict, params: AllocatorParams) -> List[str]:
    recs = []
    if not summary.get("supported", True):
        if params.all_zonelets:
            recs.append(
                "Zonelet-only striping leaves about a third of memory usable; "
                "this mix does not fit. Compare against aegis mode on the same trace."
            )
        else:
            recs.append("The mix over-subscribes memory in this mode; reduce demand or compare modes.")
    if summary["avg_stranded_vs_total"] > 2 * summary["avg_loss_vs_total"] and params.chunk_rows > 8:
        recs.append(
            f"Stranding dominates loss; try a smaller chunk than {params.chunk_rows} rows "
            "or a higher switch threshold."
        )
    if summary["avg_loss_vs_total"] > summary["avg_stranded_vs_total"] and params.n_guard:
        tip = "a larger chunk size"
        if not params.expansion_enabled:
            tip += " or re-enabling zone expansion"
        recs.append(f"Guard loss dominates stranding; try {tip}.")
    return recs
