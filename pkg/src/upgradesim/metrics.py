"""Availability and SLA accounting over simulation event logs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from upgradesim.actions import ms_to_seconds
from upgradesim.engine import EventLog


@dataclass(frozen=True)
class OutageRecord:
    subject: str  # vm id
    tenant: str
    group: str
    start: int
    end: int
    cause: str  # migration | host-failure | vm-upgrade

    @property
    def duration_ms(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SlaViolation:
    tenant: str
    start: int
    end: int
    impacted_vms: int

    def __post_init__(self) -> None:
        if self.impacted_vms < 1:
            raise ValueError("a violation impacts at least one VM")

    @property
    def duration_ms(self) -> int:
        return self.end - self.start


@dataclass
class TenantPenalty:
    tenant: str
    violation_count: int
    min_impacted: int
    max_impacted: int
    total_duration_ms: int
    weighted_ms: int  # sum of duration_ms * impacted^2; exact integer

    @property
    def penalty_q(self) -> float:
        """Penalty in units of the quadratic penalty rate."""
        return self.weighted_ms / 1000


@dataclass
class PenaltyReport:
    per_tenant: dict[str, TenantPenalty] = field(default_factory=dict)

    @property
    def average_total_duration_s(self) -> float:
        if not self.per_tenant:
            return 0.0
        return sum(t.total_duration_ms for t in self.per_tenant.values()) / len(self.per_tenant) / 1000

    @property
    def average_penalty_q(self) -> float:
        if not self.per_tenant:
            return 0.0
        return sum(t.weighted_ms for t in self.per_tenant.values()) / len(self.per_tenant) / 1000


def vm_outages(log: EventLog) -> list[OutageRecord]:
    out = []
    for record in log.of_kind("vm-outage"):
        out.append(
            OutageRecord(
                subject=record["vm"],
                tenant=record["tenant"],
                group=record["group"],
                start=record["start"],
                end=record["end"],
                cause=record["cause"],
            )
        )
    out.sort(key=lambda r: (r.start, r.subject))
    return out


def per_vm_outage_totals(log: EventLog) -> dict[str, int]:
    totals: dict[str, int] = {}
    for rec in vm_outages(log):
        totals[rec.subject] = totals.get(rec.subject, 0) + rec.duration_ms
    return totals


def _merge_intervals(intervals: list[tuple[int, int]]) -> list[tuple[int, int, int]]:
    """Merge into maximal busy intervals; third field is max overlap depth."""
    events: list[tuple[int, int]] = []
    for start, end in intervals:
        events.append((start, +1))
        events.append((end, -1))
    events.sort()
    merged: list[tuple[int, int, int]] = []
    depth = 0
    window_start = 0
    max_depth = 0
    for at, delta in events:
        if depth == 0 and delta > 0:
            window_start = at
            max_depth = 0
        depth += delta
        max_depth = max(max_depth, depth)
        if depth == 0:
            merged.append((window_start, at, max_depth))
    return merged


def compute_application_outage(log: EventLog, tenants: list[str]) -> dict[str, int]:
    """Per-tenant time the application layer was actually impacted.

    A tenant with one committed VM is impacted whenever that VM is down; a
    tenant with redundancy is impacted only while two or more VMs of one
    anti-affinity group are down at once.
    """
    outages = vm_outages(log)
    committed = _committed_timeline(log)
    result: dict[str, int] = {t: 0 for t in tenants}
    for tenant in tenants:
        records = [r for r in outages if r.tenant == tenant]
        by_group: dict[str, list[OutageRecord]] = {}
        for rec in records:
            by_group.setdefault(rec.group, []).append(rec)
        total = 0
        for group_records in by_group.values():
            total += _overlap_at_depth(group_records, 2)
        for rec in records:
            if _committed_at(committed, tenant, rec.start) == 1:
                total += rec.duration_ms
        result[tenant] = total
    return result


def _overlap_at_depth(records: list[OutageRecord], depth: int) -> int:
    events: list[tuple[int, int]] = []
    for rec in records:
        events.append((rec.start, +1))
        events.append((rec.end, -1))
    events.sort()
    level = 0
    total = 0
    prev = 0
    for at, delta in events:
        if level >= depth:
            total += at - prev
        level += delta
        prev = at
    return total


def _committed_timeline(log: EventLog) -> dict[str, list[tuple[int, int]]]:
    timeline: dict[str, list[tuple[int, int]]] = {}
    for record in log.records:
        if record["kind"] == "tenant-committed":
            timeline.setdefault(record["tenant"], []).append((record["at"], record["count"]))
        elif record["kind"] == "tenant-initial":
            timeline.setdefault(record["tenant"], []).insert(0, (record["at"], record["count"]))
    return timeline


def _committed_at(timeline: dict[str, list[tuple[int, int]]], tenant: str, at: int) -> int:
    count = 0
    for ts, value in timeline.get(tenant, []):
        if ts <= at:
            count = value
    return count


def compute_sla_violations(log: EventLog, tenants: list[str]) -> list[SlaViolation]:
    """Maximal intervals where a tenant's live VM count sits below the
    committed count; impact is the peak number of simultaneously down VMs."""
    outages = vm_outages(log)
    violations: list[SlaViolation] = []
    for tenant in tenants:
        records = [r for r in outages if r.tenant == tenant and r.duration_ms > 0]
        for start, end, depth in _merge_intervals([(r.start, r.end) for r in records]):
            violations.append(SlaViolation(tenant=tenant, start=start, end=end, impacted_vms=depth))
    violations.sort(key=lambda v: (v.start, v.tenant))
    return violations


def quadratic_penalty(violations: list[SlaViolation], rate: float = 1.0) -> float:
    """Penalty in rate units: duration (s) weighted by impacted capacity squared.

    Accumulated in integer milliseconds so that single-VM-impact runs satisfy
    penalty == rate * total duration exactly.
    """
    weighted_ms = sum(v.duration_ms * (v.impacted_vms**2) for v in violations)
    return rate * ms_to_seconds(weighted_ms)


def penalty_report(violations: list[SlaViolation], tenants: list[str]) -> PenaltyReport:
    report = PenaltyReport()
    for tenant in tenants:
        mine = [v for v in violations if v.tenant == tenant]
        report.per_tenant[tenant] = TenantPenalty(
            tenant=tenant,
            violation_count=len(mine),
            min_impacted=min((v.impacted_vms for v in mine), default=0),
            max_impacted=max((v.impacted_vms for v in mine), default=0),
            total_duration_ms=sum(v.duration_ms for v in mine),
            weighted_ms=sum(v.duration_ms * (v.impacted_vms**2) for v in mine),
        )
    return report


@dataclass
class ComparisonRow:
    method: str
    total_duration_s: float
    violations_min: float
    violations_max: float
    impacted_min: float
    impacted_max: float
    avg_total_violation_s: float
    penalty_q: float

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "total_duration_s": round(self.total_duration_s, 2),
            "violations_min": round(self.violations_min, 2),
            "violations_max": round(self.violations_max, 2),
            "impacted_min": round(self.impacted_min, 2),
            "impacted_max": round(self.impacted_max, 2),
            "avg_total_violation_s": round(self.avg_total_violation_s, 2),
            "penalty_q": round(self.penalty_q, 2),
        }


def comparison_row(method: str, duration_s: float, reports: list[PenaltyReport]) -> ComparisonRow:
    """Aggregate one method's runs: per-tenant numbers average across runs,
    then min/max span the tenants."""
    tenants = sorted({t for r in reports for t in r.per_tenant})
    counts, impacted_min, impacted_max, totals, penalties = [], [], [], [], []
    for tenant in tenants:
        rows = [r.per_tenant[tenant] for r in reports if tenant in r.per_tenant]
        counts.append(sum(x.violation_count for x in rows) / len(rows))
        impacted_min.append(min((x.min_impacted for x in rows if x.violation_count), default=0))
        impacted_max.append(max(x.max_impacted for x in rows))
        totals.append(sum(x.total_duration_ms for x in rows) / len(rows))
        penalties.append(sum(x.penalty_q for x in rows) / len(rows))
    return ComparisonRow(
        method=method,
        total_duration_s=duration_s,
        violations_min=min(counts, default=0.0),
        violations_max=max(counts, default=0.0),
        impacted_min=min((x for x in impacted_min if x), default=0),
        impacted_max=max(impacted_max, default=0),
        avg_total_violation_s=(sum(totals) / len(totals) / 1000) if totals else 0.0,
        penalty_q=(sum(penalties) / len(penalties)) if penalties else 0.0,
    )


def comparison_csv(rows: list[ComparisonRow]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(
        buffer,
        fieldnames=[
            "method",
            "total_duration_s",
            "violations_min",
            "violations_max",
            "impacted_min",
            "impacted_max",
            "avg_total_violation_s",
            "penalty_q",
        ],
    )
    writer.writeheader()
    for row in rows:
        writer.writerow(row.as_dict())
    return buffer.getvalue()
