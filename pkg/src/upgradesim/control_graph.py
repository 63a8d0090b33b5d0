"""Coarsening of the resource graph into the upgrade control graph.

Two contractions: container/contained and composition edges merge their
endpoints (a host upgrades together with its hypervisor and composed disks);
then resources whose first execution level belongs to a split-mode or local
parallel-universe unit merge per sub-partition so they are scheduled as one.
VM vertices never merge; they are planned separately.
"""

from __future__ import annotations

from dataclasses import dataclass

from upgradesim.resource_graph import (
    DependencyKind,
    ExecutionLevel,
    ModificationType,
    Presence,
    ResourceGraph,
    UpgradeMethod,
    _CONTRACTED_KINDS,
)


@dataclass(frozen=True)
class GroupEdge:
    source: str
    target: str
    kind: DependencyKind
    presence: Presence
    incompatible: bool

    def describe(self) -> dict:
        return {
            "source": self.source,
            "target": self.target,
            "kind": self.kind.value,
            "presence": self.presence.value,
            "incompatible": self.incompatible,
        }


@dataclass
class ResourceGroup:
    """Control-graph vertex: resources upgraded together in one iteration."""

    group_id: str
    members: tuple[str, ...]

    def merged_levels(self, rg: ResourceGraph) -> list[list[tuple[str, ExecutionLevel]]]:
        """Level k of the group holds exactly the level-k entries of members."""
        depth = max((len(rg.resources[m].levels) for m in self.members if m in rg.resources), default=0)
        out: list[list[tuple[str, ExecutionLevel]]] = []
        for k in range(depth):
            slot = [
                (m, rg.resources[m].levels[k])
                for m in self.members
                if m in rg.resources and len(rg.resources[m].levels) > k
            ]
            out.append(slot)
        return out

    def first_levels(self, rg: ResourceGraph) -> list[tuple[str, ExecutionLevel]]:
        merged = self.merged_levels(rg)
        return merged[0] if merged else []

    def modification_types(self, rg: ResourceGraph) -> set[ModificationType]:
        return {
            rg.resources[m].modification_type
            for m in self.members
            if m in rg.resources
        }

    def has_remaining_changes(self, rg: ResourceGraph) -> bool:
        return any(rg.resources[m].levels for m in self.members if m in rg.resources)

    def any_deactivated(self, rg: ResourceGraph) -> bool:
        return any(
            not rg.resources[m].active
            for m in self.members
            if m in rg.resources and rg.resources[m].present
        )

    def describe(self, rg: ResourceGraph) -> dict:
        return {
            "group_id": self.group_id,
            "members": list(self.members),
            "modification_types": sorted(t.value for t in self.modification_types(rg)),
            "level_count": len(self.merged_levels(rg)),
        }


class ControlGraph:
    def __init__(self, groups: dict[str, ResourceGroup], edges: list[GroupEdge]):
        self.groups = groups
        self.edges = edges
        self.group_of: dict[str, str] = {}
        for group in groups.values():
            for member in group.members:
                self.group_of[member] = group.group_id

    def describe(self, rg: ResourceGraph) -> dict:
        return {
            "groups": [self.groups[k].describe(rg) for k in sorted(self.groups)],
            "edges": [e.describe() for e in self.edges],
        }


class _DisjointSet:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x: str) -> str:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the smaller id as root so group ids are content-derived
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def coarsen(rg: ResourceGraph) -> ControlGraph:
    """Contract the resource graph into resource groups.

    Edge contraction runs first, then method-based vertex contraction; a
    vertex already merged by edge contraction merges group-wise.
    """
    dsu = _DisjointSet(rg.resources.keys())

    for edge in rg.edges:
        if edge.kind in _CONTRACTED_KINDS:
            if edge.source in rg.resources and edge.target in rg.resources:
                dsu.union(edge.source, edge.target)

    for rid in sorted(rg.resources):
        res = rg.resources[rid]
        level = res.first_level()
        if level is None:
            continue
        unit = rg.upgrade_units.get(level.unit_id)
        if unit is None or unit.method == UpgradeMethod.ROLLING:
            continue
        if unit.partitions is None:
            for other in sorted(unit.members):
                if other in rg.resources:
                    dsu.union(rid, other)
            continue
        for partition in unit.partitions:
            if rid in partition:
                for other in partition:
                    if other in rg.resources:
                        dsu.union(rid, other)

    members_by_root: dict[str, list[str]] = {}
    for rid in sorted(rg.resources):
        members_by_root.setdefault(dsu.find(rid), []).append(rid)

    groups: dict[str, ResourceGroup] = {}
    group_of: dict[str, str] = {}
    for root in sorted(members_by_root):
        members = tuple(sorted(members_by_root[root]))
        group_id = f"g:{members[0]}"
        groups[group_id] = ResourceGroup(group_id=group_id, members=members)
        for member in members:
            group_of[member] = group_id

    seen: set[tuple] = set()
    edges: list[GroupEdge] = []
    for edge in rg.edges:
        if edge.kind in _CONTRACTED_KINDS:
            continue
        src = group_of.get(edge.source)
        dst = group_of.get(edge.target)
        if src is None or dst is None or src == dst:
            continue
        key = (src, dst, edge.kind, edge.presence, edge.incompatible)
        if key in seen:
            continue
        seen.add(key)
        edges.append(GroupEdge(src, dst, edge.kind, edge.presence, edge.incompatible))
    return ControlGraph(groups, edges)


def update_control_graph(cg: ControlGraph, rg: ResourceGraph) -> ControlGraph:
    """Bring the control graph in line with the resource graph.

    Groups are recomputed from scratch; ids are content-derived, so groups
    whose member set did not change keep their id.
    """
    return coarsen(rg)
