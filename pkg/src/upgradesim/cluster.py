"""Simulated cluster state: hosts, components, VMs, tenants.

This is the single mutable source of truth the engine acts on. Everything
else (graphs, planners) reads snapshots of it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from upgradesim.errors import InconsistentConfigError, UnknownHostError, UnknownResourceError

HOST_KINDS = {"compute-host", "storage-host", "controller-host", "network-host"}


def host_kind(roles: frozenset[str]) -> str:
    for role, kind in (
        ("compute", "compute-host"),
        ("storage", "storage-host"),
        ("controller", "controller-host"),
        ("network", "network-host"),
    ):
        if role in roles:
            return kind
    return "other"


@dataclass
class SimResource:
    """A host or infrastructure component tracked by the simulator."""

    resource_id: str
    kind: str
    roles: frozenset[str] = frozenset()
    installed: dict[str, str] = field(default_factory=dict)
    primary_product: str | None = None
    active: bool = True
    up: bool = True
    present: bool = True  # False for to-be-added resources not yet deployed
    removed: bool = False
    container: str | None = None  # host id for contained components
    constituents: tuple[str, ...] = ()  # aggregation sponsors (virtual storage)
    serves: tuple[str, ...] = ()  # hosts whose VM operations this resource backs
    peers: tuple[str, ...] = ()
    capacity: int = 0
    capacity_after_upgrade: int = 0
    initial_primary_version: str | None = None

    @property
    def is_host(self) -> bool:
        return self.kind in HOST_KINDS

    def primary_state(self) -> tuple[str, str] | None:
        if self.primary_product is None:
            return None
        version = self.installed.get(self.primary_product)
        if version is None:
            return None
        return (self.primary_product, version)

    @property
    def in_service(self) -> bool:
        return self.present and self.up and self.active and not self.removed


@dataclass
class VmState:
    vm_id: str
    tenant_id: str
    group_id: str
    host: str | None
    version: str = "1"
    up: bool = True


@dataclass
class TenantSLA:
    """Per-tenant elasticity terms plus live bookkeeping."""

    tenant_id: str
    min_vms: int
    max_vms: int
    scaling_adjustment: int
    cooldown_ms: int
    committed: int = 0
    last_scaling_at: int | None = None
    vm_seq: int = 0


@dataclass
class ClusterState:
    resources: dict[str, SimResource] = field(default_factory=dict)
    vms: dict[str, VmState] = field(default_factory=dict)
    tenants: dict[str, TenantSLA] = field(default_factory=dict)
    clock: int = 0

    # -- lookups --------------------------------------------------------------

    def resource(self, resource_id: str) -> SimResource:
        try:
            return self.resources[resource_id]
        except KeyError:
            raise UnknownResourceError(f"unknown resource {resource_id!r}") from None

    def host(self, host_id: str) -> SimResource:
        res = self.resources.get(host_id)
        if res is None or not res.is_host:
            raise UnknownHostError(f"unknown host {host_id!r}")
        return res

    def hosts(self) -> list[SimResource]:
        return [r for r in self._sorted_resources() if r.is_host and not r.removed]

    def hosts_with_role(self, role: str) -> list[str]:
        return [r.resource_id for r in self.hosts() if role in r.roles]

    def components_on(self, host_id: str) -> list[SimResource]:
        return [
            r
            for r in self._sorted_resources()
            if r.container == host_id and not r.removed
        ]

    def hypervisor_of(self, host_id: str) -> SimResource | None:
        for comp in self.components_on(host_id):
            if comp.kind == "hypervisor":
                return comp
        return None

    def primary_component(self, resource_id: str) -> tuple[str, str]:
        state = self.resource(resource_id).primary_state()
        if state is None:
            raise InconsistentConfigError(
                f"resource {resource_id!r} has no primary component installed"
            )
        return state

    def storage_backend_of(self, host_id: str) -> SimResource | None:
        """The in-service virtual storage currently backing a compute host."""
        for res in self._sorted_resources():
            if res.kind != "virtual-storage" or res.removed or not res.present:
                continue
            if host_id in res.serves:
                return res
        return None

    def _sorted_resources(self) -> list[SimResource]:
        return [self.resources[k] for k in sorted(self.resources)]

    # -- placement ------------------------------------------------------------

    def vms_on(self, host_id: str) -> list[VmState]:
        return [
            self.vms[v]
            for v in sorted(self.vms)
            if self.vms[v].host == host_id and self.vms[v].up
        ]

    def effective_capacity(self, host_id: str) -> int:
        res = self.host(host_id)
        hv = self.hypervisor_of(host_id)
        if (
            hv is not None
            and hv.initial_primary_version is not None
            and hv.primary_state() is not None
            and hv.primary_state()[1] != hv.initial_primary_version
        ):
            return res.capacity_after_upgrade
        return res.capacity

    def free_slots(self, host_id: str) -> int:
        res = self.host(host_id)
        if not res.in_service or "compute" not in res.roles:
            return 0
        hv = self.hypervisor_of(host_id)
        if hv is not None and not hv.in_service:
            return 0
        return self.effective_capacity(host_id) - len(self.vms_on(host_id))

    def host_can_run_vms(self, host_id: str) -> bool:
        res = self.resources.get(host_id)
        if res is None or not res.in_service or "compute" not in res.roles:
            return False
        hv = self.hypervisor_of(host_id)
        return hv is None or hv.in_service

    def anti_affinity_ok(self, vm_id: str, host_id: str) -> bool:
        vm = self.vms[vm_id]
        for other in self.vms_on(host_id):
            if (
                other.vm_id != vm_id
                and other.tenant_id == vm.tenant_id
                and other.group_id == vm.group_id
            ):
                return False
        return True

    def used_compute_hosts(self) -> list[str]:
        return [h for h in self.hosts_with_role("compute") if self.vms_on(h)]

    def group_members(self, tenant_id: str, group_id: str) -> list[VmState]:
        return [
            self.vms[v]
            for v in sorted(self.vms)
            if self.vms[v].tenant_id == tenant_id and self.vms[v].group_id == group_id
        ]

    def tenant_vms(self, tenant_id: str) -> list[VmState]:
        return [self.vms[v] for v in sorted(self.vms) if self.vms[v].tenant_id == tenant_id]

    def clone(self) -> "ClusterState":
        return copy.deepcopy(self)

    def validate(self) -> None:
        """Raise when the configuration has dangling references."""
        for res in self.resources.values():
            if res.container is not None and res.container not in self.resources:
                raise InconsistentConfigError(
                    f"{res.resource_id}: container {res.container!r} does not exist"
                )
            for ref in (*res.constituents, *res.serves, *res.peers):
                if ref not in self.resources:
                    raise InconsistentConfigError(
                        f"{res.resource_id}: dependency endpoint {ref!r} does not exist"
                    )
        for vm in self.vms.values():
            if vm.host is not None and vm.host not in self.resources:
                raise InconsistentConfigError(
                    f"vm {vm.vm_id}: placed on unknown host {vm.host!r}"
                )
            if vm.tenant_id not in self.tenants:
                raise InconsistentConfigError(
                    f"vm {vm.vm_id}: unknown tenant {vm.tenant_id!r}"
                )
        for host_id in self.hosts_with_role("compute"):
            placed = self.vms_on(host_id)
            if len(placed) > self.effective_capacity(host_id):
                raise InconsistentConfigError(
                    f"host {host_id}: {len(placed)} VMs exceed capacity"
                )
            seen: set[tuple[str, str]] = set()
            for vm in placed:
                key = (vm.tenant_id, vm.group_id)
                if key in seen:
                    raise InconsistentConfigError(
                        f"host {host_id}: two VMs of anti-affinity group {key} co-located"
                    )
                seen.add(key)
