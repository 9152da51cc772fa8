"""The capability engine: one logical state machine for the whole machine.

Owns both derivation trees (memory regions and trust domains), validates and
executes the eleven monitor calls, routes interrupts over the domain tree,
and publishes cross-core effects through per-core update queues under the
two-barrier protocol.  Operations with overlapping targets execute one at a
time; in concurrent mode the platform supplies an IPI-aware lock.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

from . import attest as attest_mod
from .domains import (
    ALL_CALLS_MASK, REG_MASK, NUM_REGS, NUM_VECTORS, ApiCall, CapEntry,
    CapKind, ChainEntry, ChildKind, CoreState, DomainNode, DomainState,
    InterruptPolicy, IrqFrame, PayloadCode, Policies, Update, UpdateKind,
    Visibility, zero_registers,
)
from .errors import ErrorCode, MonitorError, deny
from .machine import FAULT_VECTOR, TIMER_VECTOR
from .regions import (
    AttrFlags, PhysRange, RegionAttributes, RegionStatus, RegionTree, Rights,
)
from .trace import OpRecord, TraceLog


@dataclass
class CapDescription:
    """Enumerate output for a single owned capability."""

    kind: str
    status: str = ""
    start: int = 0
    end: int = 0
    rights: str = ""
    attributes: str = ""
    state: str = ""
    children: list[tuple[str, str, int, int, str]] = field(default_factory=list)

    def render(self) -> str:
        if self.kind == "region":
            line = (f"region {self.status} {self.start:#x} {self.end:#x} "
                    f"{self.rights}")
            if self.attributes:
                line += f" {self.attributes}"
            for name, kind, start, end, rights in self.children:
                line += f" | {kind} {start:#x} {end:#x} {name} {rights}"
            return line
        if self.kind == "domain":
            return f"domain {self.state}"
        return f"channel {self.state}"


class Engine:
    def __init__(self, platform, seed: int = 0, measurement=None,
                 debug_checks: bool = False):
        self.platform = platform
        self.seed = seed
        self.measurement = measurement
        self.debug_checks = debug_checks
        self.tree = RegionTree()
        self.domains: dict[int, DomainNode] = {}
        self._next_domain = 0
        self._next_channel = 0
        self.cores = [CoreState(i) for i in range(platform.ncores)]
        self.trace = TraceLog()
        self.root_region: Optional[int] = None
        self.max_domains = platform.config.metadata_pool
        self.quantum: Optional[int] = None
        self._quantum_deadlines: dict[int, tuple[int, int]] = {}
        self.delivered: list[tuple[int, int, int, int]] = []
        self._buffers: dict[int, tuple[bytes, int]] = {}
        self._next_token = 1

    # ------------------------------------------------------------------
    # serialization of operations
    # ------------------------------------------------------------------

    @contextmanager
    def _serialized(self, core: Optional[int]):
        if self.platform.concurrent:
            self.platform.acquire_engine(core)
            try:
                yield
            finally:
                self.platform.release_engine()
        else:
            yield

    def _record(self, op: str, core: int, args: dict, fn):
        try:
            results = fn()
        except MonitorError as exc:
            self.trace.record(OpRecord(self.platform.now, core, op, args,
                                       False, exc.code.name))
            raise
        self.trace.record(OpRecord(self.platform.now, core, op, args,
                                   True, "", results or {}))
        return results

    # ------------------------------------------------------------------
    # boot
    # ------------------------------------------------------------------

    def boot_td0(self) -> int:
        config = self.platform.config
        td0 = self._new_domain(parent=None)
        td0.policies = Policies(
            cores=(1 << config.cores) - 1,
            mon_api=ALL_CALLS_MASK,
            user_calls=True,
            receive_after_seal=True,
            interrupts={v: InterruptPolicy(Visibility.DELIVER, 0)
                        for v in range(NUM_VECTORS)},
        )
        for core in range(config.cores):
            td0.regs[core] = zero_registers()
        td0.register_hash = self._register_hash(td0)
        td0.state = DomainState.SEALED

        root_range = PhysRange(config.monitor_reserved.end, config.address_top)
        self.root_region = self.tree.create_root(td0.id, root_range, Rights.RWX)
        td0.owned.insert(CapEntry(CapKind.REGION, self.root_region))

        boot_args = {
            "mem": config.memory_size,
            "reserved_end": config.monitor_reserved.end,
            "top": config.address_top,
            "cores": config.cores,
            "td0": td0.id,
            "root": self.root_region,
        }
        self.trace.record(OpRecord(0, -1, "boot", boot_args, True, "", {}))

        ram = PhysRange(config.monitor_reserved.end, config.memory_size)
        for dev_cfg in config.devices:
            dev = self._new_domain(parent=td0.id)
            dev.is_device = True
            dev.device_vector = dev_cfg.vector
            dev.mmio = dev_cfg.mmio
            dev.register_hash = self._register_hash(dev)
            dev.state = DomainState.SEALED
            carve_id = self.tree.carve(td0.id, self.root_region,
                                       dev_cfg.mmio, Rights.RW)
            self.tree.nodes[carve_id].owner = dev.id
            dev.owned.insert(CapEntry(CapKind.REGION, carve_id))
            alias_id = self.tree.alias(td0.id, self.root_region, ram, Rights.RW)
            self.tree.nodes[alias_id].owner = dev.id
            dev.owned.insert(CapEntry(CapKind.REGION, alias_id))
            td0.owned.insert(CapEntry(CapKind.CHANNEL, dev.id))
            dev.children.append((ChildKind.CHANNEL, self._mint_channel()))
            self.trace.record(OpRecord(0, -1, "devboot", {
                "dev": dev.id, "name": dev_cfg.name, "vector": dev_cfg.vector,
                "mmio_carve": carve_id, "mmio_start": dev_cfg.mmio.start,
                "mmio_end": dev_cfg.mmio.end, "ram_alias": alias_id,
                "ram_start": ram.start, "ram_end": ram.end,
            }, True, "", {}))

        for core in self.cores:
            core.current = td0.id
        self._refresh_views({c.id for c in self.cores})
        return td0.id

    def _new_domain(self, parent: Optional[int]) -> DomainNode:
        dom = DomainNode(id=self._next_domain, parent=parent)
        self._next_domain += 1
        self.domains[dom.id] = dom
        return dom

    def _mint_channel(self) -> int:
        self._next_channel += 1
        return self._next_channel

    def _register_hash(self, dom: DomainNode) -> bytes:
        h = hashlib.sha256()
        for core in range(self.platform.ncores):
            if not dom.policies.cores & (1 << core):
                continue
            h.update(core.to_bytes(2, "little"))
            for value in dom.core_regs(core):
                h.update(value.to_bytes(8, "little", signed=False))
        return h.digest()

    # ------------------------------------------------------------------
    # lookups and helpers
    # ------------------------------------------------------------------

    def domain(self, dom_id: int) -> DomainNode:
        dom = self.domains.get(dom_id)
        if dom is None:
            raise deny(ErrorCode.UNKNOWN_DOMAIN, f"domain {dom_id}")
        return dom

    def current_domain(self, core: int) -> int:
        return self.cores[core].current

    def _live_caller(self, caller: int) -> DomainNode:
        dom = self.domain(caller)
        if not dom.live:
            raise deny(ErrorCode.DOMAIN_REVOKED, f"caller {caller}")
        return dom

    def _gate(self, dom: DomainNode, call: ApiCall):
        if not dom.policies.allows(call):
            raise deny(ErrorCode.POLICY_DENIED, f"{call.name} bit clear")

    def _resolve(self, dom: DomainNode, handle: int) -> CapEntry:
        entry = dom.owned.get(handle)
        if entry is None:
            raise deny(ErrorCode.BAD_HANDLE, f"handle {handle}")
        return entry

    def _resolve_td(self, dom: DomainNode, handle: int,
                    allow_channel: bool = False) -> DomainNode:
        entry = self._resolve(dom, handle)
        if entry.kind is CapKind.REGION:
            raise deny(ErrorCode.BAD_HANDLE, "expected a domain capability")
        if entry.kind is CapKind.CHANNEL and not allow_channel:
            raise deny(ErrorCode.CHANNEL_NO_CONTROL,
                       "channels cannot schedule, configure, or revoke")
        target = self.domain(entry.ref)
        if not target.live:
            raise deny(ErrorCode.DOMAIN_REVOKED, f"domain {target.id}")
        return target

    def _running_core(self, dom_id: int) -> Optional[int]:
        for core in self.cores:
            if core.current == dom_id:
                return core.id
        return None

    def _cores_running(self, dom_ids: set[int]) -> set[int]:
        return {c.id for c in self.cores if c.current in dom_ids}

    def _visibility(self, dom_id: int, vector: int) -> Visibility:
        return self.domains[dom_id].policies.interrupt(vector).visibility

    # ------------------------------------------------------------------
    # views
    # ------------------------------------------------------------------

    def view_cache_for(self, dom_id: int) -> list[tuple[int, int, int]]:
        dom = self.domains.get(dom_id)
        if dom is None or not dom.live:
            return []
        cache = []
        for _, entry in dom.owned.entries():
            if entry.kind is not CapKind.REGION:
                continue
            for seg in self.tree.effective_view(entry.ref):
                cache.append((seg.range.start, seg.range.end, int(seg.rights)))
        return cache

    def _refresh_views(self, cores: set[int]):
        for core in cores:
            self.platform.cores[core].local_view = \
                self.view_cache_for(self.cores[core].current)

    def domain_may_access(self, dom_id: int, addr: int, kind: str) -> bool:
        bit = {"R": 4, "W": 2, "X": 1}[kind]
        for start, end, rights in self.view_cache_for(dom_id):
            if start <= addr < end and rights & bit:
                return True
        return False

    def page_access_map(self) -> dict[int, dict[int, tuple[int, bool]]]:
        """Per-domain, per-page access as the engine sees it (for the oracle diff)."""
        out: dict[int, dict[int, tuple[int, bool]]] = {}
        for dom in self.domains.values():
            if not dom.live:
                continue
            pages: dict[int, tuple[int, bool]] = {}
            for _, entry in dom.owned.entries():
                if entry.kind is not CapKind.REGION:
                    continue
                for seg in self.tree.effective_view(entry.ref):
                    excl = seg.status is RegionStatus.EXCLUSIVE
                    for page in seg.range.pages():
                        rights, old_excl = pages.get(page, (0, False))
                        pages[page] = (rights | int(seg.rights),
                                       old_excl or excl)
            out[dom.id] = pages
        return out

    # ------------------------------------------------------------------
    # domain-facing memory access (used by the scenario runner)
    # ------------------------------------------------------------------

    def domain_read(self, core: int, addr: int) -> tuple[bool, int]:
        ok, value = self.platform.read_mem(core, addr)
        if not ok:
            self.route_interrupt(core, FAULT_VECTOR)
        return ok, value

    def domain_write(self, core: int, addr: int, value: int) -> bool:
        ok = self.platform.write_mem(core, addr, value)
        if not ok:
            self.route_interrupt(core, FAULT_VECTOR)
        return ok

    # ------------------------------------------------------------------
    # monitor calls
    # ------------------------------------------------------------------

    def create(self, caller: int) -> int:
        with self._serialized(self._running_core(caller)):
            return self._record("create", self._core_of(caller),
                                {"caller": caller}, lambda: self._create(caller)
                                )["handle"]

    def _create(self, caller: int) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.CREATE)
        if dom.state is not DomainState.SEALED or \
                self._running_core(caller) is None:
            raise deny(ErrorCode.NOT_RUNNING, "caller must be sealed and running")
        live = sum(1 for d in self.domains.values() if d.live)
        if live >= self.max_domains:
            raise deny(ErrorCode.OUT_OF_METADATA, "domain pool exhausted")
        child = self._new_domain(parent=caller)
        dom.children.append((ChildKind.TD, child.id))
        handle = dom.owned.insert(CapEntry(CapKind.DOMAIN, child.id))
        return {"dom": child.id, "handle": handle}

    def set_register(self, caller: int, handle: int, core: int,
                     index: int, value: int):
        with self._serialized(self._running_core(caller)):
            self._record("set_reg", self._core_of(caller),
                         {"caller": caller, "handle": handle, "core": core,
                          "index": index, "value": value},
                         lambda: self._set_register(caller, handle, core,
                                                    index, value))

    def _set_register(self, caller: int, handle: int, core: int,
                      index: int, value: int) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.SET_GET)
        child = self._resolve_td(dom, handle)
        if child.state is not DomainState.UNSEALED:
            raise deny(ErrorCode.SEALED, "registers frozen after seal")
        if not 0 <= core < self.platform.ncores:
            raise deny(ErrorCode.CORE_NOT_ALLOWED, f"core {core}")
        if not 0 <= index < NUM_REGS:
            raise deny(ErrorCode.BAD_HANDLE, f"register index {index}")
        child.core_regs(core)[index] = value & ((1 << 64) - 1)
        return {"dom": child.id}

    def get_register(self, caller: int, handle: int, core: int,
                     index: int) -> int:
        with self._serialized(self._running_core(caller)):
            return self._record(
                "get_reg", self._core_of(caller),
                {"caller": caller, "handle": handle, "core": core,
                 "index": index},
                lambda: self._get_register(caller, handle, core, index)
            )["value"]

    def _get_register(self, caller: int, handle: int, core: int,
                      index: int) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.SET_GET)
        child = self._resolve_td(dom, handle, allow_channel=False)
        if not 0 <= index < NUM_REGS:
            raise deny(ErrorCode.BAD_HANDLE, f"register index {index}")
        if child.state is DomainState.UNSEALED:
            return {"value": child.core_regs(core)[index]}
        # post-seal reads only for the active handler/observer, gated by the
        # child's readable-registers bitmap for the routed vector
        cs = self.cores[core] if 0 <= core < len(self.cores) else None
        if cs is None or cs.irq is None or cs.current != caller or \
                not cs.irq.resume or cs.irq.resume[0].domain != child.id:
            raise deny(ErrorCode.REGISTER_HIDDEN, "no routed interrupt grants access")
        policy = child.policies.interrupt(cs.irq.vector)
        if not policy.readable_regs & (1 << index):
            raise deny(ErrorCode.REGISTER_HIDDEN,
                       f"register {index} not readable for vector {cs.irq.vector}")
        return {"value": cs.irq.resume[0].saved_regs[index]}

    def set_policy(self, caller: int, handle: int, fname: str, value: int):
        with self._serialized(self._running_core(caller)):
            self._record("set_policy", self._core_of(caller),
                         {"caller": caller, "handle": handle, "field": fname,
                          "value": value},
                         lambda: self._set_policy(caller, handle, fname, value))

    def _set_policy(self, caller: int, handle: int, fname: str,
                    value: int) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.SET_GET)
        child = self._resolve_td(dom, handle)
        if child.state is not DomainState.UNSEALED:
            raise deny(ErrorCode.SEALED, "policies frozen after seal")
        if fname == "cores":
            if value & ~dom.policies.cores:
                raise deny(ErrorCode.POLICY_ESCALATION, "cores beyond parent")
            child.policies.cores = value
        elif fname == "mon_api":
            if value & ~ALL_CALLS_MASK or value & ~dom.policies.mon_api:
                raise deny(ErrorCode.POLICY_ESCALATION, "mon_api beyond parent")
            child.policies.mon_api = value
        elif fname == "user_calls":
            if value and not dom.policies.user_calls:
                raise deny(ErrorCode.POLICY_ESCALATION, "user_calls beyond parent")
            child.policies.user_calls = bool(value)
        elif fname == "receive":
            if value and not dom.policies.receive_after_seal:
                raise deny(ErrorCode.POLICY_ESCALATION, "receive beyond parent")
            child.policies.receive_after_seal = bool(value)
        else:
            raise deny(ErrorCode.BAD_HANDLE, f"policy field {fname}")
        return {"dom": child.id}

    def get_policy(self, caller: int, handle: int, fname: str) -> int:
        with self._serialized(self._running_core(caller)):
            return self._record(
                "get_policy", self._core_of(caller),
                {"caller": caller, "handle": handle, "field": fname},
                lambda: self._get_policy(caller, handle, fname))["value"]

    def _get_policy(self, caller: int, handle: int, fname: str) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.SET_GET)
        child = self._resolve_td(dom, handle, allow_channel=False)
        if fname == "cores":
            return {"value": child.policies.cores}
        if fname == "mon_api":
            return {"value": child.policies.mon_api}
        if fname == "user_calls":
            return {"value": int(child.policies.user_calls)}
        if fname == "receive":
            return {"value": int(child.policies.receive_after_seal)}
        raise deny(ErrorCode.BAD_HANDLE, f"policy field {fname}")

    def set_interrupt_policy(self, caller: int, handle: int, vector: int,
                             visibility: Visibility, readable_regs: int = 0):
        with self._serialized(self._running_core(caller)):
            self._record("set_intr", self._core_of(caller),
                         {"caller": caller, "handle": handle, "vector": vector,
                          "vis": visibility.value, "regs": readable_regs},
                         lambda: self._set_interrupt_policy(
                             caller, handle, vector, visibility, readable_regs))

    def _set_interrupt_policy(self, caller: int, handle: int, vector: int,
                              visibility: Visibility,
                              readable_regs: int) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.SET_GET)
        child = self._resolve_td(dom, handle)
        if child.state is not DomainState.UNSEALED:
            raise deny(ErrorCode.SEALED, "policies frozen after seal")
        if not 0 <= vector < NUM_VECTORS:
            raise deny(ErrorCode.BAD_HANDLE, f"vector {vector}")
        if readable_regs & ~REG_MASK:
            raise deny(ErrorCode.POLICY_ESCALATION, "readable regs beyond file")
        if visibility is Visibility.DELIVER and dom.parent is not None and \
                dom.policies.interrupt(vector).visibility is not Visibility.DELIVER:
            # a child may deliver a vector only if its parent ultimately can
            raise deny(ErrorCode.POLICY_ESCALATION,
                       f"vector {vector} not deliverable by parent")
        child.policies.interrupts[vector] = InterruptPolicy(
            visibility, readable_regs)
        return {"dom": child.id}

    def send(self, caller: int, handle: int, dest_handle: int,
             attrs: AttrFlags = AttrFlags.NONE):
        with self._serialized(self._running_core(caller)):
            self._record("send", self._core_of(caller),
                         {"caller": caller, "handle": handle,
                          "dest": dest_handle, "attrs": int(attrs)},
                         lambda: self._send(caller, handle, dest_handle, attrs))

    def _send(self, caller: int, handle: int, dest_handle: int,
              attrs: AttrFlags) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.SEND)
        entry = self._resolve(dom, handle)
        if entry.kind is CapKind.DOMAIN:
            raise deny(ErrorCode.UNTRANSFERABLE_TD,
                       "td capabilities cannot be transferred")
        dest_entry = self._resolve(dom, dest_handle)
        if dest_entry.kind is CapKind.REGION:
            raise deny(ErrorCode.BAD_HANDLE, "destination must be a domain")
        dest = self.domain(dest_entry.ref)
        if not dest.live:
            raise deny(ErrorCode.DOMAIN_REVOKED, f"domain {dest.id}")
        if dest.state is DomainState.SEALED and \
                not dest.policies.receive_after_seal:
            raise deny(ErrorCode.RECEIVE_DENIED, f"domain {dest.id} !RECEIVE")
        if attrs:
            if entry.kind is CapKind.CHANNEL:
                raise deny(ErrorCode.ATTRIBUTES_ON_CHANNEL,
                           "attributes apply to regions")
            if dest.state is not DomainState.UNSEALED:
                raise deny(ErrorCode.ATTRIBUTES_ON_SEALED,
                           "attributes need an unsealed receiver")
        results: dict = {}
        if entry.kind is CapKind.REGION:
            node = self.tree.get(entry.ref)
            digest = None
            if attrs & AttrFlags.HASH:
                if node.status is not RegionStatus.EXCLUSIVE:
                    raise deny(ErrorCode.HASH_ON_ALIASED,
                               "hash needs an exclusive region")
                self._check_unmapped(node.initial_range, exclude={node.id})
                digest = hashlib.sha256(
                    self.platform.read_bytes(node.initial_range)).digest()
                results["digest"] = digest.hex()

            def publish():
                dom.owned.remove(handle)
                node.owner = dest.id
                node.attributes = RegionAttributes(
                    hash_digest=digest,
                    clean=bool(attrs & AttrFlags.CLEAN),
                    vital=bool(attrs & AttrFlags.VITAL))
                dest.owned.insert(CapEntry(CapKind.REGION, node.id))
                for core in affected:
                    self.platform.enqueue_update(core, Update(
                        UpdateKind.ACCESS_CHANGED,
                        domain=self.cores[core].current,
                        view=self.view_cache_for(self.cores[core].current)))

            affected = self._cores_running({caller, dest.id})
            self.platform.barrier_update(self._core_of(caller), affected,
                                         publish, f"send:{node.id}")
            results.update({"region": node.id, "to": dest.id})
        else:
            dom.owned.remove(handle)
            dest.owned.insert(CapEntry(CapKind.CHANNEL, entry.ref))
            results.update({"chan_to": entry.ref, "to": dest.id})
        return results

    def _check_unmapped(self, rng: PhysRange, exclude: set[int]):
        for other in self.domains.values():
            if not other.live:
                continue
            for _, entry in other.owned.entries():
                if entry.kind is not CapKind.REGION or entry.ref in exclude:
                    continue
                for seg in self.tree.effective_view(entry.ref):
                    if seg.range.overlaps(rng):
                        raise deny(ErrorCode.STILL_ACCESSIBLE,
                                   f"{rng} reachable via region {entry.ref}")

    def region_digest(self, rng: PhysRange) -> bytes:
        """Digest of raw memory; only legal when no domain can reach it."""
        with self._serialized(None):
            if not self.platform.memory.in_bounds(rng):
                raise deny(ErrorCode.OUT_OF_MEMORY_BOUNDS, repr(rng))
            self._check_unmapped(rng, exclude=set())
            return hashlib.sha256(self.platform.read_bytes(rng)).digest()

    def seal(self, caller: int, handle: int):
        with self._serialized(self._running_core(caller)):
            self._record("seal", self._core_of(caller),
                         {"caller": caller, "handle": handle},
                         lambda: self._seal(caller, handle))

    def _seal(self, caller: int, handle: int) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.SEAL)
        child = self._resolve_td(dom, handle)
        if child.state is not DomainState.UNSEALED:
            raise deny(ErrorCode.ALREADY_SEALED, f"domain {child.id}")
        for vector in range(NUM_VECTORS):
            if child.policies.interrupt(vector).visibility is Visibility.DELIVER:
                continue
            walker = child.parent
            while walker is not None:
                if self._visibility(walker, vector) is Visibility.DELIVER:
                    break
                walker = self.domains[walker].parent
            else:
                raise deny(ErrorCode.UNDELIVERABLE_VECTOR, f"vector {vector}")
        child.register_hash = self._register_hash(child)
        child.state = DomainState.SEALED
        return {"dom": child.id, "register_hash": child.register_hash.hex()}

    # ------------------------------------------------------------------
    # switch, interrupts
    # ------------------------------------------------------------------

    def switch(self, caller: int, core: int, handle: Optional[int] = None):
        with self._serialized(core):
            self._record("switch", core,
                         {"caller": caller, "core": core,
                          "target": "ret" if handle is None else handle},
                         lambda: self._switch(caller, core, handle))

    def _switch(self, caller: int, core: int, handle: Optional[int]) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.SWITCH)
        if not 0 <= core < len(self.cores):
            raise deny(ErrorCode.CORE_NOT_ALLOWED, f"core {core}")
        cs = self.cores[core]
        if cs.current != caller:
            raise deny(ErrorCode.NOT_RUNNING,
                       f"domain {caller} is not current on core {core}")

        if cs.irq is not None:
            # active routed interrupt: the only way down is resuming the chain
            if handle is None:
                raise deny(ErrorCode.IRQ_RESUME_REQUIRED,
                           "must resume the preempted chain")
            target = self._resolve_td(dom, handle)
            if target.id != cs.irq.resume[0].domain:
                raise deny(ErrorCode.IRQ_RESUME_REQUIRED,
                           "must resume the preempted chain")
            return self._resume_step(cs, caller, core)

        if handle is None:
            return self._switch_return(cs, dom, core)
        target = self._resolve_td(dom, handle)
        if target.state is DomainState.UNSEALED:
            raise deny(ErrorCode.NOT_SEALED, f"domain {target.id}")
        if not target.policies.cores & (1 << core):
            raise deny(ErrorCode.CORE_NOT_ALLOWED,
                       f"domain {target.id} not allowed on core {core}")
        cs.chain.append(ChainEntry(caller, list(dom.core_regs(core))))
        cs.current = target.id
        self._arm_quantum(core, target.id)
        self._refresh_views({core})
        return {"to": target.id}

    def _switch_return(self, cs: CoreState, dom: DomainNode, core: int) -> dict:
        if cs.chain:
            entry = cs.chain.pop()
            parent = self.domains[entry.domain]
            parent.regs[core] = list(entry.saved_regs)
            cs.current = parent.id
        elif dom.parent is not None and self.domains[dom.parent].live:
            cs.current = dom.parent
        else:
            raise deny(ErrorCode.NO_PARENT, "nowhere to return")
        self._deliver_payload(cs, core, PayloadCode.RETURNED, dom.id)
        self._clear_quantum(core)
        self._refresh_views({core})
        return {"to": cs.current, "payload": "returned"}

    def _resume_step(self, cs: CoreState, caller: int, core: int) -> dict:
        vector = cs.irq.vector
        cs.chain.append(ChainEntry(
            caller, list(self.domains[caller].core_regs(core))))
        while True:
            entry = cs.irq.resume.pop(0)
            if not cs.irq.resume:
                # the preempted domain resumes at its snapshot, no payload
                self.domains[entry.domain].regs[core] = list(entry.saved_regs)
                cs.current = entry.domain
                cs.irq = None
                cs.last_payload = None
                self._refresh_views({core})
                self._route_deferred(core)
                return {"to": entry.domain, "payload": "resumed"}
            if entry.pending_observation:
                self.domains[entry.domain].regs[core] = list(entry.saved_regs)
                cs.current = entry.domain
                self._deliver_payload(cs, core, PayloadCode.INTERRUPT, vector)
                self._refresh_views({core})
                return {"to": entry.domain, "payload": f"interrupt:{vector}"}
            # Not-report domains are skipped silently and stay suspended
            cs.chain.append(entry)

    def _deliver_payload(self, cs: CoreState, core: int,
                         code: PayloadCode, detail: int):
        regs = self.domains[cs.current].core_regs(core)
        regs[0] = int(code)
        regs[1] = detail
        cs.last_payload = (int(code), detail)

    def route_interrupt(self, core: int, vector: int) -> int:
        with self._serialized(core):
            return self._record("irq", core, {"vector": vector},
                                lambda: self._route_interrupt(core, vector)
                                )["handler"]

    def _route_interrupt(self, core: int, vector: int) -> dict:
        if not 0 <= vector < NUM_VECTORS:
            raise deny(ErrorCode.BAD_HANDLE, f"vector {vector}")
        cs = self.cores[core]
        current = cs.current
        if self._visibility(current, vector) is Visibility.DELIVER:
            # delivered in place, no preemption
            self.delivered.append((self.platform.now, core, vector, current))
            return {"handler": current, "delivered": "inplace"}
        if cs.irq is not None:
            # nested routing is deferred until the active chain resumes
            cs.deferred_vectors.append(vector)
            return {"handler": -1, "deferred": 1}

        ancestry = []
        walker: Optional[int] = current
        while walker is not None:
            ancestry.append(walker)
            walker = self.domains[walker].parent
        ancestry.reverse()
        handler_idx = None
        for i in range(len(ancestry) - 1, -1, -1):
            if self._visibility(ancestry[i], vector) is Visibility.DELIVER:
                handler_idx = i
                break
        assert handler_idx is not None, \
            "td0 delivers every vector, so a handler always exists"
        handler = ancestry[handler_idx]

        chain_map = {e.domain: e for e in cs.chain}
        resume = []
        for dom_id in ancestry[handler_idx + 1:]:
            if dom_id == current:
                entry = ChainEntry(dom_id,
                                   list(self.domains[dom_id].core_regs(core)))
            elif dom_id in chain_map:
                entry = chain_map[dom_id]
            else:
                entry = ChainEntry(dom_id,
                                   list(self.domains[dom_id].core_regs(core)))
            entry.pending_observation = \
                self._visibility(dom_id, vector) is Visibility.REPORT
            resume.append(entry)
        keep = set(ancestry[:handler_idx])
        handler_entry = chain_map.get(handler)
        cs.chain = [e for e in cs.chain if e.domain in keep]
        if handler_entry is not None:
            self.domains[handler].regs[core] = list(handler_entry.saved_regs)
        cs.current = handler
        cs.irq = IrqFrame(vector, resume)
        self._deliver_payload(cs, core, PayloadCode.INTERRUPT, vector)
        self._clear_quantum(core)
        self._refresh_views({core})
        return {"handler": handler}

    def _route_deferred(self, core: int):
        cs = self.cores[core]
        while cs.deferred_vectors and cs.irq is None:
            vector = cs.deferred_vectors.pop(0)
            self._record("irq", core, {"vector": vector, "deferred": 1},
                         lambda v=vector: self._route_interrupt(core, v))

    def route_device_interrupt(self, vector: int) -> Optional[int]:
        """Route a device interrupt on the lowest core the handler may use."""
        with self._serialized(None):
            for cs in self.cores:
                handler = self._prospective_handler(cs.current, vector)
                if not self.domains[handler].policies.cores & (1 << cs.id):
                    continue
                if self.platform.cores[cs.id].run_state == "parked":
                    self.platform.enqueue_update(cs.id, Update(
                        UpdateKind.INTERRUPT_ROUTED, vector=vector))
                    return None
                return self._record(
                    "irq", cs.id, {"vector": vector, "device": 1},
                    lambda c=cs.id: self._route_interrupt(c, vector)
                )["handler"]
            raise AssertionError("td0 runs everywhere and delivers everything")

    def _prospective_handler(self, dom_id: int, vector: int) -> int:
        walker: Optional[int] = dom_id
        while walker is not None:
            if self._visibility(walker, vector) is Visibility.DELIVER:
                return walker
            walker = self.domains[walker].parent
        raise AssertionError("no handler found walking to the root")

    # -- switch quantum (experimental) ----------------------------------

    def set_quantum(self, steps: Optional[int]):
        self.quantum = steps

    def _arm_quantum(self, core: int, dom_id: int):
        if self.quantum:
            self._quantum_deadlines[core] = (self.platform.now + self.quantum,
                                             dom_id)

    def _clear_quantum(self, core: int):
        self._quantum_deadlines.pop(core, None)

    def check_quanta(self):
        due = [(core, dom) for core, (deadline, dom)
               in self._quantum_deadlines.items()
               if deadline <= self.platform.now]
        for core, dom in due:
            self._clear_quantum(core)
            if self.cores[core].current == dom:
                self._record("irq", core,
                             {"vector": TIMER_VECTOR, "quantum": 1},
                             lambda c=core: self._route_interrupt(
                                 c, TIMER_VECTOR))

    # ------------------------------------------------------------------
    # channels, enumerate, attest
    # ------------------------------------------------------------------

    def getchan(self, caller: int, handle: Optional[int] = None) -> int:
        with self._serialized(self._running_core(caller)):
            return self._record(
                "getchan", self._core_of(caller),
                {"caller": caller,
                 "from": "self" if handle is None else handle},
                lambda: self._getchan(caller, handle))["handle"]

    def _getchan(self, caller: int, handle: Optional[int]) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.GETCHAN)
        if handle is None:
            # self-channel: documented extension, lets a domain hand out
            # attestation references to itself
            target = dom
        else:
            target = self._resolve_td(dom, handle, allow_channel=True)
        new_handle = dom.owned.insert(CapEntry(CapKind.CHANNEL, target.id))
        target.children.append((ChildKind.CHANNEL, self._mint_channel()))
        return {"handle": new_handle, "to": target.id}

    def enumerate(self, caller: int, cursor: int):
        with self._serialized(self._running_core(caller)):
            return self._enumerate_traced(caller, cursor)

    def _enumerate_traced(self, caller: int, cursor: int):
        out: dict = {}

        def run():
            desc, nxt = self._enumerate(caller, cursor)
            out["desc"] = desc
            out["next"] = nxt
            return {"next": nxt,
                    "entry": desc.render().replace(" ", "~") if desc else "end"}

        self._record("enumerate", self._core_of(caller),
                     {"caller": caller, "cursor": cursor}, run)
        return out["desc"], out["next"]

    def _enumerate(self, caller: int, cursor: int):
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.ENUMERATE)
        if cursor < 0 or cursor > len(dom.owned.slots):
            raise deny(ErrorCode.BAD_CURSOR, f"cursor {cursor}")
        for index in range(cursor, len(dom.owned.slots)):
            entry = dom.owned.slots[index]
            if entry is None:
                continue
            return self._describe(entry), index + 1
        return None, len(dom.owned.slots)

    def _describe(self, entry: CapEntry) -> CapDescription:
        if entry.kind is CapKind.REGION:
            node = self.tree.get(entry.ref)
            children = []
            for n, cid in enumerate(node.children):
                child = self.tree.nodes[cid]
                children.append((f"c{n}", child.kind.value,
                                 child.initial_range.start,
                                 child.initial_range.end,
                                 child.rights.render()))
            return CapDescription(
                kind="region", status=node.status.value,
                start=node.initial_range.start, end=node.initial_range.end,
                rights=node.rights.render(),
                attributes=node.attributes.flags.render(),
                children=children)
        target = self.domains.get(entry.ref)
        state = target.state.value if target is not None else "revoked"
        kind = "domain" if entry.kind is CapKind.DOMAIN else "channel"
        return CapDescription(kind=kind, state=state)

    def attest(self, caller: int, handle: Optional[int] = None,
               verifier_key: Optional[bytes] = None,
               nonce: Optional[bytes] = None,
               domain_key: Optional[bytes] = None):
        with self._serialized(self._running_core(caller)):
            out: dict = {}

            def run():
                dom = self._live_caller(caller)
                self._gate(dom, ApiCall.ATTEST)
                if handle is None:
                    subject = dom
                else:
                    subject = self._resolve_td(dom, handle, allow_channel=True)
                report = attest_mod.build_report(
                    self, subject.id, verifier_key=verifier_key, nonce=nonce,
                    domain_key=domain_key)
                out["report"] = report
                return {"subject": subject.id}

            self._record("attest", self._core_of(caller),
                         {"caller": caller,
                          "subject": "self" if handle is None else handle}, run)
            return out["report"]

    # ------------------------------------------------------------------
    # revocation
    # ------------------------------------------------------------------

    def revoke_region(self, caller: int, handle: int, child_index: int):
        with self._serialized(self._running_core(caller)):
            self._record("revoke_region", self._core_of(caller),
                         {"caller": caller, "handle": handle,
                          "child": child_index},
                         lambda: self._revoke_region(caller, handle,
                                                     child_index))

    def _revoke_region(self, caller: int, handle: int,
                       child_index: int) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.REVOKE)
        entry = self._resolve(dom, handle)
        if entry.kind is not CapKind.REGION:
            raise deny(ErrorCode.BAD_HANDLE, "expected a region capability")
        parent = self.tree.get(entry.ref)
        if not 0 <= child_index < len(parent.children):
            raise deny(ErrorCode.NOT_A_CHILD, f"child index {child_index}")
        child_id = parent.children[child_index]
        self.tree.check_revoke(caller, parent.id, child_id)
        regions, dom_ids = self._closure({child_id}, set())
        self._execute_destruction(regions, dom_ids, caller,
                                  f"revoke_region:{child_id}")
        return {"parent": parent.id, "child": child_id,
                "regions": len(regions), "domains": len(dom_ids)}

    def revoke_domain(self, caller: int, handle: int):
        with self._serialized(self._running_core(caller)):
            self._record("revoke_domain", self._core_of(caller),
                         {"caller": caller, "handle": handle},
                         lambda: self._revoke_domain(caller, handle))

    def _revoke_domain(self, caller: int, handle: int) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.REVOKE)
        child = self._resolve_td(dom, handle)
        regions, dom_ids = self._closure(set(), {child.id})
        self._execute_destruction(regions, dom_ids, caller,
                                  f"revoke_domain:{child.id}")
        return {"dom": child.id, "regions": len(regions),
                "domains": len(dom_ids)}

    def _closure(self, seed_regions: set[int],
                 seed_domains: set[int]) -> tuple[set[int], set[int]]:
        """Fixpoint of cascading revocation: subtrees, owned regions, vital."""
        regions: set[int] = set()
        doms: set[int] = set()
        region_work = list(seed_regions)
        dom_work = list(seed_domains)
        while region_work or dom_work:
            while region_work:
                rid = region_work.pop()
                if rid in regions:
                    continue
                for sub in self.tree.subtree(rid):
                    if sub in regions:
                        continue
                    regions.add(sub)
                    node = self.tree.nodes[sub]
                    if node.attributes.vital and node.owner not in doms:
                        owner = self.domains[node.owner]
                        if owner.live and owner.parent is not None:
                            dom_work.append(node.owner)
            while dom_work:
                did = dom_work.pop()
                if did in doms:
                    continue
                doms.add(did)
                node = self.domains[did]
                for kind, child_id in node.children:
                    if kind is ChildKind.TD and child_id not in doms:
                        dom_work.append(child_id)
                for _, entry in node.owned.entries():
                    if entry.kind is CapKind.REGION and \
                            entry.ref not in regions:
                        region_work.append(entry.ref)
        return regions, doms

    def _execute_destruction(self, regions: set[int], dom_ids: set[int],
                             caller: int, tag: str):
        # the root region is never destroyed: a machine always has exactly
        # one; if its owner goes away, ownership climbs to a live ancestor
        root_heir = None
        if self.root_region in regions:
            regions = regions - {self.root_region}
            walker = self.tree.nodes[self.root_region].owner
            while walker in dom_ids:
                walker = self.domains[walker].parent
            root_heir = walker
        ordered = [rid for rid in self._destruction_order(regions)]
        owners = {self.tree.nodes[r].owner for r in regions}
        reclaimers = {self.tree.nodes[self.tree.nodes[r].parent].owner
                      for r in regions
                      if self.tree.nodes[r].parent is not None
                      and self.tree.nodes[r].parent not in regions}
        affected_doms = owners | reclaimers | dom_ids
        if root_heir is not None:
            affected_doms.add(root_heir)
        affected = {cs.id for cs in self.cores
                    if cs.current in affected_doms
                    or any(d in dom_ids for d in cs.path_domains())}

        def publish():
            # 1. all access removed: capability entries disappear
            for dom in self.domains.values():
                if not dom.live:
                    continue
                for idx, entry in dom.owned.entries():
                    if entry.kind is CapKind.REGION and entry.ref in regions:
                        dom.owned.remove(idx)
                    elif entry.kind is CapKind.DOMAIN and entry.ref in dom_ids:
                        dom.owned.remove(idx)
            # 2. clean ranges zeroed before parents regain access
            for rid in ordered:
                node = self.tree.nodes[rid]
                if node.attributes.clean:
                    self.platform.zero_range(node.initial_range)
            # 3. nodes leave the tree; carve parents regain their sub-ranges
            self.tree.destroy(ordered)
            # 4. domains become terminally revoked
            for did in dom_ids:
                node = self.domains[did]
                node.state = DomainState.REVOKED
                node.owned = type(node.owned)()
                node.regs.clear()
            if root_heir is not None:
                self.tree.nodes[self.root_region].owner = root_heir
                self.domains[root_heir].owned.insert(
                    CapEntry(CapKind.REGION, self.root_region))
            # 5. per-core effects
            for cs in self.cores:
                if cs.id not in affected:
                    continue
                unwind = self._plan_unwind(cs, dom_ids)
                if unwind is not None:
                    self.platform.enqueue_update(cs.id, Update(
                        UpdateKind.DOMAIN_REVOKED, domain=unwind["revoked"],
                        unwind=unwind))
                else:
                    self.platform.enqueue_update(cs.id, Update(
                        UpdateKind.ACCESS_CHANGED, domain=cs.current,
                        view=self.view_cache_for(cs.current)))

        self.platform.barrier_update(self._core_of(caller), affected,
                                     publish, tag)
        if self.debug_checks:
            self.tree.check_invariants()

    def _destruction_order(self, regions: set[int]) -> list[int]:
        order: list[int] = []
        seen: set[int] = set()
        roots = [r for r in regions
                 if self.tree.nodes[r].parent not in regions]
        for root in roots:
            for rid in self.tree.subtree(root):
                if rid not in seen:
                    seen.add(rid)
                    order.append(rid)
        return order

    def _plan_unwind(self, cs: CoreState, dom_ids: set[int]) -> Optional[dict]:
        path = cs.path_domains()
        cut = None
        for i, dom_id in enumerate(path):
            if dom_id in dom_ids:
                cut = i
                break
        if cut is None:
            return None
        assert cut >= 1, "td0 is never revoked"
        entries: list[ChainEntry] = list(cs.chain)
        current_entry = ChainEntry(
            cs.current, list(self.domains[cs.current].core_regs(cs.id))
            if self.domains[cs.current].regs.get(cs.id) else zero_registers())
        entries.append(current_entry)
        if cs.irq is not None:
            entries.extend(cs.irq.resume)
        new_current = entries[cut - 1]
        was_executing = (cut - 1) == len(cs.chain) and cs.irq is None
        return {
            "revoked": path[cut],
            "new_current": new_current.domain,
            "new_chain": [(e.domain, list(e.saved_regs))
                          for e in entries[:cut - 1]],
            "restore_regs": list(new_current.saved_regs),
            "deliver_payload": not was_executing,
            "view": self.view_cache_for(new_current.domain),
        }

    # ------------------------------------------------------------------
    # per-core update drain
    # ------------------------------------------------------------------

    def process_updates(self, core: int):
        """Apply pending updates to a core's local state (drain point)."""
        cs = self.cores[core]
        while True:
            update = self.platform.pop_update(core)
            if update is None:
                break
            if update.kind is UpdateKind.ACCESS_CHANGED:
                if cs.current == update.domain and update.view is not None:
                    self.platform.cores[core].local_view = update.view
            elif update.kind is UpdateKind.DOMAIN_REVOKED:
                self._apply_unwind(cs, update.unwind)
            elif update.kind is UpdateKind.INTERRUPT_ROUTED:
                cs.deferred_vectors.append(update.vector)
        if cs.irq is None and cs.deferred_vectors:
            self._route_deferred(core)

    def _apply_unwind(self, cs: CoreState, unwind: dict):
        cs.chain = [ChainEntry(dom, regs) for dom, regs in unwind["new_chain"]]
        cs.current = unwind["new_current"]
        cs.irq = None
        self.domains[cs.current].regs[cs.id] = list(unwind["restore_regs"])
        if unwind["deliver_payload"]:
            self._deliver_payload(cs, cs.id, PayloadCode.REVOKED_CHILD,
                                  unwind["revoked"])
        self.platform.cores[cs.id].local_view = unwind["view"]
        self._clear_quantum(cs.id)

    # ------------------------------------------------------------------
    # register ABI
    # ------------------------------------------------------------------

    _POLICY_BY_ID = {0: "cores", 1: "mon_api", 2: "user_calls", 3: "receive"}
    _VIS_BY_ID = {0: Visibility.DELIVER, 1: Visibility.REPORT,
                  2: Visibility.NOT_REPORT}

    def monitor_call(self, core: int, user: bool = False):
        """Dispatch one call from the current domain's registers.

        Call id sits in register 0, arguments in 1..6; results land in
        registers 0..3 with register 0 holding 0 for success or the error
        code.  Large outputs are consumed via a continuation token.
        """
        self.process_updates(core)
        caller_id = self.cores[core].current
        caller = self.domains[caller_id]
        regs = caller.core_regs(core)
        call_id, args = regs[0], regs[1:7]
        try:
            if user and not caller.policies.user_calls:
                raise deny(ErrorCode.POLICY_DENIED, "user calls not allowed")
            results = self._dispatch(caller_id, core, call_id, args)
        except MonitorError as exc:
            regs = self.domains[self.cores[core].current].core_regs(core)
            regs[0] = int(exc.code)
            return
        # a switch transfers control; its results reach the caller on resume
        if ApiCall(call_id) is not ApiCall.SWITCH:
            regs[0] = 0
            for i, value in enumerate(results[:3]):
                regs[1 + i] = value

    def _dispatch(self, caller: int, core: int, call_id: int,
                  args: list[int]) -> list[int]:
        try:
            call = ApiCall(call_id)
        except ValueError:
            raise deny(ErrorCode.BAD_HANDLE, f"unknown call {call_id}")
        if call is ApiCall.CREATE:
            return [self.create(caller)]
        if call is ApiCall.SET_GET:
            return self._dispatch_set_get(caller, args)
        if call is ApiCall.SEND:
            self.send(caller, args[0], args[1], AttrFlags(args[2]))
            return []
        if call is ApiCall.SEAL:
            self.seal(caller, args[0])
            return []
        if call is ApiCall.ATTEST:
            return self._dispatch_attest(caller, args)
        if call is ApiCall.ENUMERATE:
            return self._dispatch_enumerate(caller, args)
        if call is ApiCall.SWITCH:
            self.switch(caller, core, None if args[0] == 0 else args[0] - 1)
            return []
        if call is ApiCall.ALIAS:
            rng = PhysRange(args[1], args[2])
            handle = self.tree_alias(caller, args[0], rng, Rights(args[3]))
            return [handle]
        if call is ApiCall.CARVE:
            rng = PhysRange(args[1], args[2])
            handle = self.tree_carve(caller, args[0], rng, Rights(args[3]))
            return [handle]
        if call is ApiCall.REVOKE:
            entry = self._resolve(self._live_caller(caller), args[0])
            if entry.kind is CapKind.REGION:
                self.revoke_region(caller, args[0], args[1])
            else:
                self.revoke_domain(caller, args[0])
            return []
        if call is ApiCall.GETCHAN:
            return [self.getchan(caller, None if args[0] == 0 else args[0] - 1)]
        raise deny(ErrorCode.BAD_HANDLE, f"unhandled call {call_id}")

    def _dispatch_set_get(self, caller: int, args: list[int]) -> list[int]:
        sub = args[0]
        if sub == 0:
            self.set_register(caller, args[1], args[2], args[3], args[4])
            return []
        if sub == 1:
            return [self.get_register(caller, args[1], args[2], args[3])]
        if sub == 2:
            fname = self._POLICY_BY_ID.get(args[2])
            if fname is None:
                raise deny(ErrorCode.BAD_HANDLE, f"policy field {args[2]}")
            self.set_policy(caller, args[1], fname, args[3])
            return []
        if sub == 3:
            fname = self._POLICY_BY_ID.get(args[2])
            if fname is None:
                raise deny(ErrorCode.BAD_HANDLE, f"policy field {args[2]}")
            return [self.get_policy(caller, args[1], fname)]
        if sub == 4:
            vis = self._VIS_BY_ID.get(args[3])
            if vis is None:
                raise deny(ErrorCode.BAD_HANDLE, f"visibility {args[3]}")
            self.set_interrupt_policy(caller, args[1], args[2], vis, args[4])
            return []
        raise deny(ErrorCode.BAD_HANDLE, f"set/get sub-op {sub}")

    def _dispatch_attest(self, caller: int, args: list[int]) -> list[int]:
        if args[1] != 0:
            return self._consume_buffer(args[1])
        report = self.attest(caller, None if args[0] == 0 else args[0] - 1)
        blob = report.to_bytes()
        token = self._next_token
        self._next_token += 1
        self._buffers[token] = (blob, 0)
        return [len(blob), token]

    def _dispatch_enumerate(self, caller: int, args: list[int]) -> list[int]:
        if args[1] != 0:
            return self._consume_buffer(args[1])
        desc, nxt = self.enumerate(caller, args[0])
        if desc is None:
            return [nxt, 0, 0]
        blob = desc.render().encode()
        token = self._next_token
        self._next_token += 1
        self._buffers[token] = (blob, 0)
        return [nxt, token, len(blob)]

    def _consume_buffer(self, token: int) -> list[int]:
        if token not in self._buffers:
            raise deny(ErrorCode.BAD_CURSOR, f"token {token}")
        blob, offset = self._buffers[token]
        chunk = blob[offset:offset + 16]
        offset += len(chunk)
        if offset >= len(blob):
            del self._buffers[token]
        else:
            self._buffers[token] = (blob, offset)
        padded = chunk.ljust(16, b"\0")
        return [len(chunk),
                int.from_bytes(padded[:8], "little"),
                int.from_bytes(padded[8:], "little")]

    # ------------------------------------------------------------------
    # region derivations (engine-level wrappers)
    # ------------------------------------------------------------------

    def tree_alias(self, caller: int, handle: int, rng: PhysRange,
                   rights: Rights) -> int:
        with self._serialized(self._running_core(caller)):
            return self._record(
                "alias", self._core_of(caller),
                {"caller": caller, "handle": handle, "start": rng.start,
                 "end": rng.end, "rights": rights.render()},
                lambda: self._derive(caller, handle, rng, rights, carve=False)
            )["handle"]

    def tree_carve(self, caller: int, handle: int, rng: PhysRange,
                   rights: Rights) -> int:
        with self._serialized(self._running_core(caller)):
            return self._record(
                "carve", self._core_of(caller),
                {"caller": caller, "handle": handle, "start": rng.start,
                 "end": rng.end, "rights": rights.render()},
                lambda: self._derive(caller, handle, rng, rights, carve=True)
            )["handle"]

    def _derive(self, caller: int, handle: int, rng: PhysRange,
                rights: Rights, carve: bool) -> dict:
        dom = self._live_caller(caller)
        self._gate(dom, ApiCall.CARVE if carve else ApiCall.ALIAS)
        entry = self._resolve(dom, handle)
        if entry.kind is not CapKind.REGION:
            raise deny(ErrorCode.BAD_HANDLE, "expected a region capability")
        if carve:
            new_id = self.tree.carve(caller, entry.ref, rng, rights)
        else:
            new_id = self.tree.alias(caller, entry.ref, rng, rights)
        new_handle = dom.owned.insert(CapEntry(CapKind.REGION, new_id))

        def publish():
            for core in affected:
                self.platform.enqueue_update(core, Update(
                    UpdateKind.ACCESS_CHANGED, domain=caller,
                    view=self.view_cache_for(caller)))

        affected = self._cores_running({caller})
        self.platform.barrier_update(self._core_of(caller), affected, publish,
                                     f"{'carve' if carve else 'alias'}:{new_id}")
        if self.debug_checks:
            self.tree.check_invariants()
        return {"region": new_id, "handle": new_handle,
                "parent": entry.ref,
                "status": self.tree.nodes[new_id].status.value}

    # ------------------------------------------------------------------
    # state digest (used to prove rejected operations change nothing)
    # ------------------------------------------------------------------

    def _core_of(self, caller: int) -> int:
        core = self._running_core(caller)
        return -1 if core is None else core

    def state_digest(self) -> str:
        h = hashlib.sha256()
        for rid in sorted(self.tree.nodes):
            node = self.tree.nodes[rid]
            h.update(repr((
                rid, node.owner, node.initial_range.start,
                node.initial_range.end, int(node.rights), node.status.value,
                node.kind.value, node.parent, tuple(node.children),
                node.attributes.hash_digest, node.attributes.clean,
                node.attributes.vital)).encode())
        for did in sorted(self.domains):
            dom = self.domains[did]
            h.update(repr((
                did, dom.state.value, dom.parent, tuple(dom.children),
                dom.policies.cores, dom.policies.mon_api,
                dom.policies.user_calls, dom.policies.receive_after_seal,
                tuple(sorted((v, p.visibility.value, p.readable_regs)
                             for v, p in dom.policies.interrupts.items())),
                tuple(sorted((c, tuple(r)) for c, r in dom.regs.items())),
                tuple(dom.owned.slots), dom.register_hash)).encode())
        for cs in self.cores:
            h.update(repr((
                cs.id, cs.current,
                tuple((e.domain, tuple(e.saved_regs), e.pending_observation)
                      for e in cs.chain),
                None if cs.irq is None else (
                    cs.irq.vector,
                    tuple((e.domain, tuple(e.saved_regs),
                           e.pending_observation) for e in cs.irq.resume)),
                tuple(cs.deferred_vectors))).encode())
        return h.hexdigest()
