"""Engine state dumps: JSON snapshots that tooling can reload.

A dump captures the full logical state of the engine (trees, tables,
policies, cores) but not memory content; reloading is enough to attest and
inspect, not to keep executing scenarios.
"""

from __future__ import annotations

import json

from .attest import BootMeasurement
from .domains import (
    CapEntry, CapKind, ChainEntry, ChildKind, DomainState, InterruptPolicy,
    IrqFrame, Visibility,
)
from .engine import Engine
from .machine import DeviceConfig, MachineConfig, Platform
from .regions import (
    DerivationKind, PhysRange, RegionAttributes, RegionNode, RegionStatus,
    Rights,
)


def dump_state(engine: Engine) -> dict:
    config = engine.platform.config
    return {
        "version": 1,
        "seed": engine.seed,
        "step": engine.platform.now,
        "config": {
            "memory": config.memory_size,
            "cores": config.cores,
            "monitor_reserved": [config.monitor_reserved.start,
                                 config.monitor_reserved.end],
            "devices": [[d.name, d.mmio.start, d.mmio.end, d.vector]
                        for d in config.devices],
            "pool": config.metadata_pool,
        },
        "measurement": {
            "pcr": engine.measurement.pcr.hex(),
            "events": [[name, digest.hex()]
                       for name, digest in engine.measurement.event_log],
        } if engine.measurement else None,
        "root_region": engine.root_region,
        "next_domain": engine._next_domain,
        "next_region": engine.tree._next_id,
        "regions": [_dump_region(node) for _, node
                    in sorted(engine.tree.nodes.items())],
        "domains": [_dump_domain(dom) for _, dom
                    in sorted(engine.domains.items())],
        "cores": [_dump_core(cs) for cs in engine.cores],
    }


def _dump_region(node: RegionNode) -> dict:
    return {
        "id": node.id,
        "owner": node.owner,
        "range": [node.initial_range.start, node.initial_range.end],
        "rights": int(node.rights),
        "status": node.status.value,
        "kind": node.kind.value,
        "parent": node.parent,
        "children": list(node.children),
        "attributes": {
            "hash": node.attributes.hash_digest.hex()
                    if node.attributes.hash_digest else None,
            "clean": node.attributes.clean,
            "vital": node.attributes.vital,
        },
    }


def _dump_domain(dom) -> dict:
    return {
        "id": dom.id,
        "state": dom.state.value,
        "parent": dom.parent,
        "children": [[kind.value, ref] for kind, ref in dom.children],
        "policies": {
            "cores": dom.policies.cores,
            "mon_api": dom.policies.mon_api,
            "user_calls": dom.policies.user_calls,
            "receive": dom.policies.receive_after_seal,
            "interrupts": [[v, p.visibility.value, p.readable_regs]
                           for v, p in sorted(dom.policies.interrupts.items())],
        },
        "regs": {str(core): regs for core, regs in sorted(dom.regs.items())},
        "owned": [None if e is None else [e.kind.value, e.ref]
                  for e in dom.owned.slots],
        "is_device": dom.is_device,
        "device_vector": dom.device_vector,
        "mmio": [dom.mmio.start, dom.mmio.end] if dom.mmio else None,
        "register_hash": dom.register_hash.hex() if dom.register_hash else None,
    }


def _dump_core(cs) -> dict:
    return {
        "id": cs.id,
        "current": cs.current,
        "chain": [[e.domain, e.saved_regs, e.pending_observation]
                  for e in cs.chain],
        "irq": None if cs.irq is None else {
            "vector": cs.irq.vector,
            "resume": [[e.domain, e.saved_regs, e.pending_observation]
                       for e in cs.irq.resume],
        },
        "deferred": list(cs.deferred_vectors),
    }


def load_state(dump: dict) -> Engine:
    config = MachineConfig(
        memory_size=dump["config"]["memory"],
        cores=dump["config"]["cores"],
        monitor_reserved=PhysRange(*dump["config"]["monitor_reserved"]),
        devices=tuple(DeviceConfig(n, PhysRange(s, e), v)
                      for n, s, e, v in dump["config"]["devices"]),
        metadata_pool=dump["config"]["pool"])
    platform = Platform(config)
    measurement = None
    if dump["measurement"]:
        measurement = BootMeasurement(
            pcr=bytes.fromhex(dump["measurement"]["pcr"]),
            event_log=[(n, bytes.fromhex(d))
                       for n, d in dump["measurement"]["events"]])
    engine = Engine(platform, seed=dump["seed"], measurement=measurement)
    platform.attach_engine(engine)
    platform.now = dump["step"]
    engine.root_region = dump["root_region"]
    engine._next_domain = dump["next_domain"]
    engine.tree._next_id = dump["next_region"]
    if engine.root_region is not None:
        engine.tree._root_id = engine.root_region

    for rec in dump["regions"]:
        node = RegionNode(
            id=rec["id"], owner=rec["owner"],
            initial_range=PhysRange(*rec["range"]),
            rights=Rights(rec["rights"]),
            status=RegionStatus(rec["status"]),
            kind=DerivationKind(rec["kind"]),
            parent=rec["parent"], children=list(rec["children"]),
            attributes=RegionAttributes(
                hash_digest=bytes.fromhex(rec["attributes"]["hash"])
                            if rec["attributes"]["hash"] else None,
                clean=rec["attributes"]["clean"],
                vital=rec["attributes"]["vital"]))
        engine.tree.nodes[node.id] = node

    from .domains import DomainNode
    for rec in dump["domains"]:
        dom = DomainNode(id=rec["id"])
        dom.state = DomainState(rec["state"])
        dom.parent = rec["parent"]
        dom.children = [(ChildKind(kind), ref)
                        for kind, ref in rec["children"]]
        dom.policies.cores = rec["policies"]["cores"]
        dom.policies.mon_api = rec["policies"]["mon_api"]
        dom.policies.user_calls = rec["policies"]["user_calls"]
        dom.policies.receive_after_seal = rec["policies"]["receive"]
        dom.policies.interrupts = {
            v: InterruptPolicy(Visibility(vis), regs)
            for v, vis, regs in rec["policies"]["interrupts"]}
        dom.regs = {int(core): list(regs)
                    for core, regs in rec["regs"].items()}
        dom.owned.slots = [
            None if e is None else CapEntry(CapKind(e[0]), e[1])
            for e in rec["owned"]]
        dom.is_device = rec["is_device"]
        dom.device_vector = rec["device_vector"]
        dom.mmio = PhysRange(*rec["mmio"]) if rec["mmio"] else None
        dom.register_hash = bytes.fromhex(rec["register_hash"]) \
            if rec["register_hash"] else None
        engine.domains[dom.id] = dom

    for rec in dump["cores"]:
        cs = engine.cores[rec["id"]]
        cs.current = rec["current"]
        cs.chain = [ChainEntry(d, list(r), p) for d, r, p in rec["chain"]]
        if rec["irq"]:
            cs.irq = IrqFrame(rec["irq"]["vector"],
                              [ChainEntry(d, list(r), p)
                               for d, r, p in rec["irq"]["resume"]])
        cs.deferred_vectors = list(rec["deferred"])
    return engine


def write_dump(engine: Engine, path: str):
    with open(path, "w") as fh:
        json.dump(dump_state(engine), fh, indent=1, sort_keys=True)


def read_dump(path: str) -> Engine:
    with open(path) as fh:
        return load_state(json.load(fh))
