"""Trust-domain state: policies, register files, capability tables.

Data definitions only; the state machine that mutates them lives in
:mod:`capmon.engine`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from .regions import PhysRange

NUM_VECTORS = 256
NUM_GPRS = 16
REG_PC = 16
REG_SW = 17
NUM_REGS = 18
REG_MASK = (1 << NUM_REGS) - 1


class ApiCall(enum.IntEnum):
    """Monitor calls; the value is both the call id and the policy bit."""

    CREATE = 0
    SET_GET = 1
    SEND = 2
    SEAL = 3
    ATTEST = 4
    ENUMERATE = 5
    SWITCH = 6
    ALIAS = 7
    CARVE = 8
    REVOKE = 9
    GETCHAN = 10


ALL_CALLS_MASK = (1 << len(ApiCall)) - 1


class Visibility(enum.Enum):
    DELIVER = "deliver"
    REPORT = "report"
    NOT_REPORT = "noreport"

    def render(self) -> str:
        return {"deliver": "Deliver", "report": "Report",
                "noreport": "Not report"}[self.value]


@dataclass(frozen=True)
class InterruptPolicy:
    visibility: Visibility = Visibility.NOT_REPORT
    readable_regs: int = 0


DEFAULT_INTERRUPT_POLICY = InterruptPolicy()


@dataclass
class Policies:
    """Per-domain permission set; monotonic along the domain tree."""

    cores: int = 0
    mon_api: int = 0
    user_calls: bool = False
    receive_after_seal: bool = False
    interrupts: dict[int, InterruptPolicy] = field(default_factory=dict)

    def interrupt(self, vector: int) -> InterruptPolicy:
        return self.interrupts.get(vector, DEFAULT_INTERRUPT_POLICY)

    def allows(self, call: ApiCall) -> bool:
        return bool(self.mon_api & (1 << call))

    def copy(self) -> "Policies":
        return Policies(self.cores, self.mon_api, self.user_calls,
                        self.receive_after_seal, dict(self.interrupts))


def zero_registers() -> list[int]:
    return [0] * NUM_REGS


class DomainState(enum.Enum):
    UNSEALED = "unsealed"
    SEALED = "sealed"
    REVOKED = "revoked"


class CapKind(enum.Enum):
    REGION = "region"
    DOMAIN = "domain"
    CHANNEL = "channel"


@dataclass(frozen=True)
class CapEntry:
    kind: CapKind
    ref: int  # region id for REGION, domain id otherwise


class CapTable:
    """Per-domain capability table; indices reuse the lowest free slot."""

    def __init__(self):
        self.slots: list[Optional[CapEntry]] = []

    def insert(self, entry: CapEntry) -> int:
        for i, slot in enumerate(self.slots):
            if slot is None:
                self.slots[i] = entry
                return i
        self.slots.append(entry)
        return len(self.slots) - 1

    def get(self, index: int) -> Optional[CapEntry]:
        if 0 <= index < len(self.slots):
            return self.slots[index]
        return None

    def remove(self, index: int) -> CapEntry:
        entry = self.slots[index]
        assert entry is not None
        self.slots[index] = None
        return entry

    def find(self, kind: CapKind, ref: int) -> Optional[int]:
        for i, slot in enumerate(self.slots):
            if slot is not None and slot.kind is kind and slot.ref == ref:
                return i
        return None

    def entries(self) -> list[tuple[int, CapEntry]]:
        return [(i, e) for i, e in enumerate(self.slots) if e is not None]

    def __len__(self) -> int:
        return sum(1 for e in self.slots if e is not None)


class ChildKind(enum.Enum):
    TD = "td"
    CHANNEL = "channel"


@dataclass
class DomainNode:
    id: int
    state: DomainState = DomainState.UNSEALED
    parent: Optional[int] = None
    children: list[tuple[ChildKind, int]] = field(default_factory=list)
    policies: Policies = field(default_factory=Policies)
    regs: dict[int, list[int]] = field(default_factory=dict)
    owned: CapTable = field(default_factory=CapTable)
    is_device: bool = False
    device_vector: Optional[int] = None
    mmio: Optional[PhysRange] = None
    register_hash: Optional[bytes] = None

    def core_regs(self, core: int) -> list[int]:
        if core not in self.regs:
            self.regs[core] = zero_registers()
        return self.regs[core]

    @property
    def live(self) -> bool:
        return self.state is not DomainState.REVOKED


class UpdateKind(enum.Enum):
    ACCESS_CHANGED = "access_changed"
    DOMAIN_REVOKED = "domain_revoked"
    INTERRUPT_ROUTED = "interrupt_routed"


@dataclass
class Update:
    """Per-core state-change notice, drained under the two-barrier protocol."""

    kind: UpdateKind
    domain: Optional[int] = None
    vector: Optional[int] = None
    # precomputed view cache for ACCESS_CHANGED so draining needs no engine lock
    view: Optional[list[tuple[int, int, int]]] = None
    # precomputed unwind for DOMAIN_REVOKED
    unwind: Optional[dict] = None


class PayloadCode(enum.IntEnum):
    """Switch return payloads, carried in the simulated ABI's result registers."""

    RETURNED = 0
    INTERRUPT = 1
    REVOKED_CHILD = 2


@dataclass
class ChainEntry:
    """A suspended domain on a core's call path."""

    domain: int
    saved_regs: list[int]
    pending_observation: bool = False


@dataclass
class IrqFrame:
    """Active routed interrupt on a core: suspended suffix below the handler."""

    vector: int
    resume: list[ChainEntry]


@dataclass
class CoreState:
    id: int
    current: int = -1
    chain: list[ChainEntry] = field(default_factory=list)
    irq: Optional[IrqFrame] = None
    deferred_vectors: list[int] = field(default_factory=list)
    last_payload: Optional[tuple[int, int]] = None

    def path_domains(self) -> list[int]:
        """Root-ward path of domains this core is executing, outermost first."""
        path = [e.domain for e in self.chain] + [self.current]
        if self.irq is not None:
            path.extend(e.domain for e in self.irq.resume)
        return path
