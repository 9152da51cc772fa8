"""capmon: a capability-engine security monitor on a simulated machine.

Trust domains partition and share machine resources through capability
derivation trees; every isolation decision is observable, attestable, and
checkable against an independent reference model.
"""

from .attest import (
    AttestationReport,
    BootMeasurement,
    build_report,
    is_confidential,
    is_encapsulated,
    measure_boot,
    monitor_public_key,
    verify_report,
)
from .domains import ApiCall, DomainState, PayloadCode, Visibility
from .engine import Engine
from .errors import ErrorCode, MonitorError
from .machine import DeviceConfig, MachineConfig, boot, parse_config
from .oracle import Oracle
from .regions import AttrFlags, PhysRange, RegionStatus, Rights

__all__ = [
    "ApiCall", "AttestationReport", "AttrFlags", "BootMeasurement",
    "DeviceConfig", "DomainState", "Engine", "ErrorCode", "MachineConfig",
    "MonitorError", "Oracle", "PayloadCode", "PhysRange", "RegionStatus",
    "Rights", "Visibility", "boot", "build_report", "is_confidential",
    "is_encapsulated", "measure_boot", "monitor_public_key", "parse_config",
    "verify_report",
]

__version__ = "0.1.0"
