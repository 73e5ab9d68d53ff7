"""Channel-bound, attestation-gated authorization between sandboxed agents."""

from .a2a import Clock, Fabric, Guard
from .channel import establish, exporter, resume
from .core import HostIdentity, SandboxIdentity, Scope
from .harness import Scenario, build_scenario, run_scenario
from .tokens import ScopeToken, TrustAnchors, delegate, mint, validate

__version__ = "0.1.0"

__all__ = [
    "Clock", "Fabric", "Guard", "establish", "exporter", "resume", "HostIdentity",
    "SandboxIdentity", "Scope", "Scenario", "build_scenario", "run_scenario", "ScopeToken",
    "TrustAnchors", "delegate", "mint", "validate",
]
