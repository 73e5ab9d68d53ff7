"""Exception hierarchy and the wire registry of denial reason codes.

Every error that can end a flow has a stable name (the class name) and a
u16 code carried in AUTH_DENY frames.
"""

from __future__ import annotations


class GrimlockError(Exception):
    """Base class for all errors raised by this package."""

    @property
    def reason(self) -> str:
        return type(self).__name__


# -- core --------------------------------------------------------------------

class InvalidScopeEntry(GrimlockError, ValueError):
    pass


class InvalidIdentity(GrimlockError, ValueError):
    pass


# -- channel -----------------------------------------------------------------

class HandshakeAuthFailure(GrimlockError):
    pass


class TransportClosed(GrimlockError):
    pass


class StalePeerContext(GrimlockError):
    pass


class InvalidLength(GrimlockError, ValueError):
    pass


class RecordAuthFailure(GrimlockError):
    pass


class NotEstablished(GrimlockError):
    pass


# -- mediation ---------------------------------------------------------------

class DuplicateSandbox(GrimlockError):
    pass


class MeasurementMismatch(GrimlockError):
    pass


class UnknownSandbox(GrimlockError):
    pass


class DefaultDeny(GrimlockError):
    pass


class BypassBlocked(GrimlockError):
    pass


class InvalidTransition(GrimlockError):
    pass


# -- attestation -------------------------------------------------------------

class BadNonceLength(GrimlockError, ValueError):
    pass


class MalformedEvidence(GrimlockError, ValueError):
    pass


class PolicyParseError(GrimlockError, ValueError):
    pass


# -- tokens ------------------------------------------------------------------

class TokenError(GrimlockError):
    """A token failed validation, minting or delegation."""


class BadSignature(TokenError):
    pass


class AudienceMismatch(TokenError):
    pass


class Expired(TokenError):
    pass


class NotYetValid(TokenError):
    pass


class BindingMismatch(TokenError):
    pass


class ScopeViolation(TokenError):
    pass


class AppraisalRejected(TokenError):
    pass


class EmptyGrant(TokenError):
    pass


class ParentExpired(TokenError):
    pass


class MalformedToken(GrimlockError, ValueError):
    pass


class UnsupportedVersion(GrimlockError, ValueError):
    pass


# -- a2a ---------------------------------------------------------------------

class InvalidContext(GrimlockError, ValueError):
    pass


class ProtocolError(GrimlockError):
    pass


class BadMagic(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class AuthorizationDenied(GrimlockError):
    """The verifier refused to issue a token; ``reason`` names the failed check."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self._reason = reason

    @property
    def reason(self) -> str:
        return self._reason


# -- harness -----------------------------------------------------------------

class ScenarioConfigError(GrimlockError, ValueError):
    pass


# u16 codes carried in AUTH_DENY (TLV 0x0007). Append only.
REASON_CODES: dict[str, int] = {
    "HandshakeAuthFailure": 1,
    "BadSignature": 2,
    "NonceMismatch": 3,
    "ReplayDetected": 4,
    "BindingMismatch": 5,
    "MeasurementRejected": 6,
    "AudienceMismatch": 7,
    "Expired": 8,
    "NotYetValid": 9,
    "ScopeViolation": 10,
    "EmptyGrant": 11,
    "AppraisalRejected": 12,
    "ProtocolError": 13,
    "DefaultDeny": 14,
    "RecordAuthFailure": 15,
    "TransportClosed": 16,
    "StalePeerContext": 17,
    "ParentExpired": 18,
    "MalformedToken": 19,
    "UnsupportedVersion": 20,
    "InvalidContext": 21,
    "NotEstablished": 22,
    "MalformedEvidence": 23,
    "UnknownSandbox": 24,
}
REASON_NAMES: dict[int, str] = {v: k for k, v in REASON_CODES.items()}


def reason_code(reason: str) -> int:
    return REASON_CODES.get(reason, 0xFFFF)


def reason_name(code: int) -> str:
    return REASON_NAMES.get(code, f"Unknown({code})")
