"""Certificateless anonymous vehicle-to-vehicle authentication.

Modules:

    group      elliptic-curve arithmetic, hashes, system parameters
    wire       message types and their TLV encoding
    protocol   key derivation, mutual authentication, pseudonym update
    authority  trusted authority: setup, registration, registry
    netsim     deterministic network simulator with an active adversary
    costmodel  analytic cost tables and expected time under attack
    cli        the ``eaia`` command
"""

from .errors import (
    EAIAError, MalformedMessage, ProtocolError, ReplayDetected, SignatureInvalid,
    StaleTimestamp, TagMismatch, Timeout, UnknownPeer,
)
from .group import P256, TOY, SystemParams, get_curve
from .authority import Authority
from .protocol import Vehicle, verify_registration

__version__ = "0.1.0"

__all__ = [
    "Authority", "EAIAError", "MalformedMessage", "P256", "ProtocolError", "ReplayDetected",
    "SignatureInvalid", "StaleTimestamp", "SystemParams", "TOY", "TagMismatch", "Timeout",
    "UnknownPeer", "Vehicle", "get_curve", "verify_registration", "__version__",
]
