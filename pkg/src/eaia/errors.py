"""Exception hierarchy shared by every layer of the package.

Protocol rejections are ordinary exceptions; the class name is what the
simulator records as a session outcome, so names are part of the report
format and should not be renamed casually.
"""


class EAIAError(Exception):
    """Base class for every error raised by this package."""


# group arithmetic

class ZeroScalar(EAIAError, ZeroDivisionError):
    pass


class MalformedPoint(EAIAError, ValueError):
    pass


# protocol rejections

class ProtocolError(EAIAError):
    """A peer message was rejected."""


class MalformedMessage(ProtocolError, ValueError):
    """Wire bytes could not be decoded.

    ``field`` names the offending field when the frame was structurally
    sound but a field value was not a valid group element or scalar.
    """

    def __init__(self, msg, field=None):
        super().__init__(msg)
        self.field = field


class StaleTimestamp(ProtocolError):
    pass


class ReplayDetected(ProtocolError):
    pass


class SignatureInvalid(ProtocolError):
    pass


class UnknownPeer(SignatureInvalid):
    # The recovered identity is not registered, so the challenge cannot be
    # authenticated; a tampered N usually lands here.
    pass


class TagMismatch(ProtocolError):
    pass


class Timeout(ProtocolError):
    pass


class DegenerateEphemeral(ProtocolError):
    pass


class RegistrationCheckFailed(ProtocolError):
    pass


# authority

class AuthorityError(EAIAError):
    pass


class DuplicateRegistration(AuthorityError):
    pass


class UnknownPseudonym(AuthorityError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class RidMismatch(AuthorityError):
    pass


class StateError(AuthorityError):
    """Authority state on disk is missing or inconsistent."""


# simulator

class ScenarioInvalid(EAIAError, ValueError):
    pass


def error_class(name):
    """Look up an error class by its name (used when matching report outcomes)."""
    obj = globals().get(name)
    if isinstance(obj, type) and issubclass(obj, EAIAError):
        return obj
    raise KeyError(name)


def outcome_matches(observed, expected):
    """True if outcome ``observed`` satisfies ``expected``.

    Error outcomes match through the class hierarchy, so an expected
    ``SignatureInvalid`` accepts an observed ``UnknownPeer``.
    """
    if observed == expected:
        return True
    try:
        return issubclass(error_class(observed), error_class(expected))
    except KeyError:
        return False
