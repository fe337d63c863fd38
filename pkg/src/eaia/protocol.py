"""Vehicle (OBU) side of the protocol.

Message flow for one mutual authentication, vehicle j asking vehicle i::

    j -> i   AuthRequest   {ID_j, X_j + Y_j}
    i -> j   ChallengeMsg  {B, N, sigma, T_a}        build_challenge
    j -> i   ResponseMsg   {D, eta, T_b}             process_challenge
             (i derives and checks the session key)  finalize

The module-level functions are the pure protocol steps. ``Vehicle`` wraps
them into an endpoint that speaks wire bytes, keeps a replay cache and
tracks in-flight sessions.
"""

from __future__ import annotations

import hmac
import secrets
from dataclasses import dataclass, field, replace

from .errors import (
    DegenerateEphemeral, MalformedMessage, RegistrationCheckFailed, ReplayDetected,
    SignatureInvalid, StaleTimestamp, TagMismatch, UnknownPeer, UnknownPseudonym,
)
from .group import random_nonzero_scalar, xor_bytes
from .wire import (
    AuthRequest, ChallengeMsg, PseudonymUpdateReply, PseudonymUpdateRequest, ResponseMsg,
    TS_LEN, decode_message, encode_message,
)

DEFAULT_WINDOW_MS = 500
MAX_EPHEMERAL_DRAWS = 64


def ts_bytes(t):
    return int(t).to_bytes(TS_LEN, "big")


def real_id_from_vin(vin, params):
    """256-bit real identity derived from a vehicle identification number."""
    vin = vin.strip()
    if not vin:
        raise ValueError("empty VIN")
    return params.hashes.h_mask(vin.encode("utf-8"), 256)


@dataclass(frozen=True)
class RegistrationReply:
    y: int
    R: object
    Y: object
    id: bytes


@dataclass(frozen=True)
class StaticKeyMaterial:
    x: int
    y: int
    X: object
    Y: object
    R: object
    id: bytes
    q: int = field(repr=False)

    @property
    def combined(self):
        return (self.x + self.y) % self.q

    @property
    def pub_sum(self):
        return self.X + self.Y

    def __repr__(self):
        # never show the secret scalars
        return f"StaticKeyMaterial(id={self.id.hex()[:16]}..., X={self.X!r})"


@dataclass
class EphemeralState:
    a: int
    b: int
    A: object
    T_a: int
    peer_id: bytes
    peer_pub_sum: object

    def zeroize(self):
        self.a = 0
        self.b = 0
        self.A = None

    @property
    def zeroized(self):
        return self.a == 0 and self.b == 0 and self.A is None

    def __repr__(self):
        return f"EphemeralState(T_a={self.T_a}, zeroized={self.zeroized})"


def check_fresh(t, now, window):
    if abs(now - t) > window:
        raise StaleTimestamp(f"timestamp {t} outside {window} ms of {now}")


# -- registration ------------------------------------------------------------

def registration_hash(params, pid, X, R):
    return params.hashes.h1_scalar(pid + X.encode() + R.encode())


def verify_registration(params, reply, x):
    """Check the authority's reply and assemble the vehicle's static keys."""
    P = params.P
    X = x * P
    H = registration_hash(params, reply.id, X, reply.R)
    expected = reply.R + H * params.P_pub
    if reply.y * P != expected:
        raise RegistrationCheckFailed("y*P != R + H*P_pub")
    if reply.Y != expected:
        raise RegistrationCheckFailed("Y != R + H*P_pub")
    if len(reply.id) != params.id_len:
        raise RegistrationCheckFailed("pseudonym has wrong width")
    return StaticKeyMaterial(x=x % params.q, y=reply.y % params.q, X=X, Y=reply.Y,
                             R=reply.R, id=bytes(reply.id), q=params.q)


# -- mutual authentication ---------------------------------------------------

def make_auth_request(keys):
    return AuthRequest(requester_id=keys.id, requester_pub_sum=keys.pub_sum)


def _sign(params, pid, A, T, y, b):
    h = params.hashes.h1_scalar(pid + A.encode() + ts_bytes(T))
    return params.curve.scalar_inv(b) * (h + y) % params.q


def build_challenge(params, req, keys_i, now, rng, max_draws=MAX_EPHEMERAL_DRAWS):
    """Challenger side: returns the ChallengeMsg and the state kept for finalize."""
    curve, P = params.curve, params.P
    if not curve.is_on_curve(req.requester_pub_sum):
        raise MalformedMessage("requester public key not on curve")
    for _ in range(max_draws):
        a = random_nonzero_scalar(curve, rng)
        b = random_nonzero_scalar(curve, rng)
        A = a * P
        sigma = _sign(params, keys_i.id, A, now, keys_i.y, b)
        if sigma:
            break
    else:
        raise DegenerateEphemeral(f"no usable (a, b) in {max_draws} draws")
    B = b * P
    M = b * req.requester_pub_sum
    plain = keys_i.id + A.encode()
    N = xor_bytes(params.hashes.h2_mask(M, 8 * len(plain)), plain)
    eph = EphemeralState(a=a, b=b, A=A, T_a=now, peer_id=req.requester_id,
                         peer_pub_sum=req.requester_pub_sum)
    return ChallengeMsg(B=B, N=N, sigma=sigma, T_a=now), eph


def _session_key(params, id_i, id_j, A, D, T_b):
    return params.hashes.h1_scalar(id_i + id_j + A.encode() + D.encode() + ts_bytes(T_b))


def process_challenge(params, msg, keys_j, peer_pub_lookup, now, window, rng):
    """Responder side. Returns (ResponseMsg, session key, recovered peer pseudonym)."""
    check_fresh(msg.T_a, now, window)
    curve, P, hs = params.curve, params.P, params.hashes
    M = keys_j.combined * msg.B
    plain = xor_bytes(hs.h2_mask(M, 8 * len(msg.N)), msg.N)
    id_i, A_enc = plain[:params.id_len], plain[params.id_len:]
    try:
        A = curve.decode_point(A_enc)
    except ValueError:
        raise SignatureInvalid("recovered A is not a curve point") from None
    if A.is_identity:
        raise SignatureInvalid("recovered A is the identity")
    try:
        X_i, Y_i = peer_pub_lookup(id_i)
    except (UnknownPseudonym, KeyError):
        raise UnknownPeer("recovered pseudonym is not registered") from None
    h = hs.h1_scalar(id_i + A_enc + ts_bytes(msg.T_a))
    if msg.sigma * msg.B != h * P + Y_i:
        raise SignatureInvalid("sigma*B != h1(ID||A||T_a)*P + Y")

    d = random_nonzero_scalar(curve, rng)
    D = d * P
    T_b = now
    k = _session_key(params, id_i, keys_j.id, A, D, T_b)
    shared = d * (k * A + X_i)
    sk = hs.h3_key(id_i + keys_j.id + shared.encode())
    eta = hs.h4_tag(id_i + keys_j.id + sk + ts_bytes(T_b))
    return ResponseMsg(D=D, eta=eta, T_b=T_b), sk, id_i


def finalize(params, msg, eph, keys_i, now, window):
    """Challenger side, last step. Zeroizes ``eph`` whether or not it succeeds."""
    try:
        check_fresh(msg.T_b, now, window)
        hs = params.hashes
        k = _session_key(params, keys_i.id, eph.peer_id, eph.A, msg.D, msg.T_b)
        shared = ((k * eph.a + keys_i.x) % params.q) * msg.D
        sk = hs.h3_key(keys_i.id + eph.peer_id + shared.encode())
        eta = hs.h4_tag(keys_i.id + eph.peer_id + sk + ts_bytes(msg.T_b))
        if not hmac.compare_digest(eta, msg.eta):
            raise TagMismatch("eta does not match the derived session key")
        return sk
    finally:
        eph.zeroize()


# -- pseudonym update ----------------------------------------------------------

def pseudonym_update_request(params, keys, now, rng, max_draws=MAX_EPHEMERAL_DRAWS):
    curve, P = params.curve, params.P
    for _ in range(max_draws):
        a = random_nonzero_scalar(curve, rng)
        b = random_nonzero_scalar(curve, rng)
        A = a * P
        sigma = _sign(params, keys.id, A, now, keys.y, b)
        if sigma:
            break
    else:
        raise DegenerateEphemeral(f"no usable (a, b) in {max_draws} draws")
    return PseudonymUpdateRequest(sigma=sigma, B=b * P, A=A, id=keys.id, R=keys.R, T=now)


def update_mask(params, y):
    return params.hashes.h_mask(params.curve.encode_scalar(y), params.mask_bits)


def pseudonym_update_finalize(params, reply, keys, now, window):
    """Recover the new pseudonym from the authority's reply."""
    check_fresh(reply.T_c, now, window)
    return xor_bytes(reply.Q, update_mask(params, keys.y))


# -- endpoint ------------------------------------------------------------------

class ReplayCache:
    """Digests of accepted challenges, remembered for ``ttl`` ms."""

    def __init__(self, ttl):
        self.ttl = ttl
        self._seen = {}

    def _prune(self, now):
        for d in [d for d, exp in self._seen.items() if exp < now]:
            del self._seen[d]

    def __contains__(self, digest):
        return digest in self._seen

    def check(self, digest, now):
        self._prune(now)
        if digest in self._seen:
            raise ReplayDetected("challenge already accepted")

    def add(self, digest, now):
        self._seen[digest] = now + self.ttl

    def __len__(self):
        return len(self._seen)


class Vehicle:
    """An OBU endpoint speaking wire bytes.

    ``lookup`` maps a pseudonym to the registered (X, Y) pair. ``handle`` values
    identify concurrent sessions on the challenger side; they are transport
    metadata and never go on the wire.
    """

    def __init__(self, name, params, keys, lookup, window=DEFAULT_WINDOW_MS, rng=None):
        self.name = name
        self.params = params
        self.keys = keys
        self.lookup = lookup
        self.window = window
        self.rng = rng if rng is not None else secrets.SystemRandom()
        self.replay_cache = ReplayCache(2 * window)
        self.sessions = {}
        self.last_auth_T_b = None

    @property
    def id(self):
        return self.keys.id

    def _decode(self, frame, expected):
        msg = decode_message(frame, self.params)
        if not isinstance(msg, expected):
            raise MalformedMessage(f"expected {expected.__name__}, got {type(msg).__name__}")
        return msg

    def auth_request(self):
        return encode_message(make_auth_request(self.keys), self.params)

    def on_auth_request(self, frame, now, handle):
        req = self._decode(frame, AuthRequest)
        msg, eph = build_challenge(self.params, req, self.keys, now, self.rng)
        self.sessions[handle] = eph
        return encode_message(msg, self.params)

    def on_challenge(self, frame, now):
        """Returns (response frame, session key, peer pseudonym)."""
        try:
            msg = self._decode(frame, ChallengeMsg)
        except MalformedMessage as exc:
            # a structurally sound challenge whose B or sigma is not a valid
            # group element / scalar cannot carry a valid signature
            if exc.field is not None:
                raise SignatureInvalid(str(exc)) from exc
            raise
        check_fresh(msg.T_a, now, self.window)
        digest = self.params.hashes.h4_tag(frame)
        self.replay_cache.check(digest, now)
        resp, sk, peer = process_challenge(self.params, msg, self.keys, self.lookup,
                                           now, self.window, self.rng)
        self.replay_cache.add(digest, now)
        self.last_auth_T_b = resp.T_b
        return encode_message(resp, self.params), sk, peer

    def on_response(self, frame, now, handle):
        eph = self.sessions.pop(handle, None)
        if eph is None:
            raise MalformedMessage("no session awaiting this response")
        try:
            msg = self._decode(frame, ResponseMsg)
        except MalformedMessage as exc:
            eph.zeroize()
            if exc.field is not None:
                raise TagMismatch(str(exc)) from exc
            raise
        sk = finalize(self.params, msg, eph, self.keys, now, self.window)
        self.last_auth_T_b = msg.T_b
        return sk

    def abort(self, handle):
        eph = self.sessions.pop(handle, None)
        if eph is not None:
            eph.zeroize()
        return eph

    def needs_pseudonym_update(self, now, delta_t):
        return self.last_auth_T_b is not None and abs(now - self.last_auth_T_b) >= delta_t

    def pseudonym_update_request(self, now):
        return encode_message(pseudonym_update_request(self.params, self.keys, now, self.rng),
                              self.params)

    def on_pseudonym_update_reply(self, frame, now):
        if self.sessions:
            raise RuntimeError("cannot replace pseudonym with sessions in flight")
        reply = self._decode(frame, PseudonymUpdateReply)
        new_id = pseudonym_update_finalize(self.params, reply, self.keys, now, self.window)
        self.keys = replace(self.keys, id=new_id)
        return new_id
