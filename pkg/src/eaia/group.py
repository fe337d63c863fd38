"""Prime-order elliptic-curve groups and the protocol hash functions.

Two backends share one interface:

    TOY    y^2 = x^3 + 2x + 2 over F_17, generator (5, 1), order 19.
           Small enough to enumerate every scalar, used as a brute-force
           oracle for the protocol algebra.
    P256   NIST P-256 (secp256r1), the production backend.

Both curves have cofactor 1, so every on-curve point lies in the order-q
subgroup and decoding only has to check the curve equation.

WARNING: arithmetic here is not constant time. It is meant for simulation
and test-vector work, not for protecting real keys against side channels.

Scalars are plain ints reduced mod q. Points are immutable ``Point``
objects supporting ``P + Q``, ``-P`` and ``k * P``.
"""

from __future__ import annotations

import hashlib

try:
    from gmpy2 import mpz
except ImportError:  # pragma: no cover - plain ints work, just slower
    mpz = int

from .errors import MalformedPoint, ZeroScalar

__all__ = [
    "Curve", "Point", "HashSuite", "TOY", "P256", "get_curve", "CURVES",
    "random_scalar", "random_nonzero_scalar", "SystemParams", "xor_bytes",
]


class Point:
    __slots__ = ("curve", "x", "y")

    def __init__(self, curve, x, y):
        self.curve = curve
        self.x = x
        self.y = y

    @property
    def is_identity(self):
        return self.x is None

    def __eq__(self, other):
        if not isinstance(other, Point):
            return NotImplemented
        return self.curve is other.curve and self.x == other.x and self.y == other.y

    def __hash__(self):
        return hash((self.curve.name, self.x, self.y))

    def __add__(self, other):
        return self.curve.point_add(self, other)

    def __neg__(self):
        return self.curve.point_neg(self)

    def __sub__(self, other):
        return self + (-other)

    def __rmul__(self, k):
        return self.curve.point_mul(k, self)

    def __mul__(self, k):
        return self.curve.point_mul(k, self)

    def encode(self):
        return self.curve.encode_point(self)

    def __repr__(self):
        if self.is_identity:
            return f"Point<{self.curve.name}>(O)"
        return f"Point<{self.curve.name}>({self.x:#x}, {self.y:#x})"


class Curve:
    """Short Weierstrass curve y^2 = x^3 + ax + b over F_p with prime order q."""

    # fixed-base tables use 4-bit windows
    _W = 4

    def __init__(self, name, p, a, b, gx, gy, q):
        self.name = name
        self.p = p
        self.a = a % p
        self._pz = mpz(p)
        self._az = mpz(a % p)
        self._a_is_minus3 = (a % p) == p - 3
        self.b = b % p
        self.q = q
        self.field_len = (p.bit_length() + 7) // 8
        self.scalar_len = (q.bit_length() + 7) // 8
        self.point_len = 1 + 2 * self.field_len
        self.identity = Point(self, None, None)
        self.G = Point(self, gx, gy)
        if not self.is_on_curve(self.G):
            raise ValueError(f"{name}: generator not on curve")
        self._g_table = None

    def __repr__(self):
        return f"Curve({self.name})"

    # -- affine helpers --------------------------------------------------

    def is_on_curve(self, pt):
        if pt.is_identity:
            return True
        x, y, p = pt.x, pt.y, self.p
        return (y * y - (x * x * x + self.a * x + self.b)) % p == 0

    def point(self, x, y):
        pt = Point(self, x % self.p, y % self.p)
        if not self.is_on_curve(pt):
            raise MalformedPoint(f"({x}, {y}) is not on {self.name}")
        return pt

    def point_neg(self, pt):
        if pt.is_identity:
            return pt
        return Point(self, pt.x, (-pt.y) % self.p)

    # -- Jacobian arithmetic (X, Y, Z) ~ (X/Z^2, Y/Z^3); Z == 0 is O -------

    def _to_jac(self, pt):
        if pt.is_identity:
            return (1, 1, 0)
        return (mpz(pt.x), mpz(pt.y), 1)

    def _from_jac(self, J):
        X, Y, Z = J
        if Z == 0:
            return self.identity
        p = self._pz
        zi = pow(Z, -1, p)
        zi2 = zi * zi % p
        return Point(self, int(X * zi2 % p), int(Y * zi2 * zi % p))

    def _jdouble(self, J):
        X, Y, Z = J
        if Z == 0 or Y == 0:
            return (1, 1, 0)
        p = self._pz
        YY = Y * Y % p
        S = 4 * X * YY % p
        ZZ = Z * Z % p
        if self._a_is_minus3:
            M = 3 * (X - ZZ) * (X + ZZ) % p
        else:
            M = (3 * X * X + self._az * ZZ * ZZ) % p
        X3 = (M * M - 2 * S) % p
        Y3 = (M * (S - X3) - 8 * YY * YY) % p
        Z3 = 2 * Y * Z % p
        return (X3, Y3, Z3)

    def _jadd(self, J1, J2):
        X1, Y1, Z1 = J1
        X2, Y2, Z2 = J2
        if Z1 == 0:
            return J2
        if Z2 == 0:
            return J1
        p = self._pz
        Z1Z1 = Z1 * Z1 % p
        Z2Z2 = Z2 * Z2 % p
        U1 = X1 * Z2Z2 % p
        U2 = X2 * Z1Z1 % p
        S1 = Y1 * Z2 * Z2Z2 % p
        S2 = Y2 * Z1 * Z1Z1 % p
        if U1 == U2:
            if S1 != S2:
                return (1, 1, 0)
            return self._jdouble(J1)
        H = (U2 - U1) % p
        R = (S2 - S1) % p
        HH = H * H % p
        HHH = H * HH % p
        V = U1 * HH % p
        X3 = (R * R - HHH - 2 * V) % p
        Y3 = (R * (V - X3) - S1 * HHH) % p
        Z3 = H * Z1 * Z2 % p
        return (X3, Y3, Z3)

    def _jadd_affine(self, J1, x2, y2):
        # mixed addition, second operand has Z == 1
        X1, Y1, Z1 = J1
        if Z1 == 0:
            return (x2, y2, 1)
        p = self._pz
        Z1Z1 = Z1 * Z1 % p
        U2 = x2 * Z1Z1 % p
        S2 = y2 * Z1 * Z1Z1 % p
        if X1 == U2:
            if Y1 != S2:
                return (1, 1, 0)
            return self._jdouble(J1)
        H = (U2 - X1) % p
        R = (S2 - Y1) % p
        HH = H * H % p
        HHH = H * HH % p
        V = X1 * HH % p
        X3 = (R * R - HHH - 2 * V) % p
        Y3 = (R * (V - X3) - Y1 * HHH) % p
        Z3 = H * Z1 % p
        return (X3, Y3, Z3)

    # -- group operations ------------------------------------------------

    def point_add(self, P1, P2):
        if P1.is_identity:
            return P2
        if P2.is_identity:
            return P1
        return self._from_jac(self._jadd_affine(self._to_jac(P1), mpz(P2.x), mpz(P2.y)))

    def point_mul(self, k, pt):
        k %= self.q
        if k == 0 or pt.is_identity:
            return self.identity
        if pt == self.G:
            return self._mul_base(k)
        return self._from_jac(self._mul_window(k, pt))

    def _mul_window(self, k, pt):
        W = self._W
        px, py = mpz(pt.x), mpz(pt.y)
        table = [(1, 1, 0), (px, py, 1)]
        for _ in range(2, 1 << W):
            table.append(self._jadd_affine(table[-1], px, py))
        acc = (1, 1, 0)
        nwin = (k.bit_length() + W - 1) // W
        mask = (1 << W) - 1
        for i in range(nwin - 1, -1, -1):
            for _ in range(W):
                acc = self._jdouble(acc)
            d = (k >> (i * W)) & mask
            if d:
                acc = self._jadd(acc, table[d])
        return acc

    def _base_table(self):
        # table[i][d-1] = d * 16^i * G in affine, for every window position i
        if self._g_table is None:
            W = self._W
            rows = []
            base = self.G
            for _ in range((self.q.bit_length() + W - 1) // W):
                row = []
                acc = self._to_jac(base)
                for _ in range(1, 1 << W):
                    row.append(acc)
                    acc = self._jadd_affine(acc, base.x, base.y)
                row = [self._from_jac(J) for J in row]
                rows.append([(mpz(P.x), mpz(P.y)) if not P.is_identity else None for P in row])
                base = self._from_jac(acc)  # 16^(i+1) * G
            self._g_table = rows
        return self._g_table

    def _mul_base(self, k):
        W = self._W
        mask = (1 << W) - 1
        acc = (1, 1, 0)
        for i, row in enumerate(self._base_table()):
            d = (k >> (i * W)) & mask
            if d:
                entry = row[d - 1]
                if entry is not None:
                    acc = self._jadd_affine(acc, *entry)
        return self._from_jac(acc)

    def scalar_inv(self, k):
        k %= self.q
        if k == 0:
            raise ZeroScalar("zero scalar has no inverse")
        return pow(k, -1, self.q)

    # -- encodings -------------------------------------------------------

    def encode_point(self, pt):
        """0x04 || x || y, big-endian field-width coordinates; O is b'\\x00'."""
        if pt.is_identity:
            return b"\x00"
        n = self.field_len
        return b"\x04" + pt.x.to_bytes(n, "big") + pt.y.to_bytes(n, "big")

    def decode_point(self, data):
        data = bytes(data)
        if data == b"\x00":
            return self.identity
        if len(data) != self.point_len or data[0] != 4:
            raise MalformedPoint(f"bad point encoding length/prefix for {self.name}")
        n = self.field_len
        x = int.from_bytes(data[1:1 + n], "big")
        y = int.from_bytes(data[1 + n:], "big")
        if x >= self.p or y >= self.p:
            raise MalformedPoint("coordinate out of range")
        pt = Point(self, x, y)
        if not self.is_on_curve(pt):
            raise MalformedPoint("point not on curve")
        return pt

    def encode_scalar(self, k):
        return (k % self.q).to_bytes(self.scalar_len, "big")

    def decode_scalar(self, data):
        if len(data) != self.scalar_len:
            raise ValueError("bad scalar width")
        k = int.from_bytes(data, "big")
        if k >= self.q:
            raise ValueError("scalar not reduced")
        return k

    def enumerate_points(self):
        """All points of the curve (including O). Only sensible for tiny curves."""
        if self.p > 1 << 16:
            raise ValueError("refusing to enumerate a large curve")
        pts = [self.identity]
        for x in range(self.p):
            rhs = (x ** 3 + self.a * x + self.b) % self.p
            for y in range(self.p):
                if y * y % self.p == rhs:
                    pts.append(Point(self, x, y))
        return pts


def random_scalar(curve, rng):
    return rng.randrange(0, curve.q)


def random_nonzero_scalar(curve, rng):
    return rng.randrange(1, curve.q)


TOY = Curve("toy17", p=17, a=2, b=2, gx=5, gy=1, q=19)

P256 = Curve(
    "p256",
    p=0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF,
    a=-3,
    b=0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B,
    gx=0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296,
    gy=0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5,
    q=0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551,
)

CURVES = {"toy": TOY, "production": P256, TOY.name: TOY, P256.name: P256}


def get_curve(name):
    try:
        return CURVES[name]
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; choose from toy, production") from None


# -- hashing ---------------------------------------------------------------

_TAG_H1 = b"\x01"
_TAG_H2 = b"\x02"
_TAG_H3 = b"\x03"
_TAG_H4 = b"\x04"
_TAG_MASK = b"\x05"


def _xof(tag, data, nbytes):
    return hashlib.shake_256(tag + bytes(data)).digest(nbytes)


def xor_bytes(a, b):
    if len(a) != len(b):
        raise ValueError(f"xor width mismatch: {len(a)} vs {len(b)}")
    return bytes(x ^ y for x, y in zip(a, b))


class HashSuite:
    """The five hash profiles, all domain-separated SHAKE-256.

    h1_scalar -> nonzero scalar mod q
    h2_mask   -> keystream from a group point (any length)
    h3_key    -> session key of ``key_bits``
    h4_tag    -> authenticator of ``tag_bits``
    h_mask    -> fixed-width mask for pseudonym XORs (``mask_bits``)
    """

    def __init__(self, curve, key_bits=256, tag_bits=256, mask_bits=256):
        for name, v in (("key_bits", key_bits), ("tag_bits", tag_bits), ("mask_bits", mask_bits)):
            if v <= 0 or v % 8:
                raise ValueError(f"{name} must be a positive multiple of 8, got {v}")
        self.curve = curve
        self.key_bits = key_bits
        self.tag_bits = tag_bits
        self.mask_bits = mask_bits

    def h1_scalar(self, data):
        q = self.curve.q
        # 64 extra bits keep the reduction bias negligible
        wide = _xof(_TAG_H1, data, self.curve.scalar_len + 8)
        return int.from_bytes(wide, "big") % (q - 1) + 1

    def h2_mask(self, pt, nbits):
        if nbits <= 0:
            raise ValueError("nbits must be positive")
        out = bytearray(_xof(_TAG_H2, self.curve.encode_point(pt), (nbits + 7) // 8))
        if nbits % 8:
            out[-1] &= (0xFF << (8 - nbits % 8)) & 0xFF
        return bytes(out)

    def h3_key(self, data):
        return _xof(_TAG_H3, data, self.key_bits // 8)

    def h4_tag(self, data):
        return _xof(_TAG_H4, data, self.tag_bits // 8)

    def h_mask(self, data, width=None):
        width = self.mask_bits if width is None else width
        return _xof(_TAG_MASK, data, width // 8)


class SystemParams:
    """Public parameters published by the authority at setup.

    ``key_bits`` is the session-key length, ``tag_bits`` the length of the
    response authenticator and ``mask_bits`` the pseudonym width.
    """

    def __init__(self, curve, P_pub, key_bits=256, tag_bits=256, mask_bits=256):
        if not curve.is_on_curve(P_pub) or P_pub.is_identity:
            raise MalformedPoint("P_pub must be a non-identity curve point")
        self.curve = curve
        self.P_pub = P_pub
        self.hashes = HashSuite(curve, key_bits, tag_bits, mask_bits)

    @property
    def P(self):
        return self.curve.G

    @property
    def q(self):
        return self.curve.q

    @property
    def key_bits(self):
        return self.hashes.key_bits

    @property
    def tag_bits(self):
        return self.hashes.tag_bits

    @property
    def mask_bits(self):
        return self.hashes.mask_bits

    @property
    def id_len(self):
        return self.mask_bits // 8

    def __eq__(self, other):
        return isinstance(other, SystemParams) and self.to_dict() == other.to_dict()

    def to_dict(self):
        return {
            "backend": self.curve.name,
            "P_pub": self.P_pub.encode().hex(),
            "key_bits": self.key_bits,
            "tag_bits": self.tag_bits,
            "mask_bits": self.mask_bits,
        }

    @classmethod
    def from_dict(cls, d):
        curve = get_curve(d["backend"])
        return cls(curve, curve.decode_point(bytes.fromhex(d["P_pub"])),
                   d["key_bits"], d["tag_bits"], d["mask_bits"])
