"""Blind RSA signatures (RSABSSA-SHA384, RFC 9474 style).

The default variant is deterministic preparation with a zero-length PSS
salt, which reproduces published test vectors byte for byte.  The
randomized variant prepends 32 random bytes in :func:`prepare`.

Randomness comes from a ``random.Random``-compatible object (``randbytes``
and ``randrange``).  Pass a seeded ``random.Random`` for reproducible
simulations; the default is ``random.SystemRandom``.

Nothing here is constant time.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field

from .errors import BlindingError, EncodingError, IssuerMisbehaviorError, KeyGenerationError, MalformedError

HASH = hashlib.sha384
HASH_LEN = 48
PREFIX_LEN = 32
DEFAULT_EXPONENT = 65537
MIN_PRODUCTION_BITS = 2048
MIN_TOY_BITS = 16

_system_rng = random.SystemRandom()


@dataclass(frozen=True)
class IssuerPublicKey:
    modulus: int
    public_exponent: int

    def __post_init__(self):
        if self.public_exponent < 3 or self.public_exponent % 2 == 0:
            raise MalformedError("public exponent must be odd and >= 3")
        if self.modulus < 3:
            raise MalformedError("modulus too small")

    @property
    def modulus_len(self) -> int:
        return (self.modulus.bit_length() + 7) // 8

    @property
    def modulus_bits(self) -> int:
        return self.modulus.bit_length()


@dataclass(frozen=True)
class IssuerKeyPair:
    modulus: int
    public_exponent: int
    private_exponent: int
    prime_p: int
    prime_q: int
    _crt: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        p, q = self.prime_p, self.prime_q
        object.__setattr__(
            self,
            "_crt",
            (self.private_exponent % (p - 1), self.private_exponent % (q - 1), pow(q, -1, p)),
        )

    @property
    def public_key(self) -> IssuerPublicKey:
        return IssuerPublicKey(self.modulus, self.public_exponent)

    @property
    def modulus_len(self) -> int:
        return (self.modulus.bit_length() + 7) // 8

    def check(self) -> None:
        """Raise KeyGenerationError if the key pair invariants do not hold."""
        p, q, n = self.prime_p, self.prime_q, self.modulus
        if p * q != n:
            raise KeyGenerationError("modulus != p * q")
        lam = math.lcm(p - 1, q - 1)
        if (self.public_exponent * self.private_exponent) % lam != 1:
            raise KeyGenerationError("e * d != 1 mod lambda(n)")

    def _private_op(self, m: int) -> int:
        dp, dq, qinv = self._crt
        p, q = self.prime_p, self.prime_q
        if p == q:
            return pow(m, self.private_exponent, self.modulus)
        m1 = pow(m, dp, p)
        m2 = pow(m, dq, q)
        h = (qinv * (m1 - m2)) % p
        return m2 + h * q


@dataclass
class BlindingState:
    """Client-only secret left over from :func:`blind`. Single use."""

    inverse_blind: int
    prepared_message: bytes

    def __repr__(self):
        return f"BlindingState(prepared_message=<{len(self.prepared_message)} bytes>)"


# -- integer helpers -------------------------------------------------------


def int_to_bytes(value: int, length: int) -> bytes:
    if value < 0 or value >= 1 << (8 * length):
        raise EncodingError("integer too large for the requested width")
    return value.to_bytes(length, "big")


def bytes_to_int(data: bytes) -> int:
    return int.from_bytes(data, "big")


_SMALL_PRIMES = [p for p in range(3, 2000, 2) if all(p % d for d in range(3, int(p**0.5) + 1, 2))]


def is_probable_prime(n: int, rng=None, rounds: int = 40) -> bool:
    if n < 2:
        return False
    if n in (2, 3):
        return True
    if n % 2 == 0:
        return False
    for sp in _SMALL_PRIMES:
        if n == sp:
            return True
        if n % sp == 0:
            return False
    rng = rng or _system_rng
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _random_prime(bits: int, rng, e: int) -> int:
    if bits < 2:
        raise KeyGenerationError("prime size too small")
    while True:
        candidate = rng.getrandbits(bits)
        # top two bits set so the product has the full bit length
        candidate |= (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        candidate &= (1 << bits) - 1
        if candidate > 3 and math.gcd(candidate - 1, e) == 1 and is_probable_prime(candidate, rng):
            return candidate


def keypair_from_primes(p: int, q: int, e: int = DEFAULT_EXPONENT) -> IssuerKeyPair:
    """Build a key pair from known primes; d is e^-1 mod (p-1)(q-1)."""
    if p == q:
        raise KeyGenerationError("p and q must differ")
    phi = (p - 1) * (q - 1)
    if math.gcd(e, phi) != 1:
        raise KeyGenerationError("public exponent not invertible")
    d = pow(e, -1, phi)
    kp = IssuerKeyPair(p * q, e, d, p, q)
    kp.check()
    return kp


def generate_keypair(bits: int = MIN_PRODUCTION_BITS, rng=None, *, toy: bool = False,
                     e: int = DEFAULT_EXPONENT) -> IssuerKeyPair:
    """Generate an issuer key pair with an exactly ``bits``-bit modulus.

    ``toy=True`` permits moduli down to 16 bits for brute-force test
    oracles; otherwise at least 2048 bits are required.  Without ``rng`` the
    key comes from the ``cryptography`` package.
    """
    minimum = MIN_TOY_BITS if toy else MIN_PRODUCTION_BITS
    if bits < minimum:
        raise KeyGenerationError(f"modulus of {bits} bits is below the {minimum}-bit minimum")
    if e < 3 or e % 2 == 0:
        raise KeyGenerationError("public exponent must be odd and >= 3")

    if rng is None and bits >= 1024 and e == DEFAULT_EXPONENT:
        from cryptography.hazmat.primitives.asymmetric import rsa

        numbers = rsa.generate_private_key(public_exponent=e, key_size=bits).private_numbers()
        pub = numbers.public_numbers
        return keypair_from_primes(numbers.p, numbers.q, pub.e)

    rng = rng or _system_rng
    half = bits // 2
    while True:
        p = _random_prime(bits - half, rng, e)
        q = _random_prime(half, rng, e)
        if p == q or (p * q).bit_length() != bits:
            continue
        try:
            return keypair_from_primes(p, q, e)
        except KeyGenerationError:
            continue


# -- EMSA-PSS with SHA-384 -------------------------------------------------


def mgf1(seed: bytes, length: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < length:
        out += HASH(seed + counter.to_bytes(4, "big")).digest()
        counter += 1
    return bytes(out[:length])


def emsa_pss_encode(message: bytes, em_bits: int, salt: bytes = b"") -> bytes:
    em_len = (em_bits + 7) // 8
    m_hash = HASH(message).digest()
    if em_len < HASH_LEN + len(salt) + 2:
        raise EncodingError("modulus too small for PSS encoding with SHA-384")
    h = HASH(b"\x00" * 8 + m_hash + salt).digest()
    db = b"\x00" * (em_len - len(salt) - HASH_LEN - 2) + b"\x01" + salt
    masked = bytearray(a ^ b for a, b in zip(db, mgf1(h, em_len - HASH_LEN - 1)))
    masked[0] &= 0xFF >> (8 * em_len - em_bits)
    return bytes(masked) + h + b"\xbc"


def emsa_pss_verify(message: bytes, encoded: bytes, em_bits: int, salt_length: int) -> bool:
    em_len = (em_bits + 7) // 8
    if len(encoded) != em_len or em_len < HASH_LEN + salt_length + 2:
        return False
    if encoded[-1] != 0xBC:
        return False
    masked, h = encoded[: em_len - HASH_LEN - 1], encoded[em_len - HASH_LEN - 1 : -1]
    top_mask = 0xFF >> (8 * em_len - em_bits)
    if masked[0] & ~top_mask & 0xFF:
        return False
    db = bytearray(a ^ b for a, b in zip(masked, mgf1(h, len(masked))))
    db[0] &= top_mask
    pad_len = em_len - HASH_LEN - salt_length - 2
    if any(db[:pad_len]) or db[pad_len] != 0x01:
        return False
    salt = bytes(db[len(db) - salt_length :]) if salt_length else b""
    return HASH(b"\x00" * 8 + HASH(message).digest() + salt).digest() == h


# -- raw RSA over integers (used directly by the toy oracles) --------------


def blind_integer(pk: IssuerPublicKey, encoded: int, blind_factor: int) -> tuple[int, int]:
    """Return (encoded * r^e mod n, r^-1 mod n)."""
    n = pk.modulus
    if math.gcd(blind_factor, n) != 1:
        raise BlindingError("blind factor not invertible modulo n")
    return (encoded * pow(blind_factor, pk.public_exponent, n)) % n, pow(blind_factor, -1, n)


def sign_integer(sk: IssuerKeyPair, value: int) -> int:
    if not 0 <= value < sk.modulus:
        raise MalformedError("blinded message out of range")
    return sk._private_op(value)


def unblind_integer(pk: IssuerPublicKey, blind_signature: int, inverse_blind: int) -> int:
    return (blind_signature * inverse_blind) % pk.modulus


# -- protocol operations ---------------------------------------------------


def prepare(message: bytes, rng=None, *, randomized: bool = False, prefix: bytes | None = None) -> bytes:
    if not message:
        raise MalformedError("message must be non-empty")
    if not randomized:
        return bytes(message)
    if prefix is None:
        prefix = (rng or _system_rng).randbytes(PREFIX_LEN)
    if len(prefix) != PREFIX_LEN:
        raise MalformedError("randomizer prefix must be 32 bytes")
    return bytes(prefix) + bytes(message)


def blind(pk: IssuerPublicKey, prepared: bytes, rng=None, *, salt_length: int = 0,
          salt: bytes | None = None, blind_factor: int | None = None) -> tuple[bytes, BlindingState]:
    """Blind a prepared message for signing under ``pk``.

    ``salt`` and ``blind_factor`` are injection points for known-answer
    tests; a non-invertible injected factor raises BlindingError, while a
    freshly drawn one is silently redrawn.
    """
    rng = rng or _system_rng
    n = pk.modulus
    if salt is None:
        salt = rng.randbytes(salt_length) if salt_length else b""
    elif len(salt) != salt_length:
        raise MalformedError("salt length mismatch")
    encoded = bytes_to_int(emsa_pss_encode(prepared, pk.modulus_bits - 1, salt))
    if math.gcd(encoded, n) != 1:
        raise EncodingError("encoded message shares a factor with the modulus")

    if blind_factor is not None:
        blinded, inverse = blind_integer(pk, encoded, blind_factor)
    else:
        while True:
            r = rng.randrange(1, n)
            try:
                blinded, inverse = blind_integer(pk, encoded, r)
                break
            except BlindingError:
                continue
    return int_to_bytes(blinded, pk.modulus_len), BlindingState(inverse, bytes(prepared))


def blind_sign(sk: IssuerKeyPair, blinded_message: bytes) -> bytes:
    k = sk.modulus_len
    if len(blinded_message) != k:
        raise MalformedError(f"blinded message must be {k} bytes")
    m = bytes_to_int(blinded_message)
    s = sign_integer(sk, m)
    if pow(s, sk.public_exponent, sk.modulus) != m:
        raise IssuerMisbehaviorError("signing fault detected")
    return int_to_bytes(s, k)


def finalize(pk: IssuerPublicKey, prepared: bytes, blind_signature: bytes, state: BlindingState,
             *, salt_length: int = 0) -> bytes:
    k = pk.modulus_len
    if len(blind_signature) != k:
        raise MalformedError(f"blind signature must be {k} bytes")
    z = bytes_to_int(blind_signature)
    if z >= pk.modulus:
        raise MalformedError("blind signature out of range")
    signature = int_to_bytes(unblind_integer(pk, z, state.inverse_blind), k)
    if not verify(pk, prepared, signature, salt_length=salt_length):
        raise IssuerMisbehaviorError("finalized signature does not verify")
    return signature


def verify(pk: IssuerPublicKey, prepared: bytes, signature: bytes, *, salt_length: int = 0) -> bool:
    if len(signature) != pk.modulus_len:
        return False
    s = bytes_to_int(signature)
    if s >= pk.modulus:
        return False
    em_bits = pk.modulus_bits - 1
    m = pow(s, pk.public_exponent, pk.modulus)
    em_len = (em_bits + 7) // 8
    if m >= 1 << (8 * em_len):
        return False
    return emsa_pss_verify(prepared, int_to_bytes(m, em_len), em_bits, salt_length)
