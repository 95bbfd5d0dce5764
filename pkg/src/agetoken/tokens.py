"""Wire structures for challenges, token requests and tokens.

Byte layouts (all integers big-endian):

    TokenChallenge = token_type(2) | len(2) issuer_name | len(1) redemption_context
                     | len(2) origin_info
    TokenRequest   = token_type(2) | truncated_key_id(1) | blinded_message(Nk)
    Token          = token_type(2) | nonce(32) | challenge_digest(32)
                     | token_key_id(32) | authenticator(Nk)

Nk is the issuer modulus length in bytes.  It is implied by the token type
for registered types, and can be passed explicitly otherwise.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from .blindsig import IssuerPublicKey
from .errors import MalformedError

TOKEN_TYPE_BLIND_RSA = 0x0002
TOKEN_TYPE_TOY = 0xF0A1
TOY_MODULUS_BITS = 512

# token_type -> authenticator width in bytes
TOKEN_WIDTHS = {
    TOKEN_TYPE_BLIND_RSA: 256,
    TOKEN_TYPE_TOY: TOY_MODULUS_BITS // 8,
}

NONCE_LEN = 32
DIGEST_LEN = 32
CONTEXT_LEN = 32
TOKEN_INPUT_LEN = 2 + NONCE_LEN + DIGEST_LEN + DIGEST_LEN


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def token_type_for(pk: IssuerPublicKey) -> int:
    for token_type, width in TOKEN_WIDTHS.items():
        if width == pk.modulus_len:
            return token_type
    raise MalformedError(f"no token type registered for {pk.modulus_bits}-bit keys")


def width_for(token_type: int, nk: int | None = None) -> int:
    if nk is not None:
        if token_type in TOKEN_WIDTHS and TOKEN_WIDTHS[token_type] != nk:
            raise MalformedError("authenticator width does not match token type")
        return nk
    try:
        return TOKEN_WIDTHS[token_type]
    except KeyError:
        raise MalformedError(f"unknown token type 0x{token_type:04x}") from None


# -- public key encoding ---------------------------------------------------


def _der_length(n: int) -> bytes:
    if n < 0x80:
        return bytes([n])
    body = n.to_bytes((n.bit_length() + 7) // 8, "big")
    return bytes([0x80 | len(body)]) + body


def _der_integer(value: int) -> bytes:
    body = value.to_bytes(value.bit_length() // 8 + 1, "big")
    return b"\x02" + _der_length(len(body)) + body


def encode_public_key(pk: IssuerPublicKey) -> bytes:
    """DER ``RSAPublicKey ::= SEQUENCE { modulus INTEGER, publicExponent INTEGER }``."""
    body = _der_integer(pk.modulus) + _der_integer(pk.public_exponent)
    return b"\x30" + _der_length(len(body)) + body


def decode_public_key(data: bytes) -> IssuerPublicKey:
    def read_len(buf, pos):
        first = buf[pos]
        pos += 1
        if first < 0x80:
            return first, pos
        count = first & 0x7F
        if count == 0 or count > 4:
            raise MalformedError("bad DER length")
        return int.from_bytes(buf[pos : pos + count], "big"), pos + count

    def read_int(buf, pos):
        if buf[pos] != 0x02:
            raise MalformedError("expected DER INTEGER")
        length, pos = read_len(buf, pos + 1)
        return int.from_bytes(buf[pos : pos + length], "big"), pos + length

    try:
        if data[0] != 0x30:
            raise MalformedError("expected DER SEQUENCE")
        length, pos = read_len(data, 1)
        if pos + length != len(data):
            raise MalformedError("trailing bytes after public key")
        n, pos = read_int(data, pos)
        e, pos = read_int(data, pos)
    except IndexError:
        raise MalformedError("truncated public key") from None
    if pos != len(data):
        raise MalformedError("trailing bytes inside public key")
    pk = IssuerPublicKey(n, e)
    if encode_public_key(pk) != data:
        raise MalformedError("non-canonical public key encoding")
    return pk


def derive_key_id(pk: IssuerPublicKey) -> bytes:
    return sha256(encode_public_key(pk))


# -- challenge ---------------------------------------------------------------


@dataclass(frozen=True)
class TokenChallenge:
    token_type: int
    issuer_name: str
    redemption_context: bytes = b""
    origin_info: str = ""

    @property
    def bound(self) -> bool:
        return len(self.redemption_context) == CONTEXT_LEN


def _check_challenge(c: TokenChallenge, issuer_hiding: bool) -> None:
    if not 0 <= c.token_type <= 0xFFFF:
        raise MalformedError("token_type out of range")
    if len(c.redemption_context) not in (0, CONTEXT_LEN):
        raise MalformedError("redemption_context must be 0 or 32 bytes")
    if not c.issuer_name and not issuer_hiding:
        raise MalformedError("issuer_name required outside issuer-hiding mode")


def encode_challenge(c: TokenChallenge, *, issuer_hiding: bool = False) -> bytes:
    _check_challenge(c, issuer_hiding)
    issuer = c.issuer_name.encode("utf-8")
    origin = c.origin_info.encode("utf-8")
    if len(issuer) > 0xFFFF or len(origin) > 0xFFFF:
        raise MalformedError("string field too long")
    return b"".join([
        struct.pack(">HH", c.token_type, len(issuer)), issuer,
        bytes([len(c.redemption_context)]), c.redemption_context,
        struct.pack(">H", len(origin)), origin,
    ])


class _Reader:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedError("truncated input")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def text(self, n: int) -> str:
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedError("invalid UTF-8") from None

    def done(self) -> None:
        if self.pos != len(self.data):
            raise MalformedError("trailing bytes")


def decode_challenge(data: bytes, *, issuer_hiding: bool = False) -> TokenChallenge:
    r = _Reader(data)
    token_type = r.u16()
    issuer = r.text(r.u16())
    ctx_len = r.u8()
    if ctx_len not in (0, CONTEXT_LEN):
        raise MalformedError("redemption_context must be 0 or 32 bytes")
    context = r.take(ctx_len)
    origin = r.text(r.u16())
    r.done()
    c = TokenChallenge(token_type, issuer, context, origin)
    _check_challenge(c, issuer_hiding)
    return c


def challenge_digest(challenge: TokenChallenge | bytes) -> bytes:
    if isinstance(challenge, TokenChallenge):
        challenge = encode_challenge(challenge, issuer_hiding=True)
    return sha256(challenge)


# -- token request -----------------------------------------------------------


@dataclass(frozen=True)
class TokenRequest:
    token_type: int
    truncated_key_id: int
    blinded_message: bytes


def encode_request(req: TokenRequest, nk: int | None = None) -> bytes:
    width = width_for(req.token_type, nk)
    if len(req.blinded_message) != width:
        raise MalformedError(f"blinded_message must be {width} bytes")
    if not 0 <= req.truncated_key_id <= 0xFF:
        raise MalformedError("truncated_key_id out of range")
    return struct.pack(">HB", req.token_type, req.truncated_key_id) + req.blinded_message


def decode_request(data: bytes, nk: int | None = None) -> TokenRequest:
    r = _Reader(data)
    token_type = r.u16()
    width = width_for(token_type, nk)
    key_id = r.u8()
    blinded = r.take(width)
    r.done()
    return TokenRequest(token_type, key_id, blinded)


# -- token -------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    token_type: int
    nonce: bytes
    challenge_digest: bytes
    token_key_id: bytes
    authenticator: bytes = b""

    def input_bytes(self) -> bytes:
        return token_input(self)


def token_input(t: Token) -> bytes:
    """The 98-byte message the issuer blind-signs."""
    if len(t.nonce) != NONCE_LEN or len(t.challenge_digest) != DIGEST_LEN or len(t.token_key_id) != DIGEST_LEN:
        raise MalformedError("token field has the wrong length")
    return struct.pack(">H", t.token_type) + t.nonce + t.challenge_digest + t.token_key_id


def encode_token(t: Token, nk: int | None = None) -> bytes:
    width = width_for(t.token_type, nk)
    if len(t.authenticator) != width:
        raise MalformedError(f"authenticator must be {width} bytes")
    return token_input(t) + t.authenticator


def decode_token(data: bytes, nk: int | None = None) -> Token:
    r = _Reader(data)
    token_type = r.u16()
    width = width_for(token_type, nk)
    nonce = r.take(NONCE_LEN)
    digest = r.take(DIGEST_LEN)
    key_id = r.take(DIGEST_LEN)
    auth = r.take(width)
    r.done()
    return Token(token_type, nonce, digest, key_id, auth)


def token_length(token_type: int, nk: int | None = None) -> int:
    return TOKEN_INPUT_LEN + width_for(token_type, nk)
