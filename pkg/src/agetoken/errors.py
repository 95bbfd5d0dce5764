"""Exception hierarchy shared by every party.

Protocol-level failures carry an HTTP-style ``status`` and a short ``reason``
slug so the services layer and the CLI can map them onto a fixed table
without a second lookup.
"""


class AgeTokenError(Exception):
    status = 500
    reason = "internal"


class MalformedError(AgeTokenError, ValueError):
    """Input bytes or values do not match the documented layout."""

    status = 400
    reason = "malformed"


class EncodingError(MalformedError):
    reason = "encoding"


class VerificationError(AgeTokenError):
    status = 400
    reason = "invalid-signature"


class BlindingError(AgeTokenError):
    status = 400
    reason = "blinding"


class KeyGenerationError(AgeTokenError, ValueError):
    reason = "keygen"


class AttesterAuthError(AgeTokenError):
    status = 401
    reason = "attester-auth"


class PolicyDeniedError(AgeTokenError):
    status = 403
    reason = "policy-denied"


class AllowanceExceededError(PolicyDeniedError):
    reason = "allowance-exceeded"


class UnknownIssuerError(AgeTokenError):
    status = 404
    reason = "unknown-issuer"


class DoubleSpendError(AgeTokenError):
    status = 409
    reason = "double-spend"


class ContextExpiredError(AgeTokenError):
    status = 410
    reason = "context-expired"


class KeyIdMismatchError(MalformedError):
    reason = "key-id-mismatch"


class IssuerMisbehaviorError(VerificationError):
    """A blind signature failed the client-side self-check in finalize."""

    reason = "issuer-misbehavior"


class PoolExhaustedError(AgeTokenError):
    """No usable token left; the client has to be attested again."""

    status = 429
    reason = "pool-exhausted"


ERROR_TABLE = {
    400: "malformed",
    401: "attester-auth",
    403: "policy-denied",
    404: "unknown-issuer",
    409: "double-spend",
    410: "context-expired",
}

# CLI exit codes; stable, one per failure class.
EXIT_CODES = {
    "ok": 0,
    "error": 1,
    "malformed": 2,
    "attester-auth": 3,
    "policy-denied": 4,
    "unknown-issuer": 5,
    "double-spend": 6,
    "context-expired": 7,
    "pool-exhausted": 8,
    "unreachable": 9,
}


def exit_code_for_status(status: int) -> int:
    if status == 429:
        return EXIT_CODES["pool-exhausted"]
    return EXIT_CODES.get(ERROR_TABLE.get(status, "error"), 1)
