"""Trusted list of attesters and issuers with an append-only version history.

Every successful :meth:`TrustedList.register` produces a new immutable
snapshot; older snapshots stay queryable.  Snapshot text format::

    {
      "digest": "<sha256 hex of the canonical entries array>",
      "entries": [ {"entity_id", "role", "status", "metadata", "keys": [
          {"key_id", "public_key", "valid_from", "valid_until"}]} ],
      "format": "agetoken-trusted-list/1",
      "version": <int>
    }

serialized with ``json.dumps(indent=2, sort_keys=True)`` plus a trailing
newline, entries ordered by entity_id, keys by key_id, bytes as lowercase
hex and times as integer seconds.
"""

from __future__ import annotations

import enum
import hashlib
import json
import threading
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, NamedTuple

from .errors import MalformedError
from .policy import AgePolicy

FORMAT = "agetoken-trusted-list/1"


class Role(str, enum.Enum):
    ATTESTER = "attester"
    ISSUER = "issuer"


class Status(str, enum.Enum):
    ACTIVE = "active"
    SUSPENDED = "suspended"
    REVOKED = "revoked"


@dataclass(frozen=True)
class KeyRecord:
    key_id: bytes
    public_key: bytes
    valid_from: int
    valid_until: int

    def valid_at(self, at: float) -> bool:
        return self.valid_from <= at < self.valid_until

    def overlaps(self, other: KeyRecord) -> bool:
        return self.valid_from < other.valid_until and other.valid_from < self.valid_until


@dataclass(frozen=True)
class TrustedListEntry:
    entity_id: str
    role: Role
    status: Status = Status.ACTIVE
    keys: tuple[KeyRecord, ...] = ()
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "status", Status(self.status))
        object.__setattr__(self, "keys", tuple(sorted(self.keys, key=lambda k: k.key_id)))
        object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))

    def policy(self) -> AgePolicy | None:
        """Policy an issuer entity is trusted to issue under (metadata ``policy``)."""
        label = self.metadata.get("policy")
        return AgePolicy.parse(label) if label else None

    def attests(self, policy: AgePolicy) -> bool:
        """Whether an attester entity is trusted for ``policy`` (metadata ``policies``)."""
        labels = self.metadata.get("policies", "")
        return any(policy.minimum_age_years == AgePolicy.parse(p.strip()).minimum_age_years
                   and AgePolicy.parse(p.strip()).required_assurance >= policy.required_assurance
                   for p in labels.split(",") if p.strip())


class Resolved(NamedTuple):
    entity_id: str
    public_key: bytes
    entry: TrustedListEntry


def make_key_record(public_key: bytes, valid_from: int = 0, valid_until: int = 2**40) -> KeyRecord:
    return KeyRecord(hashlib.sha256(public_key).digest(), bytes(public_key), int(valid_from), int(valid_until))


def validate_entry(entry: TrustedListEntry) -> None:
    if not entry.entity_id:
        raise MalformedError("entity_id must be non-empty")
    seen = set()
    for k in entry.keys:
        if len(k.key_id) != 32:
            raise MalformedError("key_id must be 32 bytes")
        if k.key_id in seen:
            raise MalformedError(f"duplicate key_id {k.key_id.hex()} in {entry.entity_id}")
        seen.add(k.key_id)
        if hashlib.sha256(k.public_key).digest() != k.key_id:
            raise MalformedError(f"key_id does not match key material in {entry.entity_id}")
        if k.valid_from >= k.valid_until:
            raise MalformedError("empty key validity window")
    if entry.role is Role.ISSUER and "policy" in entry.metadata:
        entry.policy()


class Snapshot:
    """One immutable version of the list, with a key_id index."""

    def __init__(self, version: int, entries: Mapping[str, TrustedListEntry]):
        self.version = version
        self.entries = MappingProxyType(dict(entries))
        index: dict[bytes, list[tuple[TrustedListEntry, KeyRecord]]] = {}
        for entry in self.entries.values():
            for k in entry.keys:
                index.setdefault(k.key_id, []).append((entry, k))
        self._index = index

    def resolve_key(self, key_id: bytes, at: float) -> Resolved | None:
        for entry, k in self._index.get(bytes(key_id), ()):
            if entry.status is Status.ACTIVE and k.valid_at(at):
                return Resolved(entry.entity_id, k.public_key, entry)
        return None

    def get(self, entity_id: str) -> TrustedListEntry | None:
        return self.entries.get(entity_id)


class TrustedList:
    def __init__(self):
        self._versions: list[Snapshot] = [Snapshot(0, {})]
        self._lock = threading.Lock()

    @property
    def version(self) -> int:
        return self._versions[-1].version

    def snapshot(self, version: int | None = None) -> Snapshot:
        if version is None:
            return self._versions[-1]
        base = self._versions[0].version
        if not base <= version <= self.version:
            raise KeyError(f"no trusted-list version {version}")
        return self._versions[version - base]

    def register(self, entry: TrustedListEntry) -> int:
        """Add or replace an entity; returns the new version number."""
        validate_entry(entry)
        with self._lock:
            current = self._versions[-1]
            previous = current.get(entry.entity_id)
            if previous is not None:
                if previous.role is not entry.role:
                    raise MalformedError("entity role cannot change")
                if previous.status is Status.REVOKED and entry.status is not Status.REVOKED:
                    raise MalformedError(f"{entry.entity_id} is revoked permanently")
            for other in current.entries.values():
                if other.entity_id == entry.entity_id:
                    continue
                for k in entry.keys:
                    for ok in other.keys:
                        if ok.key_id == k.key_id and ok.overlaps(k):
                            raise MalformedError(
                                f"key_id {k.key_id.hex()[:16]} already registered to {other.entity_id}")
            entries = dict(current.entries)
            entries[entry.entity_id] = entry
            snap = Snapshot(current.version + 1, entries)
            self._versions.append(snap)
            return snap.version

    def set_status(self, entity_id: str, status: Status) -> int:
        entry = self.snapshot().get(entity_id)
        if entry is None:
            raise KeyError(entity_id)
        return self.register(TrustedListEntry(entry.entity_id, entry.role, status, entry.keys, entry.metadata))

    def resolve_key(self, key_id: bytes, at: float, version: int | None = None) -> Resolved | None:
        return self.snapshot(version).resolve_key(key_id, at)

    def export_list(self, version: int | None = None) -> bytes:
        return export_snapshot(self.snapshot(version))

    @classmethod
    def import_list(cls, data: bytes | str) -> TrustedList:
        snap = parse_snapshot(data)
        tl = cls()
        tl._versions = [snap]
        return tl

    def lookup(self, key_id: bytes, at: float) -> Resolved | None:
        return self.resolve_key(key_id, at)


# -- serialization -----------------------------------------------------------


def _entry_to_dict(entry: TrustedListEntry) -> dict:
    return {
        "entity_id": entry.entity_id,
        "role": entry.role.value,
        "status": entry.status.value,
        "metadata": dict(entry.metadata),
        "keys": [
            {"key_id": k.key_id.hex(), "public_key": k.public_key.hex(),
             "valid_from": k.valid_from, "valid_until": k.valid_until}
            for k in entry.keys
        ],
    }


def _entries_digest(entries: list) -> str:
    canonical = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(canonical).hexdigest()


def export_snapshot(snap: Snapshot) -> bytes:
    entries = [_entry_to_dict(snap.entries[k]) for k in sorted(snap.entries)]
    doc = {"format": FORMAT, "version": snap.version, "entries": entries, "digest": _entries_digest(entries)}
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


def _field(obj: dict, name: str, kind, where: str):
    if not isinstance(obj, dict) or name not in obj:
        raise MalformedError(f"{where}: missing field {name!r}")
    value = obj[name]
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise MalformedError(f"{where}.{name}: expected {kind.__name__}")
    return value


def _hex(value: str, where: str) -> bytes:
    try:
        return bytes.fromhex(value)
    except ValueError:
        raise MalformedError(f"{where}: invalid hex") from None


def parse_snapshot(data: bytes | str) -> Snapshot:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if _field(doc, "format", str, "list") != FORMAT:
        raise MalformedError(f"list.format: unsupported {doc['format']!r}")
    version = _field(doc, "version", int, "list")
    raw_entries = _field(doc, "entries", list, "list")
    digest = _field(doc, "digest", str, "list")
    if _entries_digest(raw_entries) != digest:
        raise MalformedError("list.digest: does not match entries (tampered?)")
    entries = {}
    for i, e in enumerate(raw_entries):
        where = f"entries[{i}]"
        keys = []
        for j, k in enumerate(_field(e, "keys", list, where)):
            kw = f"{where}.keys[{j}]"
            keys.append(KeyRecord(_hex(_field(k, "key_id", str, kw), kw + ".key_id"),
                                  _hex(_field(k, "public_key", str, kw), kw + ".public_key"),
                                  _field(k, "valid_from", int, kw), _field(k, "valid_until", int, kw)))
        metadata = _field(e, "metadata", dict, where)
        if not all(isinstance(v, str) for v in metadata.values()):
            raise MalformedError(f"{where}.metadata: values must be strings")
        try:
            entry = TrustedListEntry(_field(e, "entity_id", str, where), Role(_field(e, "role", str, where)),
                                     Status(_field(e, "status", str, where)), tuple(keys), metadata)
        except ValueError as exc:
            raise MalformedError(f"{where}: {exc}") from None
        try:
            validate_entry(entry)
        except MalformedError as exc:
            raise MalformedError(f"{where}: {exc}") from None
        if entry.entity_id in entries:
            raise MalformedError(f"{where}.entity_id: duplicate {entry.entity_id!r}")
        entries[entry.entity_id] = entry
    snap = Snapshot(version, entries)
    if export_snapshot(snap).decode() != text:
        raise MalformedError("list is not in canonical form")
    return snap
