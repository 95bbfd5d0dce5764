"""Spent-token records and stores.

Log file layout (``PersistentSpentStore``)::

    header  = b"AVSPENT1"
    record  = nonce(32) | token_key_id(32) | spend_time_us(8, signed)
              | origin_len(2) | origin_id(utf-8) | crc32(4)

The CRC covers the record bytes before it.  A torn record at the tail is
dropped on load.  Compaction rewrites the log into a temporary file and
renames it over the original.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from dataclasses import dataclass
from typing import Iterable

from .errors import MalformedError

MAGIC = b"AVSPENT1"
_FIXED = struct.Struct(">32s32sqH")


@dataclass(frozen=True)
class SpentTokenRecord:
    nonce: bytes
    token_key_id: bytes
    origin_id: str
    spend_time: float

    @property
    def key(self) -> tuple[bytes, bytes]:
        return (self.nonce, self.token_key_id)

    def encode(self) -> bytes:
        origin = self.origin_id.encode("utf-8")
        body = _FIXED.pack(self.nonce, self.token_key_id, int(round(self.spend_time * 1e6)), len(origin)) + origin
        return body + struct.pack(">I", zlib.crc32(body))

    @classmethod
    def decode_from(cls, buf: bytes, pos: int = 0) -> tuple[SpentTokenRecord, int]:
        end = pos + _FIXED.size
        if end > len(buf):
            raise MalformedError("truncated spent record")
        nonce, key_id, micros, olen = _FIXED.unpack_from(buf, pos)
        body_end = end + olen
        if body_end + 4 > len(buf):
            raise MalformedError("truncated spent record")
        (crc,) = struct.unpack_from(">I", buf, body_end)
        if zlib.crc32(buf[pos:body_end]) != crc:
            raise MalformedError("spent record checksum mismatch")
        try:
            origin = buf[end:body_end].decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedError("bad origin id in spent record") from None
        return cls(nonce, key_id, origin, micros / 1e6), body_end + 4


def encode_records(records: Iterable[SpentTokenRecord]) -> bytes:
    return b"".join(r.encode() for r in records)


def decode_records(buf: bytes) -> list[SpentTokenRecord]:
    out, pos = [], 0
    while pos < len(buf):
        rec, pos = SpentTokenRecord.decode_from(buf, pos)
        out.append(rec)
    return out


class SpentStore:
    """Set of spent (nonce, token_key_id) pairs with an atomic check-and-insert.

    Records keep insertion order; a record's position is its sequence
    number, which sync peers use as a watermark.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._keys: set[tuple[bytes, bytes]] = set()
        self._log: list[SpentTokenRecord] = []

    def __len__(self):
        with self._lock:
            return len(self._log)

    def __contains__(self, key) -> bool:
        with self._lock:
            return tuple(key) in self._keys

    def check_and_insert(self, record: SpentTokenRecord) -> bool:
        with self._lock:
            if record.key in self._keys:
                return False
            self._persist([record])
            self._keys.add(record.key)
            self._log.append(record)
            return True

    def merge(self, records: Iterable[SpentTokenRecord]) -> int:
        """Union-merge foreign records; returns how many were new."""
        with self._lock:
            fresh, seen = [], set()
            for r in records:
                if r.key not in self._keys and r.key not in seen:
                    fresh.append(r)
                    seen.add(r.key)
            if fresh:
                self._persist(fresh)
                self._keys.update(seen)
                self._log.extend(fresh)
            return len(fresh)

    def records(self, since: int = 0) -> list[SpentTokenRecord]:
        with self._lock:
            return self._log[since:]

    def keys(self) -> frozenset:
        with self._lock:
            return frozenset(self._keys)

    def _persist(self, records: list[SpentTokenRecord]) -> None:
        pass


class PersistentSpentStore(SpentStore):
    def __init__(self, path: str | os.PathLike, *, fsync: bool = True):
        super().__init__()
        self.path = os.fspath(path)
        self.fsync = fsync
        self._load()
        self._fh = open(self.path, "ab")
        if self._fh.tell() == 0:
            self._fh.write(MAGIC)
            self._flush()

    def _load(self) -> None:
        if not os.path.exists(self.path):
            return
        with open(self.path, "rb") as fh:
            buf = fh.read()
        if not buf:
            return
        if not buf.startswith(MAGIC):
            raise MalformedError(f"{self.path}: not a spent-token log")
        pos, good = len(MAGIC), len(MAGIC)
        while pos < len(buf):
            try:
                rec, pos = SpentTokenRecord.decode_from(buf, pos)
            except MalformedError:
                break
            if rec.key not in self._keys:
                self._keys.add(rec.key)
                self._log.append(rec)
            good = pos
        if good != len(buf):
            # torn tail from an interrupted append
            with open(self.path, "r+b") as fh:
                fh.truncate(good)

    def _flush(self) -> None:
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def _persist(self, records: list[SpentTokenRecord]) -> None:
        self._fh.write(encode_records(records))
        self._flush()

    def compact(self) -> None:
        with self._lock:
            tmp = self.path + ".compact"
            with open(tmp, "wb") as fh:
                fh.write(MAGIC + encode_records(self._log))
                fh.flush()
                os.fsync(fh.fileno())
            self._fh.close()
            os.replace(tmp, self.path)
            self._fh = open(self.path, "ab")

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()
