"""Content-addressed copy-on-write state store.

Environment state is a flat memory image plus a file tree. Both are cut into
fixed-size chunks addressed by their digest. A :class:`Snapshot` is an
immutable manifest of chunk ids; a :class:`Branch` is a mutable overlay
(dirty memory slots, dirty files, tombstones) on top of one snapshot.

Layout of a store root directory::

    store.json                      {"digest_algo", "chunk_size", "version", ...}
    chunks/<first-2-hex>/<digest>   raw chunk bytes
    manifests/<snapshot-id>.json    one manifest per sealed snapshot

The all-zero chunk is never stored; manifests refer to it as ``"ZERO"``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

from .errors import InvalidPath, NotFound, OutOfBounds, StorageFull, UnknownSnapshot

logger = logging.getLogger(__name__)

ZERO = "ZERO"
DEFAULT_CHUNK_SIZE = 65536
DEFAULT_FILE_MODE = 0o644
STORE_VERSION = 1
DIGEST_ALGOS = ("sha256", "sha3_256", "blake2b")


class _Tombstone:
    __slots__ = ()

    def __repr__(self) -> str:
        return "TOMBSTONE"


TOMBSTONE = _Tombstone()


def make_digest(algo: str) -> Callable[[bytes | bytearray | memoryview], str]:
    """Return a hex-digest function for one of the supported 256-bit hashes."""
    if algo == "sha256":
        return lambda data: hashlib.sha256(data).hexdigest()
    if algo == "sha3_256":
        return lambda data: hashlib.sha3_256(data).hexdigest()
    if algo == "blake2b":
        return lambda data: hashlib.blake2b(data, digest_size=32).hexdigest()
    raise ValueError(f"unsupported digest algorithm {algo!r}; choose from {DIGEST_ALGOS}")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def normalize_path(path: str) -> str:
    """Normalize an absolute file path, rejecting anything that escapes ``/``."""
    if not isinstance(path, str) or not path.startswith("/"):
        raise InvalidPath(f"path must be absolute: {path!r}")
    if "\x00" in path or any(c.isspace() for c in path):
        raise InvalidPath(f"path contains NUL or whitespace: {path!r}")
    parts: list[str] = []
    for part in path.split("/"):
        if part in ("", "."):
            continue
        if part == "..":
            if not parts:
                raise InvalidPath(f"path escapes root: {path!r}")
            parts.pop()
            continue
        parts.append(part)
    if not parts:
        raise InvalidPath("the root directory is not a file")
    return "/" + "/".join(parts)


@dataclass(frozen=True)
class FileEntry:
    length: int
    chunks: tuple[str, ...]
    mode: int = DEFAULT_FILE_MODE

    def to_json(self) -> dict:
        return {"len": self.length, "chunks": list(self.chunks), "mode": self.mode}

    @classmethod
    def from_json(cls, d: dict) -> "FileEntry":
        return cls(d["len"], tuple(d["chunks"]), d.get("mode", DEFAULT_FILE_MODE))


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Sealed, immutable environment state.

    ``id`` is the digest of the canonical manifest body (chunk size, memory
    size, memory slots and files). ``parent`` is provenance only and does not
    take part in the id, so byte-identical states always share one id.
    """

    id: str
    parent: str | None
    chunk_size: int
    mem_size: int
    mem_slots: tuple[str, ...]
    files: Mapping[str, FileEntry]

    @staticmethod
    def body(chunk_size: int, mem_size: int, mem_slots: Iterable[str],
             files: Mapping[str, FileEntry]) -> dict:
        return {
            "chunk_size": chunk_size,
            "mem_size": mem_size,
            "mem_slots": list(mem_slots),
            "files": {p: e.to_json() for p, e in files.items()},
        }

    def to_json(self) -> dict:
        d = self.body(self.chunk_size, self.mem_size, self.mem_slots, self.files)
        d["id"] = self.id
        d["parent"] = self.parent
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Snapshot":
        files = {p: FileEntry.from_json(e) for p, e in d["files"].items()}
        return cls(d["id"], d.get("parent"), d["chunk_size"], d["mem_size"],
                   tuple(d["mem_slots"]), files)

    def chunk_ids(self) -> set[str]:
        ids = set(self.mem_slots)
        for entry in self.files.values():
            ids.update(entry.chunks)
        ids.discard(ZERO)
        return ids


class ChunkStore:
    """Digest-keyed blob storage, in memory or under ``root/chunks``."""

    def __init__(self, root: Path | None = None):
        self.root = root
        self._mem: dict[str, bytes] = {}
        self._sizes: dict[str, int] = {}
        self.nbytes = 0
        if root is not None:
            root.mkdir(parents=True, exist_ok=True)
            for sub in root.iterdir():
                if not sub.is_dir():
                    continue
                for f in sub.iterdir():
                    if not f.name.endswith(".tmp"):
                        self._sizes[f.name] = f.stat().st_size
            self.nbytes = sum(self._sizes.values())

    def _path(self, cid: str) -> Path:
        assert self.root is not None
        return self.root / cid[:2] / cid

    def __contains__(self, cid: str) -> bool:
        return cid in self._sizes

    def __len__(self) -> int:
        return len(self._sizes)

    def ids(self) -> list[str]:
        return list(self._sizes)

    def get(self, cid: str) -> bytes:
        if self.root is None:
            return self._mem[cid]
        return self._path(cid).read_bytes()

    def put(self, cid: str, data: bytes) -> None:
        if cid in self._sizes:
            return
        if self.root is None:
            self._mem[cid] = data
        else:
            path = self._path(cid)
            path.parent.mkdir(exist_ok=True)
            tmp = path.with_name(cid + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        self._sizes[cid] = len(data)
        self.nbytes += len(data)

    def remove(self, cid: str) -> int:
        size = self._sizes.pop(cid)
        if self.root is None:
            del self._mem[cid]
        else:
            self._path(cid).unlink()
        self.nbytes -= size
        return size


class Store:
    """Chunk store plus snapshot manifests.

    Sealed snapshots and chunks are safe for concurrent readers. ``gc`` and the
    write phase of ``seal_snapshot`` are serialized on one lock.
    """

    def __init__(self, root: str | Path | None = None, *, chunk_size: int = DEFAULT_CHUNK_SIZE,
                 digest_algo: str = "sha256", capacity_bytes: int | None = None,
                 extensions: dict | None = None):
        if chunk_size <= 0:
            raise ValueError("chunk_size must be positive")
        self.root = Path(root) if root is not None else None
        self.chunk_size = chunk_size
        self.digest_algo = digest_algo
        self.digest = make_digest(digest_algo)
        self.capacity_bytes = capacity_bytes
        self.extensions: dict = dict(extensions or {})
        self.zero_chunk = bytes(chunk_size)
        self._lock = threading.RLock()
        self._snapshots: dict[str, Snapshot] = {}
        self._manifest_sizes: dict[str, int] = {}
        self.chunks = ChunkStore(self.root / "chunks" if self.root else None)
        if self.root is not None:
            (self.root / "manifests").mkdir(parents=True, exist_ok=True)
            self.save_metadata()

    # -- persistence ---------------------------------------------------------

    @classmethod
    def open(cls, root: str | Path) -> "Store":
        """Reopen a store directory, verifying every manifest id."""
        root = Path(root)
        meta_path = root / "store.json"
        if not meta_path.exists():
            raise UnknownSnapshot(f"no store at {root}")
        meta = json.loads(meta_path.read_text())
        if meta.get("version") != STORE_VERSION:
            raise ValueError(f"unsupported store version {meta.get('version')!r}")
        extensions = {k: v for k, v in meta.items()
                      if k not in ("digest_algo", "chunk_size", "version")}
        store = cls.__new__(cls)
        store.root = root
        store.chunk_size = meta["chunk_size"]
        store.digest_algo = meta["digest_algo"]
        store.digest = make_digest(store.digest_algo)
        store.capacity_bytes = extensions.pop("capacity_bytes", None)
        store.extensions = extensions
        store.zero_chunk = bytes(store.chunk_size)
        store._lock = threading.RLock()
        store._snapshots = {}
        store._manifest_sizes = {}
        store.chunks = ChunkStore(root / "chunks")
        for path in sorted((root / "manifests").glob("*.json")):
            raw = path.read_bytes()
            snap = Snapshot.from_json(json.loads(raw))
            if store.content_id(snap.mem_size, snap.mem_slots, snap.files) != snap.id:
                raise UnknownSnapshot(f"manifest {path.name} does not match its id")
            store._snapshots[snap.id] = snap
            store._manifest_sizes[snap.id] = len(raw)
        return store

    def save_metadata(self) -> None:
        if self.root is None:
            return
        meta = dict(self.extensions)
        if self.capacity_bytes is not None:
            meta["capacity_bytes"] = self.capacity_bytes
        meta.update(digest_algo=self.digest_algo, chunk_size=self.chunk_size,
                    version=STORE_VERSION)
        (self.root / "store.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    # -- accounting ----------------------------------------------------------

    @property
    def manifest_bytes(self) -> int:
        return sum(self._manifest_sizes.values())

    @property
    def size_bytes(self) -> int:
        """Chunk bytes plus manifest bytes."""
        return self.chunks.nbytes + self.manifest_bytes

    @property
    def chunk_count(self) -> int:
        return len(self.chunks)

    # -- snapshots -----------------------------------------------------------

    def content_id(self, mem_size: int, mem_slots: Iterable[str],
                   files: Mapping[str, FileEntry]) -> str:
        return self.digest(canonical_json(Snapshot.body(self.chunk_size, mem_size, mem_slots, files)))

    def snapshot_ids(self) -> list[str]:
        return list(self._snapshots)

    def get_snapshot(self, snapshot_id: str) -> Snapshot:
        try:
            return self._snapshots[snapshot_id]
        except KeyError:
            raise UnknownSnapshot(snapshot_id) from None

    def has_snapshot(self, snapshot_id: str) -> bool:
        return snapshot_id in self._snapshots

    def empty_snapshot(self, mem_size: int) -> Snapshot:
        """All-zero memory of ``mem_size`` bytes and no files. Costs O(1) chunks."""
        if mem_size < 0:
            raise ValueError("mem_size must be non-negative")
        slots = (ZERO,) * (-(-mem_size // self.chunk_size))
        sid = self.content_id(mem_size, slots, {})
        if sid in self._snapshots:
            return self._snapshots[sid]
        snap = Snapshot(sid, None, self.chunk_size, mem_size, slots, {})
        with self._lock:
            self._register(snap, {})
        return snap

    def _register(self, snap: Snapshot, new_chunks: Mapping[str, bytes]) -> None:
        raw = canonical_json(snap.to_json())
        incoming = sum(len(b) for b in new_chunks.values()) + len(raw)
        if self.capacity_bytes is not None and self.size_bytes + incoming > self.capacity_bytes:
            raise StorageFull(f"sealing needs {incoming} bytes; capacity is {self.capacity_bytes}")
        for cid, data in new_chunks.items():
            self.chunks.put(cid, data)
        if self.root is not None:
            path = self.root / "manifests" / f"{snap.id}.json"
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(raw)
            os.replace(tmp, path)
        self._snapshots[snap.id] = snap
        self._manifest_sizes[snap.id] = len(raw)

    def open_branch(self, snapshot: Snapshot | str) -> "Branch":
        """Start an empty overlay on ``snapshot``. No chunk is copied."""
        sid = snapshot if isinstance(snapshot, str) else snapshot.id
        return Branch(self, self.get_snapshot(sid))

    # -- reads through a snapshot --------------------------------------------

    def chunk_bytes(self, cid: str) -> bytes:
        if cid == ZERO:
            return self.zero_chunk
        return self.chunks.get(cid)

    def read_mem(self, snap: Snapshot, offset: int, length: int) -> bytes:
        _check_range(offset, length, snap.mem_size)
        return b"".join(self._iter_mem(snap, offset, length, {}))

    def _iter_mem(self, snap: Snapshot, offset: int, length: int,
                  overlay: Mapping[int, bytearray]) -> Iterator[bytes]:
        cs = self.chunk_size
        end = offset + length
        pos = offset
        while pos < end:
            slot, within = divmod(pos, cs)
            take = min(cs - within, end - pos)
            buf = overlay.get(slot)
            if buf is None:
                buf = self.chunk_bytes(snap.mem_slots[slot])
            yield bytes(buf[within:within + take])
            pos += take

    def read_file(self, snap: Snapshot, path: str) -> bytes:
        entry = snap.files.get(normalize_path(path))
        if entry is None:
            raise NotFound(path)
        return self.entry_bytes(entry)

    def entry_bytes(self, entry: FileEntry) -> bytes:
        data = b"".join(self.chunk_bytes(c) for c in entry.chunks)
        return data[:entry.length]

    # -- gc ------------------------------------------------------------------

    def gc(self, live_snapshot_ids: Iterable[str]) -> int:
        """Drop every manifest not in ``live_snapshot_ids`` and every chunk no
        live manifest references. Returns reclaimed bytes (chunks + manifests)."""
        with self._lock:
            live = set(live_snapshot_ids)
            for sid in live:
                self.get_snapshot(sid)
            reachable: set[str] = set()
            for sid in live:
                reachable |= self._snapshots[sid].chunk_ids()
            reclaimed = 0
            for cid in self.chunks.ids():
                if cid not in reachable:
                    reclaimed += self.chunks.remove(cid)
            for sid in list(self._snapshots):
                if sid in live:
                    continue
                del self._snapshots[sid]
                reclaimed += self._manifest_sizes.pop(sid)
                if self.root is not None:
                    (self.root / "manifests" / f"{sid}.json").unlink(missing_ok=True)
            logger.debug("gc kept %d snapshots, reclaimed %d bytes", len(live), reclaimed)
            return reclaimed


def _check_range(offset: int, length: int, size: int) -> None:
    if offset < 0 or length < 0 or offset + length > size:
        raise OutOfBounds(f"[{offset}, {offset + length}) outside memory of {size} bytes")


@dataclass
class DirtyStats:
    mem_chunks: int = 0
    mem_bytes: int = 0
    fs_chunks: int = 0
    fs_bytes: int = 0

    @property
    def dirty_chunks(self) -> int:
        return self.mem_chunks + self.fs_chunks

    @property
    def dirty_bytes(self) -> int:
        return self.mem_bytes + self.fs_bytes


@dataclass(eq=False)
class Branch:
    """Mutable overlay on a base snapshot. Single writer.

    Reads resolve overlay first, then the base. Dirtiness is tracked at chunk
    granularity: touching one byte of a memory slot dirties the whole slot.
    """

    store: Store
    base: Snapshot
    dirty_mem: dict[int, bytearray] = field(default_factory=dict)
    dirty_files: dict[str, bytes | _Tombstone] = field(default_factory=dict)

    @property
    def mem_size(self) -> int:
        return self.base.mem_size

    # -- memory --------------------------------------------------------------

    def mem_write(self, offset: int, data: bytes | bytearray | memoryview) -> None:
        _check_range(offset, len(data), self.base.mem_size)
        cs = self.store.chunk_size
        view = memoryview(data)
        pos, end, src = offset, offset + len(data), 0
        while pos < end:
            slot, within = divmod(pos, cs)
            take = min(cs - within, end - pos)
            buf = self.dirty_mem.get(slot)
            if buf is None:
                if take == cs:
                    buf = bytearray(view[src:src + take])
                    self.dirty_mem[slot] = buf
                    pos += take
                    src += take
                    continue
                buf = bytearray(self.store.chunk_bytes(self.base.mem_slots[slot]))
                self.dirty_mem[slot] = buf
            buf[within:within + take] = view[src:src + take]
            pos += take
            src += take

    def mem_is_zero(self, offset: int, length: int) -> bool:
        """True if every byte in the range is zero. Clean ZERO slots are not read."""
        _check_range(offset, length, self.base.mem_size)
        cs = self.store.chunk_size
        pos, end = offset, offset + length
        while pos < end:
            slot, within = divmod(pos, cs)
            take = min(cs - within, end - pos)
            buf = self.dirty_mem.get(slot)
            if buf is None:
                cid = self.base.mem_slots[slot]
                if cid != ZERO and self.store.chunks.get(cid)[within:within + take] != self.store.zero_chunk[:take]:
                    return False
            elif buf[within:within + take] != self.store.zero_chunk[:take]:
                return False
            pos += take
        return True

    def mem_read(self, offset: int, length: int) -> bytes:
        _check_range(offset, length, self.base.mem_size)
        return b"".join(self.store._iter_mem(self.base, offset, length, self.dirty_mem))

    # -- files ---------------------------------------------------------------

    def _lookup(self, path: str) -> bytes | FileEntry | None:
        val = self.dirty_files.get(path)
        if val is TOMBSTONE:
            return None
        if val is not None:
            return val
        return self.base.files.get(path)

    def fs_exists(self, path: str) -> bool:
        return self._lookup(normalize_path(path)) is not None

    def fs_list(self) -> list[str]:
        names = set(self.base.files)
        for path, val in self.dirty_files.items():
            if val is TOMBSTONE:
                names.discard(path)
            else:
                names.add(path)
        return sorted(names)

    def fs_get(self, path: str) -> bytes:
        val = self._lookup(normalize_path(path))
        if val is None:
            raise NotFound(path)
        if isinstance(val, FileEntry):
            return self.store.entry_bytes(val)
        return val

    def fs_size(self, path: str) -> int:
        val = self._lookup(normalize_path(path))
        if val is None:
            raise NotFound(path)
        return val.length if isinstance(val, FileEntry) else len(val)

    def check_put_path(self, path: str) -> str:
        """Normalize ``path`` and reject file/directory prefix clashes."""
        path = normalize_path(path)
        if self._lookup(path) is not None:
            return path
        prefix = path + "/"
        for other in self.fs_list():
            if other.startswith(prefix) or path.startswith(other + "/"):
                raise InvalidPath(f"{path} clashes with existing file {other}")
        return path

    def fs_put(self, path: str, data: bytes) -> None:
        path = self.check_put_path(path)
        self.dirty_files[path] = bytes(data)

    def fs_delete(self, path: str) -> None:
        path = normalize_path(path)
        if self._lookup(path) is None:
            raise NotFound(path)
        if path in self.base.files:
            self.dirty_files[path] = TOMBSTONE
        else:
            del self.dirty_files[path]

    # -- sealing -------------------------------------------------------------

    def dirty_stats(self) -> DirtyStats:
        cs = self.store.chunk_size
        stats = DirtyStats(mem_chunks=len(self.dirty_mem), mem_bytes=len(self.dirty_mem) * cs)
        for val in self.dirty_files.values():
            if val is TOMBSTONE:
                continue
            n = -(-len(val) // cs)
            stats.fs_chunks += n
            stats.fs_bytes += n * cs
        return stats

    def _chunk_file(self, data: bytes, new_chunks: dict[str, bytes] | None) -> tuple[str, ...]:
        store = self.store
        cs = store.chunk_size
        view = memoryview(data)
        ids = []
        for i in range(0, len(data), cs):
            piece = view[i:i + cs]
            if len(piece) == cs and piece == store.zero_chunk:
                ids.append(ZERO)
                continue
            cid = store.digest(piece)
            if new_chunks is not None and cid not in store.chunks:
                new_chunks[cid] = bytes(piece)
            ids.append(cid)
        return tuple(ids)

    def _manifest(self, new_chunks: dict[str, bytes] | None):
        store = self.store
        slots = list(self.base.mem_slots)
        for idx, buf in self.dirty_mem.items():
            if buf == store.zero_chunk:
                slots[idx] = ZERO
                continue
            cid = store.digest(buf)
            if new_chunks is not None and cid not in store.chunks:
                new_chunks[cid] = bytes(buf)
            slots[idx] = cid
        files = dict(self.base.files)
        for path, val in self.dirty_files.items():
            if val is TOMBSTONE:
                files.pop(path, None)
            else:
                files[path] = FileEntry(len(val), self._chunk_file(val, new_chunks))
        files = dict(sorted(files.items()))
        return tuple(slots), files

    def state_digest(self) -> str:
        """Id the branch would get if sealed now. Nothing is stored."""
        if not self.dirty_mem and not self.dirty_files:
            return self.base.id
        slots, files = self._manifest(None)
        return self.store.content_id(self.base.mem_size, slots, files)

    def seal_snapshot(self) -> Snapshot:
        """Hash and store dirty chunks, register the manifest, and rebase the
        branch on the result. Clean slots keep their base chunk ids."""
        if not self.dirty_mem and not self.dirty_files:
            return self.base
        store = self.store
        new_chunks: dict[str, bytes] = {}
        slots, files = self._manifest(new_chunks)
        sid = store.content_id(self.base.mem_size, slots, files)
        with store._lock:
            if store.has_snapshot(sid):
                snap = store.get_snapshot(sid)
            else:
                snap = Snapshot(sid, self.base.id, store.chunk_size, self.base.mem_size, slots, files)
                store._register(snap, new_chunks)
        self.base = snap
        self.dirty_mem = {}
        self.dirty_files = {}
        return snap

    def read_all(self) -> tuple[bytes, dict[str, bytes]]:
        """Whole logical state; meant for tests and small images."""
        return self.mem_read(0, self.mem_size), {p: self.fs_get(p) for p in self.fs_list()}
