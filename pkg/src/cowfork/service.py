"""Fork-aware key/value service with intrinsically versioned side effects.

Every write lands in a view's staging area and becomes part of an immutable
commit; views never mutate shared state. Commits form an append-only DAG and
diverged branches simply coexist in it (no merge).

Two visibility modes govern forking:

* ``COMMITTED_ONLY`` - a view may only be forked once its head is committed
  and nothing is staged, so nobody ever sees tentative effects.
* ``OPTIMISTIC`` - staged writes are sealed into an ``IN_FLIGHT`` commit and
  the child chains from it.
"""

from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

from .errors import EmptyCommit, UncommittedFork, UnknownSnapshot
from .store import canonical_json, make_digest

OUTBOX_PREFIX = "outbox/"


class VisibilityMode(Enum):
    COMMITTED_ONLY = "committed_only"
    OPTIMISTIC = "optimistic"


class CommitState(Enum):
    IN_FLIGHT = "IN_FLIGHT"
    COMMITTED = "COMMITTED"


@dataclass(eq=False)
class CommitRecord:
    commit_id: str
    parent: str | None
    writes: Mapping[str, bytes | None]
    author_branch: str
    state: CommitState

    def to_json(self) -> dict:
        return {
            "commit_id": self.commit_id,
            "parent": self.parent,
            "writes": {k: (None if v is None else v.hex()) for k, v in sorted(self.writes.items())},
            "author_branch": self.author_branch,
            "state": self.state.value,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CommitRecord":
        writes = {k: (None if v is None else bytes.fromhex(v)) for k, v in d["writes"].items()}
        return cls(d["commit_id"], d["parent"], MappingProxyType(writes),
                   d["author_branch"], CommitState(d["state"]))


class VersionedService:
    """Append-only commit DAG shared by every :class:`BranchView`."""

    def __init__(self, digest_algo: str = "sha256"):
        self.digest_algo = digest_algo
        self._digest = make_digest(digest_algo)
        self.commits: dict[str, CommitRecord] = {}
        self._resolved: dict[str | None, Mapping[str, bytes]] = {None: MappingProxyType({})}
        self._view_ids = itertools.count()
        self._lock = threading.Lock()

    def commit_digest(self, parent: str | None, writes: Mapping[str, bytes | None]) -> str:
        body = {"parent": parent,
                "writes": {k: (None if v is None else v.hex()) for k, v in writes.items()}}
        return self._digest(canonical_json(body))

    def record(self, commit_id: str | None) -> CommitRecord | None:
        if commit_id is None:
            return None
        try:
            return self.commits[commit_id]
        except KeyError:
            raise UnknownSnapshot(f"unknown commit {commit_id}") from None

    def is_committed(self, commit_id: str | None) -> bool:
        return commit_id is None or self.commits[commit_id].state is CommitState.COMMITTED

    def _append(self, parent: str | None, writes: dict[str, bytes | None], author: str,
                state: CommitState) -> CommitRecord:
        cid = self.commit_digest(parent, writes)
        with self._lock:
            rec = self.commits.get(cid)
            if rec is None:
                rec = CommitRecord(cid, parent, MappingProxyType(dict(writes)), author, state)
                self.commits[cid] = rec
            if state is CommitState.COMMITTED:
                rec.state = CommitState.COMMITTED
                self._promote(rec.parent)
        return rec

    def _promote(self, commit_id: str | None) -> None:
        # a committed record implies its whole ancestry is committed
        while commit_id is not None:
            rec = self.commits[commit_id]
            if rec.state is CommitState.COMMITTED:
                return
            rec.state = CommitState.COMMITTED
            commit_id = rec.parent

    def resolved(self, commit_id: str | None) -> Mapping[str, bytes]:
        """Visible key/value map at ``commit_id`` (tombstones removed). Memoized:
        commits are immutable."""
        cached = self._resolved.get(commit_id)
        if cached is not None:
            return cached
        chain = []
        cur = commit_id
        while cur not in self._resolved:
            chain.append(cur)
            cur = self.record(cur).parent
        base = self._resolved[cur]
        for cid in reversed(chain):
            merged = dict(base)
            for k, v in self.commits[cid].writes.items():
                if v is None:
                    merged.pop(k, None)
                else:
                    merged[k] = v
            base = MappingProxyType(merged)
            self._resolved[cid] = base
        return base

    def view(self, head: str | None = None, mode: VisibilityMode = VisibilityMode.COMMITTED_ONLY,
             name: str | None = None) -> "BranchView":
        """Open a view whose head is ``head`` (``None`` is the empty genesis)."""
        self.record(head)
        return BranchView(self, head, {}, mode, name or f"view-{next(self._view_ids)}")

    # -- service.json ----------------------------------------------------------

    def to_json(self) -> list[dict]:
        return [rec.to_json() for rec in self.commits.values()]

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def loads(cls, text: str, digest_algo: str = "sha256") -> "VersionedService":
        svc = cls(digest_algo)
        for d in json.loads(text):
            rec = CommitRecord.from_json(d)
            svc.commits[rec.commit_id] = rec
        return svc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path, digest_algo: str = "sha256") -> "VersionedService":
        return cls.loads(Path(path).read_text(), digest_algo)


@dataclass(eq=False)
class BranchView:
    """One actor's window onto the service. Single writer.

    ``get`` resolves staged writes, then the head's commit chain.
    """

    service: VersionedService
    head: str | None
    staged: dict[str, bytes | None] = field(default_factory=dict)
    mode: VisibilityMode = VisibilityMode.COMMITTED_ONLY
    name: str = "view"

    def put(self, key: str, value: bytes) -> None:
        self.staged[key] = bytes(value)

    def delete(self, key: str) -> None:
        self.staged[key] = None

    def get(self, key: str) -> bytes | None:
        if key in self.staged:
            return self.staged[key]
        cur = self.head
        while cur is not None:
            rec = self.service.commits[cur]
            if key in rec.writes:
                return rec.writes[key]
            cur = rec.parent
        return None

    def visible(self) -> dict[str, bytes]:
        merged = dict(self.service.resolved(self.head))
        for k, v in self.staged.items():
            if v is None:
                merged.pop(k, None)
            else:
                merged[k] = v
        return merged

    def commit(self) -> CommitRecord:
        """Finalize staged writes as a COMMITTED record on top of ``head``.

        With nothing staged, an in-flight head is promoted instead; an already
        committed (or empty) head raises :class:`EmptyCommit`.
        """
        if not self.staged:
            if self.head is None or self.service.is_committed(self.head):
                raise EmptyCommit(f"{self.name} has nothing staged")
            self.service._promote(self.head)
            return self.service.commits[self.head]
        rec = self.service._append(self.head, self.staged, self.name, CommitState.COMMITTED)
        self.head = rec.commit_id
        self.staged = {}
        return rec

    def checkpoint(self) -> str | None:
        """Seal staged writes into an IN_FLIGHT commit and return the head."""
        if self.staged:
            rec = self.service._append(self.head, self.staged, self.name, CommitState.IN_FLIGHT)
            self.head = rec.commit_id
            self.staged = {}
        return self.head

    def fork(self, name: str | None = None) -> "BranchView":
        if self.mode is VisibilityMode.COMMITTED_ONLY:
            if self.staged or not self.service.is_committed(self.head):
                raise UncommittedFork(f"{self.name} has uncommitted writes")
        else:
            self.checkpoint()
        return self.service.view(self.head, self.mode, name)

    def reset(self, head: str | None) -> None:
        """Point the view at ``head`` and drop staged writes. O(1)."""
        self.service.record(head)
        self.head = head
        self.staged = {}

    def digest(self) -> str:
        """Identity of what this view sees: the head id, plus staged writes if any."""
        if not self.staged:
            return self.head or "GENESIS"
        return self.service.commit_digest(self.head, dict(sorted(self.staged.items())))

    # -- branch-scoped outbox ---------------------------------------------------

    def send(self, endpoint: str, payload: bytes) -> int:
        seq = len(self.outbox_entries())
        self.put(f"{OUTBOX_PREFIX}{seq}", endpoint.encode() + b"\n" + bytes(payload))
        return seq

    def outbox_entries(self) -> list[tuple[str, bytes]]:
        items = []
        for key, value in self.visible().items():
            if key.startswith(OUTBOX_PREFIX):
                endpoint, _, payload = value.partition(b"\n")
                items.append((int(key[len(OUTBOX_PREFIX):]), endpoint.decode(), payload))
        items.sort()
        return [(endpoint, payload) for _, endpoint, payload in items]

    def outbox(self) -> list[bytes]:
        return [payload for _, payload in self.outbox_entries()]


# Operation-named aliases for callers that prefer the functional spelling.

def svc_put(view: BranchView, key: str, value: bytes) -> None:
    view.put(key, value)


def svc_get(view: BranchView, key: str) -> bytes | None:
    return view.get(key)


def svc_commit(view: BranchView) -> CommitRecord:
    return view.commit()


def svc_fork(view: BranchView, name: str | None = None) -> BranchView:
    return view.fork(name)


def svc_outbox(view: BranchView) -> list[bytes]:
    return view.outbox()

