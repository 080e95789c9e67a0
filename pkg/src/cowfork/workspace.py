"""A store directory together with its tree and service files.

    <root>/store.json, chunks/, manifests/   the state store
    <root>/tree.json                          exploration tree
    <root>/service.json                       commit records in creation order
    <root>/.lock                              held while a process has it open
"""

from __future__ import annotations

from pathlib import Path

import filelock

from .errors import StoreLocked
from .runtime import Command, CompensationPolicy
from .service import VersionedService, VisibilityMode
from .store import DEFAULT_CHUNK_SIZE, Store
from .tree import EVERY_NODE, ExplorationTree, RestorePolicy, SnapshotPolicy


class Workspace:
    def __init__(self, root: Path, store: Store, service: VersionedService,
                 tree: ExplorationTree, lock: filelock.BaseFileLock | None):
        self.root = root
        self.store = store
        self.service = service
        self.tree = tree
        self._lock = lock

    @staticmethod
    def _acquire(root: Path) -> filelock.BaseFileLock:
        lock = filelock.FileLock(str(root / ".lock"))
        try:
            lock.acquire(timeout=0)
        except filelock.Timeout:
            raise StoreLocked(f"{root} is in use by another process") from None
        return lock

    @classmethod
    def create(cls, root: str | Path, *, mem_size: int, chunk_size: int = DEFAULT_CHUNK_SIZE,
               digest_algo: str = "sha256", snapshot_policy: SnapshotPolicy = EVERY_NODE,
               compensation: CompensationPolicy = CompensationPolicy.ON,
               default_policy: RestorePolicy = RestorePolicy.SNAPSHOT,
               visibility: VisibilityMode = VisibilityMode.COMMITTED_ONLY,
               script: list[Command] = ()) -> "Workspace":
        root = Path(root)
        if (root / "store.json").exists():
            raise FileExistsError(f"{root} already holds a store")
        root.mkdir(parents=True, exist_ok=True)
        lock = cls._acquire(root)
        try:
            config = {
                "mem_size": mem_size,
                "snapshot_policy": str(snapshot_policy),
                "compensation": compensation.value,
                "default_policy": default_policy.value,
                "visibility": visibility.value,
            }
            store = Store(root, chunk_size=chunk_size, digest_algo=digest_algo,
                          extensions={"config": config})
            service = VersionedService(digest_algo)
            tree, _ = ExplorationTree.init_root(
                store, script, mem_size=mem_size, service=service,
                snapshot_policy=snapshot_policy, compensation=compensation,
                default_policy=default_policy, visibility=visibility)
        except BaseException:
            lock.release()
            raise
        ws = cls(root, store, service, tree, lock)
        ws.save()
        return ws

    @classmethod
    def open(cls, root: str | Path, *, lock: bool = True) -> "Workspace":
        root = Path(root)
        if not (root / "store.json").exists():
            raise FileNotFoundError(f"no store at {root}")
        held = cls._acquire(root) if lock else None
        try:
            store = Store.open(root)
            service = VersionedService.load(root / "service.json", store.digest_algo)
            tree = ExplorationTree.load(root / "tree.json", store, service)
        except BaseException:
            if held is not None:
                held.release()
            raise
        return cls(root, store, service, tree, held)

    def save(self) -> None:
        self.store.save_metadata()
        self.service.save(self.root / "service.json")
        self.tree.save(self.root / "tree.json")

    def close(self) -> None:
        if self._lock is not None:
            self._lock.release()
            self._lock = None

    def __enter__(self) -> "Workspace":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
