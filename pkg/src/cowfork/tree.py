"""Exploration tree over environment states.

Nodes are states, edges are executed commands. ``goto`` brings a live
environment to any node with one of three strategies:

* ``REPLAY`` - open the root snapshot and re-execute the command prefix.
* ``SNAPSHOT`` - open the node's own snapshot (or the nearest ancestor's and
  replay the residual suffix when the snapshot policy skips nodes).
* ``BACKTRACK`` - from the tree's single cursor, apply compensations up to the
  common ancestor, then re-execute down to the target.

Whatever the strategy, the result is checked against the full-state digest
recorded when the node was created.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .errors import (
    IrreversiblePath,
    NoCursor,
    NodeInUse,
    RestoreMismatch,
    StateMismatch,
    UnknownNode,
)
from .runtime import (
    IRREVERSIBLE,
    Command,
    Compensation,
    CompensationPolicy,
    Observation,
    apply_compensation,
    compensation_for,
    execute,
    execute_strict,
    with_id,
)
from .service import BranchView, VersionedService, VisibilityMode
from .store import Branch, Store

logger = logging.getLogger(__name__)

TREE_VERSION = 1


class RestorePolicy(Enum):
    REPLAY = "replay"
    SNAPSHOT = "snapshot"
    BACKTRACK = "backtrack"


@dataclass(frozen=True)
class SnapshotPolicy:
    kind: str = "every_node"
    k: int = 1

    def __post_init__(self):
        if self.kind not in ("every_node", "every_k", "root_only"):
            raise ValueError(f"unknown snapshot policy {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "SnapshotPolicy":
        kind, _, k = text.lower().partition(":")
        return cls(kind, int(k)) if k else cls(kind)

    def __str__(self) -> str:
        return f"every_k:{self.k}" if self.kind == "every_k" else self.kind

    def seals(self, depth: int) -> bool:
        if depth == 0 or self.kind == "every_node":
            return True
        if self.kind == "every_k":
            return depth % self.k == 0
        return False


EVERY_NODE = SnapshotPolicy("every_node")
ROOT_ONLY = SnapshotPolicy("root_only")


def every_k(k: int) -> SnapshotPolicy:
    return SnapshotPolicy("every_k", k)


def full_state_digest(state_id: str, view_digest: str) -> str:
    return hashlib.sha256(f"{state_id}:{view_digest}".encode()).hexdigest()


@dataclass
class Env:
    """A live environment: store overlay plus service view."""

    branch: Branch
    view: BranchView

    def digest(self) -> str:
        return full_state_digest(self.branch.state_digest(), self.view.digest())


@dataclass
class TreeNode:
    id: int
    parent: int | None
    depth: int
    command: Command | None
    snapshot_id: str | None
    digest: str
    service_head: str | None
    compensation: Compensation | object | None = None
    observation: Observation | None = None
    children: list[int] = field(default_factory=list)

    @property
    def reversible(self) -> bool:
        return self.compensation is not IRREVERSIBLE

    def to_json(self) -> dict:
        if self.compensation is None:
            comp = None
        elif self.compensation is IRREVERSIBLE:
            comp = "IRREVERSIBLE"
        else:
            comp = self.compensation.to_json()
        return {
            "id": self.id,
            "parent": self.parent,
            "command": None if self.command is None else self.command.to_line(),
            "snapshot_id": self.snapshot_id,
            "digest": self.digest,
            "reversible": self.reversible,
            "service_head": self.service_head,
            "observation": None if self.observation is None else self.observation.to_json(),
            "compensation": comp,
        }


@dataclass
class RestoreStats:
    policy: RestorePolicy
    target: int
    commands_replayed: int = 0
    compensations_applied: int = 0

    @property
    def steps(self) -> int:
        return self.commands_replayed + self.compensations_applied


class ExplorationTree:
    """Branching search tree over one store and one versioned service.

    Metadata changes are serialized on a lock. Backtracking uses the single
    cursor: the environment left behind by the most recent ``goto``/``expand``.
    """

    def __init__(self, store: Store, service: VersionedService, mem_size: int, *,
                 snapshot_policy: SnapshotPolicy = EVERY_NODE,
                 compensation: CompensationPolicy = CompensationPolicy.ON,
                 default_policy: RestorePolicy = RestorePolicy.SNAPSHOT,
                 visibility: VisibilityMode = VisibilityMode.COMMITTED_ONLY):
        self.store = store
        self.service = service
        self.mem_size = mem_size
        self.snapshot_policy = snapshot_policy
        self.compensation = compensation
        self.default_policy = default_policy
        self.visibility = visibility
        self.nodes: dict[int, TreeNode] = {}
        self.root_id = 0
        self.next_id = 0
        self.cursor_id: int | None = None
        self._cursor_env: Env | None = None
        self.last_restore: RestoreStats | None = None
        self.last_seal_seconds = 0.0
        self._lock = threading.RLock()

    # -- construction ----------------------------------------------------------

    @classmethod
    def init_root(cls, store: Store, script: Iterable[Command] = (), *, mem_size: int = 0,
                  service: VersionedService | None = None, **config) -> tuple["ExplorationTree", int]:
        """Run ``script`` on the empty state and seal the result as the root."""
        service = service or VersionedService()
        tree = cls(store, service, mem_size, **config)
        env = Env(store.open_branch(store.empty_snapshot(mem_size)),
                  service.view(None, tree.visibility, name="node-0"))
        for cmd in script:
            execute_strict(env.branch, cmd, env.view)
        snap = env.branch.seal_snapshot()
        head = env.view.checkpoint()
        root = TreeNode(0, None, 0, None, snap.id, full_state_digest(snap.id, env.view.digest()), head)
        tree.nodes[0] = root
        tree.next_id = 1
        tree._set_cursor(0, env)
        return tree, 0

    def node(self, node_id: int) -> TreeNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"no node {node_id}") from None

    def _new_view(self, head: str | None, node_id: int) -> BranchView:
        return self.service.view(head, self.visibility, name=f"node-{node_id}")

    def _set_cursor(self, node_id: int, env: Env) -> None:
        self.cursor_id = node_id
        self._cursor_env = env

    def cursor_env(self) -> Env | None:
        """The cursor's live environment, rebuilt from its snapshot after a reload."""
        if self.cursor_id is None:
            return None
        if self._cursor_env is None:
            env, _ = self._restore_from_snapshot(self.node(self.cursor_id), RestorePolicy.SNAPSHOT)
            self._cursor_env = env
        return self._cursor_env

    # -- structure ---------------------------------------------------------------

    def ancestors(self, node: TreeNode) -> Iterator[TreeNode]:
        """``node`` and then each ancestor up to the root."""
        cur: TreeNode | None = node
        while cur is not None:
            yield cur
            cur = None if cur.parent is None else self.nodes[cur.parent]

    def _path_between(self, anchor: TreeNode, target: TreeNode) -> list[TreeNode]:
        """Nodes strictly below ``anchor`` down to ``target``, top first."""
        path = []
        for n in self.ancestors(target):
            if n is anchor:
                break
            path.append(n)
        path.reverse()
        return path

    def lca(self, a: TreeNode, b: TreeNode) -> TreeNode:
        while a.depth > b.depth:
            a = self.nodes[a.parent]
        while b.depth > a.depth:
            b = self.nodes[b.parent]
        while a is not b:
            a = self.nodes[a.parent]
            b = self.nodes[b.parent]
        return a

    def path_commands(self, node_id: int) -> list[Command]:
        node = self.node(node_id)
        return [n.command for n in self._path_between(self.nodes[self.root_id], node)]

    def subtree(self, node_id: int) -> list[int]:
        out, stack = [], [node_id]
        while stack:
            nid = stack.pop()
            out.append(nid)
            stack.extend(self.nodes[nid].children)
        return sorted(out)

    # -- expansion ---------------------------------------------------------------

    def _materialize(self, node: TreeNode) -> Env:
        if self.cursor_id == node.id:
            env = self.cursor_env()
            if env is not None and env.digest() == node.digest:
                return env
        return self.goto(node.id, self.default_policy)

    def expand(self, node_id: int, cmd: Command) -> int:
        """Execute ``cmd`` from ``node_id``'s state and record the child.

        A failing command still yields a child whose observation carries the
        error; the child's state equals the parent's.
        """
        with self._lock:
            parent = self.node(node_id)
            env = self._materialize(parent)
            cmd = with_id(cmd, parent.depth)
            comp = compensation_for(cmd, env.branch, env.view, self.compensation)
            obs = execute(env.branch, cmd, env.view)
            head = env.view.checkpoint()
            depth = parent.depth + 1
            t0 = time.perf_counter()
            if self.snapshot_policy.seals(depth):
                snapshot_id = env.branch.seal_snapshot().id
                state_id = snapshot_id
            else:
                snapshot_id = None
                state_id = env.branch.state_digest()
            self.last_seal_seconds = time.perf_counter() - t0
            child = TreeNode(self.next_id, parent.id, depth, cmd, snapshot_id,
                             full_state_digest(state_id, env.view.digest()), head, comp, obs)
            self.next_id += 1
            self.nodes[child.id] = child
            parent.children.append(child.id)
            env.view.name = f"node-{child.id}"
            self._set_cursor(child.id, env)
            return child.id

    def fork_children(self, node_id: int, cmds: Iterable[Command]) -> list[int]:
        """Expand ``node_id`` once per command. Shared state is never copied."""
        cmds = list(cmds)
        if not cmds:
            raise ValueError("fork_children needs at least one command")
        return [self.expand(node_id, c) for c in cmds]

    # -- restoration -------------------------------------------------------------

    def goto(self, node_id: int, policy: RestorePolicy | None = None) -> Env:
        """Return a live environment in ``node_id``'s state; it becomes the cursor."""
        policy = policy or self.default_policy
        with self._lock:
            target = self.node(node_id)
            if policy is RestorePolicy.BACKTRACK:
                env, stats = self._backtrack(target)
            else:
                env, stats = self._restore_from_snapshot(target, policy)
            if env.digest() != target.digest:
                raise RestoreMismatch(f"node {node_id}: restored digest differs under {policy.value}")
            self._set_cursor(target.id, env)
            self.last_restore = stats
            return env

    def _replay(self, env: Env, nodes: list[TreeNode]) -> None:
        for n in nodes:
            obs = execute(env.branch, n.command, env.view)
            env.view.checkpoint()
            if obs != n.observation:
                raise RestoreMismatch(f"node {n.id}: replayed observation differs")

    def _restore_from_snapshot(self, target: TreeNode, policy: RestorePolicy) -> tuple[Env, RestoreStats]:
        if policy is RestorePolicy.REPLAY:
            anchor = self.nodes[self.root_id]
        else:
            anchor = next(n for n in self.ancestors(target) if n.snapshot_id is not None)
        env = Env(self.store.open_branch(anchor.snapshot_id), self._new_view(anchor.service_head, target.id))
        suffix = self._path_between(anchor, target) if anchor is not target else []
        self._replay(env, suffix)
        return env, RestoreStats(policy, target.id, commands_replayed=len(suffix))

    def _backtrack(self, target: TreeNode) -> tuple[Env, RestoreStats]:
        env = self.cursor_env()
        if env is None:
            raise NoCursor("backtracking needs a cursor; goto a node first")
        cursor = self.node(self.cursor_id)
        if env.digest() != cursor.digest:
            raise StateMismatch(f"cursor environment no longer matches node {cursor.id}")
        common = self.lca(cursor, target)
        undo = []
        for n in self.ancestors(cursor):
            if n is common:
                break
            undo.append(n)
        for n in undo:
            if n.compensation is IRREVERSIBLE:
                raise IrreversiblePath(
                    f"undoing node {n.id} ({n.command.opcode}) from node {cursor.id} to {target.id}")
        redo = self._path_between(common, target)
        try:
            for n in undo:
                apply_compensation(env.branch, n.compensation)
                env.view.reset(self.nodes[n.parent].service_head)
            self._replay(env, redo)
        except Exception:
            # half-walked cursor: rebuild it from the cursor's snapshot on next use
            self._cursor_env = None
            raise
        return env, RestoreStats(RestorePolicy.BACKTRACK, target.id,
                                 commands_replayed=len(redo), compensations_applied=len(undo))

    def irreversible_on_undo_path(self, from_id: int, to_id: int) -> bool:
        a, b = self.node(from_id), self.node(to_id)
        common = self.lca(a, b)
        for n in self.ancestors(a):
            if n is common:
                return False
            if n.compensation is IRREVERSIBLE:
                return True
        return False

    # -- pruning -----------------------------------------------------------------

    def live_snapshot_ids(self) -> set[str]:
        live = {n.snapshot_id for n in self.nodes.values() if n.snapshot_id is not None}
        if self._cursor_env is not None:
            live.add(self._cursor_env.branch.base.id)
        return live

    def prune(self, node_id: int) -> int:
        """Drop ``node_id``'s subtree and collect garbage. Returns reclaimed bytes."""
        with self._lock:
            node = self.node(node_id)
            if node.parent is None:
                raise NodeInUse("cannot prune the root")
            doomed = self.subtree(node_id)
            if self.cursor_id in doomed:
                raise NodeInUse(f"node {node_id} is the cursor or one of its ancestors")
            self.nodes[node.parent].children.remove(node_id)
            for nid in doomed:
                del self.nodes[nid]
            return self.store.gc(self.live_snapshot_ids())

    def gc(self) -> int:
        with self._lock:
            return self.store.gc(self.live_snapshot_ids())

    # -- tree.json -----------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "version": TREE_VERSION,
            "config": {
                "mem_size": self.mem_size,
                "snapshot_policy": str(self.snapshot_policy),
                "compensation": self.compensation.value,
                "default_policy": self.default_policy.value,
                "visibility": self.visibility.value,
            },
            "root": self.root_id,
            "next_id": self.next_id,
            "cursor": self.cursor_id,
            "nodes": [self.nodes[i].to_json() for i in sorted(self.nodes)],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, store: Store, service: VersionedService) -> "ExplorationTree":
        d = json.loads(text)
        if d.get("version") != TREE_VERSION:
            raise ValueError(f"unsupported tree version {d.get('version')!r}")
        cfg = d["config"]
        tree = cls(store, service, cfg["mem_size"],
                   snapshot_policy=SnapshotPolicy.parse(cfg["snapshot_policy"]),
                   compensation=CompensationPolicy(cfg["compensation"]),
                   default_policy=RestorePolicy(cfg["default_policy"]),
                   visibility=VisibilityMode(cfg["visibility"]))
        tree.root_id = d["root"]
        tree.next_id = d["next_id"]
        tree.cursor_id = d["cursor"]
        for nd in d["nodes"]:
            parent = None if nd["parent"] is None else tree.nodes[nd["parent"]]
            comp = nd["compensation"]
            if comp == "IRREVERSIBLE":
                comp = IRREVERSIBLE
            elif comp is not None:
                comp = Compensation.from_json(comp)
            node = TreeNode(
                nd["id"], nd["parent"], 0 if parent is None else parent.depth + 1,
                None if nd["command"] is None else Command.from_line(nd["command"], parent.depth),
                nd["snapshot_id"], nd["digest"], nd["service_head"], comp,
                None if nd["observation"] is None else Observation.from_json(nd["observation"]))
            tree.nodes[node.id] = node
            if parent is not None:
                parent.children.append(node.id)
        return tree

    @classmethod
    def load(cls, path: str | Path, store: Store, service: VersionedService) -> "ExplorationTree":
        return cls.loads(Path(path).read_text(), store, service)

    # -- display -------------------------------------------------------------------

    def render(self) -> str:
        """One line per node in id order: id, parent, depth, digest prefix,
        reversibility, snapshot flag, observation status and command."""
        lines = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            parent = "-" if n.parent is None else str(n.parent)
            rev = "rev" if n.reversible else "IRREV"
            snap = "snap" if n.snapshot_id else "----"
            status = "-" if n.observation is None else n.observation.status
            cmd = "<root>" if n.command is None else n.command.to_line()
            if len(cmd) > 60:
                cmd = cmd[:57] + "..."
            lines.append(f"{n.id}\tparent={parent}\tdepth={n.depth}\t{n.digest[:12]}\t{rev}\t{snap}\t{status}\t{cmd}")
        return "\n".join(lines) + "\n"
