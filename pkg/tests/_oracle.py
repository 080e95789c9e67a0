"""Naive reference models used as independent oracles.

Nothing here imports engine internals beyond the Command record: state is a
flat bytearray, a plain dict of files and a plain dict for the service.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field

from cowfork.runtime import Command


@dataclass
class NaiveEnv:
    mem: bytearray
    files: dict = field(default_factory=dict)
    svc: dict = field(default_factory=dict)
    outbox: list = field(default_factory=list)

    @classmethod
    def empty(cls, mem_size: int) -> "NaiveEnv":
        return cls(bytearray(mem_size))

    def clone(self) -> "NaiveEnv":
        return copy.deepcopy(self)

    def apply(self, cmd: Command) -> str:
        """Apply ``cmd``; return "ok" or the error class name. Paths must be
        simple (``/name`` without dots or nesting clashes)."""
        op, args = cmd.opcode, cmd.args
        if op == "MEM_WRITE":
            off, data = args
            if off < 0 or off + len(data) > len(self.mem):
                return "OutOfBounds"
            self.mem[off:off + len(data)] = data
        elif op == "FILE_PUT":
            self.files[args[0]] = bytes(args[1])
        elif op == "FILE_DELETE":
            if args[0] not in self.files:
                return "NotFound"
            del self.files[args[0]]
        elif op == "FILE_APPEND":
            self.files[args[0]] = self.files.get(args[0], b"") + args[1]
        elif op == "NET_SEND":
            self.outbox.append(args[1])
            self.svc[f"outbox/{len(self.outbox) - 1}"] = args[0].encode() + b"\n" + args[1]
        elif op == "SVC_PUT":
            self.svc[args[0]] = bytes(args[1])
        else:
            raise ValueError(op)
        return "ok"

    def is_irreversible(self, cmd: Command, logging_on: bool) -> bool:
        """Irreversibility taxonomy judged on this (pre-)state."""
        op, args = cmd.opcode, cmd.args
        if op == "NET_SEND":
            return True
        if logging_on:
            return False
        if op == "FILE_DELETE":
            return True
        if op == "FILE_PUT":
            return args[0] in self.files
        if op == "MEM_WRITE":
            off, data = args
            if off < 0 or off + len(data) > len(self.mem):
                return False
            return any(self.mem[off:off + len(data)])
        return False


PATHS = ["/a", "/b", "/c", "/d.txt", "/e.bin"]


def random_command(rng: random.Random, mem_size: int, *, allow_net: bool = False,
                   chunk_size: int = 4096) -> Command:
    """A random well-formed command over a small path and key space."""
    kinds = ["MEM_WRITE", "MEM_WRITE", "FILE_PUT", "FILE_APPEND", "FILE_DELETE", "SVC_PUT"]
    if allow_net:
        kinds.append("NET_SEND")
    kind = rng.choice(kinds)
    if kind == "MEM_WRITE":
        n = rng.choice([1, 7, 100, chunk_size, chunk_size + 13])
        n = min(n, mem_size)
        off = rng.randrange(0, mem_size - n + 1)
        return Command(kind, (off, rng.randbytes(n)))
    if kind in ("FILE_PUT", "FILE_APPEND"):
        n = rng.choice([0, 1, 5, chunk_size, 2 * chunk_size + 3])
        return Command(kind, (rng.choice(PATHS), rng.randbytes(n)))
    if kind == "FILE_DELETE":
        return Command(kind, (rng.choice(PATHS),))
    if kind == "SVC_PUT":
        return Command(kind, (f"k{rng.randrange(4)}", rng.randbytes(rng.randrange(1, 6))))
    return Command(kind, (f"peer{rng.randrange(3)}", rng.randbytes(3)))


def random_tree_shape(rng: random.Random, n_nodes: int, max_depth: int, max_branching: int,
                      recent_bias: float = 0.6) -> list[int]:
    """Parent index for nodes 1..n-1 (node 0 is the root)."""
    parents: list[int] = []
    depth = {0: 0}
    kids = {0: 0}
    for i in range(1, n_nodes):
        candidates = [n for n in depth if depth[n] < max_depth and kids[n] < max_branching]
        if not candidates:
            break
        # bias towards recent nodes so trees get deep
        if rng.random() < recent_bias:
            p = candidates[-1]
        else:
            p = rng.choice(candidates[-4:] if rng.random() < 0.6 else candidates)
        parents.append(p)
        depth[i] = depth[p] + 1
        kids[p] += 1
        kids[i] = 0
    return parents
