"""Deterministic simulated environment.

Commands mutate a :class:`~cowfork.store.Branch` (memory and files) and a
:class:`~cowfork.service.BranchView` (versioned side effects). Every opcode is
registered with an ``execute`` and an ``invert`` function; ``invert`` runs
against the pre-state and yields the :class:`Compensation` that undoes the
command, or :data:`IRREVERSIBLE`.

Script format, one command per line::

    MEM_WRITE 4096 hex:00ff
    FILE_PUT /x.txt hex:76
    FILE_DELETE /x.txt
    FILE_APPEND /log hex:0a
    NET_SEND peer1 hex:aa
    SVC_PUT some/key hex:01

Data tokens are ``hex:<digits>``; any other token is taken as UTF-8 text.
Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, NamedTuple

from .errors import ForkError, InvalidCommand, IrreversiblePath, StateMismatch
from .service import BranchView
from .store import Branch, normalize_path


class CompensationPolicy(Enum):
    OFF = "off"
    ON = "on"


@dataclass(frozen=True)
class Command:
    opcode: str
    args: tuple
    id: int = 0

    def to_line(self) -> str:
        spec = REGISTRY[self.opcode]
        return " ".join([self.opcode] + [_format_arg(k, a) for k, a in zip(spec.arg_kinds, self.args)])

    @classmethod
    def from_line(cls, line: str, id: int = 0) -> "Command":
        tokens = line.split()
        if not tokens:
            raise InvalidCommand("empty command line")
        opcode, rest = tokens[0].upper(), tokens[1:]
        spec = REGISTRY.get(opcode)
        if spec is None:
            raise InvalidCommand(f"unknown opcode {tokens[0]!r}")
        if len(rest) != len(spec.arg_kinds):
            raise InvalidCommand(f"{opcode} takes {len(spec.arg_kinds)} arguments, got {len(rest)}")
        return cls(opcode, tuple(_parse_arg(k, t) for k, t in zip(spec.arg_kinds, rest)), id)

    def __str__(self) -> str:
        return self.to_line()

    def __repr__(self) -> str:
        line = self.to_line()
        if len(line) > 80:
            line = line[:77] + "..."
        return f"Command({line!r}, id={self.id})"


def mem_write(offset: int, data: bytes) -> Command:
    return Command("MEM_WRITE", (offset, bytes(data)))


def file_put(path: str, data: bytes) -> Command:
    return Command("FILE_PUT", (path, bytes(data)))


def file_delete(path: str) -> Command:
    return Command("FILE_DELETE", (path,))


def file_append(path: str, data: bytes) -> Command:
    return Command("FILE_APPEND", (path, bytes(data)))


def net_send(endpoint: str, payload: bytes) -> Command:
    return Command("NET_SEND", (endpoint, bytes(payload)))


def svc_put_cmd(key: str, value: bytes) -> Command:
    return Command("SVC_PUT", (key, bytes(value)))


def _parse_arg(kind: str, token: str):
    if kind == "int":
        try:
            return int(token)
        except ValueError:
            raise InvalidCommand(f"expected an integer, got {token!r}") from None
    if kind == "data":
        if token.startswith("hex:"):
            try:
                return bytes.fromhex(token[4:])
            except ValueError:
                raise InvalidCommand(f"bad hex literal {token!r}") from None
        return token.encode()
    return token


def _format_arg(kind: str, value) -> str:
    if kind == "data":
        return "hex:" + value.hex()
    return str(value)


def parse_script(text: str) -> list[Command]:
    cmds = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cmds.append(Command.from_line(line, id=len(cmds)))
    return cmds


def format_script(cmds: list[Command]) -> str:
    return "".join(c.to_line() + "\n" for c in cmds)


@dataclass(frozen=True)
class Observation:
    status: str = "ok"
    output: bytes = b""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> dict:
        return {"status": self.status, "output": self.output.hex()}

    @classmethod
    def from_json(cls, d: dict) -> "Observation":
        return cls(d["status"], bytes.fromhex(d["output"]))


# -- compensations -------------------------------------------------------------

class _Irreversible:
    __slots__ = ()

    def __repr__(self) -> str:
        return "IRREVERSIBLE"

    def __reduce__(self):
        return "IRREVERSIBLE"


IRREVERSIBLE = _Irreversible()


@dataclass(frozen=True)
class Compensation:
    """Inverse of one executed command.

    ``region`` names what the command touched (``("mem", offset, length)``,
    ``("file", path)`` or ``("svc", key)``) and ``guard`` is the digest of that
    region in the post-state; applying the compensation anywhere else raises
    :class:`StateMismatch`. A failed command gets an empty compensation.
    """

    ops: tuple[tuple, ...] = ()
    region: tuple | None = None
    guard: str | None = None

    def to_json(self) -> dict:
        return {"ops": [_enc(op) for op in self.ops],
                "region": None if self.region is None else list(self.region),
                "guard": self.guard}

    @classmethod
    def from_json(cls, d: dict) -> "Compensation":
        return cls(tuple(_dec(op) for op in d["ops"]),
                   None if d["region"] is None else tuple(d["region"]), d["guard"])


def _enc(op: tuple) -> list:
    return [{"hex": a.hex()} if isinstance(a, bytes) else a for a in op]


def _dec(op: list) -> tuple:
    return tuple(bytes.fromhex(a["hex"]) if isinstance(a, dict) else a for a in op)


def _h(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _file_guard(content: bytes | None) -> str:
    if content is None:
        return _h(b"\x00")
    h = hashlib.sha256(b"\x01")
    h.update(content)
    return h.hexdigest()


def region_digest(branch: Branch, view: BranchView | None, region: tuple) -> str | None:
    kind = region[0]
    if kind == "mem":
        return _h(branch.mem_read(region[1], region[2]))
    if kind == "file":
        path = region[1]
        return _file_guard(branch.fs_get(path) if branch.fs_exists(path) else None)
    if kind == "svc":
        if view is None:
            return None
        return _file_guard(view.get(region[1]))
    raise ValueError(f"unknown region {region!r}")


# -- opcode handlers ------------------------------------------------------------

class OpSpec(NamedTuple):
    arg_kinds: tuple[str, ...]
    execute: Callable[[Branch, BranchView, tuple], bytes]
    invert: Callable[[Branch, BranchView, tuple, CompensationPolicy], "Compensation | _Irreversible"]


def _exec_mem_write(branch, view, args):
    offset, data = args
    branch.mem_write(offset, data)
    return b""


def _inv_mem_write(branch, view, args, policy):
    offset, data = args
    if offset < 0 or offset + len(data) > branch.mem_size:
        return Compensation()
    region = ("mem", offset, len(data))
    if branch.mem_is_zero(offset, len(data)):
        ops = (("zero-fill", offset, len(data)),)
    elif policy is CompensationPolicy.ON:
        ops = (("restore-bytes", offset, branch.mem_read(offset, len(data))),)
    else:
        return IRREVERSIBLE
    return Compensation(ops, region, _h(data))


def _exec_file_put(branch, view, args):
    branch.fs_put(*args)
    return b""


def _inv_file_put(branch, view, args, policy):
    path, data = args
    try:
        path = branch.check_put_path(path)
    except ForkError:
        return Compensation()
    region = ("file", path)
    if branch.fs_exists(path):
        if policy is CompensationPolicy.OFF:
            return IRREVERSIBLE
        ops = (("restore-file", path, branch.fs_get(path)),)
    else:
        ops = (("remove-file", path),)
    return Compensation(ops, region, _file_guard(data))


def _exec_file_delete(branch, view, args):
    branch.fs_delete(args[0])
    return b""


def _inv_file_delete(branch, view, args, policy):
    if policy is CompensationPolicy.OFF:
        return IRREVERSIBLE
    try:
        path = normalize_path(args[0])
    except ForkError:
        return Compensation()
    if not branch.fs_exists(path):
        return Compensation()
    return Compensation((("restore-file", path, branch.fs_get(path)),), ("file", path), _file_guard(None))


def _exec_file_append(branch, view, args):
    path, data = args
    path = branch.check_put_path(path)
    old = branch.fs_get(path) if branch.fs_exists(path) else b""
    branch.fs_put(path, old + data)
    return str(len(old) + len(data)).encode()


def _inv_file_append(branch, view, args, policy):
    path, data = args
    try:
        path = branch.check_put_path(path)
    except ForkError:
        return Compensation()
    if branch.fs_exists(path):
        old = branch.fs_get(path)
        return Compensation((("truncate-file", path, len(old)),), ("file", path), _file_guard(old + data))
    return Compensation((("remove-file", path),), ("file", path), _file_guard(data))


def _exec_net_send(branch, view, args):
    endpoint, payload = args
    return str(view.send(endpoint, payload)).encode()


def _inv_net_send(branch, view, args, policy):
    return IRREVERSIBLE


def _exec_svc_put(branch, view, args):
    view.put(*args)
    return b""


def _inv_svc_put(branch, view, args, policy):
    key, value = args
    if key in view.staged:
        prior = view.staged[key]
        op = ("restore-staged", key, True, prior)
    else:
        op = ("restore-staged", key, False, None)
    return Compensation((op,), ("svc", key), _file_guard(value))


REGISTRY: dict[str, OpSpec] = {
    "MEM_WRITE": OpSpec(("int", "data"), _exec_mem_write, _inv_mem_write),
    "FILE_PUT": OpSpec(("path", "data"), _exec_file_put, _inv_file_put),
    "FILE_DELETE": OpSpec(("path",), _exec_file_delete, _inv_file_delete),
    "FILE_APPEND": OpSpec(("path", "data"), _exec_file_append, _inv_file_append),
    "NET_SEND": OpSpec(("word", "data"), _exec_net_send, _inv_net_send),
    "SVC_PUT": OpSpec(("word", "data"), _exec_svc_put, _inv_svc_put),
}


def register_opcode(name: str, arg_kinds: tuple[str, ...], execute, invert) -> None:
    """Add an opcode. ``execute`` must validate before mutating anything."""
    REGISTRY[name.upper()] = OpSpec(tuple(arg_kinds), execute, invert)


def _spec(cmd: Command) -> OpSpec:
    try:
        return REGISTRY[cmd.opcode]
    except KeyError:
        raise InvalidCommand(f"unknown opcode {cmd.opcode!r}") from None


def execute(branch: Branch, cmd: Command, view: BranchView) -> Observation:
    """Run ``cmd``. Engine errors become the observation status and leave the
    state untouched."""
    spec = _spec(cmd)
    try:
        output = spec.execute(branch, view, cmd.args)
    except ForkError as exc:
        return Observation(type(exc).__name__, str(exc).encode())
    return Observation("ok", output)


def execute_strict(branch: Branch, cmd: Command, view: BranchView) -> Observation:
    """Like :func:`execute` but engine errors propagate."""
    return Observation("ok", _spec(cmd).execute(branch, view, cmd.args))


def compensation_for(cmd: Command, branch: Branch, view: BranchView,
                     policy: CompensationPolicy = CompensationPolicy.ON) -> Compensation | _Irreversible:
    """Inverse of ``cmd`` computed against the pre-state (call before execute)."""
    return _spec(cmd).invert(branch, view, cmd.args, policy)


def apply_compensation(branch: Branch, comp: Compensation | _Irreversible,
                       view: BranchView | None = None) -> None:
    """Undo one command. ``view=None`` skips service edits, for callers that
    restore the service by moving the view head instead."""
    if comp is IRREVERSIBLE:
        raise IrreversiblePath("command has no compensation")
    if comp.region is not None:
        current = region_digest(branch, view, comp.region)
        if current is not None and current != comp.guard:
            raise StateMismatch(f"guard mismatch on {comp.region[:2]}")
    for op in comp.ops:
        kind = op[0]
        if kind == "restore-bytes":
            branch.mem_write(op[1], op[2])
        elif kind == "zero-fill":
            branch.mem_write(op[1], bytes(op[2]))
        elif kind == "restore-file":
            branch.fs_put(op[1], op[2])
        elif kind == "remove-file":
            branch.fs_delete(op[1])
        elif kind == "truncate-file":
            branch.fs_put(op[1], branch.fs_get(op[1])[:op[2]])
        elif kind == "restore-staged":
            if view is None:
                continue
            _, key, present, prior = op
            if present:
                view.staged[key] = prior
            else:
                view.staged.pop(key, None)
        else:
            raise ValueError(f"unknown inverse op {kind!r}")


def with_id(cmd: Command, id: int) -> Command:
    return cmd if cmd.id == id else replace(cmd, id=id)
