"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 engine error (the typed error name is
printed on stderr, e.g. ``error: IrreversiblePath: ...``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench
from .errors import ForkError
from .runtime import Command, CompensationPolicy, parse_script
from .service import VisibilityMode
from .tree import RestorePolicy, SnapshotPolicy
from .workspace import Workspace

USAGE_ERROR = 1
ENGINE_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _size(text: str) -> int:
    try:
        return bench.parse_size(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _size_list(text: str) -> list[int]:
    return [_size(t) for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _policies(text: str) -> list[RestorePolicy]:
    try:
        return [RestorePolicy(t.strip().lower()) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _snapshot_policy(text: str) -> SnapshotPolicy:
    try:
        return SnapshotPolicy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cowfork", description="Copy-on-write environment branching engine.")
    p.add_argument("--store", default="cowfork-store", help="store directory (default: %(default)s)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="create a store and its root node")
    s.add_argument("--mem", type=_size, default=0, help="memory image size, e.g. 64M")
    s.add_argument("--chunk-size", type=_size, default=65536)
    s.add_argument("--digest", default="sha256", choices=("sha256", "sha3_256", "blake2b"))
    s.add_argument("--snapshot-policy", type=_snapshot_policy, default=SnapshotPolicy(),
                   help="every_node | every_k:K | root_only")
    s.add_argument("--compensation", choices=("on", "off"), default="on")
    s.add_argument("--visibility", choices=("committed_only", "optimistic"), default="committed_only")
    s.add_argument("--default-policy", type=RestorePolicy, choices=list(RestorePolicy),
                   default=RestorePolicy.SNAPSHOT)
    s.add_argument("--script", type=Path, help="command script run before sealing the root")

    s = sub.add_parser("exec", help="expand a chain of nodes from a script")
    s.add_argument("script", type=Path)
    s.add_argument("--from", dest="node", type=int, help="start node (default: cursor)")

    s = sub.add_parser("expand", help="execute one command from a node")
    s.add_argument("node", type=int)
    s.add_argument("command", nargs="+", help='e.g. "FILE_PUT /x hex:76"')

    s = sub.add_parser("goto", help="restore a node's state; it becomes the cursor")
    s.add_argument("node", type=int)
    s.add_argument("--policy", type=RestorePolicy, choices=list(RestorePolicy), default=None)

    s = sub.add_parser("fork", help="expand a node once per command")
    s.add_argument("node", type=int)
    s.add_argument("commands", nargs="+", help="one quoted command per child")

    s = sub.add_parser("prune", help="remove a subtree and collect garbage")
    s.add_argument("node", type=int)

    sub.add_parser("tree", help="print the node graph")
    sub.add_parser("gc", help="collect chunks unreachable from the tree")

    s = sub.add_parser("bench", help="run the snapshot/restore latency matrix")
    s.add_argument("--mem-sizes", type=_size_list, default=None, help="e.g. 16M,32M,64M")
    s.add_argument("--fs-sizes", type=_size_list, default=None)
    s.add_argument("--depths", type=_int_list, default=None, help="e.g. 20,200")
    s.add_argument("--policies", type=_policies, default=[RestorePolicy.SNAPSHOT])
    s.add_argument("--trials", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--chunk-size", type=_size, default=65536)
    s.add_argument("--format", choices=("csv", "markdown"), default="csv")
    s.add_argument("--out", type=Path, help="write the report here instead of stdout")
    return p


def _obs_line(node_id: int, ws: Workspace) -> str:
    obs = ws.tree.node(node_id).observation
    return f"node {node_id} {obs.status} {obs.output.hex() or '-'}"


def _run(args, out) -> None:
    if args.cmd == "init":
        script = parse_script(args.script.read_text()) if args.script else []
        with Workspace.create(
                args.store, mem_size=args.mem, chunk_size=args.chunk_size, digest_algo=args.digest,
                snapshot_policy=args.snapshot_policy,
                compensation=CompensationPolicy(args.compensation),
                default_policy=args.default_policy,
                visibility=VisibilityMode(args.visibility), script=script) as ws:
            root = ws.tree.node(ws.tree.root_id)
            print(f"root {root.id} {root.digest}", file=out)
        return

    if args.cmd == "bench":
        _bench(args, out)
        return

    with Workspace.open(args.store) as ws:
        tree = ws.tree
        if args.cmd == "tree":
            out.write(tree.render())
            return
        if args.cmd == "exec":
            node = args.node if args.node is not None else tree.cursor_id
            try:
                for cmd in parse_script(args.script.read_text()):
                    node = tree.expand(node, cmd)
                    print(_obs_line(node, ws), file=out)
            finally:
                ws.save()
        elif args.cmd == "expand":
            node = tree.expand(args.node, Command.from_line(" ".join(args.command)))
            ws.save()
            print(_obs_line(node, ws), file=out)
        elif args.cmd == "fork":
            cmds = [Command.from_line(c) for c in args.commands]
            children = tree.fork_children(args.node, cmds)
            ws.save()
            for child in children:
                print(_obs_line(child, ws), file=out)
        elif args.cmd == "goto":
            try:
                tree.goto(args.node, args.policy)
            finally:
                ws.save()
            st = tree.last_restore
            print(f"node {args.node} {tree.node(args.node).digest} policy={st.policy.value} "
                  f"replayed={st.commands_replayed} undone={st.compensations_applied}", file=out)
        elif args.cmd == "prune":
            reclaimed = tree.prune(args.node)
            ws.save()
            print(f"reclaimed {reclaimed}", file=out)
        elif args.cmd == "gc":
            reclaimed = tree.gc()
            ws.save()
            print(f"reclaimed {reclaimed}", file=out)


def _bench(args, out) -> None:
    cs = args.chunk_size
    mem_sizes = args.mem_sizes if args.mem_sizes is not None else []
    fs_sizes = args.fs_sizes if args.fs_sizes is not None else []
    depths = args.depths if args.depths is not None else []
    if not (mem_sizes or fs_sizes or depths):
        raise UsageError("give at least one of --mem-sizes, --fs-sizes, --depths")
    common = dict(policies=tuple(args.policies), trials=args.trials, seed=args.seed, chunk_size=cs)
    try:
        specs = ([bench.WorkloadSpec(dirty_mem_bytes=s, **common) for s in mem_sizes]
                 + [bench.WorkloadSpec(dirty_fs_bytes=s, **common) for s in fs_sizes]
                 + [bench.WorkloadSpec(depth=d, **common) for d in depths])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = bench.emit_report(bench.run_matrix(specs), args.format)
    if args.out:
        args.out.write_text(report)
    else:
        out.write(report)


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except ForkError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return ENGINE_ERROR
    except (FileNotFoundError, FileExistsError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return ENGINE_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
