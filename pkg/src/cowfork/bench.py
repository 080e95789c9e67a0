"""Snapshot/restore latency harness.

Varies dirty memory and dirty file bytes independently, builds the state in a
fresh in-memory engine per trial, and times sealing and ``goto`` under each
restore policy. Medians over trials are reported; trends (linearity in dirty
bytes, depth independence of snapshot restores) are what the harness checks,
not absolute seconds.
"""

from __future__ import annotations

import csv
import gc
import io
import logging
import math
import re
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ForkError, InsufficientPoints
from .runtime import Command, CompensationPolicy, file_put, mem_write, svc_put_cmd
from .store import DEFAULT_CHUNK_SIZE, Store
from .tree import EVERY_NODE, ExplorationTree, RestorePolicy

logger = logging.getLogger(__name__)

KiB = 1 << 10
MiB = 1 << 20
GiB = 1 << 30

CSV_COLUMNS = ("policy", "dirty_mem", "dirty_fs", "depth", "snapshot_s_median",
               "restore_s_median", "store_growth", "commands_replayed", "trials")

_SIZE_RE = re.compile(r"^\s*(\d+)\s*([kmgKMG]?)(i?[bB])?\s*$")


def parse_size(text: str) -> int:
    """``"64M"`` -> 67108864. Suffixes are binary (K, M, G)."""
    m = _SIZE_RE.match(text)
    if not m:
        raise ValueError(f"bad size {text!r}")
    return int(m.group(1)) * {"": 1, "k": KiB, "m": MiB, "g": GiB}[m.group(2).lower()]


def format_size(n: int) -> str:
    for unit, scale in (("GiB", GiB), ("MiB", MiB), ("KiB", KiB)):
        if n and n % scale == 0:
            return f"{n // scale} {unit}"
    return f"{n} B"


@dataclass(frozen=True)
class WorkloadSpec:
    dirty_mem_bytes: int = 0
    dirty_fs_bytes: int = 0
    depth: int = 1
    policies: tuple[RestorePolicy, ...] = (RestorePolicy.SNAPSHOT,)
    trials: int = 5
    seed: int = 0
    chunk_size: int = DEFAULT_CHUNK_SIZE

    def __post_init__(self):
        if self.trials < 3:
            raise ValueError("trials must be >= 3")
        for name in ("dirty_mem_bytes", "dirty_fs_bytes"):
            value = getattr(self, name)
            if value < 0 or value % self.chunk_size:
                raise ValueError(f"{name}={value} is not a non-negative multiple of {self.chunk_size}")
        needed = (self.dirty_mem_bytes > 0) + (self.dirty_fs_bytes > 0)
        if self.depth < max(1, needed):
            raise ValueError(f"depth {self.depth} cannot hold {needed} mutation commands")

    @property
    def mem_size(self) -> int:
        """Memory image size for the workload: twice the dirty region, at least one chunk."""
        return max(2 * self.dirty_mem_bytes, self.chunk_size)


def gen_workload(spec: WorkloadSpec) -> list[Command]:
    """Seeded mutation commands: one contiguous memory write covering exactly
    ``dirty_mem_bytes / chunk_size`` distinct slots, and one file holding
    ``dirty_fs_bytes`` of content. Content is random so nothing deduplicates."""
    rng = np.random.default_rng(spec.seed)
    cmds: list[Command] = []
    cs = spec.chunk_size
    if spec.dirty_mem_bytes:
        slots = spec.dirty_mem_bytes // cs
        start = int(rng.integers(0, spec.mem_size // cs - slots + 1))
        cmds.append(mem_write(start * cs, rng.bytes(spec.dirty_mem_bytes)))
    if spec.dirty_fs_bytes:
        cmds.append(file_put(f"/bench/data-{spec.seed}.bin", rng.bytes(spec.dirty_fs_bytes)))
    return cmds


def build_path(spec: WorkloadSpec) -> list[Command]:
    """``spec.depth`` commands: service-only filler steps, then the mutations.
    Fillers touch neither memory nor files, so dirty bytes stay exact."""
    mutations = gen_workload(spec)
    rng = np.random.default_rng([spec.seed, 1])
    fillers = [svc_put_cmd(f"bench/step-{i}", rng.bytes(8)) for i in range(spec.depth - len(mutations))]
    return fillers + mutations


@dataclass(frozen=True)
class ReportRow:
    policy: str
    dirty_mem: int
    dirty_fs: int
    depth: int
    snapshot_s_median: float | None
    restore_s_median: float | None
    store_growth: int
    commands_replayed: int
    trials: int


@dataclass
class Measurement:
    spec: WorkloadSpec
    policy: RestorePolicy
    snapshot_times: list[float] = field(default_factory=list)
    restore_times: list[float] = field(default_factory=list)
    store_growth: int = 0
    manifests_added: int = 0
    commands_replayed: int = 0
    error: str | None = None

    @property
    def snapshot_s_median(self) -> float | None:
        return statistics.median(self.snapshot_times) if self.snapshot_times else None

    @property
    def restore_s_median(self) -> float | None:
        return statistics.median(self.restore_times) if self.restore_times else None

    def row(self) -> ReportRow:
        return ReportRow(self.policy.value, self.spec.dirty_mem_bytes, self.spec.dirty_fs_bytes,
                         self.spec.depth, self.snapshot_s_median, self.restore_s_median,
                         self.store_growth, self.commands_replayed, len(self.snapshot_times))


def _autorange(fn: Callable[[], float], min_seconds: float, max_loops: int = 1000,
               warmup: int = 3) -> float:
    """Mean of ``fn()`` (which returns its own timed duration) over enough
    calls to accumulate ``min_seconds``, after ``warmup`` discarded calls."""
    for _ in range(warmup):
        fn()
    total, loops = 0.0, 0
    while loops < max_loops and (loops == 0 or total < min_seconds):
        total += fn()
        loops += 1
    return total / loops


def _run_trial(spec: WorkloadSpec, policy: RestorePolicy, cmds: list[Command],
               restore_min_seconds: float) -> tuple[float, float, int, int, int]:
    store = Store(chunk_size=spec.chunk_size)
    tree, root = ExplorationTree.init_root(store, mem_size=spec.mem_size,
                                           snapshot_policy=EVERY_NODE,
                                           compensation=CompensationPolicy.ON)
    size_before = store.size_bytes
    manifests_before = len(store.snapshot_ids())
    node, seal_total = root, 0.0
    for cmd in cmds:
        node = tree.expand(node, cmd)
        seal_total += tree.last_seal_seconds
    leaf = node
    growth = store.size_bytes - size_before
    manifests = len(store.snapshot_ids()) - manifests_before

    def restore_once() -> float:
        if policy is RestorePolicy.BACKTRACK:
            # walk the whole path back up: cursor at the leaf, target the root
            tree.goto(leaf, RestorePolicy.SNAPSHOT)
            t0 = time.perf_counter()
            tree.goto(root, RestorePolicy.BACKTRACK)
        else:
            t0 = time.perf_counter()
            tree.goto(leaf, policy)
        return time.perf_counter() - t0

    restore = _autorange(restore_once, restore_min_seconds)
    return seal_total, restore, growth, manifests, tree.last_restore.steps


def run_matrix(specs: Iterable[WorkloadSpec], *, restore_min_seconds: float = 0.02,
               progress: Callable[[Measurement], None] | None = None) -> list[Measurement]:
    """Measure every spec x policy cell, strictly sequentially.

    Each trial builds a fresh store: root, then ``depth`` expanded nodes
    (sealed at every node). ``snapshot_times`` sums seal time along the path;
    ``restore_times`` is the per-call time of ``goto`` to the leaf (for
    BACKTRACK, from the leaf back to the root). A failing cell records its
    error and the matrix moves on.
    """
    out = []
    for spec in specs:
        cmds = build_path(spec)
        for policy in spec.policies:
            m = Measurement(spec, policy)
            gc_was_enabled = gc.isenabled()
            try:
                for _ in range(spec.trials):
                    gc.collect()
                    gc.disable()
                    try:
                        seal, restore, growth, manifests, steps = _run_trial(
                            spec, policy, cmds, restore_min_seconds)
                    finally:
                        if gc_was_enabled:
                            gc.enable()
                    m.snapshot_times.append(seal)
                    m.restore_times.append(restore)
                    m.store_growth, m.manifests_added, m.commands_replayed = growth, manifests, steps
            except (ForkError, MemoryError) as exc:
                m.error = f"{type(exc).__name__}: {exc}"
                logger.warning("cell %s/%s failed: %s", spec, policy.value, m.error)
            if progress is not None:
                progress(m)
            out.append(m)
    return out


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float
    n: int
    monotonic: bool


def fit_line(xs: Sequence[float], ys: Sequence[float], min_points: int = 4) -> LinearFit:
    """Least-squares line through ``(xs, ys)`` with R² and a monotonicity flag
    (ys nondecreasing when ordered by x)."""
    if len(xs) != len(ys):
        raise ValueError("xs and ys differ in length")
    if len(xs) < min_points or len(set(xs)) < 2:
        raise InsufficientPoints(f"need >= {min_points} points over >= 2 distinct x values")
    slope, intercept = statistics.linear_regression(xs, ys)
    mean_y = statistics.fmean(ys)
    ss_tot = sum((y - mean_y) ** 2 for y in ys)
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    if ss_tot == 0:
        r2 = 1.0 if math.isclose(ss_res, 0.0, abs_tol=1e-24) else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    ordered = [y for _, y in sorted(zip(xs, ys))]
    monotonic = all(b >= a for a, b in zip(ordered, ordered[1:]))
    return LinearFit(slope, intercept, r2, len(xs), monotonic)


def check_linearity(measurements: Sequence[Measurement], metric: str = "snapshot",
                    min_points: int = 4) -> LinearFit:
    """Fit median ``metric`` time ("snapshot" or "restore") against dirty bytes
    on whichever axis (memory or disk) the measurements vary."""
    good = [m for m in measurements if m.error is None]
    mem = {m.spec.dirty_mem_bytes for m in good}
    fs = {m.spec.dirty_fs_bytes for m in good}
    if len(mem) > 1 and len(fs) > 1:
        raise ValueError("measurements vary both memory and disk; fit one axis at a time")
    axis = "dirty_mem_bytes" if len(mem) > 1 else "dirty_fs_bytes"
    attr = "snapshot_s_median" if metric == "snapshot" else "restore_s_median"
    xs = [getattr(m.spec, axis) for m in good]
    ys = [getattr(m, attr) for m in good]
    return fit_line(xs, ys, min_points)


# -- reports -------------------------------------------------------------------

def _rows(items: Iterable[Measurement | ReportRow]) -> list[ReportRow]:
    return [i.row() if isinstance(i, Measurement) else i for i in items]


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def emit_report(items: Iterable[Measurement | ReportRow], fmt: str = "csv") -> str:
    rows = _rows(items)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()
    if fmt == "markdown":
        lines = [
            "| Operation | Policy | Memory | Disk | Depth | Snapshot (s) | Restore (s) | Store growth | Replayed | Trials |",
            "|---|---|---|---|---|---|---|---|---|---|",
        ]
        for r in rows:
            snap = "/" if r.snapshot_s_median is None else f"{r.snapshot_s_median:.6f}"
            rest = "/" if r.restore_s_median is None else f"{r.restore_s_median:.6f}"
            lines.append(f"| Snapshot + Restore | {r.policy} | {format_size(r.dirty_mem)} | "
                         f"{format_size(r.dirty_fs)} | {r.depth} | {snap} | {rest} | "
                         f"{format_size(r.store_growth)} | {r.commands_replayed} | {r.trials} |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(text: str) -> list[ReportRow]:
    """Inverse of ``emit_report(..., "csv")``."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    rows = []
    for d in reader:
        rows.append(ReportRow(
            d["policy"], int(d["dirty_mem"]), int(d["dirty_fs"]), int(d["depth"]),
            float(d["snapshot_s_median"]) if d["snapshot_s_median"] else None,
            float(d["restore_s_median"]) if d["restore_s_median"] else None,
            int(d["store_growth"]), int(d["commands_replayed"]), int(d["trials"])))
    return rows
