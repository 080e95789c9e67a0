"""Copy-on-write environment branching for agentic exploration."""

from .errors import (
    EmptyCommit,
    ForkError,
    InsufficientPoints,
    InvalidCommand,
    InvalidPath,
    IrreversiblePath,
    NoCursor,
    NodeInUse,
    NotFound,
    OutOfBounds,
    RestoreMismatch,
    StateMismatch,
    StorageFull,
    StoreLocked,
    UncommittedFork,
    UnknownNode,
    UnknownSnapshot,
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
    parse_script,
)
from .service import BranchView, CommitRecord, CommitState, VersionedService, VisibilityMode
from .store import TOMBSTONE, ZERO, Branch, DirtyStats, Snapshot, Store
from .tree import (
    EVERY_NODE,
    ROOT_ONLY,
    Env,
    ExplorationTree,
    RestorePolicy,
    SnapshotPolicy,
    TreeNode,
    every_k,
)

__version__ = "0.1.0"
