import random

import pytest

from _oracle import NaiveEnv, random_command, random_tree_shape
from cowfork.errors import IrreversiblePath, NodeInUse, NoCursor, UnknownNode
from cowfork.runtime import (
    IRREVERSIBLE, CompensationPolicy, file_delete, file_put, mem_write, net_send, svc_put_cmd,
)
from cowfork.service import VersionedService
from cowfork.store import ZERO, Store
from cowfork.tree import (
    EVERY_NODE, ROOT_ONLY, ExplorationTree, RestorePolicy, SnapshotPolicy, every_k,
)

CS = 4096
MEM = 16 * CS
R, S, B = RestorePolicy.REPLAY, RestorePolicy.SNAPSHOT, RestorePolicy.BACKTRACK


def make_tree(script=(), mem=MEM, chunk=CS, **config):
    store = Store(chunk_size=chunk)
    tree, root = ExplorationTree.init_root(store, script, mem_size=mem, **config)
    return tree, root


def state_of(env):
    b = env.branch
    return b.mem_read(0, b.mem_size), {p: b.fs_get(p) for p in b.fs_list()}, env.view.visible()


# -- init_root -----------------------------------------------------------------------

def test_empty_root():
    tree, root = make_tree()
    snap = tree.store.get_snapshot(tree.node(root).snapshot_id)
    assert set(snap.mem_slots) == {ZERO} and snap.files == {}
    assert tree.node(root).parent is None and tree.node(root).command is None


def test_root_script_file():
    tree, root = make_tree([file_put("/etc/conf", b"x=1")])
    snap = tree.store.get_snapshot(tree.node(root).snapshot_id)
    assert tree.store.read_file(snap, "/etc/conf") == b"x=1"


def test_root_deterministic():
    script = [mem_write(10, b"abc"), file_put("/f", b"1"), svc_put_cmd("k", b"v")]
    a, _ = make_tree(script)
    b, _ = make_tree(script)
    assert a.node(0).snapshot_id == b.node(0).snapshot_id
    assert a.node(0).digest == b.node(0).digest


# -- expand --------------------------------------------------------------------------

def test_expand_file_put_diff():
    tree, root = make_tree()
    child = tree.expand(root, file_put("/x", b"v"))
    s0 = tree.store.get_snapshot(tree.node(root).snapshot_id)
    s1 = tree.store.get_snapshot(tree.node(child).snapshot_id)
    assert s0.mem_slots == s1.mem_slots
    assert set(s1.files) - set(s0.files) == {"/x"}


def test_two_children_diverge_only_in_effect():
    tree, root = make_tree([file_put("/base", b"b")])
    c1 = tree.expand(root, file_put("/one", b"1"))
    c2 = tree.expand(root, mem_write(CS * 3, b"2"))
    s0, s1, s2 = (tree.store.get_snapshot(tree.node(n).snapshot_id) for n in (root, c1, c2))
    assert s1.mem_slots == s0.mem_slots and {**s0.files} == {k: v for k, v in s1.files.items() if k != "/one"}
    diff = [i for i, (a, b) in enumerate(zip(s0.mem_slots, s2.mem_slots)) if a != b]
    assert diff == [3] and s2.files == s0.files


def test_net_send_child_irreversible():
    tree, root = make_tree(default_policy=B)
    child = tree.expand(root, net_send("peer", b"\x00"))
    assert tree.node(child).compensation is IRREVERSIBLE
    assert not tree.node(child).reversible


def test_failed_command_creates_child():
    tree, root = make_tree()
    child = tree.expand(root, file_delete("/missing"))
    assert tree.node(child).observation.status == "NotFound"
    assert tree.node(child).snapshot_id == tree.node(root).snapshot_id


def test_unknown_node():
    tree, _ = make_tree()
    with pytest.raises(UnknownNode):
        tree.expand(99, file_put("/x", b"v"))
    with pytest.raises(UnknownNode):
        tree.goto(99)
    with pytest.raises(UnknownNode):
        tree.path_commands(99)


# -- goto ----------------------------------------------------------------------------

def build_random(seed, n=25, allow_net=False, compensation=CompensationPolicy.ON, **config):
    rng = random.Random(seed)
    tree, root = make_tree(compensation=compensation, **config)
    oracle = {root: NaiveEnv.empty(MEM)}
    for i, p in enumerate(random_tree_shape(rng, n, 8, 3), start=1):
        cmd = random_command(rng, MEM, allow_net=allow_net, chunk_size=CS)
        env = oracle[p].clone()
        env.apply(cmd)
        nid = tree.expand(p, cmd)
        assert nid == i
        oracle[nid] = env
    return tree, oracle


@pytest.mark.parametrize("seed", range(5))
def test_all_policies_match_naive_oracle(seed):
    tree, oracle = build_random(seed)
    for nid in sorted(tree.nodes):
        expected = oracle[nid]
        for policy in (R, S, B):
            env = tree.goto(nid, policy)
            mem, files, svc = state_of(env)
            assert env.digest() == tree.node(nid).digest
            assert mem == bytes(expected.mem) and files == expected.files and svc == expected.svc


def test_goto_root_any_policy():
    tree, oracle = build_random(1)
    tree.goto(max(tree.nodes))
    for policy in (R, S, B):
        assert tree.goto(0, policy).branch.state_digest() == tree.node(0).snapshot_id


def test_backtrack_across_net_send():
    tree, root = make_tree()
    a = tree.expand(root, net_send("peer", b"\x00"))
    b = tree.expand(a, file_put("/x", b"1"))
    tree.goto(b, S)
    with pytest.raises(IrreversiblePath):
        tree.goto(root, B)
    # the failure left the cursor usable
    assert tree.goto(a, B).digest() == tree.node(a).digest


def test_backtrack_sideways_into_irreversible_subtree_is_fine():
    tree, root = make_tree()
    a = tree.expand(root, net_send("peer", b"\x00"))
    c = tree.expand(root, file_put("/x", b"1"))
    tree.goto(c, S)
    env = tree.goto(a, B)  # undo c (reversible), redo a
    assert env.view.outbox() == [b"\x00"]


def test_backtrack_needs_cursor():
    tree, _ = make_tree()
    tree.cursor_id, tree._cursor_env = None, None
    with pytest.raises(NoCursor):
        tree.goto(0, B)


def test_restore_counters():
    tree, root = make_tree()
    node = root
    for i in range(10):
        node = tree.expand(node, mem_write(i * 10, b"x"))
    tree.goto(node, R)
    assert tree.last_restore.commands_replayed == 10
    tree.goto(node, S)
    assert tree.last_restore.commands_replayed == 0
    tree.goto(3, B)
    assert (tree.last_restore.compensations_applied, tree.last_restore.commands_replayed) == (7, 0)


def test_backtrack_steps_equal_tree_distance():
    tree, _ = build_random(7, n=30)
    rng = random.Random(0)
    ids = sorted(tree.nodes)
    for _ in range(40):
        a, b = rng.choice(ids), rng.choice(ids)
        tree.goto(a, S)
        tree.goto(b, B)
        na, nb = tree.node(a), tree.node(b)
        common = tree.lca(na, nb)
        assert tree.last_restore.compensations_applied == na.depth - common.depth
        assert tree.last_restore.commands_replayed == nb.depth - common.depth


@pytest.mark.parametrize("policy,k", [("every_k", 3), ("root_only", None)])
def test_sparse_snapshot_policies(policy, k):
    sp = every_k(k) if k else ROOT_ONLY
    tree, oracle = build_random(3, n=20, snapshot_policy=sp)
    for nid, n in tree.nodes.items():
        assert (n.snapshot_id is not None) == sp.seals(n.depth)
        env = tree.goto(nid, S)
        anchor = next(a for a in tree.ancestors(n) if a.snapshot_id is not None)
        assert tree.last_restore.commands_replayed == n.depth - anchor.depth
        assert env.digest() == n.digest
        assert state_of(env)[0] == bytes(oracle[nid].mem)


def test_snapshot_policy_parse():
    assert SnapshotPolicy.parse("every_k:5") == every_k(5)
    assert str(every_k(5)) == "every_k:5"
    assert SnapshotPolicy.parse("every_node") == EVERY_NODE
    assert SnapshotPolicy.parse("root_only") == ROOT_ONLY
    assert ROOT_ONLY.seals(0) and not ROOT_ONLY.seals(1)
    assert every_k(3).seals(6) and not every_k(3).seals(4)
    with pytest.raises(ValueError):
        SnapshotPolicy.parse("every_k:0")


# -- path_commands --------------------------------------------------------------------

def test_path_commands():
    tree, root = make_tree()
    assert tree.path_commands(root) == []
    cmds = [file_put("/a", b"1"), mem_write(0, b"2"), svc_put_cmd("k", b"3")]
    node = root
    for c in cmds:
        tree.expand(root, file_put("/noise", b"n"))
        node = tree.expand(node, c)
    got = tree.path_commands(node)
    assert [(c.opcode, c.args) for c in got] == [(c.opcode, c.args) for c in cmds]
    assert [c.id for c in got] == [0, 1, 2]


def test_replaying_path_commands_reproduces_digest():
    tree, _ = build_random(2)
    from cowfork.runtime import execute
    from cowfork.tree import Env
    for nid in tree.nodes:
        env = Env(tree.store.open_branch(tree.node(0).snapshot_id),
                  tree.service.view(tree.node(0).service_head))
        for c in tree.path_commands(nid):
            execute(env.branch, c, env.view)
            env.view.checkpoint()
        assert env.digest() == tree.node(nid).digest


# -- fork_children ----------------------------------------------------------------------

def test_fork_children_cow_bound():
    tree, root = make_tree(mem=64 << 20, chunk=65536)
    before = tree.store.chunk_count
    kids = tree.fork_children(root, [mem_write(i * 65536, b"\x01") for i in range(3)])
    assert len(kids) == 3
    assert tree.store.chunk_count - before <= 3


def test_fork_children_equals_sequential_expands():
    cmds = [file_put("/a", b"1"), mem_write(5, b"z"), svc_put_cmd("k", b"v")]
    t1, r1 = make_tree()
    t2, r2 = make_tree()
    k1 = t1.fork_children(r1, cmds)
    k2 = [t2.expand(r2, c) for c in cmds]
    assert [t1.node(i).digest for i in k1] == [t2.node(i).digest for i in k2]
    t3, r3 = make_tree()
    assert t3.node(t3.fork_children(r3, cmds[:1])[0]).digest == t1.node(k1[0]).digest


# -- prune ---------------------------------------------------------------------------

def test_prune_shared_leaf_reclaims_manifest_only():
    tree, root = make_tree([file_put("/f", b"x" * CS)])
    a = tree.expand(root, mem_write(0, b"a"))
    leaf = tree.expand(a, file_put("/g", b"x" * CS))  # same chunk content as /f
    tree.goto(a, S)
    tree.gc()  # drop the unreferenced genesis manifest first
    manifest = tree.store._manifest_sizes[tree.node(leaf).snapshot_id]
    chunks = tree.store.chunk_count
    assert tree.prune(leaf) == manifest
    assert tree.store.chunk_count == chunks


def test_prune_reclaims_exclusive_file():
    tree, root = make_tree()
    keep = tree.expand(root, file_put("/keep", b"k"))
    big = tree.expand(root, file_put("/big", random.Random(0).randbytes(10 * CS)))
    tree.expand(big, mem_write(0, b"q"))
    tree.goto(keep, S)
    digest = tree.node(keep).digest
    chunks = tree.store.chunk_count
    reclaimed = tree.prune(big)
    assert chunks - tree.store.chunk_count >= 10
    assert reclaimed >= 10 * CS
    assert big not in tree.nodes and big not in tree.node(root).children
    for policy in (R, S, B):
        assert tree.goto(keep, policy).digest() == digest


def test_prune_in_use():
    tree, root = make_tree()
    a = tree.expand(root, file_put("/a", b"1"))
    b = tree.expand(a, file_put("/b", b"1"))
    with pytest.raises(NodeInUse):
        tree.prune(root)
    with pytest.raises(NodeInUse):
        tree.prune(a)  # cursor is b
    tree.goto(root)
    tree.prune(a)
    assert set(tree.nodes) == {root}
    with pytest.raises(UnknownNode):
        tree.prune(b)


# -- tree.json -------------------------------------------------------------------------

def test_tree_json_round_trip(tmp_path):
    tree, _ = build_random(4, n=20, allow_net=True)
    path = tmp_path / "tree.json"
    tree.save(path)
    loaded = ExplorationTree.load(path, tree.store, tree.service)
    assert loaded.dumps() == path.read_text()
    assert loaded.render() == tree.render()
    for nid in tree.nodes:
        assert loaded.goto(nid, S).digest() == tree.node(nid).digest
    node = tree.nodes[max(tree.nodes)]
    assert set(node.to_json()) >= {"id", "parent", "command", "snapshot_id", "digest", "reversible"}


def test_render_lists_nodes_in_id_order():
    tree, root = make_tree()
    tree.expand(root, net_send("p", b"\x00"))
    tree.expand(root, file_put("/x", b"v"))
    lines = tree.render().splitlines()
    assert [l.split("\t")[0] for l in lines] == ["0", "1", "2"]
    assert "IRREV" in lines[1] and "\trev\t" in lines[2]
    assert lines[1].split("\t")[3] == tree.node(1).digest[:12]


def test_service_state_restored_with_node():
    tree, root = make_tree()
    a = tree.expand(root, svc_put_cmd("k", b"1"))
    b = tree.expand(a, svc_put_cmd("k", b"2"))
    c = tree.expand(root, net_send("p", b"m"))
    assert tree.goto(a, R).view.get("k") == b"1"
    assert tree.goto(b, S).view.get("k") == b"2"
    assert tree.goto(a, B).view.get("k") == b"1"
    env = tree.goto(c, S)
    assert env.view.get("k") is None and env.view.outbox() == [b"m"]
    assert isinstance(tree.service, VersionedService)
