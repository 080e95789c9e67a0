import hashlib
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cowfork.errors import EmptyCommit, UncommittedFork
from cowfork.service import (
    CommitState, VersionedService, VisibilityMode, svc_commit, svc_fork, svc_get, svc_outbox, svc_put,
)

CO, OPT = VisibilityMode.COMMITTED_ONLY, VisibilityMode.OPTIMISTIC


def chain_walk(svc, head, key):
    """Brute-force resolution: walk parents until a record mentions ``key``."""
    while head is not None:
        rec = svc.commits[head]
        if key in rec.writes:
            return rec.writes[key]
        head = rec.parent
    return None


def map_merge(svc, head):
    """Oracle for the visible map: apply every record root-first."""
    chain = []
    while head is not None:
        chain.append(svc.commits[head])
        head = svc.commits[head].parent
    out = {}
    for rec in reversed(chain):
        for k, v in rec.writes.items():
            if v is None:
                out.pop(k, None)
            else:
                out[k] = v
    return out


# -- put / get --------------------------------------------------------------------

def test_read_your_write():
    v = VersionedService().view()
    svc_put(v, "k", b"v")
    assert svc_get(v, "k") == b"v"


def test_sibling_isolation():
    svc = VersionedService()
    root = svc.view()
    svc_put(root, "k", b"old")
    svc_commit(root)
    a, b = svc_fork(root), svc_fork(root)
    svc_put(a, "k", b"new")
    svc_put(a, "other", b"x")
    assert svc_get(b, "k") == b"old"
    assert svc_get(b, "other") is None


def test_two_views_same_key_both_commit():
    svc = VersionedService()
    a, b = svc.view(name="a"), svc.view(name="b")
    svc_put(a, "k", b"A")
    svc_put(b, "k", b"B")
    ra, rb = svc_commit(a), svc_commit(b)
    assert ra.commit_id != rb.commit_id
    assert chain_walk(svc, a.head, "k") == svc_get(a, "k") == b"A"
    assert chain_walk(svc, b.head, "k") == svc_get(b, "k") == b"B"


def test_chain_passthrough_and_tombstone():
    svc = VersionedService()
    v = svc.view()
    svc_put(v, "a", b"1")
    svc_put(v, "b", b"2")
    svc_commit(v)
    svc_put(v, "c", b"3")
    svc_commit(v)
    assert svc_get(v, "a") == b"1"
    v.delete("a")
    svc_commit(v)
    assert svc_get(v, "a") is None and chain_walk(svc, v.head, "a") is None
    assert v.visible() == map_merge(svc, v.head) == {"b": b"2", "c": b"3"}


# -- commit -----------------------------------------------------------------------------

def test_commit_visible_to_later_forks():
    svc = VersionedService()
    v = svc.view()
    svc_put(v, "k", b"v")
    rec = svc_commit(v)
    assert rec.state is CommitState.COMMITTED and rec.parent is None
    assert svc_get(svc_fork(v), "k") == b"v"


def test_sequential_commits_form_chain():
    svc = VersionedService()
    v = svc.view()
    svc_put(v, "x", b"1")
    r1 = svc_commit(v)
    svc_put(v, "y", b"2")
    r2 = svc_commit(v)
    assert r2.parent == r1.commit_id
    assert len(svc.commits) == 2
    assert v.staged == {}


def test_commit_digest_recomputed():
    svc = VersionedService()
    v = svc.view()
    svc_put(v, "b", b"\x02")
    svc_put(v, "a", b"\x01")
    rec = svc_commit(v)
    body = json.dumps({"parent": None, "writes": {"a": "01", "b": "02"}},
                      sort_keys=True, separators=(",", ":")).encode()
    assert rec.commit_id == hashlib.sha256(body).hexdigest()
    w = svc.view()
    svc_put(w, "a", b"\x01")
    svc_put(w, "b", b"\x02")
    assert svc_commit(w).commit_id == rec.commit_id
    assert len(svc.commits) == 1


def test_empty_commit():
    v = VersionedService().view()
    with pytest.raises(EmptyCommit):
        svc_commit(v)


def test_commit_promotes_in_flight_head():
    svc = VersionedService()
    v = svc.view(mode=OPT)
    svc_put(v, "k", b"v")
    v.checkpoint()
    assert svc.commits[v.head].state is CommitState.IN_FLIGHT
    svc_commit(v)
    assert svc.commits[v.head].state is CommitState.COMMITTED
    with pytest.raises(EmptyCommit):
        svc_commit(v)


def test_committing_promotes_ancestors():
    svc = VersionedService()
    v = svc.view(mode=OPT)
    svc_put(v, "a", b"1")
    first = v.checkpoint()
    svc_put(v, "b", b"2")
    svc_commit(v)
    assert svc.commits[first].state is CommitState.COMMITTED


# -- fork -----------------------------------------------------------------------------

def test_committed_only_refuses_staged():
    v = VersionedService().view(mode=CO)
    svc_put(v, "k", b"v")
    with pytest.raises(UncommittedFork):
        svc_fork(v)


def test_committed_only_refuses_in_flight_head():
    svc = VersionedService()
    v = svc.view(mode=CO)
    svc_put(v, "k", b"v")
    v.checkpoint()
    with pytest.raises(UncommittedFork):
        svc_fork(v)


def test_optimistic_fork_reads_in_flight():
    svc = VersionedService()
    v = svc.view(mode=OPT)
    svc_put(v, "k", b"tentative")
    child = svc_fork(v)
    assert svc_get(child, "k") == b"tentative"
    assert svc.commits[child.head].state is CommitState.IN_FLIGHT


def test_parent_writes_after_fork_invisible():
    svc = VersionedService()
    v = svc.view(mode=OPT)
    svc_put(v, "k", b"1")
    child = svc_fork(v)
    svc_put(v, "k", b"2")
    svc_commit(v)
    assert svc_get(child, "k") == b"1"


# -- outbox -----------------------------------------------------------------------------

def test_outbox_branch_scoped():
    svc = VersionedService()
    root = svc.view(mode=OPT)
    parent, child = root, svc_fork(root)
    parent.send("p", b"A")
    child.send("p", b"B")
    assert svc_outbox(parent) == [b"A"]
    assert svc_outbox(child) == [b"B"]


def test_outbox_inherits_prefix():
    svc = VersionedService()
    v = svc.view(mode=OPT)
    v.send("p", b"A")
    child = svc_fork(v)
    child.send("p", b"B")
    # oracle: outbox keys along the child's commit chain plus staged
    chain = map_merge(svc, child.head)
    inherited = [chain[k].partition(b"\n")[2] for k in sorted(chain) if k.startswith("outbox/")]
    assert inherited == [b"A"]
    assert svc_outbox(child) == [b"A", b"B"]
    assert svc_outbox(v) == [b"A"]


def test_empty_outbox():
    assert svc_outbox(VersionedService().view()) == []


# -- persistence ----------------------------------------------------------------------

def test_service_json_round_trip(tmp_path):
    svc = VersionedService()
    v = svc.view(mode=OPT, name="main")
    svc_put(v, "k", b"\x00\x01")
    v.delete("gone")
    svc_commit(v)
    svc_put(v, "z", b"2")
    v.checkpoint()
    path = tmp_path / "service.json"
    svc.save(path)
    loaded = VersionedService.load(path)
    assert loaded.dumps() == path.read_text()
    assert list(loaded.commits) == list(svc.commits)
    for cid, rec in svc.commits.items():
        assert loaded.commits[cid].state is rec.state
        assert dict(loaded.resolved(cid)) == dict(svc.resolved(cid))
        assert loaded.commit_digest(rec.parent, dict(rec.writes)) == cid
    assert json.loads(path.read_text())[0]["writes"] == {"gone": None, "k": "0001"}


# -- properties -------------------------------------------------------------------------

ops = st.lists(st.tuples(st.sampled_from(["put", "del", "commit", "fork", "checkpoint"]),
                         st.integers(0, 3), st.sampled_from("abcd"), st.binary(min_size=1, max_size=3)),
               max_size=60)


@settings(max_examples=120, deadline=None)
@given(ops, st.sampled_from([CO, OPT]))
def test_random_histories(history, mode):
    """Views are checked after every step against snapshots and brute-force oracles."""
    svc = VersionedService()
    views = [svc.view(mode=mode)]
    models = [{}]           # per-view expected visible map
    frozen = {}             # commit id -> resolved map when first seen
    committed_values = set()
    for op, vi, key, val in history:
        vi %= len(views)
        v, model = views[vi], models[vi]
        others = [(w.visible(), w) for i, w in enumerate(views) if i != vi]
        if op == "put":
            v.put(key, val)
            model[key] = val
        elif op == "del":
            v.delete(key)
            model.pop(key, None)
        elif op == "commit":
            if v.staged or not svc.is_committed(v.head):
                svc_commit(v)
                for rec in svc.commits.values():
                    if rec.state is CommitState.COMMITTED:
                        committed_values.update(x for x in rec.writes.values() if x is not None)
        elif op == "checkpoint":
            if mode is OPT:
                v.checkpoint()
        elif op == "fork":
            try:
                child = svc_fork(v)
            except UncommittedFork:
                assert mode is CO and (v.staged or not svc.is_committed(v.head))
                continue
            assert child.visible() == model
            views.append(child)
            models.append(dict(model))
        # isolation: nobody else's view moved
        for before, w in others:
            assert w.visible() == before
        assert v.visible() == model
        for k in "abcd":
            expected = v.staged[k] if k in v.staged else chain_walk(svc, v.head, k)
            assert v.get(k) == expected
        # immutability of every commit seen so far
        for cid in svc.commits:
            frozen.setdefault(cid, map_merge(svc, cid))
            assert dict(svc.resolved(cid)) == frozen[cid]
            assert svc.commit_digest(svc.commits[cid].parent, dict(svc.commits[cid].writes)) == cid
    if mode is CO:
        # committed-only safety: non-staged reads come from committed records
        for v in views:
            for k, value in svc.resolved(v.head).items():
                assert value in committed_values
