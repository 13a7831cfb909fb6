import json
import random
from dataclasses import replace

import pytest

from exclavefl import crypto
from exclavefl.auditor import (
    AuditPolicy,
    EDG,
    audit,
    build_edg,
    check_claim1,
    check_claim2,
    check_claim3,
    check_claim4,
    check_claim5,
    export_dot,
    indexed_edges,
    naive_edges,
    rounds_compatible,
)
from exclavefl.edr import EDR, edr_digest, issuer_message


def _edr(kind="train", pid="p1", rnd=0, inputs=None, outputs=None):
    return EDR(f"{pid}/{kind}", pid, kind, rnd, inputs or {"a:x": bytes(32)}, b"\xc0" * 32, outputs or {"b:y": bytes(32)})


def test_round_compatibility():
    x = _edr(rnd=1)
    assert rounds_compatible(x, _edr(rnd=1))
    assert rounds_compatible(x, _edr(rnd=2))
    assert not rounds_compatible(x, _edr(rnd=0))
    assert not rounds_compatible(x, _edr(rnd=3))
    assert rounds_compatible(_edr("sanitize", rnd=-1), _edr(rnd=0))


def test_edge_label_is_shared_pairs():
    d1, d2 = b"\x01" * 32, b"\x02" * 32
    x = _edr("dp", outputs={"model:diff:p1": d1, "m:z": d2})
    y = _edr("aggregate", pid="mp", inputs={"model:diff:p1": d1, "m:z": b"\x09" * 32})
    vs = {"x": x, "y": y}
    assert indexed_edges(vs) == naive_edges(vs) == {("x", "y"): frozenset({("model:diff:p1", d1)})}


def test_no_self_edges():
    d = b"\x05" * 32
    x = _edr(inputs={"m:a": d}, outputs={"m:a": d})
    assert indexed_edges({"x": x}) == naive_edges({"x": x}) == {}


def _random_vertices(rng, n):
    pool = [bytes([i]) * 32 for i in range(max(2, n // 3))]
    labels = ["model:global", "model:agg_diff", "model:diff:p1", "model:diff:p2", "dataset:commitment"]
    vs = {}
    for _ in range(n):
        e = EDR(
            rng.choice(["e1", "e2", "e3"]),
            rng.choice(["p1", "p2", "mp"]),
            rng.choice(["train", "dp", "aggregate", "model_update", "sanitize"]),
            rng.randint(-1, 4),
            {rng.choice(labels): rng.choice(pool) for _ in range(rng.randint(1, 3))},
            rng.choice(pool),
            {rng.choice(labels): rng.choice(pool) for _ in range(rng.randint(1, 3))},
        )
        vs[edr_digest(e).hex()] = e
    return dict(sorted(vs.items()))


def test_naive_equals_indexed_random():
    rng = random.Random(3)
    for _ in range(50):
        vs = _random_vertices(rng, rng.randint(0, 80))
        assert naive_edges(vs) == indexed_edges(vs)


def test_build_edg_permutation_invariant(faithful_run, demo_job):
    recs = [e.to_json() for e in faithful_run.store.snapshot()]
    a, _ = build_edg(recs, demo_job.platform_root_pub, demo_job.issuer_registry)
    rng = random.Random(1)
    for _ in range(5):
        rng.shuffle(recs)
        b, _ = build_edg(recs, demo_job.platform_root_pub, demo_job.issuer_registry)
        assert b.vertices == a.vertices and b.edges == a.edges
        assert export_dot(a) == export_dot(b)


def test_faithful_edg_shape(faithful_run, demo_job):
    edg, rejected = build_edg(faithful_run.store.snapshot(), demo_job.platform_root_pub, demo_job.issuer_registry)
    assert not rejected
    st = edg.stats()
    assert st["vertices"] == 30
    assert st["by_kind"] == {"aggregate": 3, "dp": 12, "model_update": 3, "train": 12}
    # train->dp (12), dp->agg (12), agg->update (3), update->next update (2), update->next-round train (8)
    assert st["edges"] == 37


def test_empty_store_fails_claims_2_to_5(demo_job):
    report = audit([], demo_job)
    assert report.verdict(1).passed
    for n in (2, 3, 4, 5):
        v = report.verdict(n)
        assert not v.passed and "missing vertices" in v.evidence[0]["reason"]


def test_garbage_lines_rejected_not_fatal(faithful_run, demo_job):
    recs = [e.to_json() for e in faithful_run.store.snapshot()] + ["not json", "{}", json.dumps([1, 2])]
    report = audit(recs, demo_job)
    assert len(report.rejected) == 3
    assert report.passed


def test_wrong_issuer_rejected(faithful_run, demo_job):
    e = faithful_run.store.snapshot()[0]
    pid = e.edr.participant_id
    other = next(p for p in demo_job.provider_ids if p != pid)
    # record signed by another registered participant's key under that participant's id
    sig = crypto.sign(demo_job.issuer_key(other), issuer_message(e.digest))
    swapped = replace(e, issuer_id=other, issuer_sig=sig)
    edg, rejected = build_edg([swapped], demo_job.platform_root_pub, demo_job.issuer_registry)
    assert not edg.vertices and len(rejected) == 1
    assert "different participant" in rejected[0].reason


def test_claim1_names_offender(faithful_run, demo_job):
    policy = AuditPolicy.from_job(demo_job)
    edg, _ = build_edg(faithful_run.store.snapshot(), demo_job.platform_root_pub, demo_job.issuer_registry)
    assert check_claim1(edg, policy).passed
    strict = replace(policy, code_allowlist={k: frozenset() for k in policy.code_allowlist})
    v = check_claim1(edg, strict)
    assert len(v.evidence) == 30 and v.blamed == set(demo_job.provider_ids) | {demo_job.model_provider_id}


def test_claims_pass_on_faithful(faithful_run, demo_job):
    policy = AuditPolicy.from_job(demo_job)
    edg, _ = build_edg(faithful_run.store.snapshot(), demo_job.platform_root_pub, demo_job.issuer_registry)
    for check in (check_claim1, check_claim2, check_claim3, check_claim4, check_claim5):
        assert check(edg, policy).passed


def test_claim2_initial_model_only_at_round_zero(faithful_run, demo_job):
    policy = AuditPolicy.from_job(demo_job)
    edg, _ = build_edg(faithful_run.store.snapshot(), demo_job.platform_root_pub, demo_job.issuer_registry)
    # drop round 0's model update: round-1 trains now consume an unproduced global model
    keep = {k: v for k, v in edg.vertices.items() if not (v.task_kind == "model_update" and v.round == 0)}
    sub = EDG(keep, indexed_edges(keep))
    v = check_claim2(sub, policy)
    assert not v.passed
    assert not check_claim3(sub, policy).passed  # missing model-update slot


def test_claim4_detects_mid_run_change(faithful_run, demo_job):
    policy = AuditPolicy.from_job(demo_job)
    edg, _ = build_edg(faithful_run.store.snapshot(), demo_job.platform_root_pub, demo_job.issuer_registry)
    vs = dict(edg.vertices)
    vid, x = next((k, v) for k, v in vs.items() if v.task_kind == "train" and v.round == 2)
    vs[vid] = replace(x, inputs=dict(x.inputs, **{"dataset:commitment": b"\x44" * 32}))
    v = check_claim4(EDG(vs, indexed_edges(vs)), policy)
    assert not v.passed and v.blamed == {x.participant_id}
    assert "changed between round 0" in v.evidence[0]["reason"]


def test_claim5_vacuous_without_sanitization(faithful_run, demo_job):
    policy = AuditPolicy.from_job(demo_job)
    assert not policy.sanitization_required
    edg, _ = build_edg(faithful_run.store.snapshot(), demo_job.platform_root_pub, demo_job.issuer_registry)
    assert check_claim5(edg, policy).passed


def test_report_json_shape(faithful_run, demo_job):
    d = json.loads(audit(faithful_run.store.snapshot(), demo_job).to_json())
    assert [c["id"] for c in d["claims"]] == [1, 2, 3, 4, 5]
    assert all(c["status"] == "pass" for c in d["claims"])
    assert d["rejected_records"] == 0 and d["edg_stats"]["vertices"] == 30


def test_dot_export(faithful_run, demo_job):
    edg, _ = build_edg(faithful_run.store.snapshot(), demo_job.platform_root_pub, demo_job.issuer_registry)
    dot = export_dot(edg)
    assert dot.startswith("digraph EDG {") and dot.rstrip().endswith("}")
    assert dot.count(" -> ") == len(edg.edges)
    assert "model:agg_diff" in dot and "train\\nr0\\nprovider1" in dot


@pytest.mark.parametrize("builder", [naive_edges, indexed_edges])
def test_builders_through_build_edg(builder, faithful_run, demo_job):
    edg, _ = build_edg(faithful_run.store.snapshot(), demo_job.platform_root_pub, demo_job.issuer_registry, edge_builder=builder)
    assert len(edg.edges) == 37
