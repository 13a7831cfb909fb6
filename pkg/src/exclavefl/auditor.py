"""Audit of a job's records: build the exclave dataflow graph, check five claims.

Vertices are the records that verify. An edge joins producer ``x`` to consumer
``y`` when some ``(label, digest)`` pair is both an output of ``x`` and an
input of ``y`` and the rounds are compatible (``y.round`` is ``x.round`` or
``x.round + 1``). The edge label is the set of shared pairs.

Claims:
  1. every vertex ran allowlisted code for its task kind
  2. every model input has a producer (nothing was altered in transit)
  3. the per-round shape is train -> dp -> aggregate(all providers) -> model_update
  4. each provider trained on one constant, registered dataset
  5. each provider trained on a dataset its sanitizer produced
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

from .crypto import Digest, to_hex
from .edr import EDR, EndorsedEDR, edr_digest, edr_verify
from .exclave import AGG_LABEL, DATASET_LABEL, DIFF_PREFIX, GLOBAL_LABEL
from .job import JobDescription

EdgeMap = dict[tuple[str, str], frozenset]

CLAIM_NAMES = {
    1: "correct code",
    2: "transit integrity",
    3: "pipeline shape",
    4: "dataset integrity",
    5: "dataset sanitization",
}


# -- graph -----------------------------------------------------------------


def rounds_compatible(producer: EDR, consumer: EDR) -> bool:
    return consumer.round in (producer.round, producer.round + 1)


def naive_edges(vertices: Mapping[str, EDR]) -> EdgeMap:
    """Pairwise scan over all vertex pairs."""
    edges: EdgeMap = {}
    for vy, y in vertices.items():
        y_in = set(y.inputs.items())
        for vx, x in vertices.items():
            if vx == vy or not rounds_compatible(x, y):
                continue
            shared = y_in.intersection(x.outputs.items())
            if shared:
                edges[(vx, vy)] = frozenset(shared)
    return edges


def indexed_edges(vertices: Mapping[str, EDR]) -> EdgeMap:
    """Same result as :func:`naive_edges`, via a (label, digest) -> producers index."""
    producers: dict[tuple[str, Digest], list[str]] = defaultdict(list)
    for vx, x in vertices.items():
        for item in x.outputs.items():
            producers[item].append(vx)
    found: dict[tuple[str, str], set] = defaultdict(set)
    for vy, y in vertices.items():
        for item in y.inputs.items():
            for vx in producers.get(item, ()):
                if vx != vy and rounds_compatible(vertices[vx], y):
                    found[(vx, vy)].add(item)
    return {k: frozenset(v) for k, v in found.items()}


@dataclass
class EDG:
    vertices: dict[str, EDR]
    edges: EdgeMap

    def __post_init__(self):
        self._incoming: dict[str, dict[tuple[str, Digest], list[str]]] = defaultdict(lambda: defaultdict(list))
        for (px, cy), label in self.edges.items():
            for item in label:
                self._incoming[cy][item].append(px)
        self._by_slot: dict[tuple[str, str, int], list[str]] = defaultdict(list)
        for vid, v in self.vertices.items():
            self._by_slot[(v.task_kind, v.participant_id, v.round)].append(vid)

    def suppliers(self, vid: str, item: tuple[str, Digest]) -> list[str]:
        return sorted(self._incoming.get(vid, {}).get(item, []))

    def slot(self, kind: str, pid: str, rnd: int) -> list[str]:
        return sorted(self._by_slot.get((kind, pid, rnd), []))

    def of_kind(self, kind: str) -> list[str]:
        return sorted(vid for vid, v in self.vertices.items() if v.task_kind == kind)

    def describe(self, vid: str) -> str:
        v = self.vertices[vid]
        return f"{v.task_kind}/{v.participant_id}/r{v.round}#{vid[:12]}"

    def stats(self) -> dict:
        kinds: dict[str, int] = defaultdict(int)
        for v in self.vertices.values():
            kinds[v.task_kind] += 1
        return {"vertices": len(self.vertices), "edges": len(self.edges), "by_kind": dict(sorted(kinds.items()))}


@dataclass(frozen=True)
class Rejected:
    reason: str
    issuer_id: Optional[str] = None
    exclave_id: Optional[str] = None
    task_kind: Optional[str] = None
    round: Optional[int] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def _parse(rec) -> Union[EndorsedEDR, Rejected]:
    if isinstance(rec, EndorsedEDR):
        return rec
    try:
        return EndorsedEDR.from_json(rec)
    except Exception as e:  # malformed lines are rejected, never fatal
        return Rejected(f"unparseable record: {type(e).__name__}")


def build_edg(
    records: Iterable[Union[EndorsedEDR, str]],
    platform_root_pub: bytes,
    issuer_registry: Mapping[str, bytes],
    edge_builder=indexed_edges,
) -> tuple[EDG, list[Rejected]]:
    vertices: dict[str, EDR] = {}
    rejected: list[Rejected] = []
    for rec in records:
        e = _parse(rec)
        if isinstance(e, Rejected):
            rejected.append(e)
            continue
        meta = dict(issuer_id=e.issuer_id, exclave_id=e.edr.exclave_id, task_kind=e.edr.task_kind, round=e.edr.round)
        if not edr_verify(e, platform_root_pub, issuer_registry):
            rejected.append(Rejected("attestation or endorsement invalid", **meta))
        elif e.issuer_id != e.edr.participant_id:
            rejected.append(Rejected("endorsed by a different participant than the executor", **meta))
        else:
            vertices[to_hex(edr_digest(e.edr))] = e.edr
    rejected.sort(key=lambda r: json.dumps(r.to_dict(), sort_keys=True))
    vertices = dict(sorted(vertices.items()))
    return EDG(vertices, edge_builder(vertices)), rejected


# -- policy and verdicts ---------------------------------------------------


@dataclass(frozen=True)
class AuditPolicy:
    code_allowlist: Mapping[str, frozenset]
    sanitization_required: bool
    providers: tuple[str, ...]
    model_provider: str
    rounds: int
    registered: Mapping[str, Digest]
    initial_model: Digest

    @classmethod
    def from_job(cls, job: JobDescription) -> "AuditPolicy":
        return cls(
            code_allowlist={k: frozenset(v) for k, v in job.code_allowlist.items()},
            sanitization_required=job.sanitization_required,
            providers=tuple(job.provider_ids),
            model_provider=job.model_provider_id,
            rounds=job.rounds,
            registered={p.participant_id: p.commitment for p in job.providers},
            initial_model=job.initial_model_digest(),
        )

    def expected_producer(self, label: str) -> str:
        if label.startswith(DIFF_PREFIX):
            return label[len(DIFF_PREFIX):]
        return self.model_provider


@dataclass
class ClaimVerdict:
    claim: int
    evidence: list[dict] = field(default_factory=list)
    blamed: set = field(default_factory=set)

    @property
    def status(self) -> str:
        return "fail" if self.evidence else "pass"

    @property
    def passed(self) -> bool:
        return not self.evidence

    def flag(self, reason: str, blame: Iterable[str] = (), vertex: Optional[str] = None, edge=None) -> None:
        item = {"reason": reason}
        if vertex is not None:
            item["vertex"] = vertex
        if edge is not None:
            item["edge"] = edge
        self.evidence.append(item)
        self.blamed.update(blame)

    def to_dict(self) -> dict:
        return {
            "id": self.claim,
            "name": CLAIM_NAMES[self.claim],
            "status": self.status,
            "evidence": self.evidence,
            "blamed": sorted(self.blamed),
        }


def _missing_vertices(v: ClaimVerdict, edg: EDG) -> bool:
    if edg.vertices:
        return False
    v.flag("missing vertices: no verified records")
    return True


def check_claim1(edg: EDG, policy: AuditPolicy) -> ClaimVerdict:
    v = ClaimVerdict(1)
    for vid, x in edg.vertices.items():
        if x.code not in policy.code_allowlist.get(x.task_kind, ()):
            v.flag(
                f"code {to_hex(x.code)[:16]} is not allowlisted for {x.task_kind}",
                [x.participant_id],
                vertex=edg.describe(vid),
            )
    return v


def _initial_ok(policy: AuditPolicy, x: EDR, name: str, digest: Digest) -> bool:
    return name == GLOBAL_LABEL and x.round == 0 and digest == policy.initial_model


def check_claim2(edg: EDG, policy: AuditPolicy) -> ClaimVerdict:
    v = ClaimVerdict(2)
    if _missing_vertices(v, edg):
        return v
    for vid, x in edg.vertices.items():
        for name, digest in x.inputs.items():
            if not name.startswith("model:"):
                continue
            if edg.suppliers(vid, (name, digest)) or _initial_ok(policy, x, name, digest):
                continue
            src = policy.expected_producer(name)
            v.flag(
                f"input {name} of {edg.describe(vid)} has no producing record; altered in transit between {src} and {x.participant_id}",
                [src, x.participant_id],
                vertex=edg.describe(vid),
                edge={"producer": src, "consumer": edg.describe(vid), "label": name},
            )
    return v


def _supplied_by(edg: EDG, vid: str, name: str, kind: str, pid: str, rnd: int) -> Optional[bool]:
    """None if the input is dangling (left to claim 2); else whether an expected vertex supplies it."""
    x = edg.vertices[vid]
    sup = edg.suppliers(vid, (name, x.inputs[name]))
    if not sup:
        return None
    return any(
        edg.vertices[s].task_kind == kind and edg.vertices[s].participant_id == pid and edg.vertices[s].round == rnd
        for s in sup
    )


def check_claim3(edg: EDG, policy: AuditPolicy) -> ClaimVerdict:
    v = ClaimVerdict(3)
    if _missing_vertices(v, edg):
        return v
    mp = policy.model_provider
    expected = set(policy.providers)
    for r in range(policy.rounds):
        for p in policy.providers:
            for kind in ("train", "dp"):
                n = len(edg.slot(kind, p, r))
                if n != 1:
                    v.flag(f"expected one {kind} vertex for {p} in round {r}, found {n}", [p])
            for vid in edg.slot("dp", p, r):
                name = DIFF_PREFIX + p
                if name not in edg.vertices[vid].inputs:
                    v.flag(f"dp vertex lacks input {name}", [p], vertex=edg.describe(vid))
                elif _supplied_by(edg, vid, name, "train", p, r) is False:
                    v.flag(f"dp input {name} does not come from {p}'s round-{r} training", [p], vertex=edg.describe(vid))
            for vid in edg.slot("train", p, r):
                x = edg.vertices[vid]
                if GLOBAL_LABEL not in x.inputs:
                    v.flag("train vertex lacks the global model input", [p], vertex=edg.describe(vid))
                elif r > 0 and _supplied_by(edg, vid, GLOBAL_LABEL, "model_update", mp, r - 1) is False:
                    v.flag(f"global model for round {r} does not come from round {r - 1}'s model update", [mp], vertex=edg.describe(vid))

        aggs = edg.slot("aggregate", mp, r)
        if len(aggs) != 1:
            v.flag(f"expected one aggregation vertex in round {r}, found {len(aggs)}", [mp])
        for vid in aggs:
            agg = edg.vertices[vid]
            got = {name[len(DIFF_PREFIX):] for name in agg.inputs if name.startswith(DIFF_PREFIX)}
            if got != expected:
                missing, extra = sorted(expected - got), sorted(got - expected)
                v.flag(
                    f"aggregation in round {r} consumed {len(got)} of {len(expected)} provider updates"
                    + (f"; missing {', '.join(missing)}" if missing else "")
                    + (f"; unexpected {', '.join(extra)}" if extra else ""),
                    [mp],
                    vertex=edg.describe(vid),
                )
            for p in sorted(got & expected):
                if _supplied_by(edg, vid, DIFF_PREFIX + p, "dp", p, r) is False:
                    src = [edg.describe(s) for s in edg.suppliers(vid, (DIFF_PREFIX + p, agg.inputs[DIFF_PREFIX + p]))]
                    v.flag(
                        f"update of {p} reached aggregation without passing its round-{r} dp task (from {', '.join(src)})",
                        [p],
                        vertex=edg.describe(vid),
                    )

        mus = edg.slot("model_update", mp, r)
        if len(mus) != 1:
            v.flag(f"expected one model-update vertex in round {r}, found {len(mus)}", [mp])
        for vid in mus:
            x = edg.vertices[vid]
            if AGG_LABEL not in x.inputs or GLOBAL_LABEL not in x.inputs:
                v.flag("model update lacks aggregated diff or previous global model", [mp], vertex=edg.describe(vid))
                continue
            if _supplied_by(edg, vid, AGG_LABEL, "aggregate", mp, r) is False:
                v.flag(f"model update in round {r} does not consume round-{r} aggregation", [mp], vertex=edg.describe(vid))
            if r > 0 and _supplied_by(edg, vid, GLOBAL_LABEL, "model_update", mp, r - 1) is False:
                v.flag(f"model update in round {r} does not build on round {r - 1}", [mp], vertex=edg.describe(vid))
    return v


def _sanitizer_outputs(edg: EDG, policy: AuditPolicy, pid: str) -> set:
    outs = set()
    for vid in edg.of_kind("sanitize"):
        x = edg.vertices[vid]
        if x.participant_id == pid and DATASET_LABEL in x.outputs:
            outs.add(x.outputs[DATASET_LABEL])
    return outs


def check_claim4(edg: EDG, policy: AuditPolicy) -> ClaimVerdict:
    v = ClaimVerdict(4)
    if _missing_vertices(v, edg):
        return v
    for p in policy.providers:
        trains = sorted(
            (edg.vertices[vid].round, vid) for vid in edg.of_kind("train") if edg.vertices[vid].participant_id == p
        )
        if not trains:
            v.flag(f"missing vertices: no training records for {p}", [p])
            continue
        allowed = {policy.registered[p]} | _sanitizer_outputs(edg, policy, p)
        first = None
        for rnd, vid in trains:
            c = edg.vertices[vid].inputs.get(DATASET_LABEL)
            if c is None:
                v.flag("training record carries no dataset commitment", [p], vertex=edg.describe(vid))
                continue
            if first is None:
                first = (rnd, c)
                if c not in allowed:
                    v.flag(f"round {rnd} dataset {to_hex(c)[:16]} is not the registered commitment", [p], vertex=edg.describe(vid))
            elif c != first[1]:
                v.flag(
                    f"dataset commitment changed between round {first[0]} ({to_hex(first[1])[:16]}) and round {rnd} ({to_hex(c)[:16]})",
                    [p],
                    vertex=edg.describe(vid),
                )
    return v


def check_claim5(edg: EDG, policy: AuditPolicy) -> ClaimVerdict:
    v = ClaimVerdict(5)
    if _missing_vertices(v, edg) or not policy.sanitization_required:
        return v
    for p in policy.providers:
        sans = [vid for vid in edg.of_kind("sanitize") if edg.vertices[vid].participant_id == p]
        if not sans:
            v.flag(f"missing vertices: no sanitization record for {p}", [p])
        for vid in sans:
            if edg.vertices[vid].inputs.get(DATASET_LABEL) != policy.registered[p]:
                v.flag(f"{p} sanitized a dataset other than the registered one", [p], vertex=edg.describe(vid))
        outs = _sanitizer_outputs(edg, policy, p)
        for vid in edg.of_kind("train"):
            x = edg.vertices[vid]
            if x.participant_id == p and x.inputs.get(DATASET_LABEL) not in outs:
                c = x.inputs.get(DATASET_LABEL)
                v.flag(
                    f"round {x.round} training dataset {to_hex(c)[:16] if c else 'none'} was not produced by {p}'s sanitizer",
                    [p],
                    vertex=edg.describe(vid),
                )
    return v


CHECKS = (check_claim1, check_claim2, check_claim3, check_claim4, check_claim5)


@dataclass
class AuditReport:
    claims: list[ClaimVerdict]
    rejected: list[Rejected]
    edg_stats: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.claims)

    def failed_claims(self) -> set[int]:
        return {c.claim for c in self.claims if not c.passed}

    def verdict(self, claim: int) -> ClaimVerdict:
        return self.claims[claim - 1]

    def to_dict(self) -> dict:
        return {
            "claims": [c.to_dict() for c in self.claims],
            "rejected_records": len(self.rejected),
            "rejected": [r.to_dict() for r in self.rejected],
            "edg_stats": self.edg_stats,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def audit(records: Sequence[Union[EndorsedEDR, str]], job: JobDescription) -> AuditReport:
    policy = AuditPolicy.from_job(job)
    edg, rejected = build_edg(records, job.platform_root_pub, job.issuer_registry)
    return AuditReport([check(edg, policy) for check in CHECKS], rejected, edg.stats())


# -- rendering -------------------------------------------------------------


def _q(s: str) -> str:
    # backslashes are kept: "\\n" is the DOT line break inside labels
    return '"' + s.replace('"', '\\"') + '"'


def export_dot(edg: EDG) -> str:
    """Graphviz text; edges point from consumer to producer (reverse dataflow)."""
    lines = ["digraph EDG {"]
    for vid, v in edg.vertices.items():
        label = "\\n".join((v.task_kind, f"r{v.round}", v.participant_id))
        lines.append(f"  {_q(vid)} [label={_q(label)}];")
    for (px, cy), shared in sorted(edg.edges.items()):
        names = "\\n".join(sorted({name for name, _ in shared}))
        lines.append(f"  {_q(cy)} -> {_q(px)} [label={_q(names)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
