"""Shared builders for the orchestrator, auditor and acceptance tests."""

import random

from exclavefl.auditor import AuditReport
from exclavefl.deviations import DeviationScript, Injection

# deviation kind -> claims that must fail (and no others)
EXPECTED_CLAIMS = {
    "forge_edr": {2, 3},
    "transit_tamper": {2},
    "skip_dp": {3},
    "drop_update": {3},
    "dataset_swap": {4},
    "skip_sanitization": {5},
    "code_tamper": {1},
}


def injection_for(kind: str, job, rng: random.Random) -> Injection:
    target = rng.choice(job.provider_ids)
    rnd = rng.randrange(job.rounds)
    details = {}
    if kind == "code_tamper":
        if rng.random() < 0.3:
            target = job.model_provider_id
            details["task_kind"] = rng.choice(["aggregate", "model_update"])
        else:
            details["task_kind"] = rng.choice(["train", "dp"])
    elif kind == "transit_tamper":
        details["stage"] = rng.choice(["aggregate", "train"])
    elif kind == "skip_sanitization":
        rnd = 0  # later rounds would also change the commitment mid-run (claim 4)
    return Injection(kind, target, rnd, details)


def script(*injections) -> DeviationScript:
    return DeviationScript(list(injections))


def names_target(report: AuditReport, claims, target: str) -> bool:
    """Some failing verdict among ``claims`` blames or mentions ``target``."""
    for n in claims:
        v = report.verdict(n)
        if target in v.blamed or any(target in e["reason"] for e in v.evidence):
            return True
    return False
