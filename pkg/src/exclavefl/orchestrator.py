"""Untrusted FL driver: runs the job round by round through exclave connectors.

The orchestrator never signs anything. Everything it does is visible to the
auditor only through the EDRs the exclaves emit, which is why it doubles as
the deviation-injection harness.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import crypto, tasks
from .deviations import DeviationScript, Injection, Step, applies, apply_deviation
from .edr import SANITIZE_ROUND, EDRStore
from .exclave import (
    AGG_LABEL,
    DATASET_LABEL,
    GLOBAL_LABEL,
    Exclave,
    ExclaveConfig,
    TaskRequest,
    TaskResponse,
    diff_label,
    params_label,
)
from .job import MODEL_PROVIDER_KINDS, JobDescription, registered_commitment
from .storage import DataCommitment, DatasetImage, load_image, mount_dataset, pack_dataset

log = logging.getLogger(__name__)


class JobFailed(RuntimeError):
    pass


class ExclaveConnector:
    """The orchestrator's handle on one exclave."""

    def __init__(self, exclave: Exclave):
        self.exclave = exclave

    def invoke(self, request: TaskRequest) -> TaskResponse:
        return self.exclave.handle_task(request)


def invoke_exclave(connector: ExclaveConnector, request: TaskRequest) -> TaskResponse:
    return connector.invoke(request)


@dataclass
class RunResult:
    final_model: np.ndarray
    store: EDRStore

    @property
    def final_model_bytes(self) -> bytes:
        return tasks.model_to_bytes(self.final_model)


class Orchestrator:
    def __init__(
        self,
        job: JobDescription,
        deviations: Optional[DeviationScript] = None,
        store: Optional[EDRStore] = None,
        parallel: bool = False,
        trace: Optional[Callable[[TaskRequest, TaskResponse], None]] = None,
    ):
        self.job = job
        self.deviations = deviations or DeviationScript()
        self.deviations.validate(set(job.provider_ids) | {job.model_provider_id})
        self.store = store if store is not None else EDRStore()
        self.parallel = parallel
        self.trace = trace
        self.platform = job.platform_key()
        self.connectors: dict[tuple[str, str], ExclaveConnector] = {}
        self.raw_images: dict[str, tuple[DatasetImage, DataCommitment]] = {}
        self.train_images: dict[str, tuple[DatasetImage, DataCommitment]] = {}

    # -- helpers used by the deviation harness ---------------------------

    def issuer_key(self, pid: str) -> crypto.KeyPair:
        return self.job.issuer_key(pid)

    def raw_dataset(self, pid: str) -> tuple[DatasetImage, DataCommitment]:
        return self.raw_images[pid]

    def swapped_dataset(self, inj: Injection) -> tuple[DatasetImage, DataCommitment]:
        """A second image for ``inj.target``: given path, or labels of a tenth of rows flipped."""
        path = inj.detail("dataset")
        if path:
            image = load_image(self.job.base_dir / path)
            return image, image.commitment
        image, commitment = self.train_images[inj.target]
        h = mount_dataset(image, commitment)
        rows, texts = h.read_all()
        rows = rows.copy()
        rows[: max(1, len(rows) // 10), -1] *= -1.0
        return pack_dataset(rows, image.salt, texts=texts if h.text_width else None, text_width=h.text_width)

    # -- exclaves --------------------------------------------------------

    def _launch(self, pid: str, kind: str, tampered: Optional[Injection] = None) -> None:
        image = tasks.code_image(kind)
        if tampered is not None:
            b = bytearray(image)
            b[int(tampered.detail("offset", 0)) % len(b)] ^= 0x01
            image = bytes(b)
        eid = f"{pid}/{kind}"
        cfg = ExclaveConfig(eid, pid, kind, image, self.job.issuer_key(pid), self.platform, self.job.attestation_seed(eid))
        self.connectors[(pid, kind)] = ExclaveConnector(Exclave(cfg))

    def _code_tamper_for(self, pid: str, kind: str, rnd: int) -> Optional[Injection]:
        for inj in self.deviations.of_kind("code_tamper"):
            default_kind = "aggregate" if pid == self.job.model_provider_id else "train"
            if inj.target == pid and inj.detail("task_kind", default_kind) == kind and inj.round == rnd:
                return inj
        return None

    def launch_all(self) -> None:
        job = self.job
        for kind in job.pipeline:
            owners = [job.model_provider_id] if kind in MODEL_PROVIDER_KINDS else job.provider_ids
            for pid in owners:
                # injections scheduled for round <= 0 take effect at launch
                inj = next((i for r in (SANITIZE_ROUND, 0) if (i := self._code_tamper_for(pid, kind, r))), None)
                self._launch(pid, kind, inj)

    def _relaunch_tampered(self, rnd: int) -> None:
        if rnd <= 0:
            return
        for inj in self.deviations.of_kind("code_tamper"):
            if inj.round == rnd:
                default_kind = "aggregate" if inj.target == self.job.model_provider_id else "train"
                self._launch(inj.target, inj.detail("task_kind", default_kind), inj)

    # -- one step --------------------------------------------------------

    def _step(self, kind: str, pid: str, rnd: int, request: TaskRequest) -> Step:
        step = Step(kind, pid, rnd, request)
        for inj in self.deviations:
            if applies(inj, step, "request", diff_label):
                log.info("injecting %s into %s/%s round %d", inj.kind, pid, kind, rnd)
                apply_deviation(inj, step, self)
        if step.skip:
            return step
        try:
            step.response = invoke_exclave(self.connectors[(pid, kind)], step.request)
        except Exception as e:
            raise JobFailed(f"{pid}/{kind} round {rnd} failed: {e}") from e
        for inj in self.deviations:
            if applies(inj, step, "response", diff_label):
                log.info("injecting %s into %s/%s round %d", inj.kind, pid, kind, rnd)
                apply_deviation(inj, step, self)
        self.store.append(step.response.endorsed_edr)
        if self.trace is not None:
            self.trace(step.request, step.response)
        return step

    def _provider_branch(self, pid: str, rnd: int, global_bytes: bytes) -> bytes:
        job = self.job
        image, commitment = self.train_images[pid]
        req = TaskRequest(
            "train",
            rnd,
            {GLOBAL_LABEL: global_bytes, params_label("train"): job.train_params(pid, rnd).to_bytes()},
            dataset=image,
            expected_commitment=commitment,
        )
        diff = self._step("train", pid, rnd, req).response.payloads[diff_label(pid)]
        req = TaskRequest("dp", rnd, {diff_label(pid): diff, params_label("dp"): job.dp_params(pid, rnd).to_bytes()})
        step = self._step("dp", pid, rnd, req)
        if step.skip:
            return diff
        return step.response.payloads[diff_label(pid)]

    # -- the job ---------------------------------------------------------

    def run(self) -> RunResult:
        job = self.job
        self.launch_all()
        for pid in job.provider_ids:
            self.raw_images[pid] = (load_image(job.dataset_path(pid)), registered_commitment(job, pid))
            self.train_images[pid] = self.raw_images[pid]

        if job.sanitization_required:
            for pid in job.provider_ids:
                image, commitment = self.raw_images[pid]
                req = TaskRequest(
                    "sanitize",
                    SANITIZE_ROUND,
                    {params_label("sanitize"): job.sanitize_params(pid)},
                    dataset=image,
                    expected_commitment=commitment,
                    dataset_path=str(job.dataset_path(pid)),
                )
                resp = self._step("sanitize", pid, SANITIZE_ROUND, req).response
                clean = resp.storage[DATASET_LABEL]
                self.train_images[pid] = (clean, clean.commitment)

        global_bytes = tasks.model_to_bytes(job.initial_model())
        mp = job.model_provider_id
        for rnd in range(job.rounds):
            self._relaunch_tampered(rnd)
            if self.parallel:
                with ThreadPoolExecutor(max_workers=len(job.providers)) as pool:
                    futs = {pid: pool.submit(self._provider_branch, pid, rnd, global_bytes) for pid in job.provider_ids}
                    diffs = {pid: f.result() for pid, f in futs.items()}
            else:
                diffs = {pid: self._provider_branch(pid, rnd, global_bytes) for pid in job.provider_ids}

            req = TaskRequest("aggregate", rnd, {diff_label(pid): d for pid, d in diffs.items()})
            agg = self._step("aggregate", mp, rnd, req).response.payloads[AGG_LABEL]
            req = TaskRequest("model_update", rnd, {GLOBAL_LABEL: global_bytes, AGG_LABEL: agg})
            global_bytes = self._step("model_update", mp, rnd, req).response.payloads[GLOBAL_LABEL]
            log.info("round %d done", rnd)

        return RunResult(tasks.model_from_bytes(global_bytes), self.store)


def run_job(
    job: JobDescription,
    deviations: Optional[DeviationScript] = None,
    store_path: Optional[Union[str, os.PathLike]] = None,
    parallel: bool = False,
    trace: Optional[Callable[[TaskRequest, TaskResponse], None]] = None,
) -> RunResult:
    store = EDRStore(store_path)
    return Orchestrator(job, deviations, store, parallel=parallel, trace=trace).run()
