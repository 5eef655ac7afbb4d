"""Two-stage, two-branch reconstruction jobs.

A job standardizes its cutout to a square, runs an image-to-image stage,
lets an operator pick the control candidate, then runs a ControlNet
refinement stage seeded by that pick. Both stages fan out into parallel
with-LoRA / without-LoRA branches so the operator can compare them. The
state machine only ever moves along the declared transition graph, and a
stage-2 request can only carry a stage-1 output of the same job.
"""

from __future__ import annotations

import base64
import logging
import math
import random
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Optional

from .errors import (
    ConfigError,
    IllegalTransition,
    NotFoundError,
    ProtocolError,
    RequestError,
    TransportError,
)
from .gateway import InferenceGateway, InferenceRequest
from .imaging import load_image, save_png, standardize_square
from .prompts import SceneFacts, build_prompt, validate_facts
from .store import JobStore

logger = logging.getLogger(__name__)

BRANCH_WITH_LORA = "with_lora"
BRANCH_WITHOUT_LORA = "without_lora"
BRANCHES = (BRANCH_WITH_LORA, BRANCH_WITHOUT_LORA)

RECOMMENDED_CONDITIONING = (0.5, 0.65)
STRENGTH_WARN_AT = 0.8
GUIDANCE_REFERENCE = 3.5
GUIDANCE_WARN_DELTA = 1.5


class JobState(str, Enum):
    CREATED = "created"
    PREPROCESSED = "preprocessed"
    STAGE1_RUNNING = "stage1_running"
    STAGE1_REVIEW = "stage1_review"
    STAGE2_RUNNING = "stage2_running"
    STAGE2_REVIEW = "stage2_review"
    COMPLETED = "completed"
    FAILED = "failed"


TRANSITIONS: dict[JobState, tuple[JobState, ...]] = {
    JobState.CREATED: (JobState.PREPROCESSED, JobState.FAILED),
    JobState.PREPROCESSED: (JobState.STAGE1_RUNNING,),
    JobState.STAGE1_RUNNING: (JobState.STAGE1_REVIEW, JobState.FAILED),
    JobState.STAGE1_REVIEW: (JobState.STAGE2_RUNNING,),
    JobState.STAGE2_RUNNING: (JobState.STAGE2_REVIEW, JobState.FAILED),
    JobState.STAGE2_REVIEW: (JobState.COMPLETED,),
    JobState.FAILED: (JobState.CREATED, JobState.PREPROCESSED, JobState.STAGE1_REVIEW),
    JobState.COMPLETED: (),
}


def effective_noise_steps(strength: float, num_inference_steps: int) -> int:
    """floor(strength * steps): how many noise steps the input image absorbs.

    At strength 1.0 this equals the full schedule and the input is
    effectively ignored.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    if num_inference_steps < 1:
        raise ValueError(f"num_inference_steps must be >= 1, got {num_inference_steps}")
    return math.floor(strength * num_inference_steps)


@dataclass
class Stage1Config:
    strength: float = 0.75
    num_inference_steps: int = 80
    guidance_scale: float = 3.5
    num_images: int = 3
    seed: Optional[int] = None  # None -> fresh random seed per run
    target_side: int = 1024

    @property
    def seed_mode(self) -> str:
        return "random" if self.seed is None else "fixed"


@dataclass
class Stage2Config:
    conditioning_scale: float = 0.5
    num_inference_steps: int = 35
    guidance_scale: float = 3.5
    lora_scale: float = 0.9
    num_images: int = 3
    seed: Optional[int] = None

    @property
    def seed_mode(self) -> str:
        return "random" if self.seed is None else "fixed"


@dataclass
class ConfigReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return {"ok": self.ok, "errors": self.errors, "warnings": self.warnings}


def validate_configs(stage1: Stage1Config, stage2: Stage2Config) -> ConfigReport:
    """Hard range checks plus in-band recommendations from the tuning runs."""
    report = ConfigReport()
    if not 0.0 <= stage1.strength <= 1.0:
        report.errors.append(f"stage1.strength {stage1.strength} outside [0, 1]")
    if not 0.0 <= stage2.conditioning_scale <= 1.0:
        report.errors.append(f"stage2.conditioning_scale {stage2.conditioning_scale} outside [0, 1]")
    if not 0.0 <= stage2.lora_scale <= 1.0:
        report.errors.append(f"stage2.lora_scale {stage2.lora_scale} outside [0, 1]")
    for name, value in (
        ("stage1.num_inference_steps", stage1.num_inference_steps),
        ("stage1.num_images", stage1.num_images),
        ("stage1.target_side", stage1.target_side),
        ("stage2.num_inference_steps", stage2.num_inference_steps),
        ("stage2.num_images", stage2.num_images),
    ):
        if value < 1:
            report.errors.append(f"{name} must be >= 1, got {value}")
    if report.ok and stage1.strength >= STRENGTH_WARN_AT:
        report.warnings.append(
            f"stage1.strength {stage1.strength} >= {STRENGTH_WARN_AT}: high creativity, "
            "output may deviate from the source structure"
        )
    lo, hi = RECOMMENDED_CONDITIONING
    if report.ok and not lo <= stage2.conditioning_scale <= hi:
        report.warnings.append(
            f"stage2.conditioning_scale {stage2.conditioning_scale} outside the recommended [{lo}, {hi}] band"
        )
    for name, value in (("stage1", stage1.guidance_scale), ("stage2", stage2.guidance_scale)):
        if abs(value - GUIDANCE_REFERENCE) > GUIDANCE_WARN_DELTA:
            report.warnings.append(
                f"{name}.guidance_scale {value} far from the tuned {GUIDANCE_REFERENCE}"
            )
    return report


@dataclass
class CandidateRef:
    stage: int
    branch: str
    index: int
    hash: str
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateRef":
        return cls(
            stage=int(d["stage"]),
            branch=str(d["branch"]),
            index=int(d["index"]),
            hash=str(d["hash"]),
            seed=int(d["seed"]),
        )


def _canonical_branches(branches) -> tuple[str, ...]:
    chosen = tuple(b for b in BRANCHES if b in set(branches))
    if not chosen:
        raise ConfigError(f"branch set must contain at least one of {BRANCHES}")
    unknown = set(branches) - set(BRANCHES)
    if unknown:
        raise ConfigError(f"unknown branches {sorted(unknown)}")
    return chosen


@dataclass
class ReconstructionJob:
    id: str
    source_ref: str
    facts: SceneFacts
    prompt: str
    stage1: Stage1Config
    stage2: Stage2Config
    branches: dict[str, tuple[str, ...]]
    state: JobState = JobState.CREATED
    candidates: dict = field(default_factory=lambda: {"stage1": {}, "stage2": {}})
    selection: Optional[dict] = None
    control_ref: Optional[str] = None
    preprocessed_ref: Optional[str] = None
    archive_256_ref: Optional[str] = None
    state_log: list[dict] = field(default_factory=list)
    branch_errors: dict = field(default_factory=dict)
    error: Optional[dict] = None
    retry_target: Optional[str] = None
    notes: list[str] = field(default_factory=list)
    parent_id: Optional[str] = None
    created_at: float = 0.0
    updated_at: float = 0.0

    def stage_candidates(self, stage: int) -> dict[str, list[CandidateRef]]:
        return self.candidates[f"stage{stage}"]

    def all_candidate_hashes(self, stage: int) -> set[str]:
        return {c.hash for refs in self.stage_candidates(stage).values() for c in refs}

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "source_ref": self.source_ref,
            "facts": self.facts.to_dict(),
            "prompt": self.prompt,
            "stage1": asdict(self.stage1),
            "stage2": asdict(self.stage2),
            "branches": {k: list(v) for k, v in self.branches.items()},
            "state": self.state.value,
            "candidates": {
                stage: {branch: [c.to_dict() for c in refs] for branch, refs in by_branch.items()}
                for stage, by_branch in self.candidates.items()
            },
            "selection": self.selection,
            "control_ref": self.control_ref,
            "preprocessed_ref": self.preprocessed_ref,
            "archive_256_ref": self.archive_256_ref,
            "state_log": self.state_log,
            "branch_errors": self.branch_errors,
            "error": self.error,
            "retry_target": self.retry_target,
            "notes": self.notes,
            "parent_id": self.parent_id,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReconstructionJob":
        from .prompts import facts_from_dict

        return cls(
            id=d["id"],
            source_ref=d["source_ref"],
            facts=facts_from_dict(d["facts"]),
            prompt=d["prompt"],
            stage1=Stage1Config(**d["stage1"]),
            stage2=Stage2Config(**d["stage2"]),
            branches={k: tuple(v) for k, v in d["branches"].items()},
            state=JobState(d["state"]),
            candidates={
                stage: {
                    branch: [CandidateRef.from_dict(c) for c in refs]
                    for branch, refs in by_branch.items()
                }
                for stage, by_branch in d["candidates"].items()
            },
            selection=d.get("selection"),
            control_ref=d.get("control_ref"),
            preprocessed_ref=d.get("preprocessed_ref"),
            archive_256_ref=d.get("archive_256_ref"),
            state_log=list(d.get("state_log", [])),
            branch_errors=dict(d.get("branch_errors", {})),
            error=d.get("error"),
            retry_target=d.get("retry_target"),
            notes=list(d.get("notes", [])),
            parent_id=d.get("parent_id"),
            created_at=float(d.get("created_at", 0.0)),
            updated_at=float(d.get("updated_at", 0.0)),
        )


_BACKEND_ERRORS = (TransportError, RequestError, ProtocolError)


class PipelineEngine:
    """Serializes per-job state changes and fans stages out across branches."""

    def __init__(
        self,
        store: JobStore,
        gateway: InferenceGateway,
        backend_id: str,
        model_id: str = "flux-dev",
        controlnet_model_id: str = "flux-dev-controlnet-upscaler",
        lora_name: str = "football-lora",
        archive_256: bool = False,
        seed_source: Optional[Callable[[], int]] = None,
    ):
        self.store = store
        self.gateway = gateway
        self.backend_id = backend_id
        self.model_id = model_id
        self.controlnet_model_id = controlnet_model_id
        self.lora_name = lora_name
        self.archive_256 = archive_256
        self._draw_seed = seed_source or (lambda: random.SystemRandom().getrandbits(63))
        self._jobs: dict[str, ReconstructionJob] = {}
        self._locks: dict[str, threading.RLock] = {}  # reentrant: recover() retries under its own lock
        self._registry_lock = threading.Lock()
        self._listeners: list[Callable[[str, dict], None]] = []

    # -- plumbing --------------------------------------------------------------

    def add_listener(self, listener: Callable[[str, dict], None]) -> None:
        self._listeners.append(listener)

    def _emit(self, job: ReconstructionJob, event: dict) -> None:
        for listener in list(self._listeners):
            try:
                listener(job.id, event)
            except Exception:  # listener bugs must not corrupt job state
                logger.exception("event listener failed for job %s", job.id)

    def _lock_for(self, job_id: str) -> threading.RLock:
        with self._registry_lock:
            return self._locks.setdefault(job_id, threading.RLock())

    def get_job(self, job_id: str) -> ReconstructionJob:
        with self._registry_lock:
            job = self._jobs.get(job_id)
        if job is None:
            job = ReconstructionJob.from_dict(self.store.load_job(job_id))
            with self._registry_lock:
                self._jobs.setdefault(job_id, job)
        return job

    def list_jobs(self) -> list[ReconstructionJob]:
        return [self.get_job(record["id"]) for record in self.store.list_jobs()]

    def _persist(self, job: ReconstructionJob) -> None:
        job.updated_at = time.time()
        self.store.save_job(job.to_dict())

    def _transition(self, job: ReconstructionJob, to: JobState) -> None:
        if to not in TRANSITIONS[job.state]:
            raise IllegalTransition(f"job {job.id}: {job.state.value} -> {to.value} is not allowed")
        entry = {"seq": len(job.state_log), "from": job.state.value, "to": to.value}
        job.state = to
        job.state_log.append(entry)
        self._persist(job)
        self._emit(job, {"type": "state", **entry})

    # -- operations --------------------------------------------------------------

    def create_job(
        self,
        image_bytes: bytes,
        facts: SceneFacts,
        stage1: Optional[Stage1Config] = None,
        stage2: Optional[Stage2Config] = None,
        stage1_branches=None,
        stage2_branches=None,
        parent_id: Optional[str] = None,
    ) -> ReconstructionJob:
        """Validate inputs, precompute the prompt, store the source content-addressed."""
        load_image(image_bytes)  # DecodeError on bad input, before anything persists
        report = validate_facts(facts)
        if not report.ok:
            from .errors import ValidationError

            raise ValidationError([str(f) for f in report.findings])
        stage1 = stage1 or Stage1Config()
        stage2 = stage2 or Stage2Config()
        config_report = validate_configs(stage1, stage2)
        if not config_report.ok:
            raise ConfigError("; ".join(config_report.errors))
        branches = {
            # LoRA sometimes hurts the first stage, so it defaults to the plain
            # branch while stage 2 runs both for comparison.
            "stage1": _canonical_branches(
                (BRANCH_WITHOUT_LORA,) if stage1_branches is None else stage1_branches
            ),
            "stage2": _canonical_branches(BRANCHES if stage2_branches is None else stage2_branches),
        }
        job = ReconstructionJob(
            id=uuid.uuid4().hex,
            source_ref=self.store.put_blob(image_bytes),
            facts=facts,
            prompt=build_prompt(facts),
            stage1=stage1,
            stage2=stage2,
            branches=branches,
            notes=list(config_report.warnings),
            parent_id=parent_id,
            created_at=time.time(),
        )
        with self._registry_lock:
            self._jobs[job.id] = job
        self._persist(job)
        self._emit(job, {"type": "state", "seq": -1, "from": None, "to": job.state.value})
        return job

    def preprocess(self, job_id: str) -> ReconstructionJob:
        """Standardize the source to the stage-1 square; idempotent."""
        with self._lock_for(job_id):
            job = self.get_job(job_id)
            if job.state == JobState.PREPROCESSED and job.preprocessed_ref:
                return job
            if job.state != JobState.CREATED:
                raise IllegalTransition(
                    f"job {job.id}: preprocess requires state created, not {job.state.value}"
                )
            try:
                source = load_image(self.store.get_blob(job.source_ref))
                square = standardize_square(source, job.stage1.target_side)
                job.preprocessed_ref = self.store.put_blob(save_png(square))
                if self.archive_256:
                    job.archive_256_ref = self.store.put_blob(save_png(standardize_square(source, 256)))
            except Exception as exc:
                job.error = {"phase": "preprocess", "message": str(exc)}
                job.retry_target = JobState.CREATED.value
                self._transition(job, JobState.FAILED)
                raise
            self._transition(job, JobState.PREPROCESSED)
            return job

    def _seed_for(self, configured: Optional[int]) -> int:
        return configured if configured is not None else self._draw_seed()

    def _stage1_request(self, job: ReconstructionJob, branch: str, seed: int) -> InferenceRequest:
        side = job.stage1.target_side
        init_b64 = base64.b64encode(self.store.get_blob(job.preprocessed_ref)).decode("ascii")
        lora = {"name": self.lora_name, "scale": job.stage2.lora_scale} if branch == BRANCH_WITH_LORA else None
        return InferenceRequest(
            kind="img2img",
            model_id=self.model_id,
            prompt=job.prompt,
            num_inference_steps=job.stage1.num_inference_steps,
            guidance_scale=job.stage1.guidance_scale,
            seed=seed,
            num_images=job.stage1.num_images,
            width=side,
            height=side,
            init_image=init_b64,
            strength=job.stage1.strength,
            lora=lora,
        )

    def _stage2_request(self, job: ReconstructionJob, branch: str, seed: int, control_hash: str) -> InferenceRequest:
        side = job.stage1.target_side
        control_b64 = base64.b64encode(self.store.get_blob(control_hash)).decode("ascii")
        lora = {"name": self.lora_name, "scale": job.stage2.lora_scale} if branch == BRANCH_WITH_LORA else None
        return InferenceRequest(
            kind="controlnet",
            model_id=self.controlnet_model_id,
            prompt=job.prompt,  # stage 2 reuses the stage-1 prompt verbatim
            num_inference_steps=job.stage2.num_inference_steps,
            guidance_scale=job.stage2.guidance_scale,
            seed=seed,
            num_images=job.stage2.num_images,
            width=side,
            height=side,
            control_image=control_b64,
            conditioning_scale=job.stage2.conditioning_scale,
            lora=lora,
        )

    def _run_branches(
        self, job: ReconstructionJob, stage: int, build_request: Callable[[str, int], InferenceRequest]
    ) -> None:
        branches = job.branches[f"stage{stage}"]
        configured_seed = job.stage1.seed if stage == 1 else job.stage2.seed
        seeds = {branch: self._seed_for(configured_seed) for branch in branches}
        results: dict[str, list[CandidateRef]] = {}
        errors: dict[str, str] = {}

        def run_one(branch: str):
            request = build_request(branch, seeds[branch])
            outcome = self.gateway.run(request, self.backend_id)
            refs = []
            for index, png in enumerate(outcome.images):
                refs.append(
                    CandidateRef(
                        stage=stage,
                        branch=branch,
                        index=index,
                        hash=self.store.put_blob(png),
                        seed=outcome.seed_used,
                    )
                )
            return refs

        with ThreadPoolExecutor(max_workers=len(branches)) as pool:
            futures = {branch: pool.submit(run_one, branch) for branch in branches}
            for branch in branches:  # collect in canonical order
                try:
                    results[branch] = futures[branch].result()
                except _BACKEND_ERRORS as exc:
                    errors[branch] = str(exc)
                    logger.warning("job %s stage %d branch %s failed: %s", job.id, stage, branch, exc)
        if errors:
            job.branch_errors[f"stage{stage}"] = errors
        if not results:
            job.error = {"phase": f"stage{stage}", "message": "; ".join(errors.values())}
            job.retry_target = (
                JobState.PREPROCESSED.value if stage == 1 else JobState.STAGE1_REVIEW.value
            )
            self._transition(job, JobState.FAILED)
            raise TransportError(f"job {job.id}: all stage-{stage} branches failed")
        job.candidates[f"stage{stage}"] = results

    def run_stage1(self, job_id: str) -> ReconstructionJob:
        with self._lock_for(job_id):
            job = self.get_job(job_id)
            if job.state != JobState.PREPROCESSED:
                raise IllegalTransition(
                    f"job {job.id}: stage 1 requires state preprocessed, not {job.state.value}"
                )
            self._transition(job, JobState.STAGE1_RUNNING)
            self._run_branches(job, 1, lambda branch, seed: self._stage1_request(job, branch, seed))
            self._transition(job, JobState.STAGE1_REVIEW)
            return job

    def run_stage2(self, job_id: str, control_hash: Optional[str] = None) -> ReconstructionJob:
        """Refinement pass conditioned on a stage-1 output of this very job.

        Raw (non-stage-1) control images are refused: feeding the degraded
        frame straight into the refinement model is exactly the failure mode
        the two-stage ordering exists to avoid.
        """
        with self._lock_for(job_id):
            job = self.get_job(job_id)
            if job.state != JobState.STAGE1_REVIEW:
                raise IllegalTransition(
                    f"job {job.id}: stage 2 requires state stage1_review, not {job.state.value}"
                )
            if control_hash is None:
                control_hash = job.control_ref
            if control_hash is None:
                raise NotFoundError(f"job {job.id}: no control candidate given or selected")
            if control_hash not in job.all_candidate_hashes(1):
                raise NotFoundError(
                    f"job {job.id}: control image {control_hash[:12]} is not a stage-1 output "
                    "of this job; raw frames are refused as ControlNet inputs"
                )
            lo, hi = RECOMMENDED_CONDITIONING
            scale = job.stage2.conditioning_scale
            verdict = "inside" if lo <= scale <= hi else "outside"
            job.notes.append(f"conditioning_scale {scale} {verdict} recommended [{lo}, {hi}]")
            job.control_ref = control_hash
            self._transition(job, JobState.STAGE2_RUNNING)
            self._run_branches(
                job, 2, lambda branch, seed: self._stage2_request(job, branch, seed, control_hash)
            )
            self._transition(job, JobState.STAGE2_REVIEW)
            return job

    def select_candidate(self, job_id: str, stage: int, branch: str, candidate_hash: str) -> ReconstructionJob:
        with self._lock_for(job_id):
            job = self.get_job(job_id)
            if job.state == JobState.COMPLETED:
                raise IllegalTransition(f"job {job.id} is completed; its outcome is immutable")
            if stage not in (1, 2):
                raise ValueError(f"stage must be 1 or 2, got {stage}")
            refs = job.stage_candidates(stage).get(branch, [])
            match = next((c for c in refs if c.hash == candidate_hash), None)
            if match is None:
                raise NotFoundError(
                    f"job {job.id}: no stage-{stage} candidate {candidate_hash[:12]} in branch {branch}"
                )
            job.selection = {"stage": stage, "branch": branch, "candidate": candidate_hash}
            if stage == 1:
                job.control_ref = candidate_hash  # precursor for stage 2, no state change
                self._persist(job)
                self._emit(job, {"type": "selection", **job.selection})
            else:
                if job.state != JobState.STAGE2_REVIEW:
                    raise IllegalTransition(
                        f"job {job.id}: stage-2 selection requires stage2_review, not {job.state.value}"
                    )
                self._emit(job, {"type": "selection", **job.selection})
                self._transition(job, JobState.COMPLETED)
            return job

    def retry(self, job_id: str) -> ReconstructionJob:
        """Return a failed job to the ready state it fell from."""
        with self._lock_for(job_id):
            job = self.get_job(job_id)
            if job.state != JobState.FAILED or not job.retry_target:
                raise IllegalTransition(f"job {job.id}: retry requires a failed job")
            target = JobState(job.retry_target)
            job.error = None
            job.retry_target = None
            self._transition(job, target)
            return job

    def rerun(self, job_id: str) -> ReconstructionJob:
        """Child job with the same inputs; completed jobs stay immutable."""
        parent = self.get_job(job_id)
        return self.create_job(
            self.store.get_blob(parent.source_ref),
            parent.facts,
            stage1=Stage1Config(**asdict(parent.stage1)),
            stage2=Stage2Config(**asdict(parent.stage2)),
            stage1_branches=parent.branches["stage1"],
            stage2_branches=parent.branches["stage2"],
            parent_id=parent.id,
        )

    def recover(self) -> list[str]:
        """After a crash, park interrupted jobs as retryable. Returns their ids."""
        recovered = []
        for record in self.store.list_jobs():
            state = JobState(record["state"])
            if state not in (JobState.STAGE1_RUNNING, JobState.STAGE2_RUNNING):
                continue
            job = self.get_job(record["id"])
            with self._lock_for(job.id):
                job.error = {"phase": state.value, "message": "interrupted by shutdown"}
                job.retry_target = (
                    JobState.PREPROCESSED.value
                    if state == JobState.STAGE1_RUNNING
                    else JobState.STAGE1_REVIEW.value
                )
                self._transition(job, JobState.FAILED)
                self.retry(job.id)
                recovered.append(job.id)
        return recovered

    def live_refs(self) -> set[str]:
        """Every blob digest referenced by any job record (for gc)."""
        refs = set()
        for record in self.store.list_jobs():
            job = ReconstructionJob.from_dict(record)
            refs.update(
                r
                for r in (job.source_ref, job.preprocessed_ref, job.archive_256_ref, job.control_ref)
                if r
            )
            for stage in (1, 2):
                refs.update(job.all_candidate_hashes(stage))
        return refs
