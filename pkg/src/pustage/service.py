"""HTTP service wrapping the engine: review workflow plus single-image
staging.

The review API serves cases (image bytes, predicted stage, rationale)
from a completed run directory, records clinician judgments, and
aggregates statistics. All state changes go through POST; invariant
violations surface as 422 with a machine-readable reason. The optional
staging endpoint runs one uploaded image through a configured mode,
the same engine the CLI drives.
"""

from __future__ import annotations

import base64
import binascii
import json
import mimetypes
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Optional

from fastapi import Depends, FastAPI, Header, HTTPException, Response
from fastapi.responses import PlainTextResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .domain import StageLabel
from .harness import REFLECTION_MODES, CaseResult, Mode, RunConfig, load_case_results, stage_single_case
from .review import (
    DisagreementType,
    InvariantViolation,
    RationaleRating,
    ReviewEntry,
    ReviewStore,
    UnknownCaseError,
    aggregate,
)


class ReviewEntryIn(BaseModel):
    reviewer_id: str = Field(min_length=1)
    agrees_with_ground_truth: bool
    disagreement_type: Optional[str] = None
    rating: Optional[str] = None
    notes: str = ""


class SubmitOut(BaseModel):
    entry_id: int
    case_id: str


class CaseSummaryOut(BaseModel):
    case_id: str
    predicted_stage: Optional[str]
    true_stage: str
    reviewed: bool


class CaseDetailOut(BaseModel):
    case_id: str
    predicted_stage: Optional[str]
    true_stage: str
    rationale: str
    terminated_by: Optional[str]
    image_url: str
    reviewed: bool


class MetaOut(BaseModel):
    case_count: int
    blind_mode: bool
    staging_enabled: bool


class StageRequestIn(BaseModel):
    image_b64: str
    mime_type: str = "image/png"
    clinical_note: Optional[str] = None


class StageResponseOut(BaseModel):
    stage: Optional[str]
    rationale: str
    terminated_by: Optional[str]
    rounds: int
    total_latency_s: float


class ReviewServiceState:
    """Review store plus the run-directory case payloads it fronts."""

    def __init__(self, store: ReviewStore, cases: dict[str, CaseResult]):
        self.store = store
        self.cases = cases

    @classmethod
    def from_run_dir(
        cls, run_dir: Path, review_log: Optional[Path] = None
    ) -> "ReviewServiceState":
        results = load_case_results(run_dir)
        cases = {r.case_id: r for r in results}
        store = ReviewStore(
            case_stages={r.case_id: r.true_stage for r in results},
            log_path=review_log,
        )
        return cls(store=store, cases=cases)


def create_app(
    review: Optional[ReviewServiceState] = None,
    staging_config: Optional[RunConfig] = None,
    token: Optional[str] = None,
    blind_mode: bool = True,
    frontend_dir: Optional[Path] = None,
) -> FastAPI:
    app = FastAPI(title="pustage review service")

    def require_token(x_review_token: Optional[str] = Header(default=None)) -> None:
        if token and x_review_token != token:
            raise HTTPException(status_code=401, detail="missing or invalid token")

    guarded = [Depends(require_token)]

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.get("/meta", response_model=MetaOut, dependencies=guarded)
    def meta() -> MetaOut:
        return MetaOut(
            case_count=len(review.cases) if review else 0,
            blind_mode=blind_mode,
            staging_enabled=staging_config is not None,
        )

    if review is not None:
        state = review

        def get_case(case_id: str) -> CaseResult:
            case = state.cases.get(case_id)
            if case is None:
                raise HTTPException(status_code=404, detail=f"unknown case: {case_id}")
            return case

        @app.get("/cases", response_model=list[CaseSummaryOut], dependencies=guarded)
        def list_cases() -> list[CaseSummaryOut]:
            reviewed = state.store.reviewed_case_ids()
            return [
                CaseSummaryOut(
                    case_id=c.case_id,
                    predicted_stage=c.predicted_stage.name if c.predicted_stage else None,
                    true_stage=c.true_stage.name,
                    reviewed=c.case_id in reviewed,
                )
                for c in state.cases.values()
            ]

        @app.get(
            "/cases/{case_id}", response_model=CaseDetailOut, dependencies=guarded
        )
        def case_detail(case_id: str) -> CaseDetailOut:
            case = get_case(case_id)
            return CaseDetailOut(
                case_id=case.case_id,
                predicted_stage=case.predicted_stage.name if case.predicted_stage else None,
                true_stage=case.true_stage.name,
                rationale=case.rationale,
                terminated_by=case.terminated_by.value if case.terminated_by else None,
                image_url=f"/cases/{case.case_id}/image",
                reviewed=case.case_id in state.store.reviewed_case_ids(),
            )

        @app.get("/cases/{case_id}/image", dependencies=guarded)
        def case_image(case_id: str) -> Response:
            case = get_case(case_id)
            path = Path(case.image_path)
            if not path.is_file():
                raise HTTPException(status_code=404, detail="image file missing")
            mime, _ = mimetypes.guess_type(str(path))
            return Response(content=path.read_bytes(), media_type=mime or "application/octet-stream")

        @app.post(
            "/cases/{case_id}/review",
            response_model=SubmitOut,
            dependencies=guarded,
        )
        def submit_review(case_id: str, body: ReviewEntryIn) -> SubmitOut:
            get_case(case_id)
            try:
                entry = ReviewEntry(
                    case_id=case_id,
                    reviewer_id=body.reviewer_id,
                    agrees_with_ground_truth=body.agrees_with_ground_truth,
                    disagreement_type=(
                        DisagreementType(body.disagreement_type)
                        if body.disagreement_type
                        else None
                    ),
                    rating=RationaleRating(body.rating) if body.rating else None,
                    notes=body.notes,
                )
            except ValueError as exc:
                raise HTTPException(status_code=422, detail={"reason": str(exc)})
            try:
                entry_id = state.store.submit(entry)
            except UnknownCaseError:
                raise HTTPException(status_code=404, detail=f"unknown case: {case_id}")
            except InvariantViolation as exc:
                raise HTTPException(status_code=422, detail={"reason": exc.reason})
            return SubmitOut(entry_id=entry_id, case_id=case_id)

        @app.get("/stats", dependencies=guarded)
        def stats() -> dict:
            return aggregate(state.store).to_json_dict()

        @app.get("/export", dependencies=guarded)
        def export() -> PlainTextResponse:
            return PlainTextResponse(
                state.store.export_jsonl(), media_type="application/x-ndjson"
            )

    if staging_config is not None:

        @app.post("/stage", response_model=StageResponseOut, dependencies=guarded)
        def stage(body: StageRequestIn) -> StageResponseOut:
            suffix = mimetypes.guess_extension(body.mime_type) or ".png"
            try:
                image_bytes = base64.b64decode(body.image_b64, validate=True)
            except (binascii.Error, ValueError):
                raise HTTPException(
                    status_code=422, detail={"reason": "image_b64 is not valid base64"}
                )
            with tempfile.TemporaryDirectory(prefix="pustage-stage-") as tmp:
                image_path = Path(tmp) / f"query{suffix}"
                image_path.write_bytes(image_bytes)
                prediction, transcript, _ = stage_single_case(
                    staging_config,
                    image_path,
                    clinical_note=body.clinical_note,
                )
            return StageResponseOut(
                stage=prediction.stage.name if prediction else None,
                rationale=prediction.rationale if prediction else "",
                terminated_by=(
                    transcript.terminated_by.value
                    if transcript and transcript.terminated_by
                    else None
                ),
                rounds=len(transcript.rounds) if transcript else 0,
                total_latency_s=transcript.total_latency if transcript else 0.0,
            )

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="ui")

    return app


def _tiny_png(r: int, g: int, b: int) -> bytes:
    """Minimal valid 1x1 RGB PNG for fixtures and demos."""

    def chunk(kind: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + kind
            + data
            + struct.pack(">I", zlib.crc32(kind + data))
        )

    header = struct.pack(">IIBBBBB", 1, 1, 8, 2, 0, 0, 0)
    pixel = zlib.compress(b"\x00" + bytes((r, g, b)))
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", pixel)
        + chunk(b"IEND", b"")
    )


DEMO_STAGE_PLAN = ("I",) * 18 + ("II",) * 22 + ("III",) * 22 + ("IV",) * 22


def build_demo_review_dir(run_dir: Path, force: bool = False) -> Path:
    """Synthesize an 84-case run directory for review-workflow demos.

    Every case's prediction matches its ground truth (the review
    protocol rates rationales only on model-correct cases), images are
    tiny synthetic PNGs, and case ids are stable across builds.
    """
    run_dir = Path(run_dir)
    cases_path = run_dir / "cases.jsonl"
    if cases_path.is_file() and not force:
        return run_dir
    images = run_dir / "images"
    images.mkdir(parents=True, exist_ok=True)
    rationale_by_stage = {
        "I": "Intact skin with localized non-blanchable erythema; no tissue loss.",
        "II": "Partial-thickness loss with a viable pink wound bed and exposed dermis.",
        "III": "Full-thickness loss into subcutaneous fat with slough at the margins.",
        "IV": "Full-thickness loss with necrosis and exposed deeper structures.",
    }
    shade = {"I": 225, "II": 180, "III": 135, "IV": 90}
    lines = []
    for index, stage in enumerate(DEMO_STAGE_PLAN, start=1):
        case_id = f"rev-{index:03d}"
        image_path = images / f"{case_id}.png"
        image_path.write_bytes(_tiny_png(shade[stage], 80, 80))
        lines.append(
            json.dumps(
                {
                    "fold_id": 1,
                    "case_id": case_id,
                    "true": stage,
                    "predicted": stage,
                    "terminated_by": "critic_ok",
                    "latency": 0.0,
                    "rationale": rationale_by_stage[stage],
                    "image_path": str(image_path),
                },
                sort_keys=True,
            )
        )
    cases_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return run_dir
