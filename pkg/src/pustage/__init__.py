"""Agentic-reflection staging engine for pressure ulcer images.

Model-agnostic orchestration around multimodal chat-completion
backends: prompt construction, a bounded generator-critic refinement
loop, decoupled classification/rationale inference, stratified
cross-validation metrics, desk-scale low-rank adaptation math, and a
clinician review service.
"""

__version__ = "0.1.0"

from .domain import (  # noqa: F401
    CaseRecord,
    DatasetManifest,
    StageLabel,
    StagePrediction,
    load_manifest,
    parse_stage_token,
)
