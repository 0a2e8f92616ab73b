"""Run orchestration: wire manifests, folds, prompting modes, and
backends into end-to-end evaluation runs.

A completed run directory is self-describing: ``config.snapshot``
(resolved TOML), ``folds.json``, ``cases.jsonl`` (streamed per-case
results), ``transcripts.jsonl``, ``report.json`` and ``report.txt``.
Reports are recomputed deterministically from the persisted per-case
results, so re-rendering an existing run reproduces identical bytes.
"""

from __future__ import annotations

import datetime as _dt
import enum
import json
import os
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .backends import Backend, BackendConfig, HttpBackend, ScriptedBackend, ScriptEntry
from .domain import (
    CaseRecord,
    DatasetManifest,
    PredictionSource,
    StageLabel,
    StagePrediction,
    load_manifest,
)
from .metrics import EvalReport, FoldMetrics, FoldSplit, report_to_json, report_to_text, stratified_kfold
from .parsing import resolve_with_reask
from .prompts import (
    FewShotBank,
    TemplateSet,
    build_cot,
    build_few_shot,
    build_rationale_prompt,
    build_reask_prompt,
    build_zero_shot,
)
from .reflection import (
    ArmConfig,
    ReflectionTranscript,
    TerminationReason,
    run_decoupled_inference,
    run_reflection,
)


class HarnessError(Exception):
    pass


class ConfigError(HarnessError):
    pass


class Mode(str, enum.Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    COT = "cot"
    ARM_ONLY = "arm_only"
    FT_ONLY = "ft_only"
    FT_ARM = "ft_arm"


REFLECTION_MODES = (Mode.ARM_ONLY, Mode.FT_ARM)


@dataclass
class BackendSpec:
    """Declarative backend description from the run config file."""

    kind: str  # "scripted" | "http"
    http: Optional[BackendConfig] = None
    script: tuple[ScriptEntry, ...] = ()

    def build(self) -> Backend:
        if self.kind == "scripted":
            return ScriptedBackend(list(self.script))
        if self.kind == "http":
            if self.http is None:
                raise ConfigError("http backend requires connection settings")
            return HttpBackend(self.http)
        raise ConfigError(f"unknown backend kind: {self.kind!r}")


@dataclass
class RunConfig:
    """Everything one evaluation run needs.

    ``manifest_path`` and ``output_dir`` are only required for full
    evaluation runs; single-case staging uses the backend and mode
    settings alone.
    """

    mode: Mode
    generator: BackendSpec
    manifest_path: Optional[Path] = None
    output_dir: Optional[Path] = None
    critic: Optional[BackendSpec] = None
    rationale: Optional[BackendSpec] = None
    k_folds: int = 5
    seed: int = 0
    parallelism: int = 4
    few_shot_per_class: int = 2
    max_iterations: int = 2
    decoupled_rationale: bool = False

    def validate(self) -> None:
        if self.k_folds < 1:
            raise ConfigError("k_folds must be positive")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be positive")
        if self.mode in REFLECTION_MODES and self.critic is None:
            raise ConfigError(f"mode {self.mode.value} requires a critic backend")
        if self.decoupled_rationale and self.rationale is None:
            raise ConfigError("decoupled_rationale requires a rationale backend")
        if self.mode is Mode.FEW_SHOT and self.k_folds < 2:
            raise ConfigError(
                "few_shot needs a training split to draw support examples from; "
                "use k_folds >= 2"
            )

    def validate_for_eval(self) -> None:
        self.validate()
        if self.manifest_path is None:
            raise ConfigError("run.manifest is required for evaluation runs")
        if self.output_dir is None:
            raise ConfigError("run.output_dir is required for evaluation runs")


def _parse_backend_spec(data: Mapping[str, object]) -> BackendSpec:
    kind = str(data.get("kind", "http"))
    if kind == "scripted":
        entries = []
        for row in data.get("script", []):  # type: ignore[union-attr]
            entries.append(
                ScriptEntry(
                    match=str(row["match"]),
                    text=str(row["text"]),
                    once=bool(row.get("once", False)),
                    latency=float(row.get("latency", 0.0)),
                )
            )
        return BackendSpec(kind="scripted", script=tuple(entries))
    if kind == "http":
        http = BackendConfig(
            endpoint_url=str(data["endpoint_url"]),
            model_name=str(data["model_name"]),
            api_key_env=str(data.get("api_key_env", "MODEL_API_KEY")),
            timeout=float(data.get("timeout", 60.0)),
            max_retries=int(data.get("max_retries", 3)),
            retry_backoff_base=float(data.get("retry_backoff_base", 0.5)),
            supports_multi_image=bool(data.get("supports_multi_image", False)),
        )
        return BackendSpec(kind="http", http=http)
    raise ConfigError(f"unknown backend kind: {kind!r}")


def load_run_config(
    path: Path | str, overrides: Optional[Mapping[str, object]] = None
) -> RunConfig:
    """Parse a TOML run config; CLI flags override file values."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None

    run = dict(data.get("run", {}))
    run.update(overrides or {})
    backends = data.get("backends", {})
    if "generator" not in backends:
        raise ConfigError("config must define [backends.generator]")
    arm = data.get("arm", {})

    def resolve(p: str) -> Path:
        candidate = Path(p)
        return candidate if candidate.is_absolute() else path.parent / candidate

    try:
        mode = Mode(str(run.get("mode", "zero_shot")))
    except ValueError:
        raise ConfigError(f"unknown mode: {run.get('mode')!r}") from None

    config = RunConfig(
        mode=mode,
        manifest_path=resolve(str(run["manifest"])) if "manifest" in run else None,
        output_dir=resolve(str(run["output_dir"])) if "output_dir" in run else None,
        generator=_parse_backend_spec(backends["generator"]),
        critic=_parse_backend_spec(backends["critic"]) if "critic" in backends else None,
        rationale=(
            _parse_backend_spec(backends["rationale"]) if "rationale" in backends else None
        ),
        k_folds=int(run.get("k_folds", 5)),
        seed=int(run.get("seed", 0)),
        parallelism=int(run.get("parallelism", 4)),
        few_shot_per_class=int(run.get("few_shot_per_class", 2)),
        max_iterations=int(arm.get("max_iterations", 2)),
        decoupled_rationale=bool(arm.get("decoupled_rationale", False)),
    )
    config.validate()
    return config


def _toml_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    # json string escaping is a valid TOML basic string
    return json.dumps(str(value))


def snapshot_toml(config: RunConfig, run_meta: Mapping[str, object]) -> str:
    """Resolved-config snapshot written into the run directory."""
    lines = ["[run]"]
    for key, value in (
        ("manifest", str(config.manifest_path)),
        ("mode", config.mode.value),
        ("output_dir", str(config.output_dir)),
        ("k_folds", config.k_folds),
        ("seed", config.seed),
        ("parallelism", config.parallelism),
        ("few_shot_per_class", config.few_shot_per_class),
    ):
        lines.append(f"{key} = {_toml_value(value)}")
    lines.append("")
    lines.append("[arm]")
    lines.append(f"max_iterations = {_toml_value(config.max_iterations)}")
    lines.append(f"decoupled_rationale = {_toml_value(config.decoupled_rationale)}")
    lines.append("")
    lines.append("[meta]")
    for key in sorted(run_meta):
        lines.append(f"{key} = {_toml_value(run_meta[key])}")
    lines.append("")
    return "\n".join(lines)


def atomic_write(path: Path, data: bytes) -> None:
    """Write-temp-then-rename so a killed run never leaves torn files."""
    fd, tmp_name = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


@dataclass(frozen=True)
class CaseResult:
    """One scored case as persisted in cases.jsonl."""

    fold_id: int
    case_id: str
    true_stage: StageLabel
    predicted_stage: Optional[StageLabel]
    terminated_by: Optional[TerminationReason]
    latency: float
    rationale: str
    image_path: str

    def to_json_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "case_id": self.case_id,
            "true": self.true_stage.name,
            "predicted": self.predicted_stage.name if self.predicted_stage else None,
            "terminated_by": self.terminated_by.value if self.terminated_by else None,
            "latency": self.latency,
            "rationale": self.rationale,
            "image_path": self.image_path,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, object]) -> "CaseResult":
        return cls(
            fold_id=int(data["fold_id"]),
            case_id=str(data["case_id"]),
            true_stage=StageLabel[str(data["true"])],
            predicted_stage=(
                StageLabel[str(data["predicted"])] if data.get("predicted") else None
            ),
            terminated_by=(
                TerminationReason(str(data["terminated_by"]))
                if data.get("terminated_by")
                else None
            ),
            latency=float(data["latency"]),
            rationale=str(data.get("rationale") or ""),
            image_path=str(data.get("image_path") or ""),
        )


class _JsonlWriter:
    """Lock-guarded line appender; one flushed line per record."""

    def __init__(self, path: Path, mode: str = "a"):
        self._fh = open(path, mode, encoding="utf-8")
        self._lock = threading.Lock()

    def write(self, line: str) -> None:
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()


class Evaluator:
    """Evaluates single cases under a configured mode."""

    def __init__(self, config: RunConfig, templates: Optional[TemplateSet] = None):
        config.validate()
        self.config = config
        self.templates = templates
        self.generator = config.generator.build()
        self.critic = config.critic.build() if config.critic else None
        self.rationale = config.rationale.build() if config.rationale else None

    def arm_config(self) -> ArmConfig:
        return ArmConfig(
            generator_backend=self.generator,
            critic_backend=self.critic,
            max_iterations=self.config.max_iterations,
            decoupled_rationale=self.config.decoupled_rationale,
            rationale_backend=self.rationale,
            templates=self.templates,
        )

    def single_call(
        self, case: CaseRecord, bank: Optional[FewShotBank]
    ) -> tuple[Optional[StagePrediction], float, Optional[ReflectionTranscript]]:
        mode = self.config.mode
        if mode is Mode.FEW_SHOT:
            if bank is None:
                raise HarnessError("few_shot mode needs a support bank")
            request = build_few_shot(
                case,
                bank,
                seed=self.config.seed,
                templates=self.templates,
                multi_image=self.generator.supports_multi_image,
            )
        elif mode is Mode.COT:
            request = build_cot(case, templates=self.templates)
        else:  # zero_shot and ft_only share the plain classification ask
            request = build_zero_shot(case, templates=self.templates)

        latencies: list[float] = []

        def call(req):
            response = self.generator.complete(req)
            latencies.append(response.latency)
            return response

        response = call(request)
        outcome = resolve_with_reask(
            response.text, lambda: call(build_reask_prompt(case, self.templates))
        )
        if outcome.stage is None:
            return None, sum(latencies), None
        prediction = StagePrediction(
            stage=outcome.stage,
            rationale=outcome.rationale,
            raw_model_text=response.text,
            source=PredictionSource.GENERATOR_INITIAL,
        )
        if self.config.decoupled_rationale and self.rationale is not None:
            rat = self.rationale.complete(
                build_rationale_prompt(case, prediction.stage, self.templates)
            )
            latencies.append(rat.latency)
            prediction = StagePrediction(
                stage=prediction.stage,
                rationale=rat.text.strip(),
                raw_model_text=rat.text,
                source=PredictionSource.DECOUPLED_RATIONALE,
            )
        return prediction, sum(latencies), None

    def evaluate_case(
        self, fold_id: int, case: CaseRecord, bank: Optional[FewShotBank]
    ) -> tuple[CaseResult, Optional[ReflectionTranscript]]:
        if self.config.mode in REFLECTION_MODES:
            transcript = run_reflection(case, self.arm_config())
            prediction = transcript.final
            result = CaseResult(
                fold_id=fold_id,
                case_id=case.case_id,
                true_stage=case.true_stage,
                predicted_stage=prediction.stage if prediction else None,
                terminated_by=transcript.terminated_by,
                latency=transcript.total_latency,
                rationale=prediction.rationale if prediction else "",
                image_path=str(case.image_path),
            )
            return result, transcript
        prediction, latency, _ = self.single_call(case, bank)
        result = CaseResult(
            fold_id=fold_id,
            case_id=case.case_id,
            true_stage=case.true_stage,
            predicted_stage=prediction.stage if prediction else None,
            terminated_by=None if prediction else TerminationReason.PARSE_FAILURE,
            latency=latency,
            rationale=prediction.rationale if prediction else "",
            image_path=str(case.image_path),
        )
        return result, None


def _fold_metrics_from_results(results: Sequence[CaseResult]) -> list[FoldMetrics]:
    by_fold: dict[int, list[CaseResult]] = {}
    for result in results:
        by_fold.setdefault(result.fold_id, []).append(result)
    metrics: list[FoldMetrics] = []
    for fold_id in sorted(by_fold):
        ordered = sorted(by_fold[fold_id], key=lambda r: r.case_id)
        pairs = [(r.true_stage, r.predicted_stage) for r in ordered]
        metrics.append(FoldMetrics.from_pairs(fold_id, pairs))
    return metrics


def _build_report(
    results: Sequence[CaseResult], run_metadata: Mapping[str, object]
) -> EvalReport:
    return EvalReport.build(_fold_metrics_from_results(results), run_metadata)


def run_eval(config: RunConfig, templates: Optional[TemplateSet] = None) -> EvalReport:
    """Execute a full evaluation run and persist it to the run directory."""
    config.validate_for_eval()
    manifest = load_manifest(config.manifest_path)
    folds = stratified_kfold(manifest, config.k_folds, config.seed)
    by_id = manifest.by_id()

    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    started_at = _dt.datetime.now(_dt.timezone.utc).isoformat()

    evaluator = Evaluator(config, templates)
    run_meta = {
        "started_at": started_at,
        "engine_version": __version__,
        "generator_backend": evaluator.generator.backend_id,
        "critic_backend": evaluator.critic.backend_id if evaluator.critic else "",
        "rationale_backend": evaluator.rationale.backend_id if evaluator.rationale else "",
        "n_cases": len(manifest),
    }
    atomic_write(out / "config.snapshot", snapshot_toml(config, run_meta).encode("utf-8"))
    folds_payload = {
        "k": config.k_folds,
        "seed": config.seed,
        "folds": [
            {
                "fold_id": f.fold_id,
                "train_ids": list(f.train_ids),
                "test_ids": list(f.test_ids),
            }
            for f in folds
        ],
    }
    atomic_write(
        out / "folds.json",
        (json.dumps(folds_payload, sort_keys=True, indent=1) + "\n").encode("utf-8"),
    )

    cases_writer = _JsonlWriter(out / "cases.jsonl", mode="w")
    transcripts_writer = _JsonlWriter(out / "transcripts.jsonl", mode="w")
    results: list[CaseResult] = []
    results_lock = threading.Lock()

    try:
        for fold in folds:
            bank = None
            if config.mode is Mode.FEW_SHOT:
                train_cases = [by_id[cid] for cid in fold.train_ids]
                bank = FewShotBank.from_cases(train_cases, config.few_shot_per_class)

            def work(case_id: str, fold_id: int = fold.fold_id, bank=bank) -> None:
                case = by_id[case_id]
                result, transcript = evaluator.evaluate_case(fold_id, case, bank)
                cases_writer.write(json.dumps(result.to_json_dict(), sort_keys=True))
                if transcript is not None:
                    transcripts_writer.write(transcript.to_jsonl_line())
                with results_lock:
                    results.append(result)

            if config.parallelism == 1:
                for case_id in fold.test_ids:
                    work(case_id)
            else:
                with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
                    futures = [pool.submit(work, cid) for cid in fold.test_ids]
                    for future in futures:
                        future.result()
    finally:
        cases_writer.close()
        transcripts_writer.close()

    run_meta["finished_at"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    run_meta["mode"] = config.mode.value
    run_meta["k_folds"] = config.k_folds
    run_meta["seed"] = config.seed
    report = _build_report(results, run_meta)
    atomic_write(out / "report.json", report_to_json(report).encode("utf-8"))
    atomic_write(out / "report.txt", report_to_text(report).encode("utf-8"))
    return report


def load_case_results(run_dir: Path) -> list[CaseResult]:
    path = run_dir / "cases.jsonl"
    if not path.is_file():
        raise HarnessError(f"run directory has no cases.jsonl: {run_dir}")
    results = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            results.append(CaseResult.from_json_dict(json.loads(line)))
    return results


def rebuild_report(run_dir: Path | str) -> EvalReport:
    """Recompute the report from a run directory's persisted results.

    Metrics recompute from cases.jsonl; run metadata is taken from the
    stored report.json so the rendering is byte-identical.
    """
    run_dir = Path(run_dir)
    results = load_case_results(run_dir)
    report_path = run_dir / "report.json"
    metadata: Mapping[str, object] = {}
    if report_path.is_file():
        stored = json.loads(report_path.read_text(encoding="utf-8"))
        metadata = stored.get("run_metadata", {})
    return _build_report(results, metadata)


def write_report(run_dir: Path | str, report: EvalReport) -> None:
    run_dir = Path(run_dir)
    atomic_write(run_dir / "report.json", report_to_json(report).encode("utf-8"))
    atomic_write(run_dir / "report.txt", report_to_text(report).encode("utf-8"))


def load_transcripts(path: Path | str) -> list[ReflectionTranscript]:
    transcripts = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            transcripts.append(ReflectionTranscript.from_json_dict(json.loads(line)))
    return transcripts


def stage_single_case(
    config: RunConfig,
    image_path: Path,
    clinical_note: Optional[str] = None,
    transcript_dir: Optional[Path] = None,
    templates: Optional[TemplateSet] = None,
) -> tuple[Optional[StagePrediction], Optional[ReflectionTranscript], Optional[Path]]:
    """Run one image through the configured mode.

    Returns (prediction, transcript, transcript_path); the transcript
    is appended to ``transcripts.jsonl`` under ``transcript_dir`` when
    the mode runs the reflection loop.
    """
    case = CaseRecord(
        case_id=image_path.stem,
        image_path=image_path,
        true_stage=StageLabel.I,  # placeholder; single-case runs have no ground truth
        clinical_note=clinical_note,
    )
    evaluator = Evaluator(config, templates)
    if config.mode in REFLECTION_MODES:
        transcript = run_reflection(case, evaluator.arm_config())
        transcript_path = None
        if transcript_dir is not None:
            transcript_dir.mkdir(parents=True, exist_ok=True)
            transcript_path = transcript_dir / "transcripts.jsonl"
            with open(transcript_path, "a", encoding="utf-8") as fh:
                fh.write(transcript.to_jsonl_line() + "\n")
        return transcript.final, transcript, transcript_path
    prediction, _, _ = evaluator.single_call(case, None)
    return prediction, None, None
