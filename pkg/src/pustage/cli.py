"""Command-line interface.

Subcommands: ``split`` (emit fold assignments), ``stage`` (one image
through any mode, locally or against a running service), ``eval``
(full cross-validated run), ``report`` (re-render a persisted run),
``lora-demo`` (toy adaptation training), ``timing`` (per-iteration
latency table from transcripts), and ``serve-review`` (HTTP service).

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import base64
import csv
import io
import json
import mimetypes
import sys
from pathlib import Path
from typing import Optional, Sequence

from .domain import DomainError, load_manifest
from .harness import (
    ConfigError,
    HarnessError,
    Mode,
    load_run_config,
    load_transcripts,
    rebuild_report,
    stage_single_case,
    write_report,
)
from .metrics import MetricsError, report_to_text, stratified_kfold
from .prompts import PromptError
from .reflection import format_timing_table, timing_summary


class CliError(Exception):
    pass


def _folds_json(manifest_path: str, k: int, seed: int) -> str:
    manifest = load_manifest(manifest_path)
    folds = stratified_kfold(manifest, k, seed)
    payload = {
        "k": k,
        "seed": seed,
        "folds": [
            {
                "fold_id": f.fold_id,
                "train_ids": list(f.train_ids),
                "test_ids": list(f.test_ids),
            }
            for f in folds
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def _cmd_split(args: argparse.Namespace) -> int:
    text = _folds_json(args.manifest, args.k, args.seed)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_stage(args: argparse.Namespace) -> int:
    image_path = Path(args.image)
    if not image_path.is_file():
        raise CliError(f"image not found: {image_path}")

    if args.server:
        import httpx

        mime, _ = mimetypes.guess_type(str(image_path))
        payload = {
            "image_b64": base64.b64encode(image_path.read_bytes()).decode("ascii"),
            "mime_type": mime or "image/png",
            "clinical_note": args.note,
        }
        response = httpx.post(
            args.server.rstrip("/") + "/stage", json=payload, timeout=300.0
        )
        if response.status_code != 200:
            raise CliError(f"server returned {response.status_code}: {response.text}")
        data = response.json()
        if data.get("stage"):
            print(f"Stage: {data['stage']}")
            print(f"Rationale: {data.get('rationale', '')}")
        else:
            print("Stage: unparseable")
        return 0

    if not args.config:
        raise CliError("stage needs --config (backend definitions) or --server")
    config = load_run_config(args.config, overrides={"mode": args.mode} if args.mode else {})
    prediction, transcript, transcript_path = stage_single_case(
        config,
        image_path,
        clinical_note=args.note,
        transcript_dir=Path(args.transcript_dir) if args.transcript_dir else None,
    )
    if prediction is None:
        print("Stage: unparseable")
        return 0
    print(f"Stage: {prediction.stage.name}")
    print(f"Rationale: {prediction.rationale}")
    if transcript_path:
        print(f"Transcript: {transcript_path}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from .harness import run_eval

    overrides: dict = {}
    if args.manifest:
        overrides["manifest"] = args.manifest
    if args.mode:
        overrides["mode"] = args.mode
    if args.k is not None:
        overrides["k_folds"] = args.k
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if args.parallelism is not None:
        overrides["parallelism"] = args.parallelism
    config = load_run_config(args.config, overrides=overrides)
    report = run_eval(config)
    print(f"run directory: {config.output_dir}")
    print(
        f"accuracy: {report.accuracy_agg.mean:.4f} ± {report.accuracy_agg.stdev:.4f}  "
        f"macro F1: {report.macro_f1_agg.mean:.4f} ± {report.macro_f1_agg.stdev:.4f}"
    )
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    report = rebuild_report(run_dir)
    write_report(run_dir, report)
    sys.stdout.write(report_to_text(report))
    return 0


def _cmd_lora_demo(args: argparse.Namespace) -> int:
    import random

    from .lora import LoraLayer, make_toy_task, toy_train

    task = make_toy_task(seed=args.seed)
    feature_dim = len(task.inputs[0])
    rng = random.Random(args.seed)
    base = [
        [rng.gauss(0.0, 0.1) for _ in range(feature_dim)] for _ in range(4)
    ]
    layer = LoraLayer.create(base, rank=args.rank, seed=args.seed)
    trajectory = toy_train(layer, task, steps=args.steps, learning_rate=args.lr)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for step, loss in enumerate(trajectory):
        writer.writerow([step, f"{loss:.6f}"])
    text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if trajectory:
        print(
            f"initial loss {trajectory[0]:.4f} -> final loss {trajectory[-1]:.4f} "
            f"({args.steps} steps, lr {args.lr}, rank {args.rank})",
            file=sys.stderr,
        )
    return 0


def _cmd_timing(args: argparse.Namespace) -> int:
    transcripts = load_transcripts(args.transcripts)
    rows = timing_summary(transcripts)
    sys.stdout.write(format_timing_table(rows))
    return 0


def _cmd_serve_review(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import ReviewServiceState, build_demo_review_dir, create_app

    run_dir = Path(args.run_dir)
    if args.demo:
        build_demo_review_dir(run_dir)
    if not (run_dir / "cases.jsonl").is_file():
        raise CliError(f"no cases.jsonl under {run_dir} (use --demo for a fixture)")
    review_log = Path(args.review_log) if args.review_log else run_dir / "reviews.jsonl"
    state = ReviewServiceState.from_run_dir(run_dir, review_log=review_log)
    staging_config = load_run_config(args.config) if args.config else None
    app = create_app(
        review=state,
        staging_config=staging_config,
        token=args.token,
        blind_mode=args.blind,
        frontend_dir=Path(args.frontend_dir) if args.frontend_dir else None,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pustage",
        description="Agentic-reflection staging engine and evaluation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_split = sub.add_parser("split", help="emit stratified fold assignments")
    p_split.add_argument("--manifest", required=True)
    p_split.add_argument("--k", type=int, default=5)
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--out", default=None)
    p_split.set_defaults(func=_cmd_split)

    p_stage = sub.add_parser("stage", help="run one image through a mode")
    p_stage.add_argument("--image", required=True)
    p_stage.add_argument("--mode", choices=[m.value for m in Mode], default=None)
    p_stage.add_argument("--config", default=None, help="run config TOML")
    p_stage.add_argument("--note", default=None, help="optional clinical note")
    p_stage.add_argument("--transcript-dir", default=None)
    p_stage.add_argument("--server", default=None, help="POST to a running service instead")
    p_stage.set_defaults(func=_cmd_stage)

    p_eval = sub.add_parser("eval", help="full evaluation run")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--manifest", default=None)
    p_eval.add_argument("--mode", choices=[m.value for m in Mode], default=None)
    p_eval.add_argument("--k", type=int, default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--output-dir", default=None)
    p_eval.add_argument("--parallelism", type=int, default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_report = sub.add_parser("report", help="re-render a persisted run report")
    p_report.add_argument("--run-dir", required=True)
    p_report.set_defaults(func=_cmd_report)

    p_lora = sub.add_parser("lora-demo", help="toy low-rank adaptation training")
    p_lora.add_argument("--steps", type=int, default=200)
    p_lora.add_argument("--lr", type=float, default=0.05)
    p_lora.add_argument("--rank", type=int, default=2)
    p_lora.add_argument("--seed", type=int, default=7)
    p_lora.add_argument("--out", default=None, help="CSV path (default stdout)")
    p_lora.set_defaults(func=_cmd_lora_demo)

    p_timing = sub.add_parser("timing", help="latency table from transcripts")
    p_timing.add_argument("--transcripts", required=True)
    p_timing.set_defaults(func=_cmd_timing)

    p_serve = sub.add_parser("serve-review", help="clinician review service")
    p_serve.add_argument("--run-dir", required=True)
    p_serve.add_argument("--review-log", default=None)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8765)
    p_serve.add_argument("--config", default=None, help="engine TOML enabling POST /stage")
    p_serve.add_argument("--token", default=None, help="shared token header value")
    p_serve.add_argument("--blind", action=argparse.BooleanOptionalAction, default=True)
    p_serve.add_argument("--frontend-dir", default=None)
    p_serve.add_argument("--demo", action="store_true", help="build the demo fixture if missing")
    p_serve.set_defaults(func=_cmd_serve_review)

    return parser


_RUNTIME_ERRORS = (
    CliError,
    ConfigError,
    HarnessError,
    DomainError,
    MetricsError,
    PromptError,
    OSError,
    ValueError,
)


def cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
