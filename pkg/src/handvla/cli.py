"""Command-line entry point.

Exit codes: 0 success, 1 hard failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .pipeline import ConfigError, PipelineConfig, UsageError

log = logging.getLogger("handvla.cli")

STAGE_COMMANDS = {
    "ingest": ["ingest"],
    "segment": ["segment"],
    "caption": ["caption"],
    "merge": ["merge"],
    "build-episodes": ["episodes"],
    "stats": ["stats"],
    "augment-preview": ["augment"],
    "run-all": list(pipeline.ALL_STAGES),
}


def _add_pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (unknown keys are rejected)")
    p.add_argument("--root", type=Path, help="directory the config paths are relative to (default: the config's directory, else cwd)")
    p.add_argument("--jobs", type=int, help="videos processed in parallel")
    p.add_argument("--strict", action="store_true", default=None, help="exit 1 if any video fails")
    p.add_argument("--seed", type=int)
    g = p.add_argument_group("captioner")
    g.add_argument("--endpoint", help="HTTP captioning endpoint; switches the backend to http")
    g.add_argument("--api-key-env", help="environment variable holding the API key")
    g.add_argument("--max-inflight", type=int)
    g.add_argument("--mock-transcript", help="scripted replies for the offline mock captioner")


def _load_pipeline_config(args) -> tuple[PipelineConfig, Path]:
    cfg = pipeline.load_config(args.config) if args.config else PipelineConfig()
    root = args.root or (args.config.parent if args.config else Path.cwd())
    cc = cfg.caption
    if args.endpoint:
        cc = replace(cc, backend="http", endpoint=args.endpoint)
    if args.api_key_env:
        cc = replace(cc, api_key_env=args.api_key_env)
    if args.max_inflight is not None:
        cc = replace(cc, max_inflight=args.max_inflight)
    if args.mock_transcript:
        cc = replace(cc, mock_transcript=args.mock_transcript)
    over = {"caption": cc}
    if args.jobs is not None:
        over["jobs"] = args.jobs
    if args.strict is not None:
        over["strict"] = args.strict
    if args.seed is not None:
        over["seed"] = args.seed
    try:
        return replace(cfg, **over), root
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_pipeline(args) -> int:
    cfg, root = _load_pipeline_config(args)
    res = pipeline.run(STAGE_COMMANDS[args.command], cfg, root)
    summary = {"computed": len(res.computed), "skipped": len(res.skipped), "failed": [list(f) for f in res.failed], "exit": res.exit_code}
    print(json.dumps(summary, sort_keys=True))
    return res.exit_code


def cmd_init_config(args) -> int:
    text = json.dumps(PipelineConfig().to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    from .metrics import make_grasp_cases, write_grasp_cases
    from .synth import write_corpus

    paths = write_corpus(args.out, args.videos, args.seed, args.seconds, args.fps)
    out = {"tracks": [str(p) for p in paths]}
    if args.grasp_cases:
        cases = make_grasp_cases(np.random.default_rng(args.seed), args.grasp_cases, args.grasp_distance)
        gp = Path(args.out) / "grasp_cases.jsonl"
        write_grasp_cases(gp, cases)
        out["grasp_cases"] = str(gp)
    print(json.dumps(out))
    return 0


def cmd_export_robot(args) -> int:
    from .episode import export_robot, load_episode, serialize_episode
    from .retarget import JointMap, load_asset_joint_map

    jmap = JointMap.load(args.joint_map) if args.joint_map else load_asset_joint_map()
    src = Path(args.episodes)
    files = sorted(src.rglob("*.ep")) if src.is_dir() else [src]
    if not files:
        raise UsageError(f"no episode files under {src}")
    out = Path(args.out)
    for f in files:
        rel = f.relative_to(src) if src.is_dir() else Path(f.name)
        dest = out / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        serialize_episode(dest, export_robot(load_episode(f), jmap))
    print(json.dumps({"exported": len(files), "mapped_joints": int(jmap.human_mask.sum()), "illustrative_map": jmap.illustrative}))
    return 0


def cmd_retarget(args) -> int:
    from .retarget import AngleMatchSpec, RetargetConfig, load_asset_chain, retarget_stream

    chain = load_asset_chain(args.chain)
    spec = AngleMatchSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else None
    if args.method == "angle" and spec is None:
        raise UsageError("--method angle needs --spec")
    records = [json.loads(line) for line in Path(args.input).read_text().splitlines() if line.strip()]
    rows = retarget_stream(records, chain, args.method, RetargetConfig(), spec)
    text = "".join(json.dumps(r) + "\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_diversity(args) -> int:
    from .metrics import diversity_curve, read_features, visual_diversity

    q, t = read_features(args.queries), read_features(args.targets)
    vd = visual_diversity(q, t)
    out = {"avg_max_cos": vd.avg_max_cos, "recall_at_0.5": vd.recall_at_05, "queries": len(q), "targets": len(t)}
    if args.counts:
        out["curve"] = [{"count": c, "avg_max_cos": a, "recall_at_0.5": r} for c, a, r in diversity_curve(q, t, args.counts, args.seed)]
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_word_stats(args) -> int:
    from .metrics import WordStats, instruction_diversity

    ws = WordStats.load(args.stats)
    out = {}
    for pos in ([args.pos] if args.pos else [*sorted(ws.counts), None]):
        d = instruction_diversity(ws, pos)
        out[pos or "all"] = {"h_index": d.h_index, "i100": d.i100, "words": len(d.words), "rank_frequency": d.rank_frequency[: args.top].tolist()}
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_eval_grasp(args) -> int:
    from .metrics import grasp_eval, read_grasp_cases, touching_source, zero_motion_source

    cases = read_grasp_cases(args.cases)
    source = {"zero": zero_motion_source, "touch": touching_source}[args.source](args.horizon)
    rep = grasp_eval(cases, source, args.trials)
    print(rep.to_table())
    if args.json:
        Path(args.json).write_text("".join(json.dumps(r) + "\n" for r in rep.to_records()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="handvla", description="Hand-track to VLA episode pipeline and evaluators.")
    ap.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = ap.add_subparsers(dest="command", required=True)

    for name, stages in STAGE_COMMANDS.items():
        p = sub.add_parser(name, help=f"run stage(s): {', '.join(stages)}")
        _add_pipeline_args(p)
        p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("init-config", help="print the default config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("synth", help="write a synthetic track corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seconds", type=float, default=12.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--grasp-cases", type=int, default=0, help="also write N grasp benchmark fixtures")
    p.add_argument("--grasp-distance", type=float, default=0.20)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-robot", help="mask episodes to the joints a robot hand has")
    p.add_argument("--episodes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--joint-map")
    p.set_defaults(func=cmd_export_robot)

    p = sub.add_parser("retarget", help="retarget glove keypoint records to a robot hand")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--chain", default="xhand_like")
    p.add_argument("--method", default="dexpilot", choices=["dexpilot", "angle"])
    p.add_argument("--spec")
    p.set_defaults(func=cmd_retarget)

    p = sub.add_parser("diversity", help="visual diversity of query features against a dataset")
    p.add_argument("--queries", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--counts", type=int, nargs="*")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("word-stats", help="h-index and i100 from per-POS word counts")
    p.add_argument("--stats", required=True)
    p.add_argument("--pos", choices=["noun", "verb", "adjective"])
    p.add_argument("--top", type=int, default=50)
    p.set_defaults(func=cmd_word_stats)

    p = sub.add_parser("eval-grasp", help="minimal fingertip-object distance benchmark")
    p.add_argument("--cases", required=True)
    p.add_argument("--source", default="zero", choices=["zero", "touch"])
    p.add_argument("--trials", type=int, default=4)
    p.add_argument("--horizon", type=int, default=16)
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval_grasp)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    pipeline.configure_logging(args.log_level)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"handvla: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        log.error("command_failed", extra={"command": args.command, "error": f"{type(e).__name__}: {e}"})
        print(f"handvla: {args.command} failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
