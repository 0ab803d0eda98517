"""Command-line entry point: ``guided-spkemb <command> [flags]``."""

import argparse
import json
import os
import subprocess
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checks, experiments
from .config import RunConfig
from .evaluation import (
    DiarizationConfig,
    bootstrap_test,
    calibrate_ahc_threshold,
    compute_der,
    eer_by_bucket,
    reference_speech_time,
    run_diarization,
    score_trials,
    sweep_nontarget_duration,
    write_csv,
)
from .features import write_rttm
from .models import ModelConfig, build_model, load_checkpoint
from .synth import read_dataset, write_dataset
from .training import train_run

COMMANDS = ("synth", "train", "eval-verify", "eval-diar", "sweep-m", "gradcheck", "selfcheck")


class CheckFailed(Exception):
    pass


def version():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _m_values(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("m values must be non-negative")
    return [int(v) if v.is_integer() else v for v in values]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=os.environ.get("ME_CONFIG"), help="YAML run configuration")
    common.add_argument("--seed", type=int, default=int(os.environ.get("ME_SEED", 0)))
    common.add_argument("--out", default=os.environ.get("ME_OUT", "runs"), help="parent directory for run folders")
    common.add_argument("--threads", type=int, default=int(os.environ.get("ME_THREADS", 1)))
    common.add_argument("--tag", default=None, help="run folder suffix (defaults to the command)")

    parser = argparse.ArgumentParser(prog="guided-spkemb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    sub.add_parser("synth", parents=[common], help="write a trial set and diarization recordings")

    p = sub.add_parser("train", parents=[common], help="train an extractor")
    p.add_argument("--preset", help="model preset applied over the config's model section")

    for name, helptext in (
        ("eval-verify", "EER per overlap bucket"),
        ("eval-diar", "diarization with oracle local activity"),
        ("sweep-m", "non-target duration sweep"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", help="trained checkpoint (default: freshly initialized model)")
        p.add_argument("--preset", help="model preset when no checkpoint is given")
        if name == "eval-verify":
            p.add_argument("--data", help="dataset directory written by 'synth'")
            p.add_argument("--compare", help="second checkpoint for a paired bootstrap test")
        if name == "eval-diar":
            p.add_argument("--calibrate", type=int, default=0, metavar="N",
                           help="pick the AHC threshold on N extra held-out recordings first")
        if name == "sweep-m":
            p.add_argument("--m", type=_m_values, default=None, help="comma-separated m values")

    for name in ("gradcheck", "selfcheck"):
        p = sub.add_parser(name, parents=[common], help=f"run the {name} property suites")
        p.add_argument("--cases", type=int, default=100)
    return parser


def _run_dir(args):
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = Path(args.out) / f"{stamp}-{args.tag or args.command}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    (path / "results").mkdir(parents=True)
    return path


def _model(args, cfg):
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        return model
    mcfg = ModelConfig.preset(args.preset, n_mels=cfg.model.n_mels) if args.preset else cfg.model
    model = build_model(mcfg, args.seed)
    model.eval()
    return model


def cmd_synth(args, cfg, run):
    trials = experiments.trial_set(cfg)
    write_dataset(trials, run / "results" / "data")
    conv_dir = run / "results" / "conversations"
    conv_dir.mkdir()
    for rec_id, mix in experiments.conversations(cfg):
        np.save(conv_dir / f"{rec_id}.npy", mix.features.frames)
        write_rttm(conv_dir / f"{rec_id}.rttm", mix.annotation, rec_id)
    return {"trials": len(trials), "conversations": cfg.data.n_conversations}


def cmd_train(args, cfg, run):
    mcfg = ModelConfig.preset(args.preset, n_mels=cfg.model.n_mels) if args.preset else cfg.model
    result = train_run(mcfg, cfg.training, seed=args.seed, out_dir=run)
    last = result.metrics[-1] if result.metrics else {}
    return {"checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None, "final": last}


def cmd_eval_verify(args, cfg, run):
    trials = read_dataset(args.data) if args.data else experiments.trial_set(cfg)
    model = _model(args, cfg)
    scores = score_trials(model, trials)
    rows = eer_by_bucket(scores)
    write_csv(rows, run / "results" / "eer.csv", ["bucket", "eer", "threshold"])
    write_csv([asdict(s) for s in scores], run / "results" / "scores.csv", ["trial_id", "score", "label", "bucket"])
    summary = {"eer": {r["bucket"]: r["eer"] for r in rows}}
    if args.compare:
        other, _ = load_checkpoint(args.compare)
        res = bootstrap_test(scores, score_trials(other, trials), cfg.evaluation.n_resamples, cfg.evaluation.bootstrap_seed)
        summary["bootstrap"] = {"p_value": res.p_value, "eer_difference": res.observed_delta}
    return summary


def cmd_eval_diar(args, cfg, run):
    model = _model(args, cfg)
    ev = cfg.evaluation
    dcfg = DiarizationConfig(ev.window_s, ev.shift_s, ev.ahc_threshold, ev.min_speech_s)
    summary = {}
    if args.calibrate:
        held_out = experiments.conversations(cfg, n=args.calibrate, seed=cfg.data.trial_seed + 9999)
        thr, der = calibrate_ahc_threshold(model, [(m.features, m.annotation) for _, m in held_out], config=dcfg)
        dcfg.ahc_threshold = thr
        summary["calibrated_threshold"] = {"ahc_threshold": thr, "held_out_der": der}
    rttm_dir = run / "results" / "rttm"
    rttm_dir.mkdir()
    per_rec = {}
    totals = dict(missed=0.0, false_alarm=0.0, confusion=0.0, reference=0.0)
    for rec_id, mix in experiments.conversations(cfg):
        hyp = run_diarization(mix.features, mix.annotation, model, dcfg)
        write_rttm(rttm_dir / f"{rec_id}.rttm", hyp.to_annotation(), rec_id)
        res = compute_der(mix.annotation, hyp)
        per_rec[rec_id] = res._asdict()
        totals["missed"] += res.missed
        totals["false_alarm"] += res.false_alarm
        totals["confusion"] += res.confusion
        totals["reference"] += reference_speech_time(mix.annotation)
    errors = totals["missed"] + totals["false_alarm"] + totals["confusion"]
    summary.update({
        "ahc_threshold": dcfg.ahc_threshold,
        "der": errors / totals["reference"],
        "totals": totals,
        "recordings": per_rec,
    })
    with open(run / "results" / "der.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return {"der": summary["der"], "confusion_s": totals["confusion"]}


def cmd_sweep_m(args, cfg, run):
    m_values = args.m or cfg.evaluation.m_values
    model = _model(args, cfg)
    rows = sweep_nontarget_duration(model, experiments.trial_set(cfg), m_values)
    write_csv(rows, run / "results" / "sweep.csv", ["m", "mean_cosine", "eer", "n", "n_target"])
    return {"rows": rows}


def _report(results):
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    if failed:
        raise CheckFailed(", ".join(r.name for r in failed))
    return {"checks": {r.name: r.worst for r in results}}


def cmd_gradcheck(args, cfg, run):
    return _report(checks.gradient_suite(args.cases, seed=args.seed))


def cmd_selfcheck(args, cfg, run):
    results = checks.reduction_suite(args.cases, seed=args.seed)
    results += checks.masked_independence_suite(args.cases, seed=args.seed)
    results.append(checks.m_invariance_suite(max(1, args.cases // 2), seed=args.seed))
    return _report(results)


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval-verify": cmd_eval_verify,
    "eval-diar": cmd_eval_diar,
    "sweep-m": cmd_sweep_m,
    "gradcheck": cmd_gradcheck,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        cfg = RunConfig.load(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return 2
    run = _run_dir(args)
    (run / "config.yaml").write_text(cfg.to_yaml())
    manifest = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "seed": args.seed,
        "threads": args.threads,
        "version": version(),
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
    }
    status = 0
    try:
        with threadpool_limits(limits=args.threads):
            manifest["summary"] = HANDLERS[args.command](args, cfg, run)
    except CheckFailed as exc:
        print(f"FAILED: {exc}", file=sys.stderr)
        manifest["failed"] = str(exc)
        status = 1
    except Exception as exc:  # report, record, and exit nonzero
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        status = 1
    manifest["wall_time_s"] = round(time.time() - started, 3)
    manifest["exit_code"] = status
    with open(run / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
    print(run)
    return status


if __name__ == "__main__":
    sys.exit(main())
