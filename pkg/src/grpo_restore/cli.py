"""Command-line entry point: synth, mine, train, eval, report, judge.

Exit codes: 0 success, 1 user error (bad flags, config, missing or
malformed files), 2 internal failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as rc
from . import data, grpo
from . import judge as jd
from .backbone import restore_deterministic
from .imgcore import clamp01, psnr, ssim
from .rewards import Kind, RewardModel, reward_report

log = logging.getLogger("grpo_restore")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

CHECKPOINT_NAME = "checkpoint.json"
METRICS_NAME = "metrics.csv"
SUMMARY_NAME = "summary.json"
MINE_REPORT_NAME = "mine_report.json"
HIST_BINS = 10


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UserError(f"cannot create output directory {p}: {exc}") from exc
    return p


def _config(args, **overrides) -> dict:
    return rc.resolve(args.preset, args.config, overrides)


def _judge(cfg: dict, flag: Optional[str] = None):
    endpoint = flag or rc.judge_endpoint(cfg)
    if not endpoint:
        return jd.MockJudge(), {"mode": "mock", "endpoint": None}
    client = jd.HttpJudge(endpoint, cfg["judge_timeout_ms"] / 1000.0, cfg["judge_retries"])
    return jd.RemoteJudge(client), {"mode": "http", "endpoint": endpoint}


def _reward_model(cfg: dict, flag: Optional[str] = None):
    judge, info = _judge(cfg, flag)
    return RewardModel(judge, rc.reward_weights(cfg)), judge, info


def _manifest(root) -> data.CorpusManifest:
    try:
        return data.read_manifest(root)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc


# --- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args, per_kind=args.per_kind, size=args.size, seed=args.seed)
    out = _out_dir(args.out)
    manifest = data.synthesize(out, cfg["per_kind"], cfg["size"], cfg["seed"], rc.degrade_params(cfg))
    rc.echo(cfg, out)
    print(f"wrote {len(manifest.records)} pairs to {out}")
    return EXIT_OK


def _histogram(values) -> dict:
    counts, edges = np.histogram(values, bins=HIST_BINS, range=(0.0, 1.0))
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def cmd_mine(args) -> int:
    cfg = _config(args, hard_ratio=args.ratio)
    root = Path(args.corpus)
    manifest = _manifest(root)
    model, judge, info = _reward_model(cfg, args.judge_endpoint)
    state = grpo.init_state(rc.train_config(cfg))
    scored = data.evaluate_baseline(manifest.records, root, state.policy, state.backbone, model)
    manifest = data.CorpusManifest(manifest.version, manifest.seed, scored, manifest.counts, manifest.ratio)
    mined = data.mine_hard(manifest, cfg["hard_ratio"], cfg["stratified"])
    data.write_manifest(root, mined)
    report = {"ratio": cfg["hard_ratio"], "stratified": cfg["stratified"], "judge": info, "kinds": {}}
    for kind, counts in mined.counts.items():
        scores = [r.baseline_reward for r in mined.records if r.kind == kind]
        report["kinds"][kind] = {**counts, "histogram": _histogram(scores), "mean": float(np.mean(scores))}
    _write_json(root / MINE_REPORT_NAME, report)
    rc.echo(cfg, root)
    total = sum(c["selected"] for c in mined.counts.values())
    print(f"selected {total} of {len(mined.records)} records")
    return EXIT_OK


def _samples(root: Path, records) -> list:
    out = []
    for rec in records:
        x, t = data.load_pair(root, rec)
        out.append(grpo.Sample(rec.id, rec.degradation, x, t))
    return out


def _psnr_by_kind(samples, state_before, state_after) -> dict:
    acc: dict = {}
    for s in samples:
        before = psnr(clamp01(restore_deterministic(s.degraded, state_before.backbone, state_before.policy)), s.truth)
        after = psnr(clamp01(restore_deterministic(s.degraded, state_after.backbone, state_after.policy)), s.truth)
        acc.setdefault(s.degradation.kind.value, []).append((before, after))
    return {
        k: {
            "psnr_before": float(np.mean([b for b, _ in v])),
            "psnr_after": float(np.mean([a for _, a in v])),
            "psnr_delta": float(np.mean([a - b for b, a in v])),
        }
        for k, v in acc.items()
    }


def _epoch_mean(history, epoch: int) -> Optional[float]:
    vals = [h.reward_mean for h in history if h.epoch == epoch]
    return float(np.mean(vals)) if vals else None


def cmd_train(args) -> int:
    cfg = _config(args, max_steps=args.max_steps)
    root = Path(args.corpus)
    manifest = _manifest(root)
    selected = [r for r in manifest.records if r.selected]
    if not selected:
        raise UserError(f"{root}: no selected records; run `mine` first")
    out = _out_dir(args.out)
    model, judge, info = _reward_model(cfg, args.judge_endpoint)
    tcfg = rc.train_config(cfg)
    samples = _samples(root, selected)
    initial = grpo.init_state(tcfg, samples[0].degraded.shape[2])
    state = grpo.init_state(tcfg, samples[0].degraded.shape[2])
    rc.echo(cfg, out)
    with grpo.MetricsWriter(out / METRICS_NAME) as writer:
        state, history = grpo.train(samples, tcfg, model, state, on_step=writer)
    grpo.save_checkpoint(out / CHECKPOINT_NAME, state, tcfg)
    epochs = sorted({h.epoch for h in history})
    summary = {
        "steps": state.step,
        "epochs_completed": len(epochs),
        "mean_reward_first_epoch": _epoch_mean(history, epochs[0]) if epochs else None,
        "mean_reward_last_epoch": _epoch_mean(history, epochs[-1]) if epochs else None,
        "per_kind": _psnr_by_kind(samples, initial, state),
        "train_ids": [r.id for r in selected],
        "judge": {**info, "mock": info["mode"] == "mock", "fallbacks": judge.fallbacks},
        "adam_skipped_steps": state.adam.skipped,
    }
    _write_json(out / SUMMARY_NAME, summary)
    if info["mode"] == "mock":
        print("judge: mock (no endpoint configured)")
    print(f"trained {state.step} steps; checkpoint at {out / CHECKPOINT_NAME}")
    return EXIT_OK


EVAL_FIELDS = ("id", "kind", "psnr", "ssim", "combined", "r_gen", "r_qwen", "r_task")


def cmd_eval(args) -> int:
    cfg = _config(args)
    root = Path(args.corpus)
    manifest = _manifest(root)
    try:
        state, train_cfg = grpo.load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc
    except (ValueError, KeyError) as exc:
        raise UserError(f"cannot load checkpoint: {exc}") from exc
    if args.split == "heldout":
        records = [r for r in manifest.records if not r.selected]
    elif args.split == "train":
        records = [r for r in manifest.records if r.selected]
    else:
        records = list(manifest.records)
    if not records:
        raise UserError(f"split {args.split!r} is empty for corpus {root}")
    out = _out_dir(args.out)
    model, judge, info = _reward_model(cfg, args.judge_endpoint)
    rows = []
    for rec in records:
        x, t = data.load_pair(root, rec)
        if x.shape[2] != len(state.backbone["s"]):
            raise UserError(f"{rec.id}: image has {x.shape[2]} channels, checkpoint expects {len(state.backbone['s'])}")
        y = clamp01(restore_deterministic(x, state.backbone, state.policy))
        br = model(rec.degradation, x, y, t)
        rep = reward_report(rec.id, rec.kind, br)
        rows.append({"id": rec.id, "kind": rec.kind, "psnr": psnr(y, t), "ssim": ssim(y, t), **rep})
    per_kind = {}
    for kind in Kind:
        sub = [r for r in rows if r["kind"] == kind.value]
        if sub:
            per_kind[kind.value] = {m: float(np.mean([r[m] for r in sub])) for m in ("psnr", "ssim", "combined")}
            per_kind[kind.value]["count"] = len(sub)
    average = {m: float(np.mean([v[m] for v in per_kind.values()])) for m in ("psnr", "ssim", "combined")}
    result = {
        "split": args.split,
        "checkpoint": str(args.checkpoint),
        "judge": {**info, "mock": info["mode"] == "mock", "fallbacks": judge.fallbacks},
        "per_kind": per_kind,
        "average": average,
        "records": rows,
    }
    _write_json(out / "eval.json", result)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_FIELDS)
        for r in rows:
            c = r["components"]
            w.writerow([r["id"], r["kind"], repr(r["psnr"]), repr(r["ssim"]), repr(r["combined"]),
                        repr(c["r_gen"]), repr(c["r_qwen"]), repr(c["r_task"])])
    rc.echo(cfg, out)
    print(f"evaluated {len(rows)} records; average PSNR {average['psnr']:.3f} dB")
    return EXIT_OK


CURVE_FIELDS = ("epoch", "steps", "reward_mean", "reward_std", "total_loss_mean", "total_loss_std")


def cmd_report(args) -> int:
    cfg = _config(args)
    try:
        rows = grpo.read_metrics(args.metrics)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc
    except (ValueError, StopIteration) as exc:
        raise UserError(f"malformed metrics CSV: {exc}") from exc
    if not rows:
        raise UserError(f"{args.metrics}: metrics log has no steps")
    curves = grpo.epoch_curves(rows)
    out = _out_dir(args.out)
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for c in curves:
            w.writerow([c[f] if isinstance(c[f], int) else repr(c[f]) for f in CURVE_FIELDS])
    series = {f: [c[f] for c in curves] for f in CURVE_FIELDS}
    _write_json(out / "curves.json", series)
    rc.echo(cfg, out)
    print(f"{len(curves)} epochs summarised")
    return EXIT_OK


def cmd_judge(args) -> int:
    if args.action == "prompt":
        sys.stdout.write(jd.build_prompt())
        return EXIT_OK
    if args.action == "parse":
        try:
            text = Path(args.file).read_text() if args.file != "-" else sys.stdin.read()
            v = jd.parse_verdict(text)
        except OSError as exc:
            raise UserError(str(exc)) from exc
        except ValueError as exc:
            raise UserError(f"{type(exc).__name__}: {exc}") from exc
        print(json.dumps({"label": v.degradation_label, "score": v.score, "rescaled": v.rescaled}))
        return EXIT_OK
    cfg = _config(args)
    imgs = [data.load_image(p) for p in (args.degraded, args.restored, args.reference)]
    endpoint = args.judge_endpoint or rc.judge_endpoint(cfg)
    req = jd.JudgeRequest(*imgs)
    if endpoint:
        v = jd.HttpJudge(endpoint, cfg["judge_timeout_ms"] / 1000.0, cfg["judge_retries"])(req)
    else:
        v = jd.mock_judge(req.restored, req.reference)
    print(json.dumps({
        "mode": "http" if endpoint else "mock",
        "label": v.degradation_label,
        "score": v.score,
        "rescaled": v.rescaled,
        "fallback": v.fallback,
        "analysis": v.analysis,
    }))
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="grpo-restore", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, judge=True):
        sp.add_argument("--config", help="flat JSON run config")
        sp.add_argument("--preset", default="default", choices=sorted(rc.PRESETS))
        if judge:
            sp.add_argument("--judge-endpoint", help=f"judge URL (else ${jd.ENDPOINT_ENV}, else mock)")

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    common(sp, judge=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-kind", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("mine", help="score the corpus and select hard samples")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--ratio", type=float)
    sp.set_defaults(func=cmd_mine)

    sp = sub.add_parser("train", help="GRPO post-training on the selected samples")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="per-epoch curves from a metrics CSV")
    common(sp, judge=False)
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("judge", help="judge diagnostics")
    jsub = sp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    jsub.add_parser("prompt", help="print the judge prompt")
    jp = jsub.add_parser("parse", help="parse a judge reply ('-' for stdin)")
    jp.add_argument("file")
    js = jsub.add_parser("score", help="score one image triple")
    common(js)
    js.add_argument("--degraded", required=True)
    js.add_argument("--restored", required=True)
    js.add_argument("--reference", required=True)
    sp.set_defaults(func=cmd_judge)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UserError, rc.ConfigError, data.ImageFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except FloatingPointError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - reported as internal failure
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
