"""Command line entry point: ``bevhead {gen,train,eval,ablate,diag}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from bevhead import experiments as ex
from bevhead.config import ConfigError, RunConfig, load_config, parse_text
from bevhead.decode import save_detections
from bevhead.head import HeadConfigError
from bevhead.scene import FrameFormatError, load_frames, save_frames
from bevhead.train import LOG_COLUMNS, TrainingError, load_checkpoint, save_checkpoint, train_run

TRAIN_FILE = "train.jsonl"
EVAL_FILE = "eval.jsonl"


class CliError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, help="run seed (data seed for gen)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--serial", action="store_true", help="single process, bit-exact mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevhead", description="Toy BEV center-head detector experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write train/eval frame files")
    _common(p)

    p = sub.add_parser("train", help="train a head and write checkpoint + log")
    _common(p)
    p.add_argument("--data", type=Path, help="directory with frame files (default: --out)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval frames")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--ckpt", type=Path, required=True)

    p = sub.add_parser("ablate", help="run an ablation matrix over seeds")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--matrix", default="components", help=f"preset name(s), comma separated: {', '.join(ex.PRESETS)}")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel cell processes (ignored with --serial)")

    p = sub.add_parser("diag", help="center-offset and quality diagnostics for one or more checkpoints")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--ckpt", action="append", required=True, metavar="LABEL=PATH", help="repeatable")
    return parser


def _config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        key = "data_seed" if args.command == "gen" else "seed"
        overrides.append(f"{key}={args.seed}")
    return load_config(args.config, overrides)


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from exc


def _load_data(args, cfg: RunConfig, which: str):
    d = args.data if getattr(args, "data", None) is not None else args.out
    path = d / which
    if not path.exists():
        raise CliError(f"frame file {path} not found (run `bevhead gen --out {d}` first)")
    return load_frames(path, cfg.scene_config().num_classes)


def cmd_gen(args, cfg: RunConfig) -> None:
    train, ev = ex.build_datasets(cfg)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        save_frames(train, args.out / TRAIN_FILE)
        save_frames(ev, args.out / EVAL_FILE)
    except OSError as exc:
        raise CliError(f"cannot write frames to {args.out}: {exc}") from exc
    _write(args.out / "gen_config.txt", f"# config_hash = {cfg.digest()}\n" + cfg.to_text())
    print(f"wrote {len(train)} train and {len(ev)} eval frames to {args.out} (config {cfg.digest()})")


def _log_csv(logs, digest: str) -> str:
    rows = [dict(r, config_hash=digest) for r in logs]
    return ex.rows_to_csv(rows, LOG_COLUMNS + ("config_hash",))


def cmd_train(args, cfg: RunConfig) -> None:
    frames = _load_data(args, cfg, TRAIN_FILE)
    state, logs = train_run(frames, cfg.train_config(), cfg.seed, cfg.grid())
    digest = cfg.digest()
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "checkpoint.json", state.eval_params(), {"config_hash": digest, "steps": state.step, "config": cfg.to_text()})
    _write(args.out / "train_log.csv", _log_csv(logs, digest))
    _write(args.out / "run_config.txt", f"# config_hash = {digest}\n" + cfg.to_text())
    last = logs[-1]["loss_total"] if logs else float("nan")
    print(f"trained {state.step} steps, final loss {last:.4f} (config {digest})")


def _load_ckpt(path: Path, cfg: RunConfig):
    params, meta = load_checkpoint(path)
    want = cfg.train_config().head_spec()
    if params.spec != want:
        raise HeadConfigError(f"checkpoint {path} was built for {params.spec}, config expects {want}")
    return params, meta


def cmd_eval(args, cfg: RunConfig) -> None:
    frames = _load_data(args, cfg, EVAL_FILE)
    params, _ = _load_ckpt(args.ckpt, cfg)
    report, dets = ex.evaluate_params(params, frames, cfg)
    _write(args.out / "report.json", report.to_json() + "\n")
    _write(args.out / "report.csv", report.to_csv())
    args.out.mkdir(parents=True, exist_ok=True)
    save_detections(args.out / "detections.jsonl", [(fr.frame_id, d) for fr, d in zip(frames, dets)])
    print(f"mAP {report.mAP} over {len(frames)} frames (config {report.config_hash})")


def _cells(names: str):
    out = []
    for name in [n.strip() for n in names.split(",") if n.strip()]:
        if name not in ex.PRESETS:
            raise CliError(f"unknown matrix {name!r}; choose from {', '.join(ex.PRESETS)}")
        out.append((name, ex.PRESETS[name]))
    return out


def _ablate_job(payload):
    cfg_text, name, label, overrides, seed, (train, ev) = payload
    base = RunConfig(**parse_text(cfg_text))
    return ex.run_matrix(base, name, [(label, overrides)], [seed], train, ev)[0]


def cmd_ablate(args, cfg: RunConfig) -> None:
    train = _load_data(args, cfg, TRAIN_FILE)
    ev = _load_data(args, cfg, EVAL_FILE)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise CliError(f"bad --seeds {args.seeds!r}") from exc
    matrices = _cells(args.matrix)
    rows = []
    if args.serial or args.jobs <= 1:
        cache = ex.ResultCache()
        for name, cells in matrices:
            rows += ex.run_matrix(cfg, name, cells, seeds, train, ev, cache, progress=lambda m: print(m, file=sys.stderr))
    else:
        from concurrent.futures import ProcessPoolExecutor

        jobs = [(cfg.to_text(), name, label, ov, s, (train, ev)) for name, cells in matrices for label, ov in cells for s in seeds]
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_ablate_job, jobs))
        k = 0
        for name, cells in matrices:
            for label, _ in cells:
                per = results[k : k + len(seeds)]
                k += len(seeds)
                rows += per + ex.aggregate_rows(name, label, [r for r in per if r["status"] == "ok"])
    _write(args.out / "ablation.csv", ex.rows_to_csv(rows, ex.ABLATION_COLUMNS))
    _write(args.out / "ablation_config.txt", f"# config_hash = {cfg.digest()}\n" + cfg.to_text())
    failed = sum(r["status"] == "failed" for r in rows)
    print(f"wrote {args.out / 'ablation.csv'} ({len(rows)} rows, {failed} failed cells)")


def cmd_diag(args, cfg: RunConfig) -> None:
    frames = _load_data(args, cfg, EVAL_FILE)
    rows = []
    for item in args.ckpt:
        if "=" not in item:
            raise CliError(f"--ckpt expects LABEL=PATH, got {item!r}")
        label, path = item.split("=", 1)
        params, _ = load_checkpoint(path)
        # a checkpoint carries its own head shape; decode settings come from the run config
        rows += ex.diagnostic_rows(label, params, frames, cfg)
    _write(args.out / "diagnostics.csv", ex.rows_to_csv(rows, ex.DIAG_COLUMNS))
    print(f"wrote {args.out / 'diagnostics.csv'} ({len(rows)} rows)")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "diag": cmd_diag}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (CliError, ConfigError, HeadConfigError, FrameFormatError, TrainingError, OSError) as exc:
        print(f"bevhead {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
