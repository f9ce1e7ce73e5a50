"""Command line: ``olat <gen-data|pretrain-ae|train|complete|eval> [options] [key=value ...]``.

Exit codes: 0 success, 1 runtime failure (bad files, I/O), 2 training
diverged, 3 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .cloudio import read_cloud, write_cloud
from .config import TrainConfig, load_config
from .datagen import build_dataset, read_manifest
from .errors import ConfigError, NumericError, OlatError
from .models import load_parameter_set, parameter_set
from .trainer import (
    AE_ROLES,
    Trainer,
    build_networks,
    complete_cloud,
    evaluate,
    log_header,
    merge_reports,
    networks_from_checkpoint,
    prepare_clouds,
    pretrain_complete_ae,
)

log = logging.getLogger("olat")

EXIT_OK, EXIT_RUNTIME, EXIT_DIVERGED, EXIT_CONFIG = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p):
    p.add_argument("--config", help="key = value config file (overrides apply on top)")
    p.add_argument("--toy", action="store_true", help="start from the desk-scale preset instead of full scale")
    p.add_argument("--run-dir", default=None, help="run directory (default: $OLAT_RUN_DIR or ./run)")
    p.add_argument("overrides", nargs="*", metavar="key=value")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="olat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("gen-data", help="write the synthetic train/eval splits"))
    _common(sub.add_parser("pretrain-ae", help="train the complete-shape auto-encoder per category"))
    _common(sub.add_parser("train", help="unpaired training, one model per category"))
    p = sub.add_parser("complete", help="complete partial clouds with a trained model")
    _common(p)
    p.add_argument("--input", help="single cloud file (.pcb binary, otherwise ASCII)")
    p.add_argument("--manifest", help="manifest whose partial entries are completed")
    p.add_argument("--category", help="model category for --input (default: first configured)")
    p.add_argument("--out", default=None, help="output directory (default: <run-dir>/completions)")
    p.add_argument("--png", action="store_true", help="also write orthographic projection images")
    p = sub.add_parser("eval", help="metrics for the eval split, written to report.csv")
    _common(p)
    p.add_argument("--manifest", help="eval manifest (default: <data_dir>/eval.manifest)")
    return parser


def _config(args, run_dir: Path) -> TrainConfig:
    """Config precedence: --config file, else the run's config.echo, else a preset; overrides last."""
    base = TrainConfig.toy() if args.toy else TrainConfig()
    path = args.config or (run_dir / "config.echo" if (run_dir / "config.echo").exists() else None)
    if path:
        try:
            return load_config(path, args.overrides, base=base)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return base.with_overrides(args.overrides)


def _data_dir(cfg: TrainConfig, run_dir: Path) -> Path:
    d = Path(cfg.data_dir)
    return d if d.is_absolute() else run_dir / d


def _load_split(man, role, category, n_points, seed):
    clouds = [read_cloud(p) for p in man.paths(role, category)]
    if not clouds:
        raise OlatError(f"no {role} clouds for category {category!r}")
    return prepare_clouds(clouds, n_points, seed)


def cmd_gen_data(cfg, run_dir, args):
    out = _data_dir(cfg, run_dir)
    mans = build_dataset(cfg, out)
    log.info("wrote %d train and %d eval entries under %s", len(mans["train"].entries), len(mans["eval"].entries), out)
    return EXIT_OK


def cmd_pretrain_ae(cfg, run_dir, args):
    man = read_manifest(_data_dir(cfg, run_dir) / "train.manifest")
    with open(run_dir / "ae.log", "w") as fh:
        for cat in cfg.categories:
            complete = _load_split(man, "complete", cat, cfg.n_out, cfg.seed + 1)
            nets, hist = pretrain_complete_ae(cfg, complete, callback=lambda s, v: fh.write(f"{cat}\t{s}\t{v!r}\n"))
            sets = {r: parameter_set(nets[r]) for r in AE_ROLES}
            ckpt_io.save(run_dir / f"ckpt_ae_{cat}.olat", ckpt_io.Checkpoint(cfg, sets, {"category": cat}))
            log.info("%s: auto-encoder loss %.5f -> %.5f", cat, hist[0], hist[-1])
    return EXIT_OK


def cmd_train(cfg, run_dir, args):
    man = read_manifest(_data_dir(cfg, run_dir) / "train.manifest")
    with open(run_dir / "train.log", "w") as fh:
        fh.write(log_header())
        for cat in cfg.categories:
            partial = _load_split(man, "partial", cat, cfg.n_points, cfg.seed)
            complete = _load_split(man, "complete", cat, cfg.n_out, cfg.seed + 1)
            ae_path = run_dir / f"ckpt_ae_{cat}.olat"
            if ae_path.exists():
                nets = build_networks(cfg)
                ae = ckpt_io.load(ae_path)
                for role in AE_ROLES:
                    load_parameter_set(nets[role], ae.sets[role])
            else:
                log.info("%s: no %s, pretraining the auto-encoder first", cat, ae_path.name)
                nets, _ = pretrain_complete_ae(cfg, complete)
            tr = Trainer(cfg, partial, complete, nets=nets)
            last_good = tr.to_checkpoint(cat)
            ckpt_path = run_dir / f"ckpt_{cat}.olat"
            try:
                for _ in range(tr.total_steps() - tr.step):
                    tr.run(1, log_fh=fh, category=cat)
                    last_good = tr.to_checkpoint(cat)
                    if cfg.ckpt_every and tr.step % cfg.ckpt_every == 0:
                        ckpt_io.save(ckpt_path, last_good)
            except NumericError as exc:
                fh.flush()
                ckpt_io.save(ckpt_path, last_good)
                log.error("%s: training diverged (%s); last finite state saved to %s", cat, exc, ckpt_path)
                return EXIT_DIVERGED
            ckpt_io.save(ckpt_path, last_good)
            log.info("%s: %d steps, checkpoint %s", cat, tr.step, ckpt_path)
    return EXIT_OK


def _model(run_dir, cat):
    path = run_dir / f"ckpt_{cat}.olat"
    ck = ckpt_io.load(path)
    return ck.config, networks_from_checkpoint(ck)


def save_projections(path, cloud, title=""):
    """Three axis-aligned orthographic scatter views of ``cloud`` in one PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, (i, j, name) in zip(axes, ((0, 1, "x-y"), (0, 2, "x-z"), (2, 1, "z-y"))):
        ax.scatter(cloud[:, i], cloud[:, j], s=1, c="k")
        ax.set_aspect("equal")
        ax.set_title(name, fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=9)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_complete(cfg, run_dir, args):
    if bool(args.input) == bool(args.manifest):
        raise ConfigError("complete needs exactly one of --input or --manifest")
    out = Path(args.out) if args.out else run_dir / "completions"
    out.mkdir(parents=True, exist_ok=True)
    if args.input:
        jobs = [(args.category or cfg.categories[0], Path(args.input))]
    else:
        jobs = [(cat, p) for cat, p, _ in read_manifest(args.manifest).eval_pairs()]
    models = {}
    for i, (cat, src) in enumerate(jobs):
        if cat not in models:
            models[cat] = _model(run_dir, cat)
        mcfg, nets = models[cat]
        pred = complete_cloud(nets, read_cloud(src), mcfg, seed=i)
        dst = out / f"{src.stem}.pcb"
        write_cloud(dst, pred)
        if args.png:
            save_projections(out / f"{src.stem}.png", pred, f"{cat} {src.stem}")
        log.info("%s -> %s (%d points)", src, dst, len(pred))
    return EXIT_OK


def cmd_eval(cfg, run_dir, args):
    man = read_manifest(args.manifest or _data_dir(cfg, run_dir) / "eval.manifest")
    reports = {}
    for cat in man.categories():
        mcfg, nets = _model(run_dir, cat)
        samples = [(read_cloud(p), read_cloud(gt) if gt is not None else None) for _, p, gt in man.eval_pairs(cat)]
        reports[cat] = evaluate(nets, mcfg, samples, category=cat)
    report = merge_reports(reports, cfg.tau)
    report.write_csv(run_dir / "report.csv")
    log.info("report written to %s", run_dir / "report.csv")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "pretrain-ae": cmd_pretrain_ae, "train": cmd_train,
            "complete": cmd_complete, "eval": cmd_eval}


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        run_dir = Path(args.run_dir or os.environ.get("OLAT_RUN_DIR") or "run")
        cfg = _config(args, run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        echo = run_dir / "config.echo"
        # inference commands read their config from the checkpoint; keep the training echo
        if args.command not in ("complete", "eval") or not echo.exists():
            echo.write_text(cfg.to_text())
        return COMMANDS[args.command](cfg, run_dir, args)
    except ConfigError as exc:
        print(f"olat: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"olat: numeric failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OlatError, OSError) as exc:
        print(f"olat: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
