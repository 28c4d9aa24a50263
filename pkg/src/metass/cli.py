"""Command-line entry point: ``metass <command> [flags]``.

Relative manifest and checkpoint paths resolve against ``$METASS_DATA_ROOT``
when it is set. Every run writes ``run.json`` in its output directory with
the full resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as hz
from .taskgen import data_root

log = logging.getLogger("metass")


def _resolve(path: str | None) -> str | None:
    if path is None:
        return None
    p = Path(path)
    return str(p if p.is_absolute() else data_root() / p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metass", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="YAML or JSON file with ExperimentConfig fields; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifests=True):
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--model", choices=sorted(hz.MODEL_PRESETS))
        if manifests:
            p.add_argument("--train-manifest", dest="train_manifest")
            p.add_argument("--dev-manifest", dest="dev_manifest")
            p.add_argument("--test-manifest", dest="test_manifests", action="append")
            p.add_argument("--checkpoint")
            p.add_argument("--workers", type=int)

    p = sub.add_parser("make-tasks", help="write synthetic train/dev/test manifests")
    common(p, manifests=False)
    p.add_argument("--train-speakers", type=int, default=12)
    p.add_argument("--dev-speakers", type=int, default=4)
    p.add_argument("--test-speakers", type=int, default=6)
    p.add_argument("--duration", type=float, default=1.0, help="seconds per utterance")
    p.add_argument("--noise", action=argparse.BooleanOptionalAction, default=None, help="also write a noisy test set")

    p = sub.add_parser("pretrain", help="multitask pretraining")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--half-fraction", dest="half_fraction", type=float)

    p = sub.add_parser("meta-train", help="MAML / ANIL meta-training")
    common(p)
    p.add_argument("--algo", choices=hz.ALGOS[1:], default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--meta-grad-mode", dest="meta_grad_mode", choices=list(hz.ml.META_GRAD_MODES))

    p = sub.add_parser("adapt-eval", help="one-shot adaptation and query evaluation")
    common(p)
    p.add_argument("--regime", dest="finetune_regime", choices=[*hz.REGIMES, "none"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--method", default=None, help="row label in the table (default: checkpoint algo)")
    p.add_argument("--pretrain-tag", default="best", help="p.t. label in the table")

    p = sub.add_parser("sweep-lr", help="fine-tune learning-rate sweep over all regimes")
    common(p)
    return parser


_MODES = {
    "make-tasks": "make_tasks",
    "pretrain": "pretrain",
    "meta-train": "meta_train",
    "adapt-eval": "adapt_eval",
    "sweep-lr": "sweep_lr",
}
_NON_CONFIG = {"command", "config", "verbose", "train_speakers", "dev_speakers", "test_speakers", "duration", "method", "pretrain_tag"}


def make_config(args: argparse.Namespace) -> hz.ExperimentConfig:
    data = {}
    if args.config:
        data = hz.ExperimentConfig.from_file(args.config).to_dict()
    for k, v in vars(args).items():
        if k not in _NON_CONFIG and v is not None:
            data[k] = v
    data["mode"] = _MODES[args.command]
    if args.command == "meta-train":
        data["algo"] = args.algo or (data.get("algo") if data.get("algo") not in (None, "multitask") else "maml")
    elif args.command == "pretrain":
        data["algo"] = "multitask"
    for key in ("train_manifest", "dev_manifest", "checkpoint"):
        data[key] = _resolve(data.get(key))
    data["test_manifests"] = [_resolve(p) for p in data.get("test_manifests") or []]
    return hz.ExperimentConfig.from_dict(data)


def cmd_make_tasks(cfg, args, out: Path) -> dict:
    noise = cfg.noise if args.noise is None else args.noise
    data = hz.make_desk_tasks(
        cfg.seed, args.train_speakers, args.dev_speakers, args.test_speakers, args.duration, noisy_test=noise
    )
    paths = hz.write_desk_manifests(data, out)
    return {"manifests": {k: str(v) for k, v in paths.items()}}


def cmd_pretrain(cfg, args, out: Path) -> dict:
    train = hz.load_tasks(cfg.train_manifest, "train")
    dev = hz.load_tasks(cfg.dev_manifest, "dev") if cfg.dev_manifest else []
    init = hz.load_params(cfg) if cfg.checkpoint else None
    res = hz.run_pretrain(cfg, train, dev, init)
    hz.write_loss_csv(res.history, out / "loss.csv")
    hz.save_params(res.best, out / "best.ckpt", cfg, algo="multitask", epoch=res.best_epoch, tag="best")
    hz.save_params(res.half, out / "half.ckpt", cfg, algo="multitask", tag="half")
    hz.save_params(res.last, out / "last.ckpt", cfg, algo="multitask", epoch=cfg.epochs, tag="last")
    return {"best_epoch": res.best_epoch, "initial_train_loss": res.initial_train_loss, "final_train_loss": res.final_train_loss}


def cmd_meta_train(cfg, args, out: Path) -> dict:
    train = hz.load_tasks(cfg.train_manifest, "train")
    dev = hz.load_tasks(cfg.dev_manifest, "dev") if cfg.dev_manifest else []
    init = hz.load_params(cfg) if cfg.checkpoint else None
    res = hz.run_meta_train(cfg, train, dev, init)
    hz.write_loss_csv(res.history, out / "loss.csv")
    tag = "best" if cfg.checkpoint else "-"
    hz.save_params(res.best, out / "best.ckpt", cfg, algo=cfg.algo, epoch=res.best_epoch, pretrain=tag)
    hz.save_params(res.last, out / "last.ckpt", cfg, algo=cfg.algo, epoch=cfg.epochs, pretrain=tag)
    return {"best_epoch": res.best_epoch}


def _test_sets(cfg) -> list[tuple[str, list]]:
    if not cfg.test_manifests:
        raise ValueError("at least one --test-manifest is required")
    return [(Path(p).stem, hz.read_manifest(p)) for p in cfg.test_manifests]


def cmd_adapt_eval(cfg, args, out: Path) -> dict:
    params, meta = hz.load_checkpoint(cfg.checkpoint) if cfg.checkpoint else (hz.load_params(cfg), {})
    method = args.method or meta.get("algo", "multitask")
    reports = []
    for name, tasks in _test_sets(cfg):
        rep = hz.run_adapt_eval(
            params,
            tasks,
            cfg.finetune_regime,
            cfg.alpha,
            cfg.workers,
            {"method": method, "pretrain": meta.get("pretrain") or meta.get("tag") or args.pretrain_tag, "column": name},
        )
        (out / f"report_{name}.csv").write_text(rep.to_csv())
        reports.append(rep)
    text, table_csv, table_json = hz.emit_report(reports, published_column="libri")
    (out / "table.txt").write_text(text)
    (out / "table.csv").write_text(table_csv)
    (out / "table.json").write_text(table_json)
    print(text, end="")
    return {"summaries": [r.summary() for r in reports]}


def cmd_sweep_lr(cfg, args, out: Path) -> dict:
    params = hz.load_params(cfg)
    results = {}
    for name, tasks in _test_sets(cfg):
        sweep = hz.run_lr_sweep(params, tasks, workers=cfg.workers)
        (out / f"sweep_{name}.csv").write_text(sweep.to_csv())
        results[name] = [list(r) for r in sweep.rows]
    return {"sweep": results}


COMMANDS = {
    "make-tasks": cmd_make_tasks,
    "pretrain": cmd_pretrain,
    "meta-train": cmd_meta_train,
    "adapt-eval": cmd_adapt_eval,
    "sweep-lr": cmd_sweep_lr,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = make_config(args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        flags = {k: v for k, v in vars(args).items() if v is not None}
        result = COMMANDS[args.command](cfg, args, out)
        hz.save_run_header(cfg, out, {"command": args.command, "flags": flags, "result": result})
    except (ValueError, FileNotFoundError) as exc:
        print(f"metass: error: {exc}", file=sys.stderr)
        return 2
    log.info("%s", json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
