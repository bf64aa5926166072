"""``metadapt`` command line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from metadapt import pipeline as P
from metadapt.errors import MetAdaptError, PreconditionError
from metadapt.search_space import AdaptiveBlock, AlphaTable, export_dot

log = logging.getLogger("metadapt")


def _config(args) -> P.RunConfig:
    cfg = P.RunConfig.from_json(args.config) if args.config else P.RunConfig()
    overrides = {}
    for flag, name in (
        ("seed", "seed"),
        ("order", "order"),
        ("ops", "ops"),
        ("gumbel_temp", "gumbel_temp"),
        ("gumbel_decay", "gumbel_decay"),
        ("output_dir", "output_dir"),
        ("second_order_mode", "second_order_mode"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    for flag in ("stochastic", "flip", "finetune", "uniform_alpha"):
        if getattr(args, flag, False):
            overrides[flag] = True
    if getattr(args, "episodes", None) is not None:
        overrides["eval_episodes"] = args.episodes
    return replace(cfg, **overrides) if overrides else cfg


def _checkpoint_path(args, out: Path, *names: str) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    for name in names:
        if (out / name).exists():
            return out / name
    raise PreconditionError(f"no checkpoint given and none of {list(names)} found in {out}")


def _setup(cfg: P.RunConfig, out: Path):
    splits = P.load_splits(cfg)
    (out / "config.json").write_text(cfg.to_json())
    return splits, P.Metrics(out / "metrics.csv")


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    with P.run_dir(cfg) as out:
        splits, metrics = _setup(cfg, out)
        model = P.pretrain(cfg, splits, metrics)
        P.save_model(out / "pretrain.mack", model, "pretrain")
    print(out / "pretrain.mack")
    return 0


def cmd_search(args) -> int:
    cfg = _config(args)
    with P.run_dir(cfg) as out:
        splits, metrics = _setup(cfg, out)
        ck = _checkpoint_path(args, out, "pretrain.mack")
        model = P.load_model(ck, cfg, splits["train"].image_shape, ("pretrain",), args.force)
        feats = P.FeatureCache(model.stem, splits)
        alpha_dir = out / "alpha"
        alpha_dir.mkdir(exist_ok=True)

        def on_epoch(epoch, m):
            P.write_alpha_exports(alpha_dir, m, f"epoch_{epoch:03d}")

        res = P.search(model, feats, splits, metrics, on_epoch=on_epoch)
        P.write_alpha_exports(out, model, "alpha")
        P.save_model(out / "search.mack", model, "search", {"gap": [res.train_accuracy, res.val_accuracy]})
    print(json.dumps({"train_accuracy": res.train_accuracy, "val_accuracy": res.val_accuracy, "gap": res.gap}))
    return 0


def cmd_controllers(args) -> int:
    cfg = _config(args)
    with P.run_dir(cfg) as out:
        splits, metrics = _setup(cfg, out)
        ck = _checkpoint_path(args, out, "search.mack", "transfer.mack")
        model = P.load_model(ck, cfg, splits["train"].image_shape, ("search", "transfer"), args.force)
        feats = P.FeatureCache(model.stem, splits)
        curve = P.train_controllers(model, feats, splits, metrics)
        P.save_model(out / "controllers.mack", model, "controllers", {"val_curve": curve})
    print(json.dumps({"val_curve": curve}))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    splits = P.load_splits(cfg)
    out = Path(cfg.output_dir)
    ck = _checkpoint_path(args, out, "controllers.mack", "search.mack", "transfer.mack", "pretrain.mack")
    model = P.load_model(ck, cfg, splits["train"].image_shape, None, args.force)
    feats = P.FeatureCache(model.stem, splits)
    report = P.evaluate(
        model,
        feats,
        splits,
        use_plain=model.block is None,
        use_bank=model.bank is not None,
        dump_alpha=Path(args.dump_alpha) if args.dump_alpha else None,
    )
    text = json.dumps(report.as_dict(), indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return 0


def cmd_transfer(args) -> int:
    cfg = _config(args)
    with P.run_dir(cfg) as out:
        splits, metrics = _setup(cfg, out)
        if args.checkpoint:
            model = P.load_model(Path(args.checkpoint), cfg, splits["train"].image_shape, ("pretrain",), args.force)
        else:
            model = P.pretrain(cfg, splits, metrics)
            P.save_model(out / "pretrain.mack", model, "pretrain")
        alpha = AlphaTable.from_csv(Path(args.alpha_csv).read_text(), cfg.nodes)
        if P.op_set(cfg.ops) != alpha.ops:
            raise PreconditionError(f"alpha CSV operations do not match ops={cfg.ops!r}")
        feats = P.FeatureCache(model.stem, splits)
        P.search(model, feats, splits, metrics, alpha=alpha, full_train=True, tag="transfer")
        if args.with_controllers:
            P.train_controllers(model, feats, splits, metrics)
        P.save_model(out / "transfer.mack", model, "transfer")
        report = P.evaluate(model, feats, splits, use_bank=args.with_controllers)
        (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    print(json.dumps(report.as_dict(), indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = args.rows
    if not set(rows) <= set(P.ABLATION_ROWS):
        raise PreconditionError(f"rows must be drawn from {''.join(P.ABLATION_ROWS)}")
    with P.run_dir(cfg) as out:
        splits = P.load_splits(cfg)
        (out / "config.json").write_text(cfg.to_json())
        metrics = P.Metrics(out / "metrics.csv")
        runs = []
        for k in range(args.seeds):
            seed_cfg = replace(cfg, seed=cfg.seed + k)
            runs.extend(P.ablate_seed(seed_cfg, splits, rows, metrics))
            log.info("seed %d done", seed_cfg.seed)
        md, csv_text = P.ablation_table(runs)
        (out / "table.md").write_text(md)
        (out / "table.csv").write_text(csv_text)
        with (out / "runs.csv").open("w") as f:
            f.write("seed,row,accuracy,ci95,gap\n")
            for r in runs:
                f.write(f"{r.seed},{r.row},{r.accuracy:.6f},{r.ci95:.6f},{r.gap:.6f}\n")
    print(md, end="")
    return 0


def cmd_export_dag(args) -> int:
    cfg = _config(args)
    if args.alpha_csv:
        alpha = AlphaTable.from_csv(Path(args.alpha_csv).read_text())
        block = AdaptiveBlock(1, alpha.nodes, alpha.ops)
    else:
        splits = P.load_splits(cfg)
        ck = _checkpoint_path(args, Path(cfg.output_dir), "controllers.mack", "search.mack", "transfer.mack")
        model = P.load_model(ck, cfg, splits["train"].image_shape, None, args.force)
        if model.block is None:
            raise PreconditionError(f"{ck} holds no adaptive block")
        block, alpha = model.block, model.alpha
    dot = export_dot(block, alpha, k=args.top_k)
    if args.out:
        Path(args.out).write_text(dot)
    else:
        sys.stdout.write(dot)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metadapt", description="Task-adaptive architecture search for few-shot classification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config", help="JSON file with RunConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--order", choices=["first", "second"])
        p.add_argument("--second-order-mode", choices=["exact", "finite-diff"])
        p.add_argument("--ops", choices=["full", "reduced"])
        p.add_argument("--stochastic", action="store_true", help="Gumbel-sampled operations (S-MetAdapt)")
        p.add_argument("--gumbel-temp", type=float)
        p.add_argument("--gumbel-decay", type=float)
        p.add_argument("--flip", action="store_true", help="add mirrored support samples")
        p.add_argument("--finetune", action="store_true", help="fine-tune block weights per test episode")
        p.add_argument("--uniform-alpha", action="store_true", help="keep alpha at its uniform initialisation")
        p.add_argument("--output-dir")
        if checkpoint:
            p.add_argument("--checkpoint")
            p.add_argument("--force", action="store_true", help="load checkpoints with a different config hash")
        return p

    common(sub.add_parser("pretrain", help="episodic pretraining of stem and plain block")).set_defaults(fn=cmd_pretrain)
    common(sub.add_parser("search", help="bi-level search of the adaptive block")).set_defaults(fn=cmd_search)
    common(sub.add_parser("controllers", help="train the per-edge controllers")).set_defaults(fn=cmd_controllers)
    p = common(sub.add_parser("eval", help="meta-test evaluation"))
    p.add_argument("--episodes", type=int)
    p.add_argument("--dump-alpha", metavar="DIR", help="write the adapted alpha of every episode as CSV")
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(fn=cmd_eval)
    p = common(sub.add_parser("transfer", help="retrain block weights under a fixed alpha"))
    p.add_argument("--alpha-csv", required=True)
    p.add_argument("--with-controllers", action="store_true")
    p.set_defaults(fn=cmd_transfer)
    p = common(sub.add_parser("ablate", help="ablation matrix over several seeds"), checkpoint=False)
    p.add_argument("--rows", default="abcdefgh")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--episodes", type=int)
    p.set_defaults(fn=cmd_ablate)
    p = common(sub.add_parser("export-dag", help="Graphviz DOT of the strongest operations per edge"))
    p.add_argument("--alpha-csv")
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_export_dag)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (MetAdaptError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"metadapt: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
