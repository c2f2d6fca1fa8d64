"""Command-line interface.

Subcommands mirror the pipeline stages: data build/corrupt, train
stage1/stage3, curate, generate, eval, downstream, ablate.  Every command
takes --config (TOML or JSON) whose keys match the corresponding config
dataclass; --seed and --out override the file.  Exit codes: 0 success,
1 contract violation, 2 filesystem/IO failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import DatasetManifest
from .phantom import build_manifest, corrupt_captions, inject_boilerplate
from .pipeline import (AblationConfig, CurateConfig, DownstreamConfig,
                       EvalConfig, GenerateConfig, StageConfig,
                       downstream_augment, evaluate, generate, locked_dir,
                       run_ablation, stage1_pretrain, stage2_curate,
                       stage3_finetune)
from .util import ContractError, load_config_file


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowgen",
                                description="caption-conditioned flow-matching "
                                            "image synthesis pipeline")
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="override config output path")
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="synthetic dataset tools")
    dsub = data.add_subparsers(dest="subcommand", required=True)
    build = dsub.add_parser("build", help="render a captioned dataset")
    build.add_argument("--n", type=int, help="number of images")
    build.add_argument("--resolution", type=int, help="square resolution")
    corrupt = dsub.add_parser("corrupt", help="swap captions across grades")
    corrupt.add_argument("--manifest", help="input manifest path")
    corrupt.add_argument("--fraction", type=float, help="fraction to corrupt")
    corrupt.add_argument("--boilerplate", type=float,
                         help="also pad this fraction with boilerplate clauses")

    train = sub.add_parser("train", help="train the generator")
    tsub = train.add_subparsers(dest="subcommand", required=True)
    tsub.add_parser("stage1", help="low-resolution pretraining")
    tsub.add_parser("stage3", help="high-resolution fine-tuning")

    sub.add_parser("curate", help="similarity filtering + caption refinement")
    sub.add_parser("generate", help="sample images from a checkpoint")
    sub.add_parser("eval", help="distribution + alignment metrics")
    sub.add_parser("downstream", help="scarce-data augmentation experiment")
    sub.add_parser("ablate", help="component ablation ladder")
    return p


def _load_config(args) -> dict:
    cfg = dict(load_config_file(args.config)) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _cmd_data(args, cfg: dict) -> None:
    if args.subcommand == "build":
        n = args.n if args.n is not None else int(cfg.pop("n", 500))
        if args.resolution is not None:
            cfg["resolution"] = args.resolution
        out = Path(args.out or cfg.pop("out_dir", None) or "data")
        seed = int(cfg.pop("seed", 0))
        with locked_dir(out):
            manifest = build_manifest(n, seed, out, **cfg)
        print(f"wrote {len(manifest.records)} records to {out / 'manifest.jsonl'}")
    else:
        src = args.manifest or cfg.pop("manifest", None)
        if not src:
            raise ContractError("data corrupt needs --manifest")
        fraction = args.fraction if args.fraction is not None \
            else float(cfg.pop("fraction", 0.2))
        seed = int(cfg.pop("seed", 0))
        manifest = DatasetManifest.load(src)
        out = Path(args.out or cfg.pop("out_path", None)
                   or Path(src).with_name("manifest_corrupted.jsonl"))
        corrupted = corrupt_captions(manifest, fraction, seed)
        boiler = args.boilerplate if args.boilerplate is not None \
            else cfg.pop("boilerplate", None)
        if boiler:
            corrupted = inject_boilerplate(corrupted, float(boiler), seed,
                                           out_path=out)
        else:
            corrupted.save(out)
        n_bad = sum(r.mismatched for r in corrupted.records)
        print(f"wrote {out} ({n_bad} mismatched captions)")


def _cmd_train(args, cfg: dict) -> None:
    cfg.setdefault("stage", "pretrain" if args.subcommand == "stage1" else "finetune")
    if args.out:
        cfg["out_checkpoint"] = args.out
    sc = StageConfig.from_dict(cfg)
    with locked_dir(Path(sc.out_checkpoint).parent):
        path = stage1_pretrain(sc) if sc.stage == "pretrain" else stage3_finetune(sc)
    print(f"wrote {path}")


def _cmd_curate(args, cfg: dict) -> None:
    if args.out:
        cfg["out_dir"] = args.out
    cc = CurateConfig.from_dict(cfg)
    with locked_dir(cc.out_dir):
        res = stage2_curate(cc)
    rep = res["report"]
    print(f"kept {len(rep.kept_ids)} dropped {len(rep.dropped_ids)} "
          f"threshold {res['threshold']:.4f} -> {res['manifest']}")


def _cmd_generate(args, cfg: dict) -> None:
    if args.out:
        cfg["out_dir"] = args.out
    gc = GenerateConfig.from_dict(cfg)
    with locked_dir(gc.out_dir):
        paths = generate(gc)
    print(f"wrote {len(paths)} images to {gc.out_dir}")


def _cmd_eval(args, cfg: dict) -> None:
    if args.out:
        cfg["out_dir"] = args.out
    ec = EvalConfig.from_dict(cfg)
    with locked_dir(ec.out_dir):
        payload = evaluate(ec)
    for split, rep in payload["reports"].items():
        print(f"{split}: fid {rep['fid']:.4f} kid {rep['kid_mean']:.6f} "
              f"is {rep['inception_score']:.4f} align {rep['alignment_score']:.4f}")


def _cmd_downstream(args, cfg: dict) -> None:
    if args.out:
        cfg["out_dir"] = args.out
    dc = DownstreamConfig.from_dict(cfg)
    with locked_dir(dc.out_dir):
        payload = downstream_augment(dc)
    for arm, stats in payload["median"].items():
        print(f"{arm}: acc {stats['accuracy']:.4f} f1 {stats['macro_f1']:.4f} "
              f"qwk {stats['qwk']:.4f}")


def _cmd_ablate(args, cfg: dict) -> None:
    if args.out:
        cfg["out_dir"] = args.out
    ac = AblationConfig.from_dict(cfg)
    with locked_dir(ac.out_dir):
        table = run_ablation(ac)
    print((Path(ac.out_dir) / "ablation.txt").read_text(), end="")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"data": _cmd_data, "train": _cmd_train, "curate": _cmd_curate,
                "generate": _cmd_generate, "eval": _cmd_eval,
                "downstream": _cmd_downstream, "ablate": _cmd_ablate}
    try:
        cfg = _load_config(args)
        handlers[args.command](args, cfg)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
