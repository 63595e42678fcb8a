"""Command-line front end.

    spg gen-data     write a synthetic shapes dataset tree
    spg train        train a network on a dataset's train split
    spg eval         localization and classification scoring
    spg export-maps  dump per-image response maps and fused masks
    spg render       heat overlays with predicted and true boxes
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from spg.core import DataFormatError
from spg.configio import _parse_hw, read_config
from spg.data import DatasetSpec, generate_dataset, load_dataset
from spg.evaluation import evaluate, read_rankings
from spg.model import NetworkConfig, build_network, extract_attention
from spg.pipeline import (
    export_map_dumps,
    forward_dataset,
    predict_records,
    predictions_table,
    threshold_search,
)
from spg.render import render_localization
from spg.training import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    configs_from_checkpoint,
    load_checkpoint,
    load_parameters,
    train,
)


def _add_gen_data(sub):
    p = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--config", help="INI file; its [data] section seeds the defaults")
    p.add_argument("--image-hw", help="image size as HxW, e.g. 64x64")
    p.add_argument("--classes", type=int, help="number of shape classes (2..4)")
    p.add_argument("--train", type=int, help="train split size")
    p.add_argument("--val", type=int, help="val split size")
    p.add_argument("--test", type=int, help="test split size")
    p.add_argument("--seed", type=int, help="dataset seed")


def _add_train(sub):
    p = sub.add_parser("train", help="train on a dataset's train split")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--checkpoint", required=True, help="where to write the checkpoint")
    p.add_argument("--config", help="INI file with [network]/[training]/[guidance]")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--warm-start", help="initialize matching parameters from this checkpoint")
    p.add_argument("--log", help="write the per-step loss log here")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, help="auxiliary loss weight")
    p.add_argument("--base-lr", type=float)
    p.add_argument("--new-layer-lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--plain", action="store_true", help="no guidance branches, classification only")
    p.add_argument("--no-c", action="store_true", help="drop the fused-mask head")
    p.add_argument("--flat-seeds", action="store_true", help="reuse the attention seeds for both branches")


def _add_eval(sub):
    p = sub.add_parser("eval", help="score localization and classification")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("val", "test"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float, help="binarization threshold; omit to grid-search")
    p.add_argument("--search-split", default="val", choices=("val", "test"),
                   help="split used for the threshold search when --tau is omitted")
    p.add_argument("--max-boxes", type=int, default=2)
    p.add_argument("--rankings", help="external classifier rankings (tsv)")
    p.add_argument("--predictions", help="write per-rank boxes here (tsv)")
    p.add_argument("--report", help="write key=value report lines here")
    p.add_argument("--table", action="store_true", help="also print an aligned table")


def _add_export_maps(sub):
    p = sub.add_parser("export-maps", help="dump response maps as .spgm files")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, help="only the first N images")


def _add_render(sub):
    p = sub.add_parser("render", help="write heat overlays with boxes")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("val", "test"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--limit", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spg",
        description="Self-supervised localization toolkit: dataset generation, training, scoring, map export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_data(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_export_maps(sub)
    _add_render(sub)
    return parser


# ---------------------------------------------------------------- commands


def _cmd_gen_data(args) -> int:
    spec = read_config(args.config).data if args.config else DatasetSpec()
    overrides = {}
    if args.image_hw is not None:
        overrides["image_hw"] = _parse_hw(args.image_hw)
    if args.classes is not None:
        overrides["num_classes"] = args.classes
    for name in ("train", "val", "test", "seed"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    spec = replace(spec, **overrides)
    spec.validate()
    generate_dataset(spec, args.out)
    h, w = spec.image_hw
    print(
        f"wrote {spec.train}+{spec.val}+{spec.test} images "
        f"({h}x{w}, {spec.num_classes} classes) under {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    if args.config:
        run = read_config(args.config)
        net_cfg, train_cfg = run.network, run.training
    else:
        net_cfg, train_cfg = NetworkConfig(), TrainConfig()
    overrides = {}
    for flag, field in (
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("seed", "seed"),
        ("alpha", "aux_loss_weight"),
        ("base_lr", "base_lr"),
        ("new_layer_lr", "new_layer_lr"),
        ("lr_decay", "lr_decay_factor"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    train_cfg = replace(train_cfg, **overrides)
    if args.plain:
        net_cfg = replace(net_cfg, enable_spg=False)
        train_cfg = replace(train_cfg, aux_loss_weight=0.0)
    if args.no_c:
        net_cfg = replace(net_cfg, enable_c=False)
    if args.flat_seeds:
        train_cfg = replace(train_cfg, guidance=replace(train_cfg.guidance, flat_seeds=True))
    train_cfg = replace(train_cfg, checkpoint_path=args.checkpoint, log_path=args.log)

    records = load_dataset(args.data, "train")
    max_label = max(r.label for r in records)
    if max_label >= net_cfg.num_classes:
        net_cfg = replace(net_cfg, num_classes=max_label + 1)
    hw = records[0].pixels.shape[:2]
    if tuple(net_cfg.input_hw) != tuple(hw):
        net_cfg = replace(net_cfg, input_hw=(int(hw[0]), int(hw[1])))
    net_cfg.validate()

    result = train(net_cfg, train_cfg, records, resume=args.resume, warm_start=args.warm_start)
    last = result.log_lines[-1].split("\t") if result.log_lines else None
    if last:
        print(f"final step {last[0]}: total loss {float(last[3]):.4f}")
    print(f"checkpoint written to {args.checkpoint}")
    return 0


def _load_model(path):
    ckpt = load_checkpoint(path)
    net_cfg, train_cfg = configs_from_checkpoint(ckpt)
    model = build_network(net_cfg)
    load_parameters(model, ckpt)
    return model, net_cfg, train_cfg


def _cmd_eval(args) -> int:
    model, _, train_cfg = _load_model(args.checkpoint)
    if args.tau is not None:
        if not 0.0 < args.tau < 1.0:
            raise ValueError(f"--tau must lie in (0, 1), got {args.tau}")
        tau = args.tau
    else:
        tau, _ = threshold_search(model, load_dataset(args.data, args.search_split))
    rankings = read_rankings(args.rankings) if args.rankings else None
    records = load_dataset(args.data, args.split)
    eval_records = predict_records(
        model, records, tau, max_boxes=args.max_boxes, external_rankings=rankings
    )
    report = evaluate(eval_records, external_rankings=rankings)
    lines = [f"split={args.split}", f"tau={tau:g}"] + report.as_lines()
    for line in lines:
        print(line)
    if args.table:
        print(report.as_table())
    if args.report:
        with open(args.report, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    if args.predictions:
        with open(args.predictions, "w") as fh:
            fh.write("\n".join(predictions_table(eval_records)) + "\n")
    return 0


def _cmd_export_maps(args) -> int:
    model, _, train_cfg = _load_model(args.checkpoint)
    records = load_dataset(args.data, args.split)
    if args.limit is not None:
        records = records[: args.limit]
    written = export_map_dumps(model, records, args.out, guidance=train_cfg.guidance)
    print(f"wrote {len(written)} map dumps under {args.out}")
    return 0


def _cmd_render(args) -> int:
    model, _, _ = _load_model(args.checkpoint)
    records = load_dataset(args.data, args.split)[: args.limit]
    eval_records = predict_records(model, records, args.tau, max_boxes=1)
    outputs = forward_dataset(model, records)
    os.makedirs(args.out, exist_ok=True)
    for i, (rec, ev) in enumerate(zip(records, eval_records)):
        top1 = ev.ranking[0]
        attention = extract_attention(outputs.f_a4[i], top1)
        path = os.path.join(args.out, f"{rec.image_id}.render.ppm")
        render_localization(path, rec.pixels, attention, ev.boxes[top1], rec.box)
    print(f"wrote {len(records)} renders under {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "export-maps": _cmd_export_maps,
    "render": _cmd_render,
}


def cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DataFormatError, CheckpointError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
