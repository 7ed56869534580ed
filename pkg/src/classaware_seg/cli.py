"""Command line: ``train``, ``eval``, ``predict``, ``sweep`` and ``verify``.

Any config key can be overridden with a dot-path flag, e.g. ``--lca.patches 8x8``.
Run directories go under ``$CLASSAWARE_SEG_OUTPUT`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import SECTIONS, ConfigError, RunConfig, desk_profile, load_config
from .data import read_image
from .metrics import write_report
from .train_eval import (ABLATION_GRIDS, ablation_overrides, ablation_sweep, evaluate, format_table,
                         infer_probs, load_checkpoint, make_datasets, model_cost, seeded_model, train)

log = logging.getLogger("classaware_seg")

OUTPUT_ENV = "CLASSAWARE_SEG_OUTPUT"
FLAG_ALIASES = {"tta.scales": "eval.scales", "tta.flip": "eval.flip", "tta.tile": "eval.tile",
                "tta.stride": "eval.stride"}

PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25], [145, 30, 180],
    [70, 240, 240], [245, 130, 48], [240, 50, 230], [210, 245, 60], [250, 190, 190], [0, 128, 128],
], dtype=np.uint8)


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``--section.key value`` or ``--section.key=value`` pairs."""
    out: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for {tok}")
            value = tokens[i + 1]
            i += 2
        key = FLAG_ALIASES.get(key, key)
        if key.split(".", 1)[0] not in SECTIONS:
            raise UsageError(f"unknown config section in {tok!r}")
        out[key] = value
    return out


def resolve_config(config_path: str | None, data: str | None, overrides: dict[str, str]) -> RunConfig:
    cfg = load_config(config_path, desk_profile()) if config_path else desk_profile()
    if data is not None:
        overrides = {"data.dataset": data, **overrides}
    cfg = cfg.replace(overrides)
    if cfg.data.dataset != "synth" and not Path(cfg.data.dataset).is_dir():
        raise FileNotFoundError(f"dataset path {cfg.data.dataset!r} does not exist")
    return cfg


def cmd_train(args, overrides) -> int:
    cfg = resolve_config(args.config, args.data, overrides)
    run_dir = Path(args.out) if args.out else output_root() / cfg.hash
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(cfg.to_text())
    datasets = make_datasets(cfg)
    model = seeded_model(cfg)
    cost = model_cost(model, (cfg.data.image_size, cfg.data.image_size))
    log.info("config %s: %d params, %d MACs per image", cfg.hash, cost["params"], cost["macs"])
    result = train(model, datasets.train, cfg, run_dir)
    print(f"checkpoint {result.checkpoint}")
    if result.losses:
        print(f"loss first={result.losses[0]:.4f} last={result.losses[-1]:.4f}")
    return 0


def _plot_iou(path: Path, m, names):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, len(names)), 3))
    ax.bar(range(len(names)), np.nan_to_num(m.iou))
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title(m.summary())
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_eval(args, overrides) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    mismatch = not ckpt.hash_ok
    if args.config:
        mismatch = mismatch or load_config(args.config, desk_profile()).hash != ckpt.config_hash
    if mismatch:
        print(f"warning: config hash does not match checkpoint ({ckpt.config_hash})", file=sys.stderr)
        if not args.force:
            print("refusing to evaluate; pass --force to proceed", file=sys.stderr)
            return 2
    if args.data is not None:
        overrides = {"data.dataset": args.data, **overrides}
    cfg = ckpt.cfg.replace(overrides)
    if cfg.data.dataset != "synth" and not Path(cfg.data.dataset).is_dir():
        raise FileNotFoundError(f"dataset path {cfg.data.dataset!r} does not exist")
    datasets = make_datasets(cfg)
    m, cm = evaluate(ckpt.model, datasets.eval, cfg.eval, cfg.data.num_classes)
    report = Path(args.report) if args.report else Path(args.checkpoint).with_name("metrics.json")
    write_report(report, m, cm, datasets.class_names,
                 {"config_hash": ckpt.config_hash, "step": ckpt.step, "eval": {
                     "scales": list(cfg.eval.scales), "flip": cfg.eval.flip,
                     "tile": cfg.eval.tile, "stride": cfg.eval.stride}})
    if args.plot:
        _plot_iou(report.with_suffix(".png"), m, datasets.class_names)
    print(m.summary())
    return 0


def cmd_predict(args, overrides) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.cfg.replace(overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".tif"))
    written = 0
    for p in paths:
        try:
            image = read_image(p)
        except (UnidentifiedImageError, OSError) as exc:
            print(f"warning: skipping unreadable image {p}: {exc}", file=sys.stderr)
            continue
        pred = infer_probs(ckpt.model, image[None], cfg.eval).argmax(1)[0].numpy().astype(np.uint8)
        Image.fromarray(pred, "L").save(out / f"{p.stem}_mask.png")
        colors = PALETTE[pred % len(PALETTE)]
        Image.fromarray(colors, "RGB").save(out / f"{p.stem}_color.png")
        written += 1
    print(f"wrote {written} predictions to {out}")
    return 0


def _parse_grid(axis: str, text: str):
    items = [s.strip() for s in text.split(";") if s.strip()]
    if axis in ("structure", "atb_factors"):
        return [tuple(c.upper() == "Y" for c in item) for item in items]
    if axis == "patches":
        return [tuple(int(v) for v in item.lower().split("x")) for item in items]
    if axis in ("cg_layer", "heads"):
        return [int(v) for v in items]
    return [float(v) for v in items]


def cmd_sweep(args, overrides) -> int:
    if args.axis not in ABLATION_GRIDS:
        raise UsageError(f"unknown ablation axis {args.axis!r}; choose from {', '.join(sorted(ABLATION_GRIDS))}")
    cfg = resolve_config(args.config, args.data, overrides)
    grid = _parse_grid(args.axis, args.grid) if args.grid else None
    for value in grid or []:
        ablation_overrides(args.axis, value)
    rows = ablation_sweep(args.axis, cfg, grid)
    table = format_table(rows)
    out = Path(args.out) if args.out else output_root() / f"sweep_{args.axis}_{cfg.hash}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    print(table, end="")
    return 0


def cmd_verify(args, overrides) -> int:
    from .verify import format_report, run_all

    reports = run_all(seed=args.seed)
    print(format_report(reports), end="")
    return 0 if all(r.passed for r in reports) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="classaware-seg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a run directory")
    p.add_argument("--config")
    p.add_argument("--data", help="'synth' or a dataset root")
    p.add_argument("--out", help="run directory (default: output root / config hash)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a metrics report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--config", help="config expected to match the checkpoint")
    p.add_argument("--force", action="store_true", help="proceed despite a config hash mismatch")
    p.add_argument("--report")
    p.add_argument("--plot", action="store_true", help="also save a per-class IoU bar chart")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write index and colour masks for a folder of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="run one ablation axis")
    p.add_argument("--axis", required=True)
    p.add_argument("--grid", help="';'-separated values, e.g. '1x1;4x4' or 'YY;NN'")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the oracle and gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        overrides = parse_overrides(rest)
        return args.func(args, overrides)
    except (UsageError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
