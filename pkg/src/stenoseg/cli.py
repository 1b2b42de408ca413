"""Command-line entry points: ingest, synth, train, eval, predict, report.

Exit codes: 0 success, 1 usage or configuration error, 2 partial data
failure, 3 numeric failure.  Run configuration is flat ``key = value`` text;
unknown keys are rejected and the resolved configuration is written into
every output directory as ``config.txt``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import serialize
from .data import (
    CACHE_ENV,
    Manifest,
    default_cache_dir,
    ingest,
    load_sample,
    make_folds,
    read_image,
    resize_image,
    write_synthetic,
)
from .errors import ConfigError, DataError, FormatError, NonFiniteError, SpecError
from .metrics import REPORT_COLUMNS, precision_recall_f1, report_csv, thresholded_mask
from .models import ModelSpec, Variant, preset
from .training import LossConfig, OptimConfig, evaluate, load_checkpoint, predict_logits, restore, run_fold

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL, EXIT_NUMERIC = 0, 1, 2, 3


# ------------------------------------------------------------------- config
def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default); a default of None means "take it from the preset"
CONFIG_KEYS: dict[str, tuple] = {
    "seed": (int, 0),
    "data.manifest": (str, ""),
    "data.augment": (_bool, False),
    "model.variant": (str, "umamba_bot"),
    "model.preset": (str, "tiny"),
    "model.stage_channels": (_ints, None),
    "model.depths": (_ints, None),
    "model.bottleneck_depth": (int, None),
    "model.decoder_depth": (int, None),
    "model.state_size": (int, None),
    "model.expand": (int, None),
    "model.window_size": (int, None),
    "model.head_dim": (int, None),
    "model.upsample": (str, None),
    "model.scan_method": (str, None),
    "loss.dice_weight": (float, 1.0),
    "loss.ce_weight": (float, 1.0),
    "loss.gamma": (float, 0.5),
    "loss.eps": (float, 1.0),
    "optim.algorithm": (str, "adam"),
    "optim.lr": (float, 1e-3),
    "optim.momentum": (float, 0.9),
    "optim.beta1": (float, 0.9),
    "optim.beta2": (float, 0.999),
    "optim.weight_decay": (float, 1e-5),
    "optim.steps": (int, 500),
    "optim.batch_size": (int, 4),
    "optim.clip_norm": (float, 12.0),
    "train.folds": (int, 5),
    "train.fold": (int, -1),
}


def parse_config(text: str) -> dict[str, object]:
    """Parse flat ``key = value`` lines (``#`` starts a comment) into typed values over the defaults."""
    cfg = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value", None)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}", key)
        try:
            cfg[key] = CONFIG_KEYS[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key) from None
    return cfg


def render_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if v is None:
            continue
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def resolve(cfg: dict) -> tuple[ModelSpec, LossConfig, OptimConfig]:
    """Build and validate every config object; errors name the offending key."""
    try:
        variant = Variant(cfg["model.variant"])
    except ValueError:
        raise ConfigError(f"unknown model.variant {cfg['model.variant']!r}", "model.variant") from None
    overrides = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("model.") and v is not None
                 and k not in ("model.variant", "model.preset")}
    try:
        spec = preset(variant, cfg["model.preset"], **overrides)
    except (SpecError, ValueError, TypeError) as exc:
        raise ConfigError(f"model: {exc}", "model") from None
    try:
        loss = LossConfig(cfg["loss.dice_weight"], cfg["loss.ce_weight"], cfg["loss.gamma"], cfg["loss.eps"])
    except ValueError as exc:
        raise ConfigError(f"loss: {exc}", "loss") from None
    try:
        optim = OptimConfig(
            algorithm=cfg["optim.algorithm"], lr=cfg["optim.lr"], momentum=cfg["optim.momentum"],
            beta1=cfg["optim.beta1"], beta2=cfg["optim.beta2"], weight_decay=cfg["optim.weight_decay"],
            steps=cfg["optim.steps"], batch_size=cfg["optim.batch_size"], seed=cfg["seed"],
            clip_norm=cfg["optim.clip_norm"],
        )
    except ValueError as exc:
        raise ConfigError(f"optim: {exc}", "optim") from None
    if cfg["train.folds"] == 1 or cfg["train.folds"] < 0:
        raise ConfigError("train.folds must be 0 (train and evaluate on all ids) or >= 2", "train.folds")
    return spec, loss, optim


def load_config(path: str | None, seed: int | None) -> dict:
    text = Path(path).read_text() if path else ""
    cfg = parse_config(text)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _manifest_path(cfg: dict, override: str | None = None) -> Path:
    if override:
        return Path(override)
    if cfg.get("data.manifest"):
        return Path(cfg["data.manifest"])
    return default_cache_dir() / "manifest.json"


def _load_samples(manifest_path: Path) -> tuple[dict, int]:
    if not manifest_path.exists():
        raise ConfigError(f"manifest {manifest_path} not found (run ingest first)", "data.manifest")
    manifest = Manifest.load(manifest_path)
    return {e["id"]: load_sample(e, manifest_path.parent) for e in manifest.entries}, manifest.size


# ----------------------------------------------------------------- commands
def cmd_ingest(args) -> int:
    ann, images = Path(args.annotations), Path(args.images)
    if not ann.is_file() or not images.is_dir():
        raise ConfigError(f"need an annotation file and an image directory, got {ann} and {images}")
    out = Path(args.out) if args.out else default_cache_dir()
    manifest = ingest(ann, images, out, args.size)
    for f in manifest.failures:
        print(f"failed: {f['file']}: {f['error']}", file=sys.stderr)
    print(f"ingested {len(manifest.entries)} samples, {len(manifest.failures)} failures -> {out / 'manifest.json'}")
    return EXIT_PARTIAL if manifest.failures else EXIT_OK


def cmd_synth(args) -> int:
    path = write_synthetic(args.out, args.count, args.size, args.seed)
    print(f"wrote {args.count} synthetic images and {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    spec, loss, optim = resolve(cfg)
    samples, size = _load_samples(_manifest_path(cfg))
    ids = sorted(samples)
    k = cfg["train.folds"]
    if k == 0:
        plan = [(tuple(ids), tuple(ids))]
    else:
        plan = list(make_folds(ids, k, cfg["seed"]).folds)
    folds = range(len(plan)) if cfg["train.fold"] < 0 else [cfg["train.fold"]]
    if any(f >= len(plan) for f in folds):
        raise ConfigError(f"train.fold {cfg['train.fold']} out of range for {len(plan)} folds", "train.fold")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = render_config(cfg)
    (out / "config.txt").write_text(text)
    for f in folds:
        train_ids, val_ids = plan[f]
        extra = {"config": text, "train_ids": list(train_ids), "val_ids": list(val_ids), "fold": f,
                 "size": size}
        res = run_fold(f, train_ids, val_ids, samples, spec, optim, loss, out / f"fold-{f}",
                       resume=args.resume, extra=extra, check=k != 0,
                       augment=cfg["data.augment"])
        (out / f"fold-{f}" / "config.txt").write_text(text)
        print(f"fold {f}: best f1 {res.best_f1:.4f} after {res.state.step} steps -> {res.checkpoint}")
    return EXIT_OK


def _split_ids(ckpt, split: str, available) -> list[str]:
    if split == "all":
        return sorted(available)
    key = {"train": "train_ids", "val": "val_ids"}.get(split)
    if key is None:
        raise ConfigError(f"unknown split {split!r} (train, val or all)", "split")
    return list(ckpt.extra.get(key, []))


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    samples, _ = _load_samples(Path(args.manifest))
    ids = _split_ids(ckpt, args.split, samples)
    chosen = [samples[i] for i in ids if i in samples]
    if not chosen:
        raise ConfigError("no samples in the requested split", "split")
    net = restore(ckpt)
    tau = args.threshold
    report = evaluate(net, chosen, tau=tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report_csv([report]))
    with open(out / "per_image.jsonl", "w") as fh:
        for sid, c in report.per_image.items():
            P, R, F = precision_recall_f1(c)
            fh.write(json.dumps({"id": sid, **c.to_dict(), "precision": P, "recall": R, "f1": F},
                                sort_keys=True) + "\n")
    if "config" in ckpt.extra:
        (out / "config.txt").write_text(ckpt.extra["config"])
    f1 = report.f1
    print(f"{report.model}: precision {report.precision} recall {report.recall} f1 {f1}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    img = read_image(args.image)
    H, W = img.shape
    size = int(ckpt.extra.get("size", 0)) or max(H, W)
    d = ckpt.spec.divisor
    size = -(-size // d) * d
    x = resize_image(img, size) if (H, W) != (size, size) else img
    net = restore(ckpt)
    logits = predict_logits(net, x[None, None].astype(np.float32))[0]
    mask = thresholded_mask(logits, args.threshold).astype(np.uint8)
    if mask.shape != (H, W):
        mask = np.asarray(Image.fromarray(mask * 255).resize((W, H), Image.Resampling.NEAREST)) > 0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8) * 255).save(out)
    if args.prob:
        z = logits.astype(np.float64)
        prob = 1.0 / (1.0 + np.exp(-(z[1] - z[0])))
        serialize.save(prob.astype(np.float32), args.prob)
    print(f"wrote {W}x{H} mask with {int(mask.sum())} foreground pixels -> {out}")
    return EXIT_OK


def read_report_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = tuple(reader.fieldnames or ())
        for want, got in zip(REPORT_COLUMNS, cols + ("",) * len(REPORT_COLUMNS)):
            if want != got:
                raise ConfigError(f"{path}: expected column {want!r}, found {got or 'nothing'!r}", want)
        if len(cols) != len(REPORT_COLUMNS):
            raise ConfigError(f"{path}: unexpected column {cols[len(REPORT_COLUMNS)]!r}", cols[len(REPORT_COLUMNS)])
        rows = []
        for r in reader:
            try:
                rows.append({"model": r["model"], "params": int(r["params"]),
                             "precision": float(r["precision"]) if r["precision"] else None,
                             "recall": float(r["recall"]) if r["recall"] else None,
                             "f1": float(r["f1"]) if r["f1"] else None})
            except ValueError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return rows


def bubble_radius(params: int, max_params: int, scale: float = 40.0) -> float:
    """Radius proportional to sqrt(params), so bubble area tracks parameter count."""
    return scale * math.sqrt(params / max_params) if max_params > 0 else 0.0


def bubble_chart(rows: list[dict]) -> str:
    """SVG with one circle per row: x = rank, y = F1, radius from the parameter count."""
    step, left, top, plot_h = 120, 80, 40, 320
    width = left + step * max(1, len(rows)) + 40
    height = top + plot_h + 80
    max_p = max((r["params"] for r in rows), default=0)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{width - 20}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="20" y="{top + plot_h // 2}" transform="rotate(-90 20 {top + plot_h // 2})">F1</text>',
    ]
    for tick in range(0, 11, 2):
        y = top + plot_h * (1 - tick / 10)
        out.append(f'<text x="{left - 40}" y="{y:.1f}" font-size="10">{tick / 10:.1f}</text>')
    for i, r in enumerate(rows):
        f1 = r["f1"] or 0.0
        cx = left + step * i + step / 2
        cy = top + plot_h * (1 - f1)
        rad = bubble_radius(r["params"], max_p)
        out.append(
            f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{rad:.3f}" fill="steelblue" fill-opacity="0.5" '
            f'data-model="{r["model"]}" data-f1="{f1:.6f}" data-params="{r["params"]}"/>'
        )
        out.append(f'<text x="{cx:.1f}" y="{top + plot_h + 20}" font-size="10" '
                   f'text-anchor="middle">{r["model"]}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    rows = []
    for path in args.csvs:
        rows.extend(read_report_rows(path))
    if not rows:
        raise ConfigError("no report rows in the given files")
    rows.sort(key=lambda r: (r["f1"] if r["f1"] is not None else -1.0, r["model"]))
    reports = [ReportRow(**r) for r in rows]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(reports))
    (out / "chart.svg").write_text(bubble_chart(rows))
    print(f"merged {len(rows)} rows -> {out / 'report.csv'}, {out / 'chart.svg'}")
    return EXIT_OK


@dataclass(frozen=True)
class ReportRow:
    model: str
    params: int
    precision: float | None
    recall: float | None
    f1: float | None


# ------------------------------------------------------------------- parser
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stenoseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="prepare annotated images into the sample cache")
    s.add_argument("annotations")
    s.add_argument("images")
    s.add_argument("--out", help=f"cache directory (default ${CACHE_ENV} or ~/.cache/stenoseg)")
    s.add_argument("--size", type=int, default=512)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="write a synthetic blob dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="cross-validated training")
    s.add_argument("--config")
    s.add_argument("--out", default="runs")
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="write a mask for one image")
    s.add_argument("checkpoint")
    s.add_argument("image")
    s.add_argument("--out", required=True)
    s.add_argument("--prob", help="also write the foreground probability map (TNSR1)")
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("report", help="merge metric CSVs and draw the bubble chart")
    s.add_argument("csvs", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
