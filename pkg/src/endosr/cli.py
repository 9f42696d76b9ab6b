"""``endosr`` command line: degrade, train, eval, stats, sweep, inspect-checkpoint.

Exit codes: 0 success, 1 input or configuration error, 2 numerical failure,
3 I/O error. Every command writes its resolved ``run_config.toml`` into its
output directory; passing that file back with ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import functools
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from .config import PRESETS, RunConfig
from .data import (DatasetManifest, ManifestEntry, PairSample, build_manifest, derive_seed, list_images,
                   load_pair, split_manifest)
from .errors import ConfigurationError, EndoSRError, InputError, StorageError
from .imagecore import bicubic_upscale, degrade, divisible_crop, read_png, write_png
from .metrics import aggregate, evaluate, false_color, local_deviation_map, write_float_grid
from .stats import wilcoxon_signed_rank, zscore_summary
from .synthetic import write_dataset
from .trainer import (PAPER_SWEEP, checkpoint_load, checkpoint_save, load_generator, new_state, run_sweep,
                      save_generator, super_resolve, train)

log = logging.getLogger("endosr")

METRICS = ("psnr", "ssim", "gmsd", "lpips")
HIGHER_IS_BETTER = {"psnr": True, "ssim": True, "gmsd": False, "lpips": False}
SYNTHETIC_CLASSES = ("esophagitis", "polyps", "normal-z-line")


# ------------------------------------------------------------------ helpers


def _resolve(args, overrides: dict) -> RunConfig:
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return RunConfig.resolve(args.preset, args.config, overrides)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _fmt(v: float) -> str:
    return "inf" if v == math.inf else repr(float(v))


def _dataset(cfg: RunConfig, out: Path) -> DatasetManifest:
    """Manifest with split tags; a procedural dataset is generated when no root is configured."""
    root = cfg["dataset.root"]
    if not root:
        root = out / "synthetic_data"
        size = cfg["dataset.synthetic_size"]
        if not root.exists():
            log.info("no dataset.root given; writing procedural images to %s", root)
            write_dataset(root, cfg["dataset.classes"] or SYNTHETIC_CLASSES, cfg["dataset.synthetic_per_class"],
                          (size, size), seed=cfg["dataset.split_seed"])
    min_res = None
    if cfg["dataset.min_width"] or cfg["dataset.min_height"]:
        min_res = (cfg["dataset.min_width"], cfg["dataset.min_height"])
    manifest = build_manifest(root, cfg["dataset.classes"] or None, min_res)
    return split_manifest(manifest, cfg["dataset.fractions"], cfg["dataset.fold"], cfg["dataset.n_folds"],
                          cfg["dataset.split_seed"])


def _center_patch(pair: PairSample, patch: int) -> PairSample:
    if not patch:
        return pair
    r = pair.scale
    h, w = pair.hr.shape[:2]
    ph, pw = min(patch, h), min(patch, w)
    top, left = (h - ph) // (2 * r) * r, (w - pw) // (2 * r) * r
    return _crop(pair, top, left, ph, pw)


def _crop(pair: PairSample, top: int, left: int, ph: int, pw: int) -> PairSample:
    r = pair.scale
    hr = pair.hr[top : top + ph, left : left + pw]
    lr = pair.lr[top // r : (top + ph) // r, left // r : (left + pw) // r]
    return PairSample(lr, hr, pair.class_label, pair.source_path)


class PatchBatches:
    """Deterministic training batches: entry order and crop offsets depend only on (seed, iteration)."""

    def __init__(self, entries, root, degradation, batch_size: int, patch: int, seed: int, cache_dir=None):
        if not entries:
            raise InputError("no training images")
        self.entries, self.root, self.deg = list(entries), root, degradation
        self.batch_size, self.patch, self.seed, self.cache_dir = batch_size, patch, seed, cache_dir
        self._load = functools.lru_cache(maxsize=64)(self._load_uncached)

    def _load_uncached(self, idx: int) -> PairSample:
        return load_pair(self.entries[idx], self.root, self.deg, self.cache_dir)

    def batch(self, iteration: int) -> list[PairSample]:
        n = len(self.entries)
        out = []
        for k in range(self.batch_size):
            slot = iteration * self.batch_size + k
            epoch, pos = divmod(slot, n)
            order = np.random.default_rng(derive_seed(self.seed, f"epoch{epoch}")).permutation(n)
            pair = self._load(int(order[pos]))
            if self.patch:
                r = pair.scale
                h, w = pair.hr.shape[:2]
                ph, pw = min(self.patch, h), min(self.patch, w)
                rng = np.random.default_rng(derive_seed(self.seed, f"crop{slot}"))
                top = int(rng.integers(0, (h - ph) // r + 1)) * r
                left = int(rng.integers(0, (w - pw) // r + 1)) * r
                pair = _crop(pair, top, left, ph, pw)
            out.append(pair)
        return out

    def iterate(self, start: int):
        i = start
        while True:
            yield self.batch(i)
            i += 1


def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


# ------------------------------------------------------------------ commands


def cmd_degrade(args) -> int:
    cfg = _resolve(args, {"degradation.scale": args.scale, "degradation.seed": args.seed,
                          "degradation.noise_sigma": args.noise, "dataset.root": args.input})
    out = _out_dir(args.out)
    deg = cfg.degradation()
    entries = list_images(cfg["dataset.root"])
    records = []
    for e in entries:
        hr = divisible_crop(read_png(Path(cfg["dataset.root"]) / e.path), deg.scale)
        item_seed = derive_seed(deg.seed, e.path)
        lr = degrade(hr, dataclasses.replace(deg, seed=item_seed))
        rel = Path(e.path).with_suffix(".png").as_posix()
        write_png(out / rel, lr)
        records.append({"path": rel, "source": e.path, "class": e.class_label, "scale": deg.scale,
                        "hr_size": [hr.shape[1], hr.shape[0]], "lr_size": [lr.shape[1], lr.shape[0]],
                        "noise_sigma": deg.noise_sigma, "seed": item_seed})
    try:
        (out / "manifest.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records),
                                            encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write manifest in {out}: {exc}") from exc
    cfg.write(out)
    log.info("wrote %d LR images to %s", len(records), out)
    return 0


def cmd_train(args) -> int:
    ablation = {None: None, "none": "full", "no-content": "without_content", "no-texture": "without_texture"}
    overrides = {"train.max_steps": args.iters, "loss.ablation": ablation[args.ablation],
                 "dataset.root": args.data, "degradation.scale": args.scale, "train.seed": args.seed}
    if args.no_attention:
        overrides["generator.use_attention"] = False
    cfg = _resolve(args, overrides)
    out = _out_dir(args.out)
    cfg.write(out)
    tcfg = cfg.train_config()
    manifest = _dataset(cfg, out)
    entries = manifest.subset("train") or list(manifest.entries)
    extractor = tcfg.extractor.build()
    if args.resume:
        state = checkpoint_load(args.resume, extractor)
        if state.cfg.generator.scale != tcfg.generator.scale:
            raise ConfigurationError(f"checkpoint scale {state.cfg.generator.scale} differs from "
                                     f"configured scale {tcfg.generator.scale}")
    else:
        state = new_state(tcfg, extractor)
    remaining = state.cfg.total_iters - state.iteration
    n_steps = min(cfg["train.max_steps"], remaining) if cfg["train.max_steps"] else remaining
    batches = PatchBatches(entries, manifest.root, cfg.degradation(), tcfg.batch_size, cfg["train.patch_size"],
                           tcfg.seed, cfg["dataset.cache_dir"] or None)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    log.info("training %d steps from iteration %d on %d images", n_steps, state.iteration, len(entries))
    records = train(state, batches.iterate(state.iteration), n_steps, log_path=out / "train_log.jsonl",
                    checkpoint_dir=ckpt_dir, checkpoint_every=cfg["train.checkpoint_every"],
                    snapshot_dir=out / "snapshots")
    checkpoint_save(state, ckpt_dir / "last.enl2h")
    save_generator(state.generator, out / "generator.enl2h", {"iteration": state.iteration})
    secs = [r["seconds"] for r in records]
    if secs:
        log.info("done: %d steps, %.3f s/step, final total loss %.4f", len(secs), float(np.mean(secs)),
                 records[-1]["g_total"])
    return 0


def _eval_entries(cfg: RunConfig, split: str) -> tuple[Path, list[ManifestEntry]]:
    root = Path(cfg["dataset.root"])
    if split == "all":
        return root, list_images(root)
    manifest = split_manifest(build_manifest(root, cfg["dataset.classes"] or None), cfg["dataset.fractions"],
                              cfg["dataset.fold"], cfg["dataset.n_folds"], cfg["dataset.split_seed"])
    return root, manifest.subset(split)


def _write_maps(out: Path, method: str, image_id: str, smap, gmap) -> None:
    base = out / "maps" / method / image_id
    base.parent.mkdir(parents=True, exist_ok=True)
    write_float_grid(base.with_name(base.name + ".ssim.f32"), smap.values)
    write_float_grid(base.with_name(base.name + ".gms.f32"), gmap.values)
    write_png(base.with_name(base.name + ".ssim.png"), false_color(smap.padded(), 0.0, 1.0))
    dev = local_deviation_map(gmap)
    write_png(base.with_name(base.name + ".gmsd.png"),
              false_color(np.pad(dev, gmap.border, mode="edge"), 0.0, 0.25, similar_high=False))


def cmd_eval(args) -> int:
    overrides = {"dataset.root": args.data, "degradation.scale": args.scale}
    if args.maps:
        overrides["metric.write_maps"] = True
    cfg = _resolve(args, overrides)
    if not cfg["dataset.root"]:
        raise ConfigurationError("eval needs --data (directory of HR images)")
    generator = None
    if args.checkpoint:
        generator = load_generator(args.checkpoint)
        if generator.cfg.scale != cfg["degradation.scale"]:
            if cfg.provenance["degradation.scale"] == "default":
                cfg.set("degradation.scale", generator.cfg.scale, "checkpoint")
            else:
                raise ConfigurationError(f"checkpoint is a {generator.cfg.scale}x model but the data is "
                                         f"configured for {cfg['degradation.scale']}x")
    out = _out_dir(args.out)
    cfg.write(out)
    deg = cfg.degradation()
    scale = deg.scale
    extractor = cfg.metric_extractor().build()
    root, entries = _eval_entries(cfg, args.split)
    if not entries:
        raise InputError(f"no images in split {args.split!r}")
    peak, color, maps = cfg["metric.peak"], cfg["metric.color"], cfg["metric.write_maps"]

    rows = []
    per_method: dict[str, dict[str, list[float]]] = {}
    for e in entries:
        pair = load_pair(e, root, deg, cfg["dataset.cache_dir"] or None)
        candidates = {"bicubic": bicubic_upscale(pair.lr, scale)}
        if generator is not None:
            candidates[args.method_name] = super_resolve(generator, [pair.lr])[0]
        if args.sr:
            sr_path = Path(args.sr) / Path(e.path).with_suffix(".png")
            if not sr_path.exists():
                raise InputError(f"missing SR image {sr_path} for {e.path}")
            candidates[args.sr_name] = divisible_crop(read_png(sr_path), scale)[: pair.hr.shape[0], : pair.hr.shape[1]]
        image_id = Path(e.path).with_suffix("").as_posix()
        for method, sr in candidates.items():
            report, smap, gmap = evaluate(sr, pair.hr, extractor, peak, color, with_maps=True)
            for metric, value in report.as_dict().items():
                rows.append((image_id, method, scale, metric, _fmt(value)))
                per_method.setdefault(method, {}).setdefault(metric, []).append(value)
            if maps:
                _write_maps(out, method, image_id, smap, gmap)

    _write_csv(out / "per_image.csv", ("image_id", "method", "scale", "metric", "value"), rows)
    summary = []
    for method in sorted(per_method):
        for metric in METRICS:
            mean, std = aggregate(per_method[method][metric])
            summary.append((metric, scale, method, _fmt(mean), _fmt(std), len(per_method[method][metric])))
    _write_csv(out / "summary.csv", ("metric", "scale", "method", "mean", "std", "n"), summary)
    log.info("evaluated %d images, methods %s", len(entries), sorted(per_method))
    return 0


def read_per_image(paths) -> dict[tuple[str, int], dict[str, dict[str, float]]]:
    """``{(metric, scale): {method: {image_id: value}}}`` from per-image CSVs."""
    table: dict = {}
    for path in paths:
        try:
            fh = open(path, newline="", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot read {path}: {exc}") from exc
        with fh:
            reader = csv.DictReader(fh)
            missing = {"image_id", "method", "metric", "value"} - set(reader.fieldnames or ())
            if missing:
                raise InputError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                key = (row["metric"], int(row.get("scale") or 0))
                by_id = table.setdefault(key, {}).setdefault(row["method"], {})
                if row["image_id"] in by_id:
                    raise InputError(f"{path}: duplicate row for {row['image_id']} / {row['method']} / {key[0]}")
                by_id[row["image_id"]] = float(row["value"])
    return table


def cmd_stats(args) -> int:
    cfg = _resolve(args, {"stats.reference": args.reference})
    out = _out_dir(args.out)
    cfg.write(out)
    table = read_per_image(args.inputs)
    ref = cfg["stats.reference"]
    tests, boxes = [], []
    for (metric, scale), methods in sorted(table.items()):
        if args.metrics and metric not in args.metrics:
            continue
        names = sorted(methods)
        if len(names) < 2:
            raise InputError(f"{metric}: need at least two methods, found {names}")
        if ref:
            if ref not in methods:
                raise InputError(f"reference method {ref!r} not present for {metric}; have {names}")
            pairs = [(ref, m) for m in names if m != ref]
        else:
            pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1 :]]
        for a, b in pairs:
            ids_a, ids_b = set(methods[a]), set(methods[b])
            if ids_a != ids_b:
                raise InputError(f"{metric}: image ids differ between {a!r} and {b!r}: only in {a}: "
                                 f"{sorted(ids_a - ids_b)[:10]}, only in {b}: {sorted(ids_b - ids_a)[:10]}")
            ids = sorted(ids_a)
            deltas = [methods[a][i] - methods[b][i] for i in ids]
            res = wilcoxon_signed_rank(deltas, cfg["stats.exact_max_n"])
            rec = {"metric": metric, "scale": scale, "method_pair": f"{a} vs {b}", "pair": [a, b],
                   "higher_is_better": HIGHER_IS_BETTER.get(metric), **res.as_dict(), "p": res.p_report}
            tests.append(rec)
        for m in names:
            vals = [methods[m][i] for i in sorted(methods[m])]
            try:
                s = zscore_summary(vals)
            except EndoSRError as exc:
                log.warning("no z-score summary for %s / %s: %s", metric, m, exc)
                continue
            boxes.append({"metric": metric, "scale": scale, "method": m, **dataclasses.asdict(s)})
    try:
        (out / "significance.json").write_text(json.dumps(tests, indent=2) + "\n", encoding="utf-8")
        (out / "zscores.json").write_text(json.dumps(boxes, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write stats output in {out}: {exc}") from exc
    for t in tests:
        print(f"{t['metric']:>6} {t['method_pair']:<30} n={t['n']:<4} W={t['W']:<8g} z={t['z']:+.3f} p={t['p']:.4g}")
    return 0


def _parse_sets(text: str | None):
    if not text:
        return list(PAPER_SWEEP)
    sets = []
    for chunk in text.split(";"):
        parts = [float(x) for x in chunk.split(",")]
        if len(parts) != 3:
            raise ConfigurationError(f"weight set {chunk!r} must be alpha,beta,gamma")
        sets.append(tuple(parts))
    return sets


def cmd_sweep(args) -> int:
    cfg = _resolve(args, {"dataset.root": args.data, "train.max_steps": args.steps})
    out = _out_dir(args.out)
    cfg.write(out)
    manifest = _dataset(cfg, out)
    deg, patch = cfg.degradation(), cfg["train.patch_size"]
    train_pairs = [_center_patch(load_pair(e, manifest.root, deg), patch) for e in manifest.subset("train")]
    val_pairs = [_center_patch(load_pair(e, manifest.root, deg), patch) for e in manifest.subset("val")]
    steps = cfg["train.max_steps"] or cfg.train_config().total_iters
    rows = run_sweep(cfg.train_config(), _parse_sets(args.sets), train_pairs, val_pairs, steps)
    header = ("rank", "alpha", "beta", "gamma", "psnr", "ssim", "lpips", "gmsd", "paper_default")
    _write_csv(out / "sweep.csv", header, [[r[k] for k in header] for r in rows])
    for r in rows:
        mark = "  <- default" if r["paper_default"] else ""
        print(f"{r['rank']:>2}  {r['alpha']:.2f}/{r['beta']:.2f}/{r['gamma']:.2f}  PSNR {r['psnr']:.3f}  "
              f"SSIM {r['ssim']:.4f}  LPIPS {r['lpips']:.4f}  GMSD {r['gmsd']:.4f}{mark}")
    return 0


def cmd_inspect(args) -> int:
    tensors, meta = checkpoint.load(args.path)
    if args.json:
        listing = {name: {"dtype": str(a.dtype), "shape": list(a.shape)} for name, a in tensors.items()}
        print(json.dumps({"meta": meta, "tensors": listing}, indent=2))
        return 0
    print(f"{args.path}: {len(tensors)} tensors, kind={meta.get('kind') if meta else None}")
    total = 0
    for name, a in tensors.items():
        total += a.size
        print(f"  {name:<60} {str(a.dtype):<8} {'x'.join(map(str, a.shape)) or 'scalar'}")
    print(f"  {total} values")
    if meta:
        print(json.dumps(meta, indent=2, sort_keys=True))
    return 0


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML run configuration (e.g. a previous run_config.toml)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="toy-scale settings bundle")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any configuration key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="endosr", description="Endoscopic image super-resolution toolkit.")
    p.add_argument("--version", action="version", version=f"endosr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("degrade", parents=[common], help="synthesize LR images from an HR tree")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--scale", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--noise", type=float, help="Gaussian noise sigma in [0, 1] units")
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", parents=[common], help="train a generator")
    t.add_argument("--data", help="HR dataset root with one folder per class (procedural data if omitted)")
    t.add_argument("--out", default="runs/train")
    t.add_argument("--iters", type=int, help="steps to run in this invocation")
    t.add_argument("--scale", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--ablation", choices=["none", "no-content", "no-texture"])
    t.add_argument("--no-attention", action="store_true")
    t.add_argument("--resume", help="training-state checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score SR outputs against HR images")
    e.add_argument("--data", help="HR image directory")
    e.add_argument("--out", default="runs/eval")
    e.add_argument("--checkpoint")
    e.add_argument("--method-name", default="endosr")
    e.add_argument("--sr", help="directory of precomputed SR images mirroring --data")
    e.add_argument("--sr-name", default="external")
    e.add_argument("--scale", type=int)
    e.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    e.add_argument("--maps", action="store_true", help="write SSIM/GMS quality maps")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", parents=[common], help="signed-rank tests and z-score summaries")
    s.add_argument("inputs", nargs="+", help="per-image CSV files")
    s.add_argument("--out", default="runs/stats")
    s.add_argument("--reference", help="compare this method against every other one")
    s.add_argument("--metrics", nargs="*", choices=list(METRICS))
    s.set_defaults(func=cmd_stats)

    w = sub.add_parser("sweep", parents=[common], help="loss-weight sweep ranked by validation PSNR")
    w.add_argument("--data")
    w.add_argument("--out", default="runs/sweep")
    w.add_argument("--steps", type=int)
    w.add_argument("--sets", help="'a,b,g;a,b,g;...' (default: the published ten)")
    w.set_defaults(func=cmd_sweep)

    i = sub.add_parser("inspect-checkpoint", help="list the tensors in a checkpoint")
    i.add_argument("path")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EndoSRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
