"""Command-line front end: ``synth | train | infer | eval | ablate``.

Every subcommand takes ``--config FILE`` and repeated ``--set key=value``
overrides, and writes the resolved configuration to ``run_config.txt``.
Exit codes: 0 ok, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import Config, parse_config_text, parse_overrides, save_config
from .evaluation import EvalReport, evaluate
from .geometry import Polygon
from .infer import detect, detect_late_fusion
from .model import ATTR
from .postprocess import Detection
from .pyramid import ConfigError
from .synth import (
    DataError, SceneSample, SynthConfig, format_polygon, generate_sample, load_dataset, read_annotations,
    read_detections, read_image_ppm, read_manifest, sample_id, write_dataset, write_image_ppm,
)
from .rng import derive_seed
from .train import CKPT_NAME, LOG_NAME, restore_state, train

EXIT_CONFIG = 2
EXIT_DATA = 3
RUN_CONFIG = "run_config.txt"


def worker_count() -> int:
    raw = os.environ.get("ATTR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ATTR_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("ATTR_THREADS must be >= 1")
    return n


def parallel_map(fn, items: list) -> list:
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _read_pairs(path: Path) -> dict[str, str]:
    try:
        return parse_config_text(Path(path).read_text(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def resolve_config(args, base: Path | None = None) -> Config:
    """Defaults <- ``base`` run_config.txt <- ``--config`` <- ``--set``."""
    pairs = {}
    if base is not None and base.exists():
        pairs.update(_read_pairs(base))
    if args.config:
        pairs.update(_read_pairs(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return parse_overrides(pairs)


def synth_config(cfg: Config) -> SynthConfig:
    return SynthConfig(height=cfg.image_size, width=cfg.image_size, min_instances=cfg.min_instances,
                       max_instances=cfg.max_instances, curve_prob=cfg.curve_prob,
                       small_text_prob=cfg.small_text_prob)


def dataset_root(path) -> Path:
    """Accept either a dataset directory or a synth output with a train/ split."""
    path = Path(path)
    if not (path / "manifest.txt").exists() and (path / "train" / "manifest.txt").exists():
        return path / "train"
    return path


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- synth --------------------------------------------------------------------------

def _generate(job: tuple[int, int, SynthConfig]) -> tuple[str, SceneSample]:
    seed, index, scfg = job
    return sample_id(index), generate_sample(derive_seed(seed, index), scfg)


def cmd_synth(cfg: Config, out: Path, count: int, val_fraction: float) -> dict[str, str]:
    """Write ``train/`` and ``val/`` splits plus a checksum list; returns {relative path: sha256}."""
    if count < 1:
        raise ConfigError("--count must be >= 1")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("--val-fraction must be in [0, 1)")
    scfg = synth_config(cfg)
    n_train = count - int(round(count * val_fraction))
    samples = parallel_map(_generate, [(cfg.seed, i, scfg) for i in range(count)])
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "train", samples[:n_train])
    write_dataset(out / "val", samples[n_train:])
    save_config(cfg, out / RUN_CONFIG)
    sums = {str(p.relative_to(out)): file_digest(p) for p in sorted(out.glob("*/*/*")) if p.is_file()}
    (out / "checksums.txt").write_text("".join(f"{d}  {name}\n" for name, d in sums.items()))
    return sums


# -- train --------------------------------------------------------------------------

def cmd_train(cfg: Config, data: Path, out: Path, resume: bool = False, log_every: int = 50, quiet: bool = False):
    samples = [s for _, s in load_dataset(dataset_root(data))]
    if not samples:
        raise DataError(f"{data}: dataset is empty")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / RUN_CONFIG)

    def report(rec):
        if not quiet and (rec.step % log_every == 0 or rec.step == cfg.total_steps - 1):
            print(f"step {rec.step:5d}  loss {rec.loss:10.4f}  lr {rec.lr:.2e}  lr_backbone {rec.lr_backbone:.2e}",
                  flush=True)

    model, _ = train(cfg, samples, out_dir=out, resume=resume, callback=report)
    return model


# -- infer --------------------------------------------------------------------------

def collect_images(inputs: list[str]) -> list[tuple[str, Path]]:
    """(id, path) pairs from dataset directories, plain directories of .ppm files, or files."""
    found = []
    for item in inputs:
        path = Path(item)
        if path.is_dir():
            root = dataset_root(path)
            if (root / "manifest.txt").exists():
                found += [(sid, root / "images" / f"{sid}.ppm") for sid in read_manifest(root)]
            else:
                found += [(p.stem, p) for p in sorted(path.glob("*.ppm"))]
        elif path.exists():
            found.append((path.stem, path))
        else:
            raise DataError(f"{path}: no such file or directory")
    if not found:
        raise DataError("no input images found")
    ids = [sid for sid, _ in found]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate image ids among inputs")
    return found


def draw_overlay(image: np.ndarray, dets: list[Detection], color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Polygon outlines drawn one pixel wide onto a copy of the image."""
    out = image.copy()
    _, h, w = out.shape
    for d in dets:
        v = d.polygon.vertices
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            n = int(np.ceil(np.abs(b - a).max())) + 1
            pts = a + (b - a) * np.linspace(0, 1, n)[:, None]
            xs = np.clip(np.floor(pts[:, 0]).astype(int), 0, w - 1)
            ys = np.clip(np.floor(pts[:, 1]).astype(int), 0, h - 1)
            out[:, ys, xs] = np.asarray(color)[:, None]
    return out


def write_detections(path: Path, dets: list[Detection]):
    path.write_text("".join(format_polygon(d.polygon, d.confidence) + "\n" for d in dets))


def _infer_one(job) -> tuple[str, list[Detection]]:
    sid, path, ckpt, cfg, late_fusion = job
    model = _model_cache(ckpt, cfg)
    image = read_image_ppm(path)
    dets = detect_late_fusion(model, image, scales=late_fusion) if late_fusion else detect(model, image)
    return sid, dets


_MODELS: dict = {}


def _model_cache(ckpt: Path, cfg: Config):
    key = (str(ckpt), ckpt.stat().st_mtime_ns, cfg.to_text())
    if key not in _MODELS:
        blob = checkpoint.load(ckpt)
        model = ATTR(cfg)
        try:
            restore_state(model, None, blob)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{ckpt} does not fit the configuration: {exc}") from None
        _MODELS[key] = model
    return _MODELS[key]


def cmd_infer(cfg: Config, ckpt: Path, inputs: list[str], out: Path, overlay: bool = False,
              late_fusion: tuple[float, ...] | None = None) -> dict[str, list[Detection]]:
    if not ckpt.exists():
        raise DataError(f"{ckpt}: checkpoint not found")
    images = collect_images(inputs)
    _model_cache(ckpt, cfg)  # fail early on a mismatched checkpoint
    results = dict(parallel_map(_infer_one, [(sid, p, ckpt, cfg, late_fusion) for sid, p in images]))
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / RUN_CONFIG)
    for sid, path in images:
        write_detections(out / f"{sid}.txt", results[sid])
        if overlay:
            write_image_ppm(out / f"{sid}_overlay.ppm", draw_overlay(read_image_ppm(path), results[sid]))
    return results


# -- eval ---------------------------------------------------------------------------

def read_gt_dir(path: Path) -> dict[str, list[Polygon]]:
    root = dataset_root(path)
    gt_dir = root / "gts" if (root / "gts").is_dir() else root
    files = sorted(gt_dir.glob("*.txt"))
    if not files:
        raise DataError(f"{path}: no ground-truth files")
    return {p.stem: read_annotations(p) for p in files if p.name != RUN_CONFIG}


def read_det_dir(path: Path) -> dict[str, list[tuple[Polygon, float]]]:
    if not path.is_dir():
        raise DataError(f"{path}: not a directory")
    skip = {RUN_CONFIG, "eval_report.txt"}
    return {p.stem: read_detections(p) for p in sorted(path.glob("*.txt")) if p.name not in skip}


def cmd_eval(cfg: Config, dets_dir: Path, gts_dir: Path, out: Path | None = None) -> EvalReport:
    dets, gts = read_det_dir(dets_dir), read_gt_dir(gts_dir)
    try:
        report = evaluate(dets, gts, cfg.iou_thresh)
    except KeyError as exc:
        raise DataError(exc.args[0]) from None
    out = out or dets_dir / "eval_report.txt"
    out.write_text(report.to_kv())
    return report


# -- ablate -------------------------------------------------------------------------

ABLATIONS = ("single-vs-multi", "late-fusion", "projection", "decoders")


def _variants(mode: str, cfg: Config) -> list[tuple[str, Config | None, tuple | None]]:
    """(row label, config to train or None if not applicable, late-fusion scales)."""
    multi = cfg.replace(scales=(0.5, 1.0, 2.0))
    single = cfg.replace(scales=(1.0,))
    if mode == "single-vs-multi":
        return [("single {1}", single, None), ("multi {1/2,1,2}", multi, None)]
    if mode == "late-fusion":
        return [("single {1}", single, None), ("late fusion NMS", single, (0.5, 1.0, 2.0)),
                ("ATTR {1/2,1,2}", multi, None)]
    if mode == "projection":
        # patch projection has no stride-2 stem map to build the text embedding from
        return [("lp", None, None), ("conv", cfg.replace(projection="conv"), None),
                ("res", cfg.replace(projection="res"), None)]
    if mode == "decoders":
        return [(f"{n} decoders", cfg.replace(num_decoders=n), None) for n in (0, 3, 6, 9)]
    raise ConfigError(f"unknown ablation mode {mode!r}; choose from {', '.join(ABLATIONS)}")


def _variant_dir(out: Path, cfg: Config) -> Path:
    return out / ("run-" + hashlib.sha256(cfg.to_text().encode()).hexdigest()[:12])


def _trained(cfg: Config, data: Path, out: Path, quiet: bool) -> Path:
    """Train once per distinct configuration; finished runs are reused across modes."""
    run = _variant_dir(out, cfg)
    ckpt = run / CKPT_NAME
    if ckpt.exists() and int(checkpoint.load(ckpt).get("optim.step", np.zeros(1))[0]) >= cfg.total_steps:
        return ckpt
    cmd_train(cfg, data, run, resume=True, quiet=quiet)
    return ckpt


def cmd_ablate(cfg: Config, mode: str, data: Path, test: Path, out: Path, quiet: bool = True) -> list[tuple]:
    variants = _variants(mode, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / RUN_CONFIG)
    rows = []
    for label, vcfg, fusion in variants:
        if vcfg is None:
            rows.append((label, None))
            continue
        ckpt = _trained(vcfg, data, out, quiet)
        det_dir = out / f"dets-{mode}-{label.split()[0]}-{'fusion' if fusion else 'plain'}"
        cmd_infer(vcfg, ckpt, [str(dataset_root(test))], det_dir, late_fusion=fusion)
        rows.append((label, cmd_eval(vcfg, det_dir, test)))
    table = ablation_table(mode, rows)
    (out / f"ablate_{mode}.txt").write_text(table + "\n")
    return rows


def ablation_table(mode: str, rows: list[tuple]) -> str:
    lines = [f"ablation: {mode}", f"{'variant':<18}{'P':>8}{'R':>8}{'F':>8}{'TIoU-F':>8}"]
    for label, rep in rows:
        if rep is None:
            lines.append(f"{label:<18}{'n/a':>8}{'n/a':>8}{'n/a':>8}{'n/a':>8}")
        else:
            vals = (rep.precision, rep.recall, rep.f_measure, rep.tiou_f)
            lines.append(f"{label:<18}" + "".join(f"{v * 100:8.2f}" for v in vals))
    return "\n".join(lines)


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attrdet", description="Multi-scale transformer text detector.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--out", required=True, type=Path, help="dataset directory to create")
    p.add_argument("--count", type=int, default=20, help="number of images (default 20)")
    p.add_argument("--val-fraction", type=float, default=0.2, help="share held out as val/ (default 0.2)")

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--data", required=True, type=Path, help="dataset directory (its train/ split if present)")
    p.add_argument("--out", required=True, type=Path, help="run directory for checkpoint and log")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--log-every", type=int, default=50, help="print every N steps (default 50)")

    p = common(sub.add_parser("infer", help="detect text in images"))
    p.add_argument("--ckpt", required=True, type=Path, help="trained checkpoint")
    p.add_argument("--out", required=True, type=Path, help="directory for <id>.txt detections")
    p.add_argument("--overlay", action="store_true", help="also write <id>_overlay.ppm")
    p.add_argument("--scales", help="pyramid scales, e.g. 1 or 0.5,1,2")
    p.add_argument("--late-fusion", action="store_true", help="per-scale runs merged by polygon NMS")
    p.add_argument("images", nargs="+", help="image files or directories of .ppm images")

    p = common(sub.add_parser("eval", help="score detections against ground truth"))
    p.add_argument("--dets", required=True, type=Path, help="directory written by infer")
    p.add_argument("--gts", required=True, type=Path, help="dataset directory with annotations")
    p.add_argument("--out", type=Path, help="report file (default: eval_report.txt in --dets)")

    p = common(sub.add_parser("ablate", help="train and compare model variants"))
    p.add_argument("--mode", required=True, choices=ABLATIONS)
    p.add_argument("--data", required=True, type=Path, help="training dataset")
    p.add_argument("--test", required=True, type=Path, help="evaluation dataset")
    p.add_argument("--out", required=True, type=Path, help="directory for runs and the result table")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "synth":
        cfg = resolve_config(args)
        sums = cmd_synth(cfg, args.out, args.count, args.val_fraction)
        print(f"wrote {len(sums)} files to {args.out}")
    elif args.command == "train":
        cfg = resolve_config(args)
        cmd_train(cfg, args.data, args.out, args.resume, args.log_every)
        print(f"checkpoint {args.out / CKPT_NAME}, loss log {args.out / LOG_NAME}")
    elif args.command == "infer":
        if args.scales:
            args.set = (args.set or []) + [f"scales={args.scales}"]
        cfg = resolve_config(args, args.ckpt.parent / RUN_CONFIG)
        fusion = (0.5, 1.0, 2.0) if args.late_fusion else None
        results = cmd_infer(cfg, args.ckpt, args.images, args.out, args.overlay, fusion)
        print(f"{sum(map(len, results.values()))} detections in {len(results)} images -> {args.out}")
    elif args.command == "eval":
        cfg = resolve_config(args)
        print(cmd_eval(cfg, args.dets, args.gts, args.out).table())
    elif args.command == "ablate":
        cfg = resolve_config(args)
        rows = cmd_ablate(cfg, args.mode, args.data, args.test, args.out)
        print(ablation_table(args.mode, rows))
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, checkpoint.CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
