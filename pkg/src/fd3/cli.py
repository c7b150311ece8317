"""``fd3`` command-line entry point.

Subcommands: degrade, train, enhance, evaluate, sweep-nfe, make-phantoms.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bridge import TimestepSchedule, sample, uniform_schedule
from .config import dump_config, get_bool, get_ints, load_config, parse_config_text
from .degradation import ParamRanges, synthesize_pair
from .imaging import ClaheParams, center_crop_resize, load_image, save_image
from .metrics import (
    PooledLuminanceExtractor, TopHatVesselSegmenter, evaluate, fid_frechet, fid_gaussian,
)
from .model import CHECKPOINT_VERSION, load_checkpoint
from .training import IMAGE_SUFFIXES, TrainingConfig, train
from .phantoms import make_phantoms

log = logging.getLogger("fd3")

ROLE_SUFFIXES = ("_gt", "_deg", "_enh")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _image_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _key(path: Path) -> str:
    stem = path.stem
    for suf in ROLE_SUFFIXES:
        if stem.endswith(suf):
            return stem[: -len(suf)]
    return stem


def collect(directory, prefer: tuple[str, ...]) -> dict[str, Path]:
    """Map image key -> file, preferring the first role suffix present in the directory.

    ``NAME_gt.png``, ``NAME_deg.png`` and ``NAME_enh.png`` share the key ``NAME``.
    """
    files = _image_files(directory)
    for suf in prefer:
        chosen = [p for p in files if p.stem.endswith(suf)]
        if chosen:
            return {_key(p): p for p in chosen}
    plain = [p for p in files if not any(p.stem.endswith(s) for s in ROLE_SUFFIXES)]
    return {_key(p): p for p in plain}


def hash_inputs(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(directory: Path, command: str, config: dict, seed: int, inputs) -> Path:
    """Write ``manifest.json`` into ``directory`` (before any other artifact)."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "manifest.json"
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": {k: str(v) for k, v in sorted(config.items())},
        "inputs_sha256": hash_inputs(inputs),
        "started": _now(),
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def finish_manifest(path: Path) -> None:
    manifest = json.loads(path.read_text())
    manifest["finished"] = _now()
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _parse_nfe_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--nfe-list: expected comma-separated integers, got {text!r}") from exc
    if not vals or min(vals) < 1:
        raise UsageError("--nfe-list: values must be positive integers")
    return vals


# ---------------------------------------------------------------- commands

def cmd_degrade(opts: dict) -> None:
    src, out = Path(opts["in"]), Path(opts["out"])
    seed, size, workers = int(opts["seed"]), int(opts["size"]), int(opts.get("workers", 1))
    ranges = ParamRanges.from_config(opts)
    clahe_params = ClaheParams(float(opts.get("clahe.clip_limit", 2.0)),
                               get_ints(opts, "clahe.tile_grid", (8, 8)))
    files = _image_files(src)
    if not files:
        raise FileNotFoundError(f"no PNG/JPEG images in {src}")
    manifest = write_manifest(out, "degrade", opts, seed, files)
    seqs = np.random.SeedSequence(seed).spawn(len(files))

    def one(job):
        path, ss = job
        img = center_crop_resize(load_image(path), size)
        x0, y, params = synthesize_pair(img, ranges, clahe_params, np.random.default_rng(ss))
        save_image(x0, out / f"{path.stem}_gt.png")
        save_image(y, out / f"{path.stem}_deg.png")
        return {"name": path.stem, **params.to_dict()}

    records = _map(one, list(zip(files, seqs)), workers)
    with open(out / "params.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    finish_manifest(manifest)


def cmd_train(opts: dict) -> None:
    out = Path(opts["out"])
    cfg = TrainingConfig.from_config(opts)
    inputs = _image_files(cfg.dataset_dir) if cfg.dataset_dir else []
    resolved = {**cfg.to_config(), "out": str(out)}
    (out).mkdir(parents=True, exist_ok=True)
    manifest = write_manifest(out, "train", resolved, cfg.seed, inputs)
    (out / "config.txt").write_text(dump_config(resolved))
    train(cfg, out)
    finish_manifest(manifest)


def _enhance_images(model, images: list[np.ndarray], schedule: TimestepSchedule, batch: int = 8):
    out = []
    for k in range(0, len(images), batch):
        out.extend(sample(model, np.stack(images[k:k + batch]), schedule))
    return out


def cmd_enhance(opts: dict) -> None:
    src, out = Path(opts["in"]), Path(opts["out"])
    nfe = int(opts.get("nfe", 10))
    size = opts.get("size")
    files = collect(src, ("_deg",))
    if not files:
        raise FileNotFoundError(f"no input images in {src}")
    model = load_checkpoint(opts["checkpoint"])
    manifest = write_manifest(out, "enhance", opts, int(opts["seed"]),
                              [*files.values(), Path(opts["checkpoint"])])
    schedule = uniform_schedule(nfe)
    keys = sorted(files)
    imgs = [load_image(files[k]) for k in keys]
    if size:
        imgs = [center_crop_resize(im, int(size)) for im in imgs]
    for k, est in zip(keys, _enhance_images(model, imgs, schedule)):
        save_image(est, out / f"{k}_enh.png")
    finish_manifest(manifest)


def _paired(gt_dir, est_dir, est_prefer=("_enh", "_deg")):
    gts = collect(gt_dir, ("_gt",))
    ests = collect(est_dir, est_prefer)
    keys = sorted(set(gts) & set(ests))
    if not keys:
        raise FileNotFoundError(f"no matching images between {gt_dir} and {est_dir}")
    missing = sorted(set(gts) ^ set(ests))
    if missing:
        log.warning("unmatched images ignored: %s", ", ".join(missing))
    return keys, gts, ests


def _segmenter(opts):
    return TopHatVesselSegmenter() if get_bool(opts, "segmenter", True) else None


def cmd_evaluate(opts: dict) -> None:
    report_path = Path(opts["report"])
    keys, gts, ests = _paired(opts["gt"], opts["est"])
    manifest = write_manifest(report_path.parent, "evaluate", opts, int(opts["seed"]),
                              [gts[k] for k in keys] + [ests[k] for k in keys])
    pairs = [(load_image(gts[k]), load_image(ests[k])) for k in keys]
    report = evaluate(pairs, PooledLuminanceExtractor(), _segmenter(opts), names=keys)
    doc = report.to_json()
    if opts.get("fid_mode", "gaussian") == "frechet" and len(pairs) >= 2:
        ex = PooledLuminanceExtractor()
        doc["fid_frechet"] = fid_frechet([ex(g) for g, _ in pairs], [ex(e) for _, e in pairs])
    _write_json(report_path, doc)
    finish_manifest(manifest)


def cmd_sweep(opts: dict) -> None:
    report_path = Path(opts["report"])
    nfes = _parse_nfe_list(opts.get("nfe_list", "1,2,5,10,20"))
    keys, gts, degs = _paired(opts["gt"], opts["deg"], ("_deg",))
    model = load_checkpoint(opts["checkpoint"])
    manifest = write_manifest(report_path.parent, "sweep-nfe", opts, int(opts["seed"]),
                              [gts[k] for k in keys] + [degs[k] for k in keys] + [Path(opts["checkpoint"])])
    gt_imgs = [load_image(gts[k]) for k in keys]
    deg_imgs = [load_image(degs[k]) for k in keys]
    ex = PooledLuminanceExtractor()
    feats_gt = [ex(g) for g in gt_imgs]
    rows = []
    for nfe in nfes:
        ests = _enhance_images(model, deg_imgs, uniform_schedule(nfe))
        rep = evaluate(list(zip(gt_imgs, ests)), ex, None, names=keys)
        fid = fid_gaussian(feats_gt, [ex(e) for e in ests]) if len(keys) >= 2 else None
        rows.append({"nfe": nfe, "psnr_mean": rep.to_json()["psnr_mean"], "fid": fid})
    _write_json(report_path, rows)
    finish_manifest(manifest)


def cmd_make_phantoms(opts: dict) -> None:
    out = Path(opts["out"])
    n, size, seed = int(opts.get("n", 100)), int(opts.get("size", 64)), int(opts["seed"])
    manifest = write_manifest(out, "make-phantoms", opts, seed, [])
    for i, img in enumerate(make_phantoms(n, size, seed)):
        save_image(img, out / f"phantom_{i:04d}.png")
    finish_manifest(manifest)


# ---------------------------------------------------------------- parsing

# flag -> (config key, default, required)
COMMANDS = {
    "degrade": (cmd_degrade, {
        "--in": ("in", None, True), "--out": ("out", None, True), "--ranges": ("ranges", None, False),
        "--size": ("size", 512, False), "--workers": ("workers", 1, False),
    }),
    "train": (cmd_train, {
        "--out": ("out", None, True), "--dataset-dir": ("dataset_dir", None, False),
        "--epochs": ("epochs", None, False),
    }),
    "enhance": (cmd_enhance, {
        "--checkpoint": ("checkpoint", None, True), "--in": ("in", None, True),
        "--out": ("out", None, True), "--nfe": ("nfe", 10, False), "--size": ("size", None, False),
    }),
    "evaluate": (cmd_evaluate, {
        "--gt": ("gt", None, True), "--est": ("est", None, True), "--report": ("report", None, True),
        "--fid-mode": ("fid_mode", "gaussian", False), "--segmenter": ("segmenter", "true", False),
    }),
    "sweep-nfe": (cmd_sweep, {
        "--checkpoint": ("checkpoint", None, True), "--gt": ("gt", None, True),
        "--deg": ("deg", None, True), "--nfe-list": ("nfe_list", "1,2,5,10,20", False),
        "--report": ("report", None, True),
    }),
    "make-phantoms": (cmd_make_phantoms, {
        "--out": ("out", None, True), "--n": ("n", 100, False), "--size": ("size", 64, False),
    }),
}


def build_parser() -> Parser:
    parser = Parser(prog="fd3", description="Fundus enhancement with direct diffusion bridges.")
    parser.add_argument("--version", action="version",
                        version=f"fd3 {__version__} (checkpoint format {CHECKPOINT_VERSION})")
    sub = parser.add_subparsers(dest="command", parser_class=Parser, metavar="COMMAND")
    for name, (_, flags) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file (or a run manifest)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config key")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, (key, _, required) in flags.items():
            p.add_argument(flag, dest=key, default=None,
                           help="required" if required else None)
    return parser


def resolve_options(parser, args) -> dict:
    """Merge config file, ``--set`` overrides and explicit flags (later wins)."""
    _, flags = COMMANDS[args.command]
    opts: dict = {}
    if args.config:
        opts.update(load_config(args.config))
    if getattr(args, "ranges", None):
        for k, v in load_config(args.ranges).items():
            opts[k if k.startswith("ranges.") else f"ranges.{k}"] = v
    opts.pop("ranges", None)
    opts.update(parse_config_text("\n".join(args.set), "--set"))
    for flag, (key, default, required) in flags.items():
        value = getattr(args, key)
        if key == "ranges":
            continue
        if value is not None:
            opts[key] = value
        elif key not in opts:
            if required:
                parser.error(f"the following arguments are required: {flag}")
            if default is not None:
                opts[key] = default
    if args.seed is not None:
        opts["seed"] = args.seed
    opts.setdefault("seed", 0)
    opts["seed"] = int(opts["seed"])
    return opts


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        sys.stderr.write("fd3: error: a subcommand is required\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        opts = resolve_options(sub, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"fd3 {args.command}: error: {exc}\n")
        return 1
    handler, _ = COMMANDS[args.command]
    try:
        handler(opts)
    except UsageError as exc:
        sys.stderr.write(f"fd3 {args.command}: error: {exc}\n")
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        sys.stderr.write(f"fd3 {args.command}: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
