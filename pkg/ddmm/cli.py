"""The ``ddmm`` command line.

    ddmm gen-data    --config run.ini --out data/
    ddmm train       --config run.ini --data data/ --out train/
    ddmm sample      --checkpoint train/checkpoint.ddmm --n 2000 --out samples/
    ddmm eval-images --real heldout/ --fake samples/ --out quality.csv
    ddmm train-seg   --pairs samples/ --out seg/
    ddmm eval-seg    --segnet seg/segnet.ddmm --test data/labeled_test --out seg_eval.csv
    ddmm report      --run ./

Exit codes: 0 success, 1 rejected input, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import torch

from . import __version__, checkpoint, manifest
from .config import RunConfig, load
from .errors import EXIT_OK, EXIT_VALIDATION, DdmmError, ValidationError, exit_code
from .metrics import quality_report
from .phantom import PairDataset, image_files, ingest_folder, mask_pixels, make_splits, read_gray, to_pixels, write_pgm
from .sampler import consistency_scores, sample_batch, save_pairs
from .segmenter import evaluate_segmenter, train_segmenter
from .trainer import DdmmModel, EpochRecord, OptimState, fit
from .report import REPORT_FILES, build_report

logger = logging.getLogger("ddmm")

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
THREADS_ENV = "DDMM_THREADS"
CHECKPOINT_NAME = "checkpoint.ddmm"
SEGNET_NAME = "segnet.ddmm"
RESOLVED_CONFIG = "config.resolved.ini"
# options that name files; manifests identify inputs by digest instead
PATH_OPTIONS = {"config", "out", "data", "checkpoint", "resume", "real", "fake", "pairs", "segnet", "test", "run"}


# ---------- helpers ----------

def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.CRITICAL if quiet else (logging.DEBUG if verbose else logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def configure_torch() -> None:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            threads = int(raw)
        except ValueError as e:
            raise ValidationError(f"{THREADS_ENV} must be a positive integer; got {raw!r}") from e
        if threads < 1:
            raise ValidationError(f"{THREADS_ENV} must be a positive integer; got {threads}")
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def _run_config(args: argparse.Namespace) -> RunConfig:
    cfg = load(Path(args.config)) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ValidationError(f"--seed must be nonnegative; got {args.seed}")
        cfg = cfg.with_seed(args.seed)
    return cfg


def _seeds(cfg: RunConfig) -> Dict[str, int]:
    return {
        "phantom": cfg.phantom.seed,
        "init": cfg.init.init_seed,
        "supervised": cfg.train.seed_supervised,
        "unsupervised": cfg.train.seed_unsupervised,
        "shuffle": cfg.train.seed_shuffle,
        "vlb": cfg.train.vlb_seed,
        "sampler": cfg.sampler.base_seed,
        "extractor": cfg.metrics.extractor_seed,
        "pairing": cfg.metrics.pairing_seed,
        "segmenter": cfg.segmenter.seed,
    }


def _options(args: argparse.Namespace) -> List[str]:
    """Non-path options of the invocation, for the manifest."""
    skip = PATH_OPTIONS | {"handler", "command", "force", "verbose", "quiet"}
    return [f"{k}={v}" for k, v in sorted(vars(args).items()) if k not in skip and v is not None]


def _require(value: Optional[str], flag: str, command: str) -> Path:
    if not value:
        raise ValidationError(f"{command} needs {flag}")
    return Path(value)


def _progress(args: argparse.Namespace) -> bool:
    return not args.quiet and sys.stderr.isatty()


def _stem(name: str) -> str:
    return name.split(":", 1)[-1]


def write_dataset(folder: Path, data: PairDataset, split: Optional[str] = None) -> None:
    """Write ``data`` as images/ (and masks/) PGM folders, plus a SPLIT marker."""
    (folder / "images").mkdir(parents=True, exist_ok=True)
    masks = data.binary_masks() if data.masks is not None else None
    if masks is not None:
        (folder / "masks").mkdir(parents=True, exist_ok=True)
    for k, name in enumerate(data.names):
        write_pgm(folder / "images" / f"{_stem(name)}.pgm", to_pixels(data.images[k]))
        if masks is not None:
            write_pgm(folder / "masks" / f"{_stem(name)}.pgm", mask_pixels(masks[k]))
    if split is not None:
        manifest.write_split_marker(folder, split)


def _folder_size(images_dir: Path) -> int:
    files = image_files(images_dir)
    if not files:
        raise ValidationError(f"no .pgm or .png files in {images_dir}")
    return int(min(read_gray(files[0]).shape))


def _has_images(folder: Path) -> bool:
    if not folder.is_dir():
        return False
    images = folder / "images" if (folder / "images").is_dir() else folder
    return bool(image_files(images))


def load_folder(folder: Path, command: str, size: Optional[int] = None, need_masks: bool = False) -> PairDataset:
    """Read a dataset folder (with images/ and masks/ subfolders, or a flat image folder)."""
    folder = Path(folder)
    if not folder.is_dir():
        raise ValidationError(f"{folder} is not a directory")
    manifest.guard_split(folder, command)
    images = folder / "images" if (folder / "images").is_dir() else folder
    masks = folder / "masks" if (folder / "masks").is_dir() else None
    if need_masks and masks is None:
        raise ValidationError(f"{command} needs masks, but {folder} has no masks/ folder")
    return ingest_folder(images, masks, size if size is not None else _folder_size(images))


def _write_resolved(out: Path, cfg: RunConfig) -> None:
    (out / RESOLVED_CONFIG).write_text(cfg.dumps())


def _finish(
    out: Path, args: argparse.Namespace, cfg: RunConfig, inputs: Dict[str, Path], extra: Optional[Dict[str, Any]] = None
) -> None:
    manifest.write_manifest(
        out, args.command, _options(args), cfg.as_dict(), _seeds(cfg), inputs, manifest.list_outputs(out), extra
    )


def _file_manifest(path: Path) -> Path:
    return path.with_name(path.stem + ".manifest.json")


# ---------- commands ----------

def cmd_gen_data(args: argparse.Namespace, cfg: RunConfig) -> None:
    out = manifest.prepare_out_dir(_require(args.out, "--out", "gen-data"), args.force)
    split = make_splits(cfg.phantom, cfg.data.n_labeled, cfg.data.n_unlabeled)
    for name in manifest.SPLITS:
        write_dataset(out / name, getattr(split, name), name)
    _write_resolved(out, cfg)
    counts = {name: len(getattr(split, name)) for name in manifest.SPLITS}
    _finish(out, args, cfg, {}, {"counts": counts})
    logger.info("generated %s", ", ".join(f"{n} {k}" for k, n in counts.items()))


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> None:
    data = _require(args.data, "--data", "train")
    size = cfg.phantom.size
    lab_dir = data / "labeled_train" if (data / "labeled_train").is_dir() else data
    labeled = load_folder(lab_dir, "train", size, need_masks=True)
    inputs = {"labeled": lab_dir}
    unlabeled = None
    pool_dir = data / "unlabeled"
    if cfg.train.lambda_unsup > 0 and _has_images(pool_dir):
        unlabeled = load_folder(pool_dir, "train", size)
        inputs["unlabeled"] = pool_dir
    trained_on = list(labeled.names) + (list(unlabeled.names) if unlabeled is not None else [])

    train_cfg = cfg.train
    ckpt = checkpoint.load(Path(args.resume)) if args.resume else None
    out = manifest.prepare_out_dir(_require(args.out, "--out", "train"), args.force)
    if ckpt is not None:
        model = checkpoint.restore_model(ckpt)
        optim = checkpoint.restore_optim(ckpt, model, train_cfg)
        train_cfg = replace(train_cfg, epochs=max(train_cfg.epochs - model.epoch, 0))
        inputs["resume"] = Path(args.resume)
        logger.info("resuming after epoch %d", model.epoch)
    else:
        model = DdmmModel.create(cfg.arch, cfg.schedule.build(), size, cfg.init.init_seed)
        optim = OptimState(model, train_cfg)

    def on_epoch_end(m: DdmmModel, state: OptimState, record: EpochRecord) -> None:
        if train_cfg.checkpoint_every and record.epoch % train_cfg.checkpoint_every == 0:
            checkpoint.save(out / CHECKPOINT_NAME, checkpoint.model_checkpoint(m, state, trained_on))

    log = fit(model, labeled, unlabeled, train_cfg, optim, on_epoch_end, progress=_progress(args))
    checkpoint.save(out / CHECKPOINT_NAME, checkpoint.model_checkpoint(model, optim, trained_on))
    log.to_csv(out / "training_log.csv")
    _write_resolved(out, cfg)
    _finish(out, args, cfg, inputs, {"trained_on": sorted(trained_on), "epoch": model.epoch})


def cmd_sample(args: argparse.Namespace, cfg: RunConfig) -> None:
    ckpt_path = _require(args.checkpoint, "--checkpoint", "sample")
    ckpt = checkpoint.load(ckpt_path)
    model = checkpoint.restore_model(ckpt)
    sampler = cfg.sampler
    overrides = {"kind": args.kind, "ddim_steps": args.ddim_steps, "eta": args.eta}
    sampler = replace(sampler, **{k: v for k, v in overrides.items() if v is not None})
    n = args.n if args.n is not None else cfg.sample_count.n
    cfg = replace(cfg, sampler=sampler)
    out = manifest.prepare_out_dir(_require(args.out, "--out", "sample"), args.force)
    pairs = sample_batch(model, sampler.base_seed, n, sampler, progress=_progress(args))
    save_pairs(pairs, out)
    if len(pairs) >= 2:
        matched, shuffled = consistency_scores(pairs, cfg.phantom, seed=cfg.metrics.pairing_seed)
        with open(out / "consistency.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["matched_dice", "shuffled_dice"])
            writer.writerow([repr(matched), repr(shuffled)])
        logger.info("consistency: matched Dice %.4f, shuffled Dice %.4f", matched, shuffled)
    _write_resolved(out, cfg)
    _finish(out, args, cfg, {"checkpoint": ckpt_path}, {"trained_on": ckpt.meta.get("trained_on", []), "n": n})


def cmd_eval_images(args: argparse.Namespace, cfg: RunConfig) -> None:
    real_dir = _require(args.real, "--real", "eval-images")
    fake_dir = _require(args.fake, "--fake", "eval-images")
    out = manifest.prepare_out_file(_require(args.out, "--out", "eval-images"), args.force)
    fake = load_folder(fake_dir, "eval-images")
    real = load_folder(real_dir, "eval-images", fake.size)
    report = quality_report(real.images, fake.images, cfg.metrics)
    report.to_csv(out)
    logger.info("fid %.6g kid %.6g ssim %.4f uqi %.4f scc %.4f", report.fid, report.kid, report.ssim_mean, report.uqi_mean, report.scc_mean)
    manifest.write_manifest(
        _file_manifest(out), args.command, _options(args), cfg.as_dict(), _seeds(cfg),
        {"real": real_dir, "fake": fake_dir}, {out.name: manifest.sha256_file(out)},
    )


def cmd_train_seg(args: argparse.Namespace, cfg: RunConfig) -> None:
    pairs_dir = _require(args.pairs, "--pairs", "train-seg")
    data = load_folder(pairs_dir, "train-seg", need_masks=True)
    out = manifest.prepare_out_dir(_require(args.out, "--out", "train-seg"), args.force)
    net, curve = train_segmenter(data, cfg.segmenter, progress=_progress(args))
    trained_on = sorted(set(manifest.lineage(pairs_dir)) | set(data.names))
    checkpoint.save(out / SEGNET_NAME, checkpoint.segnet_checkpoint(net, data.size, trained_on))
    with open(out / "seg_loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "bce"])
        for epoch, loss in enumerate(curve, start=1):
            writer.writerow([epoch, repr(loss)])
    _write_resolved(out, cfg)
    _finish(out, args, cfg, {"pairs": pairs_dir}, {"trained_on": trained_on, "n_pairs": len(data)})


def cmd_eval_seg(args: argparse.Namespace, cfg: RunConfig) -> None:
    segnet_path = _require(args.segnet, "--segnet", "eval-seg")
    test_dir = _require(args.test, "--test", "eval-seg")
    ckpt = checkpoint.load(segnet_path)
    net = checkpoint.restore_segnet(ckpt)
    if manifest.read_split(test_dir) != manifest.TEST_SPLIT:
        logger.warning("%s is not marked as the held-out test split", test_dir)
    test = load_folder(test_dir, "eval-seg", int(ckpt.meta["size"]), need_masks=True)
    manifest.check_disjoint(test.names, ckpt.meta.get("trained_on", []))
    out = manifest.prepare_out_file(_require(args.out, "--out", "eval-seg"), args.force)
    dump = out.with_name(out.stem + "_masks") if args.dump_masks else None
    evaluation = evaluate_segmenter(net, test, dump_dir=dump, adjusted_rand=cfg.metrics.adjusted_rand)
    evaluation.to_csv(out)
    logger.info("segmentation: Dice %.4f, Rand %.4f over %d images", evaluation.dice_mean, evaluation.rand_mean, len(test))
    outputs = {out.name: manifest.sha256_file(out)}
    if dump is not None:
        outputs.update({f"{dump.name}/{k}": v for k, v in manifest.list_outputs(dump).items()})
    manifest.write_manifest(
        _file_manifest(out), args.command, _options(args), cfg.as_dict(), _seeds(cfg),
        {"segnet": segnet_path, "test": test_dir}, outputs,
    )


def cmd_report(args: argparse.Namespace, cfg: RunConfig) -> None:
    run = Path(args.run or args.out or ".")
    if not args.force:
        for name in REPORT_FILES:
            if (run / name).exists():
                raise ValidationError(f"{run / name} already exists; pass --force to overwrite it")
    build_report(run)
    outputs = {name: manifest.sha256_file(run / name) for name in REPORT_FILES}
    manifest.write_manifest(
        run / "report.manifest.json", args.command, _options(args), None, {}, {}, outputs,
    )


# ---------- parser ----------

COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], None]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval-images": cmd_eval_images,
    "train-seg": cmd_train_seg,
    "eval-seg": cmd_eval_seg,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (INI); defaults apply when omitted")
    common.add_argument("--out", help="output directory (or CSV file for eval-images/eval-seg)")
    common.add_argument("--seed", type=int, help="override the phantom, init and sampler seeds")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    noise = common.add_mutually_exclusive_group()
    noise.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    noise.add_argument("-q", "--quiet", action="store_true", help="no logging")

    parser = argparse.ArgumentParser(prog="ddmm", description="Joint image/mask diffusion on synthetic radiographs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate phantom splits")
    p = sub.add_parser("train", parents=[common], help="train both diffusion branches")
    p.add_argument("--data", help="folder written by gen-data (or a labeled images/ + masks/ folder)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("sample", parents=[common], help="jointly sample image/mask pairs")
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int)
    p.add_argument("--kind", choices=["ddpm", "ddim"])
    p.add_argument("--ddim-steps", type=int)
    p.add_argument("--eta", type=float)
    p = sub.add_parser("eval-images", parents=[common], help="FID/KID/SSIM/UQI/SCC of fake against real images")
    p.add_argument("--real")
    p.add_argument("--fake")
    p = sub.add_parser("train-seg", parents=[common], help="train the downstream segmenter on sampled pairs")
    p.add_argument("--pairs")
    p = sub.add_parser("eval-seg", parents=[common], help="score the segmenter on the held-out test split")
    p.add_argument("--segnet")
    p.add_argument("--test")
    p.add_argument("--dump-masks", action="store_true", help="also write predicted masks as PGM")
    p = sub.add_parser("report", parents=[common], help="collect CSVs and render plots for a run directory")
    p.add_argument("--run")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; 2 is reserved for numeric failures
        return EXIT_OK if e.code in (0, None) else EXIT_VALIDATION
    configure_logging(args.verbose, args.quiet)
    try:
        configure_torch()
        cfg = _run_config(args)
        COMMANDS[args.command](args, cfg)
    except DdmmError as e:
        logger.error("%s: %s", args.command, e)
        return exit_code(e)
    except OSError as e:
        logger.error("%s: %s", args.command, e)
        return EXIT_VALIDATION
    return EXIT_OK
