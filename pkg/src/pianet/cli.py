"""Command-line interface: ``pianet <command> [options]``.

Settings come from three layers, later ones winning: built-in defaults
(``--preset``), a JSON config file (``--config``), then command-line flags.
The config file holds ``"version": 1`` and any of the sections
``model``, ``stage1``, ``stage2``, ``detect``, ``phantom``, ``preprocess``.
Unknown sections or keys are rejected.

Every run writes a manifest next to its output. Failures exit nonzero with
one line ``error code=<CODE> exit=<n>: <message>`` on stderr.
"""

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import boxes as bx
from .checkpoint import load_checkpoint, save_checkpoint
from .data.io import read_annotations, read_volume, write_annotations, write_mhd, write_volume_bin
from .data.patches import crop_patches
from .data.phantom import PhantomSpec, generate_phantom, to_hu
from .data.preprocess import HU_MAX, HU_MIN, preprocess
from .data.volume import ScanAnnotation, filter_annotation, nodule_boxes
from .detect import DetectConfig, detect_volume, detections_to_world
from .errors import ConfigError, DataError, NumericError, PianetError, PianetIOError
from .evaluation import evaluate, read_detections, write_detections, write_report
from .model import PiaNetConfig
from .recipes import PHANTOM_MODEL, PHANTOM_STAGE1, PHANTOM_STAGE2
from .training import JsonlLog, TrainConfig, TrainScan, finetune_stage2, load_detector, pretrain_stage1

log = logging.getLogger("pianet")

CONFIG_VERSION = 1
PREPROCESS_KEYS = {"hu_min", "hu_max", "crop", "min_agreement"}
PHANTOM_KEYS = set(PhantomSpec.__dataclass_fields__) - {"seed", "scan_id"} | {"count", "first_seed"}
SECTIONS = {"model", "stage1", "stage2", "detect", "phantom", "preprocess"}


# -- configuration -------------------------------------------------------------


def preset(name):
    if name == "reference":
        return {"model": PiaNetConfig().to_dict(), "stage1": TrainConfig(batch_size=8).to_dict(),
                "stage2": TrainConfig().to_dict()}
    if name == "phantom":
        return {"model": PHANTOM_MODEL.to_dict(), "stage1": PHANTOM_STAGE1.to_dict(),
                "stage2": PHANTOM_STAGE2.to_dict()}
    raise ConfigError(f"unknown preset {name!r} (reference, phantom)")


def load_config(path, preset_name):
    cfg = preset(preset_name)
    cfg.update(detect={}, phantom={}, preprocess={})
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise PianetIOError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{path}: config version must be {CONFIG_VERSION}, got {raw.get('version')!r}")
    unknown = set(raw) - SECTIONS - {"version"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections: {', '.join(sorted(unknown))}")
    for sec in SECTIONS & set(raw):
        if not isinstance(raw[sec], dict):
            raise ConfigError(f"{path}: section {sec!r} must be an object")
        cfg[sec] = dict(cfg.get(sec, {}), **raw[sec])
    bad = set(cfg["preprocess"]) - PREPROCESS_KEYS
    if bad:
        raise ConfigError(f"unknown preprocess config keys: {', '.join(sorted(bad))}")
    bad = set(cfg["phantom"]) - PHANTOM_KEYS
    if bad:
        raise ConfigError(f"unknown phantom config keys: {', '.join(sorted(bad))}")
    PiaNetConfig.from_dict(cfg["model"])
    TrainConfig.from_dict(cfg["stage1"])
    TrainConfig.from_dict(cfg["stage2"])
    DetectConfig.from_dict(cfg["detect"])
    return cfg


def train_config(cfg, section, args):
    d = dict(cfg[section])
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    return TrainConfig.from_dict(d)


def model_config(cfg):
    return PiaNetConfig.from_dict(cfg["model"])


def detect_config(cfg, args):
    d = dict(cfg["detect"])
    if getattr(args, "score_threshold", None) is not None:
        d["score_threshold"] = args.score_threshold
    return DetectConfig.from_dict(d)


# -- helpers -------------------------------------------------------------------


def _digest(path):
    p = Path(path)
    if p.is_file():
        return hashlib.sha256(p.read_bytes()).hexdigest()
    return None


def write_manifest(args, cfg, outputs, timings, snapshot):
    out = Path(args.out)
    path = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    manifest = {
        "pianet_version": __version__,
        "command": args.command,
        "argv": args.argv,
        "config_file": None if getattr(args, "config", None) is None else str(args.config),
        "resolved_config": snapshot,
        "seed": getattr(args, "seed", None),
        "outputs": {str(p): _digest(p) for p in outputs},
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise PianetIOError(f"cannot write manifest {path}: {exc.strerror or exc}") from exc
    return path


def _volume_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise PianetIOError(f"data directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix in (".vol", ".mhd") and not p.stem.endswith("_mask"))
    if not files:
        raise DataError(f"{d}: no .vol or .mhd volumes found")
    return files


def _load_scans(data_dir, annotation_path, min_agreement=3):
    anns = read_annotations(annotation_path)
    out = []
    for f in _volume_files(data_dir):
        ann = anns.get(f.stem)
        if ann is None:
            log.warning("%s has no annotation rows; treating it as nodule-free", f.stem)
            ann = ScanAnnotation(f.stem)
        out.append((read_volume(f), filter_annotation(ann, min_agreement)))
    return out


def _mkdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PianetIOError(f"cannot create directory {path}: {exc.strerror or exc}") from exc


# -- commands ------------------------------------------------------------------


def cmd_phantom(args, cfg):
    spec_kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg["phantom"].items()}
    count, first = spec_kw.pop("count", 1), spec_kw.pop("first_seed", 0)
    count = int(count if args.count is None else args.count)
    first = int(first if args.seed is None else args.seed)
    if args.side is not None:
        spec_kw["side"] = args.side
    _mkdir(args.out)
    out = Path(args.out)
    outputs, anns = [], []
    for s in range(first, first + count):
        volume, ann = generate_phantom(PhantomSpec(seed=s, **spec_kw))
        outputs.append(write_mhd(out / f"{ann.scan_id}.mhd", to_hu(volume)))
        mask = volume.with_(data=volume.mask.astype(np.uint8))
        outputs.append(write_mhd(out / f"{ann.scan_id}_mask.mhd", mask, "MET_UCHAR"))
        anns.append(ann)
    outputs.append(write_annotations(out / "annotations.csv", anns))
    return outputs, {"phantom": dict(spec_kw, count=count, first_seed=first)}


def cmd_preprocess(args, cfg):
    p = cfg["preprocess"]
    hu_min, hu_max = p.get("hu_min", HU_MIN), p.get("hu_max", HU_MAX)
    crop = p.get("crop", True) and not args.no_crop
    _mkdir(args.out)
    outputs = []
    for f in _volume_files(args.input):
        volume = read_volume(f)
        mask_file = f.with_name(f"{f.stem}_mask{f.suffix}")
        if mask_file.exists():
            mask = read_volume(mask_file).data > 0
        elif args.full_mask:
            mask = np.ones(volume.shape, dtype=bool)
        else:
            raise DataError(f"{f}: no lung mask {mask_file.name}; pass --full-mask to use the whole volume")
        v = preprocess(volume, mask, hu_min, hu_max, crop)
        outputs.append(write_volume_bin(Path(args.out) / f"{f.stem}.vol", v))
    return outputs, {"preprocess": {"hu_min": hu_min, "hu_max": hu_max, "crop": crop}}


def cmd_pretrain(args, cfg):
    mc = model_config(cfg)
    tc = train_config(cfg, "stage1", args)
    scans = _load_scans(args.data, args.annotations, cfg["preprocess"].get("min_agreement", 3))
    pairs = [(v, nodule_boxes(v, a.relevant())) for v, a in scans]
    patches = crop_patches(pairs, mc.input_cube_side // 2, tc.negatives_per_positive, np.random.default_rng(tc.seed))
    log_fn = JsonlLog(args.log) if args.log else None
    resume = load_checkpoint(args.resume) if args.resume else None
    try:
        ckpt = pretrain_stage1(patches, mc, tc, resume=resume, log_fn=log_fn)
    finally:
        if log_fn:
            log_fn.close()
    outputs = [save_checkpoint(args.out, ckpt)] + ([Path(args.log)] if args.log else [])
    return outputs, {"model": mc.to_dict(), "stage1": tc.to_dict()}


def cmd_train(args, cfg):
    mc = model_config(cfg)
    tc = train_config(cfg, "stage2", args)
    scans = _load_scans(args.data, args.annotations, cfg["preprocess"].get("min_agreement", 3))
    init = load_checkpoint(args.init) if args.init else None
    resume = load_checkpoint(args.resume) if args.resume else None
    log_fn = JsonlLog(args.log) if args.log else None
    try:
        ckpt = finetune_stage2([TrainScan(v, nodule_boxes(v, a.relevant())) for v, a in scans], mc, tc,
                               init=init, resume=resume, log_fn=log_fn)
    finally:
        if log_fn:
            log_fn.close()
    outputs = [save_checkpoint(args.out, ckpt)] + ([Path(args.log)] if args.log else [])
    return outputs, {"model": mc.to_dict(), "stage2": tc.to_dict(), "init": args.init}


def cmd_detect(args, cfg):
    model = load_detector(load_checkpoint(args.model))
    dc = detect_config(cfg, args)
    anchors = bx.generate_anchors(model.config)
    rows = {}
    for f in _volume_files(args.data):
        volume = read_volume(f)
        if not volume.normalized:
            raise DataError(f"{f}: volume is not preprocessed; run `pianet preprocess` first")
        rows[f.stem] = detections_to_world(volume, *detect_volume(model, volume, anchors, dc))
    return [write_detections(args.out, rows)], {"detect": dc.__dict__}


def cmd_evaluate(args, cfg):
    dets = read_detections(args.detections)
    anns = {k: filter_annotation(v, cfg["preprocess"].get("min_agreement", 3))
            for k, v in read_annotations(args.annotations).items()}
    scan_ids = sorted(set(anns) | set(dets))
    curve, report, _ = evaluate(dets, anns, scan_ids, args.hit_rule, args.mode)
    n_nodules = sum(len(a.relevant()) for a in anns.values())
    path = write_report(args.out, report, args.format, len(scan_ids), n_nodules)
    print(f"CPM {report.cpm:.4f} over {len(scan_ids)} scans, {n_nodules} nodules")
    return [path], {"hit_rule": args.hit_rule, "mode": args.mode, "format": args.format}


def cmd_gradcheck(args, cfg):
    from .verify import run_suite

    lines, failed = [], []
    for name, report in run_suite(not args.layers_only, args.side, args.width_divisor, args.fraction, args.seed or 0):
        status = "PASS" if report.passed else "FAIL"
        lines.append(f"{name}: max rel err {report.max_error:.3e} (tolerance {report.tolerance:g}) {status}")
        print(lines[-1], flush=True)
        if not report.passed:
            failed.append(name)
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")
    return [Path(args.out)], {"side": args.side, "width_divisor": args.width_divisor, "fraction": args.fraction}


def write_pgm(path, image):
    img = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w = img.shape
    try:
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    except OSError as exc:
        raise PianetIOError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return Path(path)


def render_slice(volume, rows, z_index, threshold=0.8):
    """Axial slice as 8-bit grey with detection squares (value 255) burned in."""
    img = np.array(volume.data[z_index], dtype=np.float64)
    if not volume.normalized:
        img = (img - img.min()) * (255.0 / max(np.ptp(img), 1e-12))
    for x, y, z, r, score in np.asarray(rows, dtype=np.float64).reshape(-1, 5):
        if score < threshold:
            continue
        cz, cy, cx = volume.world_to_voxel([x, y, z])
        half = r / 2.0
        if abs(z_index - cz) > half / volume.spacing[0]:
            continue
        hy, hx = half / volume.spacing[1], half / volume.spacing[2]
        y0, y1 = int(np.floor(cy - hy)), int(np.ceil(cy + hy))
        x0, x1 = int(np.floor(cx - hx)), int(np.ceil(cx + hx))
        ys, xs = slice(max(y0, 0), min(y1, img.shape[0] - 1) + 1), slice(max(x0, 0), min(x1, img.shape[1] - 1) + 1)
        for yy in (y0, y1):
            if 0 <= yy < img.shape[0]:
                img[yy, xs] = 255
        for xx in (x0, x1):
            if 0 <= xx < img.shape[1]:
                img[ys, xx] = 255
    return img


def cmd_slice(args, cfg):
    volume = read_volume(args.volume)
    dets = read_detections(args.detections) if args.detections else {}
    rows = dets.get(args.scan_id or Path(args.volume).stem, np.zeros((0, 5)))
    z = args.z if args.z is not None else volume.shape[0] // 2
    if not 0 <= z < volume.shape[0]:
        raise ConfigError(f"slice index {z} outside 0..{volume.shape[0] - 1}")
    return [write_pgm(args.out, render_slice(volume, rows, z, args.threshold))], {"z": z, "threshold": args.threshold}


# -- parser --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"error code={ConfigError.code} exit=2: {self.prog}: {message}\n")


def build_parser():
    parser = _Parser(prog="pianet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"pianet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file (version 1)")
        p.add_argument("--preset", default="phantom", choices=("phantom", "reference"),
                       help="built-in model/training defaults (default: phantom)")
        p.add_argument("--out", required=True, help="output path")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        p.set_defaults(func=func)
        return p

    p = add("phantom", cmd_phantom, "write synthetic phantom volumes (.mhd, HU), masks and annotations.csv")
    p.add_argument("--seed", type=int, help="first phantom seed")
    p.add_argument("--count", type=int, help="number of phantoms")
    p.add_argument("--side", type=int, help="phantom side in voxels")

    p = add("preprocess", cmd_preprocess, "resample to 1 mm, window to [0, 255], mask and crop to the lung")
    p.add_argument("--input", required=True, help="directory of .mhd/.vol volumes with <id>_mask files")
    p.add_argument("--no-crop", action="store_true", help="keep the full extent instead of cropping to the lung box")
    p.add_argument("--full-mask", action="store_true", help="treat volumes without a mask file as all lung")

    for name, func, text in (("pretrain", cmd_pretrain, "stage 1: pretrain the patch classifier"),
                             ("train", cmd_train, "stage 2: fine-tune the detector")):
        p = add(name, func, text)
        p.add_argument("--data", required=True, help="directory of preprocessed .vol volumes")
        p.add_argument("--annotations", required=True, help="annotation CSV")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float, help="initial learning rate")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--resume", help="checkpoint to resume from")
        p.add_argument("--log", help="JSONL training log path")
        if name == "train":
            p.add_argument("--init", help="stage-1 checkpoint whose features initialise the detector")

    p = add("detect", cmd_detect, "run the detector over preprocessed volumes and write a detections CSV")
    p.add_argument("--model", required=True, help="stage-2 checkpoint")
    p.add_argument("--data", required=True, help="directory of preprocessed .vol volumes")
    p.add_argument("--score-threshold", type=float)

    p = add("evaluate", cmd_evaluate, "FROC analysis and CPM of a detections CSV")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--format", default="json", choices=("json", "csv", "plot-data"))
    p.add_argument("--mode", default="radius", choices=("radius", "iou"))
    p.add_argument("--hit-rule", type=float, default=1.0, help="radius multiple, or IoU threshold in iou mode")

    p = add("gradcheck", cmd_gradcheck, "finite-difference verification of the engine and the detector loss")
    p.add_argument("--layers-only", action="store_true", help="skip the full detector loss")
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--width-divisor", type=int, default=4)
    p.add_argument("--fraction", type=float, default=0.01, help="fraction of parameter entries checked")
    p.add_argument("--seed", type=int)

    p = add("slice", cmd_slice, "write an axial slice as PGM with detection boxes burned in")
    p.add_argument("--volume", required=True)
    p.add_argument("--detections")
    p.add_argument("--scan-id", help="scan id in the detections CSV (default: volume file stem)")
    p.add_argument("--z", type=int, help="axial index (default: middle slice)")
    p.add_argument("--threshold", type=float, default=0.8, help="minimum score drawn")
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.preset)
        t0 = time.perf_counter()
        outputs, snapshot = args.func(args, cfg)
        write_manifest(args, cfg, outputs, {"total": time.perf_counter() - t0}, snapshot)
    except PianetError as exc:
        print(f"error code={exc.code} exit={exc.exit_code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except MemoryError as exc:
        print(f"error code=NUMERIC_ERROR exit=4: out of memory: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
