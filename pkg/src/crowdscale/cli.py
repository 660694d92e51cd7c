"""Command-line surface: gen-gt, gen-perspective, train, eval, predict, synth.

Every command takes a JSON config via --config with flag overrides, writes
its outputs plus an echo of the exact merged config into the output
directory, and is deterministic given that config. Exit codes: 0 success,
1 usage, 2 data/format, 3 numerical failure.
"""

import os

# honor the thread cap before numpy initializes its BLAS pools
_threads = os.environ.get("CROWDSCALE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import evalsynth as es
from . import formats
from . import geometry as geo
from . import groundtruth as gt
from . import model as model_mod
from . import tensor as T
from . import training as tr
from .errors import (ConfigurationError, CrowdscaleError, DataError,
                     DimensionError, FormatError, GeometryError,
                     NumericalError, UsageError)
from .tensor import Tensor4

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _exit_code(exc):
    if isinstance(exc, (UsageError, ConfigurationError)):
        return EXIT_USAGE
    if isinstance(exc, (DataError, FormatError, DimensionError, GeometryError)):
        return EXIT_DATA
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_DATA


# ---------------------------------------------------------------------------
# config handling

def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path} does not exist")
    try:
        with open(p) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}")
    cfg["_config_dir"] = str(p.parent)
    return cfg


def resolve_path(cfg, value):
    base = Path(cfg.get("_config_dir", "."))
    p = Path(value)
    return p if p.is_absolute() else base / p


def echo_config(cfg, out_dir):
    """Write the merged config used for this run into the output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    with open(out_dir / "config.json", "w") as f:
        json.dump(clean, f, indent=2, sort_keys=True)
        f.write("\n")


def kernel_spec_from_config(cfg, require_sigma=True):
    kcfg = cfg.get("kernel", {})
    mode = kcfg.get("mode", "fixed")
    sigma = kcfg.get("sigma")
    if sigma is None:
        if require_sigma:
            raise UsageError("kernel sigma is required (no dataset-specific default "
                             "is shipped); set kernel.sigma or --sigma")
        sigma = 4.0
    return gt.KernelSpec(mode=mode, sigma=float(sigma),
                         beta=float(kcfg.get("beta", 0.3)),
                         k_nn=int(kcfg.get("k_nn", 3)),
                         truncation_radius=float(kcfg.get("truncation_radius", 4.0)))


def model_config_from_config(cfg):
    mcfg = cfg.get("model", {})
    return model_mod.ModelConfig(
        variant=mcfg.get("variant", "CAN"),
        scales=int(mcfg.get("scales", 4)),
        block_sizes=tuple(mcfg.get("block_sizes", (1, 2, 3, 6))),
        width_multiplier=float(mcfg.get("width_multiplier", 1.0)),
        seed=int(mcfg.get("seed", 0)),
        omega_single_channel=bool(mcfg.get("omega_single_channel", False)),
        dtype=mcfg.get("dtype", "float32"))


def train_config_from_config(cfg):
    tcfg = cfg.get("train", {})
    lr = tcfg.get("learning_rate")
    return tr.TrainConfig(
        optimizer=tcfg.get("optimizer", "adam"),
        batch_size=int(tcfg.get("batch_size", 1)),
        learning_rate=None if lr is None else float(lr),
        epochs=int(tcfg.get("epochs", 10)),
        seed=int(tcfg.get("seed", 0)),
        crop_enabled=bool(tcfg.get("crop", True)),
        mirror_enabled=bool(tcfg.get("mirror", True)),
        checkpoint_every=int(tcfg.get("checkpoint_every", 0)))


# ---------------------------------------------------------------------------
# dataset loading

def _image_to_tensor_array(img):
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    return np.ascontiguousarray(img.transpose(2, 0, 1)[None]).astype(np.float32)


def _perspective_for(cfg, hom_path, dims, stats):
    hom = geo.Homography(formats.read_homography(hom_path))
    pmap = geo.perspective_map_from_homography(hom, dims)
    pmap, _ = geo.normalize_perspective_map(pmap, stats=stats)
    return pmap


def load_manifest_dataset(cfg, manifest_path, kernel_spec, need_perspective,
                          stats=None):
    """Load samples from a manifest written by `crowdscale synth`."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise UsageError(f"manifest {manifest_path} does not exist")
    with open(manifest_path) as f:
        manifest = json.load(f)
    base = manifest_path.parent
    samples = []
    for entry in manifest["samples"]:
        img = formats.read_pnm(base / entry["image"])
        points, dims = formats.read_annotations(base / entry["annotations"])
        ann = gt.HeadAnnotations(points, dims)
        gt_path = entry.get("density")
        if gt_path and (base / gt_path).exists():
            full = gt.DensityMap(formats.read_tnsr(base / gt_path)[0, 0].astype(np.float64))
        else:
            full = gt.density_from_spec(ann, kernel_spec)
        pmap = None
        if need_perspective:
            pmap = _perspective_for(cfg, base / entry["homography"], dims, stats)
        roi = None
        if entry.get("roi"):
            roi_img = formats.read_pnm(base / entry["roi"])
            roi = geo.RoiMask(roi_img >= 128 / 255.0)
        sample = tr.make_sample(_image_to_tensor_array(img), full,
                                perspective=pmap, roi=roi, name=entry["name"])
        sample.meta["points"] = points
        samples.append(sample)
    return samples


def load_dataset(cfg, need_perspective=False, require_sigma=True):
    dcfg = cfg.get("dataset", {})
    if "manifest" not in dcfg:
        raise UsageError("config needs dataset.manifest (produced by `crowdscale synth`)")
    kernel_spec = kernel_spec_from_config(cfg, require_sigma=require_sigma)
    stats = cfg.get("perspective_stats")
    if isinstance(stats, str):
        with open(resolve_path(cfg, stats)) as f:
            stats = json.load(f)
    if isinstance(stats, dict):
        stats = (stats["min"], stats["max"])
    return load_manifest_dataset(cfg, resolve_path(cfg, dcfg["manifest"]),
                                 kernel_spec, need_perspective, stats=stats)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_gt(args):
    cfg = load_config(args.config)
    if args.sigma is not None:
        cfg.setdefault("kernel", {})["sigma"] = args.sigma
    if args.mode is not None:
        cfg.setdefault("kernel", {})["mode"] = args.mode
    spec = kernel_spec_from_config(cfg)
    ann_dir = resolve_path(cfg, args.annotations or cfg.get("annotations", "annotations"))
    out_dir = Path(args.out or cfg.get("output_dir", "gt_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config({**cfg, "kernel": spec.__dict__}, out_dir)
    files = sorted(Path(ann_dir).glob("*.json"))
    if not files:
        raise DataError(f"no annotation JSON files in {ann_dir}")
    failures = 0
    for path in files:
        try:
            points, dims = formats.read_annotations(path)
            ann = gt.HeadAnnotations(points, dims)
            density = gt.density_from_spec(ann, spec)
            if density.meta.get("fallback"):
                print(f"{path.name}: adaptive kernel fell back to fixed sigma "
                      f"({ann.count} heads <= k_nn={spec.k_nn})")
            formats.write_tnsr(out_dir / f"{path.stem}.density.tnsr", density.values)
            ds = gt.downsample_density(density, tr.DS_FACTOR)
            formats.write_tnsr(out_dir / f"{path.stem}.density8.tnsr", ds.values)
        except CrowdscaleError as e:
            print(f"error: {path.name}: {e}", file=sys.stderr)
            failures += 1
    if failures:
        raise DataError(f"{failures} annotation file(s) failed")
    print(f"wrote densities for {len(files)} image(s) to {out_dir}")


def cmd_gen_perspective(args):
    cfg = load_config(args.config)
    hom_dir = resolve_path(cfg, args.homographies or cfg.get("homographies", "homographies"))
    dims = cfg.get("image_dims") or (args.height, args.width)
    if dims[0] is None or dims[1] is None:
        raise UsageError("image dims required: set image_dims in config or "
                         "--height/--width")
    dims = (int(dims[0]), int(dims[1]))
    out_dir = Path(args.out or cfg.get("output_dir", "perspective_out"))
    out_dir.mkdir(parents=True, exist_ok=True)

    files = sorted(Path(hom_dir).glob("*.txt"))
    if not files:
        raise DataError(f"no homography files in {hom_dir}")
    raw_maps = {}
    for path in files:
        try:
            hom = geo.Homography(formats.read_homography(path))
        except ConfigurationError as e:
            raise DataError(f"{path.name}: {e}")
        raw_maps[path.stem] = geo.perspective_map_from_homography(hom, dims)

    stats = cfg.get("perspective_stats")
    if isinstance(stats, str):
        with open(resolve_path(cfg, stats)) as f:
            stats = json.load(f)
        print("reusing frozen normalization stats")
    if stats is None:
        lo = min(float(p.values.min()) for p in raw_maps.values())
        hi = max(float(p.values.max()) for p in raw_maps.values())
        stats = {"min": lo, "max": hi}
    degenerate = False
    for stem, pmap in raw_maps.items():
        pmap, st = geo.normalize_perspective_map(pmap, stats=(stats["min"], stats["max"]))
        degenerate |= st["degenerate"]
        formats.write_tnsr(out_dir / f"{stem}.perspective.tnsr", pmap.values)
        formats.write_tnsr(out_dir / f"{stem}.perspective_norm.tnsr",
                           pmap.normalized_values)
    with open(out_dir / "perspective_stats.json", "w") as f:
        json.dump(stats, f, sort_keys=True)
        f.write("\n")
    echo_config({**cfg, "perspective_stats": stats, "image_dims": list(dims)}, out_dir)
    if degenerate:
        print("warning: constant perspective map(s) flagged degenerate", file=sys.stderr)
        raise DataError("degenerate constant perspective map")
    print(f"wrote {len(raw_maps)} perspective map(s) to {out_dir}")


def _apply_train_overrides(cfg, args):
    if args.variant:
        cfg.setdefault("model", {})["variant"] = args.variant.replace("-", "_").upper()
    if args.optimizer:
        cfg.setdefault("train", {})["optimizer"] = args.optimizer
    if args.batch is not None:
        cfg.setdefault("train", {})["batch_size"] = args.batch
    if args.lr is not None:
        cfg.setdefault("train", {})["learning_rate"] = args.lr
    if args.epochs is not None:
        cfg.setdefault("train", {})["epochs"] = args.epochs
    if args.seed is not None:
        cfg.setdefault("train", {})["seed"] = args.seed
    if args.sigma is not None:
        cfg.setdefault("kernel", {})["sigma"] = args.sigma


def cmd_train(args):
    cfg = load_config(args.config)
    _apply_train_overrides(cfg, args)
    model_cfg = model_config_from_config(cfg)
    train_cfg = train_config_from_config(cfg)
    dataset = load_dataset(cfg, need_perspective=model_cfg.variant == "ECAN")
    out_dir = Path(args.out or cfg.get("output_dir", "train_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)

    params = model_mod.build(model_cfg)
    if args.init_weights:
        params = model_mod.load_params(args.init_weights, model_cfg, partial=True)

    def on_epoch(epoch, p, log):
        every = train_cfg.checkpoint_every
        if every and (epoch + 1) % every == 0:
            model_mod.save_params(p, out_dir / f"checkpoint_epoch{epoch + 1}.canw")

    params, log = tr.train(dataset, params, train_cfg, on_epoch=on_epoch)
    model_mod.save_params(params, out_dir / "weights.canw")
    log.write_csv(out_dir / "trainlog.csv", deterministic_timing=True)
    print(f"trained {model_cfg.variant} for {train_cfg.epochs} epoch(s); "
          f"final mean loss {log.rows[-1]['mean_loss']:.6g}")


def cmd_eval(args):
    cfg = load_config(args.config)
    if args.variant:
        cfg.setdefault("model", {})["variant"] = args.variant.replace("-", "_").upper()
    model_cfg = model_config_from_config(cfg)
    weights = args.weights or cfg.get("weights")
    if not weights:
        raise UsageError("eval needs --weights or config.weights")
    params = model_mod.load_params(resolve_path(cfg, weights), model_cfg)
    dataset = load_dataset(cfg, need_perspective=model_cfg.variant == "ECAN")
    report = es.evaluate(params, dataset)
    out_dir = Path(args.out or cfg.get("output_dir", "eval_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    report_path = out_dir / "report.csv"
    report.write_csv(report_path)
    if args.paper_ref:
        text = report_path.read_text()
        header = ("# paper-scale reference (ShanghaiTech A, OURS-CAN): "
                  "MAE 62.3 / RMSE 100.0 - documentation only\n")
        report_path.write_text(header + text)
    print(f"MAE {report.mae:.4f}  RMSE {report.rmse:.4f}  ({report.n_images} images)")


def _reflect_pad_to_multiple(img, factor):
    _, _, h, w = img.shape
    ph = (-h) % factor
    pw = (-w) % factor
    if ph == 0 and pw == 0:
        return img, (0, 0)
    return np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect"), (ph, pw)


def cmd_predict(args):
    cfg = load_config(args.config)
    if args.variant:
        cfg.setdefault("model", {})["variant"] = args.variant.replace("-", "_").upper()
    model_cfg = model_config_from_config(cfg)
    weights = args.weights or cfg.get("weights")
    if not weights:
        raise UsageError("predict needs --weights or config.weights")
    if args.normalize_ground and not args.homography:
        raise UsageError("--normalize-ground requires --homography")
    if model_cfg.variant == "ECAN" and not args.homography:
        raise UsageError("ECAN prediction requires --homography for the perspective map")
    params = model_mod.load_params(resolve_path(cfg, weights), model_cfg)

    img = formats.read_pnm(args.image)
    arr = _image_to_tensor_array(img)
    orig_h, orig_w = arr.shape[2:]
    arr, (ph, pw) = _reflect_pad_to_multiple(arr, 8)

    pmap = None
    pmap_in = None
    if args.homography:
        hom = geo.Homography(formats.read_homography(args.homography))
        pmap = geo.perspective_map_from_homography(hom, arr.shape[2:])
        stats = cfg.get("perspective_stats")
        if isinstance(stats, str):
            with open(resolve_path(cfg, stats)) as f:
                stats = json.load(f)
        stats_pair = (stats["min"], stats["max"]) if isinstance(stats, dict) else None
        pmap, _ = geo.normalize_perspective_map(pmap, stats=stats_pair)
        pmap_in = Tensor4((pmap.normalized_values / 255.0)[None, None].astype(np.float32))

    with T.no_grad():
        density = model_mod.forward(
            params, Tensor4(arr),
            pmap_input=pmap_in if model_cfg.variant == "ECAN" else None)
    # padding is always < 8, so the output already has ceil(orig/8) cells
    density_vals = density.data[0, 0].astype(np.float64)
    density_vals = density_vals[:math.ceil(orig_h / 8), :math.ceil(orig_w / 8)]
    out_path = Path(args.out or "density.tnsr")
    formats.write_tnsr(out_path, density_vals)
    count = float(density_vals.sum())
    print(f"count: {count:.6f}")
    if args.normalize_ground:
        ground = geo.ground_density_normalize(gt.DensityMap(density_vals), pmap)
        formats.write_tnsr(out_path.with_suffix(".ground.tnsr"), ground.values)
    return count


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def cmd_synth(args):
    cfg = load_config(args.config)
    scfg = dict(cfg.get("scene", {}))
    if args.seed is not None:
        scfg["seed"] = args.seed
    n = args.n if args.n is not None else int(cfg.get("n", 10))
    base_seed = int(scfg.pop("seed", 0))
    try:
        base_spec = es.SceneSpec(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in scfg.items()})
    except TypeError as e:
        raise UsageError(f"invalid scene spec: {e}")
    out_dir = Path(args.out or cfg.get("output_dir", "synth_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config({**cfg, "scene": {**scfg, "seed": base_seed}, "n": n}, out_dir)

    entries = []
    for i in range(n):
        seed = base_seed + i
        spec = es.SceneSpec(**{**base_spec.__dict__, "seed": seed})
        sample = es.synth_scene(spec)
        name = f"scene{seed:04d}"
        img_name = f"{name}.ppm"
        ann_name = f"{name}.json"
        hom_name = f"{name}.homography.txt"
        roi_name = f"{name}.roi.pgm"
        formats.write_ppm(out_dir / img_name, sample.image[0].transpose(1, 2, 0))
        formats.write_annotations(out_dir / ann_name, sample.meta["points"],
                                  spec.image_dims)
        formats.write_homography(out_dir / hom_name, sample.meta["homography"].matrix)
        formats.write_pgm(out_dir / roi_name,
                          np.full(spec.image_dims, 255, dtype=np.uint8))
        entry = {"name": name, "image": img_name, "annotations": ann_name,
                 "homography": hom_name, "roi": roi_name}
        entry["sha256"] = {key: _sha256(out_dir / entry[key])
                           for key in ("image", "annotations", "homography", "roi")}
        entries.append(entry)
    manifest = {"samples": entries, "scene": {**scfg, "seed": base_seed}, "n": n}
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {n} scene(s) to {out_dir}")


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="crowdscale",
        description="Context-aware crowd density estimation pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-gt", help="ground-truth density maps from annotations")
    p.add_argument("--config")
    p.add_argument("--annotations")
    p.add_argument("--sigma", type=float)
    p.add_argument("--mode", choices=["fixed", "adaptive"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_gt)

    p = sub.add_parser("gen-perspective", help="perspective maps from homographies")
    p.add_argument("--config")
    p.add_argument("--homographies")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_perspective)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--config")
    p.add_argument("--variant",
                   choices=["can", "ecan", "vgg-simple", "vgg-concat", "vgg-ncont"])
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--init-weights")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model")
    p.add_argument("--config")
    p.add_argument("--variant",
                   choices=["can", "ecan", "vgg-simple", "vgg-concat", "vgg-ncont"])
    p.add_argument("--weights")
    p.add_argument("--paper-ref", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a density map for one image")
    p.add_argument("--config")
    p.add_argument("--variant",
                   choices=["can", "ecan", "vgg-simple", "vgg-concat", "vgg-ncont"])
    p.add_argument("--weights")
    p.add_argument("--image", required=True)
    p.add_argument("--homography")
    p.add_argument("--normalize-ground", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except CrowdscaleError as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code(e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
