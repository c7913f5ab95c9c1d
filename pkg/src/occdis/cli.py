"""Command line entry point: ``occdis <subcommand> ...``.

A dataset directory is either one written by ``make-data`` (manifests present)
or a plain directory of PNG files.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import defaultdict

import numpy as np
import torch

from .errors import ConfigError, ContractError
from .guidance import compute_dg, save_dg
from .imagecore import read_png, write_png
from .metrics import (
    MetricReport,
    RandomConvFeatures,
    SmallClassifier,
    fid,
    inception_score,
    inception_scores,
    perceptual_distance,
    ssim_psnr,
)
from .networks import load_checkpoint
from .occlusions import OcclusionConfig, PhysicalParams, composite, field_from_config, render
from .pipeline import (
    config_hash,
    estimation_from,
    load_stage2_artifacts,
    occlusion_from,
    read_config,
    stage1_train_baseline,
    stage2_estimate,
    stage3_train_disentangled,
    stage_from,
    translate,
)
from .synthetic import SyntheticSpec, load_image_dir, load_manifest_images, make_synthetic_dataset

log = logging.getLogger("occdis")


def _raw_config(path):
    return read_config(path) if path else {}


def _images(directory, manifest=None, column=0):
    if manifest and os.path.exists(os.path.join(directory, manifest)):
        return load_manifest_images(os.path.join(directory, manifest), column)
    return load_image_dir(directory)


def _names(directory):
    return sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))


def cmd_make_data(args):
    raw = _raw_config(args.config)
    occ = occlusion_from(raw)
    data = raw.get("data", {})
    spec = SyntheticSpec(
        n_images=args.n or data.get("n_images", 600),
        extent=tuple(data.get("extent", (64, 64))),
        occlusion=occ,
        sigma_star=args.sigma if args.sigma is not None else data.get("sigma_star", 2.0),
        seed=args.seed if args.seed is not None else data.get("seed", 0),
        n_train_source=data.get("n_train_source", 250),
        n_train_target=data.get("n_train_target", 250),
    )
    if spec.n_train_source + spec.n_train_target >= spec.n_images:
        raise ConfigError("n_images must exceed n_train_source + n_train_target")
    paths = make_synthetic_dataset(spec, args.out)
    print(f"wrote {spec.n_images} records to {args.out} ({', '.join(sorted(paths))})")


def cmd_train_baseline(args):
    cfg = stage_from(_raw_config(args.config), 1)
    if args.iterations:
        cfg.iterations = args.iterations
    source = _images(args.data, "train_source.txt")
    target = _images(args.target or args.data, "train_target.txt")
    res = stage1_train_baseline(cfg, source, target, args.out, args.log)
    print(f"stage 1 done: {len(res.records)} log records, checkpoint {args.out}")


def cmd_estimate_params(args):
    raw = _raw_config(args.config)
    occ = occlusion_from(raw)
    est = estimation_from(raw)
    _, _, D = load_checkpoint(args.checkpoint)
    source = _images(args.data, "train_source.txt")
    res = stage2_estimate(D, source, occ, est, params_path=args.out)
    print(f"kind={occ.kind} sigma={res.sigma}")


def cmd_compute_guidance(args):
    _, _, D = load_checkpoint(args.checkpoint)
    source = _images(args.data, "train_source.txt")
    dg = compute_dg(D, source)
    save_dg(args.out, dg, args.preview)
    print(f"guidance {dg.shape} written to {args.out}")


def cmd_train_disentangled(args):
    cfg = stage_from(_raw_config(args.config), 3)
    if args.iterations:
        cfg.iterations = args.iterations
    if args.beta is not None:
        cfg.beta = args.beta
    params, dg = load_stage2_artifacts(args.params, args.guidance)
    if params["kind"] != cfg.occlusion.kind:
        raise ConfigError(f"params are for {params['kind']!r} but config occlusion kind is {cfg.occlusion.kind!r}")
    source = _images(args.data, "train_source.txt")
    target = _images(args.target or args.data, "train_target.txt")
    overlay = _overlay(cfg.occlusion, tuple(source.shape[-2:]))
    res = stage3_train_disentangled(cfg, source, target, params["sigma"], dg, args.out, args.log, overlay=overlay)
    print(f"stage 3 done: {len(res.records)} log records, checkpoint {args.out}")


def _overlay(occ: OcclusionConfig, extent):
    if occ.kind != "overlay":
        return None
    if not occ.overlay_path:
        raise ConfigError("overlay kind needs overlay_path (RGBA PNG)")
    from PIL import Image as PILImage

    with PILImage.open(occ.overlay_path) as im:
        rgba = np.asarray(im.convert("RGBA").resize((extent[1], extent[0])), dtype=np.float32) / 255.0
    rgb = torch.from_numpy(rgba[..., :3].transpose(2, 0, 1).copy())
    # file alpha is opacity; ours is visibility
    alpha = torch.from_numpy(1.0 - rgba[..., 3][None].copy())
    return rgb, alpha


def cmd_render(args):
    """Translate images with a checkpoint, or composite occluders on them when ``--sigma`` is given."""
    os.makedirs(args.out, exist_ok=True)
    names = _names(args.input)
    images = torch.stack([read_png(os.path.join(args.input, n)) for n in names])
    if args.checkpoint:
        _, G, _ = load_checkpoint(args.checkpoint)
        images = translate(G, images)
    if args.sigma is not None:
        occ = occlusion_from(_raw_config(args.config))
        overlay = _overlay(occ, tuple(images.shape[-2:]))
        rng = np.random.default_rng(args.seed)
        out = []
        for x in images:
            fld = field_from_config(int(rng.integers(2**31)), tuple(x.shape[-2:]), occ)
            out.append(composite(x, render(x, fld, PhysicalParams(occ.kind, args.sigma), occ, overlay=overlay)).clamp(0, 1))
        images = torch.stack(out)
    for n, img in zip(names, images):
        write_png(os.path.join(args.out, n), img)
    print(f"wrote {len(names)} images to {args.out}")


def _grouped(directory):
    """Group ``<source>_<k>.png`` files by source id."""
    groups = defaultdict(list)
    for n in _names(directory):
        groups[n.rsplit("_", 1)[0]].append(read_png(os.path.join(directory, n)))
    return [torch.stack(v) for _, v in sorted(groups.items())]


def cmd_evaluate(args):
    a = load_image_dir(args.a)
    extractor = None
    extra = {}
    if args.metric == "fid":
        extractor = RandomConvFeatures(channels=a.shape[1])
        b = load_image_dir(args.b)
        value, sizes = fid(a, b, extractor), [len(a), len(b)]
        provenance = extractor.provenance
    elif args.metric in ("is", "cis"):
        if not args.classes:
            raise ConfigError("is/cis need --classes DIR [DIR ...] to fit the classifier (one directory per class)")
        sets = [load_image_dir(d) for d in args.classes]
        clf = SmallClassifier(len(sets), channels=a.shape[1]).fit(
            torch.cat(sets), torch.cat([torch.full((len(s),), i) for i, s in enumerate(sets)]).long()
        )
        if args.metric == "is":
            value = inception_score(clf.probs(a))
            sizes, extra = [len(a)], {}
        else:
            groups = [clf.probs(g) for g in _grouped(args.a)]
            is_, value = inception_scores(groups)
            sizes, extra = [sum(len(g) for g in groups)], {"is": is_, "groups": len(groups)}
        provenance = clf.provenance
    elif args.metric == "lpips":
        net = RandomConvFeatures(channels=a.shape[1])
        if args.b:
            value, count = perceptual_distance(a, load_image_dir(args.b), net, "distance")
        else:
            value, count = perceptual_distance(a, None, net, "diversity", n_pairs=args.pairs, seed=args.seed)
        sizes, provenance = [count], net.provenance
    elif args.metric in ("ssim", "psnr"):
        b = load_image_dir(args.b)
        s, p = ssim_psnr(a, b)
        value = s if args.metric == "ssim" else p
        sizes, provenance = [len(a)], "none"
        extra = {"ssim": s, "psnr": p if np.isfinite(p) else "inf"}
    else:  # argparse restricts choices
        raise ContractError(args.metric)
    report = MetricReport(args.metric, float(value), sizes, provenance, config_hash(vars(args)), extra)
    if args.out:
        report.save(args.out)
    print(report.to_json())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occdis", description="Occlusion-disentangled image translation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="write the synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--n", type=int)
    s.add_argument("--sigma", type=float, help="true defocus of target occlusions")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train-baseline", help="stage 1: entangled LSGAN baseline")
    s.add_argument("--data", required=True)
    s.add_argument("--target", help="target image directory (defaults to the dataset's target manifest)")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_train_baseline)

    s = sub.add_parser("estimate-params", help="stage 2: regress sigma through the frozen discriminator")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate_params)

    s = sub.add_parser("compute-guidance", help="stage 2: disentanglement guidance map")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--preview")
    s.set_defaults(func=cmd_compute_guidance)

    s = sub.add_parser("train-disentangled", help="stage 3: train with guided occlusion injection")
    s.add_argument("--data", required=True)
    s.add_argument("--target")
    s.add_argument("--config")
    s.add_argument("--params", required=True)
    s.add_argument("--guidance", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--iterations", type=int)
    s.add_argument("--beta", type=float)
    s.set_defaults(func=cmd_train_disentangled)

    s = sub.add_parser("render", help="translate and/or occlude a directory of PNGs")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--config")
    s.add_argument("--sigma", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("evaluate", help="compute a metric report")
    s.add_argument("--metric", required=True, choices=["fid", "is", "cis", "lpips", "ssim", "psnr"])
    s.add_argument("--a", required=True)
    s.add_argument("--b")
    s.add_argument("--classes", nargs="+")
    s.add_argument("--pairs", type=int, default=1900)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
