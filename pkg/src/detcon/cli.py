"""``detcon`` command-line entry point.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dtns

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers ------------------------------------------------------------------

def _load_image(path) -> np.ndarray:
    from .imageio import read_ppm

    path = Path(path)
    if not path.exists():
        raise UsageError(f"no such image: {path}")
    if path.suffix == ".ppm":
        return read_ppm(path)
    img = dtns.load(path).astype(np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise UsageError(f"{path}: expected an (H, W, 3) image tensor")
    return img


def _emit(text: str, out: str | None) -> None:
    if out:
        dtns.atomic_write_bytes(out, text.encode())
    else:
        sys.stdout.write(text)


def _positive(kind):
    def parse(s):
        v = kind(s)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {s}")
        return v
    return parse


# -- commands -----------------------------------------------------------------

def cmd_segment(args) -> int:
    from .segmentation import MaskStore, default_store_dir, fh_segment, grid_labelmap

    img = _load_image(args.image)
    if args.method == "fh":
        labels = fh_segment(img, args.scale, args.min_size, args.sigma)
        params = f"s={args.scale:g},c={args.min_size},sigma={args.sigma:g}"
    else:
        labels = grid_labelmap(img.shape[0], img.shape[1], args.grid_n)
        params = f"n={args.grid_n}"
    if args.out:
        dtns.save(args.out, labels)
    if args.store:
        store_dir = default_store_dir(args.store)
        MaskStore(store_dir).put(args.id or Path(args.image).stem, labels, args.method, params)
    print(f"regions\t{int(labels.max()) + 1}")
    return EXIT_OK


def cmd_abo(args) -> int:
    from .segmentation import abo, fh_segment, grid_labelmap, labelmap_to_maskset, load_human_masks, object_masks

    if args.gt and args.pred:
        print(f"abo\t{abo(load_human_masks(args.gt), load_human_masks(args.pred))!r}")
        return EXIT_OK
    if not args.dataset:
        raise UsageError("abo: give --gt and --pred, or --dataset with --method")
    from .train.scenes import load_dataset

    ds = load_dataset(args.dataset)
    if ds.labels is None:
        raise UsageError(f"{args.dataset}: no labels/ directory")
    scores = []
    for img, gt in zip(ds.images, ds.labels):
        if not gt.any():
            continue
        if args.method == "fh":
            pred = fh_segment(img, args.scale, args.min_size, args.sigma)
        else:
            pred = grid_labelmap(img.shape[0], img.shape[1], args.grid_n)
        scores.append(abo(object_masks(gt), labelmap_to_maskset(pred)))
    if not scores:
        raise UsageError(f"{args.dataset}: no objects to score")
    print(f"abo\t{float(np.mean(scores))!r}\timages\t{len(scores)}")
    return EXIT_OK


def cmd_augment(args) -> int:
    from .augment import apply_to_image, apply_to_masks, sample_augment, view_distribution
    from .imageio import write_ppm
    from .segmentation import load_human_masks

    img = _load_image(args.image)
    rng = np.random.default_rng(args.seed)
    dist = view_distribution(args.variant, args.view, args.size)
    params = sample_augment(dist, rng, img.shape[0], img.shape[1])
    out = apply_to_image(params, img)
    write_ppm(args.preview, out)
    dtns.save(str(Path(args.preview).with_suffix(".dtns")), out.astype(np.float32))
    if args.masks:
        ms = apply_to_masks(params, load_human_masks(args.masks))
        dtns.save(args.mask_out or str(Path(args.preview).with_suffix(".masks.dtns")), ms.masks.astype(np.int32))
    print(f"params\t{params}")
    return EXIT_OK


def cmd_flops(args) -> int:
    from .model import desk_descriptor, estimate_flops, paper_descriptor
    from .train.pipeline import encoder_config

    if args.paper_dims:
        desc = paper_descriptor(args.variant, args.backbone_flops or 4e9)
    else:
        desc = desk_descriptor(args.variant, encoder_config(args.encoder), args.batch, args.resolution)
        if args.backbone_flops:
            desc = type(desc)(args.backbone_flops, desc.feature_dim, desc.dims, desc.batch, desc.variant)
    report = estimate_flops(desc, args.latents)
    text = "\t".join(report) + "\n" + "\t".join(str(v) for v in report.values()) + "\n"
    _emit(text, args.out)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import check_detcon, check_op
    from .tensorcore import op_set

    ops = op_set() if args.ops == "all" else [o.strip() for o in args.ops.split(",") if o.strip()]
    unknown = sorted(set(ops) - set(op_set()))
    if unknown:
        raise UsageError(f"unknown ops: {', '.join(unknown)}")
    worst = 0.0
    for op in ops:
        err = check_op(op, args.eps)
        worst = max(worst, err)
        print(f"{op}\t{err:.3e}", flush=True)
    if not args.skip_end_to_end:
        err = check_detcon(args.eps, seed=args.seed)
        worst = max(worst, err)
        print(f"detcon-s-end-to-end\t{err:.3e}")
    print(f"max\t{worst:.3e}\t{'PASS' if worst < args.tol else 'FAIL'}")
    return EXIT_OK if worst < args.tol else EXIT_FAIL


def cmd_pretrain(args) -> int:
    from .train.config import load_config
    from .train.pretrain import pretrain

    cfg = load_config(args.config)
    changes = {}
    if args.out:
        changes["out"] = args.out
    elif not Path(cfg.out).is_absolute():
        changes["out"] = str(Path(args.config).parent / cfg.out)
    if args.seed is not None:
        changes["seed"] = args.seed
    cfg = cfg.with_(**changes).validate()
    result = pretrain(cfg, threads=args.threads, stop_after=args.stop_after,
                      resume=not args.no_resume, debug=args.debug)
    last = result.metrics[-1] if result.metrics else {}
    status = "complete" if result.completed else "stopped"
    print(f"{status}\tstep\t{result.state.step}\tloss\t{last.get('loss', 'nan')}\tout\t{result.out}")
    return EXIT_OK


def _checkpoint_dir(path: Path) -> Path:
    return path / "checkpoint" if (path / "checkpoint" / "state.txt").exists() else path


def cmd_eval(args) -> int:
    from .train.checkpoint import load_checkpoint
    from .train.evaluation import eval_retrieval, format_eval
    from .train.pipeline import encoder_config
    from .train.scenes import load_dataset

    ckpt = _checkpoint_dir(Path(args.checkpoint))
    state, info = load_checkpoint(ckpt)
    enc = encoder_config(info.get("encoder", "desk"))
    result = eval_retrieval(state.params, enc, load_dataset(args.dataset))
    text = format_eval(result)
    run_dir = ckpt.parent if ckpt.name == "checkpoint" else ckpt
    dtns.atomic_write_bytes(args.out or run_dir / "eval.tsv", text.encode())
    print(f"accuracy\t{result['accuracy']!r}\tobjects\t{result['objects']}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import ReportError, build_report

    if not args.runs:
        raise UsageError("report: no runs given")
    try:
        text = build_report([Path(r) for r in args.runs], curves=args.curves)
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _emit(text, args.out)
    return EXIT_OK


def cmd_gen_scenes(args) -> int:
    from .train.scenes import SceneSpec, gen_scenes

    lo, hi = args.objects
    spec = SceneSpec(n_images=args.n, size=args.size, objects=(lo, hi), texture=args.texture, seed=args.seed)
    out = gen_scenes(spec, args.out, ppm=args.ppm)
    print(f"images\t{spec.n_images}\tout\t{out}")
    return EXIT_OK


def _object_range(s: str):
    try:
        lo, hi = (int(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected LO,HI") from None
    if not 0 <= lo <= hi:
        raise argparse.ArgumentTypeError("need 0 <= LO <= HI")
    return lo, hi


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="detcon", description="Contrastive detection over unsupervised masks: "
                "segmentation, augmentation, cost model, gradient checks, pretraining and evaluation.")
    p.add_argument("--threads", type=_positive(int), default=1,
                   help="cap on BLAS and data-pipeline threads; 1 gives the bit-exact mode")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("segment", help="unsupervised masks for one image")
    s.add_argument("--image", required=True, help="input image (.ppm or .dtns, values in [0, 1])")
    s.add_argument("--method", choices=("fh", "grid"), default="fh",
                   help="graph-based (Felzenszwalb-Huttenlocher) or spatial-grid masks")
    s.add_argument("--scale", type=_positive(float), default=1000.0, help="FH scale s: larger gives bigger regions")
    s.add_argument("--min-size", type=_positive(int), default=1000, help="FH minimum region size c in pixels")
    s.add_argument("--sigma", type=float, default=0.8, help="FH pre-smoothing Gaussian sigma")
    s.add_argument("--grid-n", type=_positive(int), default=1, help="grid: n x n cells")
    s.add_argument("--out", help="write the label map as DTNS")
    s.add_argument("--store", help="append to a mask store in this directory (DETCON_CACHE overrides)")
    s.add_argument("--id", help="image id in the store (default: file stem)")
    s.add_argument("--seed", type=int, default=0, help="accepted for uniformity; segmentation is deterministic")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("abo", help="average best overlap of predicted masks against ground truth")
    s.add_argument("--gt", help="ground-truth label map or mask stack (DTNS)")
    s.add_argument("--pred", help="predicted label map or mask stack (DTNS)")
    s.add_argument("--dataset", help="dataset directory with labels/: scores a mask method against the objects of every image")
    s.add_argument("--method", choices=("fh", "grid"), default="grid", help="mask method for --dataset")
    s.add_argument("--scale", type=_positive(float), default=100.0, help="FH scale s")
    s.add_argument("--min-size", type=_positive(int), default=20, help="FH minimum region size c")
    s.add_argument("--sigma", type=float, default=0.8, help="FH pre-smoothing sigma")
    s.add_argument("--grid-n", type=_positive(int), default=1, help="grid cells per side")
    s.set_defaults(func=cmd_abo)

    s = sub.add_parser("augment", help="sample one augmented view and write a preview")
    s.add_argument("--image", required=True, help="input image (.ppm or .dtns)")
    s.add_argument("--variant", choices=("s", "b"), default="s", help="augmentation table column (s or b)")
    s.add_argument("--view", type=int, choices=(0, 1), default=0, help="first (0) or second (1) view")
    s.add_argument("--size", type=_positive(int), default=224, help="output resolution")
    s.add_argument("--preview", required=True, help="output PPM path; a .dtns copy is written alongside")
    s.add_argument("--masks", help="label map / mask stack to co-transform")
    s.add_argument("--mask-out", help="where to write the transformed masks")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("flops", help="extra cost of k mask latents as TSV")
    s.add_argument("--variant", choices=("s", "b"), required=True, help="s: shared network; b: EMA target + predictor")
    s.add_argument("--latents", type=_positive(int), default=16, help="mask latents per image (k)")
    s.add_argument("--paper-dims", action="store_true",
                   help="ResNet-50-scale geometry: 2048-d features, batch 4096, 4 GFLOP backbone")
    s.add_argument("--backbone-flops", type=_positive(float), help="override the backbone cost")
    s.add_argument("--encoder", choices=("desk", "default"), default="desk", help="desk-scale encoder for the non-paper case")
    s.add_argument("--resolution", type=_positive(int), default=64, help="input resolution for the desk encoder")
    s.add_argument("--batch", type=_positive(int), default=32, help="batch size for the desk case")
    s.add_argument("--out", help="write TSV here instead of stdout")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("grad-check", help="compare backward() with central differences (float64)")
    s.add_argument("--ops", default="all", help="'all' or a comma-separated list of op names")
    s.add_argument("--eps", type=_positive(float), default=1e-5, help="finite-difference step")
    s.add_argument("--tol", type=_positive(float), default=1e-5, help="pass threshold on relative error")
    s.add_argument("--skip-end-to-end", action="store_true", help="skip the full loss graph check")
    s.add_argument("--seed", type=int, default=0, help="seed of the end-to-end instance")
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("pretrain", help="run or resume pretraining from a run file")
    s.add_argument("--config", required=True, help="flat key = value run file")
    s.add_argument("--out", help="override the output directory")
    s.add_argument("--seed", type=int, help="override the run seed")
    s.add_argument("--stop-after", type=_positive(int), help="checkpoint and stop after this many steps")
    s.add_argument("--no-resume", action="store_true", help="start fresh even if a checkpoint exists")
    s.add_argument("--debug", action="store_true", help="assert every step that target parameters get no gradient")
    s.add_argument("--threads", type=_positive(int), default=argparse.SUPPRESS,
                   help="same as the global --threads")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval", help="frozen-feature mask retrieval accuracy")
    s.add_argument("--checkpoint", required=True, help="run directory or checkpoint directory")
    s.add_argument("--dataset", required=True, help="dataset with labels/ and meta.tsv")
    s.add_argument("--out", help="where to write eval.tsv (default: the run directory)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="merge run directories into a figure-style TSV")
    s.add_argument("runs", nargs="*", help="run directories (each with summary.tsv, run.cfg, metrics.tsv)")
    s.add_argument("--curves", action="store_true", help="emit per-step loss curves instead of one row per run")
    s.add_argument("--out", help="write TSV here instead of stdout")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("gen-scenes", help="generate a synthetic multi-object dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, default=500, help="number of images")
    s.add_argument("--size", type=_positive(int), default=64, help="canvas size in pixels")
    s.add_argument("--objects", type=_object_range, default=(1, 3), help="objects per image as LO,HI")
    s.add_argument("--texture", type=float, default=0.05, help="texture noise amplitude")
    s.add_argument("--ppm", action="store_true", help="also write images as PPM")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.set_defaults(func=cmd_gen_scenes)
    return p


def main(argv=None) -> int:
    from .train.checkpoint import CheckpointError
    from .train.config import ConfigError
    from .train.pretrain import Divergence

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, dtns.DTNSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Divergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
