"""Command-line interface: ``percs fixtures | flows | segment | eval | mix``.

Exit codes: 0 success, 1 internal error, 2 usage or validation error.
Randomized subcommands need ``--seed`` or the ``PERCS_SEED`` variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .core import ConfigError, DataError, PercsError
from .evaluation import DEFAULT_THRESHOLDS, evaluate, metrics_document
from .flows import ReconstructionParams, compute_gt_flows
from .io import read_image, read_mask, write_image, write_json, write_flow, write_mask, write_rgb
from .model_head import HeadWeights, ToyFeaturizer
from .pipeline import reference_embedding, reflect_pad, render_overlay, segment

log = logging.getLogger("percs")


class UsageError(PercsError):
    pass


def resolve_seed(args, required: bool = True) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("PERCS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"PERCS_SEED must be an integer, got {env!r}") from None
    if required:
        raise UsageError("this subcommand needs --seed (or PERCS_SEED)")
    return None


# --------------------------------------------------------------------------
# subcommands


def cmd_fixtures(args) -> int:
    spec = {}
    if args.spec:
        try:
            spec = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read fixture spec: {exc}") from exc
        if not isinstance(spec, dict):
            raise UsageError("fixture spec must be a JSON object")
    for key in ("n_images", "n_types", "height", "width", "channels", "noise", "signature", "split"):
        val = getattr(args, key)
        if val is not None:
            spec[key] = val
    if args.blobs:
        spec["blobs"] = args.blobs
    if args.radii:
        spec["radii"] = args.radii
    seed = spec.get("seed") if args.seed is None and "seed" in spec else resolve_seed(args)
    spec["seed"] = seed
    manifest = ds.synth_fixtures(ds.FixtureSpec.from_dict(spec), args.out)
    print(f"wrote {len(manifest)} image(s) to {args.out}")
    return 0


def cmd_flows(args) -> int:
    mask = read_mask(args.mask)
    flow, _ = compute_gt_flows(mask)
    write_flow(args.out, flow)
    print(f"wrote {flow.shape[0]}x{flow.shape[1]} flow field to {args.out}")
    return 0


def _recon_params(args) -> ReconstructionParams:
    return ReconstructionParams(
        step_size=args.step_size,
        n_steps=args.n_steps,
        prob_threshold=args.prob_threshold,
        min_size=args.min_size,
        merge_radius=args.merge_radius,
    )


def _pad_to(mask, shape):
    if mask is None:
        return None
    return np.pad(mask, ((0, shape[0] - mask.shape[0]), (0, shape[1] - mask.shape[1])))


def cmd_segment(args) -> int:
    featurizer = ToyFeaturizer(args.patch_size, args.dim)
    manifest = entry = None
    if args.manifest:
        manifest = ds.load_manifest(args.manifest)
        if not args.entry:
            raise UsageError("--manifest needs --entry")
        entry = manifest.find(args.entry)

    if args.image:
        image = read_image(args.image)
    elif entry is not None:
        image = read_image(manifest.image_path(entry))
    else:
        raise UsageError("give --image or --manifest/--entry")

    query_mask = None
    if args.gt_mask:
        query_mask = read_mask(args.gt_mask)
    elif entry is not None:
        query_mask = read_mask(manifest.mask_path(entry))

    # reference: explicit image/mask/label, else the entry's fixed reference
    query_ref_mask = None
    if args.ref_mask:
        if args.ref_label is None:
            raise UsageError("--ref-mask needs --ref-label")
        ref_image = read_image(args.ref_image) if args.ref_image else image
        ref_labels = read_mask(args.ref_mask)
        ref_mask = ref_labels == args.ref_label
        if not ref_mask.any():
            raise UsageError(f"reference label {args.ref_label} not present in {args.ref_mask}")
        if not args.ref_image:
            query_ref_mask = ref_mask
    elif entry is not None:
        label, _ = ds.select_reference(entry, "eval", mask=query_mask)
        ref_image, ref_mask = image, query_mask == label
        query_ref_mask = ref_mask
    else:
        raise UsageError("no reference given: use --ref-mask/--ref-label or --manifest/--entry")

    if args.inject_gt_flows:
        if query_mask is None:
            raise UsageError("--inject-gt-flows needs --gt-mask or a manifest entry")
        weights = None
    elif args.weights:
        weights = HeadWeights.load(args.weights)
    elif args.random_weights:
        weights = HeadWeights.init(args.dim, seed=resolve_seed(args))
    else:
        raise UsageError("no weights: use --weights FILE, --random-weights or --inject-gt-flows")

    h, w = image.shape[:2]
    if args.pad:
        image, _ = reflect_pad(image, args.window, args.patch_size)
        query_mask = _pad_to(query_mask, image.shape)
        query_ref_mask = _pad_to(query_ref_mask, image.shape)
        if query_ref_mask is not None:
            ref_image, ref_mask = image, query_ref_mask
        else:
            ref_image, _ = reflect_pad(ref_image, 1, args.patch_size)
            ref_mask = _pad_to(ref_mask, ref_image.shape)
    elif min(h, w) < args.window:
        raise UsageError(
            f"image {h}x{w} is smaller than the {args.window} window; "
            "pass --pad to reflect-pad or use a smaller --window"
        )
    for name, arr in (("image", image), ("reference image", ref_image)):
        if arr.shape[0] % args.patch_size or arr.shape[1] % args.patch_size:
            raise UsageError(
                f"{name} {arr.shape[0]}x{arr.shape[1]} is not a multiple of patch size "
                f"{args.patch_size}; pass --pad"
            )

    ref = reference_embedding(ref_image, ref_mask, featurizer)
    thresh = args.filter_thresh
    if thresh is None and args.inject_gt_flows:
        thresh = 0.5
    result = segment(
        image,
        ref,
        weights=weights,
        gt_mask=query_mask if args.inject_gt_flows else None,
        featurizer=featurizer,
        window=args.window,
        stride=args.stride,
        params=_recon_params(args),
        filter_thresh=thresh,
    )
    labels = result.labels[:h, :w]
    write_mask(args.out, labels)
    if args.overlay:
        ref_outline = None if query_ref_mask is None else query_ref_mask[:h, :w]
        write_rgb(args.overlay, render_overlay(image[:h, :w], labels, ref_outline))
    print(f"segmented {int(labels.max(initial=0))} instance(s) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = ds.load_manifest(args.manifest)
    pred_dir = Path(args.pred_dir)
    rows = []
    for entry in manifest.entries:
        if args.split and entry.split != args.split:
            continue
        pred_path = pred_dir / f"{entry.id}.png"
        if not pred_path.is_file():
            raise DataError(f"missing prediction for entry {entry.id}: {pred_path}")
        pred = read_mask(pred_path)
        gt = read_mask(manifest.mask_path(entry))
        if args.gt == "reference":
            _, ref_type = ds.select_reference(entry, "eval", mask=gt)
            gt = ds.target_instances(gt, entry.type_table(gt), ref_type)
        rows.append((entry.id, evaluate(pred, gt, args.thresholds)))
    doc = metrics_document(rows)
    write_json(args.out, doc)
    for rec in doc["aggregate"]:
        print(f"IoU {rec['iou']}: AP {rec['AP']:.3f}  P {rec['P']:.3f}  R {rec['R']:.3f}")
    return 0


def cmd_mix(args) -> int:
    seed = resolve_seed(args)
    params = ds.MixParams(
        n_paste=tuple(args.n_paste),
        max_attempts=args.max_attempts,
        allow_overlap=args.allow_overlap,
        rng_seed=seed,
    )
    manifest = ds.load_manifest(args.manifest)
    out = Path(args.out)
    cache: dict = {}
    entries = []
    skipped = 0
    for i, entry in enumerate(manifest.entries):
        if args.split and entry.split != args.split:
            continue
        rng = np.random.default_rng([seed, i])
        donors = ds.sample_donors(manifest, i, params, rng, cache)
        image, mask, types = cache.get(entry.id) or manifest.load(entry)
        res = ds.mix_paste((image, mask, types), donors, params, rng)
        skipped += res.n_skipped
        write_image(out / "images" / f"{entry.id}.png", res.image)
        write_mask(out / "masks" / f"{entry.id}.png", res.mask)
        ref = entry.fixed_reference
        if ref is not None:
            if ref not in res.label_map:
                raise DataError(f"entry {entry.id}: reference erased by overlapping paste")
            ref = res.label_map[ref]
        entries.append(
            ds.ManifestEntry(
                id=entry.id,
                image=f"images/{entry.id}.png",
                mask=f"masks/{entry.id}.png",
                cell_type=entry.cell_type,
                split=entry.split,
                fixed_reference=ref,
                instance_types=res.types,
            )
        )
    ds.save_manifest(ds.DatasetManifest(tuple(entries), out), out / "manifest.json")
    print(f"mixed {len(entries)} image(s) into {out} ({skipped} donor(s) skipped)")
    return 0


# --------------------------------------------------------------------------
# parser


def _recon_flags(p):
    g = p.add_argument_group("reconstruction")
    d = ReconstructionParams()
    g.add_argument("--step-size", type=float, default=d.step_size)
    g.add_argument("--n-steps", type=int, default=d.n_steps)
    g.add_argument("--prob-threshold", type=float, default=d.prob_threshold)
    g.add_argument("--min-size", type=int, default=d.min_size)
    g.add_argument("--merge-radius", type=int, default=d.merge_radius)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="percs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file with fixture parameters (flags override)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-images", dest="n_images", type=int)
    p.add_argument("--blobs", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--radii", type=float, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--n-types", dest="n_types", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--signature", choices=("intensity", "channel"))
    p.add_argument("--split", choices=ds.SPLITS)
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("flows", help="ground-truth flow field of a label mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flows)

    p = sub.add_parser("segment", help="personalized segmentation of one image")
    p.add_argument("--image")
    p.add_argument("--manifest")
    p.add_argument("--entry")
    p.add_argument("--gt-mask")
    p.add_argument("--ref-image")
    p.add_argument("--ref-mask")
    p.add_argument("--ref-label", type=int)
    p.add_argument("--weights")
    p.add_argument("--random-weights", action="store_true",
                   help="seeded random head weights (needs --seed)")
    p.add_argument("--inject-gt-flows", action="store_true",
                   help="bypass the head and use flows of the ground-truth mask")
    p.add_argument("--filter-thresh", type=float,
                   help="similarity filter cutoff (default 0.5 with --inject-gt-flows, else off)")
    p.add_argument("--window", type=int, default=336)
    p.add_argument("--stride", type=int, default=168)
    p.add_argument("--patch-size", type=int, default=14)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--pad", action="store_true", help="reflect-pad small or misaligned images")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay")
    _recon_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="instance metrics for a directory of predictions")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--thresholds", type=float, nargs="+", default=list(DEFAULT_THRESHOLDS))
    p.add_argument("--split", choices=ds.SPLITS)
    p.add_argument("--gt", choices=("reference", "all"), default="reference",
                   help="score against instances of the reference type, or all instances")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mix", help="paste cells of other types into each image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-paste", type=int, nargs=2, default=[1, 5], metavar=("MIN", "MAX"))
    p.add_argument("--max-attempts", type=int, default=20)
    p.add_argument("--allow-overlap", action="store_true")
    p.add_argument("--split", choices=ds.SPLITS)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_mix)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PercsError, ConfigError) as exc:
        print(f"percs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"percs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"percs {args.command}: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
