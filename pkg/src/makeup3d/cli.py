"""Command-line entry point: ``makeup3d <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; this CLI reserves 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- toygen ------------------------------------------------------------------------

def cmd_toygen(args):
    from .data import ToyFaceSpec, generate_toy_dataset

    kw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    flags = {"seed": args.seed, "n_identities": args.identities, "images_per_identity": args.images_per_identity,
             "n_references": args.references, "n_targets": args.targets, "occlusion_probability": args.occlusion,
             "image_size": args.image_size, "uv_resolution": args.uv_resolution}
    kw.update({k: v for k, v in flags.items() if v is not None})
    if args.yaw is not None:
        kw["yaw_range"] = (-args.yaw, args.yaw)
    spec = ToyFaceSpec.from_dict(kw)
    manifest = generate_toy_dataset(spec, args.out)
    print(f"wrote {len(manifest['records'])} records to {Path(args.out) / 'manifest.json'}")


# --- fit-artifacts -------------------------------------------------------------------

def cmd_fit_artifacts(args):
    from .data import load_dataset

    ds = load_dataset(args.manifest, fail_fast=not args.keep_going, cache_dir=args.cache_dir)
    for err in ds.errors:
        print(f"skipped {err}", file=sys.stderr)
    n = ds.precompute(args.split, workers=args.workers)
    total = len(ds.split(args.split)) if args.split else len(ds)
    print(f"{total} records ready, {n} computed, {total - n} from cache")


# --- train ------------------------------------------------------------------------------

def cmd_train(args):
    from .trainer import TrainConfig, load_config, train

    if args.print_default_config:
        print(json.dumps(TrainConfig().to_dict(), indent=2))
        return
    if not args.config:
        raise UsageError("train: error: --config is required")
    cfg = load_config(args.config)
    overrides = {k: v for k, v in (("iterations", args.iterations), ("out_dir", args.out_dir),
                                   ("seed", args.seed)) if v is not None}
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})

    def progress(rec):
        it = rec["iteration"] + 1
        if args.log_every and (it % args.log_every == 0 or it == cfg.iterations):
            print(f"iter {it:6d}  L_G {rec['L_G']:.4f}  L_D {rec['L_D']:.4f}  att {rec['att']:.4f}")

    _, final = train(cfg, resume=args.resume, progress=progress)
    print(f"checkpoint {final}")


# --- shared run assets -----------------------------------------------------------------

def _run_paths(args):
    run = Path(args.run) if args.run else None
    ck = Path(args.checkpoint) if args.checkpoint else (run / "checkpoints" / "final.m3d" if run else None)
    bank = Path(args.bank) if args.bank else (run / "bank" / "registry.json" if run else None)
    target = Path(args.target) if args.target else (run / "target.png" if run else None)
    return ck, bank, target


def _load_bank(path):
    from .fr_bank import load_registry

    if path is None:
        raise UsageError("a model bank is required (--bank or --run)")
    return load_registry(path)


def _image_tensor(img):
    return torch.as_tensor(np.ascontiguousarray(img.transpose(2, 0, 1)), dtype=torch.float32)


def _load_target(path):
    from .face3d.io import load_image

    if path is None:
        raise UsageError("a target image is required (--target or --run)")
    return _image_tensor(load_image(path))


def _cos(model, a, b):
    e = model.embed(torch.stack([a, b]))
    return float(e[0] @ e[1])


# --- protect ---------------------------------------------------------------------------------

def cmd_protect(args):
    from .data import load_dataset
    from .face3d.io import load_image, save_image
    from .trainer import FaceTensors, load_generator, protect

    ck, bank_path, target_path = _run_paths(args)
    if ck is None:
        raise UsageError("protect: error: --checkpoint or --run is required")
    gen, meta = load_generator(ck)
    bank, _ = _load_bank(bank_path)
    target = _load_target(target_path)
    ds = load_dataset(args.manifest)
    names = args.sources.split(",") if args.sources else [r.name for r in ds.split(args.split)]
    if not names:
        raise ValueError(f"no source records in split {args.split!r}")
    refs = ds.split("reference")
    ref_names = [args.reference] if args.reference else [r.name for r in refs]
    if not ref_names:
        raise ValueError("the dataset has no reference records")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dtype = next(gen.parameters()).dtype
    for i, name in enumerate(names):
        src = FaceTensors.from_artifacts(ds.artifacts(name), dtype)
        ref_name = ref_names[i % len(ref_names)]
        ref = FaceTensors.from_artifacts(ds.artifacts(ref_name), dtype)
        img = protect(gen, src, ref).float()
        path = save_image(img.permute(1, 2, 0).numpy(), out / f"{name}.png")
        saved = _image_tensor(load_image(path))
        clean = src.image[0].float()
        scores = {m.name: {"target_cosine": _cos(m, saved, target), "source_cosine": _cos(m, saved, clean),
                           "clean_target_cosine": _cos(m, clean, target), "heldout": m.name == bank.holdout}
                  for m in bank}
        sidecar = {"source": name, "identity": ds.record(name).identity, "reference": ref_name,
                   "checkpoint": str(ck), "iteration": meta["iteration"], "image": path.name, "scores": scores}
        (out / f"{name}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    print(f"protected {len(names)} images into {out}")


# --- eval ----------------------------------------------------------------------------------

METRICS = ("asr", "psr", "rank", "quality")


def _impostor_pairs(images, identities):
    return [(images[i], images[j]) for i, j in itertools.combinations(range(len(images)), 2)
            if identities[i] != identities[j]]


def _read_protected(directory):
    from .face3d.io import load_image

    d = Path(directory)
    items = []
    for side in sorted(d.glob("*.json")):
        meta = json.loads(side.read_text())
        if "source" in meta and "image" in meta:
            items.append((meta, _image_tensor(load_image(d / meta["image"]))))
    if not items:
        raise ValueError(f"no protected images with sidecars in {d}")
    return items


def evaluate_protected(protected_dir, manifest, bank_path, target_path, metrics=METRICS, far=0.1, ranks=(1, 5),
                       thresholds=None, noise_seed=0):
    """Compute the requested metrics for a directory written by ``protect``.

    Thresholds come from the registry cache when it has the requested FAR,
    otherwise from impostor pairs of clean source images.
    """
    from .data import load_dataset
    from .evaluation import asr, fid_from_features, image_quality, PooledFeatures, psr, rank_k_protection
    from .fr_bank import far_threshold

    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise UsageError(f"unknown metrics {sorted(unknown)}; choose from {', '.join(METRICS)}")
    ds = load_dataset(manifest)
    bank, cached = _load_bank(bank_path)
    target = _load_target(target_path)
    items = _read_protected(protected_dir)
    prot = torch.stack([img for _, img in items])
    srcs = torch.stack([ds.artifacts(meta["source"]).image_tensor() for meta, _ in items])
    clean_all = ds.split("source")
    clean_imgs = [ds.artifacts(r).image_tensor() for r in clean_all]
    report = {"n": len(items), "far": far, "models": {}, "heldout": bank.holdout}
    rows = []
    for m in bank:
        entry = {}
        need_tau = {"asr", "psr"} & set(metrics)
        if need_tau:
            tau = (thresholds or {}).get(m.name, {}).get(far, cached.get(m.name, {}).get(far))
            if tau is None:
                tau = far_threshold(m, _impostor_pairs(clean_imgs, [r.identity for r in clean_all]), far)
            entry["tau"] = float(tau)
        if "asr" in metrics:
            entry["asr"] = asr(prot, target, m, tau)
            entry["asr_clean"] = asr(srcs, target, m, tau)
        if "psr" in metrics:
            entry["psr"] = psr(prot, srcs, m, tau)
        if "rank" in metrics:
            for k in ranks:
                vals = []
                for (meta, img) in items:
                    gallery = [(im, r.identity) for im, r in zip(clean_imgs, clean_all) if r.name != meta["source"]]
                    vals.append(rank_k_protection(img[None], gallery, [meta["identity"]], m, k))
                entry[f"rank{k}"] = float(np.mean(vals))
        e0 = m.embed(target[None])[0]
        entry["target_cosine"] = float(np.mean(m.embed(prot) @ e0))
        entry["clean_target_cosine"] = float(np.mean(m.embed(srcs) @ e0))
        report["models"][m.name] = entry
        rows.append({"model": m.name + (" (held out)" if m.name == bank.holdout else ""),
                     **{k: round(v, 4) for k, v in entry.items()}})
    if "quality" in metrics:
        q = image_quality(prot, srcs)
        feats = PooledFeatures()
        noise = torch.rand(prot.shape, generator=torch.Generator().manual_seed(noise_seed))
        report["quality"] = {**q.to_dict(), "fid_noise": fid_from_features(feats(noise), feats(srcs))}
    return report, rows


def cmd_eval(args):
    from .evaluation import write_report

    _, bank_path, target_path = _run_paths(args)
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    report, rows = evaluate_protected(args.protected, args.manifest, bank_path, target_path, metrics,
                                      far=args.far, ranks=tuple(args.ranks))
    path = write_report(args.out, report, rows=rows)
    if "quality" in report:
        q = report["quality"]
        print(f"FID {q['fid']:.4f} (noise {q['fid_noise']:.4f})  SSIM {q['ssim']:.4f}  PSNR {q['psnr']:.2f}")
    for r in rows:
        print("  ".join(f"{k}={v}" for k, v in r.items()))
    print(f"report {path}")


# --- report ----------------------------------------------------------------------------------

def cmd_report(args):
    from .evaluation import format_table, summarize

    per_model = {}
    quality = {}
    for p in args.inputs:
        rep = json.loads(Path(p).read_text())
        for name, entry in rep.get("models", {}).items():
            for k, v in entry.items():
                per_model.setdefault(name, {}).setdefault(k, []).append(v)
        for k, v in rep.get("quality", {}).items():
            quality.setdefault(k, []).append(v)
    if not per_model and not quality:
        raise ValueError("no metrics found in the given reports")
    columns = sorted({k for d in per_model.values() for k in d})
    rows = []
    for name, d in per_model.items():
        row = {"model": name}
        for k in columns:
            if k in d:
                s = summarize(d[k])
                row[k] = f"{s['mean']:.3f}" + (f"+-{s['std']:.3f}" if s["n"] > 1 else "")
        rows.append(row)
    text = format_table(rows, ["model", *columns]) if rows else ""
    if quality:
        text += "\n\n" + format_table([{k: f"{summarize(v)['mean']:.4f}" for k, v in quality.items()}],
                                      list(quality))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)


# --- parser ---------------------------------------------------------------------------------

def _run_options(p):
    p.add_argument("--run", help="training output directory (supplies checkpoint, bank and target)")
    p.add_argument("--checkpoint", help="generator checkpoint (default RUN/checkpoints/final.m3d)")
    p.add_argument("--bank", help="model registry JSON (default RUN/bank/registry.json)")
    p.add_argument("--target", help="target identity image (default RUN/target.png)")


def build_parser():
    parser = Parser(prog="makeup3d", description="UV-space adversarial makeup for face privacy protection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("toygen", help="write a synthetic toy-face dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", help="JSON file with ToyFaceSpec fields (flags override it)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--identities", type=int, help="number of source identities (default 12)")
    p.add_argument("--images-per-identity", type=int, help="source images per identity (default 2)")
    p.add_argument("--references", type=int, help="number of makeup reference faces (default 8)")
    p.add_argument("--targets", type=int, help="number of target identity faces (default 1)")
    p.add_argument("--yaw", type=float, help="sample yaw uniformly in [-YAW, YAW] degrees (default 30)")
    p.add_argument("--occlusion", type=float, help="probability of a painted occluder per image (default 0)")
    p.add_argument("--image-size", type=int, help="image side in pixels (default 64)")
    p.add_argument("--uv-resolution", type=int, help="UV texture side (default 64)")
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("fit-artifacts", help="precompute and cache UV textures, visibility and UV masks")
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--split", choices=("source", "reference", "target"), help="only this split")
    p.add_argument("--workers", type=int, default=1, help="parallel workers (default 1)")
    p.add_argument("--cache-dir", help="cache directory (default next to the manifest)")
    p.add_argument("--keep-going", action="store_true", help="skip invalid records instead of failing")
    p.set_defaults(func=cmd_fit_artifacts)

    p = sub.add_parser("train", help="train the generator from a JSON run config")
    p.add_argument("--config", help="run config JSON (see --print-default-config)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--iterations", type=int, help="override the config's iteration count")
    p.add_argument("--out-dir", help="override the config's output directory")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--log-every", type=int, default=50, help="print progress every N iterations (0 silences)")
    p.add_argument("--print-default-config", action="store_true", help="print the default config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protect", help="apply a trained generator to source faces")
    _run_options(p)
    p.add_argument("--manifest", required=True, help="dataset manifest holding the sources and references")
    p.add_argument("--sources", help="comma-separated record names (default: the whole --split)")
    p.add_argument("--split", default="source", choices=("source", "reference", "target"),
                   help="records to protect when --sources is absent (default source)")
    p.add_argument("--reference", help="makeup reference record (default: cycle through all references)")
    p.add_argument("--out", required=True, help="output directory for images and JSON sidecars")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("eval", help="score protected images (ASR, PSR, rank-k, image quality)")
    _run_options(p)
    p.add_argument("--protected", required=True, help="directory written by protect")
    p.add_argument("--manifest", required=True, help="dataset manifest of the clean sources")
    p.add_argument("--metrics", default=",".join(METRICS), help=f"comma-separated subset of {','.join(METRICS)}")
    p.add_argument("--far", type=float, default=0.1, help="false acceptance rate for thresholds (default 0.1)")
    p.add_argument("--ranks", type=int, nargs="+", default=[1, 5], help="k values for rank-k (default 1 5)")
    p.add_argument("--out", required=True, help="report JSON path (a .txt table is written beside it)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate eval reports into one table")
    p.add_argument("inputs", nargs="+", help="report JSON files")
    p.add_argument("--out", help="write the table here as well")
    p.set_defaults(func=cmd_report)
    return parser


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
