"""``fidelitykit`` command line.

Exit codes: 0 success, 1 usage error, 2 data error (bad manifest, unreadable
image, invalid config), 3 when every sample of a batch was skipped.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .bench import (AllSamplesSkippedError, EvalConfig, EvalReport, ManifestError, RefinerError, RefinerSpec,
                    emit_scatter, export_subject_crops, load_config, load_manifest, quality_filter, run_eval,
                    run_refine, save_manifest, stratified_subset)
from .cropblend import BLEND_MODES, CropConfig
from .degrade import (DEFAULT_VARIANTS, LEVELS, AugmentSpec, DegradeSpec, ExternalDegraderError,
                      builtin_variants, make_pseudo_pair, uniform_noise_variants, validate_degradation,
                      write_pseudo_pair)
from .imgcore import ImageIOError, load_image
from .keypoints import DetectorConfig, detect_and_describe
from .matching import MatcherConfig, MatchSchemaError, match_count
from .metrics import EmbeddingVector, load_embedding_dir

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ALL_SKIPPED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; 2 is reserved for data errors here.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, manifest: bool = False) -> None:
    p.add_argument("--config", help="JSON config with optional matcher/crop/degrade/augment sections")
    p.add_argument("--seed", type=int, help="RANSAC and degradation seed (overrides config)")
    p.add_argument("--workers", type=int, help="parallel workers (default: CPU count)")
    p.add_argument("--out", help="output path")
    if manifest:
        p.add_argument("--manifest", required=True, help="dataset manifest JSON")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fidelitykit", description="Keypoint-based subject fidelity toolkit.")
    ap.add_argument("--version", action="version", version=f"fidelitykit {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("detect", help="detect keypoints and write a keypoint set JSON")
    p.add_argument("image")
    _common(p)

    p = sub.add_parser("match", help="match a reference against another image")
    p.add_argument("reference")
    p.add_argument("other")
    p.add_argument("--kind", choices=("affine", "homography"))
    _common(p)

    p = sub.add_parser("eval", help="AKI and K_Gain over a manifest")
    _common(p, manifest=True)
    p.add_argument("--tau", type=int, default=None, help="improvement threshold (default 0)")
    p.add_argument("--on-crop", action="store_true", help="count matches on the subject crop")
    p.add_argument("--embeddings", action="append", default=[], metavar="KIND=DIR",
                   help="embedding directory for clip_i or dino (repeatable)")

    p = sub.add_parser("refine", help="crop, run an external refiner and blend back")
    _common(p, manifest=True)
    p.add_argument("--refiner", required=True, help="command template with {subject} {crop} {out}")
    p.add_argument("--mode", choices=BLEND_MODES, default="seamless")
    p.add_argument("--timeout", type=float, default=300.0)

    p = sub.add_parser("pseudo-pair", help="synthesize degraded/reference pairs from clean images")
    p.add_argument("images", nargs="+")
    _common(p)
    p.add_argument("--level", type=float, choices=LEVELS)
    p.add_argument("--strength", type=float)
    p.add_argument("--degrader", help="external degrader template with {in} {out} [{seed}] [{level}]")
    p.add_argument("--swap", action="store_true", help="degrade the augmented view instead")
    p.add_argument("--per-image", type=int, default=1)

    p = sub.add_parser("validate-degrade", help="variance map check of the built-in degrader")
    p.add_argument("images", nargs="+")
    _common(p)
    p.add_argument("--variants", type=int, default=DEFAULT_VARIANTS)
    p.add_argument("--strength", type=float, default=0.5)
    p.add_argument("--level", type=float, choices=LEVELS, default=1.0)
    p.add_argument("--control", action="store_true", help="also run the uniform-noise control")

    p = sub.add_parser("filter", help="keep entries whose subject is clearly present")
    _common(p, manifest=True)
    p.add_argument("--min-matches", type=int)
    p.add_argument("--subset", type=int, help="then draw a subset of this size stratified by count")

    p = sub.add_parser("crops", help="export subject-region crops for an external embedder")
    _common(p, manifest=True)

    p = sub.add_parser("scatter", help="n_base vs n_refined scatter from a report (CSV or SVG)")
    p.add_argument("report")
    _common(p)
    p.add_argument("--format", choices=("csv", "svg"))
    return ap


def _config(args) -> dict:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise ValueError(f"config not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"config: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ValueError("config: expected a JSON object")
    return cfg


def _matcher(args, cfg: dict) -> MatcherConfig:
    m = MatcherConfig.from_dict(cfg.get("matcher", {}))
    if args.seed is not None:
        m = replace(m, seed=args.seed)
    if getattr(args, "kind", None):
        m = replace(m, kind=args.kind)
    return m


def _crop(cfg: dict) -> CropConfig:
    return CropConfig(**cfg.get("crop", {}))


def _write_json(doc, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command}: --out is required")
    return Path(args.out)


def cmd_detect(args, cfg) -> int:
    det = DetectorConfig.from_dict(cfg.get("detector", cfg.get("matcher", {}).get("detector", {})))
    kps = detect_and_describe(load_image(args.image), det, Path(args.image).stem)
    _write_json(kps.to_dict(), args.out)
    return EXIT_OK


def cmd_match(args, cfg) -> int:
    res = match_count(load_image(args.reference), load_image(args.other), _matcher(args, cfg))
    ms = res.matchset
    doc = ms.to_dict()
    doc.update(image_a=args.reference, image_b=args.other, count=res.count, raw_count=res.raw_count)
    if args.out:
        _write_json(doc, args.out)
    print(json.dumps({"count": res.count, "raw_count": res.raw_count}))
    return EXIT_OK


def _embeddings(specs: list[str]) -> dict[str, dict[str, EmbeddingVector]]:
    out = {}
    for s in specs:
        kind, sep, directory = s.partition("=")
        if not sep or kind not in ("clip_i", "dino") or not directory:
            raise UsageError(f"--embeddings expects clip_i=DIR or dino=DIR, got {s!r}")
        out[kind] = load_embedding_dir(directory)
    return out


def cmd_eval(args, cfg) -> int:
    tau = args.tau if args.tau is not None else int(cfg.get("tau", 0))
    ecfg = EvalConfig(_matcher(args, cfg), tau, args.on_crop or bool(cfg.get("on_crop", False)), _crop(cfg))
    report = run_eval(load_manifest(args.manifest), ecfg, workers=args.workers,
                      embeddings=_embeddings(args.embeddings))
    if args.out:
        report.save(args.out)
    s = report.overall
    print(f"samples={s.n_samples} skipped={len(report.skips)} mean_aki={s.mean_aki:.2f} "
          f"k_gain={100 * s.k_gain:.1f}% tau={s.tau}")
    return EXIT_OK


def cmd_refine(args, cfg) -> int:
    out = _require_out(args)
    spec = RefinerSpec(args.refiner, args.timeout, args.workers)
    m = load_manifest(args.manifest)
    res = run_refine(m, spec, out, matcher=_matcher(args, cfg), crop=_crop(cfg), mode=args.mode)
    save_manifest(res.manifest, out / "manifest.json")
    (out / "refine_log.json").write_text(json.dumps(res.log_dict(), indent=2) + "\n")
    print(f"refined={len(res.regions)} skipped={len(res.skips)} manifest={out / 'manifest.json'}")
    if m.entries and not res.regions:
        return EXIT_ALL_SKIPPED
    return EXIT_OK


def cmd_pseudo_pair(args, cfg) -> int:
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    dkw = dict(cfg.get("degrade", {}))
    if args.level is not None:
        dkw["level"] = args.level
    if args.strength is not None:
        dkw["strength"] = args.strength
    if args.degrader:
        dkw.update(method="external", external_cmd=args.degrader)
    akw = dict(cfg.get("augment", {}))
    records = []
    k = 0
    for path in args.images:
        clean = load_image(path)
        for j in range(args.per_image):
            dspec = DegradeSpec(**{**dkw, "seed": seed + k})
            aspec = AugmentSpec(**{**akw, "seed": seed + k})
            pair = make_pseudo_pair(clean, dspec, aspec, args.swap)
            records.append(write_pseudo_pair(pair, path, out, f"{Path(path).stem}_{j:03d}", dspec, aspec))
            k += 1
    with open(out / "pairs.jsonl", "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    print(f"pairs={len(records)} records={out / 'pairs.jsonl'}")
    return EXIT_OK


def cmd_validate_degrade(args, cfg) -> int:
    seed = args.seed if args.seed is not None else 0
    rows = []
    for path in args.images:
        clean = load_image(path)
        rep = validate_degradation(clean, builtin_variants(clean, args.variants, args.strength, seed, args.level))
        row = {"image": path, "builtin": rep.to_dict()}
        if args.control:
            row["control"] = validate_degradation(clean, uniform_noise_variants(clean, args.variants,
                                                                                seed=seed)).to_dict()
        rows.append(row)
    _write_json({"variants": args.variants, "strength": args.strength, "level": args.level, "images": rows},
                args.out)
    return EXIT_OK


def cmd_filter(args, cfg) -> int:
    out = _require_out(args)
    m = load_manifest(args.manifest)
    min_matches = args.min_matches if args.min_matches is not None else int(cfg.get("min_matches", 10))
    kept, rows = quality_filter(m, min_matches, _matcher(args, cfg), args.workers)
    if args.subset is not None:
        counts = {r["sample_id"]: r["count"] for r in rows if r["kept"] and r["count"] is not None}
        kept = stratified_subset(kept, counts, args.subset, args.seed or 0)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(kept.absolute(), out)
    log_path = out.with_name(out.stem + "_filter_log.json")
    log_path.write_text(json.dumps({"min_matches": min_matches, "samples": rows}, indent=2) + "\n")
    print(f"kept={len(kept)} of {len(m)} manifest={out}")
    return EXIT_OK


def cmd_crops(args, cfg) -> int:
    out = _require_out(args)
    doc = export_subject_crops(load_manifest(args.manifest), out, _matcher(args, cfg), _crop(cfg), args.workers)
    print(f"crops={len(doc['entries'])} skipped={len(doc['skips'])} manifest={out / 'crops.json'}")
    if doc["skips"] and not doc["entries"]:
        return EXIT_ALL_SKIPPED
    return EXIT_OK


def cmd_scatter(args, cfg) -> int:
    out = _require_out(args)
    try:
        report = EvalReport.load(args.report)
    except (FileNotFoundError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"cannot read report {args.report}: {exc}") from exc
    emit_scatter(report, out, args.format)
    return EXIT_OK


COMMANDS = {
    "detect": cmd_detect, "match": cmd_match, "eval": cmd_eval, "refine": cmd_refine,
    "pseudo-pair": cmd_pseudo_pair, "validate-degrade": cmd_validate_degrade, "filter": cmd_filter,
    "crops": cmd_crops, "scatter": cmd_scatter,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, _config(args))
    except UsageError as exc:
        print(f"fidelitykit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AllSamplesSkippedError as exc:
        print(f"fidelitykit: {exc}", file=sys.stderr)
        return EXIT_ALL_SKIPPED
    except (ManifestError, MatchSchemaError, ImageIOError, RefinerError, ExternalDegraderError,
            ValueError, TypeError, OSError) as exc:
        print(f"fidelitykit: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
