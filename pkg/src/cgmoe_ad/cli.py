"""Command line for the cgMoE anomaly-detection toolkit.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Any ``--section.key value`` pair not consumed by a subcommand flag is applied
as a dotted override of the run configuration (unknown keys are rejected).
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .checkpoint import CheckpointError, load_checkpoint
from .model import ConfigError, ModelBundle
from .pipeline import (DOMAINS, DatasetManifest, SourceDescriptor, balance,
                       convert, format_stats, grid_location, load_mask, load_train_images,
                       materialize, resplit, stats, validate_annotation)
from .scoring import evaluate
from .synthetic import SynthSpec, generate
from .training import train

log = logging.getLogger("cgmoe_ad")

ABLATION_LABELS = {
    "1": "Single FFN (baseline)",
    "decoder_cls": "cgMoE-8, decoder [CLS] routing",
}


class UsageError(Exception):
    pass


def _domains_arg(text):
    if text is None:
        return None
    doms = [d.strip() for d in text.split(",") if d.strip()]
    bad = [d for d in doms if d not in DOMAINS]
    if bad:
        raise UsageError(f"unknown domain(s) {bad}; choose from {list(DOMAINS)}")
    return doms


def _require_dir(path, what="dataset root"):
    if path is None:
        raise UsageError(f"{what} not given")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} does not exist: {p}")
    return p


def _load_manifest(root: Path) -> DatasetManifest:
    if not (root / "manifest.json").exists():
        raise UsageError(f"no manifest.json under {root}")
    return DatasetManifest.load(root)


@contextlib.contextmanager
def _threads(cfg):
    rt = cfg["runtime"]
    n = 1 if rt["deterministic"] else rt["threads"]
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=int(n)):
        yield


def _categories(manifest, domains):
    if domains is None:
        return None
    return [c.name for c in manifest.categories if c.domain in domains]


# ---------------------------------------------------------------------------
# commands

def cmd_convert(args, cfg):
    sources = []
    for path in args.source:
        desc = json.loads(Path(path).read_text())
        root = Path(desc["root"])
        if not root.is_absolute():
            desc["root"] = str((Path(path).parent / root).resolve())
        _require_dir(desc["root"], "source root")
        sources.append(SourceDescriptor(**desc))
    out = Path(args.out or cfg["out"])
    summary = convert(sources, out)
    print(format_stats(stats(summary.manifest)))
    if summary.failures:
        print(f"\n{len(summary.failures)} file(s) failed:")
        for f in summary.failures:
            print("  " + f)
    return 0


def cmd_split_balance(args, cfg):
    root = _require_dir(args.data or cfg["data"])
    manifest = _load_manifest(root)
    p = cfg["pipeline"]
    cats = []
    for cat in manifest.categories:
        if p["resplit"]:
            cat = resplit(cat, p["seed"])
        cats.append(balance(cat, p["seed"], p["train_cap"], p["normal_test_cap"],
                            p["defect_cap"]))
    out = Path(args.out or cfg["out"])
    result = materialize(DatasetManifest(cats, manifest.provenance), root, out)
    C.save(cfg, out)
    print(format_stats(stats(result)))
    return 0


def cmd_annotate_locations(args, cfg):
    root = _require_dir(args.data or cfg["data"])
    manifest = _load_manifest(root)
    n = 0
    for cat in manifest.categories:
        for s in cat.samples:
            if s.anomalous and s.mask:
                ann = dict(s.annotation or {})
                ann["location"] = grid_location(load_mask(root / s.mask))
                s.annotation = ann
                n += 1
    manifest.save(root / "manifest.json")
    print(f"annotated {n} anomalous sample(s) with grid locations")
    return 0


def cmd_validate_annotations(args, cfg):
    root = _require_dir(args.data or cfg["data"])
    manifest = _load_manifest(root)
    report = []
    for cat in manifest.categories:
        for s in cat.samples:
            if not s.anomalous:
                continue
            mask = load_mask(root / s.mask) if s.mask else None
            res = validate_annotation(s.annotation or {}, mask)
            if res.violations or res.warnings:
                report.append({"sample": s.image, "violations": res.violations,
                               "warnings": res.warnings})
    n_bad = sum(bool(r["violations"]) for r in report)
    print(f"{n_bad} record(s) with violations, "
          f"{sum(bool(r['warnings']) for r in report)} with warnings")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "annotation_report.json").write_text(json.dumps(report, indent=1))
    return 0


def cmd_stats(args, cfg):
    root = _require_dir(args.data or cfg["data"])
    report = stats(_load_manifest(root))
    print(format_stats(report))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "stats.json").write_text(json.dumps(report, indent=1))
        (Path(args.out) / "stats.txt").write_text(format_stats(report) + "\n")
    return 0


def cmd_gen_synthetic(args, cfg):
    spec = SynthSpec.from_json(Path(args.spec).read_text()) if args.spec else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out or cfg["out"])
    manifest = generate(spec, out)
    print(format_stats(stats(manifest)))
    return 0


def _train_images(cfg, manifest, root, model_cfg):
    prot = cfg["protocol"]
    cats = _categories(manifest, prot["train_domains"])
    return load_train_images(manifest, root, cats, prot["shots"],
                             model_cfg.encoder.image_size), cats


def _train_model(cfg, manifest, root, out_dir):
    model_cfg = C.build_model_config(cfg)
    train_cfg = C.build_train_config(cfg)
    images, cats = _train_images(cfg, manifest, root, model_cfg)
    model = ModelBundle(model_cfg)
    res = train(images, train_cfg, model, out_dir)
    return res, len(images), cats


def cmd_train(args, cfg):
    root = _require_dir(args.data or cfg["data"])
    manifest = _load_manifest(root)
    out = Path(args.out or cfg["out"])
    C.save(cfg, out)
    with _threads(cfg):
        res, n, _ = _train_model(cfg, manifest, root, out)
    print(f"trained on {n} images; final loss {res.history[-1]['loss']:.5f}; "
          f"checkpoint {res.checkpoints[-1]}")
    return 0


def cmd_eval(args, cfg):
    root = _require_dir(args.data or cfg["data"])
    manifest = _load_manifest(root)
    out = Path(args.out or cfg["out"])
    C.save(cfg, out)
    prot = cfg["protocol"]
    info = {"train_domains": prot["train_domains"], "eval_domains": prot["eval_domains"],
            "shots": prot["shots"]}
    with _threads(cfg):
        if args.checkpoint:
            try:
                model = load_checkpoint(args.checkpoint)
            except (CheckpointError, FileNotFoundError) as exc:
                raise UsageError(str(exc)) from exc
            want = C.build_model_config(cfg)
            if model.config.encoder.image_size != want.encoder.image_size \
                    or model.config.encoder.d != want.encoder.d:
                raise UsageError(
                    f"checkpoint dims (image_size={model.config.encoder.image_size}, "
                    f"d={model.config.encoder.d}) do not match config "
                    f"(image_size={want.encoder.image_size}, d={want.encoder.d})")
            info["checkpoint"] = str(args.checkpoint)
        else:
            res, n, cats = _train_model(cfg, manifest, root, out / "train")
            model = res.model
            counts = {}
            for c in manifest.categories:
                if cats is None or c.name in cats:
                    k = len(c.select(split="train"))
                    counts[c.name] = k if prot["shots"] is None else min(k, prot["shots"])
            info["train_images_per_category"] = counts
            info["train_images"] = n
        cats = _categories(manifest, prot["eval_domains"])
        report = evaluate(model, manifest, root, scoring=C.build_scoring_config(cfg),
                          categories=cats, score_dump=out / "image_scores.csv")
    data = report.to_dict()
    data["protocol"] = info
    (out / "metrics.json").write_text(json.dumps(data, indent=1))
    (out / "metrics.txt").write_text(report.table() + "\n")
    print(report.table())
    return 0


def ablation_label(variant: str) -> str:
    if variant in ABLATION_LABELS:
        return ABLATION_LABELS[variant]
    return f"cgMoE-{variant} experts"


def run_ablation(cfg, manifest, root, variants, out: Path) -> list[dict]:
    rows = []
    for v in variants:
        vcfg = json.loads(json.dumps(cfg))
        if v == "decoder_cls":
            vcfg["model"]["experts"] = 8
            vcfg["model"]["routing_source"] = "decoder_cls"
        else:
            vcfg["model"]["experts"] = int(v)
            vcfg["model"]["routing_source"] = "encoder_cls"
        vout = out / f"variant_{v}"
        C.save(vcfg, vout)
        res, _, _ = _train_model(vcfg, manifest, root, vout)
        cats = _categories(manifest, vcfg["protocol"]["eval_domains"])
        rep = evaluate(res.model, manifest, root, scoring=C.build_scoring_config(vcfg),
                       categories=cats)
        rows.append({"variant": v, "configuration": ablation_label(v),
                     "I-AUROC": rep.overall["I-AUROC"], "P-AUROC": rep.overall["P-AUROC"],
                     "batch_hash": res.batch_hash})
    return rows


def format_ablation(rows) -> str:
    width = max(len(r["configuration"]) for r in rows) + 2
    lines = [f"{'Configuration':<{width}}{'I-AUROC':>9}{'P-AUROC':>9}"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        lines.append(f"{r['configuration']:<{width}}{100 * r['I-AUROC']:>9.1f}"
                     f"{100 * r['P-AUROC']:>9.1f}")
    same = len({r["batch_hash"] for r in rows}) == 1
    lines.append(f"batch sequence audit: {'identical' if same else 'DIFFERENT'} "
                 f"({rows[0]['batch_hash'][:16]})")
    return "\n".join(lines)


def cmd_ablate(args, cfg):
    root = _require_dir(args.data or cfg["data"])
    manifest = _load_manifest(root)
    out = Path(args.out or cfg["out"])
    C.save(cfg, out)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v != "decoder_cls" and not v.isdigit():
            raise UsageError(f"bad ablation variant {v!r}")
    with _threads(cfg):
        rows = run_ablation(cfg, manifest, root, variants, out)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))
    table = format_ablation(rows)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# parser

COMMANDS = {
    "convert": cmd_convert,
    "split-balance": cmd_split_balance,
    "annotate-locations": cmd_annotate_locations,
    "validate-annotations": cmd_validate_annotations,
    "stats": cmd_stats,
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output root")
    common.add_argument("--threads", type=int)
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bit-reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cgmoe-ad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", parents=[common], help="relayout sources into MVTec style")
    p.add_argument("--source", action="append", required=True,
                   help="source descriptor JSON (repeatable)")

    for name, helptext in (("split-balance", "9:1 split and per-category caps"),
                           ("annotate-locations", "3x3 grid locations from masks"),
                           ("validate-annotations", "check six-attribute annotations"),
                           ("stats", "dataset statistics")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help="dataset root with manifest.json")

    p = sub.add_parser("gen-synthetic", parents=[common], help="generate a synthetic benchmark")
    p.add_argument("--spec", help="SynthSpec JSON")
    p.add_argument("--seed", type=int)

    for name in ("train", "eval", "ablate"):
        p = sub.add_parser(name, parents=[common], help=f"{name} the cgMoE model")
        p.add_argument("--data", help="dataset root with manifest.json")
        p.add_argument("--experts", type=int)
        p.add_argument("--routing", choices=("encoder_cls", "decoder_cls"))
        p.add_argument("--iterations", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--train-domains")
        p.add_argument("--eval-domains")
        p.add_argument("--shots", type=int)
        if name == "eval":
            p.add_argument("--checkpoint")
        if name == "ablate":
            p.add_argument("--variants", default="1,2,4,8")
    return parser


def _parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument: {tok}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            val = next(it, None)
            if val is None:
                raise UsageError(f"override {tok} needs a value")
        pairs.append((key, val))
    return pairs


def _flag_overrides(args) -> list[tuple[str, object]]:
    pairs = []
    g = vars(args)
    if g.get("experts") is not None:
        pairs.append(("model.experts", g["experts"]))
    if g.get("routing"):
        pairs.append(("model.routing_source", g["routing"]))
    if g.get("iterations") is not None:
        pairs.append(("train.iterations", g["iterations"]))
    if g.get("seed") is not None and args.command in ("train", "eval", "ablate"):
        pairs += [("train.seed", g["seed"]), ("model.seed", g["seed"])]
    if g.get("train_domains"):
        pairs.append(("protocol.train_domains", _domains_arg(g["train_domains"])))
    if g.get("eval_domains"):
        pairs.append(("protocol.eval_domains", _domains_arg(g["eval_domains"])))
    if g.get("shots") is not None:
        if g["shots"] < 1:
            raise UsageError("--shots must be >= 1")
        pairs.append(("protocol.shots", g["shots"]))
    if g.get("threads") is not None:
        pairs.append(("runtime.threads", g["threads"]))
    if g.get("deterministic"):
        pairs.append(("runtime.deterministic", True))
    if g.get("out"):
        pairs.append(("out", g["out"]))
    if g.get("data"):
        pairs.append(("data", g["data"]))
    return pairs


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args, extra)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"cgmoe-ad: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"cgmoe-ad: failed: {exc}", file=sys.stderr)
        return 1


def _resolve_config(args, extra) -> dict:
    try:
        overrides = _parse_overrides(extra)
        if args.config and not Path(args.config).exists():
            raise UsageError(f"config file does not exist: {args.config}")
        cfg = C.resolve(args.config, overrides)
        for key, val in _flag_overrides(args):
            C.set_dotted(cfg, key, val)
        C.build_model_config(cfg)
        C.build_train_config(cfg)
    except C.ConfigKeyError as exc:
        raise UsageError(exc.args[0]) from exc
    except (ConfigError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    if cfg["out"] is None and args.command not in ("stats", "annotate-locations",
                                                   "validate-annotations"):
        raise UsageError("--out is required")
    return cfg


if __name__ == "__main__":
    sys.exit(main())
