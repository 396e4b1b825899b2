"""Command-line entry point: split, train, eval, saliency, ablate.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 runtime error.
Configuration layers as defaults < JSON file (``--config``) < flags.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import ImageSet, SplitManifest, load_image, scan_dataset, stratified_split
from .errors import CheckpointError, ConfigError, DataError
from .metrics import render_report
from .model import ModelConfig, load_checkpoint, reduced_config
from .saliency import compute_saliency, to_png_bytes
from .train import SaliencyCache, TrainHyper, default_scorer, evaluate_model, save_result, train, write_log

log = logging.getLogger("svsec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

ABLATION_ROWS = (
    ("Modified VGG16", {"variant": "cnn", "fuse": False}),
    ("Modified VGG16 + Saliency Map", {"variant": "cnn", "fuse": True}),
    ("Swin Transformer", {"variant": "swin", "fuse": False}),
    ("SVS-EC", {"variant": "svsec", "fuse": True}),
)


@dataclass
class RunConfig:
    seed: int = 0
    preset: str = "default"  # "default" or "reduced"
    model: dict = field(default_factory=dict)  # overrides on top of the preset
    train: dict = field(default_factory=dict)  # TrainHyper fields
    data_root: str | None = None
    scorer: str | None = None
    cache_dir: str | None = None

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        if self.preset == "reduced":
            base = reduced_config().to_dict()
        elif self.preset == "default":
            base = ModelConfig().to_dict()
        else:
            raise ConfigError(f"unknown preset {self.preset!r}")
        merged = _deep_merge(base, self.model)
        merged["seed"] = self.seed
        if num_classes is not None:
            if "num_classes" in self.model and self.model["num_classes"] != num_classes:
                raise ConfigError(f"config asks for {self.model['num_classes']} classes, data has {num_classes}")
            merged["num_classes"] = num_classes
        try:
            return ModelConfig.from_dict(merged).validate()
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def hyper(self) -> TrainHyper:
        try:
            return TrainHyper(**{**self.train, "seed": self.seed}).validate()
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(doc) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = RunConfig(**{**asdict(cfg), **doc})
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.train[key] = value
    for flag in ("seed",):
        if getattr(args, flag, None) is not None:
            cfg.seed = getattr(args, flag)
    for flag, key in (("data", "data_root"), ("scorer", "scorer"), ("cache_dir", "cache_dir")):
        if getattr(args, flag, None) is not None:
            setattr(cfg, key, str(getattr(args, flag)))
    log.info("resolved run config: %s", json.dumps(asdict(cfg), sort_keys=True))
    return cfg


def _load_manifest(path, run: RunConfig) -> tuple:
    manifest = SplitManifest.load(path)
    root = Path(run.data_root) if run.data_root else manifest.root
    if root is None:
        raise ConfigError("manifest has no root; pass --data")
    return manifest, root


def _scorer(run: RunConfig, cfg: ModelConfig):
    if run.scorer:
        scorer = load_checkpoint(run.scorer).model
    else:
        scorer = default_scorer(cfg)
    if scorer.cfg.uses_saliency:
        raise ConfigError("a saliency scorer must not itself fuse saliency maps")
    if scorer.input_side != cfg.cnn.map_side:
        raise ConfigError(f"scorer input side {scorer.input_side} != map side {cfg.cnn.map_side}")
    return scorer


# ---------------------------------------------------------------------------
# commands


def cmd_split(args) -> int:
    data = Path(args.data)
    if not data.is_dir():
        print(f"error: dataset directory {data} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    ratios = tuple(float(r) for r in args.ratios.split(","))
    catalog = scan_dataset(data)
    manifest = stratified_split(catalog, ratios, args.seed)
    manifest.root = data.resolve()
    manifest.save(args.out)
    counts = manifest.counts()
    print("class\t" + "\t".join(counts))
    for k, name in enumerate(manifest.classes):
        print(name + "\t" + "\t".join(str(counts[s][k]) for s in counts))
    print("total\t" + "\t".join(str(sum(counts[s])) for s in counts))
    return EXIT_OK


def _train_one(run: RunConfig, cfg: ModelConfig, manifest, root, out: Path, log_path: Path, cache=None):
    hyper = run.hyper()
    side = cfg.image_side
    train_set = ImageSet.from_manifest(manifest, "train", root, side)
    val_set = ImageSet.from_manifest(manifest, "val", root, side)
    if cfg.uses_saliency and cache is None:
        cache = SaliencyCache(_scorer(run, cfg), run.cache_dir)
    result = train(train_set, val_set, cfg, hyper, cache=cache)
    extra = {"scorer_path": run.scorer, "scorer_checksum": cache.tag} if cfg.uses_saliency else {}
    save_result(result, out, hyper, extra)
    write_log(result.log, log_path)
    return result, cache


def cmd_train(args) -> int:
    run = resolve_config(args)
    manifest, root = _load_manifest(args.manifest, run)
    cfg = run.model_config(len(manifest.classes))
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    result, _ = _train_one(run, cfg, manifest, root, out, log_path)
    print(f"best epoch {result.best_epoch}; checkpoint {out}; log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = resolve_config(args)
    manifest, root = _load_manifest(args.manifest, run)
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    if cfg.num_classes != len(manifest.classes):
        print(f"error: checkpoint has {cfg.num_classes} classes, manifest has {len(manifest.classes)}",
              file=sys.stderr)
        return EXIT_CONFIG
    dataset = ImageSet.from_manifest(manifest, args.split, root, cfg.image_side)
    cache = None
    if cfg.uses_saliency:
        if run.scorer is None:
            run.scorer = ckpt.extra.get("scorer_path")
        cache = SaliencyCache(_scorer(run, cfg), run.cache_dir)
        trained_with = ckpt.extra.get("scorer_checksum")
        if trained_with and trained_with != cache.tag:
            log.warning("saliency scorer %s differs from the one used in training (%s)", cache.tag, trained_with)
    report = evaluate_model(ckpt.model, dataset, cache)
    text = render_report([(Path(args.ckpt).stem, report)], args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_saliency(args) -> int:
    if args.scorer:
        scorer = load_checkpoint(args.scorer).model
        if scorer.cfg.uses_saliency:
            raise ConfigError("a saliency scorer must not itself fuse saliency maps")
    else:
        scorer = default_scorer(ModelConfig(seed=args.seed or 0))
    image = load_image(args.image, 2 * scorer.input_side)
    smap = compute_saliency(image[None], scorer, str(args.image))
    Path(args.out).write_bytes(to_png_bytes(smap))
    print(f"wrote {smap.side}x{smap.side} saliency map to {args.out}")
    return EXIT_OK


def ablation_config(run: RunConfig, num_classes: int, variant: str, fuse: bool) -> ModelConfig:
    cfg = run.model_config(num_classes)
    cfg.variant = variant
    cfg.cnn.fuse_input_channel = fuse
    cfg.cnn.fuse_per_stage = fuse
    return cfg.validate()


def cmd_ablate(args) -> int:
    run = resolve_config(args)
    manifest, root = _load_manifest(args.manifest, run)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    k = len(manifest.classes)
    cache = None
    rows = []
    for i, (label, spec) in enumerate(ABLATION_ROWS):
        cfg = ablation_config(run, k, spec["variant"], spec["fuse"])
        if cfg.uses_saliency and cache is None:
            cache = SaliencyCache(_scorer(run, cfg), run.cache_dir)
        tag = f"{i}_{spec['variant']}{'_sal' if spec['fuse'] and spec['variant'] == 'cnn' else ''}"
        result, _ = _train_one(run, cfg, manifest, root, outdir / f"{tag}.svse", outdir / f"{tag}.log.csv",
                               cache if cfg.uses_saliency else None)
        test_set = ImageSet.from_manifest(manifest, "test", root, cfg.image_side)
        report = evaluate_model(result.model, test_set, cache if cfg.uses_saliency else None)
        rows.append((label, report))
        log.info("%s: accuracy %.4f", label, report.accuracy)
    for fmt in ("csv", "json", "text"):
        (outdir / f"ablation.{'txt' if fmt == 'text' else fmt}").write_text(render_report(rows, fmt), encoding="utf-8")
    sys.stdout.write(render_report(rows, "text"))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svsec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="write a stratified train/val/test manifest")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ratios", default="0.60,0.25,0.15")
    s.set_defaults(func=cmd_split)

    def common(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--config")
        sp.add_argument("--data", help="dataset root (overrides the manifest header)")
        sp.add_argument("--scorer", help="saliency scorer checkpoint")
        sp.add_argument("--cache-dir", dest="cache_dir")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model and write the best checkpoint")
    common(t)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(e)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--ckpt", required=True)
    e.add_argument("--format", default="text", choices=("text", "csv", "json"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("saliency", help="write the saliency map of one image as PNG")
    m.add_argument("--image", required=True)
    m.add_argument("--scorer")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_saliency)

    a = sub.add_parser("ablate", help="train and evaluate the four Table-1 variants")
    common(a)
    a.add_argument("--out", required=True)
    a.add_argument("--epochs", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--batch", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
