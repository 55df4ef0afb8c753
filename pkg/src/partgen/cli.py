"""Command line entry point: ``partgen <command> [options]``.

Exit status: 0 on success, 1 on a refused or partially failed operation,
2 on a usage error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import blending, config, dataset, metrics, training
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .conditioning import HashedBagOfWords
from .generator import generate_parts, record_condition
from .geometry import BoundingBox


class UsageError(Exception):
    pass


class Refused(Exception):
    pass


GEN_BEST, GEN_LAST = "generator.pt", "generator-last.pt"
BLEND_BEST, BLEND_LAST = "blender.pt", "blender-last.pt"
TRAIN_LOG = "train_log.jsonl"
RECORDS = "records.jsonl"
REPORT = "report.txt"


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out) if args.out else config.output_root() / default_name


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise Refused(f"{path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _load_config(args) -> config.RunConfig:
    cfg = config.RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.update("global", {"seed": args.seed})
    return cfg


def _item_generator(seed: int, i: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, i]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


# --- make-dataset --------------------------------------------------------------

def cmd_make_dataset(args) -> int:
    cfg = _load_config(args)
    cfg.update("dataset", {"categories": args.categories, "train": args.train, "val": args.val,
                           "test": args.test, "n_clusters": args.n_clusters})
    d = cfg.get("dataset")
    out = _out_dir(args, "dataset")
    _prepare_out(out, args.force)
    manifest = dataset.build_dataset({s: d[s] for s in dataset.SPLITS}, cfg.categories(), cfg.seed,
                                     n_clusters=d["n_clusters"], max_parts=d["max_parts"])
    dataset.save_dataset(manifest, out)
    print(f"dataset: {out}")
    for split in dataset.SPLITS:
        recs = manifest.split(split)
        per_cat = {c: sum(r.category == c for r in recs) for c in cfg.categories()}
        print(f"{split}: {len(recs)} (" + ", ".join(f"{c}={n}" for c, n in per_cat.items()) + ")")
    print(f"manifest_hash={dataset.manifest_hash(out)}")
    return 0


# --- training -----------------------------------------------------------------

def _train_records(manifest, categories):
    pick = lambda rs: [r for r in rs if r.category in categories]  # noqa: E731
    return pick(manifest.split("train")), pick(manifest.split("val"))


def _check_resume(ckpt, mhash, kind):
    if ckpt.get("manifest_hash") != mhash:
        raise Refused(f"{kind} checkpoint was trained on a different dataset "
                      f"(manifest hash {ckpt.get('manifest_hash', '')[:12]} vs {mhash[:12]}); refusing to resume")


def cmd_train_generator(args) -> int:
    cfg = _load_config(args)
    cfg.update("generator", {"preset": args.preset, "steps": args.steps, "batch_size": args.batch_size,
                             "lr": args.lr, "ss_ratio": args.ss_ratio, "condition": args.condition,
                             "lr_schedule": args.lr_schedule})
    if args.categories:
        cfg.update("dataset", {"categories": args.categories})
    manifest = _load_manifest(args.dataset)
    mhash = dataset.manifest_hash(args.dataset)
    out = _out_dir(args, "generator")
    tcfg = cfg.generator_train_config()
    train_recs, val_recs = _train_records(manifest, cfg.categories())
    if args.resume:
        ckpt = _load_ckpt(args.resume, "generator")
        _check_resume(ckpt, mhash, "generator")
        model, normalizer, embedder = training.load_generator(ckpt)
        tcfg = training.GeneratorTrainConfig(**{**ckpt["train_config"], "steps": tcfg.steps})
        trainer = training.GeneratorTrainer(model, normalizer, train_recs, val_recs, tcfg, embedder, mhash)
        trainer.restore(ckpt)
        out.mkdir(parents=True, exist_ok=True)
        mode = "a"
    else:
        _prepare_out(out, args.force)
        embedder = HashedBagOfWords() if cfg.get("generator")["condition"] else None
        normalizer = training.Normalizer.from_manifest(manifest)
        gcfg = cfg.generator_config(embedder.dim if embedder else 0)
        # the coarse heads must match the dataset codebooks
        gcfg.n_clusters = len(normalizer.codebooks["translation"].centers)
        model = training.build_generator(gcfg, cfg.seed)
        trainer = training.GeneratorTrainer(model, normalizer, train_recs, val_recs, tcfg, embedder, mhash)
        mode = "w"
    remaining = max(tcfg.steps - trainer.step, 0)
    with open(out / TRAIN_LOG, mode, encoding="utf-8", newline="\n") as log:
        try:
            trainer.fit(remaining, log)
        except training.TrainingError as e:
            save_checkpoint(out / GEN_LAST, "generator", **trainer.checkpoint_payload(best=False),
                            categories=cfg.categories())
            print(f"error: {e}", file=sys.stderr)
            return 1
    save_checkpoint(out / GEN_LAST, "generator", **trainer.checkpoint_payload(best=False), categories=cfg.categories())
    save_checkpoint(out / GEN_BEST, "generator", **trainer.checkpoint_payload(best=True), categories=cfg.categories())
    print(f"step={trainer.step} best_step={trainer.best_step} best_val_nll={trainer.best_val:.6f}")
    print(f"checkpoint: {out / GEN_BEST}")
    return 0


def cmd_train_blender(args) -> int:
    cfg = _load_config(args)
    cfg.update("blender", {"preset": args.preset, "steps": args.steps, "batch_size": args.batch_size,
                           "lr": args.lr, "n_points": args.n_points})
    if args.categories:
        cfg.update("dataset", {"categories": args.categories})
    manifest = _load_manifest(args.dataset)
    mhash = dataset.manifest_hash(args.dataset)
    out = _out_dir(args, "blender")
    tcfg = cfg.blender_train_config()
    train_recs, val_recs = _train_records(manifest, cfg.categories())
    if args.resume:
        ckpt = _load_ckpt(args.resume, "blender")
        _check_resume(ckpt, mhash, "blender")
        model = blending.load_blender(ckpt)
        tcfg = blending.BlenderTrainConfig(**{**ckpt["train_config"], "steps": tcfg.steps})
        trainer = blending.BlenderTrainer(model, train_recs, val_recs, tcfg, mhash)
        trainer.restore(ckpt)
        out.mkdir(parents=True, exist_ok=True)
        mode = "a"
    else:
        _prepare_out(out, args.force)
        model = blending.build_blender(cfg.blender_config(), cfg.seed)
        trainer = blending.BlenderTrainer(model, train_recs, val_recs, tcfg, mhash)
        mode = "w"
    remaining = max(tcfg.steps - trainer.step, 0)
    with open(out / TRAIN_LOG, mode, encoding="utf-8", newline="\n") as log:
        try:
            trainer.fit(remaining, log)
        except blending.TrainingError as e:
            save_checkpoint(out / BLEND_LAST, "blender", **trainer.checkpoint_payload(best=False))
            print(f"error: {e}", file=sys.stderr)
            return 1
    save_checkpoint(out / BLEND_LAST, "blender", **trainer.checkpoint_payload(best=False))
    save_checkpoint(out / BLEND_BEST, "blender", **trainer.checkpoint_payload(best=True))
    print(f"step={trainer.step} best_step={trainer.best_step} best_val_bce={trainer.best_val:.6f}")
    print(f"checkpoint: {out / BLEND_BEST}")
    return 0


# --- sampling -----------------------------------------------------------------

def _load_manifest(path):
    if path is None:
        raise UsageError("--dataset is required")
    try:
        return dataset.load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"no dataset at {path}") from None


def _load_ckpt(path, kind):
    try:
        return load_checkpoint(path, kind)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None


def _parse_vec(text: str, n: int, name: str) -> list:
    try:
        v = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"{name} must be {n} comma-separated numbers") from None
    if len(v) != n:
        raise UsageError(f"{name} must be {n} comma-separated numbers")
    return v


def _bbox_sources(args, count: int) -> list:
    """(bbox, category, source record or None) per sample."""
    cat = args.category
    if args.bbox and args.bbox_from:
        raise UsageError("give either --bbox or --bbox-from, not both")
    if args.bbox:
        size = _parse_vec(args.bbox, 3, "--bbox")
        if min(size) <= 0:
            raise UsageError("--bbox sizes must be positive")
        # boxes stand on the floor like the training objects
        box = BoundingBox(size, (0.0, size[1] / 2, 0.0))
        return [(box, cat, None)] * count
    if args.bbox_from:
        manifest = _load_manifest(args.dataset)
        if args.bbox_from in dataset.SPLITS:
            recs = [r for r in manifest.split(args.bbox_from) if cat is None or r.category == cat]
            if not recs:
                raise UsageError(f"split {args.bbox_from} has no matching records")
        else:
            try:
                recs = [manifest.find(args.bbox_from)]
            except KeyError:
                raise UsageError(f"no record {args.bbox_from!r} in {args.dataset}") from None
        return [(recs[i % len(recs)].bbox, recs[i % len(recs)].category, recs[i % len(recs)]) for i in range(count)]
    raise UsageError("give --bbox SX,SY,SZ or --bbox-from RECORD_ID|SPLIT")


def _sampler(args):
    ckpt = _load_ckpt(args.checkpoint, "generator")
    model, normalizer, embedder = training.load_generator(ckpt)
    if args.condition_text is not None and embedder is None:
        raise UsageError("--condition-text needs a generator trained with conditioning")
    condition = record_condition(embedder, args.condition_text)
    return model, normalizer, condition, ckpt.get("categories") or list(dataset.CATEGORIES)


def _finish_records(args, records, out: Path) -> int:
    dataset.write_records(out / RECORDS, records)
    n_trunc = sum(r.truncated for r in records)
    print(f"wrote {len(records)} records to {out / RECORDS} ({n_trunc} truncated)")
    if args.mesh:
        if not args.blender:
            raise UsageError("--mesh needs --blender CHECKPOINT")
        blender = blending.load_blender(_load_ckpt(args.blender, "blender"))
        for r in records:
            mesh = blending.extract_mesh(blender, r, args.resolution) if r.parts else blending.TriangleMesh.empty()
            if mesh.is_empty:
                print(f"{r.id}: empty mesh", file=sys.stderr)
            blending.write_obj(out / f"{r.id}.obj", mesh)
        print(f"wrote {len(records)} meshes")
    return 0


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    cfg.update("sampling", {"count": args.count, "max_parts": args.max_parts, "temperature": args.temperature})
    s = cfg.get("sampling")
    model, normalizer, condition, categories = _sampler(args)
    sources = _bbox_sources(args, s["count"])
    out = _out_dir(args, "generated")
    _prepare_out(out, args.force)
    records = []
    for i, (box, cat, _) in enumerate(sources):
        parts, truncated = generate_parts(model, normalizer, box, _item_generator(cfg.seed, i),
                                          condition=condition, max_parts=s["max_parts"],
                                          temperature=s["temperature"])
        records.append(_make_record(f"gen-{i:05d}", cat or categories[0], box, parts, truncated))
    return _finish_records(args, records, out)


def _make_record(rid, category, box, parts, truncated):
    rec = dataset.ObjectRecord(rid, category, box, tuple(parts), "", truncated)
    return dataset.ObjectRecord(rid, category, box, tuple(parts), dataset.text_description(rec), truncated)


def cmd_complete(args) -> int:
    cfg = _load_config(args)
    cfg.update("sampling", {"count": args.count, "max_parts": args.max_parts, "temperature": args.temperature})
    s = cfg.get("sampling")
    try:
        recs = dataset.read_records(args.partial)
    except FileNotFoundError:
        raise UsageError(f"partial record file not found: {args.partial}") from None
    if args.record_id:
        recs = [r for r in recs if r.id == args.record_id]
    if not recs:
        raise UsageError("no partial record found")
    src = recs[0]
    prefix = list(src.parts)
    if args.drop:
        drop = set(args.drop)
        if any(not 0 <= d < len(prefix) for d in drop):
            raise UsageError(f"--drop index out of range for {len(prefix)} parts")
        prefix = [p for k, p in enumerate(prefix) if k not in drop]
    model, normalizer, condition, _ = _sampler(args)
    out = _out_dir(args, "completed")
    _prepare_out(out, args.force)
    records = []
    for i in range(s["count"]):
        parts, truncated = generate_parts(model, normalizer, src.bbox, _item_generator(cfg.seed, i), prefix=prefix,
                                          condition=condition, max_parts=s["max_parts"],
                                          temperature=s["temperature"])
        records.append(_make_record(f"{src.id}-completion-{i:05d}", src.category, src.bbox, parts, truncated))
    return _finish_records(args, records, out)


def cmd_extract_mesh(args) -> int:
    blender = blending.load_blender(_load_ckpt(args.blender, "blender"))
    try:
        recs = dataset.read_records(args.records)
    except FileNotFoundError:
        raise UsageError(f"record file not found: {args.records}") from None
    if args.record_id:
        recs = [r for r in recs if r.id == args.record_id]
    if not recs:
        raise UsageError("no records to mesh")
    out = _out_dir(args, "meshes")
    _prepare_out(out, args.force)
    for r in recs:
        if not r.parts:
            blending.write_obj(out / f"{r.id}.obj", blending.TriangleMesh.empty())
            print(f"{r.id}: no parts (empty)")
            continue
        res = args.resolution or blender.cfg.resolution
        if args.grid:
            parts, _ = dataset.to_unit_frame(r)
            blending.write_grid(out / f"{r.id}.grid", blending.occupancy_grid(blender, parts, res))
        mesh = blending.extract_mesh(blender, r, res, args.threshold)
        blending.write_obj(out / f"{r.id}.obj", mesh)
        print(f"{r.id}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces" + (" (empty)" if mesh.is_empty else ""))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    cfg.update("evaluation", {"n_points": args.n_points, "workers": args.workers})
    e = cfg.get("evaluation")
    gen_dir = Path(args.generated)
    if not gen_dir.is_dir():
        raise UsageError(f"generated directory not found: {gen_dir}")
    meshes = sorted(gen_dir.glob("*.obj"))
    if args.use_meshes:
        generated = meshes
    else:
        generated = dataset.read_records(gen_dir / RECORDS) if (gen_dir / RECORDS).exists() else meshes
    if not generated:
        raise UsageError(f"no generated records or meshes in {gen_dir}")
    manifest = _load_manifest(args.dataset)
    if args.split not in dataset.SPLITS:
        raise UsageError(f"unknown split {args.split!r}; choose from {', '.join(dataset.SPLITS)}")
    reference = manifest.split(args.split)
    if args.category:
        reference = [r for r in reference if r.category == args.category]
    if not reference:
        raise UsageError(f"split {args.split} has no reference records")
    report = metrics.evaluate_generation(generated, reference, e["n_points"], cfg.seed, e["workers"])
    text = report.to_text()
    out = Path(args.out) if args.out else gen_dir / REPORT
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0 if report.ok else 1


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partgen", description="Part-based cuboid shape generation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True, force=True, seed=True):
        sp.add_argument("--config", help="INI config file; flags override it")
        if seed:
            sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", help=f"output directory (default under ${config.OUTPUT_ROOT_ENV})")
        if force:
            sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    def categories(value):
        cats = [c.strip() for c in value.split(",") if c.strip()]
        bad = [c for c in cats if c not in dataset.CATEGORIES]
        if bad or not cats:
            raise argparse.ArgumentTypeError(f"unknown category {bad[0] if bad else value!r}; "
                                             f"choose from {', '.join(dataset.CATEGORIES)}")
        return ",".join(cats)

    sp = sub.add_parser("make-dataset", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("--categories", type=categories)
    for s in dataset.SPLITS:
        sp.add_argument(f"--{s}", type=int, help=f"records per category in the {s} split")
    sp.add_argument("--n-clusters", type=int)
    sp.set_defaults(func=cmd_make_dataset)

    def train_flags(sp, kind):
        common(sp)
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--categories", type=categories)
        sp.add_argument("--preset", choices=sorted(config.PRESETS[kind]))
        sp.add_argument("--steps", type=int, help="total step count (a resumed run continues up to it)")
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--resume", help="continue from a *-last.pt checkpoint")

    sp = sub.add_parser("train-generator", help="train the part generator")
    train_flags(sp, "generator")
    sp.add_argument("--ss-ratio", type=float, help="fraction of steps using scheduled sampling")
    sp.add_argument("--lr-schedule", choices=("constant", "cosine"))
    sp.add_argument("--condition", action="store_const", const=True,
                    help="condition on record descriptions with the hashed bag-of-words embedder")
    sp.set_defaults(func=cmd_train_generator)

    sp = sub.add_parser("train-blender", help="train the occupancy blending network")
    train_flags(sp, "blender")
    sp.add_argument("--n-points", type=int)
    sp.set_defaults(func=cmd_train_blender)

    def sample_flags(sp):
        common(sp)
        sp.add_argument("--checkpoint", required=True, help="generator checkpoint")
        sp.add_argument("--count", type=int)
        sp.add_argument("--max-parts", type=int)
        sp.add_argument("--temperature", type=float)
        sp.add_argument("--condition-text")
        sp.add_argument("--mesh", action="store_true", help="also write OBJ meshes (needs --blender)")
        sp.add_argument("--blender", help="blender checkpoint for --mesh")
        sp.add_argument("--resolution", type=int)

    sp = sub.add_parser("generate", help="sample new objects inside a bounding box")
    sample_flags(sp)
    sp.add_argument("--bbox", help="SX,SY,SZ of a floor-standing box")
    sp.add_argument("--bbox-from", help="record id, or a split name to cycle through its records")
    sp.add_argument("--dataset", help="dataset for --bbox-from")
    sp.add_argument("--category", choices=dataset.CATEGORIES)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("complete", help="complete a partial object")
    sample_flags(sp)
    sp.add_argument("--partial", required=True, help="record file holding the partial object")
    sp.add_argument("--record-id")
    sp.add_argument("--drop", type=int, nargs="*", help="part indices to remove before completing")
    sp.set_defaults(func=cmd_complete)

    sp = sub.add_parser("extract-mesh", help="mesh records with a blending network")
    common(sp, seed=False)
    sp.add_argument("--blender", required=True)
    sp.add_argument("--records", required=True)
    sp.add_argument("--record-id")
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--grid", action="store_true", help="also dump the probability grid")
    sp.set_defaults(func=cmd_extract_mesh)

    sp = sub.add_parser("evaluate", help="MMD-CD and COV-CD against a reference split")
    common(sp, force=False)
    sp.add_argument("--generated", required=True, help="directory with records.jsonl or *.obj")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--category", choices=dataset.CATEGORIES)
    sp.add_argument("--use-meshes", action="store_true", help="score *.obj meshes instead of part records")
    sp.add_argument("--n-points", type=int)
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, config.ConfigError) as e:
        parser.error(str(e))  # exits with status 2
    except (Refused, CheckpointError, dataset.DatasetFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
