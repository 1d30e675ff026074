"""``storysync`` command line: gen-data, train, sample, eval, inspect-masks.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

Prompt files hold one frame per line. Character descriptions sit in square
brackets, e.g. ``[red circle hero] jumping in forest``. Blank lines separate
stories.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from .core.checkpoint import CheckpointError, file_digest
from .core.config import ModelConfig, load_config

DEFAULT_SEED = 1234
log = logging.getLogger("storysync")


class UsageError(Exception):
    """Bad flags, paths or configuration: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- helpers --------------------------------------------------------------------------

def _config(args) -> ModelConfig:
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else ModelConfig()
        overrides = {}
        for item in getattr(args, "set", None) or []:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = yaml.safe_load(v)
        for flag, field in (("seed", "seed"), ("alpha", "mask_weight"), ("reference_strategy", "reference_strategy"),
                            ("frames", "num_frames"), ("lr", None)):
            val = getattr(args, flag, None)
            if val is None:
                continue
            if flag == "lr":
                field = f"lr_{args.stage}"
            overrides[field] = val
        if getattr(args, "no_amsa", False):
            overrides["amsa"] = False
        return cfg.replace(**overrides) if overrides else cfg
    except (TypeError, ValueError, FileNotFoundError, yaml.YAMLError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def read_prompt_file(path) -> list[list[str]]:
    """Stories as lists of frame lines; blank lines separate stories."""
    p = Path(path)
    if not p.exists():
        raise UsageError(f"prompts file not found: {p}")
    stories, cur = [], []
    for line in p.read_text().splitlines():
        if line.strip().startswith("#"):
            continue
        if line.strip():
            cur.append(line.strip())
        elif cur:
            stories.append(cur)
            cur = []
    if cur:
        stories.append(cur)
    if not stories:
        raise UsageError(f"{p} contains no prompts")
    return stories


def load_reference_dir(path, ref_size: int):
    """An ID bucket from a story-group directory, or from the sorted PNGs in a folder."""
    from PIL import Image

    from .data.records import load_story_group, make_id_bucket, to_tensor_image
    from .injector import IDBucket

    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"reference directory not found: {d}")
    if (d / "manifest.json").exists():
        return make_id_bucket(load_story_group(d), ref_size)
    files = sorted(d.glob("*.png"))
    if not files:
        raise UsageError(f"no PNG reference images in {d}")
    imgs = [np.asarray(Image.open(f).convert("RGB").resize((ref_size, ref_size), Image.BILINEAR)) for f in files]
    return IDBucket(d.name, to_tensor_image(np.stack(imgs)), tuple(range(len(imgs))), "real")


def _load_model(path):
    from .diffusion.training import load_model

    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    try:
        return load_model(p)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import generate_dataset

    if args.groups < 1 or args.frames < 1:
        raise UsageError("--groups and --frames must be positive")
    out = _prepare_out(Path(args.out), args.force)
    groups = generate_dataset(out, args.groups, args.frames, args.seed, args.size)
    images = sum(g.num_frames for g in groups)
    print(f"wrote {len(groups)} groups, {images} images, {images} masks, "
          f"{len({g.identity_id for g in groups})} identities to {out}")
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset, validate_group
    from .diffusion.training import StageError, run_training

    cfg = _config(args)
    init = args.init_checkpoint
    if args.stage == "injector":
        if not args.sync_checkpoint and not args.resume:
            raise UsageError("the injector stage requires --sync-checkpoint (a trained synchronizer checkpoint)")
        init = args.sync_checkpoint
    elif args.sync_checkpoint:
        raise UsageError("--sync-checkpoint only applies to --stage injector")
    for p in (init, args.resume):
        if p and not Path(p).exists():
            raise UsageError(f"checkpoint not found: {p}")
    data = Path(args.data)
    if not (data / "groups").is_dir():
        raise UsageError(f"no dataset at {data} (expected {data}/groups)")
    groups = load_dataset(data)
    bad = [r for r in (validate_group(g, synthetic_frames=cfg.num_frames) for g in groups) if not r.ok]
    if bad:
        for r in bad:
            print(str(r), file=sys.stderr)
        raise UsageError(f"{len(bad)} invalid story groups")
    out = Path(args.out)
    if args.resume is None:
        out = _prepare_out(out, args.force)
    try:
        ckpt = run_training(cfg, groups, args.stage, out, args.steps, init_checkpoint=init,
                            resume_checkpoint=args.resume, checkpoint_every=args.checkpoint_every,
                            mask_every=args.mask_every)
    except (StageError, CheckpointError) as exc:
        raise UsageError(str(exc)) from exc
    print(f"{args.stage}: {ckpt.step} steps, final {json.dumps(ckpt.meta.get('losses', {}), sort_keys=True)}")
    print(f"checkpoint: {out / 'final.ckpt'}")
    return 0


def cmd_sample(args) -> int:
    from PIL import Image

    from .core.types import StoryPrompt
    from .data.records import to_uint8_image
    from .diffusion.sampler import MissingInjectorError, ddim_sample

    model = _load_model(args.checkpoint)
    stories = read_prompt_file(args.prompts)
    try:
        prompts = [StoryPrompt.from_lines(s) for s in stories]
    except ValueError as exc:
        raise UsageError(f"bad prompts file: {exc}") from exc
    if args.reference and model.injector is None:
        raise UsageError("--reference needs a checkpoint with the identity injector (stage injector)")
    ref = load_reference_dir(args.reference, model.config.ref_size) if args.reference else None
    out = _prepare_out(Path(args.out), args.force)
    files = []
    for g, prompt in enumerate(prompts):
        bucket = ref
        if ref is not None and len(ref) != prompt.num_frames:
            reps = -(-prompt.num_frames // len(ref))
            bucket = type(ref)(ref.identity_id, ref.images.repeat(reps, 1, 1, 1)[: prompt.num_frames],
                               tuple(range(prompt.num_frames)), ref.provenance)
        try:
            images = ddim_sample(model, prompt, bucket, steps=args.steps, guidance=args.guidance,
                                 seed=args.seed + g, shuffle_seed=args.shuffle_seed)
        except MissingInjectorError as exc:
            raise UsageError(str(exc)) from exc
        for n, arr in enumerate(to_uint8_image(images)):
            p = out / f"story{g}_frame{n}.png"
            Image.fromarray(arr).save(p)
            files.append(p.name)
    cfg = model.config
    sidecar = {
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": file_digest(args.checkpoint),
        "seed": args.seed,
        "steps": cfg.sample_steps if args.steps is None else args.steps,
        "guidance": cfg.guidance_scale if args.guidance is None else args.guidance,
        "reference": str(args.reference) if args.reference else None,
        "shuffle_seed": args.shuffle_seed,
        "prompts": stories,
        "images": files,
    }
    (out / "provenance.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} images to {out}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .eval import METRICS, evaluate_run

    model = _load_model(args.checkpoint)
    metrics = [m.strip() for m in args.metrics.split(",")] if args.metrics else None
    if metrics:
        unknown = set(metrics) - set(METRICS)
        if unknown:
            raise UsageError(f"unknown metrics {sorted(unknown)}; choose from {', '.join(METRICS)}")
    if args.reference and model.injector is None:
        raise UsageError("--reference needs a checkpoint with the identity injector")
    groups = load_dataset(args.data)[: args.groups]
    tags = dict(t.split("=", 1) for t in args.tag or [])
    report = evaluate_run(model, groups, args.run_id, steps=args.steps, guidance=args.guidance, seed=args.seed,
                          use_reference=args.reference, metrics=metrics, tags=tags,
                          config_hash=model.config.hash())
    jp, _ = report.write(args.out)
    print(report.to_text())
    print(f"report: {jp}")
    return 0


def cmd_inspect_masks(args) -> int:
    from PIL import Image

    from .data import collate, load_story_group, validate_group
    from .diffusion.training import probe_maps

    model = _load_model(args.checkpoint)
    if model.synchronizer is None:
        raise UsageError("this checkpoint has no synchronizer, so no character maps are recorded")
    group = load_story_group(args.group)
    report = validate_group(group, synthetic_frames=group.num_frames)
    if not report.ok:
        print(str(report), file=sys.stderr)
        raise UsageError("invalid story group")
    batch = collate([group], model.config.max_text_len)
    maps = probe_maps(model, batch, args.timestep, args.seed)
    out = _prepare_out(Path(args.out), args.force)
    h, w = group.images.shape[1:3]
    count = 0
    for n in range(group.num_frames):
        for c in range(group.num_characters):
            m = maps[n, c].numpy().astype(np.float64)
            m = (m - m.min()) / max(m.max() - m.min(), 1e-12)
            img = Image.fromarray((m * 255).round().astype(np.uint8)).resize((w, h), Image.NEAREST)
            gt = Image.fromarray((group.masks[n, c] * 255).astype(np.uint8))
            side = Image.new("L", (2 * w, h))
            side.paste(img, (0, 0))
            side.paste(gt, (w, 0))
            side.save(out / f"frame{n}_char{c}.png")
            count += 1
    print(f"wrote {count} map/mask pairs to {out}")
    return 0


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="storysync", description="Consistent story generation at toy scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic story-group dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--groups", type=int, default=10)
    g.add_argument("--frames", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=DEFAULT_SEED)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=("backbone", "synchronizer", "injector"))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--alpha", type=float, help="mask loss weight")
    t.add_argument("--no-amsa", action="store_true", help="per-frame self-attention only")
    t.add_argument("--reference-strategy", choices=("srs", "stacked"))
    t.add_argument("--init-checkpoint", help="backbone (or synchronizer) checkpoint to start from")
    t.add_argument("--sync-checkpoint", help="trained synchronizer checkpoint (injector stage)")
    t.add_argument("--resume", help="continue a run of the same stage from this checkpoint")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--mask-every", type=int, default=0)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate stories from a prompts file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompts", required=True)
    s.add_argument("--reference", help="story-group directory or folder of reference PNGs")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--guidance", type=float)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--shuffle-seed", type=int, help="shuffle the reference bucket with this seed")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--run-id", default="run")
    e.add_argument("--metrics", help="comma-separated subset of metrics")
    e.add_argument("--groups", type=int, default=None, help="evaluate only the first K groups")
    e.add_argument("--reference", action="store_true", help="condition on each group's own ID bucket")
    e.add_argument("--tag", action="append", metavar="AXIS=VALUE", help="label for ablation tables")
    e.add_argument("--steps", type=int)
    e.add_argument("--guidance", type=float)
    e.add_argument("--seed", type=int, default=DEFAULT_SEED)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("inspect-masks", help="dump accumulated character maps next to GT masks")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--group", required=True, help="story-group directory")
    m.add_argument("--out", required=True)
    m.add_argument("--timestep", type=int, default=300)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--force", action="store_true")
    m.set_defaults(func=cmd_inspect_masks)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"storysync {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the exit-code contract needs a catch-all
        log.debug("failure", exc_info=True)
        print(f"storysync {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
