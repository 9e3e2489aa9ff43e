"""Command-line entry point: ``ptsam <command> ...``.

Exit codes: 0 success, 1 configuration or usage error, 2 numerical abort,
3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import datagen, runconfig, traineng
from .datagen import DataError, GenSpec
from .evalrep import experiments
from .evalrep.metrics import evaluate, predict_mask, write_triptych
from .numcore import ConfigurationError, NumericalError, UsageError, nt1
from .peft import METHOD_LABELS, AdapterConfig, Mode, apply_adapter, count_trainable, load_adapter, parse_mode
from .samarch import build_model, checkpoint
from .samarch.checkpoint import CheckpointError

log = logging.getLogger("ptsam")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; that code is reserved for numerical aborts
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _prepare_out(out: Path, force: bool, config_text: str | None = None) -> Path:
    """Refuse to write into a non-empty directory unless forced, or unless it
    holds a run of the very same configuration (resume)."""
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        echo = out / "config.ini"
        if config_text is None or not echo.exists() or echo.read_text() != config_text:
            raise UsageError(f"output directory {out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(path: str | None) -> runconfig.RunConfig:
    return runconfig.load(path) if path else runconfig.RunConfig()


def _resolve_base(rc: runconfig.RunConfig) -> str | None:
    if rc.base == "none":
        return None
    if rc.base == "pretrained":
        return str(traineng.ensure_base(rc.model, rc.base_cache))
    manifest = Path(rc.base + checkpoint.MANIFEST_SUFFIX)
    if not manifest.exists():
        raise FileNotFoundError(f"base checkpoint {manifest} not found")
    return rc.base


def _model_with_base(rc: runconfig.RunConfig):
    model = build_model(rc.model, seed=0)
    base = _resolve_base(rc)
    if base is not None:
        checkpoint.load(model.reg, base, strict=False)
    return model


def _corpus(rc: runconfig.RunConfig) -> list[datagen.Sample]:
    if rc.data.corpus:
        samples = datagen.read_corpus(rc.data.corpus)
    else:
        samples = datagen.generate(rc.data.gen, rc.data.corpus_seed)
    if not samples:
        raise DataError("corpus is empty")
    return samples


def _split(rc: runconfig.RunConfig, samples):
    return datagen.split(samples, rc.data.train_n, seed=rc.data.split_seed, corpus_seed=rc.data.corpus_seed,
                         test_frac=rc.data.test_frac)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    spec = GenSpec.from_text(Path(args.spec).read_text()) if args.spec else GenSpec()
    out = _prepare_out(Path(args.out), args.force)
    samples = datagen.generate(spec, args.seed)
    datagen.write_corpus(samples, out, spec)
    objects = [ndimage.label(s.mask)[1] for s in samples]
    fg = [float(s.mask.mean()) for s in samples]
    print(f"wrote {len(samples)} images of {spec.size}x{spec.size} to {out}")
    if samples:
        print(f"objects per image: mean {np.mean(objects):.2f}, min {min(objects)}, max {max(objects)}")
        print(f"foreground fraction: mean {np.mean(fg):.3f}")
    print(f"shift: {','.join(spec.shift) or 'none'}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _load_config(args.config)
    if args.seed is not None:
        rc.train = dataclasses.replace(rc.train, seed=args.seed)
    adapter = rc.require_adapter()
    text = rc.to_ini()
    if args.print_config:
        sys.stdout.write(text)
        return EXIT_OK
    if not args.out:
        raise UsageError("--out is required unless --print-config is given")
    out = _prepare_out(Path(args.out), args.force)
    (out / "config.ini").write_text(text)
    samples = _corpus(rc)
    data = _split(rc, samples)
    (out / "split.txt").write_text(
        "".join(f"train {i}\n" for i in data.train_ids()) + "".join(f"test {i}\n" for i in data.test_ids())
    )
    model = _model_with_base(rc)
    record = traineng.train(model, adapter, data, rc.train, metrics_path=out / "metrics.jsonl",
                            checkpoint_path=out / "adapter")
    if args.full_checkpoint:
        checkpoint.save(model.reg, out / "full", meta={"kind": "full", "adapter": adapter.to_text()})
    (out / "record.json").write_text(json.dumps(record.summary(), indent=2, sort_keys=True) + "\n")
    test = "n/a" if record.final_test_dice is None else f"{record.final_test_dice:.4f}"
    print(f"{adapter.mode.value}: {count_trainable(model)} trainable, train dice {record.final_train_dice:.4f}, "
          f"test dice {test}")
    return EXIT_OK


def _model_from_checkpoint(ckpt: str, rc: runconfig.RunConfig):
    _, meta = checkpoint.read_manifest(ckpt)
    kind = meta.get("kind")
    if kind == "adapter":
        model = _model_with_base(rc)
        load_adapter(model, ckpt, seed=rc.train.seed)
        return model
    if kind == "full":
        model = build_model(rc.model, seed=0)
        if meta.get("adapter"):
            apply_adapter(model, AdapterConfig.from_text(meta["adapter"]), seed=rc.train.seed)
        checkpoint.load(model.reg, ckpt)
        return model
    raise CheckpointError(f"{ckpt}: unknown checkpoint kind {kind!r}")


def cmd_eval(args) -> int:
    ckpt = args.checkpoint.removesuffix(checkpoint.MANIFEST_SUFFIX)
    cfg_path = args.config
    if cfg_path is None and (Path(ckpt).parent / "config.ini").exists():
        cfg_path = str(Path(ckpt).parent / "config.ini")
    rc = _load_config(cfg_path)
    samples = datagen.read_corpus(args.data)
    if not samples:
        raise DataError(f"{args.data}: manifest lists no samples")
    out = _prepare_out(Path(args.out), args.force)
    model = _model_from_checkpoint(ckpt, rc)
    thr = rc.eval.threshold
    result = evaluate(model, samples, threshold=thr)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("id", "dice"))
    for sid, d in zip(result.ids, result.per_image):
        w.writerow((sid, f"{d:.6f}"))
    w.writerow(("mean", f"{result.mean:.6f}"))
    w.writerow(("std", f"{result.std:.6f}"))
    (out / "dice.csv").write_text(buf.getvalue())
    if args.triptychs:
        (out / "errors").mkdir(exist_ok=True)
        for s in samples:
            write_triptych(out / "errors" / f"{s.id}.pgm", s.image[0], s.mask, predict_mask(model, s.image, thr))
    print(f"{len(samples)} images: dice {result.mean:.4f} +- {result.std:.4f}")
    return EXIT_OK


def _matrix_config(rc: runconfig.RunConfig, base: str | None) -> experiments.MatrixConfig:
    return experiments.MatrixConfig(
        methods=rc.method_configs(),
        train_sizes=rc.eval.train_sizes,
        seeds=rc.eval.seeds,
        corpus=rc.data.gen,
        corpus_seed=rc.data.corpus_seed,
        dataset=rc.eval.dataset,
        train=rc.train,
        model=rc.model,
        base_checkpoint=base,
    )


def cmd_matrix(args) -> int:
    rc = _load_config(args.config)
    text = rc.to_ini()
    out = _prepare_out(Path(args.out), args.force, config_text=text)
    (out / "config.ini").write_text(text)
    samples = _corpus(rc)
    cfg = _matrix_config(rc, _resolve_base(rc))
    results = experiments.run_matrix(cfg, out, jobs=args.jobs or rc.eval.jobs, corpus=samples)
    sys.stdout.write((out / "table.txt").read_text())
    failed = sum(r.error is not None for r in results)
    if failed:
        print(f"{failed} of {len(results)} cells failed; see table.txt")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = _load_config(args.config)
    text = rc.to_ini()
    out = _prepare_out(Path(args.out), args.force, config_text=text)
    (out / "config.ini").write_text(text)
    samples = _corpus(rc)
    base = _resolve_base(rc)
    params = ("n_md", "n_ie") if rc.eval.ablate == "both" else (rc.eval.ablate,)
    for p in params:
        csv_text = experiments.ablation_sweep(
            p, out, values=rc.eval.ablate_values, seeds=rc.eval.seeds, train_n=rc.eval.ablate_train_n,
            corpus=rc.data.gen, corpus_seed=rc.data.corpus_seed, train=rc.train, model=rc.model,
            base_checkpoint=base, jobs=args.jobs or rc.eval.jobs, samples=samples,
        )
        print(f"# {p}")
        for row in csv.DictReader(io.StringIO(csv_text)):
            if row["kind"] == "aggregate":
                print(f"{p}={row['value']:>3}  dice {row['dice']} +- {row['std']}")
    return EXIT_OK


def cmd_count(args) -> int:
    rc = _load_config(args.config)
    model_cfg = rc.model
    if args.preset:
        from .samarch import preset

        model_cfg = preset(args.preset)
    base = rc.adapter or AdapterConfig()
    if args.lora_rank is not None:
        base = dataclasses.replace(base, lora_rank=args.lora_rank)
    if args.mode:
        modes = [parse_mode(args.mode)]
    elif rc.adapter is not None:
        modes = [rc.adapter.mode]
    else:
        modes = list(Mode)
    total = build_model(model_cfg, materialize=False).reg.count(trainable_only=False)
    print(f"base parameters: {total}")
    for mode in modes:
        m = build_model(model_cfg, materialize=False)
        apply_adapter(m, dataclasses.replace(base, mode=mode))
        print(f"{mode.value:<16} {METHOD_LABELS[mode]:<12} {count_trainable(m)}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    rc = _load_config(args.config)
    out = _prepare_out(Path(args.out), args.force)
    recipe = traineng.BaseRecipe()
    if args.epochs is not None:
        recipe = dataclasses.replace(recipe, epochs=args.epochs)
    model = traineng.pretrain_base(rc.model, recipe)
    checkpoint.save_full(model, out / "base")
    print(f"wrote {out / 'base'}{checkpoint.MANIFEST_SUFFIX}; set [model] base = {out / 'base'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ptsam", description="Prompt-tuned segmentation models at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--spec", help="key=value generator spec file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one adapter")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--seed", type=int, help="override [train] seed")
    t.add_argument("--full-checkpoint", action="store_true", help="also write base plus adapter weights")
    t.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="defaults to config.ini next to the checkpoint")
    e.add_argument("--triptychs", action="store_true", help="write input/truth/error-map PGMs")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    for name, fn, text in (("matrix", cmd_matrix, "run the few-shot experiment matrix"),
                           ("ablate", cmd_ablate, "sweep decoder/encoder prompt counts")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        s.add_argument("--jobs", type=int, help="parallel cell workers (overrides [eval] jobs)")
        s.add_argument("--force", action="store_true")
        s.set_defaults(func=fn)

    c = sub.add_parser("count", help="print trainable-parameter counts")
    c.add_argument("--config")
    c.add_argument("--preset")
    c.add_argument("--mode")
    c.add_argument("--lora-rank", type=int)
    c.set_defaults(func=cmd_count)

    b = sub.add_parser("pretrain", help="produce base weights on a clean synthetic corpus")
    b.add_argument("--config")
    b.add_argument("--out", required=True)
    b.add_argument("--epochs", type=int)
    b.add_argument("--force", action="store_true")
    b.set_defaults(func=cmd_pretrain)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (traineng.TrainingAbort, NumericalError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (datagen.FormatError, nt1.FormatError, CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, UsageError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
