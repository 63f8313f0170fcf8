"""Command-line entry point: ``fragnet synth | train | eval | heatmap | flops``.

Settings resolve as: built-in defaults < ``--config FILE`` (key=value lines,
keys spelled like the long flags without dashes) < command-line flags.
Exit codes: 0 ok, 2 validation error, 3 runtime/numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence


from . import checkpoint as ckpt_io
from .arch import UnsupportedOperation, flops_breakdown
from .config import FRAGMENT_SIZES, ConfigError, NetworkConfig, fragnet, wordimgnet
from .data import (
    ManifestError,
    check_page_disjoint,
    generate_synthetic,
    load_manifest,
    load_wordset,
    read_image,
    resize_pad,
)
from .evaluate import (
    build_writer_models,
    heatmap,
    identify_pages,
    identify_words,
    nn_identify,
    predict,
    retrieval_eval,
    write_heatmap,
)
from .optim import PAPER_SCHEDULE, TrainPlan, train
from .tensor import NumericError, set_precision

log = logging.getLogger("fragnet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "FRAGNET_OUT"


class ValidationError(ValueError):
    pass


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    """``"0:1e-4,10:5e-5"`` -> ((0, 1e-4), (10, 5e-5))."""
    try:
        pairs = [p.split(":") for p in text.split(",") if p.strip()]
        return tuple((int(e), float(r)) for e, r in pairs)
    except ValueError:
        raise ValidationError(f"bad --lr-schedule {text!r}; expected epoch:rate,...") from None


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "runs")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fragnet", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic multi-writer corpus")
    s.add_argument("--writers", type=int, default=10)
    s.add_argument("--train-words", type=int, default=40)
    s.add_argument("--test-words", type=int, default=10)
    s.add_argument("--words-per-page", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)

    def arch_flags(sp, writers_default=None):
        sp.add_argument("--arch", choices=["fragnet", "wordimgnet"], default="fragnet")
        sp.add_argument("--q", type=int, default=64, help="fragment size (16, 32 or 64)")
        sp.add_argument("--writers", type=int, default=writers_default)

    t = sub.add_parser("train", help="train FragNet-q or WordImgNet")
    arch_flags(t)
    t.add_argument("--train-manifest", required=False)
    t.add_argument("--test-manifest", help="optional validation manifest (Top-1 per epoch)")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=10)
    t.add_argument("--lr-schedule", default=",".join(f"{e}:{r:g}" for e, r in PAPER_SCHEDULE))
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--precision", choices=["float32", "float64"], default="float32")
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--out", default=None)

    e = sub.add_parser("eval", help="word / page / nn / retrieval evaluation")
    e.add_argument("--checkpoint", required=False)
    e.add_argument("--test-manifest", required=False)
    e.add_argument("--train-manifest", help="writer models for --mode nn")
    e.add_argument("--mode", choices=["word", "page", "nn", "retrieval"], default="word")
    e.add_argument("--arch", choices=["fragnet", "wordimgnet"], default=None,
                   help="fail unless the checkpoint has this architecture")
    e.add_argument("--q", type=int, default=None, help="fail unless the checkpoint has this fragment size")
    e.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    e.add_argument("--per-writer", action="store_true")
    e.add_argument("--by-word-length", action="store_true")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--out", default=None, help="report path stem (.txt and .metrics are written)")

    h = sub.add_parser("heatmap", help="fragment evidence heatmap of one word image")
    h.add_argument("--checkpoint", required=False)
    h.add_argument("--image", required=False)
    h.add_argument("--class", dest="target", type=int, default=None)
    h.add_argument("--out", default=None, help="PNG path")

    f = sub.add_parser("flops", help="per-layer FLOPs table")
    arch_flags(f, writers_default=10)
    return p


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config_file(args.config)
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file {args.config}: {exc}") from exc
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"{args.config}: unknown keys {sorted(unknown)}")
        typed = {}
        for a in sub._actions:
            if a.dest in values:
                raw = values[a.dest]
                if a.const is True:  # store_true
                    typed[a.dest] = raw.lower() in ("1", "true", "yes", "on")
                else:
                    typed[a.dest] = a.type(raw) if a.type else raw
        sub.set_defaults(**typed)
        args = parser.parse_args(argv)
    return args


def _require(args: argparse.Namespace, *names: str) -> None:
    for n in names:
        if getattr(args, n, None) is None:
            raise ValidationError(f"--{n.replace('_', '-')} is required")


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _network_config(args: argparse.Namespace, writers: int) -> NetworkConfig:
    if args.arch == "fragnet":
        if args.q not in FRAGMENT_SIZES:
            raise ValidationError(f"--q must be one of {FRAGMENT_SIZES}, got {args.q}")
        return fragnet(args.q, writers)
    return wordimgnet(writers)


def _set_threads(n: int) -> None:
    if n < 1:
        raise ValidationError("--threads must be >= 1")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl unavailable; --threads ignored")
        return
    threadpool_limits(n)


def cmd_synth(args: argparse.Namespace) -> int:
    if args.writers < 2:
        raise ValidationError(f"--writers must be >= 2, got {args.writers}")
    if args.train_words < 1 or args.test_words < 1 or args.words_per_page < 1:
        raise ValidationError("word counts must be positive")
    out = Path(args.out or _default_out())
    train_m, test_m = generate_synthetic(out, args.writers, args.train_words, args.test_words,
                                         args.seed, args.words_per_page)
    print(out / "train.tsv")
    print(out / "test.tsv")
    log.info("%d train and %d test images under %s", len(train_m), len(test_m), out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    _require(args, "train_manifest")
    _set_threads(args.threads)
    set_precision(args.precision)
    train_m = load_manifest(_require_file(args.train_manifest, "training manifest"), "train")
    if not len(train_m):
        raise ValidationError("training manifest is empty")
    test_m = None
    if args.test_manifest:
        test_m = load_manifest(_require_file(args.test_manifest, "test manifest"), "test")
        check_page_disjoint(train_m, test_m)
    top_label = max(train_m.writer_ids)
    writers = args.writers if args.writers is not None else top_label + 1
    if top_label >= writers:
        raise ValidationError(f"manifest has writer id {top_label} but --writers is {writers}")
    config = _network_config(args, writers)
    schedule = parse_schedule(args.lr_schedule)
    try:
        plan = TrainPlan(args.epochs, args.batch_size, schedule, args.seed, args.checkpoint_every)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    out = Path(args.out or _default_out())
    out.mkdir(parents=True, exist_ok=True)
    train_set = load_wordset(train_m)
    validate = None
    if test_m is not None:
        test_set = load_wordset(test_m)

        def validate_top1(params):
            probs, _ = predict(params, config, test_set.images)
            return identify_words(probs, test_set.labels).top1

        validate = validate_top1

    def on_checkpoint(params, state, epoch, step):
        ck = ckpt_io.Checkpoint(config, params, state, epoch, step, args.seed)
        ckpt_io.save_checkpoint(out / f"epoch{epoch + 1:03d}.ckpt", ck)
        ckpt_io.save_checkpoint(out / "final.ckpt", ck)

    with open(out / "train.log", "w", encoding="utf-8") as fh:
        result = train(config, plan, train_set.images, train_set.labels, validate=validate,
                       log_file=fh, on_checkpoint=on_checkpoint, max_steps=args.max_steps)
    print(out / "final.ckpt")
    log.info("trained %s for %d steps in %.1fs", config.label, result.state.t, result.seconds)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _require(args, "checkpoint", "test_manifest")
    _set_threads(args.threads)
    ck = ckpt_io.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    config = ck.config
    if args.arch is not None and args.arch != config.kind:
        raise ConfigError(f"checkpoint holds {config.label}, not {args.arch}")
    if args.q is not None and (not config.is_fragnet or args.q != config.fragment_size):
        raise ConfigError(f"checkpoint holds {config.label}, not fragment size {args.q}")
    test_m = load_manifest(_require_file(args.test_manifest, "test manifest"), "test")
    if test_m.writer_ids and max(test_m.writer_ids) >= config.writer_count and args.mode in ("word", "page"):
        raise ConfigError(f"test writer id {max(test_m.writer_ids)} is outside the checkpoint's "
                          f"{config.writer_count} writers")
    test_set = load_wordset(test_m)
    probs, _ = predict(ck.params, config, test_set.images)
    texts = test_set.texts if args.by_word_length else None
    if args.mode == "word":
        report = identify_words(probs, test_set.labels, texts)
    elif args.mode == "page":
        report = identify_pages(probs, test_set.labels, test_set.page_ids)
    elif args.mode == "nn":
        _require(args, "train_manifest")
        train_m = load_manifest(_require_file(args.train_manifest, "training manifest"), "train")
        check_page_disjoint(train_m, test_m)
        train_set = load_wordset(train_m)
        train_probs, _ = predict(ck.params, config, train_set.images)
        models = build_writer_models(train_probs, train_set.labels)
        report = nn_identify(probs, test_set.labels, models, args.metric, texts)
    else:
        report = retrieval_eval(probs, test_set.labels, args.metric)
    if not args.per_writer:
        report.per_writer = {}
    print(report.table())
    if args.out:
        report.write(args.out)
    return EXIT_OK


def cmd_heatmap(args: argparse.Namespace) -> int:
    _require(args, "checkpoint", "image")
    ck = ckpt_io.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    if not ck.config.is_fragnet:
        raise UnsupportedOperation("heatmaps need a FragNet checkpoint (WordImgNet has no fragments)")
    if args.target is not None and not 0 <= args.target < ck.config.writer_count:
        raise ValidationError(f"--class must lie in [0, {ck.config.writer_count}), got {args.target}")
    img = resize_pad(read_image(_require_file(args.image, "image"))).data[0]
    hm = heatmap(ck.params, ck.config, img, args.target)
    out = Path(args.out or Path(_default_out()) / (Path(args.image).stem + "_heatmap.png"))
    png, spec = write_heatmap(hm, out)
    b = hm.best
    print(f"class {hm.target} evidence {hm.word_evidence:.6f} best fragment x={b.x} y={b.y} h={b.h} w={b.w}")
    print(png)
    print(spec)
    return EXIT_OK


def cmd_flops(args: argparse.Namespace) -> int:
    config = _network_config(args, args.writers)
    rows = flops_breakdown(config)
    print(f"{config.label}")
    print(f"{'layer':<26}{'c_in':>6}{'h':>5}{'w':>5}{'k':>5}{'c_out':>7}{'x':>5}{'FLOPs':>16}")
    for r in rows:
        print(f"{r.name:<26}{r.c_in:>6}{r.h:>5}{r.w:>5}{f'{r.k_h}x{r.k_w}':>5}{r.c_out:>7}{r.repeats:>5}{r.flops:>16,d}")
    total = sum(r.flops for r in rows)
    print(f"{'total':<59}{total:>16,d}")
    print(f"total_gflops {total / 1e9:.4f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "heatmap": cmd_heatmap, "flops": cmd_flops}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_VALIDATION if exc.code else EXIT_OK
    except ValidationError as exc:
        print(f"fragnet: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"fragnet: error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, ConfigError, ManifestError, UnsupportedOperation,
            ckpt_io.CheckpointError) as exc:
        print(f"fragnet: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"fragnet: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, RuntimeError, ValueError) as exc:
        print(f"fragnet: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
