"""Command-line harness.

Subcommands cover the full experimental cycle: synthesize a dataset, train
the teacher, train the fusion LM, cache distillation targets and
pseudo-transcriptions, train students under the different strategies,
evaluate checkpoints into a results table, and benchmark the memory/compute
footprint of the distillation variants.

Exit codes: 0 on success, 2 on configuration errors, 3 on numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace

from .corpus import SynthConfig, generate, load_split, load_text, save_dataset
from .errors import ConfigError, NumericError
from .harness import (
    ExperimentConfig,
    TrainSchedule,
    append_result,
    bench_variants,
    build_train_items,
    eval_split,
    fit_memory_exponent,
    generate_targets,
    load_pseudo,
    render_results,
    save_bench,
    save_pseudo,
    train_transducer,
)
from .kd import KD_VARIANTS, KdConfig, load_targets, save_targets
from .lm import load_lm, save_lm, train_lm
from .nnet import ModelConfig, load_checkpoint, save_checkpoint

VARIANT_FLAGS = {"full": "full_lattice", "collapsed": "collapsed", "onebest": "one_best"}


def default_teacher_config(input_dim: int, vocab_size: int, lookahead: int = 6) -> ModelConfig:
    """Large non-streaming teacher: deep recurrence plus a future-frame splice
    wide enough to cover a whole token at its onset."""
    return ModelConfig(input_dim=input_dim, vocab_size=vocab_size, enc_hidden=48, enc_layers=2,
                       lookahead=lookahead, enc_out=32, embed_dim=16, pred_hidden=48, joint_hidden=48)


def default_student_config(input_dim: int, vocab_size: int, streaming: bool, lookahead: int = 6) -> ModelConfig:
    """Small student; the streaming variant drops all future context."""
    return ModelConfig(input_dim=input_dim, vocab_size=vocab_size, enc_hidden=14, enc_layers=1,
                       lookahead=0 if streaming else lookahead, enc_out=14, embed_dim=8,
                       pred_hidden=14, joint_hidden=14, streaming=streaming)


def _load_config_file(path) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _apply_overrides(base, overrides: dict):
    bad = set(overrides) - set(asdict(base))
    if bad:
        raise ConfigError(f"unknown config keys {sorted(bad)}")
    return replace(base, **overrides)


def _data_dims(data_dir) -> tuple[int, int]:
    with open(f"{data_dir}/config.json", "r", encoding="utf-8") as f:
        cfg = json.load(f)
    return cfg["feature_dim"], cfg["vocab_size"]


# ----------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    overrides = _load_config_file(args.config)
    cfg = _apply_overrides(SynthConfig(), overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    ds = generate(cfg)
    save_dataset(ds, args.out)
    sizes = {split: len(utts) for split, utts in ds.splits.items()}
    print(f"wrote dataset to {args.out}: {sizes}")
    return 0


def _schedule_from(args, overrides: dict) -> TrainSchedule:
    sched = _apply_overrides(TrainSchedule(), overrides.get("schedule", {}))
    if args.seed is not None:
        sched = replace(sched, seed=args.seed)
    return sched


def cmd_train_teacher(args) -> int:
    overrides = _load_config_file(args.config)
    d, k = _data_dims(args.data)
    model_cfg = _apply_overrides(default_teacher_config(d, k), overrides.get("model", {}))
    sched = _schedule_from(args, overrides)
    items = build_train_items(args.data, "baseline", None, None, use_unlabelled=False)
    dev = load_split(args.data, "dev")
    model, _ = train_transducer(model_cfg, items, sched, KdConfig(lam=0.0), dev, log=print)
    save_checkpoint(model, args.out)
    print(f"saved teacher checkpoint to {args.out} ({model.num_params} parameters)")
    return 0


def cmd_train_lm(args) -> int:
    _, k = _data_dims(args.data)
    if args.corpus == "text":
        corpus = load_text(args.data)
    else:
        corpus = [u.tokens for u in load_split(args.data, "labelled")]
    lm = train_lm(corpus, order=args.order, alpha=args.alpha, vocab_size=k)
    save_lm(lm, args.out)
    print(f"saved {args.order}-gram LM to {args.out} ({len(corpus)} sequences)")
    return 0


def cmd_make_targets(args) -> int:
    teacher = load_checkpoint(args.teacher)
    lm = load_lm(args.lm) if args.lm else None
    if args.fuse_lm > 0 and lm is None:
        raise ConfigError("--fuse-lm needs --lm")
    targets, pseudo = generate_targets(
        teacher, args.data, include_unlabelled=not args.labelled_only,
        lm=lm, beta=args.fuse_lm, beam=args.beam,
    )
    save_targets(targets, args.out)
    if not args.labelled_only:
        if not args.pseudo_out:
            raise ConfigError("--pseudo-out is required unless --labelled-only is set")
        save_pseudo(pseudo, args.pseudo_out)
    print(f"cached {len(targets)} targets to {args.out}")
    return 0


def cmd_train_student(args) -> int:
    overrides = _load_config_file(args.config)
    d, k = _data_dims(args.data)
    model_cfg = _apply_overrides(default_student_config(d, k, args.streaming), overrides.get("model", {}))
    sched = _schedule_from(args, overrides)
    kd_cfg = KdConfig(lam=args.lam, tau=args.tau, beta_lm=args.beta, variant=VARIANT_FLAGS[args.variant])
    exp = ExperimentConfig(
        data_dir=args.data, model=model_cfg, kd=kd_cfg, schedule=sched,
        strategy=args.strategy, init_checkpoint=args.init, pseudo_nll=not args.no_pseudo_nll,
    )
    if kd_cfg.tau > 0 and not model_cfg.streaming:
        print("warning: tau > 0 on a non-streaming student (ablation mode)", file=sys.stderr)

    targets = load_targets(args.targets) if args.targets else None
    pseudo = load_pseudo(args.pseudo) if args.pseudo else None
    if exp.strategy in ("st1", "st2") and targets is None and kd_cfg.variant == "one_best":
        raise ConfigError("one-best distillation needs --targets")
    items = build_train_items(args.data, exp.strategy, targets, pseudo,
                              use_unlabelled=not args.labelled_only)
    init = load_checkpoint(exp.init_checkpoint) if exp.strategy == "st2" else None
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    dev = load_split(args.data, "dev")
    model, _ = train_transducer(model_cfg, items, sched, kd_cfg, dev, init=init,
                                teacher=teacher, pseudo_nll=exp.pseudo_nll, log=print)
    save_checkpoint(model, args.out)
    print(f"saved student checkpoint to {args.out} ({model.num_params} parameters)")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    lm = load_lm(args.lm) if args.lm else None
    wers = {}
    for split in args.splits:
        res = eval_split(model, args.data, split, beam=args.beam, lm=lm, beta=args.beta)
        wers[split] = res.wer
        print(f"{split}: wer {res.wer:.4f} (S={res.substitutions} D={res.deletions} "
              f"I={res.insertions} N={res.ref_len})")
    if args.results:
        row = append_result(args.results, args.label or args.ckpt,
                            wers.get("dev", float("nan")), wers.get("test", float("nan")),
                            baseline=args.baseline)
        print(f"appended results row: {row['label']}")
    return 0


def _parse_grid(spec: str) -> list[tuple[int, int, int]]:
    grid = []
    for part in spec.split(";"):
        t, u, k = (int(x) for x in part.split(","))
        grid.append((t, u, k))
    return grid


def cmd_bench(args) -> int:
    grid = _parse_grid(args.grid)
    records = bench_variants(grid, seed=args.seed or 0)
    save_bench(records, args.out)
    for variant in ("one_best", "full_lattice", "collapsed"):
        rows = [r for r in records if r.variant == variant]
        worst = max(rows, key=lambda r: r.stored_values)
        print(f"{variant:>12}: up to {worst.stored_values} stored values "
              f"at T={worst.T} U={worst.U} K={worst.K}")
    ks = {r.K for r in records}
    if len(ks) == 1:
        slope = fit_memory_exponent(records, "one_best", lambda r: r.T + r.U)
        print(f"one-best memory exponent vs (T+U): {slope:.3f}")
    return 0


def cmd_report(args) -> int:
    print(render_results(args.results))
    return 0


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdkd", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a labelled/unlabelled dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON file of dataset config overrides")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="train the large non-streaming teacher")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file: {'model': {...}, 'schedule': {...}}")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train_teacher)

    l = sub.add_parser("train-lm", help="train the n-gram fusion LM")
    l.add_argument("--data", required=True)
    l.add_argument("--out", required=True)
    l.add_argument("--order", type=int, default=3)
    l.add_argument("--alpha", type=float, default=0.1)
    l.add_argument("--corpus", choices=("text", "labelled"), default="text",
                   help="text split (the LM corpus) or the labelled transcripts")
    l.set_defaults(func=cmd_train_lm)

    m = sub.add_parser("make-targets", help="cache one-best targets and pseudo-transcriptions")
    m.add_argument("--data", required=True)
    m.add_argument("--teacher", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--pseudo-out")
    m.add_argument("--labelled-only", action="store_true")
    m.add_argument("--fuse-lm", type=float, default=0.0, metavar="BETA")
    m.add_argument("--lm")
    m.add_argument("--beam", type=int, default=4)
    m.set_defaults(func=cmd_make_targets)

    s = sub.add_parser("train-student", help="train a student under a KD strategy")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--targets")
    s.add_argument("--pseudo")
    s.add_argument("--teacher", help="teacher checkpoint (full/collapsed variants)")
    s.add_argument("--init", help="init checkpoint (st2)")
    s.add_argument("--strategy", choices=("baseline", "pseudo", "st1", "st2"), default="baseline")
    s.add_argument("--lambda", dest="lam", type=float, default=0.0)
    s.add_argument("--tau", type=int, default=0)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--variant", choices=sorted(VARIANT_FLAGS), default="onebest")
    s.add_argument("--streaming", action="store_true")
    s.add_argument("--labelled-only", action="store_true")
    s.add_argument("--no-pseudo-nll", action="store_true",
                   help="drop the transducer loss on pseudo-transcribed utterances")
    s.add_argument("--config", help="JSON file: {'model': {...}, 'schedule': {...}}")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_student)

    e = sub.add_parser("eval", help="decode and score a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--splits", nargs="+", default=["dev", "test"])
    e.add_argument("--beam", type=int, default=0)
    e.add_argument("--lm")
    e.add_argument("--beta", type=float, default=0.0)
    e.add_argument("--results", help="CSV results table to append to")
    e.add_argument("--label")
    e.add_argument("--baseline", default="", help="results row to compute WERR against")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="measure distillation memory/compute scaling")
    b.add_argument("--out", required=True)
    b.add_argument("--grid", default="20,5,16;40,10,16;80,20,16;160,40,16")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="render the results table")
    r.add_argument("--results", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
