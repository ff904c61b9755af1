"""Command line entry point: ``calcheads <command> [options]``.

Exit codes: 0 success, 1 usage, 2 data or config problem, 3 numeric failure
(including a reproduce suite whose criteria did not all pass).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path


from . import __version__
from .corpus import BASE_FAMILIES, FAMILIES, OPS, DatasetSpec, Vocabulary, build_dataset, load_dataset
from .model import ModelConfig, ModelState, NodeId, load_checkpoint, save_checkpoint
from .numerics import NumericError
from .patching import EffectMap, KeySelection, knockout_curve, path_patch_sweep, select_key
from .probe import attention_profile, mlp_generation, mlp_reception, token_trajectory
from .report import atomic_write, effect_heatmap, svg_lines, write_manifest
from .trainer import (
    TrainConfig,
    TuneMask,
    correct_pairs,
    full_sft,
    parameter_audit,
    precise_sft,
    pretrain,
)

OUT_ROOT_ENV = "CALCHEADS_OUT"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _out_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV)
    if not root:
        raise UsageError(f"--out is required when {OUT_ROOT_ENV} is not set")
    return Path(root) / command


def _run_config(args) -> dict:
    # the output location is not part of what produced the artifacts
    return {k: v for k, v in vars(args).items() if k not in ("func", "out")}


def _families(text: str) -> tuple[str, ...]:
    if text == "all":
        return FAMILIES
    if text == "base":
        return BASE_FAMILIES
    return tuple(_csv_list(text))


def _pairs(args, which: str = "validation"):
    ds = load_dataset(args.data)
    split = getattr(args, "split", None) or which
    pairs = ds.split(split) if split in ds.splits else list(ds.pairs)
    if getattr(args, "ops", None):
        pairs = [p for p in pairs if p.op in _csv_list(args.ops)]
    if getattr(args, "family", None):
        pairs = [p for p in pairs if p.family == args.family]
    if not pairs:
        raise ValueError("no prompt pairs left after filtering")
    return ds, pairs


def _train_config(args) -> TrainConfig:
    d = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    for flag in ("lr", "steps", "batch_size", "seed", "optimizer", "eval_every"):
        v = getattr(args, flag, None)
        if v is not None:
            d[flag] = v
    return TrainConfig(**d)


# commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if not args.out:
        raise UsageError("gen-data needs --out")
    lo, hi = (int(x) for x in args.range.split(","))
    spec = DatasetSpec(ops=tuple(_csv_list(args.ops)), families=_families(args.families), count=args.count,
                       operand_range=(lo, hi), single_token_answer=args.single_token_answer, seed=args.seed,
                       val_fraction=args.val_fraction,
                       holdout_families=tuple(_csv_list(args.holdout_families or "")))
    ds = build_dataset(spec)
    ds.save(args.out)
    print(f"wrote {len(ds.pairs)} pairs to {args.out}")
    for split, idx in sorted(ds.splits.items()):
        print(f"  {split}: {len(idx)}")
    for op in spec.ops:
        print(f"  {op}: {sum(p.op == op for p in ds.pairs)}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args, "train")
    vocab = Vocabulary.default()
    ds = load_dataset(args.data)
    mcfg = ModelConfig(n_layers=args.layers, n_heads=args.heads, d_model=args.d_model, d_mlp=args.d_mlp,
                       vocab_size=len(vocab), max_seq=args.max_seq, act=args.act)
    state = ModelState.init(mcfg, seed=args.init_seed)
    tc = _train_config(args)
    trained, report = pretrain(state, ds, tc, vocab)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained, out / "model.ckpt", meta={"train": asdict(tc)})
    report.save(out / "report", timing=False)
    atomic_write(out / "timing.log", f"samples_per_sec={report.samples_per_sec!r}\ntrain_seconds={report.train_seconds!r}\n")
    write_manifest(out, "train", {"model": asdict(mcfg), "train": asdict(tc), "init_seed": args.init_seed},
                   {"data": args.data}, ["model.ckpt", "report.json"])
    print(f"final accuracy {report.final_accuracy}; {report.samples_per_sec:.1f} samples/sec; "
          f"{report.tuned_params} tuned parameters; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    out = _out_dir(args, "finetune")
    vocab = Vocabulary.default()
    state = load_checkpoint(args.model)
    ds = load_dataset(args.data)
    tc = _train_config(args)
    evalp = ds.split("validation") if "validation" in ds.splits else None
    if args.mode == "full":
        mask = None
        tuned, report = full_sft(state, ds, tc, vocab, eval_pairs=evalp)
    else:
        if args.mask is None:
            raise UsageError("--mode precise needs --mask selection.json")
        sel = KeySelection.from_json(Path(args.mask).read_text())
        heads = sel.heads[: args.top_k] if args.top_k is not None else sel.heads
        mlps = sel.mlps[: args.top_k_mlps] if args.top_k_mlps is not None else sel.mlps
        mask = TuneMask.from_nodes(list(heads) + list(mlps))
        tuned, report = precise_sft(state, ds, mask, tc, vocab, eval_pairs=evalp, allow_empty=args.allow_empty)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(tuned, out / "model.ckpt", meta={"mode": args.mode})
    report.save(out / "report", timing=False)
    if mask is not None:
        atomic_write(out / "mask.json", json.dumps(mask.to_dict(), indent=1, sort_keys=True) + "\n")
    atomic_write(out / "timing.log", f"samples_per_sec={report.samples_per_sec!r}\ntrain_seconds={report.train_seconds!r}\n")
    write_manifest(out, f"finetune --mode {args.mode}", {"mode": args.mode, "train": asdict(tc)},
                   {"model": args.model, "data": args.data, "mask": args.mask}, ["model.ckpt", "report.json"])
    print(f"mode {args.mode}: final accuracy {report.final_accuracy}; tuned {report.tuned_params} of "
          f"{report.total_params} parameters; {report.samples_per_sec:.1f} samples/sec")
    return EXIT_OK


def cmd_audit(args) -> int:
    before, after = load_checkpoint(args.before), load_checkpoint(args.after)
    mask = None
    if args.mask:
        d = json.loads(Path(args.mask).read_text())
        mask = TuneMask.from_dict(d) if "heads" in d and all(isinstance(h, list) for h in d["heads"]) \
            else TuneMask.from_nodes(KeySelection.from_dict(d).nodes)
        mask.check(before)
    res = parameter_audit(before, after, mask)
    text = json.dumps(res.to_dict(), indent=1, sort_keys=True) + "\n"
    if args.out:
        atomic_write(args.out, text)
    n_out = sum(res.outside.values())
    print(f"changed entries: {sum(res.changed.values())}; outside mask: {n_out}")
    return EXIT_OK if res.clean or mask is None else EXIT_DATA


def cmd_patch(args) -> int:
    out = _out_dir(args, "patch")
    vocab = Vocabulary.default()
    state = load_checkpoint(args.model)
    _, pairs = _pairs(args)
    pairs = correct_pairs(state, pairs, vocab)[: args.n_pairs]
    if not pairs:
        raise ValueError("the model answers none of the selected prompts correctly")
    positions = args.positions
    em = path_patch_sweep(state, pairs, vocab, mode=args.mode, eps=args.eps, positions=positions)
    cfg = state.config
    atomic_write(out / "effects.csv", em.to_csv())
    atomic_write(out / "effects.json", em.to_json())
    atomic_write(out / "heatmap.svg", effect_heatmap(em, cfg.n_layers, cfg.n_heads))
    write_manifest(out, "patch", _run_config(args),
                   {"model": args.model, "data": args.data}, ["effects.csv", "effects.json", "heatmap.svg"])
    print(f"swept {len(em.nodes)} nodes over {em.meta['n_pairs']} pairs ({em.meta['skipped']} skipped); {out}")
    return EXIT_OK


def cmd_select(args) -> int:
    em = EffectMap.from_json(Path(args.effects).read_text())
    sel = select_key(em, args.tau, args.top_k, args.top_k_mlps)
    text = sel.to_json()
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"{len(sel.heads)} heads, {len(sel.mlps)} MLPs at tau={args.tau}", file=sys.stderr)
    return EXIT_OK


def cmd_knockout(args) -> int:
    out = _out_dir(args, "knockout")
    vocab = Vocabulary.default()
    state = load_checkpoint(args.model)
    em = EffectMap.from_json(Path(args.effects).read_text())
    _, pairs = _pairs(args)
    k_max = args.k_max if args.k_max is not None else state.config.n_layers * state.config.n_heads
    curve = knockout_curve(state, em, pairs, pairs, vocab, args.ordering, k_max, seed=args.seed)
    atomic_write(out / "knockout.csv", curve.to_csv())
    atomic_write(out / "knockout.json", curve.to_json())
    atomic_write(out / "knockout.svg", svg_lines({args.ordering: curve.accuracy}, x=curve.ks,
                                                 title="accuracy vs heads knocked out", y_range=(0.0, 1.0)))
    write_manifest(out, "knockout", _run_config(args),
                   {"model": args.model, "data": args.data, "effects": args.effects},
                   ["knockout.csv", "knockout.json", "knockout.svg"])
    print(" ".join(f"{k}:{a:.3f}" for k, a in zip(curve.ks, curve.accuracy)))
    return EXIT_OK


def cmd_probe(args) -> int:
    out = _out_dir(args, "probe")
    vocab = Vocabulary.default()
    state = load_checkpoint(args.model)
    files = []
    if args.kind == "trajectory":
        if not args.prompt:
            raise UsageError("--kind trajectory needs --prompt")
        traj = token_trajectory(state, args.prompt, vocab, answer=args.answer, metric=args.metric)
        atomic_write(out / "trajectory.csv", traj.to_csv())
        atomic_write(out / "trajectory.json", json.dumps(traj.to_dict(), indent=1, sort_keys=True) + "\n")
        files = ["trajectory.csv", "trajectory.json"]
        for i, r in enumerate(traj.ranking):
            print(f"layer {i}: " + " ".join(f"{t}({s:+.2f})" for t, s in r[:3]))
        print(f"prediction {traj.prediction}; settled at layer {traj.settled_layer}")
    else:
        if not args.data:
            raise UsageError(f"--kind {args.kind} needs --data")
        _, pairs = _pairs(args)
        pairs = pairs[: args.n_samples]
        if args.kind == "attention":
            if not args.head:
                raise UsageError("--kind attention needs --head L.H")
            prof = attention_profile(state, NodeId.parse(args.head), pairs, vocab)
            atomic_write(out / "attention.csv", prof.to_csv())
            atomic_write(out / "attention.json", json.dumps(prof.to_dict(), indent=1, sort_keys=True) + "\n")
            files = ["attention.csv", "attention.json"]
            print(" ".join(f"{r}={m:.3f}" for r, m in prof.mass.items()))
        else:
            fn = mlp_reception if args.kind == "reception" else mlp_generation
            series = fn(state, pairs, vocab, correct_only=not args.all_samples, metric=args.metric)
            atomic_write(out / f"{args.kind}.csv", series.to_csv())
            atomic_write(out / f"{args.kind}.json", json.dumps(series.to_dict(), indent=1, sort_keys=True) + "\n")
            atomic_write(out / f"{args.kind}.svg", svg_lines({t: series.series(t) for t in ("A", "B", "C", "other")},
                                                             title=f"MLP {args.kind}", y_range=(-1.0, 1.0)))
            files = [f"{args.kind}.csv", f"{args.kind}.json", f"{args.kind}.svg"]
            print(series.to_csv(), end="")
    write_manifest(out, f"probe --kind {args.kind}", _run_config(args),
                   {"model": args.model, "data": args.data}, files)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    from .experiments import run_suite

    out = _out_dir(args, "reproduce")
    res = run_suite(args.suite, out / args.suite, args.cache or out / "models")
    return EXIT_OK if res.passed else EXIT_NUMERIC


# parser ---------------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    from .experiments import SUITES

    ap = _Parser(prog="calcheads", description="Locate, probe and fine-tune arithmetic heads in a toy transformer.")
    ap.add_argument("--version", action="version", version=f"calcheads {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="build a templated prompt-pair dataset")
    p.add_argument("--ops", default="add", help=f"comma list from {','.join(OPS)}")
    p.add_argument("--families", default="base", help="comma list, 'base' or 'all'")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--range", default="1,9", help="operand range lo,hi")
    p.add_argument("--single-token-answer", dest="single_token_answer", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=0.1)
    p.add_argument("--holdout-families", dest="holdout_families")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain a model from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--d-model", dest="d_model", type=int, default=64)
    p.add_argument("--d-mlp", dest="d_mlp", type=int, default=256)
    p.add_argument("--max-seq", dest="max_seq", type=int, default=40)
    p.add_argument("--act", choices=["gelu", "silu"], default="gelu")
    p.add_argument("--init-seed", dest="init_seed", type=int, default=0)
    _train_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="full or precise supervised fine-tuning")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["full", "precise"], required=True)
    p.add_argument("--mask", help="KeySelection JSON for --mode precise")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--top-k-mlps", dest="top_k_mlps", type=int)
    p.add_argument("--allow-empty", dest="allow_empty", action="store_true")
    _train_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("audit", help="bitwise parameter diff between two checkpoints")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--mask", help="KeySelection or TuneMask JSON; changes outside it fail the audit")
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("patch", help="path-patching sweep over all nodes")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="validation")
    p.add_argument("--ops")
    p.add_argument("--family")
    p.add_argument("--n-pairs", dest="n_pairs", type=int, default=200)
    p.add_argument("--mode", choices=["direct", "through-mlp"], default="through-mlp")
    p.add_argument("--positions", choices=["end", "all"], default="end")
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("select", help="pick key nodes from a sweep")
    p.add_argument("--effects", required=True)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--top-k-mlps", dest="top_k_mlps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("knockout", help="mean-ablation knockout curve")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--effects", required=True)
    p.add_argument("--split", default="validation")
    p.add_argument("--ops")
    p.add_argument("--family")
    p.add_argument("--ordering", choices=["effect", "random"], default="effect")
    p.add_argument("--k-max", dest="k_max", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_knockout)

    p = sub.add_parser("probe", help="attention profiles, MLP projections and token trajectories")
    p.add_argument("--model", required=True)
    p.add_argument("--kind", choices=["attention", "reception", "generation", "trajectory"], required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="validation")
    p.add_argument("--ops")
    p.add_argument("--family")
    p.add_argument("--head", help="L.H for --kind attention")
    p.add_argument("--prompt")
    p.add_argument("--answer")
    p.add_argument("--n-samples", dest="n_samples", type=int, default=300)
    p.add_argument("--all-samples", dest="all_samples", action="store_true", help="do not filter to correct predictions")
    p.add_argument("--metric", choices=["cosine", "dot"], default="cosine")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("reproduce", help="run one pinned acceptance suite")
    p.add_argument("--suite", choices=list(SUITES), required=True)
    p.add_argument("--cache", help="directory for trained models (default: <out>/models)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_reproduce)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, IndexError, OSError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
