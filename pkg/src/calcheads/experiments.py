"""End-to-end experiment suites driven by the pinned config in ``configs/suites.json``.

Each suite trains (or reuses) the models it needs, runs its analysis, writes
CSV/JSON/SVG artifacts into an output directory and returns a list of
criterion checks. Deterministic numbers go to JSON; wall-clock figures go
only to ``timing.log`` so reruns can be compared byte for byte.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .corpus import DatasetSpec, Vocabulary, build_dataset, load_dataset
from .model import ModelConfig, ModelState, NodeId, load_checkpoint, save_checkpoint
from .patching import (
    EffectMap,
    knockout_curve,
    mean_ablate,
    mean_end_activations,
    path_patch_sweep,
    random_heads,
    select_key,
    top_nodes,
    transfer_knockout,
)
from .probe import attention_profile, mlp_generation, mlp_reception
from .report import atomic_write, config_hash, effect_heatmap, svg_lines, write_manifest
from .trainer import (
    TrainConfig,
    TuneMask,
    accuracy,
    correct_pairs,
    full_sft,
    parameter_audit,
    precise_sft,
    pretrain,
)

SUITES = ("pretrain", "sparsity", "knockout", "transfer", "precise-vs-full", "probe")


def pinned_config() -> dict:
    text = resources.files("calcheads").joinpath("configs/suites.json").read_text()
    return json.loads(text)


@dataclass
class Check:
    name: str
    passed: bool
    measured: dict
    # figures that vary run to run (wall clock); printed and logged, never in JSON
    timing: dict = field(default_factory=dict)

    def line(self) -> str:
        vals = {**self.measured, **self.timing}
        shown = ", ".join(f"{k}={_short(v)}" for k, v in vals.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {shown}"


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(str(_short(x)) for x in v) + "]"
    return v


@dataclass
class SuiteResult:
    suite: str
    checks: list[Check]
    out_dir: Path

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


# models ---------------------------------------------------------------------

def model_spec(name: str, cfg: dict | None = None) -> dict:
    cfg = cfg or pinned_config()
    if name not in cfg["models"]:
        raise KeyError(f"unknown model {name!r}; pinned models: {sorted(cfg['models'])}")
    return cfg["models"][name]


def get_model(name: str, cache_dir, cfg: dict | None = None, log=None):
    """Train the pinned model ``name`` or load it from ``cache_dir`` if already trained.

    Returns ``(state, dataset, train_seconds)``; seconds is None on a cache hit.
    """
    spec = model_spec(name, cfg)
    vocab = Vocabulary.default()
    key = config_hash(spec)
    cache_dir = Path(cache_dir)
    ckpt = cache_dir / f"{name}-{key}.ckpt"
    data_path = cache_dir / f"{name}-{key}.jsonl"
    if ckpt.exists() and data_path.exists():
        return load_checkpoint(ckpt), load_dataset(data_path), None
    ds = build_dataset(DatasetSpec(**spec["data"]))
    mcfg = ModelConfig(vocab_size=len(vocab), **spec["model"])
    state = ModelState.init(mcfg, seed=spec.get("init_seed", 0))
    t0 = time.perf_counter()
    trained, report = pretrain(state, ds, TrainConfig(**spec["train"]), vocab)
    seconds = time.perf_counter() - t0
    if log:
        log(f"trained {name} in {seconds:.1f}s, validation accuracy {report.final_accuracy}")
    ds.save(data_path)
    report.save(cache_dir / f"{name}-{key}-train", timing=False)
    save_checkpoint(trained, ckpt, meta={"model": name, "config_hash": key})
    return trained, ds, seconds


# shared steps ---------------------------------------------------------------

def _filter(pairs, ops=None, family=None):
    return [p for p in pairs if (ops is None or p.op in ops) and (family is None or p.family == family)]


def _sweep(state, ds, s: dict, vocab, family=None, source="validation"):
    pool = _filter(ds.split(source) if source else ds.pairs, s.get("ops"), family)
    pairs = correct_pairs(state, pool, vocab)[: s["n_pairs"]]
    return path_patch_sweep(state, pairs, vocab, mode=s.get("mode", "through-mlp")), pairs


def _write_effects(out: Path, em: EffectMap, cfg: ModelConfig, stem: str = "effects") -> list[str]:
    atomic_write(out / f"{stem}.csv", em.to_csv())
    atomic_write(out / f"{stem}.json", em.to_json())
    atomic_write(out / f"{stem}.svg", effect_heatmap(em, cfg.n_layers, cfg.n_heads))
    return [f"{stem}.csv", f"{stem}.json", f"{stem}.svg"]


def _rel_drop(base: float, after: float) -> float:
    return (base - after) / base if base > 0 else 0.0


# suites ---------------------------------------------------------------------

def suite_pretrain(s, out, cache, cfg, vocab, log):
    spec = model_spec(s["model"], cfg)
    # always train fresh: the wall-clock budget is part of the criterion
    ds = build_dataset(DatasetSpec(**spec["data"]))
    state = ModelState.init(ModelConfig(vocab_size=len(vocab), **spec["model"]), seed=spec.get("init_seed", 0))
    t0 = time.perf_counter()
    trained, report = pretrain(state, ds, TrainConfig(**spec["train"]), vocab)
    seconds = time.perf_counter() - t0
    held = accuracy(trained, ds.split("validation"), vocab)
    report.save(out / "train", timing=False)
    atomic_write(out / "summary.json", json.dumps({"heldout_accuracy": held}, indent=1, sort_keys=True) + "\n")
    return [Check("toy pretraining", held >= s["min_accuracy"] and seconds <= s["max_seconds"],
                  {"heldout_accuracy": held}, {"seconds": seconds})], ["train.json", "summary.json"]


def suite_sparsity(s, out, cache, cfg, vocab, log):
    state, ds, _ = get_model(s["model"], cache, cfg, log)
    em, _ = _sweep(state, ds, s, vocab)
    files = _write_effects(out, em, state.config)
    sel = select_key(em, s["tau"])
    atomic_write(out / "selection.json", sel.to_json())
    evalp = _filter(ds.split("validation"), s.get("ops"))
    n_heads = state.config.n_layers * state.config.n_heads
    means = mean_end_activations(state, evalp, vocab, [n for n in em.nodes if n.is_head])
    base = accuracy(state, evalp, vocab)
    knocked = mean_ablate(state, sel.heads, evalp, evalp, vocab, means)
    rand = [mean_ablate(state, random_heads(state.config, len(sel.heads), seed), evalp, evalp, vocab, means)
            for seed in s["random_seeds"]]
    frac = len(sel.heads) / n_heads
    drop = _rel_drop(base, knocked)
    rdrop = float(np.mean([_rel_drop(base, a) for a in rand]))
    summary = {"key_heads": [n.label() for n in sel.heads], "head_fraction": frac, "baseline": base,
               "key_ablated": knocked, "relative_drop": drop, "random_ablated": rand, "random_relative_drop": rdrop}
    atomic_write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    ok = 0 < len(sel.heads) and frac <= s["max_head_fraction"] and drop >= s["min_drop"] and rdrop <= s["max_random_drop"]
    return [Check("sparsity", ok, {"key_heads": len(sel.heads), "head_fraction": frac, "relative_drop": drop,
                                   "random_relative_drop": rdrop})], files + ["selection.json", "summary.json"]


def suite_knockout(s, out, cache, cfg, vocab, log):
    state, ds, _ = get_model(s["model"], cache, cfg, log)
    em, _ = _sweep(state, ds, s, vocab)
    files = _write_effects(out, em, state.config)
    sel = select_key(em, s["tau"])
    evalp = _filter(ds.split("validation"), s.get("ops"))
    n_heads = state.config.n_layers * state.config.n_heads
    curves = {"effect": knockout_curve(state, em, evalp, evalp, vocab, "effect", n_heads)}
    for seed in s["random_seeds"]:
        curves[f"random-{seed}"] = knockout_curve(state, em, evalp, evalp, vocab, "random", n_heads, seed=seed)
    for name, c in curves.items():
        atomic_write(out / f"knockout_{name}.csv", c.to_csv())
        atomic_write(out / f"knockout_{name}.json", c.to_json())
        files += [f"knockout_{name}.csv", f"knockout_{name}.json"]
    atomic_write(out / "knockout.svg", svg_lines({k: c.accuracy for k, c in curves.items()}, title="accuracy vs heads knocked out",
                                                 y_range=(0.0, 1.0)))
    base = accuracy(state, evalp, vocab)
    small_k = int(np.floor(s["small_k_fraction"] * n_heads))
    rand_small = [c.at(k) for name, c in curves.items() if name != "effect" for k in range(1, small_k + 1)]
    worst_small = max((base - a for a in rand_small), default=0.0)
    k_key = len(sel.heads)
    eff_drop = _rel_drop(base, curves["effect"].at(k_key)) if k_key else 0.0
    checks = [
        Check("knockout k=0 equals baseline", all(c.baseline == base for c in curves.values()), {"baseline": base}),
        Check("random-rank small-k stays near baseline", worst_small <= s["small_k_points"],
              {"k_max_small": small_k, "worst_points_drop": worst_small}),
        Check("effect-rank at |key set| drops", k_key > 0 and eff_drop >= s["min_drop"],
              {"k": k_key, "relative_drop": eff_drop}),
    ]
    summary = {"baseline": base, "key_heads": k_key, "effect_drop_at_key": eff_drop, "random_small_k_worst": worst_small}
    atomic_write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return checks, files + ["knockout.svg", "summary.json"]


def suite_transfer(s, out, cache, cfg, vocab, log):
    state, ds, _ = get_model(s["model"], cache, cfg, log)
    # identification may use any split of the source family; evaluation uses held-out target pairs
    em, _ = _sweep(state, ds, s, vocab, family=s["source_family"], source=None)
    files = _write_effects(out, em, state.config)
    sel = select_key(em, s["tau"])
    atomic_write(out / "selection.json", sel.to_json())
    target = _filter(ds.split("validation"), s.get("ops"), s["target_family"])
    res = transfer_knockout(state, sel.heads, target, target, vocab, s["random_seeds"])
    summary = {"source_family": s["source_family"], "target_family": s["target_family"],
               "key_heads": [n.label() for n in sel.heads], **res.to_dict()}
    atomic_write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    ratio = res.ratio
    ok = len(sel.heads) > 0 and res.relative_drop > 0 and ratio >= s["min_ratio"]
    return [Check("transferability", ok, {"relative_drop": res.relative_drop,
                                          "random_relative_drop": res.random_relative_drop,
                                          "ratio": ratio})], files + ["selection.json", "summary.json"]


def suite_precise_vs_full(s, out, cache, cfg, vocab, log):
    state, ds, _ = get_model(s["model"], cache, cfg, log)
    em, _ = _sweep(state, ds, s, vocab)
    files = _write_effects(out, em, state.config)
    sel = top_nodes(em, s["top_k"], s["top_k_mlps"])
    atomic_write(out / "selection.json", sel.to_json())
    mask = TuneMask.from_nodes(sel.nodes)
    ft = build_dataset(DatasetSpec(**s["finetune_data"]))
    tc = TrainConfig(**s["train"])
    task_eval = ft.split("validation")
    retain_eval = _filter(ds.split("validation"), [s["retain_op"]])
    task0, retain0 = accuracy(state, task_eval, vocab), accuracy(state, retain_eval, vocab)
    full_state, full_rep = full_sft(state, ft, tc, vocab)
    prec_state, prec_rep = precise_sft(state, ft, mask, tc, vocab)
    full_rep.save(out / "full_sft", timing=False)
    prec_rep.save(out / "precise_sft", timing=False)
    res = {}
    for name, st in (("full", full_state), ("precise", prec_state)):
        res[name] = {"task_gain": accuracy(st, task_eval, vocab) - task0,
                     "retain_degradation": retain0 - accuracy(st, retain_eval, vocab)}
    audit = parameter_audit(state, prec_state, mask)
    atomic_write(out / "audit.json", json.dumps(audit.to_dict(), indent=1, sort_keys=True) + "\n")
    gain_share = res["precise"]["task_gain"] / res["full"]["task_gain"] if res["full"]["task_gain"] > 0 else 0.0
    full_deg, prec_deg = res["full"]["retain_degradation"], res["precise"]["retain_degradation"]
    speedup = prec_rep.samples_per_sec / full_rep.samples_per_sec if full_rep.samples_per_sec else 0.0
    summary = {"selection": sel.to_dict(), "before": {"task": task0, "retain": retain0}, **res,
               "gain_share": gain_share, "tuned_params": {"full": full_rep.tuned_params, "precise": prec_rep.tuned_params}}
    atomic_write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    deg_ok = prec_deg <= s["max_degradation_share"] * max(full_deg, 0.0)
    checks = [
        Check("precise-SFT isolation audit", audit.clean, {"changed_outside_mask": sum(audit.outside.values())}),
        Check("precise vs full: capability gain", gain_share >= s["min_gain_share"],
              {"full_gain": res["full"]["task_gain"], "precise_gain": res["precise"]["task_gain"], "share": gain_share}),
        Check("precise vs full: retained skill", deg_ok, {"full_degradation": full_deg, "precise_degradation": prec_deg}),
        Check("precise vs full: throughput", speedup >= s["min_speedup"], {},
              {"full_sps": full_rep.samples_per_sec, "precise_sps": prec_rep.samples_per_sec, "speedup": speedup}),
    ]
    return checks, files + ["selection.json", "audit.json", "summary.json", "full_sft.json", "precise_sft.json"]


def suite_probe(s, out, cache, cfg, vocab, log):
    state, ds, _ = get_model(s["model"], cache, cfg, log)
    samples = ds.split("validation")[: s["n_samples"]]
    cfgm = state.config
    profiles = [attention_profile(state, NodeId.Head(i, j), samples, vocab, keep_rows=True)
                for i in range(cfgm.n_layers) for j in range(cfgm.n_heads)]
    rows_ok = all(np.all(r >= 0) and abs(r.sum() - 1.0) <= 1e-6 for p in profiles for r in p.rows)
    top = max(profiles, key=lambda p: p.operand_mass)
    atomic_write(out / "attention.csv", "".join(p.to_csv() if k == 0 else p.to_csv().split("\n", 1)[1]
                                                for k, p in enumerate(profiles)))
    rec = mlp_reception(state, samples, vocab)
    gen = mlp_generation(state, samples, vocab)
    for name, series in (("reception", rec), ("generation", gen)):
        atomic_write(out / f"{name}.csv", series.to_csv())
        atomic_write(out / f"{name}.json", json.dumps(series.to_dict(), indent=1, sort_keys=True) + "\n")
        atomic_write(out / f"{name}.svg", svg_lines({t: series.series(t) for t in ("A", "B", "C", "other")},
                                                    title=f"MLP {name} cosine by layer", y_range=(-1.0, 1.0)))
    in_range = bool(np.all(np.abs(rec.per_sample) <= 1.0) and np.all(np.abs(gen.per_sample) <= 1.0))
    c_share = float(gen.c_beats_other(-1).mean()) if len(gen.per_sample) else 0.0
    summary = {"top_operand_head": top.to_dict(), "c_share_last_layer": c_share,
               "n_correct": int(len(gen.per_sample))}
    atomic_write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    checks = [
        Check("attention rows are distributions", rows_ok, {"heads": len(profiles)}),
        Check("cosines within [-1, 1]", in_range, {}),
        Check("top operand head prefers operands", top.operand_mass > top.mass["other"],
              {"head": top.head.label(), "operand_mass": top.operand_mass, "other_mass": top.mass["other"]}),
        Check("late-layer MLP writes the answer", c_share >= s["min_c_share"], {"share": c_share}),
    ]
    files = ["attention.csv", "reception.csv", "reception.json", "reception.svg", "generation.csv",
             "generation.json", "generation.svg", "summary.json"]
    return checks, files


_RUNNERS = {
    "pretrain": suite_pretrain,
    "sparsity": suite_sparsity,
    "knockout": suite_knockout,
    "transfer": suite_transfer,
    "precise-vs-full": suite_precise_vs_full,
    "probe": suite_probe,
}


def run_suite(suite: str, out_dir, cache_dir=None, cfg: dict | None = None, echo=print) -> SuiteResult:
    if suite not in _RUNNERS:
        raise KeyError(f"unknown suite {suite!r}; expected one of {SUITES}")
    cfg = cfg or pinned_config()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(cache_dir) if cache_dir is not None else out.parent / "models"
    vocab = Vocabulary.default()
    log_lines: list[str] = []

    def log(msg):
        log_lines.append(msg)
        if echo:
            echo(msg)

    s = cfg["suites"][suite]
    t0 = time.perf_counter()
    checks, files = _RUNNERS[suite](s, out, cache, cfg, vocab, log)
    log_lines.append(f"suite {suite} wall time {time.perf_counter() - t0:.1f}s")
    for c in checks:
        if c.timing:
            log_lines.append(f"{c.name}: " + ", ".join(f"{k}={v!r}" for k, v in c.timing.items()))
    atomic_write(out / "checks.json", json.dumps([{"name": c.name, "passed": c.passed, "measured": c.measured}
                                                   for c in checks if not c.timing], indent=1, sort_keys=True) + "\n")
    atomic_write(out / "timing.log", "\n".join(log_lines) + "\n")
    model_name = s.get("model")
    write_manifest(out, f"reproduce --suite {suite}", {"suite": suite, "settings": s,
                   "model": model_spec(model_name, cfg) if model_name else None},
                   outputs=files + ["checks.json"])
    if echo:
        for c in checks:
            echo(c.line())
    return SuiteResult(suite, checks, out)
