"""Pretraining, full fine-tuning and gradient-masked ("precise") fine-tuning.

Precise fine-tuning only marks the selected parameters as requiring
gradients, so the tape never records the frozen lower layers and optimizer
state exists only for tuned tensors. Head blocks live inside per-layer
``[H, ...]`` tensors; unselected blocks are masked out of every update, and
selected blocks have their raw gradient multiplied by ``H / h_layer`` (number
of heads per layer over number selected in that layer) before the optimizer
sees it.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import ConfigError, Dataset, PromptPair, Vocabulary, encode_batch
from .model import HEAD_PARAMS, MLP_PARAMS, ModelState, NodeId, forward


class TrainingDivergedError(nx.NumericError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    steps: int = 2000
    optimizer: str = "adam"
    warmup_ratio: float = 0.02
    weight_decay: float = 0.1
    seed: int = 0
    loss_positions: str = "answer"
    schedule: str = "cosine"
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    eval_every: int = 250
    eval_size: int = 512

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_positions not in ("answer", "all"):
            raise ConfigError(f"unknown loss_positions {self.loss_positions!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def from_json(cls, path_or_dict) -> "TrainConfig":
        d = path_or_dict if isinstance(path_or_dict, dict) else json.loads(Path(path_or_dict).read_text())
        return cls(**d)

    def lr_at(self, step: int) -> float:
        warm = int(round(self.warmup_ratio * self.steps))
        if warm and step < warm:
            return self.lr * (step + 1) / warm
        if self.schedule == "constant":
            return self.lr
        frac = (step - warm) / max(1, self.steps - warm)
        return self.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass(frozen=True)
class TuneMask:
    heads: frozenset = frozenset()
    mlps: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "heads", frozenset(tuple(h) for h in self.heads))
        object.__setattr__(self, "mlps", frozenset(int(m) for m in self.mlps))

    @classmethod
    def from_nodes(cls, nodes: Sequence[NodeId]) -> "TuneMask":
        return cls(frozenset((n.layer, n.head) for n in nodes if n.is_head),
                   frozenset(n.layer for n in nodes if not n.is_head))

    def is_empty(self) -> bool:
        return not self.heads and not self.mlps

    def per_layer_counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for layer, _ in self.heads:
            out[layer] = out.get(layer, 0) + 1
        return out

    def check(self, state: ModelState) -> None:
        cfg = state.config
        for layer, head in self.heads:
            NodeId.Head(layer, head).check(cfg)
        for layer in self.mlps:
            NodeId.Mlp(layer).check(cfg)

    def n_params(self, state: ModelState) -> int:
        cfg = state.config
        per_head = 4 * cfg.d_model * cfg.d_head
        per_mlp = sum(state[f"layers.0.{p}"].data.size for p in MLP_PARAMS)
        return len(self.heads) * per_head + len(self.mlps) * per_mlp

    def to_dict(self) -> dict:
        return {"heads": sorted([list(h) for h in self.heads]), "mlps": sorted(self.mlps)}

    @classmethod
    def from_dict(cls, d: dict) -> "TuneMask":
        return cls(frozenset(tuple(h) for h in d.get("heads", [])), frozenset(d.get("mlps", [])))

    def gradient_plan(self, state: ModelState) -> tuple[dict[str, np.ndarray | None], dict[str, np.ndarray]]:
        """Per-parameter update masks (None = whole tensor) and gradient scales."""
        H = state.config.n_heads
        masks: dict[str, np.ndarray | None] = {}
        scales: dict[str, np.ndarray] = {}
        for layer, h in self.per_layer_counts().items():
            sel = np.zeros(H, dtype=bool)
            for (li, hj) in self.heads:
                if li == layer:
                    sel[hj] = True
            for p in HEAD_PARAMS:
                name = f"layers.{layer}.{p}"
                shape = state[name].shape
                m = np.broadcast_to(sel[:, None, None], shape).copy()
                masks[name] = m
                scales[name] = np.where(sel, H / h, 0.0)[:, None, None]
        for layer in self.mlps:
            for p in MLP_PARAMS:
                masks[f"layers.{layer}.{p}"] = None
        return masks, scales


@dataclass
class TrainReport:
    mode: str
    config: dict
    losses: list[float] = field(default_factory=list)
    accuracy: list[tuple[int, float]] = field(default_factory=list)
    samples_per_sec: float = 0.0
    train_seconds: float = 0.0
    tuned_params: int = 0
    total_params: int = 0
    param_delta_norms: dict[str, float] = field(default_factory=dict)
    final_accuracy: float | None = None

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        d["accuracy"] = [list(x) for x in self.accuracy]
        if not timing:
            d.pop("samples_per_sec")
            d.pop("train_seconds")
        return d

    def save(self, prefix, timing: bool = True) -> None:
        """``<prefix>.json`` plus ``<prefix>_loss.csv`` and ``<prefix>_accuracy.csv``."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".json").write_text(json.dumps(self.to_dict(timing), indent=1, sort_keys=True) + "\n")
        with open(prefix.with_name(prefix.name + "_loss.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows([k, repr(v)] for k, v in enumerate(self.losses))
        with open(prefix.with_name(prefix.name + "_accuracy.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "accuracy"])
            w.writerows([s, repr(a)] for s, a in self.accuracy)


# evaluation -----------------------------------------------------------------

def predict(state: ModelState, pairs: Sequence[PromptPair], vocab: Vocabulary,
            interventions=None, batch_size: int = 256, which: str = "ref") -> np.ndarray:
    """Argmax token at END for each pair. ``interventions`` values must be ``[d]`` (broadcast)."""
    preds = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        toks, ends, _ = encode_batch(chunk, vocab, which)
        logits, _ = forward(state, toks, interventions, ends=ends, cache=False, end_only=True)
        preds.append(logits.data.argmax(-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def accuracy(state: ModelState, pairs: Sequence[PromptPair], vocab: Vocabulary,
             interventions=None, batch_size: int = 256) -> float:
    if not pairs:
        return float("nan")
    preds = predict(state, pairs, vocab, interventions, batch_size)
    gold = np.array([vocab.ids[p.answer_first] for p in pairs])
    return float((preds == gold).mean())


def correct_pairs(state: ModelState, pairs: Sequence[PromptPair], vocab: Vocabulary) -> list[PromptPair]:
    preds = predict(state, pairs, vocab)
    return [p for p, y in zip(pairs, preds) if vocab.ids[p.answer_first] == y]


# training core --------------------------------------------------------------

def _as_pairs(data) -> list[PromptPair]:
    if isinstance(data, Dataset):
        return data.split("train") if "train" in data.splits else list(data.pairs)
    return list(data)


def _batch(encoded: list[list[int]], answers: np.ndarray, idx: np.ndarray, pad: int, loss_positions: str):
    seqs = [encoded[i] for i in idx]
    n = max(len(s) for s in seqs)
    toks = np.full((len(idx), n), pad, dtype=np.int64)
    for k, s in enumerate(seqs):
        toks[k, : len(s)] = s
    ends = np.array([len(s) - 1 for s in seqs])
    if loss_positions == "answer":
        return toks, ends, answers[idx], None
    # next-token targets over every real position; the answer follows END
    tgt = np.full((len(idx), n), -1, dtype=np.int64)
    for k, s in enumerate(seqs):
        tgt[k, : len(s) - 1] = s[1:]
        tgt[k, len(s) - 1] = answers[idx[k]]
    return toks, ends, tgt, np.nonzero(tgt >= 0)


def _loss(state, toks, ends, targets, valid) -> nx.Tensor:
    if valid is None:
        logits, _ = forward(state, toks, ends=ends, cache=False, end_only=True)
        return nx.cross_entropy(logits, targets)
    logits, _ = forward(state, toks, ends=ends, cache=False)
    return nx.cross_entropy(logits[valid], targets[valid])


def _node_deltas(before: ModelState, after: ModelState) -> dict[str, float]:
    cfg = before.config
    out: dict[str, float] = {}
    for i in range(cfg.n_layers):
        for j in range(cfg.n_heads):
            sq = sum(float(((after[f"layers.{i}.{p}"].data[j] - before[f"layers.{i}.{p}"].data[j]) ** 2).sum())
                     for p in HEAD_PARAMS)
            out[f"{i}.{j}"] = math.sqrt(sq)
        sq = sum(float(((after[f"layers.{i}.{p}"].data - before[f"layers.{i}.{p}"].data) ** 2).sum())
                 for p in MLP_PARAMS)
        out[f"mlp{i}"] = math.sqrt(sq)
    rest = [n for n in before.names() if not any(n.endswith(p) for p in HEAD_PARAMS + MLP_PARAMS)]
    out["other"] = math.sqrt(sum(float(((after[n].data - before[n].data) ** 2).sum()) for n in rest))
    return out


def _no_decay(name: str) -> bool:
    return name.startswith("embed.") or ".ln" in name or name.startswith("ln_final") or ".b_" in name


def train(state: ModelState, data, config: TrainConfig, vocab: Vocabulary | None = None,
          trainable: dict[str, np.ndarray | None] | None = None,
          grad_scales: dict[str, np.ndarray] | None = None,
          eval_pairs: Sequence[PromptPair] | None = None, mode: str = "pretrain",
          tuned_params: int | None = None) -> tuple[ModelState, TrainReport]:
    """Shared loop. ``trainable`` maps parameter name to an update mask (None = all entries)."""
    vocab = vocab or Vocabulary.default()
    pairs = _as_pairs(data)
    if not pairs:
        raise ConfigError("training set is empty")
    if len(vocab) != state.config.vocab_size:
        raise ConfigError(f"vocabulary size {len(vocab)} != model vocab {state.config.vocab_size}")
    before = state
    state = state.copy()
    if trainable is None:
        trainable = {n: None for n in state.names()}
    grad_scales = grad_scales or {}
    report = TrainReport(mode=mode, config=asdict(config), total_params=state.n_params())
    report.tuned_params = tuned_params if tuned_params is not None else int(sum(
        state[n].data.size if m is None else int(m.sum()) for n, m in trainable.items()))

    rng = np.random.default_rng(config.seed)
    encoded = [vocab.encode(p.ref_tokens) for p in pairs]
    answers = np.array([vocab.ids[p.answer_first] for p in pairs], dtype=np.int64)
    eval_set = list(eval_pairs) if eval_pairs is not None else []
    if len(eval_set) > config.eval_size:
        eval_set = [eval_set[k] for k in np.random.default_rng(config.seed + 1).choice(
            len(eval_set), config.eval_size, replace=False)]

    names = [n for n in state.names() if n in trainable]
    state.set_requires_grad(names)
    bool_masks = {n: (None if m is None else np.asarray(m, dtype=bool)) for n, m in trainable.items()}
    m1 = {n: np.zeros_like(state[n].data) for n in names} if config.optimizer == "adam" else {}
    m2 = {n: np.zeros_like(state[n].data) for n in names} if config.optimizer == "adam" else {}
    b1, b2 = config.betas

    if names and config.steps > 0:
        elapsed = 0.0
        for step in range(config.steps):
            t0 = time.perf_counter()
            idx = rng.integers(len(pairs), size=config.batch_size)
            toks, ends, targets, valid = _batch(encoded, answers, idx, vocab.pad, config.loss_positions)
            try:
                with nx.Tape() as tape:
                    loss = _loss(state, toks, ends, targets, valid)
            except nx.NumericError as exc:
                raise TrainingDivergedError(
                    f"{mode}: {exc} at step {step}; last losses {report.losses[-5:]}") from exc
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingDivergedError(
                    f"{mode}: non-finite loss {lval} at step {step}; last losses {report.losses[-5:]}")
            tape.backward(loss)
            tape.clear()
            grads = {}
            for n in names:
                g = state[n].grad
                state[n].grad = None
                if g is None:
                    g = np.zeros_like(state[n].data)
                if n in grad_scales:
                    g = g * grad_scales[n]
                elif bool_masks[n] is not None:
                    g = g * bool_masks[n]
                grads[n] = g
            if config.grad_clip is not None:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if not np.isfinite(norm):
                    raise TrainingDivergedError(f"{mode}: non-finite gradient norm at step {step}")
                if norm > config.grad_clip:
                    grads = {n: g * (config.grad_clip / norm) for n, g in grads.items()}
            lr = config.lr_at(step)
            for n in names:
                p, g = state[n].data, grads[n]
                if config.optimizer == "adam":
                    m1[n] *= b1
                    m1[n] += (1 - b1) * g
                    m2[n] *= b2
                    m2[n] += (1 - b2) * g * g
                    mh = m1[n] / (1 - b1 ** (step + 1))
                    vh = m2[n] / (1 - b2 ** (step + 1))
                    upd = lr * mh / (np.sqrt(vh) + config.adam_eps)
                else:
                    upd = lr * g
                if config.weight_decay and not _no_decay(n):
                    upd = upd + lr * config.weight_decay * p
                mask = bool_masks[n]
                if mask is None:
                    p -= upd
                else:
                    p[mask] -= upd[mask]
            elapsed += time.perf_counter() - t0
            report.losses.append(lval)
            if eval_set and ((step + 1) % config.eval_every == 0 or step + 1 == config.steps):
                report.accuracy.append((step + 1, accuracy(state, eval_set, vocab)))
        report.train_seconds = elapsed
        report.samples_per_sec = config.steps * config.batch_size / elapsed if elapsed > 0 else 0.0
    state.set_requires_grad(False)
    if eval_set:
        report.final_accuracy = report.accuracy[-1][1] if report.accuracy else accuracy(state, eval_set, vocab)
    report.param_delta_norms = _node_deltas(before, state)
    return state, report


def pretrain(state: ModelState, data, config: TrainConfig, vocab: Vocabulary | None = None,
             eval_pairs=None) -> tuple[ModelState, TrainReport]:
    if eval_pairs is None and isinstance(data, Dataset) and data.splits.get("validation"):
        eval_pairs = data.split("validation")
    return train(state, data, config, vocab, eval_pairs=eval_pairs, mode="pretrain")


def full_sft(state: ModelState, data, config: TrainConfig, vocab: Vocabulary | None = None,
             eval_pairs=None) -> tuple[ModelState, TrainReport]:
    return train(state, data, config, vocab, eval_pairs=eval_pairs, mode="full_sft")


def precise_sft(state: ModelState, data, mask: TuneMask, config: TrainConfig,
                vocab: Vocabulary | None = None, eval_pairs=None,
                allow_empty: bool = False) -> tuple[ModelState, TrainReport]:
    """Fine-tune only the heads and MLP layers in ``mask``."""
    if mask.is_empty():
        if not allow_empty:
            raise ConfigError("precise_sft: empty tune mask (pass allow_empty=True to permit)")
        vocab = vocab or Vocabulary.default()
        report = TrainReport(mode="precise_sft", config=asdict(config), total_params=state.n_params())
        out = state.copy()
        report.param_delta_norms = _node_deltas(state, out)
        if eval_pairs:
            report.final_accuracy = accuracy(out, list(eval_pairs), vocab)
        return out, report
    mask.check(state)
    masks, scales = mask.gradient_plan(state)
    return train(state, data, config, vocab, trainable=masks, grad_scales=scales, eval_pairs=eval_pairs,
                 mode="precise_sft", tuned_params=mask.n_params(state))


# auditing -------------------------------------------------------------------

@dataclass
class AuditResult:
    """Entries whose bytes changed, per parameter, split by inside/outside the tune mask."""

    changed: dict[str, int]
    outside: dict[str, int]

    @property
    def clean(self) -> bool:
        return not any(self.outside.values())

    def to_dict(self) -> dict:
        return {"clean": self.clean, "changed": self.changed, "outside_mask": self.outside}


def parameter_audit(before: ModelState, after: ModelState, mask: TuneMask | None = None) -> AuditResult:
    """Compare two states bit for bit. Without a mask every change counts as outside."""
    if before.names() != after.names():
        raise ConfigError("audit: states have different parameter sets")
    allowed = mask.gradient_plan(before)[0] if mask is not None else {}
    changed, outside = {}, {}
    for n in before.names():
        a, b = before[n].data, after[n].data
        if a.shape != b.shape or a.dtype != b.dtype:
            raise ConfigError(f"audit: {n} differs in shape or dtype")
        kind = f"u{a.itemsize}"
        diff = a.view(kind) != b.view(kind)
        changed[n] = int(diff.sum())
        if n in allowed:
            m = allowed[n]
            outside[n] = 0 if m is None else int((diff & ~m).sum())
        else:
            outside[n] = changed[n]
    return AuditResult(changed, outside)
