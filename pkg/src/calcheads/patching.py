"""Locating the nodes that carry a calculation.

A sweep patches one node at a time from a counterfactual run into the
reference run and records the relative change of the answer logit. Nodes
whose patch lowers that logit by at least ``tau`` are the key nodes; mean
ablation then checks that removing them breaks the task while removing a
random set of the same size does not.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import PromptPair, Vocabulary, encode_batch
from .model import (
    Freeze,
    InterventionSet,
    ModelState,
    NodeId,
    Replace,
    all_nodes,
    forward,
)
from .trainer import accuracy

MODES = ("direct", "through-mlp")
ORDERINGS = ("effect", "random")


def pairs_hash(pairs: Iterable[PromptPair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(p.to_json().encode())
        h.update(b"\n")
    return h.hexdigest()[:16]


def _num(x: float) -> str:
    # repr round-trips exactly, which keeps reruns byte-identical
    return repr(float(x))


@dataclass
class EffectMap:
    """Mean relative answer-logit change per node, with spread and sample count."""

    nodes: list[NodeId]
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        self.count = np.asarray(self.count, dtype=np.int64)
        if not (len(self.nodes) == len(self.mean) == len(self.std) == len(self.count)):
            raise ValueError("EffectMap fields must have one entry per node")

    def __getitem__(self, node: NodeId) -> float:
        return float(self.mean[self.nodes.index(node)])

    def as_dict(self) -> dict[NodeId, float]:
        return {n: float(m) for n, m in zip(self.nodes, self.mean)}

    def grid(self, n_layers: int, n_heads: int) -> np.ndarray:
        """``[L, H+1]`` matrix of means; the last column holds the MLPs. Missing nodes are NaN."""
        out = np.full((n_layers, n_heads + 1), np.nan)
        for n, m in zip(self.nodes, self.mean):
            out[n.layer, n.head if n.is_head else n_heads] = m
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "layer", "head", "mean", "std", "n"])
        for n, m, s, c in zip(self.nodes, self.mean, self.std, self.count):
            w.writerow([n.label(), n.layer, "" if n.head is None else n.head, _num(m), _num(s), int(c)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "nodes": [
                {"node": n.label(), "mean": float(m), "std": float(s), "n": int(c)}
                for n, m, s, c in zip(self.nodes, self.mean, self.std, self.count)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EffectMap":
        rows = d["nodes"]
        return cls(
            nodes=[NodeId.parse(r["node"]) for r in rows],
            mean=[r["mean"] for r in rows],
            std=[r["std"] for r in rows],
            count=[r["n"] for r in rows],
            meta=dict(d.get("meta", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "EffectMap":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class KeySelection:
    tau: float
    heads: list[NodeId]
    mlps: list[NodeId]
    source: str = ""

    @property
    def nodes(self) -> list[NodeId]:
        return list(self.heads) + list(self.mlps)

    def __len__(self) -> int:
        return len(self.heads) + len(self.mlps)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "heads": [n.label() for n in self.heads],
            "mlps": [n.label() for n in self.mlps],
            "source": self.source,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "KeySelection":
        return cls(
            tau=float(d["tau"]),
            heads=[NodeId.parse(s) for s in d.get("heads", [])],
            mlps=[NodeId.parse(s) for s in d.get("mlps", [])],
            source=d.get("source", ""),
        )

    @classmethod
    def from_json(cls, text: str) -> "KeySelection":
        return cls.from_dict(json.loads(text))


@dataclass
class KnockoutCurve:
    ordering: str
    seed: int | None
    order: list[NodeId]
    ks: list[int]
    accuracy: list[float]

    @property
    def baseline(self) -> float:
        return self.accuracy[0]

    def at(self, k: int) -> float:
        return self.accuracy[self.ks.index(k)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "accuracy", "last_node"])
        for k, a in zip(self.ks, self.accuracy):
            w.writerow([k, _num(a), self.order[k - 1].label() if k else ""])
        return buf.getvalue()

    def to_json(self) -> str:
        d = {
            "ordering": self.ordering,
            "seed": self.seed,
            "order": [n.label() for n in self.order],
            "ks": self.ks,
            "accuracy": self.accuracy,
        }
        return json.dumps(d, indent=1, sort_keys=True) + "\n"


def relative_effect(logit_o, logit_p):
    """``(patched - original) / original``."""
    return (np.asarray(logit_p) - np.asarray(logit_o)) / np.asarray(logit_o)


# sweep ----------------------------------------------------------------------

def _aligned_batch(pairs: Sequence[PromptPair], vocab: Vocabulary):
    toks_r, ends, answers = encode_batch(pairs, vocab, "ref")
    toks_c, ends_c, _ = encode_batch(pairs, vocab, "cf")
    if toks_r.shape != toks_c.shape or not np.array_equal(ends, ends_c):
        raise ValueError("reference and counterfactual prompts are not length-aligned")
    return toks_r, toks_c, ends, answers


def _node_values(cache, node: NodeId, positions) -> np.ndarray:
    out = cache.node_output(node)
    if isinstance(positions, str) and positions == "end":
        return out[np.arange(out.shape[0]), cache.ends]
    if isinstance(positions, str) and positions == "all":
        return out
    return out[:, np.asarray(positions, dtype=int)]


def patched_logits(state: ModelState, toks_r, toks_c, ends, node: NodeId, mode: str,
                   positions="end", caches=None) -> np.ndarray:
    """[B, V] END logits after patching ``node`` from the counterfactual run."""
    if mode not in MODES:
        raise ValueError(f"unknown sweep mode {mode!r}; expected one of {MODES}")
    cfg = state.config
    node.check(cfg)
    if caches is None:
        _, cr = forward(state, toks_r, ends=ends)
        _, cc = forward(state, toks_c, ends=ends)
    else:
        cr, cc = caches
    iv = InterventionSet()
    iv[node] = Replace(_node_values(cc, node, positions), positions)
    frozen = all_nodes(cfg, heads=True, mlps=(mode == "direct"))
    for other in frozen:
        if other != node:
            iv[other] = Freeze(_node_values(cr, other, positions), positions)
    logits, _ = forward(state, toks_r, iv, ends=ends, cache=False, end_only=True)
    return logits.data


def path_patch_sweep(state: ModelState, pairs: Sequence[PromptPair], vocab: Vocabulary,
                     mode: str = "through-mlp", nodes: Sequence[NodeId] | None = None,
                     eps: float = 1e-6, positions="end", batch_size: int = 128) -> EffectMap:
    """Relative answer-logit change for every node, averaged over pairs.

    ``mode="direct"`` freezes every other node to its reference value, so
    only the node's direct path to the logits counts; ``"through-mlp"``
    freezes only the other heads and lets MLPs react. Pairs whose clean
    answer logit is within ``eps`` of zero are skipped and counted in
    ``meta["skipped"]``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown sweep mode {mode!r}; expected one of {MODES}")
    if not pairs:
        raise ValueError("sweep needs at least one prompt pair")
    cfg = state.config
    nodes = list(nodes) if nodes is not None else all_nodes(cfg)
    for n in nodes:
        n.check(cfg)
    scores: list[list[np.ndarray]] = [[] for _ in nodes]
    skipped = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        toks_r, toks_c, ends, answers = _aligned_batch(chunk, vocab)
        rows = np.arange(len(chunk))
        logits_r, cr = forward(state, toks_r, ends=ends)
        _, cc = forward(state, toks_c, ends=ends)
        logit_o = logits_r.data[rows, ends, answers]
        keep = np.abs(logit_o) >= eps
        skipped += int((~keep).sum())
        for k, node in enumerate(nodes):
            lp = patched_logits(state, toks_r, toks_c, ends, node, mode, positions, (cr, cc))[rows, answers]
            scores[k].append(relative_effect(logit_o[keep], lp[keep]))
    flat = [np.concatenate(s) for s in scores]
    n_used = len(flat[0]) if flat else 0
    mean = np.array([s.mean() if s.size else 0.0 for s in flat])
    std = np.array([s.std() if s.size else 0.0 for s in flat])
    if not np.all(np.isfinite(mean)):
        raise FloatingPointError("non-finite causal effect; check the eps guard")
    meta = {
        "mode": mode,
        "positions": positions if isinstance(positions, str) else list(map(int, positions)),
        "eps": eps,
        "n_pairs": len(pairs),
        "skipped": skipped,
        "dataset_hash": pairs_hash(pairs),
        "model_hash": state.fingerprint(),
    }
    return EffectMap(nodes, mean, std, np.full(len(nodes), n_used), meta)


def select_key(effects: EffectMap | dict, tau: float = 0.05, top_k: int | None = None,
               top_k_mlps: int | None = None) -> KeySelection:
    """Nodes with mean effect ``<= -tau``, strongest first; ties keep node order."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    items = effects.as_dict() if isinstance(effects, EffectMap) else dict(effects)
    chosen = [(n, e) for n, e in items.items() if e <= -tau]
    chosen.sort(key=lambda ne: (-abs(ne[1]), ne[0]))
    heads = [n for n, _ in chosen if n.is_head]
    mlps = [n for n, _ in chosen if not n.is_head]
    if top_k is not None:
        heads = heads[:top_k]
    if top_k_mlps is not None:
        mlps = mlps[:top_k_mlps]
    src = effects.digest() if isinstance(effects, EffectMap) else ""
    return KeySelection(tau, heads, mlps, src)


# ablation -------------------------------------------------------------------

def mean_end_activations(state: ModelState, pairs: Sequence[PromptPair], vocab: Vocabulary,
                         nodes: Sequence[NodeId], which: str = "cf",
                         batch_size: int = 256) -> dict[NodeId, np.ndarray]:
    """Average END output of each node over ``pairs``."""
    if not pairs:
        raise ValueError("mean ablation needs a nonempty counterfactual set")
    total = {n: np.zeros(state.config.d_model) for n in nodes}
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        toks, ends, _ = encode_batch(chunk, vocab, which)
        _, c = forward(state, toks, ends=ends)
        for n in nodes:
            total[n] += c.at_end(n).sum(axis=0)
    return {n: v / len(pairs) for n, v in total.items()}


def ablation_set(means: dict[NodeId, np.ndarray], nodes: Iterable[NodeId]) -> InterventionSet:
    iv = InterventionSet()
    for n in nodes:
        iv[n] = Replace(means[n], "end")
    return iv


def mean_ablate(state: ModelState, nodes: Iterable[NodeId], cf_pairs: Sequence[PromptPair],
                eval_pairs: Sequence[PromptPair], vocab: Vocabulary, means=None) -> float:
    """Answer accuracy on ``eval_pairs`` with ``nodes`` pinned to their mean counterfactual END output."""
    nodes = list(dict.fromkeys(nodes))
    if not nodes:
        return accuracy(state, eval_pairs, vocab)
    for n in nodes:
        n.check(state.config)
    if means is None:
        means = mean_end_activations(state, cf_pairs, vocab, nodes)
    return accuracy(state, eval_pairs, vocab, ablation_set(means, nodes))


def knockout_order(effects: EffectMap, ordering: str = "effect", seed: int | None = 0,
                   heads_only: bool = True) -> list[NodeId]:
    """Effect rank puts the most negative effects first; random rank is a seeded shuffle."""
    if ordering not in ORDERINGS:
        raise ValueError(f"unknown ordering {ordering!r}; expected one of {ORDERINGS}")
    pool = [(n, m) for n, m in zip(effects.nodes, effects.mean) if n.is_head or not heads_only]
    if ordering == "effect":
        neg = sorted((nm for nm in pool if nm[1] < 0), key=lambda nm: (-abs(nm[1]), nm[0]))
        rest = sorted((nm for nm in pool if nm[1] >= 0), key=lambda nm: (nm[1], nm[0]))
        return [n for n, _ in neg + rest]
    rng = np.random.default_rng(seed)
    return [pool[i][0] for i in rng.permutation(len(pool))]


def knockout_curve(state: ModelState, effects: EffectMap, cf_pairs: Sequence[PromptPair],
                   eval_pairs: Sequence[PromptPair], vocab: Vocabulary, ordering: str = "effect",
                   k_max: int | None = None, seed: int | None = 0, heads_only: bool = True,
                   ks: Sequence[int] | None = None) -> KnockoutCurve:
    """Accuracy after cumulatively mean-ablating the first k nodes of an ordering."""
    order = knockout_order(effects, ordering, seed, heads_only)
    k_max = len(order) if k_max is None else k_max
    if k_max > len(order):
        raise ValueError(f"k_max={k_max} exceeds the {len(order)} available nodes")
    ks = list(range(k_max + 1)) if ks is None else sorted(set(int(k) for k in ks) | {0})
    if ks[-1] > k_max:
        raise ValueError(f"k={ks[-1]} exceeds k_max={k_max}")
    means = mean_end_activations(state, cf_pairs, vocab, order[:k_max]) if k_max else {}
    accs = [mean_ablate(state, order[:k], cf_pairs, eval_pairs, vocab, means) for k in ks]
    return KnockoutCurve(ordering, seed if ordering == "random" else None, order[:k_max], ks, accs)


@dataclass
class TransferResult:
    baseline: float
    knocked: float
    random_knocked: list[float]
    n_nodes: int

    @staticmethod
    def _drop(base: float, after: float) -> float:
        return (base - after) / base if base > 0 else 0.0

    @property
    def relative_drop(self) -> float:
        return self._drop(self.baseline, self.knocked)

    @property
    def random_relative_drop(self) -> float:
        drops = [self._drop(self.baseline, a) for a in self.random_knocked]
        return float(np.mean(drops)) if drops else 0.0

    @property
    def ratio(self) -> float:
        r = self.random_relative_drop
        return math.inf if r <= 0 and self.relative_drop > 0 else (self.relative_drop / r if r > 0 else 0.0)

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "knocked": self.knocked,
            "random_knocked": self.random_knocked,
            "n_nodes": self.n_nodes,
            "relative_drop": self.relative_drop,
            "random_relative_drop": self.random_relative_drop,
        }


def random_heads(cfg, k: int, seed: int) -> list[NodeId]:
    pool = all_nodes(cfg, heads=True, mlps=False)
    rng = np.random.default_rng(seed)
    return [pool[i] for i in rng.permutation(len(pool))[:k]]


def transfer_knockout(state: ModelState, nodes: Sequence[NodeId], cf_pairs: Sequence[PromptPair],
                      eval_pairs: Sequence[PromptPair], vocab: Vocabulary,
                      random_seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> TransferResult:
    """Knock out ``nodes`` (found elsewhere) on ``eval_pairs`` and compare with random head sets of the same size."""
    nodes = list(nodes)
    all_heads = all_nodes(state.config, heads=True, mlps=False)
    needed = list(dict.fromkeys(nodes + all_heads))
    means = mean_end_activations(state, cf_pairs, vocab, needed)
    base = accuracy(state, eval_pairs, vocab)
    knocked = mean_ablate(state, nodes, cf_pairs, eval_pairs, vocab, means)
    rand = [mean_ablate(state, random_heads(state.config, len(nodes), s), cf_pairs, eval_pairs, vocab, means)
            for s in random_seeds]
    return TransferResult(base, knocked, rand, len(nodes))


def top_nodes(effects: EffectMap, k_heads: int, k_mlps: int = 0) -> KeySelection:
    """The ``k_heads`` heads and ``k_mlps`` MLPs with the most negative effects, ignoring the threshold."""
    heads = [n for n in knockout_order(effects, "effect", heads_only=True)][:k_heads]
    mlp_pool = sorted(((n, m) for n, m in zip(effects.nodes, effects.mean) if not n.is_head),
                      key=lambda nm: (nm[1], nm[0]))
    return KeySelection(0.0, heads, [n for n, _ in mlp_pool[:k_mlps]], effects.digest())
