"""Reading what key nodes do.

Attention profiles group the END query row of a head by token role. MLP
probes compare the residual stream entering an MLP, and the MLP's own
contribution, against unembedding columns of the operand and answer digits.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import DIGITS, PromptPair, Vocabulary, encode_batch, tokenize
from .model import ModelState, NodeId, forward
from .trainer import correct_pairs

ROLES = ("operand-A", "operand-B", "operator", "other")
TRACKED = ("A", "B", "C", "other")
NORM_FLOOR = 1e-10


def _num(x) -> str:
    return repr(float(x))


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def role_labels(pair: PromptPair) -> np.ndarray:
    """Role index (into ``ROLES``) of every prompt position; later roles never overwrite earlier ones."""
    labels = np.full(len(pair.ref_tokens), 3, dtype=np.int64)
    labels[pair.subst_positions] = 2
    labels[pair.b_positions] = 1
    labels[pair.a_positions] = 0
    return labels


@dataclass
class AttentionProfile:
    """END-row attention of one head, grouped by role.

    ``mass[r]`` is the total attention on role ``r`` (averaged over samples);
    ``mean[r]`` is the attention per position of that role.
    """

    head: NodeId
    mass: dict[str, float]
    mean: dict[str, float]
    n_samples: int
    rows: list[np.ndarray] | None = None

    @property
    def operand_mass(self) -> float:
        return self.mass["operand-A"] + self.mass["operand-B"]

    def to_dict(self) -> dict:
        return {"head": self.head.label(), "mass": self.mass, "mean": self.mean, "n": self.n_samples}

    def to_csv(self) -> str:
        rows = [["head", "role", "mass", "mean", "n"]]
        rows += [[self.head.label(), r, _num(self.mass[r]), _num(self.mean[r]), self.n_samples] for r in ROLES]
        return _csv(rows)


def attention_profile(state: ModelState, head: NodeId, samples: Sequence[PromptPair], vocab: Vocabulary,
                      keep_rows: bool = False, batch_size: int = 256) -> AttentionProfile:
    head.check(state.config)
    if not head.is_head:
        raise ValueError(f"{head.label()} is not an attention head")
    if not samples:
        raise ValueError("attention profile needs at least one sample")
    mass = np.zeros(len(ROLES))
    per_tok = np.zeros(len(ROLES))
    seen = np.zeros(len(ROLES))
    kept = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        toks, ends, _ = encode_batch(chunk, vocab)
        _, c = forward(state, toks, ends=ends)
        pat = c.attn[head.layer][:, head.head]
        for k, p in enumerate(chunk):
            row = pat[k, ends[k], : ends[k] + 1]
            labels = role_labels(p)
            sums = np.bincount(labels, weights=row, minlength=len(ROLES))
            counts = np.bincount(labels, minlength=len(ROLES))
            mass += sums
            has = counts > 0
            per_tok[has] += sums[has] / counts[has]
            seen += has
            if keep_rows:
                kept.append(row.copy())
    n = len(samples)
    mean = np.divide(per_tok, seen, out=np.zeros_like(per_tok), where=seen > 0)
    return AttentionProfile(
        head,
        {r: float(m / n) for r, m in zip(ROLES, mass)},
        {r: float(m) for r, m in zip(ROLES, mean)},
        n,
        kept if keep_rows else None,
    )


def cosine(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine along the last axis and a flag where either norm is below the floor (value 0 there)."""
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    den = nu * nv
    bad = (nu < NORM_FLOOR) | (nv < NORM_FLOOR)
    val = np.divide((u * v).sum(-1), den, out=np.zeros_like(den), where=~bad)
    return np.clip(val, -1.0, 1.0), bad


@dataclass
class ProbeSeries:
    """Per-layer cosines against the A, B, C and other-digit unembedding columns.

    ``per_sample`` is ``[S, L, 4]`` and ``flagged`` marks ``[S, L]`` entries
    whose probed vector had (near-)zero norm.
    """

    kind: str
    per_sample: np.ndarray
    flagged: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> np.ndarray:
        """[L, 4] average over samples."""
        if not len(self.per_sample):
            return np.zeros(self.per_sample.shape[1:])
        return self.per_sample.mean(axis=0)

    def series(self, token: str) -> np.ndarray:
        return self.mean[:, TRACKED.index(token)]

    def c_beats_other(self, layer: int = -1) -> np.ndarray:
        """Per sample: does the C-token value exceed the other-digit mean at ``layer``?"""
        s = self.per_sample[:, layer]
        return s[:, 2] > s[:, 3]

    def to_csv(self) -> str:
        rows = [["layer", *TRACKED, "flagged"]]
        for i, m in enumerate(self.mean):
            rows.append([i, *map(_num, m), int(self.flagged[:, i].sum())])
        return _csv(rows)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": self.mean.tolist(), "flagged": self.flagged.sum(0).tolist(),
                "n": int(len(self.per_sample)), "meta": self.meta}


def _digit_token(vocab: Vocabulary, value: int | str) -> int:
    # multi-digit numbers are probed through their leading digit
    return vocab.ids[str(value)[0]]


def _probe(state: ModelState, samples: Sequence[PromptPair], vocab: Vocabulary, kind: str,
           correct_only: bool, metric: str, batch_size: int) -> ProbeSeries:
    if metric not in ("cosine", "dot"):
        raise ValueError(f"unknown metric {metric!r}")
    pool = correct_pairs(state, list(samples), vocab) if correct_only else list(samples)
    L = state.config.n_layers
    W_U = state["unembed.W_U"].data  # [d, V]
    digit_ids = np.array([vocab.ids[d] for d in DIGITS])
    out = np.zeros((len(pool), L, len(TRACKED)))
    flags = np.zeros((len(pool), L), dtype=bool)
    for start in range(0, len(pool), batch_size):
        chunk = pool[start:start + batch_size]
        toks, ends, _ = encode_batch(chunk, vocab)
        _, c = forward(state, toks, ends=ends)
        rows = np.arange(len(chunk))
        ids = np.array([[_digit_token(vocab, p.a), _digit_token(vocab, p.b), vocab.ids[p.answer_first]] for p in chunk])
        for i in range(L):
            src = c.mlp_in[i] if kind == "reception" else c.mlp_contrib[i]
            vec = src[rows, ends]  # [B, d]
            cols = W_U.T[digit_ids]  # [10, d]
            if metric == "cosine":
                sims, bad = cosine(vec[:, None, :], cols[None, :, :])  # [B, 10]
                flag = bad.any(axis=1)
            else:
                sims = vec @ cols.T
                flag = np.linalg.norm(vec, axis=-1) < NORM_FLOOR
            lookup = {int(t): k for k, t in enumerate(digit_ids)}
            for b in range(len(chunk)):
                own = [lookup[int(t)] for t in ids[b]]
                others = [k for k in range(len(digit_ids)) if k not in own]
                out[start + b, i, :3] = sims[b, own]
                out[start + b, i, 3] = sims[b, others].mean() if others else 0.0
            flags[start:start + len(chunk), i] = flag
    meta = {"correct_only": correct_only, "metric": metric, "n_input": len(samples)}
    return ProbeSeries(kind, out, flags, meta)


def mlp_reception(state: ModelState, samples: Sequence[PromptPair], vocab: Vocabulary,
                  correct_only: bool = True, metric: str = "cosine", batch_size: int = 256) -> ProbeSeries:
    """Cosine between the residual entering each MLP (at END) and digit unembedding columns."""
    return _probe(state, samples, vocab, "reception", correct_only, metric, batch_size)


def mlp_generation(state: ModelState, samples: Sequence[PromptPair], vocab: Vocabulary,
                   correct_only: bool = True, metric: str = "cosine", batch_size: int = 256) -> ProbeSeries:
    """Cosine between each MLP's own contribution (output minus input, at END) and digit columns."""
    return _probe(state, samples, vocab, "generation", correct_only, metric, batch_size)


@dataclass
class TokenTrajectory:
    """Digits ranked per layer by how strongly that layer's MLP writes them."""

    tokens: list[str]
    ranking: list[list[tuple[str, float]]]
    prediction: str
    answer: str | None
    settled_layer: int | None

    def top(self, layer: int) -> str:
        return self.ranking[layer][0][0]

    def to_dict(self) -> dict:
        return {
            "prompt": self.tokens,
            "prediction": self.prediction,
            "answer": self.answer,
            "settled_layer": self.settled_layer,
            "layers": [[{"token": t, "score": s} for t, s in r] for r in self.ranking],
        }

    def to_csv(self) -> str:
        rows = [["layer", "rank", "token", "score"]]
        for i, r in enumerate(self.ranking):
            rows += [[i, k, t, _num(s)] for k, (t, s) in enumerate(r)]
        return _csv(rows)


def token_trajectory(state: ModelState, prompt: str | Sequence[str], vocab: Vocabulary,
                     answer: str | None = None, metric: str = "cosine") -> TokenTrajectory:
    """Rank digit tokens at every layer by the MLP contribution's alignment with their unembedding.

    ``settled_layer`` is the first layer from which the target (``answer`` if
    given, else the model's own prediction) stays top-ranked through the last
    layer. ``prediction`` always comes from the forward logits.
    """
    toks = tokenize(prompt) if isinstance(prompt, str) else list(prompt)
    if not toks or toks[0] != vocab.tokens[vocab.bos]:
        toks = [vocab.tokens[vocab.bos]] + toks
    ids = np.array(vocab.encode(toks))
    logits, c = forward(state, ids[None, :])
    prediction = vocab.tokens[int(logits.data[0, -1].argmax())]
    W_U = state["unembed.W_U"].data
    digit_ids = [vocab.ids[d] for d in DIGITS]
    cols = W_U.T[digit_ids]
    ranking = []
    for i in range(state.config.n_layers):
        diff = c.mlp_contrib[i][0, -1]
        if metric == "cosine":
            scores, _ = cosine(diff[None, :], cols)
        else:
            scores = cols @ diff
        order = sorted(range(len(digit_ids)), key=lambda k: (-scores[k], digit_ids[k]))
        ranking.append([(DIGITS[k], float(scores[k])) for k in order])
    target = answer if answer is not None else prediction
    settled = None
    for i in range(len(ranking) - 1, -1, -1):
        if ranking[i][0][0] != target:
            break
        settled = i
    return TokenTrajectory(toks, ranking, prediction, answer, settled)
