"""Arithmetic sentence templates, digit-level tokenizer and dataset files.

Each template yields a reference prompt ending right before the answer slot
``{C}`` and a counterfactual twin in which the calculation-bearing word or
symbol is swapped for a null word (``nothing``) or a meaningless symbol
(``@``). Both prompts tokenize to the same length, so positions line up.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

OPS = ("add", "sub", "mul", "div")
FAMILIES = ("equation", "statement", "qa", "timespan", "accumulation")
BASE_FAMILIES = ("equation", "statement", "qa")

BOS, PAD = "<bos>", "<pad>"
DIGITS = tuple("0123456789")

NULL_WORDS = ("none", "nothing", "nil", "void", "blank", "empty", "null")
NULL_SYMBOLS = ("<", ">", "#", "&", "~", "|", "@")

SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
VERB = {"add": "plus", "sub": "minus", "mul": "times", "div": "over"}
NOUN = {"add": "addition", "sub": "difference", "mul": "product", "div": "ratio"}
QA_NOUN = {"add": "sum", "sub": "difference", "mul": "product", "div": "ratio"}

EVENTS = ("war", "conflict", "festival", "meeting", "project", "journey", "trial", "campaign",
          "voyage", "program")
# (bare, past) forms
SPAN_VERBS = (("last", "lasted"), ("span", "spanned"), ("extend", "extended"), ("run", "ran"),
              ("continue", "continued"))
MONTHS = ("Jan.", "Feb.", "Mar.", "Apr.", "May", "Jun.", "Jul.", "Aug.", "Sep.", "Oct.", "Nov.", "Dec.")
OBJECTS = ("apples", "oranges", "pears", "bananas", "peaches", "lemons", "plums", "mangoes",
           "cherries", "grapes")
GAIN_VERBS = ("got", "obtained", "acquired", "bought", "received", "collected", "gathered")
NAMES = (
    "James", "Mary", "John", "Patricia", "Robert", "Jennifer", "Michael", "Linda", "William",
    "Elizabeth", "David", "Barbara", "Richard", "Susan", "Joseph", "Jessica", "Thomas", "Sarah",
    "Charles", "Karen", "Chris", "Nancy", "Daniel", "Lisa", "Matthew", "Betty", "Anthony",
    "Margaret", "Mark", "Sandra", "Donald", "Ashley", "Steven", "Kimberly", "Paul", "Emily",
    "Andrew", "Donna", "Joshua", "Michelle", "Kenneth", "Dorothy", "Kevin", "Carol", "Brian",
    "Amanda", "George", "Melissa", "Edward", "Deborah", "Ronald", "Stephanie", "Timothy",
    "Rebecca", "Jason", "Sharon", "Jeffrey", "Laura", "Ryan", "Cynthia", "Jacob", "Kathleen",
    "Gary", "Amy", "Nicholas", "Shirley", "Eric", "Angela", "Jonathan", "Helen", "Stephen",
    "Anna", "Larry", "Brenda", "Justin", "Pamela", "Scott", "Nicole", "Brandon", "Emma",
    "Benjamin", "Samantha", "Samuel", "Katherine", "Gregory", "Christine", "Frank", "Debra",
    "Alexander", "Rachel", "Raymond", "Catherine", "Patrick", "Carolyn", "Jack", "Janet",
    "Dennis", "Ruth", "Jerry", "Maria",
)


class GenerationError(ValueError):
    """Operands cannot satisfy the template's arithmetic constraints."""


class OOVError(KeyError):
    """A word is missing from the vocabulary."""


class ConfigError(ValueError):
    pass


# tokenizer ------------------------------------------------------------------

_TOKEN_RE = re.compile(r"<[a-z]+>|\d|[A-Za-z]+|\S")
_NO_SPACE_BEFORE = {".", ",", "?", ":", "'"}


def tokenize(text: str) -> list[str]:
    """Split on words, single digits and single punctuation characters."""
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Sequence[str]) -> str:
    out: list[str] = []
    prev = None
    for tok in tokens:
        if tok in (BOS, PAD):
            continue
        if prev is None:
            out.append(tok)
        elif tok in _NO_SPACE_BEFORE or prev == "'" or (tok.isdigit() and prev.isdigit()):
            out.append(tok)
        else:
            out.append(" " + tok)
        prev = tok
    return "".join(out)


def normalize(text: str) -> str:
    """Whitespace normalization under which ``detokenize(tokenize(x)) == normalize(x)``."""
    text = " ".join(text.split())
    text = re.sub(r"\s+([.,?:'])", r"\1", text)
    text = re.sub(r"'\s+", "'", text)
    text = re.sub(r"(?<=\d) (?=\d)", "", text)
    return text


# templates ------------------------------------------------------------------

@dataclass(frozen=True)
class Template:
    id: str
    op: str
    family: str
    pattern: str
    # pattern words carrying the calculation logic, swapped in the counterfactual
    keywords: tuple[str, ...]

    def __post_init__(self):
        if self.pattern.count("{A}") != 1 or self.pattern.count("{B}") != 1:
            raise ValueError(f"{self.id}: pattern needs exactly one {{A}} and one {{B}}")
        if not self.pattern.rstrip().endswith("{C}"):
            raise ValueError(f"{self.id}: answer slot must be terminal")


def _base_templates() -> list[Template]:
    out = []
    for op in OPS:
        s, v, n, qn = SYMBOL[op], VERB[op], NOUN[op], QA_NOUN[op]
        rows = [
            ("equation", f"{{A}} {s} {{B}} = {{C}}", (s,)),
            ("statement", f"{{A}} {v} {{B}} equals to {{C}}", (v,)),
            ("statement", f"The {n} of {{A}} and {{B}} is {{C}}", (n,)),
            ("statement", f"The {n} of {{A}} and {{B}} equals to {{C}}", (n,)),
            ("statement", f"{{A}} {v} {{B}} is equal to {{C}}", (v,)),
            ("qa", f"Q: How much is {{A}} {v} {{B}}? A: {{C}}", (v,)),
            ("qa", f"Q: What is {{A}} {v} {{B}}? A: {{C}}", (v,)),
            ("qa", f"Q: What is the result of {{A}} {v} {{B}}? A: {{C}}", (v,)),
            ("qa", f"Q: What is the {qn} of {{A}} and {{B}}? A: {{C}}", (qn,)),
        ]
        for k, (fam, pat, kw) in enumerate(rows):
            out.append(Template(f"{op}-{k}", op, fam, pat, kw))
    return out


def _extra_templates() -> list[Template]:
    span = [
        "The <EVENT> <VERBED> {A} years from the year <YYY>{B} to the year <YYY>{C}",
        "The <EVENT> <VERBED> {A} years from <YYY>{B} to <YYY>{C}",
        "The <EVENT> <VERBED> {A} days from <MONTH> {B} to <MONTH> {C}",
        "The <EVENT> will <VERB> {A} days from <MONTH> {B} to <MONTH> {C}",
        "The <EVENT> <VERBED> {A} hours from {B} pm to {C}",
        "The <EVENT> will <VERB> {A} hours from {B} pm to {C}",
        "The <EVENT> <VERBED> {A} hours from {B} am to {C}",
        "The <EVENT> will <VERB> {A} hours from {B} am to {C}",
    ]
    acc = [
        "<NAME> has {A} <OBJECT>, then <NAME> <GAIN> {B} <OBJECT>. "
        "What's the total number of <OBJECT> that <NAME> has? The answer is {C}",
        "<NAME> <GAIN> {A} <OBJECT>, and <NAME2> <GAIN> {B} <OBJECT>. "
        "What's the total number of <OBJECT> that they <GAIN>? The answer is {C}",
        "<NAME> has {A} <OBJECT>, and <NAME2> has {B} <OBJECT>. "
        "What's the total number of <OBJECT> that they have? The answer is {C}",
        "<NAME> <GAIN> {A} <OBJECT> yesterday, and <NAME> <GAIN> {B} <OBJECT> today. "
        "What's the total number of <OBJECT> that <NAME> <GAIN>? The answer is {C}",
    ]
    out = [Template(f"add-span-{k}", "add", "timespan", p, ("<VERB>", "<VERBED>")) for k, p in enumerate(span)]
    out += [Template(f"add-acc-{k}", "add", "accumulation", p, ("total",)) for k, p in enumerate(acc)]
    return out


TEMPLATES: tuple[Template, ...] = tuple(_base_templates() + _extra_templates())
TEMPLATES_BY_ID = {t.id: t for t in TEMPLATES}


def templates_for(ops: Sequence[str] = OPS, families: Sequence[str] = FAMILIES) -> list[Template]:
    return [t for t in TEMPLATES if t.op in ops and t.family in families]


# vocabulary -----------------------------------------------------------------

def _template_words() -> set[str]:
    words: set[str] = set()
    for t in TEMPLATES:
        body = re.sub(r"\{[ABC]\}|<[A-Z0-9]+>", " ", t.pattern)
        words.update(tokenize(body))
    return words


class Vocabulary:
    """Bijective token <-> id map. Every digit is its own token."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def default(cls) -> "Vocabulary":
        pool: set[str] = set(_template_words())
        pool.update(NULL_WORDS, NULL_SYMBOLS, EVENTS, OBJECTS, GAIN_VERBS, NAMES)
        for bare, past in SPAN_VERBS:
            pool.update((bare, past))
        for m in MONTHS:
            pool.update(tokenize(m))
        pool.difference_update(DIGITS)
        return cls([BOS, PAD, *DIGITS, *sorted(pool)])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.ids

    @property
    def bos(self) -> int:
        return self.ids[BOS]

    @property
    def pad(self) -> int:
        return self.ids[PAD]

    def digit_ids(self) -> list[int]:
        return [self.ids[d] for d in DIGITS]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        missing = [t for t in tokens if t not in self.ids]
        if missing:
            raise OOVError(f"out-of-vocabulary: {sorted(set(missing))}")
        return [self.ids[t] for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> str:
        return json.dumps(self.ids, indent=1, sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        m = json.loads(Path(path).read_text())
        toks = [None] * len(m)
        for t, i in m.items():
            toks[i] = t
        return cls(toks)


# instantiation --------------------------------------------------------------

@dataclass
class PromptPair:
    template_id: str
    op: str
    family: str
    a: int
    b: int
    answer: str
    ref_tokens: list[str]
    cf_tokens: list[str]
    subst_positions: list[int]
    a_positions: list[int]
    b_positions: list[int]

    @property
    def answer_first(self) -> str:
        return self.answer[0]

    @property
    def end(self) -> int:
        return len(self.ref_tokens) - 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "PromptPair":
        return cls(**json.loads(line))


def compute(op: str, a: int, b: int) -> int:
    if op == "add":
        return a + b
    if op == "sub":
        if a < b:
            raise GenerationError(f"sub needs A >= B, got {a} - {b}")
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        if b == 0 or a % b:
            raise GenerationError(f"div needs B | A, got {a} / {b}")
        return a // b
    raise GenerationError(f"unknown op {op!r}")


def _fill_words(t: Template, rng: np.random.Generator) -> dict[str, str]:
    bare, past = SPAN_VERBS[rng.integers(len(SPAN_VERBS))]
    names = rng.choice(len(NAMES), size=2, replace=False)
    return {
        "<EVENT>": EVENTS[rng.integers(len(EVENTS))],
        "<VERB>": bare,
        "<VERBED>": past,
        "<MONTH>": MONTHS[rng.integers(len(MONTHS))],
        "<YYY>": str(100 + int(rng.integers(100))),
        "<OBJECT>": OBJECTS[rng.integers(len(OBJECTS))],
        "<GAIN>": GAIN_VERBS[rng.integers(len(GAIN_VERBS))],
        "<NAME>": NAMES[names[0]],
        "<NAME2>": NAMES[names[1]],
    }


def instantiate(template: Template, a: int, b: int, rng: np.random.Generator,
                substitute: str | None = None) -> PromptPair:
    """Build the reference/counterfactual pair for ``template`` with operands ``a``, ``b``.

    ``substitute`` pins the counterfactual word instead of drawing it from the
    null pools.
    """
    c = compute(template.op, a, b)
    words = _fill_words(template, rng)
    prompt = template.pattern[: template.pattern.rindex("{C}")]
    # split into literal chunks and slots, keeping track of token positions
    pieces = re.split(r"(\{[AB]\}|<[A-Z0-9]+>)", prompt)
    ref: list[str] = [BOS]
    a_pos: list[int] = []
    b_pos: list[int] = []
    subst: list[int] = []
    for piece in pieces:
        if not piece:
            continue
        if piece in ("{A}", "{B}"):
            toks = tokenize(str(a if piece == "{A}" else b))
            (a_pos if piece == "{A}" else b_pos).extend(range(len(ref), len(ref) + len(toks)))
        elif piece.startswith("<"):
            toks = tokenize(words[piece])
            if piece in template.keywords:
                subst.extend(range(len(ref), len(ref) + len(toks)))
        else:
            toks = tokenize(piece)
            for k, tok in enumerate(toks):
                if tok in template.keywords:
                    subst.append(len(ref) + k)
        ref.extend(toks)
    if not subst:
        raise GenerationError(f"{template.id}: no calculation keyword found in prompt")
    cf = list(ref)
    for p in subst:
        if substitute is not None:
            cf[p] = substitute
        elif ref[p].isalpha():
            cf[p] = NULL_WORDS[rng.integers(len(NULL_WORDS))]
        else:
            cf[p] = NULL_SYMBOLS[rng.integers(len(NULL_SYMBOLS))]
    return PromptPair(template.id, template.op, template.family, int(a), int(b), str(c),
                      ref, cf, subst, a_pos, b_pos)


def valid_operands(op: str, lo: int, hi: int, single_token: bool) -> list[tuple[int, int]]:
    """All ``(A, B)`` in ``[lo, hi]^2`` meeting the op's constraints.

    Division pairs are built as ``A = B * C`` with ``A`` in range, so every
    answer is an integer.
    """
    out = []
    for a in range(lo, hi + 1):
        for b in range(lo, hi + 1):
            try:
                c = compute(op, a, b)
            except GenerationError:
                continue
            if single_token and c > 9:
                continue
            out.append((a, b))
    return out


# datasets -------------------------------------------------------------------

@dataclass
class DatasetSpec:
    ops: tuple[str, ...] = ("add",)
    families: tuple[str, ...] = BASE_FAMILIES
    count: int = 1000
    operand_range: tuple[int, int] = (1, 9)
    single_token_answer: bool = True
    seed: int = 0
    val_fraction: float = 0.1
    holdout_families: tuple[str, ...] = ()

    def __post_init__(self):
        self.ops = tuple(self.ops)
        self.families = tuple(self.families)
        self.operand_range = tuple(self.operand_range)
        self.holdout_families = tuple(self.holdout_families)
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        bad = [o for o in self.ops if o not in OPS] + [f for f in self.families if f not in FAMILIES]
        if bad:
            raise ConfigError(f"unknown ops/families: {bad}")
        lo, hi = self.operand_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad operand range {self.operand_range}")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Dataset:
    spec: DatasetSpec
    pairs: list[PromptPair]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def split(self, name: str) -> list[PromptPair]:
        return [self.pairs[i] for i in self.splits[name]]

    def manifest(self) -> dict:
        per_op: dict[str, int] = {}
        for p in self.pairs:
            per_op[p.op] = per_op.get(p.op, 0) + 1
        return {
            "seed": self.spec.seed,
            "config": asdict(self.spec),
            "config_hash": self.spec.config_hash(),
            "count": len(self.pairs),
            "per_op": per_op,
            "splits": self.splits,
            "shards": [{"shard": 0, "seed": self.spec.seed}],
        }

    def save(self, path) -> Path:
        """Write ``<path>`` (JSONL) and ``<path>.manifest.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, "".join(p.to_json() + "\n" for p in self.pairs))
        _atomic_write(manifest_path(path), json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n")
        return path


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def load_dataset(path) -> Dataset:
    path = Path(path)
    pairs = [PromptPair.from_json(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
    mpath = manifest_path(path)
    if mpath.exists():
        man = json.loads(mpath.read_text())
        cfg = man["config"]
        spec = DatasetSpec(**cfg)
        splits = man["splits"]
    else:
        spec = DatasetSpec(count=max(1, len(pairs)))
        splits = {"train": list(range(len(pairs)))}
    return Dataset(spec, pairs, splits)


def build_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic generation under ``spec.seed``.

    Templates are dealt round-robin from a shuffled deck so every template of
    every requested op appears once ``count`` covers the deck. Train and
    validation are disjoint at the prompt-text level; templates of
    ``holdout_families`` go to a separate ``heldout`` split.
    """
    rng = np.random.default_rng(spec.seed)
    temps = templates_for(spec.ops, spec.families)
    lo, hi = spec.operand_range
    operands = {op: valid_operands(op, lo, hi, spec.single_token_answer) for op in spec.ops}
    temps = [t for t in temps if operands[t.op]]
    if not temps:
        raise ConfigError("no template/operand combination survives the filters")
    deck: list[Template] = []
    pairs = []
    for _ in range(spec.count):
        if not deck:
            deck = [temps[i] for i in rng.permutation(len(temps))]
        t = deck.pop()
        choices = operands[t.op]
        a, b = choices[rng.integers(len(choices))]
        pairs.append(instantiate(t, a, b, rng))

    held = [i for i, p in enumerate(pairs) if p.family in spec.holdout_families]
    rest = [i for i, p in enumerate(pairs) if p.family not in spec.holdout_families]
    texts = sorted({" ".join(pairs[i].ref_tokens) for i in rest})
    order = rng.permutation(len(texts))
    n_val = int(round(spec.val_fraction * len(texts)))
    val_texts = {texts[k] for k in order[:n_val]}
    val = [i for i in rest if " ".join(pairs[i].ref_tokens) in val_texts]
    train = [i for i in rest if " ".join(pairs[i].ref_tokens) not in val_texts]
    return Dataset(spec, pairs, {"train": train, "validation": val, "heldout": held})


# batching -------------------------------------------------------------------

def encode_batch(pairs: Sequence[PromptPair], vocab: Vocabulary, which: str = "ref"):
    """Right-padded ``[B, N]`` ids, END indices and answer-token ids."""
    seqs = [vocab.encode(p.ref_tokens if which == "ref" else p.cf_tokens) for p in pairs]
    n = max(len(s) for s in seqs)
    toks = np.full((len(seqs), n), vocab.pad, dtype=np.int64)
    for k, s in enumerate(seqs):
        toks[k, : len(s)] = s
    ends = np.array([len(s) - 1 for s in seqs], dtype=np.int64)
    answers = np.array([vocab.ids[p.answer_first] for p in pairs], dtype=np.int64)
    return toks, ends, answers
