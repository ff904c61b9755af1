"""Decoder-only transformer with per-node caching and hard interventions.

Pre-layernorm blocks::

    resid_mid  = resid_pre + sum_j head_{i,j}(LN1(resid_pre))
    resid_post = resid_mid + MLP_i(LN2(resid_mid))
    logits     = LN_f(resid_final) @ W_U

Per-head weights are stored as ``[H, d, d/H]`` (Q, K, V) and ``[H, d/H, d]``
(O) so each head's block is directly addressable. A head's cached output is
its contribution to the residual stream, i.e. already multiplied by its own
``W_O`` block.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 8
    d_model: int = 64
    d_mlp: int = 256
    vocab_size: int = 256
    max_seq: int = 64
    layernorm_eps: float = 1e-5
    act: str = "gelu"

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_mlp", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.act not in nx.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True, order=True)
class NodeId:
    """A head ``(layer, head)`` or an MLP ``(layer)``; ``head`` is None for MLPs."""

    layer: int
    kind: str = "head"
    head: int | None = None

    def __post_init__(self):
        if self.kind not in ("head", "mlp"):
            raise ValueError(f"unknown node kind {self.kind!r}")
        if self.kind == "mlp" and self.head is not None:
            raise ValueError("MLP nodes carry no head index")
        if self.kind == "head" and self.head is None:
            raise ValueError("head nodes need a head index")

    @classmethod
    def Head(cls, layer: int, head: int) -> "NodeId":
        return cls(layer, "head", head)

    @classmethod
    def Mlp(cls, layer: int) -> "NodeId":
        return cls(layer, "mlp", None)

    @property
    def is_head(self) -> bool:
        return self.kind == "head"

    def label(self) -> str:
        return f"{self.layer}.{self.head}" if self.is_head else f"mlp{self.layer}"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        if text.startswith("mlp"):
            return cls.Mlp(int(text[3:]))
        layer, head = text.split(".")
        return cls.Head(int(layer), int(head))

    def check(self, cfg: ModelConfig) -> None:
        if not 0 <= self.layer < cfg.n_layers:
            raise UnknownNodeError(f"layer {self.layer} outside [0, {cfg.n_layers})")
        if self.is_head and not 0 <= self.head < cfg.n_heads:
            raise UnknownNodeError(f"head {self.head} outside [0, {cfg.n_heads})")


class UnknownNodeError(KeyError):
    pass


class InterventionError(ValueError):
    pass


class CorruptCheckpointError(ValueError):
    pass


def all_nodes(cfg: ModelConfig, heads: bool = True, mlps: bool = True) -> list[NodeId]:
    out = []
    for i in range(cfg.n_layers):
        if heads:
            out.extend(NodeId.Head(i, j) for j in range(cfg.n_heads))
        if mlps:
            out.append(NodeId.Mlp(i))
    return out


# parameters -----------------------------------------------------------------

def param_names(cfg: ModelConfig) -> list[str]:
    names = ["embed.tok", "embed.pos"]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        names += [p + s for s in ("ln1.gain", "ln1.bias", "attn.W_Q", "attn.W_K", "attn.W_V", "attn.W_O",
                                  "ln2.gain", "ln2.bias", "mlp.W_in", "mlp.b_in", "mlp.W_out", "mlp.b_out")]
    return names + ["ln_final.gain", "ln_final.bias", "unembed.W_U"]


HEAD_PARAMS = ("attn.W_Q", "attn.W_K", "attn.W_V", "attn.W_O")
MLP_PARAMS = ("mlp.W_in", "mlp.b_in", "mlp.W_out", "mlp.b_out")


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float64) -> "ModelState":
        rng = np.random.default_rng(seed)
        d, H, dh, m, V, N = (config.d_model, config.n_heads, config.d_head, config.d_mlp,
                             config.vocab_size, config.max_seq)
        depth = np.sqrt(2 * config.n_layers)

        def normal(shape, s):
            return (rng.standard_normal(shape) * s).astype(dtype)

        p = {"embed.tok": normal((V, d), 0.1), "embed.pos": normal((N, d), 0.1)}
        for i in range(config.n_layers):
            q = f"layers.{i}."
            p[q + "ln1.gain"] = np.ones(d, dtype)
            p[q + "ln1.bias"] = np.zeros(d, dtype)
            p[q + "attn.W_Q"] = normal((H, d, dh), 1 / np.sqrt(d))
            p[q + "attn.W_K"] = normal((H, d, dh), 1 / np.sqrt(d))
            p[q + "attn.W_V"] = normal((H, d, dh), 1 / np.sqrt(d))
            p[q + "attn.W_O"] = normal((H, dh, d), 1 / np.sqrt(d) / depth)
            p[q + "ln2.gain"] = np.ones(d, dtype)
            p[q + "ln2.bias"] = np.zeros(d, dtype)
            p[q + "mlp.W_in"] = normal((d, m), 1 / np.sqrt(d))
            p[q + "mlp.b_in"] = np.zeros(m, dtype)
            p[q + "mlp.W_out"] = normal((m, d), 1 / np.sqrt(m) / depth)
            p[q + "mlp.b_out"] = np.zeros(d, dtype)
        p["ln_final.gain"] = np.ones(d, dtype)
        p["ln_final.bias"] = np.zeros(d, dtype)
        p["unembed.W_U"] = normal((d, V), 1 / np.sqrt(d))
        return cls(config, {k: Tensor(v, name=k) for k, v in p.items()})

    def names(self) -> list[str]:
        return list(self.params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()})

    def astype(self, dtype) -> "ModelState":
        return ModelState(self.config, {k: Tensor(v.data.astype(dtype), name=k) for k, v in self.params.items()})

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def set_requires_grad(self, flag: bool | Iterable[str]) -> None:
        chosen = set(self.params) if flag is True else set() if flag is False else set(flag)
        for k, t in self.params.items():
            t.requires_grad = k in chosen
            t.grad = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()[:16]


def composed_matrices(state: ModelState, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(W_QK, W_OV)``, both ``[d, d]``.

    ``W_QK = W_Q W_K^T`` and ``W_OV = W_O W_V`` as written in the usual
    circuit notation; because ``W_V`` is ``[d, d/H]`` and ``W_O`` is
    ``[d/H, d]``, the OV product in row-vector convention is ``W_V @ W_O``.
    """
    NodeId.Head(layer, head).check(state.config)
    q = f"layers.{layer}.attn."
    wq = state[q + "W_Q"].data[head]
    wk = state[q + "W_K"].data[head]
    wv = state[q + "W_V"].data[head]
    wo = state[q + "W_O"].data[head]
    return wq @ wk.T, wv @ wo


# caching and interventions --------------------------------------------------

@dataclass
class ActivationCache:
    """Detached per-run activations, all with a leading batch axis.

    ``head_out[i]``  [B, N, H, d]  per-head residual contributions
    ``attn[i]``      [B, H, N, N]  attention patterns
    ``mlp_in[i]``    [B, N, d]     residual entering MLP i
    ``mlp_out[i]``   [B, N, d]     residual after MLP i adds its output
    ``mlp_contrib[i]`` [B, N, d]   MLP i output (= mlp_out - mlp_in)
    ``resid_pre[i]`` [B, N, d]     residual entering layer i
    """

    embed: np.ndarray
    head_out: list[np.ndarray] = field(default_factory=list)
    attn: list[np.ndarray] = field(default_factory=list)
    mlp_in: list[np.ndarray] = field(default_factory=list)
    mlp_out: list[np.ndarray] = field(default_factory=list)
    mlp_contrib: list[np.ndarray] = field(default_factory=list)
    resid_pre: list[np.ndarray] = field(default_factory=list)
    resid_final: np.ndarray | None = None
    logits: np.ndarray | None = None
    ends: np.ndarray | None = None

    def node_output(self, node: NodeId) -> np.ndarray:
        """[B, N, d] output of ``node`` at every position."""
        if node.is_head:
            return self.head_out[node.layer][:, :, node.head, :]
        return self.mlp_contrib[node.layer]

    def at_end(self, node: NodeId) -> np.ndarray:
        """[B, d] output of ``node`` at each sample's END position."""
        out = self.node_output(node)
        return out[np.arange(out.shape[0]), self.ends]


@dataclass
class Directive:
    """Overwrite one node's output before it enters the residual stream.

    ``kind`` is "replace" (patch in a foreign activation) or "freeze" (pin to
    a reference activation); both act identically in the forward pass.
    ``positions``: "end" (per-sample END, value ``[B, d]`` or ``[d]``),
    "all" (value ``[B, N, d]`` or ``[N, d]``) or a sequence of position
    indices shared by the batch (value ``[B, P, d]`` or ``[P, d]``).
    """

    value: np.ndarray
    kind: str = "replace"
    positions: object = "end"

    def __post_init__(self):
        if self.kind not in ("replace", "freeze"):
            raise InterventionError(f"unknown directive kind {self.kind!r}")


def Replace(value, positions="end") -> Directive:
    return Directive(np.asarray(value), "replace", positions)


def Freeze(value, positions="end") -> Directive:
    return Directive(np.asarray(value), "freeze", positions)


class InterventionSet(dict):
    """Mapping ``NodeId -> Directive``; one directive per node."""

    def __setitem__(self, node, directive):
        if not isinstance(node, NodeId) or not isinstance(directive, Directive):
            raise InterventionError("InterventionSet maps NodeId to Directive")
        if node in self:
            raise InterventionError(f"node {node.label()} already has a directive")
        super().__setitem__(node, directive)


def _directive_mask(directive: Directive, B: int, N: int, d: int, ends: np.ndarray, dtype):
    """Expand a directive to a ``[B, N]`` boolean mask and ``[B, N, d]`` values."""
    mask = np.zeros((B, N), dtype=bool)
    vals = np.zeros((B, N, d), dtype=dtype)
    v = np.asarray(directive.value, dtype=dtype)
    pos = directive.positions
    rows = np.arange(B)
    if isinstance(pos, str) and pos == "end":
        if v.shape not in ((B, d), (d,)):
            raise InterventionError(f"END directive value {v.shape}, expected {(B, d)} or {(d,)}")
        mask[rows, ends] = True
        vals[rows, ends] = np.broadcast_to(v, (B, d))
    elif isinstance(pos, str) and pos == "all":
        if v.shape not in ((B, N, d), (N, d)):
            raise InterventionError(f"all-position directive value {v.shape}, expected {(B, N, d)}")
        mask[:] = True
        vals[:] = np.broadcast_to(v, (B, N, d))
    else:
        idx = np.asarray(pos, dtype=int).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= N):
            raise InterventionError(f"positions {idx.tolist()} outside sequence of length {N}")
        P = idx.size
        if v.shape not in ((B, P, d), (P, d)):
            raise InterventionError(f"directive value {v.shape}, expected {(B, P, d)} or {(P, d)}")
        mask[:, idx] = True
        vals[:, idx] = np.broadcast_to(v, (B, P, d))
    return mask, vals


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    t = np.asarray(tokens)
    if t.ndim == 1:
        return t[None, :], True
    if t.ndim != 2:
        raise ValueError(f"tokens must be [N] or [B, N], got {t.shape}")
    return t, False


def forward(state: ModelState, tokens, interventions: InterventionSet | None = None,
            ends=None, cache: bool = True, detach_logits: bool = False, end_only: bool = False):
    """Run the model.

    ``tokens`` is ``[N]`` or ``[B, N]`` (right-padded). ``ends`` gives each
    sample's END index (defaults to the last position). Returns
    ``(logits, cache)``; logits is a :class:`Tensor` ``[B, N, V]`` (or
    ``[N, V]`` for 1-D input) and cache is None when ``cache=False``.
    ``end_only`` reads out only each sample's END position: logits ``[B, V]``.

    With interventions, each directed node's output is overwritten at its
    positions before being added to the residual stream; everything
    downstream is recomputed from the modified stream.
    """
    cfg = state.config
    toks, squeeze = _as_batch(tokens)
    B, N = toks.shape
    if N > cfg.max_seq:
        raise ValueError(f"sequence length {N} exceeds max_seq {cfg.max_seq}")
    if toks.size and (toks.min() < 0 or toks.max() >= cfg.vocab_size):
        raise IndexError(f"token id outside [0, {cfg.vocab_size})")
    ends = np.full(B, N - 1, dtype=int) if ends is None else np.asarray(ends, dtype=int).reshape(B)
    interventions = interventions or {}
    for node in interventions:
        node.check(cfg)
    per_head = cache or any(n.is_head for n in interventions)
    act = nx.ACTIVATIONS[cfg.act]
    H, d, dh = cfg.n_heads, cfg.d_model, cfg.d_head
    eps = cfg.layernorm_eps
    dtype = state["embed.tok"].dtype
    scale = 1.0 / np.sqrt(dh)

    resid = nx.embedding(state["embed.tok"], toks) + state["embed.pos"][:N]
    c = ActivationCache(embed=resid.data.copy(), ends=ends) if cache else None

    for i in range(cfg.n_layers):
        q = f"layers.{i}."
        if c is not None:
            c.resid_pre.append(resid.data.copy())
        x = nx.layernorm(resid, state[q + "ln1.gain"], state[q + "ln1.bias"], eps)

        def heads_proj(w: Tensor) -> Tensor:
            # [H, d, dh] -> [d, H*dh]; x @ w -> [B, N, H, dh] -> [B, H, N, dh]
            wf = w.transpose(1, 0, 2).reshape(d, H * dh)
            return (x @ wf).reshape(B, N, H, dh).transpose(0, 2, 1, 3)

        Q, K, V = heads_proj(state[q + "attn.W_Q"]), heads_proj(state[q + "attn.W_K"]), heads_proj(state[q + "attn.W_V"])
        scores = nx.causal_mask((Q @ K.transpose(0, 1, 3, 2)) * scale)
        pattern = nx.softmax_lastdim(scores)
        z = pattern @ V  # [B, H, N, dh]
        W_O = state[q + "attn.W_O"]
        if per_head:
            heads = (z @ W_O).transpose(0, 2, 1, 3)  # [B, N, H, d]
            hdirs = [(n, dv) for n, dv in interventions.items() if n.is_head and n.layer == i]
            if hdirs:
                mask = np.zeros((B, N, H, 1), dtype=bool)
                vals = np.zeros((B, N, H, d), dtype=dtype)
                for node, dv in hdirs:
                    m, v = _directive_mask(dv, B, N, d, ends, dtype)
                    mask[:, :, node.head, 0] = m
                    vals[:, :, node.head, :] = v
                heads = nx.where(mask, vals, heads)
            if c is not None:
                c.attn.append(pattern.data.copy())
                c.head_out.append(heads.data.copy())
            attn_out = heads.sum(axis=2)
        else:
            attn_out = z.transpose(0, 2, 1, 3).reshape(B, N, H * dh) @ W_O.reshape(H * dh, d)
        resid = resid + attn_out

        if c is not None:
            c.mlp_in.append(resid.data.copy())
        x2 = nx.layernorm(resid, state[q + "ln2.gain"], state[q + "ln2.bias"], eps)
        mlp = act(x2 @ state[q + "mlp.W_in"] + state[q + "mlp.b_in"]) @ state[q + "mlp.W_out"] + state[q + "mlp.b_out"]
        mdir = interventions.get(NodeId.Mlp(i))
        if mdir is not None:
            m, v = _directive_mask(mdir, B, N, d, ends, dtype)
            mlp = nx.where(m[..., None], v, mlp)
        resid = resid + mlp
        if c is not None:
            c.mlp_contrib.append(mlp.data.copy())
            c.mlp_out.append(resid.data.copy())

    if c is not None:
        c.resid_final = resid.data.copy()
    if end_only:
        resid = resid[np.arange(B), ends]
    xf = nx.layernorm(resid, state["ln_final.gain"], state["ln_final.bias"], eps)
    logits = xf @ state["unembed.W_U"]
    if c is not None:
        c.logits = logits.data.copy()
    if detach_logits:
        logits = logits.detach()
    if squeeze:
        logits = logits[0]
    return logits, c


def run(state: ModelState, tokens, interventions=None, ends=None) -> tuple[np.ndarray, ActivationCache]:
    """Gradient-free forward returning plain arrays (logits ``[B, N, V]``)."""
    toks, _ = _as_batch(tokens)
    logits, c = forward(state, toks, interventions, ends=ends, cache=True)
    return logits.data, c


def end_logits(state: ModelState, tokens, ends=None, interventions=None) -> np.ndarray:
    """[B, V] logits at each sample's END position, without caching."""
    toks, _ = _as_batch(tokens)
    B, N = toks.shape
    ends = np.full(B, N - 1, dtype=int) if ends is None else np.asarray(ends, dtype=int)
    logits, _ = forward(state, toks, interventions, ends=ends, cache=False, end_only=True)
    return logits.data


def answer_logit(logits, answer_token: int, position: int = -1) -> float:
    """Raw logit of ``answer_token`` at ``position`` (default: last = END) of a ``[N, V]`` array."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if not 0 <= answer_token < arr.shape[-1]:
        raise IndexError(f"answer token {answer_token} outside vocabulary of {arr.shape[-1]}")
    return float(arr[position, answer_token])


# checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"CBCH"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64}


def save_checkpoint(state: ModelState, path, dtype: str | None = None, meta: dict | None = None) -> None:
    """Write ``magic | u16 version | u32 header_len | JSON header | LE payloads``."""
    manifest, blobs, offset = [], [], 0
    for name in state.names():
        arr = state[name].data
        dt = dtype or arr.dtype.name
        if dt not in _DTYPES:
            raise ValueError(f"unsupported checkpoint dtype {dt}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[dt]).newbyteorder("<")).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": dt})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": asdict(state.config), "tensors": manifest, "meta": meta or {}},
                        sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path, dtype=None) -> ModelState:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(
            f"{path}: checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}")
    if len(raw) < 10 + hlen:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[10:10 + hlen])
    except ValueError as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    body = memoryview(raw)[10 + hlen:]
    cfg = ModelConfig(**header["config"])
    params = {}
    for ent in header["tensors"]:
        dt = np.dtype(_DTYPES[ent["dtype"]]).newbyteorder("<")
        count = int(np.prod(ent["shape"], dtype=np.int64))
        end = ent["offset"] + count * dt.itemsize
        if end > len(body):
            raise CorruptCheckpointError(f"{path}: truncated payload for {ent['name']}")
        arr = np.frombuffer(body[ent["offset"]:end], dtype=dt).reshape(ent["shape"])
        arr = arr.astype(dtype or _DTYPES[ent["dtype"]])
        params[ent["name"]] = Tensor(arr, name=ent["name"])
    missing = set(param_names(cfg)) - set(params)
    if missing:
        raise CorruptCheckpointError(f"{path}: missing tensors {sorted(missing)}")
    return ModelState(cfg, params)


def checkpoint_meta(path) -> dict:
    raw = Path(path).read_bytes()
    _, hlen = struct.unpack("<HI", raw[4:10])
    return json.loads(raw[10:10 + hlen]).get("meta", {})
