import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calcheads.model import (
    CorruptCheckpointError,
    Freeze,
    InterventionError,
    InterventionSet,
    ModelConfig,
    ModelState,
    NodeId,
    Replace,
    UnknownNodeError,
    all_nodes,
    answer_logit,
    composed_matrices,
    end_logits,
    forward,
    load_checkpoint,
    run,
    save_checkpoint,
)
from conftest import jitter, make_state
from oracle import node_key, ref_forward


def tokens(n, vocab_size, seed):
    return np.random.default_rng(seed).integers(0, vocab_size, size=n)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(act="relu6")


def test_node_labels_round_trip():
    for node in (NodeId.Head(3, 7), NodeId.Mlp(2)):
        assert NodeId.parse(node.label()) == node
    with pytest.raises(UnknownNodeError):
        NodeId.Head(5, 0).check(ModelConfig(n_layers=2))


def test_forward_matches_reference(state):
    toks = tokens(9, state.config.vocab_size, 0)
    logits, _ = run(state, toks)
    ref, _ = ref_forward(state, toks)
    np.testing.assert_allclose(logits[0], ref, atol=1e-10)


def test_cache_shapes_and_attention_rows(state):
    toks = tokens(7, state.config.vocab_size, 1)
    _, c = run(state, toks)
    cfg = state.config
    assert c.head_out[0].shape == (1, 7, cfg.n_heads, cfg.d_model)
    for pat in c.attn:
        np.testing.assert_allclose(pat.sum(-1), 1.0, atol=1e-6)
        assert np.all(np.triu(pat[0, 0], 1) == 0)


def test_residual_additivity(state):
    toks = tokens(8, state.config.vocab_size, 2)
    _, c = run(state, toks)
    total = c.embed.copy()
    for i in range(state.config.n_layers):
        np.testing.assert_allclose(c.resid_pre[i], total, atol=1e-10)
        total = total + c.head_out[i].sum(axis=2)
        np.testing.assert_allclose(c.mlp_in[i], total, atol=1e-10)
        total = total + c.mlp_contrib[i]
    np.testing.assert_allclose(c.resid_final, total, atol=1e-10)


def test_per_head_sum_equals_concat_path(state):
    toks = tokens(8, state.config.vocab_size, 3)
    with_heads, _ = forward(state, toks, cache=True)
    fused, _ = forward(state, toks, cache=False)
    np.testing.assert_allclose(with_heads.data, fused.data, atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 12), st.integers(0, 11), st.integers(0, 10_000))
def test_causality(n, cut, seed):
    cut = min(cut, n - 1)
    vocab_size = 40
    state = ModelState.init(ModelConfig(n_layers=2, n_heads=2, d_model=8, d_mlp=16, vocab_size=vocab_size,
                                        max_seq=16), seed=0)
    a = tokens(n, vocab_size, seed)
    b = a.copy()
    b[cut:] = tokens(n - cut, vocab_size, seed + 1)
    la, _ = forward(state, a, cache=False)
    lb, _ = forward(state, b, cache=False)
    np.testing.assert_array_equal(la.data[:cut], lb.data[:cut])


def test_replace_with_own_output_is_noop(state):
    toks = tokens(6, state.config.vocab_size, 4)
    clean, c = run(state, toks)
    for node in all_nodes(state.config):
        iv = InterventionSet()
        iv[node] = Replace(c.at_end(node))
        patched, _ = run(state, toks, iv)
        np.testing.assert_allclose(patched, clean, atol=1e-6)


def test_freezing_every_node_determines_the_stream(vocab):
    # with the token embedding zeroed the stream is embedding-free, so freezing
    # every node at every position pins the logits whatever the tokens are
    state = jitter(make_state(vocab))
    state["embed.tok"].data[:] = 0.0
    a = tokens(7, state.config.vocab_size, 5)
    b = tokens(7, state.config.vocab_size, 6)
    clean, c = run(state, a)
    iv = InterventionSet()
    for node in all_nodes(state.config):
        iv[node] = Freeze(c.node_output(node)[0], positions="all")
    other, _ = run(state, b, iv)
    np.testing.assert_allclose(other, clean, atol=1e-6)


def test_intervention_locality(state):
    toks = tokens(8, state.config.vocab_size, 7)
    _, clean = run(state, toks)
    iv = InterventionSet()
    iv[NodeId.Head(0, 1)] = Replace(np.ones(state.config.d_model) * 3.0)
    _, patched = run(state, toks, iv)
    for i in range(state.config.n_layers):
        np.testing.assert_array_equal(patched.mlp_in[i][:, :-1], clean.mlp_in[i][:, :-1])
        np.testing.assert_array_equal(patched.head_out[i][:, :-1], clean.head_out[i][:, :-1])
    assert not np.allclose(patched.mlp_in[1][:, -1], clean.mlp_in[1][:, -1])


def test_single_patched_head_matches_splice_oracle(state):
    toks = tokens(9, state.config.vocab_size, 8)
    other = tokens(9, state.config.vocab_size, 9)
    node = NodeId.Head(0, 2)
    _, oc = ref_forward(state, other)
    value = oc[node_key(node)][-1]
    iv = InterventionSet()
    iv[node] = Replace(value)
    patched, _ = run(state, toks, iv)
    expect, _ = ref_forward(state, toks, {node_key(node): value})
    np.testing.assert_allclose(patched[0], expect, atol=1e-10)


def test_position_list_directive(state):
    toks = tokens(6, state.config.vocab_size, 10)
    d = state.config.d_model
    iv = InterventionSet()
    iv[NodeId.Mlp(0)] = Replace(np.zeros((2, d)), positions=[1, 3])
    _, c = run(state, toks, iv)
    assert not c.mlp_contrib[0][0, [1, 3]].any()
    assert c.mlp_contrib[0][0, [0, 2]].any()


def test_intervention_errors(state):
    iv = InterventionSet()
    iv[NodeId.Head(0, 0)] = Replace(np.zeros(3))
    with pytest.raises(InterventionError):
        run(state, tokens(5, state.config.vocab_size, 0), iv)
    with pytest.raises(InterventionError):
        iv[NodeId.Head(0, 0)] = Replace(np.zeros(state.config.d_model))
    bad = InterventionSet()
    bad[NodeId.Head(0, 9)] = Replace(np.zeros(state.config.d_model))
    with pytest.raises(UnknownNodeError):
        run(state, tokens(5, state.config.vocab_size, 0), bad)


def test_input_validation(state):
    with pytest.raises(ValueError):
        forward(state, np.zeros(state.config.max_seq + 1, dtype=int))
    with pytest.raises(IndexError):
        forward(state, np.array([0, state.config.vocab_size]))


def test_end_only_readout(state):
    toks = np.stack([tokens(7, state.config.vocab_size, s) for s in range(3)])
    ends = np.array([6, 3, 4])
    full, _ = run(state, toks, ends=ends)
    np.testing.assert_allclose(end_logits(state, toks, ends), full[np.arange(3), ends], atol=1e-12)


# composed matrices ----------------------------------------------------------

def test_composed_matrices_cases(vocab):
    st_ = make_state(vocab, n_heads=4, d_model=16)
    q = "layers.0.attn."
    st_[q + "W_V"].data[1] = 0.0
    assert not composed_matrices(st_, 0, 1)[1].any()
    eye = np.eye(16)[:, :4]
    st_[q + "W_Q"].data[2] = eye
    st_[q + "W_K"].data[2] = eye
    np.testing.assert_array_equal(composed_matrices(st_, 0, 2)[0], eye @ eye.T)


def test_ov_rank_bounded_by_head_dim(state):
    dh = state.config.d_head
    for j in range(state.config.n_heads):
        _, ov = composed_matrices(state, 1, j)
        sv = np.linalg.svd(ov, compute_uv=False)
        assert int((sv > 1e-10 * sv[0]).sum()) <= dh


# answer logit ---------------------------------------------------------------

def test_answer_logit_indexing():
    logits = np.random.default_rng(0).standard_normal((5, 7))
    assert answer_logit(logits, 3) == logits[-1, 3]
    assert answer_logit(logits, 2, position=1) == logits[1, 2]
    flat = np.zeros((2, 4))
    assert answer_logit(flat, 0) == answer_logit(flat, 3)
    with pytest.raises(IndexError):
        answer_logit(logits, 7)


# checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip(state, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    assert back.config == state.config
    for n in state.names():
        assert back[n].data.tobytes() == state[n].data.tobytes()


def test_checkpoint_float32_storage(state, tmp_path):
    path = tmp_path / "m32.ckpt"
    save_checkpoint(state, path, dtype="float32")
    back = load_checkpoint(path)
    assert back["unembed.W_U"].dtype == np.float32
    np.testing.assert_array_equal(back["unembed.W_U"].data, state["unembed.W_U"].data.astype(np.float32))


def test_checkpoint_truncated(state, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 100])
    with pytest.raises(CorruptCheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptCheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_version_bump_rejected(state, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path)
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpointError, match="version 2"):
        load_checkpoint(path)


def test_forward_is_deterministic(state):
    toks = tokens(8, state.config.vocab_size, 11)
    a, _ = run(state, toks)
    b, _ = run(state, toks)
    assert a.tobytes() == b.tobytes()
