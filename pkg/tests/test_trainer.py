import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calcheads.corpus import ConfigError
from calcheads.model import HEAD_PARAMS, MLP_PARAMS, NodeId
from calcheads.trainer import (
    TrainConfig,
    TrainingDivergedError,
    TuneMask,
    accuracy,
    full_sft,
    parameter_audit,
    precise_sft,
    pretrain,
    train,
)
from conftest import make_state

SGD = dict(optimizer="sgd", weight_decay=0.0, grad_clip=None, warmup_ratio=0.0, schedule="constant")


def same_bytes(a, b):
    return all(a[n].data.tobytes() == b[n].data.tobytes() for n in a.names())


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="lion")


def test_memorizes_tiny_set(vocab, small_data):
    pairs = small_data.pairs[:10]
    state = make_state(vocab, n_layers=1, n_heads=2, d_model=32, d_mlp=64)
    tuned, rep = pretrain(state, pairs, TrainConfig(lr=3e-3, steps=300, batch_size=10, weight_decay=0.0))
    assert accuracy(tuned, pairs, vocab) == 1.0
    assert rep.losses[-1] < rep.losses[0]


def test_zero_steps_leave_state_unchanged(vocab, small_data):
    state = make_state(vocab)
    out, rep = pretrain(state, small_data, TrainConfig(steps=0))
    assert same_bytes(state, out)
    assert rep.losses == []


def test_zero_learning_rate_full_sft(vocab, small_data):
    state = make_state(vocab)
    out, rep = full_sft(state, small_data, TrainConfig(lr=0.0, steps=1, batch_size=4))
    assert same_bytes(state, out)
    assert rep.tuned_params == rep.total_params == state.n_params()


def test_same_seed_same_run(vocab, small_data):
    state = make_state(vocab)
    cfg = TrainConfig(steps=3, batch_size=8)
    a, ra = full_sft(state, small_data, cfg)
    b, rb = full_sft(state, small_data, cfg)
    assert same_bytes(a, b)
    assert ra.losses == rb.losses


def test_empty_mask(vocab, small_data):
    state = make_state(vocab)
    with pytest.raises(ConfigError):
        precise_sft(state, small_data, TuneMask(), TrainConfig(steps=1))
    out, _ = precise_sft(state, small_data, TuneMask(), TrainConfig(steps=1), allow_empty=True)
    assert same_bytes(state, out)


def test_rescale_factor(vocab):
    state = make_state(vocab, n_heads=4)
    _, scales = TuneMask(frozenset({(1, 2)})).gradient_plan(state)
    s = scales["layers.1.attn.W_Q"][:, 0, 0]
    assert s.tolist() == [0.0, 0.0, 4.0, 0.0]
    _, scales = TuneMask(frozenset({(0, 0), (0, 3)})).gradient_plan(state)
    assert scales["layers.0.attn.W_O"][:, 0, 0].tolist() == [2.0, 0.0, 0.0, 2.0]


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_mask_exactness(vocab, small_data, optimizer):
    state = make_state(vocab)
    mask = TuneMask(frozenset({(1, 0)}))
    cfg = TrainConfig(steps=1 if optimizer == "sgd" else 3, batch_size=8, optimizer=optimizer)
    out, rep = precise_sft(state, small_data, mask, cfg)
    audit = parameter_audit(state, out, mask)
    assert audit.clean
    for p in HEAD_PARAMS:
        name = f"layers.1.{p}"
        delta = np.abs(out[name].data - state[name].data)
        assert delta[0].max() > 0
        assert delta[1:].max() == 0
    untouched = [n for n in state.names() if not n.startswith("layers.1.attn")]
    assert all(out[n].data.tobytes() == state[n].data.tobytes() for n in untouched)
    assert rep.tuned_params == 4 * state.config.d_model * state.config.d_head


def test_mlp_mask_updates_whole_layer(vocab, small_data):
    state = make_state(vocab)
    mask = TuneMask.from_nodes([NodeId.Mlp(0)])
    out, rep = precise_sft(state, small_data, mask, TrainConfig(steps=1, batch_size=8))
    assert parameter_audit(state, out, mask).clean
    for p in MLP_PARAMS:
        assert not np.array_equal(out[f"layers.0.{p}"].data, state[f"layers.0.{p}"].data)
    assert rep.tuned_params == sum(state[f"layers.0.{p}"].data.size for p in MLP_PARAMS)


def test_audit_flags_changes_outside_mask(vocab, small_data):
    state = make_state(vocab)
    out, _ = full_sft(state, small_data, TrainConfig(steps=1, batch_size=4))
    audit = parameter_audit(state, out, TuneMask(frozenset({(0, 0)})))
    assert not audit.clean
    assert audit.outside["unembed.W_U"] > 0


def test_rescale_equivalence_plain_gradient_descent(vocab, small_data):
    """A precise step with h of H heads equals an unmasked step on those heads at lr * H / h."""
    state = make_state(vocab, n_heads=4)
    mask = TuneMask(frozenset({(1, 0), (1, 3)}))
    lr = 0.05
    precise, _ = precise_sft(state, small_data, mask, TrainConfig(lr=lr, steps=1, batch_size=8, **SGD))
    masks, _ = mask.gradient_plan(state)
    plain, _ = train(state, small_data, TrainConfig(lr=lr * 4 / 2, steps=1, batch_size=8, **SGD), trainable=masks)
    worst = max(float(np.abs(precise[n].data - plain[n].data).max()) for n in state.names())
    assert worst < 1e-10
    assert not np.array_equal(precise["layers.1.attn.W_K"].data, state["layers.1.attn.W_K"].data)


@settings(max_examples=8, deadline=None)
@given(st.sets(st.tuples(st.integers(0, 1), st.integers(0, 3)), min_size=1, max_size=5), st.booleans())
def test_tuned_param_bookkeeping(heads, with_mlp):
    from calcheads.corpus import Vocabulary

    state = make_state(Vocabulary.default())
    mask = TuneMask(frozenset(heads), frozenset({1}) if with_mlp else frozenset())
    masks, _ = mask.gradient_plan(state)
    exact = sum(state[n].data.size if m is None else int(m.sum()) for n, m in masks.items())
    assert mask.n_params(state) == exact


def test_divergence_aborts(vocab, small_data):
    state = make_state(vocab)
    state["unembed.W_U"].data[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError):
        pretrain(state, small_data, TrainConfig(steps=2, batch_size=4))


def test_vocab_mismatch(vocab, small_data):
    from calcheads.model import ModelConfig, ModelState

    state = ModelState.init(ModelConfig(n_layers=1, n_heads=2, d_model=8, d_mlp=8, vocab_size=12))
    with pytest.raises(ConfigError):
        pretrain(state, small_data, TrainConfig(steps=1))


def test_report_curves(vocab, small_data, tmp_path):
    state = make_state(vocab)
    cfg = TrainConfig(steps=4, batch_size=4, eval_every=2)
    _, rep = pretrain(state, small_data, cfg)
    assert [s for s, _ in rep.accuracy] == [2, 4]
    assert all(0 <= a <= 1 for _, a in rep.accuracy)
    assert rep.samples_per_sec > 0
    rep.save(tmp_path / "r", timing=False)
    assert "samples_per_sec" not in (tmp_path / "r.json").read_text()
    assert (tmp_path / "r_loss.csv").read_text().count("\n") == 5


def test_all_position_loss(vocab, small_data):
    state = make_state(vocab)
    _, rep = pretrain(state, small_data, TrainConfig(steps=2, batch_size=4, loss_positions="all"))
    assert len(rep.losses) == 2 and np.isfinite(rep.losses).all()


def test_mask_serialization_round_trip():
    mask = TuneMask(frozenset({(1, 2), (0, 3)}), frozenset({2}))
    assert TuneMask.from_dict(mask.to_dict()) == mask
