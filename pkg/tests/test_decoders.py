import math
from dataclasses import replace

import numpy as np
import pytest

from attncap import tensor as T
from attncap.data import END, PAD, START, Vocabulary
from attncap.decoders import (
    AttentionParams,
    AttentionTrace,
    CaptionModel,
    DecoderState,
    ModelConfig,
    attention_step,
    attention_weights,
    bahdanau_alignment,
    context_vector,
    doubly_stochastic_penalty,
    greedy_decode,
    greedy_decode_ids,
    initial_state,
    teacher_forced,
    vanilla_step,
)
from attncap.encoder import EncoderConfig, FeatureGrid, global_pool
from attncap.errors import ContractError, DimensionError
from attncap.layers import cross_entropy_masked, position_nll
from attncap.tensor import Tensor

TINY_ENCODER = EncoderConfig(channels=(2,), feature_dim=3, grid_side=2)


def tiny_model(kind, merge="add", seed=0, vocab=5):
    config = ModelConfig(kind, vocab_size=vocab, embed_dim=2, hidden_dim=2, attention_dim=3,
                         encoder=TINY_ENCODER, merge=merge)
    return CaptionModel(config, seed=seed)


def random_grid(seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (4, 3) if batch is None else (batch, 4, 3)
    return FeatureGrid(Tensor(rng.normal(size=shape)))


def force_token(model, token):
    model.output.weight.data[...] = 0.0
    model.output.bias.data[...] = 0.0
    model.output.bias.data[token] = 50.0


def test_alignment_zero_v():
    p = AttentionParams.init(3, 2, 4, (0,))
    p.v.data[...] = 0.0
    scores = bahdanau_alignment(p, Tensor([0.3, -0.7]), random_grid())
    assert not scores.data.any()


def test_alignment_zero_ws_ignores_state():
    p = AttentionParams.init(3, 2, 4, (1,))
    p.W_s.data[...] = 0.0
    grid = random_grid()
    a = bahdanau_alignment(p, Tensor([0.3, -0.7]), grid).data
    b = bahdanau_alignment(p, Tensor([5.0, 2.0]), grid).data
    assert np.array_equal(a, b)


def test_alignment_hand_example():
    p = AttentionParams(Tensor([[1.0]]), Tensor([[0.0]]), Tensor([1.0]))
    grid = FeatureGrid(Tensor([[0.0], [10.0]]))
    scores = bahdanau_alignment(p, Tensor([0.0]), grid).data
    assert scores[0] == 0.0
    assert scores[1] == pytest.approx(math.tanh(10.0), abs=1e-15)


def test_alignment_shape_mismatch():
    p = AttentionParams.init(3, 2, 4, (0,))
    with pytest.raises(DimensionError):
        bahdanau_alignment(p, Tensor([0.1, 0.2, 0.3]), random_grid())


def test_attention_weight_examples():
    assert attention_weights(Tensor([2.0] * 5)).data == pytest.approx([0.2] * 5)
    assert attention_weights(Tensor([1000.0, 0.0, 0.0])).data[0] > 0.999
    assert attention_weights(Tensor([0.0, math.log(3)])).data == pytest.approx([0.25, 0.75], abs=1e-15)


def test_context_examples():
    grid = random_grid(3)
    onehot = np.zeros(4)
    onehot[2] = 1.0
    assert np.array_equal(context_vector(Tensor(onehot), grid).data, grid.annotations.data[2])
    uniform = context_vector(Tensor(np.full(4, 0.25)), grid).data
    assert np.allclose(uniform, global_pool(grid).data, atol=1e-15)
    two = FeatureGrid(Tensor([[1.0, 0.0], [0.0, 1.0]]))
    assert context_vector(Tensor([0.25, 0.75]), two).data.tolist() == [0.25, 0.75]
    with pytest.raises(DimensionError):
        context_vector(Tensor([0.5, 0.5]), grid)


def test_attention_step_with_zero_parameters_is_uniform():
    model = tiny_model("attention")
    for p in model.parameters().values():
        p.data[...] = 0.0
    grid = random_grid()
    logits, state, alpha = attention_step(model, initial_state(model, grid.pooled), grid)
    assert not logits.data.any()
    assert T.softmax(logits).data == pytest.approx([0.2] * 5)
    assert alpha.data == pytest.approx([0.25] * 4)
    assert state.h.shape == (2,)


def test_attention_weights_always_normalized():
    for seed in range(20):
        model = tiny_model("attention", seed=seed)
        grid = random_grid(seed)
        _, _, alpha = attention_step(model, initial_state(model, grid.pooled), grid)
        assert np.all(alpha.data >= 0)
        assert abs(alpha.data.sum() - 1.0) <= 1e-12


def _step_loss(model, kind, grid, h, c, target=4):
    state = DecoderState(h, c, 2)
    if kind == "attention":
        logits = attention_step(model, state, grid)[0]
    else:
        logits = vanilla_step(model, state, grid.pooled)[0]
    return cross_entropy_masked(T.reshape(logits, (1, -1)), [target], PAD)


@pytest.mark.parametrize("kind,merge", [("attention", "add"), ("vanilla", "add"), ("vanilla", "concat")])
def test_step_gradient_check(kind, merge):
    model = tiny_model(kind, merge, seed=3)
    rng = np.random.default_rng(4)
    ann = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    h = Tensor(rng.normal(size=2), requires_grad=True)
    c = Tensor(rng.normal(size=2), requires_grad=True)
    assert T.gradient_check(lambda t: _step_loss(model, kind, FeatureGrid(t), h, c), ann) <= 1e-4
    assert T.gradient_check(lambda t: _step_loss(model, kind, FeatureGrid(ann), t, c), h) <= 1e-4
    assert T.gradient_check(lambda t: _step_loss(model, kind, FeatureGrid(ann), h, t), c) <= 1e-4
    parts = {"embedding": model.embedding, "lstm": model.lstm, "output": model.output,
             "attention": model.attention, "merge": model.merge}
    for name, p in model.parameters().items():
        prefix, attr = name.split(".", 1)
        if prefix in ("encoder", "init_h"):
            continue
        owner = parts[prefix]

        def f(t, owner=owner, attr=attr):
            setattr(owner, attr, t)
            return _step_loss(model, kind, FeatureGrid(ann), h, c)

        err = T.gradient_check(f, p)
        setattr(owner, attr, p)
        assert err <= 1e-4, name


def test_vanilla_zero_image_is_pure_language_step():
    model = tiny_model("vanilla", seed=5)
    model.merge.weight.data[...] = 0.0
    model.merge.bias.data[...] = 0.0
    state = DecoderState(Tensor([0.1, -0.3]), Tensor([0.2, 0.0]), 3)
    a = vanilla_step(model, state, Tensor.zeros(3))[0].data
    b = vanilla_step(model, state, Tensor([9.0, -4.0, 1.0]))[0].data
    assert np.array_equal(a, b)
    assert np.array_equal(a, vanilla_step(model, state, Tensor.zeros(3))[0].data)


def test_penalty_examples():
    onehots = AttentionTrace([np.eye(4)[i] for i in range(4)])
    assert doubly_stochastic_penalty(onehots, 4).item() == 0.0
    assert doubly_stochastic_penalty(AttentionTrace([np.full(4, 0.25)]), 4).item() == pytest.approx(2.25)
    rng = np.random.default_rng(0)
    for _ in range(20):
        steps = [rng.dirichlet(np.ones(4)) for _ in range(rng.integers(1, 6))]
        assert doubly_stochastic_penalty(AttentionTrace(steps), 4).item() >= 0.0
    with pytest.raises(ContractError):
        doubly_stochastic_penalty(AttentionTrace([]), 4)


def test_greedy_end_forcing_gives_empty_caption():
    vocab = Vocabulary(["a"])
    model = tiny_model("attention")
    force_token(model, END)
    tokens, trace = greedy_decode(model, random_grid(), vocab, 10)
    assert tokens == [] and len(trace) == 0


def test_greedy_forced_token_runs_to_max_len():
    vocab = Vocabulary(["a"])
    for kind in ("attention", "vanilla"):
        model = tiny_model(kind)
        force_token(model, 4)
        tokens, trace = greedy_decode(model, random_grid(), vocab, 7)
        assert tokens == ["a"] * 7
        if kind == "attention":
            assert len(trace) == 7
        else:
            assert trace is None


def test_greedy_vanilla_accepts_pooled_vector():
    vocab = Vocabulary(["a"])
    model = tiny_model("vanilla")
    grid = random_grid(2)
    assert greedy_decode(model, grid.pooled, vocab, 5)[0] == greedy_decode(model, grid, vocab, 5)[0]


def test_greedy_is_deterministic_and_batch_consistent():
    model = tiny_model("attention", seed=7)
    grid = random_grid(5, batch=3)
    ids_a, traces_a = greedy_decode_ids(model, grid, 6)
    ids_b, _ = greedy_decode_ids(model, grid, 6)
    assert ids_a == ids_b
    for b in range(3):
        single, traces = greedy_decode_ids(model, FeatureGrid(Tensor(grid.annotations.data[b])), 6)
        assert single[0] == ids_a[b]
        assert len(traces[0]) == len(ids_a[b])


def test_teacher_forced_matches_manual_steps():
    model = tiny_model("attention", seed=8)
    grid = random_grid(6, batch=2)
    inputs = np.array([[START, 4, 3], [START, 3, 4]])
    out = teacher_forced(model, grid, inputs)
    state = initial_state(model, grid.pooled)
    for t in range(3):
        state = replace(state, last_token=inputs[:, t])
        logits, state, _ = attention_step(model, state, grid)
        assert np.allclose(out.logits.data[:, t], logits.data, atol=1e-14)
    assert len(out.alphas) == 3


@pytest.mark.parametrize("kind", ["attention", "vanilla"])
def test_teacher_forcing_causality(kind):
    model = tiny_model(kind, seed=9, vocab=8)
    grid = random_grid(7, batch=1)
    rng = np.random.default_rng(10)
    tokens = np.array([[START, *rng.integers(4, 8, size=6), END]])
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    base = position_nll(teacher_forced(model, grid, inputs).logits.data[0], targets[0], PAD)
    for t in range(1, tokens.shape[1] - 1):
        changed = tokens.copy()
        changed[0, t] = 4 + (changed[0, t] - 3) % 4
        out = teacher_forced(model, grid, changed[:, :-1]).logits.data[0]
        nll = position_nll(out, changed[0, 1:], PAD)
        # per-step loss k scores target position k + 1
        positions = np.arange(1, tokens.shape[1])
        assert np.array_equal(nll[positions < t], base[positions < t])
        assert not np.array_equal(nll[positions >= t], base[positions >= t])
