import hashlib
import math

import numpy as np
import pytest

from dftlab.autodiff import gather, log, reshape, softmax
from dftlab.model import (
    EOS_ID,
    Model,
    ModelConfig,
    expected_param_count,
    load_checkpoint,
    sample_batch,
    save_checkpoint,
)

SMALL = ModelConfig(vocab_size=8, d_model=16, n_layers=2, n_heads=2,
                    context_length=16, seed=7)


@pytest.fixture(scope="module")
def small_model():
    return Model(SMALL)


def test_param_count_matches_closed_form(small_model):
    assert small_model.num_params() == expected_param_count(SMALL)


def test_params_finite_after_init(small_model):
    for name, t in small_model.params.items():
        assert np.isfinite(t.data).all(), name


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=8, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=1)


def test_causality_by_input_perturbation(small_model):
    ids = np.array([[2, 3, 4, 5, 6, 7]])
    base = small_model.forward(ids).data.copy()
    for t in range(1, ids.shape[1]):
        mod = ids.copy()
        mod[0, t] = (mod[0, t] + 1) % SMALL.vocab_size
        if mod[0, t] == ids[0, t]:
            continue
        out = small_model.forward(mod).data
        assert np.array_equal(out[0, :t], base[0, :t]), f"position {t} leaked backward"
        assert not np.array_equal(out[0, t:], base[0, t:])


def test_identical_rows_give_identical_logits(small_model):
    ids = np.array([[2, 5, 3, 7]] * 3)
    out = small_model.forward(ids).data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_forward_determinism_golden():
    # recorded once from this config/seed/input; guards init and forward drift
    model = Model(ModelConfig(vocab_size=8, d_model=16, n_layers=2, n_heads=2,
                              context_length=16, seed=7))
    out = model.forward(np.array([[2, 3, 4, 5]])).data
    again = Model(ModelConfig(vocab_size=8, d_model=16, n_layers=2, n_heads=2,
                              context_length=16, seed=7)).forward(
        np.array([[2, 3, 4, 5]])
    ).data
    assert np.array_equal(out.view(np.uint64), again.view(np.uint64))
    digest = hashlib.sha256(np.ascontiguousarray(out, dtype="<f8").tobytes()).hexdigest()
    assert digest == GOLDEN_LOGITS_SHA256


GOLDEN_LOGITS_SHA256 = "358141c5a0ab4eeb62d8f2607f67faed75bde36bd372aaf08845ecfac06657aa"


def test_rejects_out_of_vocab(small_model):
    with pytest.raises(ValueError, match="vocab"):
        small_model.forward(np.array([[2, 99]]))


def test_rejects_over_length(small_model):
    with pytest.raises(ValueError, match="context_length"):
        small_model.forward(np.full((1, 17), 2))


# --- token_log_probs ---


def test_uniform_head_gives_log_half():
    config = ModelConfig(vocab_size=2, d_model=8, n_layers=1, n_heads=1,
                         context_length=8, seed=0)
    model = Model(config)
    model.params["head.w"].data[:] = 0.0
    model.params["head.b"].data[:] = 0.0
    lp = model.token_log_probs([0], [1, 0, 1])
    assert np.allclose(lp.data, math.log(0.5), atol=1e-15)


def test_token_log_probs_normalization(small_model):
    prompt, response = [2, 3], [4, 5, 6]
    ids = np.array(prompt + response)
    logits = small_model.forward(ids[None, :-1]).data[0]
    lp = small_model.token_log_probs(prompt, response).data
    assert (lp <= 0).all()
    for t, tok in enumerate(response):
        row = logits[len(prompt) - 1 + t]
        e = np.exp(row - row.max())
        probs = e / e.sum()
        assert abs(probs.sum() - 1.0) <= 1e-12
        others = probs.sum() - probs[tok]
        assert abs(math.exp(lp[t]) + others - 1.0) <= 1e-12


def test_token_log_probs_redundant_path(small_model):
    prompt, response = [2, 3, 4], [5, 6]
    ids = np.array(prompt + response)
    logits = small_model.forward(ids[None, :-1])
    flat = reshape(logits, (len(ids) - 1, SMALL.vocab_size))
    full = log(softmax(flat)).data
    expect = [full[len(prompt) - 1 + t, tok] for t, tok in enumerate(response)]
    lp = small_model.token_log_probs(prompt, response).data
    assert np.max(np.abs(lp - np.array(expect))) <= 1e-12


def test_token_log_probs_rejects_empty_response(small_model):
    with pytest.raises(ValueError, match="empty response"):
        small_model.token_log_probs([2], [])


# --- sampling ---


def test_sample_same_seed_identical(small_model):
    a = small_model.sample([2, 3], max_new=8, temperature=1.0, seed=123)
    b = small_model.sample([2, 3], max_new=8, temperature=1.0, seed=123)
    assert a == b
    c = small_model.sample([2, 3], max_new=8, temperature=1.0, seed=124)
    assert isinstance(c, list)


def test_greedy_is_deterministic_argmax(small_model):
    a = small_model.sample([2, 3], max_new=6, greedy=True, temperature=1.0)
    b = small_model.sample([2, 3], max_new=6, greedy=True, temperature=1.0)
    assert a == b
    ids = np.array([[2, 3]])
    first = int(np.argmax(small_model.forward(ids).data[0, -1]))
    assert a[0] == first


def test_sample_stops_at_eos():
    config = ModelConfig(vocab_size=6, d_model=8, n_layers=1, n_heads=1,
                         context_length=12, seed=1)
    model = Model(config)
    model.params["head.b"].data[EOS_ID] = 50.0
    out = model.sample([2], max_new=10, temperature=1.0, seed=0)
    assert out == [EOS_ID]


def test_sample_respects_context_length(small_model):
    out = small_model.sample([2] * 14, max_new=50, temperature=1.0, seed=0)
    assert len(out) <= SMALL.context_length - 14


def test_first_token_frequency_matches_softmax():
    config = ModelConfig(vocab_size=5, d_model=8, n_layers=1, n_heads=1,
                         context_length=4, seed=3)
    model = Model(config)
    probs = model.forward(np.array([[2]])).data[0, -1]
    e = np.exp(probs - probs.max())
    probs = e / e.sum()
    n = 100_000
    outs = sample_batch(model, [[2]] * n, max_new=1, temperature=1.0,
                        seeds=list(range(n)))
    counts = np.bincount([o[0] for o in outs], minlength=5) / n
    assert np.max(np.abs(counts - probs)) <= 0.01


def test_sample_batch_grouping_matches_single(small_model):
    prompts = [[2, 3], [4, 5, 6], [3, 2]]
    seeds = [11, 22, 33]
    batched = sample_batch(small_model, prompts, max_new=6, temperature=1.0, seeds=seeds)
    singles = [
        small_model.sample(p, max_new=6, temperature=1.0, seed=s)
        for p, s in zip(prompts, seeds)
    ]
    assert batched == singles


# --- checkpoints ---


def test_checkpoint_round_trip(tmp_path, small_model):
    path = tmp_path / "model.ckpt"
    save_checkpoint(small_model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == small_model.config
    for name, t in small_model.params.items():
        assert np.array_equal(
            t.data.view(np.uint64), loaded.params[name].data.view(np.uint64)
        ), name
    ids = np.array([[2, 3, 4]])
    assert np.array_equal(
        small_model.forward(ids).data, loaded.forward(ids).data
    )


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
