import numpy as np
import pytest

from hierattn.attention import AttentionKind, sparsemax_forward
from hierattn.errors import ConfigError, ContractError
from hierattn.gradcheck import random_batch, random_parameters
from hierattn.layers import bigru, embed
from hierattn.model import (Batch, ModelConfig, attention_stats, encode_document, encode_sentence,
                            encodings_stats, forward, forward_detailed, init_parameters, parameter_shapes, predict)
from hierattn.tensor import Tensor

MODELS = ("han", "hpan", "hsan")


def tiny(model="han", **kw):
    cfg = dict(embed_dim=4, gru_hidden=3, dropout_p=0.0)
    cfg.update(kw)
    return ModelConfig.preset(model, 12, **cfg)


def setup(model, seed=0, n_docs=3, S=3, L=4):
    rng = np.random.default_rng(seed)
    config = tiny(model)
    params = random_parameters(config, rng)
    return config, params, random_batch(rng, n_docs, config.vocab_size, S, L)


def single(batch, i):
    ids, wm, sm = batch.document(i)
    return Batch(ids[None], wm[None], sm[None], batch.labels[i:i + 1])


# ------------------------------------------------------------------ config


def test_presets():
    assert tiny("han").word_attention == AttentionKind.softmax()
    hpan = tiny("hpan")
    assert hpan.word_attention == hpan.sentence_attention == AttentionKind.pruned(0.05)
    assert tiny("hsan").sentence_attention.variant == "sparsemax"
    assert ModelConfig.preset("hpan", 5, alpha_min=0.2).word_attention.alpha_min == 0.2
    full = ModelConfig.preset("han", 100)
    assert (full.embed_dim, full.gru_hidden, full.dropout_p, full.gru_layers) == (200, 50, 0.1, 1)


@pytest.mark.parametrize("kw", [dict(embed_dim=0), dict(dropout_p=1.0), dict(num_classes=1),
                                dict(gru_layers=2)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, **kw)


def test_alpha_min_only_for_hpan():
    with pytest.raises(ConfigError):
        ModelConfig.preset("han", 10, alpha_min=0.1)


def test_config_round_trip():
    cfg = tiny("hpan", num_classes=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_parameter_shapes_and_init():
    config = ModelConfig.preset("han", 30, embed_dim=8, gru_hidden=5)
    shapes = parameter_shapes(config)
    assert shapes["embedding"] == (30, 8)
    assert shapes["word_gru.fwd.W_z"] == (5, 8)
    assert shapes["sentence_gru.bwd.U_n"] == (5, 5)
    assert shapes["sentence_gru.fwd.W_r"] == (5, 10)
    assert shapes["word_attention.W"] == (10, 10)
    assert shapes["sentence_attention.context"] == (10,)
    assert shapes["classifier.W"] == (2, 10)
    params = init_parameters(config, np.random.default_rng(0))
    assert {k: p.shape for k, p in params.items()} == shapes
    assert np.all(params["embedding"].data[0] == 0)
    assert np.all(params["word_gru.fwd.b_z"].data == 0)
    assert np.abs(params["word_attention.context"].data).max() <= 0.1
    assert np.abs(params["word_gru.fwd.W_z"].data).max() <= 1 / np.sqrt(8)


def test_frozen_embeddings_are_not_trainable():
    config = tiny(fine_tune_embeddings=False)
    params = init_parameters(config, np.random.default_rng(0))
    assert not params["embedding"].requires_grad
    assert params["classifier.W"].requires_grad


# --------------------------------------------------------------- encoders


@pytest.mark.parametrize("model", MODELS)
def test_single_word_sentence_is_bigru_output(model):
    config, params, _ = setup(model)
    ids, mask = np.array([5, 0, 0]), np.array([True, False, False])
    s = encode_sentence(ids, mask, params, config).data
    h = bigru(embed(params["embedding"], [5]), params.gru("word_gru.fwd"), params.gru("word_gru.bwd")).data
    np.testing.assert_allclose(s, h[0], atol=1e-15)


def test_sentence_vector_size_full_config():
    config = ModelConfig.preset("han", 20, dropout_p=0.0)
    params = init_parameters(config, np.random.default_rng(0))
    assert encode_sentence(np.array([3, 4, 5]), np.ones(3, bool), params, config).shape == (100,)


def test_padding_contents_are_irrelevant():
    config, params, _ = setup("hsan")
    ids, mask = np.array([4, 7, 0, 0, 0]), np.array([True, True, False, False, False])
    base = encode_sentence(ids, mask, params, config).data
    shuffled = np.array([4, 7, 9, 3, 0])
    np.testing.assert_array_equal(encode_sentence(shuffled, mask, params, config).data, base)


def test_empty_units_rejected():
    config, params, batch = setup("han")
    with pytest.raises(ContractError):
        encode_sentence(np.zeros(3, int), np.zeros(3, bool), params, config)
    ids, wm, sm = batch.document(0)
    with pytest.raises(ContractError):
        encode_document(ids, wm, np.zeros_like(sm), params, config)


@pytest.mark.parametrize("model", MODELS)
def test_single_sentence_document(model):
    config, params, _ = setup(model)
    ids = np.array([[3, 4, 5]])
    mask = np.ones((1, 3), bool)
    enc = encode_document(ids, mask, np.array([True]), params, config)
    s = encode_sentence(ids[0], mask[0], params, config)
    hs = bigru(Tensor(s.data[None]), params.gru("sentence_gru.fwd"), params.gru("sentence_gru.bwd")).data
    np.testing.assert_allclose(enc.vector.data, hs[0], atol=1e-15)
    np.testing.assert_array_equal(enc.sentence_alphas, [1.0])


@pytest.mark.parametrize("model", MODELS)
def test_attention_maps_are_simplex_and_masked(model):
    config, params, batch = setup(model, n_docs=6)
    _, encodings = forward_detailed(batch, params, config)
    for enc in encodings:
        assert abs(enc.sentence_alphas.sum() - 1) < 1e-9
        assert np.all(enc.sentence_alphas[~enc.sentence_mask] == 0)
        assert np.all(enc.word_alphas[~enc.word_mask] == 0)
        rows = enc.word_alphas[enc.sentence_mask].sum(axis=1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-9)


def test_symmetric_sentences_survive_pruning():
    config, params, _ = setup("hpan")
    ids = np.array([[3, 4, 5], [3, 4, 5]])
    enc = encode_document(ids, np.ones((2, 3), bool), np.ones(2, bool), params, config)
    assert np.all(enc.sentence_alphas > 0)
    assert abs(enc.sentence_alphas.sum() - 1) < 1e-12


# ---------------------------------------------------------------- forward


@pytest.mark.parametrize("model", MODELS)
def test_forward_shapes_and_identical_documents(model):
    config, params, batch = setup(model)
    assert forward(single(batch, 0), params, config).shape == (1, 2)
    ids, wm, sm = batch.document(1)
    twin = Batch(np.stack([ids, ids]), np.stack([wm, wm]), np.stack([sm, sm]), np.array([0, 1]))
    logits = forward(twin, params, config).data
    np.testing.assert_array_equal(logits[0], logits[1])


@pytest.mark.parametrize("model", MODELS)
def test_batch_composition_invariance(model):
    config, params, batch = setup(model, n_docs=5)
    together = forward(batch, params, config).data
    for i in range(len(batch)):
        np.testing.assert_array_equal(forward(single(batch, i), params, config).data[0], together[i])


@pytest.mark.parametrize("model", MODELS)
def test_padding_invariance_exact(model):
    config, params, batch = setup(model, n_docs=4)
    base = forward(batch, params, config).data
    B, S, L = batch.token_ids.shape
    rng = np.random.default_rng(3)
    # an extra fully masked sentence row and word column holding junk ids
    ids = rng.integers(0, config.vocab_size, size=(B, S + 1, L + 1))
    ids[:, :S, :L] = np.where(batch.word_mask, batch.token_ids, ids[:, :S, :L])
    wm = np.zeros((B, S + 1, L + 1), bool)
    wm[:, :S, :L] = batch.word_mask
    sm = np.zeros((B, S + 1), bool)
    sm[:, :S] = batch.sentence_mask
    padded = forward(Batch(ids, wm, sm, batch.labels), params, config).data
    np.testing.assert_array_equal(padded, base)


def test_hpan_tiny_threshold_matches_han():
    rng = np.random.default_rng(11)
    han = tiny("han")
    hpan = tiny("hpan", alpha_min=1e-9)
    params = init_parameters(han, rng)
    batch = random_batch(rng, 10, han.vocab_size, 3, 4)
    diff = np.abs(forward(batch, params, han).data - forward(batch, params, hpan).data).max()
    assert diff < 1e-9


def test_train_mode_dropout_uses_rng():
    config, params, batch = setup("han")
    config = ModelConfig.from_dict({**config.to_dict(), "dropout_p": 0.5})
    a = forward(batch, params, config, "train", np.random.default_rng(0)).data
    b = forward(batch, params, config, "train", np.random.default_rng(0)).data
    c = forward(batch, params, config, "train", np.random.default_rng(1)).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    np.testing.assert_array_equal(forward(batch, params, config).data, forward(batch, params, config).data)


# ------------------------------------------------------------- predictions


def test_predict_examples(rng):
    cls, p = predict(np.array([0.0, 0.0]))
    assert cls == 0
    np.testing.assert_array_equal(p, [0.5, 0.5])
    assert predict([-3.0, 3.0])[0] == 1
    classes, probs = predict(rng.normal(size=(50, 4)) * 10)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert classes.shape == (50,)


def test_attention_stats_examples():
    assert attention_stats(np.array([[0.5, 0.5]]), np.array([1.0])).pruned_word_fraction == 0.0
    stats = attention_stats(np.array([[0.625, 0.375, 0.0]]), np.array([1.0]))
    assert stats.pruned_word_fraction == pytest.approx(1 / 3)
    p, _, k = sparsemax_forward(np.array([10.0, 0.0, 0.0]))
    stats = attention_stats(p[None], np.array([1.0]))
    assert k == 1 and stats.pruned_word_fraction == pytest.approx(2 / 3)
    assert stats.mean_support_size == 1.0


def test_attention_stats_ignore_masked_positions():
    wa = np.array([[0.5, 0.5, 0.0], [0.0, 0.0, 0.0]])
    wm = np.array([[True, True, False], [False, False, False]])
    stats = attention_stats(wa, np.array([1.0, 0.0]), wm, np.array([True, False]))
    assert stats.word_total == 2 and stats.word_zero == 0
    assert stats.sentence_total == 1 and stats.pruned_sentence_fraction == 0.0


def test_softmax_model_never_zeroes(rng):
    config, params, batch = setup("han", n_docs=6)
    stats = encodings_stats(forward_detailed(batch, params, config)[1])
    assert stats.pruned_word_fraction == 0.0 and stats.pruned_sentence_fraction == 0.0
