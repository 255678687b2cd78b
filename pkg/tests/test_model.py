import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_instance, random_params
from oracles import central_difference, ig_finite_difference
from synthetic import flat_utterance, planted_corpus
from intent_rationale import metrics
from intent_rationale.corpus import AnnotatedUtterance, make_dataset
from intent_rationale.model import (
    PAD,
    UNK,
    TrainConfig,
    attribution_map,
    batch_loss_and_grads,
    class_averaged_attribution,
    cross_entropy,
    dumps_model,
    forward,
    integrated_gradients,
    integrated_gradients_all,
    joint_loss,
    loads_model,
    predict,
    prior_loss,
    softmax,
    train,
)


# -- forward ---------------------------------------------------------------


def test_zero_params_uniform(rng):
    p = random_params(rng, c=4)
    p.embeddings[:] = 0
    p.W[:] = 0
    p.b[:] = 0
    np.testing.assert_allclose(forward(p, [2, 3, 4]), [0.25] * 4)


def test_empty_sequence_is_softmax_of_bias(rng):
    p = random_params(rng)
    np.testing.assert_allclose(forward(p, []), softmax(p.b))
    np.testing.assert_allclose(forward(p, [PAD, PAD]), softmax(p.b))


def test_identical_rows_uniform(rng):
    p = random_params(rng, c=3)
    p.W[:] = p.W[0]
    p.b[:] = 0.7
    np.testing.assert_allclose(forward(p, [2, 5, 7]), [1 / 3] * 3)


def test_out_of_range_id(rng):
    p = random_params(rng, V=6)
    with pytest.raises(IndexError):
        forward(p, [2, 6])
    with pytest.raises(IndexError):
        forward(p, [-1])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 30.0))
def test_probability_simplex(seed, scale):
    rng = np.random.default_rng(seed)
    p, ids = random_instance(rng, scale=scale)
    probs = forward(p, ids)
    assert np.all(probs >= 0)
    assert abs(probs.sum() - 1) <= 1e-9


# -- losses ----------------------------------------------------------------


def test_cross_entropy_values():
    assert cross_entropy([0.25] * 4, 2) == pytest.approx(math.log(4))
    assert cross_entropy([1.0, 0.0], 0) == 0.0
    assert cross_entropy([0.5, 0.5], 1) == pytest.approx(math.log(2))
    assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    with pytest.raises(IndexError):
        cross_entropy([0.5, 0.5], 2)


def test_class_average():
    np.testing.assert_allclose(class_averaged_attribution([[0.2, 0.6], [0.4, 0.0]]), [0.4, 0.2])
    np.testing.assert_array_equal(class_averaged_attribution(np.zeros((3, 4))), np.zeros(3))
    np.testing.assert_array_equal(class_averaged_attribution([[0.3], [-1.0]]), [0.3, -1.0])


def test_prior_loss():
    assert prior_loss([1, 0, 1], [1, 0, 1]) == 0.0
    assert prior_loss([0.5, 0.0, 1.0], [1, 0, 1]) == pytest.approx(0.25)
    assert prior_loss([0, 0], [1, 1]) == 2.0
    with pytest.raises(ValueError):
        prior_loss([0.1], [1, 0])


def test_joint_loss():
    assert joint_loss(1.3, 0.25, 0.0) == 1.3
    assert joint_loss(1.0, 0.25, 1e5) == 25001.0
    assert joint_loss(0.7, 0.0, 1e6) == 0.7


# -- integrated gradients ------------------------------------------------------


def test_ig_zero_at_baseline(rng):
    p = random_params(rng)
    for j in range(p.num_classes):
        np.testing.assert_array_equal(integrated_gradients(p, [PAD, PAD, PAD], j, 50), 0.0)


def test_ig_zero_for_constant_predictor(rng):
    p = random_params(rng)
    p.W[:] = p.W[1]
    for j in range(p.num_classes):
        np.testing.assert_allclose(integrated_gradients(p, [2, 3, 4], j, 50), 0.0, atol=1e-15)


def test_ig_pad_positions_get_zero(rng):
    p = random_params(rng)
    ig = integrated_gradients(p, [3, PAD, 5, PAD], 0, 20)
    assert ig[1] == 0.0 and ig[3] == 0.0


def test_ig_matches_finite_difference_oracle(rng):
    for _ in range(10):
        p, ids = random_instance(rng, max_V=8, max_d=4, max_m=4)
        for j in range(p.num_classes):
            np.testing.assert_allclose(
                integrated_gradients(p, ids, j, 4), ig_finite_difference(p, ids, j, 4), atol=1e-8
            )


def test_ig_completeness_at_50_steps(rng):
    for _ in range(50):
        p, ids = random_instance(rng, scale=0.3)
        for j in range(p.num_classes):
            gap = forward(p, ids)[j] - forward(p, [])[j]
            assert abs(integrated_gradients(p, ids, j, 50).sum() - gap) <= 1e-3


def test_ig_residual_shrinks_as_one_over_steps(rng):
    p, ids = random_instance(rng, scale=1.0)
    gap = forward(p, ids)[0] - forward(p, [])[0]
    res = [integrated_gradients(p, ids, 0, s).sum() - gap for s in (1000, 2000, 4000)]
    assert res[0] / res[1] == pytest.approx(2.0, rel=0.01)
    assert res[1] / res[2] == pytest.approx(2.0, rel=0.01)


def test_ig_on_linear_score_is_exact(rng):
    # logit output is linear in the embeddings: IG = (W_j . x_i) / m for any step count
    p, ids = random_instance(rng)
    m = len(ids)
    expected = p.embeddings[ids] @ p.W.T / m
    for steps in (1, 7, 50):
        np.testing.assert_allclose(integrated_gradients_all(p, ids, steps, output="logit"), expected, rtol=1e-12)


def test_probability_class_average_vanishes(rng):
    p, ids = random_instance(rng)
    per_class = integrated_gradients_all(p, ids, 50, output="probability")
    np.testing.assert_allclose(class_averaged_attribution(per_class), 0.0, atol=1e-15)


def test_attribution_map_invariants(rng):
    p, ids = random_instance(rng)
    amap = attribution_map(p, ids, "r1", 50)
    assert amap.per_class.shape == (len(ids), p.num_classes)
    assert np.max(np.abs(amap.attributions - amap.per_class.mean(axis=1))) <= 1e-12
    assert abs(amap.probabilities.sum() - 1) <= 1e-9
    assert amap.predicted_class == int(np.argmax(amap.probabilities))


# -- gradients -------------------------------------------------------------


def random_batch(rng, p):
    B = int(rng.integers(1, 4))
    V = len(p.vocab)
    batch = [rng.integers(1, V, size=int(rng.integers(1, 7))).tolist() for _ in range(B)]
    gold = rng.integers(0, p.num_classes, size=B).tolist()
    masks = [rng.integers(0, 2, size=len(x)).tolist() for x in batch]
    return batch, gold, masks


def gradient_errors(p, batch, gold, masks, lam):
    _, _, _, grads = batch_loss_and_grads(p, batch, gold, masks, lam)
    out = {}
    for name in ("embeddings", "W", "b"):
        fd = central_difference(lambda: batch_loss_and_grads(p, batch, gold, masks, lam)[2], getattr(p, name), 1e-5)
        a = grads[name]
        out[name] = np.linalg.norm(a - fd) / max(np.linalg.norm(a), np.linalg.norm(fd), 1e-300)
    return out


@pytest.mark.parametrize("lam", [0.0, 1.0, 1e3])
def test_gradients_match_finite_differences(rng, lam):
    for _ in range(10):
        p, _ = random_instance(rng)
        batch, gold, masks = random_batch(rng, p)
        errs = gradient_errors(p, batch, gold, masks, lam)
        assert max(errs.values()) <= 1e-4, errs


def test_pad_row_gets_no_gradient(rng):
    p = random_params(rng)
    _, _, _, grads = batch_loss_and_grads(p, [[2, 3], [4]], [0, 1], [[1, 0], [1]], 10.0)
    assert np.all(grads["embeddings"][PAD] == 0)


# -- training --------------------------------------------------------------


def separable_corpus():
    words = {"a": ["book", "reserve"], "b": ["weather", "rain"], "c": ["play", "song"], "d": ["rate", "stars"]}
    recs = []
    for lab, (w1, w2) in words.items():
        recs.append(AnnotatedUtterance(flat_utterance(f"{lab}1", [w1, "the", "thing"], lab), (1, 0, 0)))
        recs.append(AnnotatedUtterance(flat_utterance(f"{lab}2", ["please", w2, "now"], lab), (0, 1, 0)))
    return make_dataset(recs)


def test_separable_corpus_is_separable_by_construction():
    ds = separable_corpus()
    vocab_by_class = {}
    for r in ds.records:
        vocab_by_class.setdefault(r.intent, set()).update(f for f, m in zip(r.forms, r.mask) if m)
    classes = list(vocab_by_class)
    for i, a in enumerate(classes):
        for b in classes[i + 1 :]:
            assert not vocab_by_class[a] & vocab_by_class[b]
    # every record holds at least one token private to its class
    for r in ds.records:
        assert any(m for m in r.mask)


def test_train_reaches_full_training_accuracy():
    ds = separable_corpus()
    params = train(ds, TrainConfig(lam=0.0, epochs=200, seed=0, dim=16))
    assert all(predict(params, r.forms)[0] == r.intent for r in ds.records)
    assert np.all(params.embeddings[PAD] == 0)


def test_train_deterministic():
    ds = separable_corpus()
    cfg = TrainConfig(lam=10.0, epochs=5, seed=3, dim=8)
    assert dumps_model(train(ds, cfg)) == dumps_model(train(ds, cfg))


def test_lambda_zero_equals_plain_training():
    ds = separable_corpus()
    plain = make_dataset([r.utterance for r in ds.records])
    cfg = TrainConfig(lam=0.0, epochs=20, seed=5, dim=8)
    h1, h2 = [], []
    a, b = train(ds, cfg, history=h1), train(plain, cfg, history=h2)
    assert dumps_model(a) == dumps_model(b)
    assert [e["ce"] for e in h1] == [e["ce"] for e in h2]


def test_train_errors():
    with pytest.raises(ValueError):
        train(make_dataset([]), TrainConfig())
    plain = make_dataset([r.utterance for r in separable_corpus().records])
    with pytest.raises(ValueError, match="no explanation mask"):
        train(plain, TrainConfig(lam=1.0, epochs=1))
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(ig_steps=0)


def _token_f1(params, records):
    f1 = []
    for r in records:
        amap = attribution_map(params, params.vocab.encode(r.forms))
        f1.append(metrics.token_f1(metrics.topk_rationale(amap.attributions, 5), metrics.mask_to_rationale(r.mask)))
    return float(np.mean(f1))


def test_attribution_prior_raises_token_f1():
    ds = planted_corpus(200, seed=11)
    base = train(ds, TrainConfig(lam=0.0, epochs=20, seed=11, dim=16))
    guided = train(ds, TrainConfig(lam=1e4, epochs=20, seed=11, dim=16))
    assert _token_f1(guided, ds.records) > _token_f1(base, ds.records)


# -- predict / files -------------------------------------------------------------


def test_predict_empty_input(rng):
    p = random_params(rng)
    label, probs = predict(p, [])
    assert label == p.vocab.labels[int(np.argmax(softmax(p.b)))]


def test_predict_oov_maps_to_unk(rng):
    p = random_params(rng)
    _, a = predict(p, ["zzz", "qqq", "T2"])
    np.testing.assert_array_equal(a, forward(p, [UNK, UNK, 2]))


def test_predict_tie_breaks_low(rng):
    p = random_params(rng, c=3)
    p.W[:] = 0
    p.b[:] = [0.0, 1.0, 1.0]
    assert predict(p, ["t2"])[0] == "c1"


def test_predict_truncates(rng):
    p = random_params(rng)
    toks = ["t2"] * 3 + ["t3"] * 100
    np.testing.assert_array_equal(predict(p, toks, max_len=3)[1], forward(p, [2, 2, 2]))


def test_model_file_round_trip(rng):
    p = random_params(rng)
    text = dumps_model(p)
    again = loads_model(text)
    assert dumps_model(again) == text
    np.testing.assert_array_equal(again.embeddings, p.embeddings)
    assert again.vocab.labels == p.vocab.labels
    head = text[:40]
    assert head.startswith('{"version":1,"labels":')


def test_model_file_rejects_bad_version(rng):
    text = dumps_model(random_params(rng)).replace('"version":1', '"version":2')
    with pytest.raises(ValueError):
        loads_model(text)
