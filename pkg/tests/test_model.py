import math

import numpy as np
import pytest
from util_toy import make_toy

from seqtab.errors import DataError
from seqtab.model import (
    MODES,
    Model,
    ModelConfig,
    init_model_params,
    sinusoid_frequencies,
    time_position_embedding,
)
from seqtab.nn import Tape, gradient_check, zero_grads
from seqtab.nn import autodiff as ad
from seqtab.pipeline import collate, random_mask, window_rng
from seqtab.schema import MASK_ID


def small_config(windows, mode="fata", **kw):
    ref = windows[0]
    defaults = dict(
        window_len=ref.length,
        static_fields=ref.static_fields,
        dynamic_fields=ref.dynamic_fields,
        mode=mode,
        dim=16,
        field_dim=16,
        field_layers=1,
        field_heads=2,
        bert_layers=1,
        bert_heads=2,
        ff_dim=32,
        dropout=0.0,
        dtype="float64",
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


def build(mode="fata", seed=0, **kw):
    windows, vocab, quant, ts = make_toy(seed=3)
    cfg = small_config(windows, mode=mode, **kw)
    model = Model(cfg, vocab, seed=seed)
    layout = cfg.layout()
    batch = collate([layout.transform(w) for w in windows])
    return model, batch, windows, vocab


# -- time-aware position embedding -------------------------------------------


def test_time_pos_index_zero_alternates_zero_one():
    p = time_position_embedding(1.0, 0.0, 0.0, index=0, t=0.0, dim=8)
    assert np.allclose(p, [0, 1, 0, 1, 0, 1, 0, 1])


def test_time_pos_reduces_to_index_only_sinusoid():
    # With w_t = 0 the embedding only sees the integer index.
    d = 16
    for i in (0, 1, 7, 100, 511):
        got = time_position_embedding(1.0, 0.0, 0.0, index=i, t=123.456, dim=d)
        freq = sinusoid_frequencies(d)
        want = np.where(np.arange(d) % 2 == 0, np.sin(i * freq), np.cos(i * freq))
        assert np.abs(got - want).max() < 1e-12


def test_time_pos_hand_evaluated_example():
    # d=4, (w_p, w_t, b) = (1, 1, 0), i=2, t=3 -> tpos = 5.
    got = time_position_embedding(1.0, 1.0, 0.0, index=2, t=3.0, dim=4)
    want = np.array(
        [
            math.sin(5.0),
            math.cos(5.0 / 10000.0 ** (2.0 / 4.0)),
            math.sin(5.0 / 10000.0),
            math.cos(5.0 / 10000.0 ** (6.0 / 4.0)),
        ]
    )
    assert np.allclose(got, want, atol=1e-15)


def test_time_pos_tensor_path_matches_reference_and_bounds():
    model, batch, *_ = build()
    p = model.time_positions(batch.times.astype(np.float64)).data
    assert np.all(np.abs(p) <= 1.0 + 1e-12)
    for b in range(p.shape[0]):
        for i in range(p.shape[1]):
            want = time_position_embedding(1.0, 1.0, 0.0, i, float(batch.times[b, i]),
                                           model.config.dim)
            assert np.abs(p[b, i] - want).max() < 1e-12


def test_time_pos_lipschitz_per_element():
    # |d p_j / d tpos| <= 10000^(-2j/d): check via autodiff on each element.
    model, batch, *_ = build()
    d = model.config.dim
    freq = sinusoid_frequencies(d)
    times = batch.times[:1].astype(np.float64)
    for j in range(d):
        with Tape() as tape:
            zero_grads(model.params)
            p = model.time_positions(times)
            elem = ad.reduce_sum(ad.narrow(ad.narrow(p, 1, 2, 1), 2, j, 1))
            tape.backward(elem)
        # d tpos / d b = 1, so the gradient on b is d p_j / d tpos summed once.
        db = abs(float(model.params["tp.b"].grad))
        assert db <= freq[j] + 1e-9


# -- level-one encoders -------------------------------------------------------


def test_static_encoding_shape_purity_sensitivity():
    model, batch, *_ = build()
    te = model.static_record_embedding(batch.sid).data
    assert te.shape == (batch.size, model.config.dim)
    again = model.static_record_embedding(batch.sid).data
    assert np.array_equal(te, again)
    bumped = batch.sid.copy()
    other = (bumped[0, 0] + 1) % model.vocab.total_size
    bumped[0, 0] = other
    te2 = model.static_record_embedding(bumped).data
    assert not np.allclose(te[0], te2[0])


def test_dynamic_encoding_per_record_independence_and_permutation():
    model, batch, *_ = build()
    te = model.dynamic_record_embeddings(batch.did).data
    assert te.shape == (batch.size, model.config.window_len, model.config.dim)
    # Permuting two records permutes their embeddings.
    perm = batch.did.copy()
    perm[0, [2, 5]] = perm[0, [5, 2]]
    te_p = model.dynamic_record_embeddings(perm).data
    assert np.allclose(te[0, 2], te_p[0, 5]) and np.allclose(te[0, 5], te_p[0, 2])
    # Record i is exactly independent of record j's tokens.
    bumped = batch.did.copy()
    bumped[0, 7, :] = (bumped[0, 7, :] + 1) % model.vocab.total_size
    te_b = model.dynamic_record_embeddings(bumped).data
    assert np.array_equal(te[0, :7], te_b[0, :7])
    assert np.array_equal(te[0, 8:], te_b[0, 8:])


def test_dynamic_encoding_shape_mismatch_errors():
    model, batch, *_ = build()
    with pytest.raises(DataError):
        model.dynamic_record_embeddings(batch.did[:, :, :1])


# -- composition ---------------------------------------------------------------


def test_compose_zero_embeddings_equal_positions():
    model, batch, *_ = build()
    B, l = batch.times.shape
    d = model.config.dim
    zeros_s = ad.const(np.zeros((B, d)))
    zeros_d = ad.const(np.zeros((B, l, d)))
    model.params["fe"].data[:] = 0.0
    ie, validity = model.compose_inputs(zeros_s, zeros_d, batch.times.astype(np.float64),
                                        batch.row_valid)
    assert ie.data.shape == (B, l + 1, d)
    p = model.time_positions(batch.times.astype(np.float64)).data
    assert np.allclose(ie.data[:, 1:], p)
    assert np.allclose(ie.data[:, 0], p[:, 0])  # static row shares P(0)
    assert validity.shape == (B, l + 1)
    assert validity[:, 0].all()


def test_sequence_embeddings_row_counts_by_mode():
    for mode, extra in (("fata", 1), ("no_time_pos", 1), ("replicated_static", 0), ("both_off", 0)):
        model, batch, *_ = build(mode=mode)
        se, validity = model.sequence_embeddings(batch)
        l = model.config.window_len
        assert se.data.shape == (batch.size, l + extra, model.config.dim)
        assert validity.shape == se.data.shape[:2]
        again, _ = model.sequence_embeddings(batch)
        assert np.array_equal(se.data, again.data)


def test_field_type_embedding_is_live():
    model, batch, *_ = build()
    se, _ = model.sequence_embeddings(batch)
    fe = model.params["fe"]
    fe.data[[0, 1]] = fe.data[[1, 0]]
    se_swapped, _ = model.sequence_embeddings(batch)
    assert not np.allclose(se.data, se_swapped.data)


def test_level_one_token_counts_per_mode():
    windows, vocab, *_ = make_toy(seed=3)
    l = windows[0].length
    n_s = len(windows[0].static_fields)
    n_d = len(windows[0].dynamic_fields)
    fata = small_config(windows, mode="fata", use_time_field=False)
    repl = small_config(windows, mode="replicated_static", use_time_field=False)
    assert fata.level_one_token_count() == n_s + l * n_d
    assert repl.level_one_token_count() == l * (n_s + n_d)
    assert repl.level_one_token_count() - fata.level_one_token_count() == (l - 1) * n_s
    # The transformed windows really carry that many level-one tokens.
    t_fata = fata.layout().transform(windows[0])
    t_repl = repl.layout().transform(windows[0])
    assert t_fata.level_one_token_count == fata.level_one_token_count()
    assert t_repl.level_one_token_count == repl.level_one_token_count()


def test_no_time_pos_ignores_time_values():
    # With the learned position table, changing the clock leaves everything
    # unchanged as long as the gap tokens are fixed.
    model, batch, *_ = build(mode="no_time_pos")
    se, _ = model.sequence_embeddings(batch)
    shifted = collate_like(batch, times=batch.times * 37.0 + 1.0)
    se2, _ = model.sequence_embeddings(shifted)
    assert np.array_equal(se.data, se2.data)


def test_time_rescaling_invariance_when_wt_zero():
    model, batch, *_ = build(mode="fata", use_time_field=False)
    model.params["tp.w_t"].data[...] = 0.0
    model.params["tp.b"].data[...] = 0.0
    se, _ = model.sequence_embeddings(batch)
    rescaled = collate_like(batch, times=batch.times * 123.0)
    se2, _ = model.sequence_embeddings(rescaled)
    assert np.allclose(se.data, se2.data, atol=1e-12)


def collate_like(batch, times):
    from seqtab.pipeline import Batch

    return Batch(
        sid=batch.sid, sorig=batch.sorig, sind=batch.sind,
        did=batch.did, dorig=batch.dorig, dind=batch.dind,
        times=times, row_valid=batch.row_valid, labels=batch.labels,
    )


# -- token prediction heads ----------------------------------------------------


def test_mlm_head_widths_and_probability_sums():
    model, batch, *_ = build()
    se, _ = model.sequence_embeddings(batch)
    probs = model.mlm_probabilities(se)
    for f in model.config.eff_static_fields:
        assert probs[f].data.shape == (batch.size, model.vocab.local_width(f))
    for f in model.config.eff_dynamic_fields:
        assert probs[f].data.shape == (batch.size * model.config.window_len,
                                       model.vocab.local_width(f))
    for t in probs.values():
        assert np.abs(t.data.sum(axis=-1) - 1.0).max() < 1e-6


def test_untrained_loss_near_log_vocab():
    model, batch, windows, vocab = build()
    masked = [random_mask(model.config.layout().transform(w), 0.5, window_rng(1, i), vocab)[0]
              for i, w in enumerate(windows)]
    mb = collate(masked)
    loss, count = model.pretrain_loss(mb)
    assert count > 0
    sizes = []
    for j, f in enumerate(model.config.eff_static_fields):
        sizes += [math.log(vocab.field_size(f))] * int((1 - mb.sind[:, j]).sum())
    for j, f in enumerate(model.config.eff_dynamic_fields):
        sizes += [math.log(vocab.field_size(f))] * int((1 - mb.dind[:, :, j]).sum())
    assert abs(float(loss.data) - float(np.mean(sizes))) < 0.5


def test_mlm_loss_no_masked_tokens_is_zero():
    model, batch, *_ = build()
    with pytest.warns(UserWarning):
        loss, count = model.pretrain_loss(batch)
    assert count == 0 and float(loss.data) == 0.0


def test_mlm_loss_hand_computed_values():
    model, batch, windows, vocab = build()
    se, _ = model.sequence_embeddings(batch)
    logits = model.mlm_logits(se)
    f = model.config.eff_dynamic_fields[0]
    width = vocab.local_width(f)

    # One masked token with a uniform head: ln(width).
    b1 = collate_like_mask(batch, [(0, 0, f, model.config)])
    logits_uniform = dict(logits)
    logits_uniform[f] = ad.const(np.zeros_like(logits[f].data))
    loss, count = model.mlm_loss(logits_uniform, b1)
    assert count == 1
    assert math.isclose(float(loss.data), math.log(width), rel_tol=1e-9)

    # Two masked tokens with hand-set probabilities p1, p2: (-ln p1 - ln p2)/2.
    b2 = collate_like_mask(batch, [(0, 0, f, model.config), (0, 3, f, model.config)])
    hand = np.full_like(logits[f].data, -30.0)
    t0 = vocab.to_local(f, b2.dorig[0, 0, 0:1])[0]
    t3 = vocab.to_local(f, b2.dorig[0, 3, 0:1])[0]
    l = model.config.window_len
    p1, p2 = 0.7, 0.2
    hand[0 * l + 0, :] = 0.0
    hand[0 * l + 0, t0] = math.log(p1) - math.log((1 - p1) / (hand.shape[1] - 1))
    # Simpler: craft logits whose softmax gives exactly (p1, rest uniform).
    hand[0 * l + 0, :] = math.log((1 - p1) / (hand.shape[1] - 1))
    hand[0 * l + 0, t0] = math.log(p1)
    hand[0 * l + 3, :] = math.log((1 - p2) / (hand.shape[1] - 1))
    hand[0 * l + 3, t3] = math.log(p2)
    logits_hand = dict(logits)
    logits_hand[f] = ad.const(hand)
    loss2, count2 = model.mlm_loss(logits_hand, b2)
    assert count2 == 2
    want = (-math.log(p1) - math.log(p2)) / 2.0
    assert math.isclose(float(loss2.data), want, rel_tol=1e-9)


def collate_like_mask(batch, masked_positions):
    """Copy a batch and mark (window, record, field) positions as masked."""
    from seqtab.pipeline import Batch

    dind = batch.dind.copy()
    for w, r, fname, cfg in masked_positions:
        j = cfg.eff_dynamic_fields.index(fname)
        dind[w, r, j] = 0
    return Batch(
        sid=batch.sid, sorig=batch.sorig, sind=batch.sind,
        did=batch.did, dorig=batch.dorig, dind=dind,
        times=batch.times, row_valid=batch.row_valid, labels=batch.labels,
    )


def test_loss_gradient_exactly_zero_at_unmasked_logits():
    model, batch, windows, vocab = build()
    masked = [random_mask(model.config.layout().transform(w), 0.3, window_rng(2, i), vocab)[0]
              for i, w in enumerate(windows)]
    mb = collate(masked)
    with Tape() as tape:
        zero_grads(model.params)
        se, _ = model.sequence_embeddings(mb)
        logits = model.mlm_logits(se)
        loss, count = model.mlm_loss(logits, mb)
        tape.backward(loss)
    assert count > 0
    for j, f in enumerate(model.config.eff_dynamic_fields):
        g = logits[f].grad
        w = (1 - mb.dind[:, :, j]).reshape(-1)
        assert g is not None
        assert np.all(g[w == 0] == 0.0)
        assert np.any(g[w == 1] != 0.0)


# -- classification head --------------------------------------------------------


def test_classify_zero_weights_gives_sigmoid_bias():
    model, batch, *_ = build()
    model.params["cls.w"].data[:] = 0.0
    model.params["cls.b"].data[:] = 0.7
    se, _ = model.sequence_embeddings(batch)
    z = model.classify_logits(se)
    scores = 1.0 / (1.0 + np.exp(-z.data))
    assert np.allclose(scores, 1.0 / (1.0 + math.exp(-0.7)))


def test_scores_in_open_unit_interval():
    model, batch, windows, _ = build()
    s = model.scores([model.config.layout().transform(w) for w in windows])
    assert s.shape == (len(windows),)
    assert np.all((s > 0) & (s < 1))


def test_classifier_head_gradcheck_frozen_encoder():
    model, batch, windows, _ = build()
    labels = (np.arange(batch.size) % 2).astype(np.float64)
    head = {k: model.params[k] for k in model.head_param_names()}

    def loss_fn():
        return model.classification_loss(batch, labels)

    report = gradient_check(loss_fn, head, h=1e-5, n_samples=40, rng=np.random.default_rng(0))
    assert report.max_rel_err < 1e-6, report


# -- config plumbing -------------------------------------------------------------


def test_config_json_round_trip():
    windows, vocab, *_ = make_toy(seed=3)
    cfg = small_config(windows, mode="no_time_pos")
    back = ModelConfig.from_json_dict(cfg.to_json_dict())
    assert back.to_json_dict() == cfg.to_json_dict()
    assert back.eff_dynamic_fields == cfg.eff_dynamic_fields


def test_all_modes_have_consistent_params():
    windows, vocab, *_ = make_toy(seed=3)
    for mode in MODES:
        cfg = small_config(windows, mode=mode)
        params = init_model_params(cfg, vocab, seed=1)
        again = init_model_params(cfg, vocab, seed=1)
        assert set(params) == set(again)
        assert all(np.array_equal(params[k].data, again[k].data) for k in params)
        if cfg.uses_time_positions:
            assert float(params["tp.w_p"].data) == 1.0
            assert float(params["tp.w_t"].data) == 1.0
            assert float(params["tp.b"].data) == 0.0
            assert "pos.table" not in params
        else:
            assert "pos.table" in params
        if mode in ("replicated_static", "both_off"):
            assert "fe" not in params and "sf.proj.w" not in params
