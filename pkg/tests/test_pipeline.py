import numpy as np
import pytest

from seqtab.errors import DataError
from seqtab.pipeline import (
    Batch,
    ModeLayout,
    apply_label_mask,
    collate,
    fit_time_scale,
    make_windows,
    random_mask,
    read_shard,
    rebase_and_scale_times,
    tokenize_window,
    window_rng,
    write_shard,
    write_windows_json,
)
from seqtab.schema import (
    CATEGORICAL,
    DYNAMIC,
    GAP_FIELD,
    MASK_ID,
    N_SPECIALS,
    NUMERICAL,
    PAD_ID,
    STATIC,
    UNK_ID,
    FieldSchema,
    Schema,
    build_vocab,
    fit_quantizer,
)


def rows_for(seq_id, n, static_val="p0", t0=0.0, gap=10.0, label=0):
    return [
        {
            "seq_id": seq_id,
            "time": t0 + i * gap,
            "profile": static_val,
            "amount": float(10 * i),
            "channel": ["swipe", "online", "chip"][i % 3],
            "label": label,
        }
        for i in range(n)
    ]


def base_schema():
    return Schema(
        [
            FieldSchema("profile", STATIC, CATEGORICAL),
            FieldSchema("amount", DYNAMIC, NUMERICAL, n_bins=4),
            FieldSchema("channel", DYNAMIC, CATEGORICAL),
            FieldSchema("label", DYNAMIC, CATEGORICAL),
        ],
        label_field="label",
    )


def fitted_vocab(rows, schema, with_gap=False):
    quant = {"amount": fit_quantizer([r["amount"] for r in rows], 4, "amount")}
    if with_gap:
        schema = schema.with_field(FieldSchema(GAP_FIELD, DYNAMIC, NUMERICAL, n_bins=4))
        gaps = [10.0] * 8 + [0.0]
        quant[GAP_FIELD] = fit_quantizer(gaps, 4, GAP_FIELD)
        rows = [dict(r, **{GAP_FIELD: 10.0}) for r in rows]
        rows[0][GAP_FIELD] = 0.0
    return build_vocab(schema, quant, rows), quant


# -- windowing ---------------------------------------------------------------


def test_window_offsets_with_clamp():
    # Oracle by hand for 14 records, l=10, stride=5: regular offset 0, then
    # 5 + 10 > 14, so the last window clamps to offset 4.
    rows = rows_for("s", 14)
    ws = make_windows(rows, base_schema(), l=10, stride=5, pad=False)
    assert len(ws) == 2
    assert [w.times[0] for w in ws] == [0.0, 0.0]
    assert ws[0].dynamic_values[0][0] == 0.0
    assert ws[1].dynamic_values[0][0] == 40.0  # record at offset 4


def test_exact_length_single_window():
    ws = make_windows(rows_for("s", 10), base_schema(), l=10, stride=1, pad=False)
    assert len(ws) == 1
    assert ws[0].times[0] == 0.0


def test_stride_one_covers_every_offset():
    ws = make_windows(rows_for("s", 12), base_schema(), l=10, stride=1, pad=False)
    assert len(ws) == 12 - 10 + 1


def test_short_sequence_left_pad():
    ws = make_windows(rows_for("s", 7), base_schema(), l=10, stride=5, pad=True)
    assert len(ws) == 1
    w = ws[0]
    assert w.pad_count == 3
    assert all(v is None for v in w.dynamic_values[0])
    assert np.all(w.times[:3] == 0.0)
    none_pad = make_windows(rows_for("s", 7), base_schema(), l=10, stride=5, pad=False)
    assert none_pad == []


def test_unsorted_timestamps_error():
    rows = rows_for("s", 5)
    rows[2]["time"] = 1e9
    with pytest.raises(DataError):
        make_windows(rows, base_schema(), l=3, stride=1)


def test_static_field_varying_is_hard_error():
    rows = rows_for("s", 6)
    rows[3]["profile"] = "p1"
    with pytest.raises(DataError):
        make_windows(rows, base_schema(), l=6, stride=1)
    ws = make_windows(rows, base_schema(), l=6, stride=1, static_policy="first")
    assert ws[0].static_values == ("p0",)


def test_window_label_is_last_records():
    rows = rows_for("s", 10)
    rows[-1]["label"] = 1
    ws = make_windows(rows, base_schema(), l=5, stride=5)
    assert [w.label for w in ws] == [0, 1]


# -- time handling -----------------------------------------------------------


def test_rebase_and_scale():
    rows = rows_for("s", 3, gap=60.0)
    w = make_windows(rows, base_schema(), l=3, stride=1)[0]
    assert rebase_and_scale_times(w, 60.0).tolist() == [0.0, 1.0, 2.0]
    with pytest.raises(DataError):
        rebase_and_scale_times(w, 0.0)


def test_time_scale_median_of_positive_gaps():
    # Gaps {30, 60, 90}: sorted median is 60 by hand.
    rows = [{"seq_id": "s", "time": t, "x": 1} for t in (0.0, 30.0, 90.0, 180.0)]
    assert fit_time_scale(rows) == 60.0


def test_time_scale_fallback_on_zero_gaps():
    rows = [{"seq_id": "s", "time": 0.0, "x": 1}, {"seq_id": "s", "time": 0.0, "x": 2}]
    assert fit_time_scale(rows) == 1.0
    w = make_windows(rows + [{"seq_id": "s", "time": 0.0, "x": 3}],
                     Schema([FieldSchema("x", DYNAMIC, CATEGORICAL)]), l=3, stride=1)[0]
    assert rebase_and_scale_times(w, 1.0).tolist() == [0.0, 0.0, 0.0]


# -- tokenization ------------------------------------------------------------


def test_tokenize_known_values_and_composition():
    rows = rows_for("s", 9)
    schema = base_schema()
    vocab, quant = fitted_vocab(rows, schema)
    w = make_windows(rows, schema, l=9, stride=1)[0]
    tw = tokenize_window(w, vocab, quant, label_in_features=False)
    assert tw.static_fields == ("profile",)
    assert tw.dynamic_fields == ("amount", "channel")  # label dropped
    assert tw.sid[0] == vocab.lookup("profile", "p0")
    # Numerical goes through the quantizer first.
    assert tw.did[0, 0] == vocab.lookup("amount", quant["amount"].bin_of(0.0))
    assert tw.did[1, 1] == vocab.lookup("channel", "online")


def test_tokenize_unseen_value_maps_to_unk():
    rows = rows_for("s", 9)
    schema = base_schema()
    vocab, quant = fitted_vocab(rows, schema)
    other = rows_for("t", 9, static_val="brand-new")
    w = make_windows(other, schema, l=9, stride=1)[0]
    tw = tokenize_window(w, vocab, quant, label_in_features=False)
    assert tw.sid[0] == UNK_ID


def test_tokenize_padded_rows_are_pad_and_never_candidates():
    rows = rows_for("s", 7)
    schema = base_schema()
    vocab, quant = fitted_vocab(rows, schema)
    w = make_windows(rows, schema, l=10, stride=1)[0]
    tw = tokenize_window(w, vocab, quant, label_in_features=False)
    assert np.all(tw.did[:3] == PAD_ID)
    assert not tw.dcand[:3].any()
    assert not tw.row_valid[:3].any() and tw.row_valid[3:].all()


def test_tokenize_is_pure():
    rows = rows_for("s", 10)
    schema = base_schema()
    vocab, quant = fitted_vocab(rows, schema, with_gap=True)
    w = make_windows(rows, schema, l=10, stride=1)[0]
    a = tokenize_window(w, vocab, quant, label_in_features=True, time_scale=10.0)
    b = tokenize_window(w, vocab, quant, label_in_features=True, time_scale=10.0)
    assert np.array_equal(a.did, b.did) and np.array_equal(a.sid, b.sid)
    assert np.array_equal(a.gap_ids, b.gap_ids)
    assert np.array_equal(a.times, b.times)


# -- masking -----------------------------------------------------------------


def tokenized_fixture(n_rows=10, with_gap=False, label_in_features=False):
    rows = rows_for("s", n_rows)
    schema = base_schema()
    vocab, quant = fitted_vocab(rows, schema, with_gap=with_gap)
    w = make_windows(rows, schema, l=10, stride=1)[0]
    tw = tokenize_window(w, vocab, quant, label_in_features=label_in_features)
    return tw, vocab


def test_mask_rate_zero_is_identity():
    tw, vocab = tokenized_fixture()
    out, stats = random_mask(tw, 0.0, window_rng(0, 0), vocab)
    assert np.all(out.sind == 1) and np.all(out.dind == 1)
    assert np.array_equal(out.did, tw.did) and np.array_equal(out.sid, tw.sid)
    assert stats.selected == 0


def test_mask_rate_one_all_mask():
    tw, vocab = tokenized_fixtures_padded()
    out, stats = random_mask(tw, 1.0, window_rng(1, 0), vocab, probs=(1.0, 0.0, 0.0))
    # Every candidate is [MASK] with indicator 0; padding untouched.
    assert np.all(out.did[tw.dcand] == MASK_ID)
    assert np.all(out.dind[tw.dcand] == 0)
    assert np.all(out.did[~tw.row_valid] == PAD_ID)
    assert np.all(out.dind[~tw.dcand] == 1)
    assert stats.selected == stats.candidates == int(tw.dcand.sum()) + int(tw.scand.sum())


def tokenized_fixtures_padded():
    rows = rows_for("s", 7)
    schema = base_schema()
    vocab, quant = fitted_vocab(rows, schema)
    w = make_windows(rows, schema, l=10, stride=1)[0]
    return tokenize_window(w, vocab, quant, label_in_features=False), vocab


def test_mask_selection_fraction_concentrates():
    # Binomial oracle: over >= 10k candidates the selected fraction lands in
    # [0.135, 0.165] with overwhelming probability.
    tw, vocab = tokenized_fixture()
    total_cand = 0
    total_sel = 0
    for i in range(600):
        _, stats = random_mask(tw, 0.15, window_rng(7, i), vocab)
        total_cand += stats.candidates
        total_sel += stats.selected
    assert total_cand >= 10_000
    frac = total_sel / total_cand
    assert 0.135 <= frac <= 0.165


def test_mask_replacements_stay_in_field_vocab():
    tw, vocab = tokenized_fixture()
    for i in range(200):
        out, _ = random_mask(tw, 0.5, window_rng(3, i), vocab, probs=(0.0, 1.0, 0.0))
        for j, f in enumerate(out.dynamic_fields):
            col = out.did[:, j][out.dind[:, j] == 0]
            base = vocab.field_base(f)
            assert np.all((col >= base) & (col < base + vocab.field_size(f)))


def test_mask_determinism_and_purity():
    tw, vocab = tokenized_fixture()
    a, _ = random_mask(tw, 0.3, window_rng(5, 11), vocab)
    b, _ = random_mask(tw, 0.3, window_rng(5, 11), vocab)
    assert np.array_equal(a.did, b.did) and np.array_equal(a.dind, b.dind)
    # Input untouched.
    assert np.all(tw.dind == 1)


def test_masked_positions_subset_of_candidates():
    tw, vocab = tokenized_fixtures_padded()
    out, _ = random_mask(tw, 0.9, window_rng(9, 0), vocab)
    assert np.all((out.dind == 0) <= tw.dcand)
    assert np.all((out.sind == 0) <= tw.scand)


def test_label_mask_for_finetune():
    tw, vocab = tokenized_fixture(label_in_features=True)
    assert "label" in tw.dynamic_fields
    out = apply_label_mask(tw, vocab)
    j = out.dynamic_fields.index("label")
    assert out.did[-1, j] == MASK_ID
    assert out.dind[-1, j] == 1  # not a pretraining target
    assert not out.dcand[-1, j]
    # A later masking pass leaves the slot alone.
    masked, _ = random_mask(out, 1.0, window_rng(0, 0), vocab, probs=(1.0, 0.0, 0.0))
    assert masked.dind[-1, j] == 1


# -- layout transforms -------------------------------------------------------


def test_gap_field_merges_as_dynamic_column():
    tw, vocab = tokenized_fixture(with_gap=True)
    out = ModeLayout(use_time_field=True).transform(tw)
    assert out.dynamic_fields[-1] == GAP_FIELD
    assert out.did.shape[1] == tw.did.shape[1] + 1
    assert np.array_equal(out.did[:, -1], tw.gap_ids)


def test_fold_static_replicates_and_counts_tokens():
    # Token-count arithmetic: l=10, n_s=1, n_d=2 here.
    tw, vocab = tokenized_fixture()
    folded = ModeLayout(fold_static=True).transform(tw)
    l, n_s, n_d = 10, 1, 2
    assert tw.level_one_token_count == n_s + l * n_d
    assert folded.level_one_token_count == l * (n_s + n_d)
    assert folded.level_one_token_count - tw.level_one_token_count == (l - 1) * n_s
    assert folded.static_fields == ()
    assert folded.dynamic_fields == ("profile", "amount", "channel")
    assert np.all(folded.did[:, 0] == tw.sid[0])


def test_fold_static_pads_padded_rows():
    tw, vocab = tokenized_fixtures_padded()
    folded = ModeLayout(fold_static=True).transform(tw)
    assert np.all(folded.did[:3, 0] == PAD_ID)
    assert not folded.dcand[:3].any()


# -- collate and shards ------------------------------------------------------


def test_collate_shapes():
    tw, vocab = tokenized_fixture()
    batch = collate([tw, tw.copy()])
    assert batch.size == 2
    assert batch.did.shape == (2, 10, 2)
    assert batch.sid.shape == (2, 1)


def test_shard_round_trip_bytes(tmp_path):
    tw, vocab = tokenized_fixture(with_gap=True)
    windows = [tw, tw.copy()]
    write_shard(tmp_path, "train", windows, vocab_digest=vocab.digest(), time_scale=10.0)
    again, manifest = read_shard(tmp_path, "train")
    assert manifest["count"] == 2
    assert manifest["vocab_digest"] == vocab.digest()
    for a, b in zip(windows, again):
        assert np.array_equal(a.did, b.did)
        assert np.array_equal(a.sid, b.sid)
        assert np.array_equal(a.gap_ids, b.gap_ids)
        assert np.array_equal(a.times, b.times)
        assert a.dynamic_fields == b.dynamic_fields
    # Writing twice produces identical bytes.
    first = (tmp_path / "train.bin").read_bytes()
    write_shard(tmp_path, "train", windows, vocab_digest=vocab.digest(), time_scale=10.0)
    assert (tmp_path / "train.bin").read_bytes() == first


def test_shard_truncation_detected(tmp_path):
    tw, vocab = tokenized_fixture()
    write_shard(tmp_path, "t", [tw], vocab_digest=vocab.digest(), time_scale=1.0)
    blob = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(blob[:-8])
    with pytest.raises(DataError):
        read_shard(tmp_path, "t")


def test_debug_json_form(tmp_path):
    tw, vocab = tokenized_fixture()
    write_windows_json(tmp_path / "w.json", [tw])
    assert (tmp_path / "w.json").read_text().startswith("[")
