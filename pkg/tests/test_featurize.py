"""Bucketing, response shifting, windowing and the dataset container."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tempokt.featurize import (
    EncodedDataset,
    LagBuckets,
    VocabSpec,
    WindowBatch,
    ablate_lag_streams,
    bucket_elapsed,
    build_windows,
    compute_lag_buckets,
    encode_explanation,
    encode_histories,
    encode_response_stream,
    last_window,
    load_dataset,
    save_dataset,
    window_offsets,
)
from tempokt.ingest import (
    ContentType,
    Correctness,
    InteractionRecord,
    QuestionMeta,
    UserHistory,
)


def make_history(user_id, events):
    """events: list of (ts_ms, content_id, correct, prior_elapsed, prior_expl)."""
    records = []
    for i, (ts, cid, correct, elapsed, expl) in enumerate(events):
        records.append(InteractionRecord(
            row_id=i, timestamp_ms=ts, user_id=user_id, content_id=cid,
            content_type=ContentType.QUESTION, task_container_id=i,
            answered_correctly=Correctness.CORRECT if correct else Correctness.INCORRECT,
            prior_elapsed_ms=elapsed, prior_had_explanation=expl,
        ))
    return UserHistory(user_id=user_id, events=tuple(records))


QMETA = {10: QuestionMeta(10, 3), 11: QuestionMeta(11, 7), 12: QuestionMeta(12, 1)}
SPEC = VocabSpec.for_questions(QMETA)


class TestBucketElapsed:
    def test_absent_is_zero(self):
        assert bucket_elapsed(None) == 0

    def test_floor_division(self):
        assert bucket_elapsed(17_500) == 17

    def test_clamped_at_cap(self):
        # 10,000,000 ms = 10,000 s, far past the 300 s cap
        assert bucket_elapsed(10_000_000) == 300

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            bucket_elapsed(-1)


class TestComputeLagBuckets:
    def test_zero_gap(self):
        assert compute_lag_buckets(500, 500) == LagBuckets(0, 0, 0)

    def test_mixed_granularities(self):
        # 125,000 ms: 125 s, 2 min, 0 days
        assert compute_lag_buckets(0, 125_000) == LagBuckets(125, 2, 0)

    def test_clamps(self):
        # 90,061,000 ms: 90,061 s -> 300; 1501 min -> 1440; 1 day
        assert compute_lag_buckets(0, 90_061_000) == LagBuckets(300, 1440, 1)

    def test_out_of_order_rejected(self):
        with pytest.raises(ValueError, match="out-of-order"):
            compute_lag_buckets(10, 5)


@given(st.integers(0, 10**12))
def test_lag_buckets_match_direct_arithmetic(dt):
    """Independent oracle: plain integer division with clamps."""
    got = compute_lag_buckets(0, dt)
    assert got == LagBuckets(
        min(dt // 1_000, 300), min(dt // 60_000, 1440), min(dt // 86_400_000, 365))


def test_lag_bucket_brute_force_equivalence():
    """10^4 random gaps against the direct-arithmetic oracle, exact."""
    rng = np.random.default_rng(0)
    exponents = rng.uniform(0, 12, 10_000)
    for dt in (10 ** exponents).astype(np.int64):
        dt = int(dt)
        got = compute_lag_buckets(0, dt)
        assert (got.lag_s, got.lag_m, got.lag_d) == (
            min(dt // 1_000, 300), min(dt // 60_000, 1440), min(dt // 86_400_000, 365))


@given(st.integers(0, 10**12), st.integers(0, 10**12))
def test_lag_buckets_monotone_in_gap(a, b):
    lo, hi = sorted((a, b))
    small = compute_lag_buckets(0, lo)
    big = compute_lag_buckets(0, hi)
    assert small.lag_s <= big.lag_s
    assert small.lag_m <= big.lag_m
    assert small.lag_d <= big.lag_d


@given(st.integers(0, 10**12))
def test_lag_bucket_cross_granularity_consistency(dt):
    """The clamps imply: seconds saturate once minutes reach 6, minutes
    saturate once days reach 2."""
    got = compute_lag_buckets(0, dt)
    if got.lag_m >= 6:
        assert got.lag_s == 300
    if got.lag_d >= 2:
        assert got.lag_m == 1440


class TestEncodeExplanation:
    @pytest.mark.parametrize("flag,expected", [(None, 0), (False, 1), (True, 2)])
    def test_mapping(self, flag, expected):
        assert encode_explanation(flag) == expected


class TestEncodeResponseStream:
    def test_single_element_is_start_token_only(self):
        assert encode_response_stream([1]) == [0]

    def test_shift_and_offset(self):
        assert encode_response_stream([1, 0, 1]) == [0, 2, 1]
        assert encode_response_stream([0, 0]) == [0, 1]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            encode_response_stream([])


class TestWindowOffsets:
    def test_short_history_single_window(self):
        assert window_offsets(3, 100, 100) == [0]

    def test_250_events_stride_100(self):
        assert window_offsets(250, 100, 100) == [0, 100, 150]

    def test_exact_tiling_no_extra_window(self):
        assert window_offsets(200, 100, 100) == [0, 100]

    def test_overlapping_stride(self):
        assert window_offsets(250, 100, 50) == [0, 50, 100, 150]

    def test_stride_must_be_positive(self):
        with pytest.raises(ValueError):
            window_offsets(10, 100, 0)


class TestBuildWindows:
    def test_left_padding(self):
        history = make_history(5, [(0, 10, 1, None, None),
                                   (30_000, 11, 0, 20_000, True),
                                   (90_000, 12, 1, 5_000, False)])
        (win,) = build_windows(history, QMETA, SPEC, max_seq=100, stride=100)
        assert win.valid.sum() == 3
        assert not win.valid[:97].any()
        # pad positions carry pad ids in every stream
        for name in ("question", "part", "explanation", "response",
                     "elapsed", "lag_s", "lag_m", "lag_d"):
            assert (getattr(win, name)[:97] == SPEC.pad_id(name)).all()
        # valid content
        assert win.question[97:].tolist() == [0, 1, 2]  # dense ids, sorted by raw id
        assert win.part[97:].tolist() == [2, 6, 0]
        assert win.explanation[97:].tolist() == [0, 2, 1]
        assert win.elapsed[97:].tolist() == [0, 20, 5]
        assert win.lag_s[97:].tolist() == [0, 30, 60]
        assert win.response[97:].tolist() == [0, 2, 1]
        assert win.target[97:].tolist() == [1, 0, 1]

    def test_interior_lag_uses_true_previous_event(self):
        events = [(i * 10_000, 10, 1, None, None) for i in range(250)]
        history = make_history(1, events)
        windows = build_windows(history, QMETA, SPEC, max_seq=100, stride=100)
        assert [w.start_index for w in windows] == [0, 100, 150]
        # every window-initial position after the first still sees the 10 s gap
        assert windows[1].lag_s[0] == 10
        assert windows[2].lag_s[0] == 10
        # only the user's very first event has a zero gap
        assert windows[0].lag_s[0] == 0

    def test_response_stream_is_window_local(self):
        events = [(i * 1_000, 10, i % 2, None, None) for i in range(150)]
        history = make_history(1, events)
        w0, w1 = build_windows(history, QMETA, SPEC, max_seq=100, stride=100)
        assert w1.response[0] == 0  # start token restarts per window
        assert w1.response[1] == history.events[w1.start_index].answered_correctly.value + 1

    def test_unknown_content_id_named(self):
        history = make_history(1, [(0, 999, 1, None, None)])
        with pytest.raises(KeyError, match="999"):
            build_windows(history, QMETA, SPEC)

    def test_empty_history_rejected(self):
        with pytest.raises(ValueError):
            build_windows(UserHistory(user_id=1, events=()), QMETA, SPEC)

    def test_window_reconstruction(self):
        """De-duplicated valid positions reproduce the original sequence."""
        rng = np.random.default_rng(1)
        events = [(int(i * 7_000), [10, 11, 12][rng.integers(3)], int(rng.integers(2)),
                   None, None) for i in range(237)]
        history = make_history(1, events)
        windows = build_windows(history, QMETA, SPEC, max_seq=100, stride=60)
        seen = {}
        for w in windows:
            pad = 100 - int(w.valid.sum())
            for pos in range(pad, 100):
                idx = w.start_index + pos - pad
                key = (idx,)
                value = (int(w.question[pos]), int(w.target[pos]), int(w.lag_s[pos]))
                if key in seen:
                    assert seen[key] == value  # overlap must agree
                seen[key] = value
        assert sorted(k[0] for k in seen) == list(range(237))

    def test_no_leakage_in_response_stream(self):
        """Flipping correctness at position i leaves responses <= i unchanged."""
        rng = np.random.default_rng(2)
        events = [(i * 1_000, 10, int(rng.integers(2)), None, None) for i in range(40)]
        history = make_history(1, events)
        (base,) = build_windows(history, QMETA, SPEC, max_seq=40, stride=40)
        for i in range(40):
            flipped = list(events)
            ts, cid, correct, el, ex = flipped[i]
            flipped[i] = (ts, cid, 1 - correct, el, ex)
            (pert,) = build_windows(make_history(1, flipped), QMETA, SPEC,
                                    max_seq=40, stride=40)
            assert (pert.response[:i + 1] == base.response[:i + 1]).all()


class TestLastWindow:
    def test_uses_only_recent_events_with_true_lag(self):
        events = [(i * 10_000, 10, 1, None, None) for i in range(130)]
        history = make_history(1, events)
        win = last_window(history, QMETA, SPEC, max_seq=100)
        assert win.start_index == 30
        assert int(win.valid.sum()) == 100
        assert win.lag_s[0] == 10  # real gap to the dropped predecessor


class TestVocabSpec:
    def test_pad_ids_are_largest_indices(self):
        spec = VocabSpec(n_questions=201)
        assert spec.pad_id("question") == 200
        assert spec.pad_id("part") == 7
        assert spec.pad_id("explanation") == 3
        assert spec.pad_id("response") == 3
        assert spec.pad_id("elapsed") == 301
        assert spec.pad_id("lag_s") == 301
        assert spec.pad_id("lag_m") == 1441
        assert spec.pad_id("lag_d") == 366

    def test_sizes_match_published_vocabulary_plus_pad(self):
        spec = VocabSpec(n_questions=201)
        assert spec.n_elapsed == 301 + 1
        assert spec.n_lag_s == 301 + 1
        assert spec.n_lag_m == 1441 + 1
        assert spec.n_lag_d == 366 + 1
        assert spec.n_response == 3 + 1
        assert spec.n_explanation == 3 + 1


def small_dataset() -> EncodedDataset:
    histories = [
        make_history(3, [(0, 10, 1, None, None), (65_000, 11, 0, 12_000, True)]),
        make_history(8, [(0, 12, 1, None, False), (1_000, 10, 1, 500, True),
                         (90_061_000, 11, 0, 3_000, None)]),
    ]
    return encode_histories(histories, QMETA, max_seq=8, stride=8)


class TestDatasetContainer:
    def test_round_trip(self, tmp_path):
        dataset = small_dataset()
        path = tmp_path / "d.bin"
        save_dataset(dataset, path)
        loaded = load_dataset(path)
        assert loaded.vocab == dataset.vocab
        assert loaded.max_seq == dataset.max_seq
        for name in ("question", "part", "explanation", "response", "elapsed",
                     "lag_s", "lag_m", "lag_d", "target", "valid",
                     "user_id", "start_index"):
            np.testing.assert_array_equal(
                getattr(loaded.windows, name), getattr(dataset.windows, name))

    def test_write_is_deterministic(self, tmp_path):
        dataset = small_dataset()
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        save_dataset(dataset, a)
        save_dataset(dataset, b)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOTADATASET")
        with pytest.raises(ValueError, match="magic"):
            load_dataset(path)

    def test_golden_layout(self, tmp_path):
        """Byte layout is frozen: magic, manifest length, manifest, arrays."""
        import json
        import struct

        dataset = small_dataset()
        path = tmp_path / "d.bin"
        save_dataset(dataset, path)
        blob = path.read_bytes()
        assert blob[:8] == b"TKDS0001"
        (mlen,) = struct.unpack("<I", blob[8:12])
        manifest = json.loads(blob[12:12 + mlen])
        assert manifest["format"] == "tempokt-dataset"
        assert manifest["max_seq"] == 8
        assert manifest["n_windows"] == 2
        assert [a["name"] for a in manifest["arrays"]] == [
            "question", "part", "explanation", "response", "elapsed",
            "lag_s", "lag_m", "lag_d", "target", "valid", "user_id", "start_index"]
        offset = 12 + mlen
        first = np.frombuffer(blob, dtype="<i4", count=16, offset=offset).reshape(2, 8)
        np.testing.assert_array_equal(first, dataset.windows.question)


class TestAblation:
    def test_lag_streams_become_constant_on_valid_positions(self):
        dataset = small_dataset()
        ablated = ablate_lag_streams(dataset.windows)
        for name in ("lag_s", "lag_m", "lag_d"):
            arr = getattr(ablated, name)
            assert (arr[dataset.windows.valid] == 0).all()
            pad = dataset.vocab.pad_id(name)
            assert (arr[~dataset.windows.valid] == pad).all()
        # original untouched
        assert dataset.windows.lag_s[dataset.windows.valid].max() > 0
