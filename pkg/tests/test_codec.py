import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vdrl.codec import (
    ChannelTracker,
    CodecError,
    DenseCodes,
    EventSequence,
    channel_event_indices,
    crop,
    deinterleave,
    infer_channels_offsets,
    interleave,
    interleaved_decode,
    interleaved_encode,
    lengths_to_offsets,
    read_dense_csv,
    read_events,
    rle_decode,
    rle_encode,
    write_dense_csv,
    write_events,
)

# Worked two-channel example; channel indices are 0-based here.
EXAMPLE_RUNS = [(2, 3), (0, 2), (1, 6), (3, 2), (4, 3)]
EXAMPLE_CH0 = [2, 2, 2, 3, 3, 4, 4, 4]
EXAMPLE_CH1 = [0, 0, 1, 1, 1, 1, 1, 1]


def naive_runs(seq, max_run_length):
    runs = []
    for x in seq:
        if runs and runs[-1][0] == x and runs[-1][1] < max_run_length:
            runs[-1][1] += 1
        else:
            runs.append([x, 1])
    return [tuple(r) for r in runs]


grids = st.integers(1, 4).flatmap(
    lambda c: st.integers(1, 7).flatmap(
        lambda k: st.lists(
            st.lists(st.integers(-k, k), min_size=c, max_size=c), min_size=1, max_size=128
        ).map(lambda rows: DenseCodes(np.array(rows), 250.0, k))
    )
)


class TestRleEncode:
    def test_worked_example(self):
        values, lengths = rle_encode([2, 2, 2, 3, 3, 4, 4, 4], 4, 256)
        assert values.tolist() == [2, 3, 4, 0]
        assert lengths.tolist() == [3, 2, 3, 0]

    def test_single_run(self):
        values, lengths = rle_encode([5] * 8, 2, 256)
        assert values.tolist() == [5, 0]
        assert lengths.tolist() == [8, 0]

    def test_split_long_runs(self):
        values, lengths = rle_encode([1] * 7, 3, 3)
        assert values.tolist() == [1, 1, 1]
        assert lengths.tolist() == [3, 3, 1]

    def test_crop_reports_truncation(self):
        values, lengths, truncated = rle_encode([0, 1, 2, 3], 2, 256, return_truncated=True)
        assert truncated
        assert values.tolist() == [0, 1]
        assert not rle_encode([0, 1], 2, 256, return_truncated=True)[2]

    @pytest.mark.parametrize("bad", [[], np.zeros((2, 2))])
    def test_rejects_bad_input(self, bad):
        with pytest.raises(CodecError):
            rle_encode(bad, 4)

    def test_rejects_nonpositive_output_length(self):
        with pytest.raises(CodecError):
            rle_encode([1, 2], 0)

    @given(st.lists(st.integers(-7, 7), min_size=1, max_size=64), st.sampled_from([1, 2, 3, 256]))
    def test_matches_naive_runs(self, seq, max_run_length):
        runs = naive_runs(seq, max_run_length)
        values, lengths = rle_encode(seq, len(runs), max_run_length)
        assert list(zip(values.tolist(), lengths.tolist())) == runs


class TestRleDecode:
    def test_worked_example(self):
        assert rle_decode([2, 3, 4], [3, 2, 3], 8).tolist() == EXAMPLE_CH0

    def test_single_run(self):
        assert rle_decode([5], [8], 8).tolist() == [5] * 8

    def test_underflow_repeats_last_value(self):
        assert rle_decode([1, 2, 0], [1, 2, 0], 5).tolist() == [1, 2, 2, 2, 2]

    def test_crops(self):
        assert rle_decode([1, 2], [3, 3], 4).tolist() == [1, 1, 1, 2]

    def test_padding_must_be_suffix(self):
        with pytest.raises(CodecError):
            rle_decode([1, 0, 2], [1, 0, 2], 3)

    def test_all_padding(self):
        with pytest.raises(CodecError):
            rle_decode([0, 0], [0, 0], 3)

    @settings(max_examples=1000)
    @given(st.integers(1, 7).flatmap(lambda k: st.lists(st.integers(-k, k), min_size=1, max_size=64)))
    def test_round_trip(self, seq):
        values, lengths = rle_encode(seq, len(seq))
        assert rle_decode(values, lengths, len(seq)).tolist() == seq


def test_lengths_to_offsets():
    assert lengths_to_offsets([3, 2, 3]).tolist() == [0, 3, 5]
    assert lengths_to_offsets([]).tolist() == []
    assert lengths_to_offsets([1, 1, 1, 1]).tolist() == [0, 1, 2, 3]


class TestInferChannels:
    def test_worked_example(self):
        channels, offsets = infer_channels_offsets([3, 2, 6, 2, 3], 2)
        assert channels.tolist() == [0, 1, 1, 0, 0]
        assert offsets.tolist() == [0, 0, 2, 3, 5]

    @given(st.lists(st.integers(1, 20), max_size=30))
    def test_single_channel(self, lengths):
        channels, offsets = infer_channels_offsets(lengths, 1)
        assert channels.tolist() == [0] * len(lengths)
        assert offsets.tolist() == lengths_to_offsets(lengths).tolist()

    @settings(max_examples=1000)
    @given(grids, st.sampled_from([3, 256]))
    def test_agrees_with_interleave_bookkeeping(self, dense, max_run_length):
        events = interleaved_encode(dense, None, max_run_length)
        channels, offsets = infer_channels_offsets(events.lengths, dense.num_channels)
        assert channels.tolist() == events.channels.tolist()
        assert offsets.tolist() == events.offsets.tolist()
        # The same holds for every prefix.
        n = len(events) // 2
        channels, offsets = infer_channels_offsets(events.lengths[:n], dense.num_channels)
        assert channels.tolist() == events.channels[:n].tolist()
        assert offsets.tolist() == events.offsets[:n].tolist()

    @given(grids)
    def test_ordering(self, dense):
        events = interleaved_encode(dense)
        assert (np.diff(events.offsets) >= 0).all()
        for c in range(dense.num_channels):
            assert (np.diff(events.offsets[events.channels == c]) > 0).all()

    def test_tracker_matches_batch_inference(self):
        rng = np.random.default_rng(0)
        lengths = rng.integers(1, 9, size=50)
        tracker = ChannelTracker(3)
        pushed = [tracker.push(n) for n in lengths]
        channels, offsets = infer_channels_offsets(lengths, 3)
        assert [c for c, _ in pushed] == channels.tolist()
        assert [o for _, o in pushed] == offsets.tolist()


def test_channel_event_indices():
    assert channel_event_indices([0, 1, 1, 0, 0], 2).tolist() == [0, 0, 1, 1, 2]
    assert channel_event_indices([0] * 5, 1).tolist() == [0, 1, 2, 3, 4]
    assert channel_event_indices([1, 0], 2).tolist() == [0, 0]


class TestInterleave:
    def test_worked_example(self):
        values = np.array([[2, 0], [3, 1], [4, 0]])
        lengths = np.array([[3, 2], [2, 6], [3, 0]])
        events = interleave(values, lengths, 5, include_channels=True, include_offsets=True)
        assert events.events == EXAMPLE_RUNS
        assert events.channels.tolist() == [0, 1, 1, 0, 0]
        assert events.offsets.tolist() == [0, 0, 2, 3, 5]
        assert not events.truncated

    def test_single_channel_identity(self):
        events = interleave([1, 2, 3], [4, 1, 2], 3)
        assert events.events == [(1, 4), (2, 1), (3, 2)]

    def test_mismatched_durations(self):
        with pytest.raises(CodecError):
            interleave(np.array([[1, 1]]), np.array([[3, 4]]), 2)

    def test_crop(self):
        values = np.array([[2, 0], [3, 1], [4, 0]])
        lengths = np.array([[3, 2], [2, 6], [3, 0]])
        events = interleave(values, lengths, 3)
        assert events.events == EXAMPLE_RUNS[:3]
        assert events.truncated


class TestDeinterleave:
    def test_worked_example(self):
        events = EventSequence.from_runs(EXAMPLE_RUNS, 2)
        values, lengths = deinterleave(events, 3)
        assert values[:, 0].tolist() == [2, 3, 4]
        assert lengths[:, 0].tolist() == [3, 2, 3]
        assert values[:2, 1].tolist() == [0, 1]
        assert lengths[:, 1].tolist() == [2, 6, 0]

    def test_single_event(self):
        values, lengths = deinterleave(EventSequence.from_runs([(3, 5)], 1), 1)
        assert values.tolist() == [[3]] and lengths.tolist() == [[5]]

    @given(grids)
    def test_recovers_channel_runs(self, dense):
        events = interleaved_encode(dense)
        budget = dense.num_steps
        values, lengths = deinterleave(events, budget)
        for c in range(dense.num_channels):
            v, n = rle_encode(dense.levels[:, c], budget)
            assert values[:, c].tolist() == v.tolist()
            assert lengths[:, c].tolist() == n.tolist()


class TestInterleavedCodec:
    def test_worked_example(self):
        dense = DenseCodes(np.array([EXAMPLE_CH0, EXAMPLE_CH1]).T)
        events = interleaved_encode(dense, 5)
        assert events.events == EXAMPLE_RUNS
        decoded = interleaved_decode(EventSequence.from_runs(EXAMPLE_RUNS, 2))
        assert decoded.levels[:, 0].tolist() == EXAMPLE_CH0
        assert decoded.levels[:, 1].tolist() == EXAMPLE_CH1

    def test_all_zero_grid(self):
        events = interleaved_encode(DenseCodes(np.zeros((10, 3), dtype=int)))
        assert events.events == [(0, 10)] * 3
        events = interleaved_encode(DenseCodes(np.zeros((10, 2), dtype=int)), max_run_length=4)
        assert events.lengths.tolist() == [4, 4, 4, 4, 2, 2]

    @settings(max_examples=1000, deadline=None)
    @given(grids, st.sampled_from([3, 256]))
    def test_round_trip(self, dense, max_run_length):
        events = interleaved_encode(dense, None, max_run_length)
        assert (events.lengths <= max_run_length).all()
        assert np.array_equal(interleaved_decode(events).levels, dense.levels)

    @given(grids)
    def test_event_count(self, dense):
        events = interleaved_encode(dense, None, 256)
        changes = (np.diff(dense.levels, axis=0) != 0).sum()
        assert len(events) == changes + dense.num_channels

    @given(grids)
    def test_resplitting_is_idempotent(self, dense):
        events = interleaved_encode(dense, None, 3)
        again = interleaved_encode(interleaved_decode(events), None, 3)
        assert events.events == again.events

    def test_prefix_decodes_to_shortest_channel(self):
        events = crop(EventSequence.from_runs(EXAMPLE_RUNS, 2), 4)
        decoded = interleaved_decode(events)
        assert decoded.num_steps == 5
        assert decoded.levels[:, 0].tolist() == EXAMPLE_CH0[:5]
        assert decoded.levels[:, 1].tolist() == EXAMPLE_CH1[:5]

    def test_too_short_to_decode(self):
        with pytest.raises(CodecError):
            interleaved_decode(EventSequence.from_runs([(1, 3)], 2))


class TestFiles:
    def test_event_file_round_trip(self, tmp_path):
        events = EventSequence.from_runs(EXAMPLE_RUNS, 2, k=7, base_rate_hz=500.0)
        write_events(tmp_path / "x.vdrl", events)
        raw = (tmp_path / "x.vdrl").read_bytes()
        assert raw[:4] == b"VDRL" and raw[4] == 1
        assert len(raw) == 18 + 3 * 5
        back = read_events(tmp_path / "x.vdrl")
        assert back.events == EXAMPLE_RUNS
        assert (back.num_channels, back.k, back.max_run_length, back.base_rate_hz) == (2, 7, 256, 500.0)

    def test_event_file_layout(self, tmp_path):
        write_events(tmp_path / "x.vdrl", EventSequence.from_runs([(-3, 300)], 1, k=7, max_run_length=512))
        raw = (tmp_path / "x.vdrl").read_bytes()
        assert raw[4:10] == bytes([1, 1, 7, 0]) + (512).to_bytes(2, "little")
        assert raw[10:14] == (250).to_bytes(4, "little")
        assert raw[14:18] == (1).to_bytes(4, "little")
        assert raw[18:] == bytes([0xFD]) + (300).to_bytes(2, "little")

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + b"\x02" + b[5:],
        lambda b: b[:-1],
    ])
    def test_rejects_corrupt_files(self, tmp_path, mutate):
        write_events(tmp_path / "x.vdrl", EventSequence.from_runs(EXAMPLE_RUNS, 2))
        (tmp_path / "y.vdrl").write_bytes(mutate((tmp_path / "x.vdrl").read_bytes()))
        with pytest.raises(CodecError):
            read_events(tmp_path / "y.vdrl")

    def test_dense_csv_round_trip(self, tmp_path):
        dense = DenseCodes(np.array([EXAMPLE_CH0, EXAMPLE_CH1]).T)
        write_dense_csv(tmp_path / "g.csv", dense)
        assert (tmp_path / "g.csv").read_text().splitlines()[:2] == ["2,0", "2,0"]
        assert np.array_equal(read_dense_csv(tmp_path / "g.csv").levels, dense.levels)

    def test_validate_catches_stale_cache(self):
        events = EventSequence.from_runs(EXAMPLE_RUNS, 2).with_structure()
        events.validate()
        events.channels = np.zeros(5, dtype=int)
        with pytest.raises(CodecError):
            events.validate()
