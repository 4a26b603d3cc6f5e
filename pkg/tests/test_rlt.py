import dataclasses
import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vdrl.codec import DenseCodes, EventSequence, infer_channels_offsets, interleaved_decode, interleaved_encode
from vdrl.config import RLTConfig
from vdrl.rlt import (
    EventCorpus,
    EventVocabulary,
    RLTError,
    ablation_run,
    assemble_inputs,
    collate,
    entropy_bound,
    event_features,
    evaluate,
    load_rlt,
    make_model,
    masked_nll,
    nucleus_truncate,
    sample,
    save_rlt,
    teacher_distributions,
    toy_language,
)

SMALL = RLTConfig(width=32, layers=2, heads=2, ff_mult=2, max_events=128, offset_buckets=64)
WORKED_RUNS = [(2, 3), (0, 2), (1, 6), (3, 2), (4, 3)]


def random_events(seed, n_steps=40, channels=2, k=7):
    rng = np.random.default_rng(seed)
    levels = np.cumsum(rng.random((n_steps, channels)) < 0.3, axis=0) % (2 * k + 1) - k
    return interleaved_encode(DenseCodes(levels, 250.0, k))


@pytest.fixture(scope="module")
def small_model():
    return make_model(SMALL, EventVocabulary(2), seed=0)


# -- nucleus truncation ---------------------------------------------------------------------------

def brute_force_nucleus(probs, p):
    """Minimal-cardinality subset reaching mass p, with maximal mass among those."""
    n = len(probs)
    for size in range(1, n + 1):
        best = None
        for subset in itertools.combinations(range(n), size):
            mass = sum(probs[i] for i in subset)
            if mass >= p - 1e-12 and (best is None or mass > best[0] + 1e-15):
                best = (mass, subset)
        if best is not None:
            return size, best[0]
    raise AssertionError("unreachable")


def test_nucleus_example():
    out = nucleus_truncate([0.5, 0.3, 0.15, 0.05], 0.8)
    np.testing.assert_allclose(out, [0.625, 0.375, 0, 0], atol=1e-15)


def test_nucleus_identity_at_one():
    probs = np.array([0.1, 0.2, 0.3, 0.4])
    assert np.array_equal(nucleus_truncate(probs, 1.0), probs)


def test_nucleus_tie_break_by_index():
    assert nucleus_truncate([0.25, 0.25, 0.25, 0.25], 0.5).tolist() == [0.5, 0.5, 0, 0]


@pytest.mark.parametrize("bad", [[0, 0, 0], [0.5, -0.1, 0.6]])
def test_nucleus_rejects(bad):
    with pytest.raises(ValueError):
        nucleus_truncate(bad, 0.8)


prob_vectors = st.integers(1, 8).flatmap(
    lambda n: st.lists(st.integers(0, 20), min_size=n, max_size=n).filter(lambda xs: sum(xs) > 0)
).map(lambda xs: np.array(xs, dtype=np.float64) / sum(xs))


@settings(max_examples=500, deadline=None)
@given(prob_vectors, st.floats(0.01, 1.0))
def test_nucleus_matches_brute_force(probs, p):
    out = nucleus_truncate(probs, p)
    kept = out > 0
    size, mass = brute_force_nucleus(probs, p)
    assert kept.sum() == size
    assert probs[kept].sum() == pytest.approx(mass, abs=1e-12)
    assert abs(out.sum() - 1) <= 1e-12
    np.testing.assert_allclose(out[kept], probs[kept] / probs[kept].sum(), rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(prob_vectors, st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_nucleus_support_monotone(probs, p1, p2):
    lo, hi = sorted((p1, p2))
    assert (nucleus_truncate(probs, lo) > 0).sum() <= (nucleus_truncate(probs, hi) > 0).sum()


# -- inputs ---------------------------------------------------------------------------------------

def test_worked_example_features():
    events = EventSequence.from_runs(WORKED_RUNS, 2)
    feats = event_features(events, EventVocabulary(2), SMALL)
    assert feats["channel_out"].tolist() == [0, 1, 1, 0, 0]
    assert feats["offset_out"].tolist() == [0, 0, 2, 3, 5]
    assert feats["channel_in"].tolist() == [-1, 0, 1, 1, 0]
    assert feats["offset_in"].tolist() == [-1, 0, 0, 2, 3]
    assert feats["value"].tolist() == [9, 7, 8, 10, 11]
    assert feats["length"].tolist() == [2, 1, 5, 1, 2]


def test_offsets_bucketed_and_clamped():
    cfg = dataclasses.replace(SMALL, offset_buckets=4, offset_bucket_width=2)
    events = EventSequence.from_runs([(0, 3)] * 5, 1)
    assert event_features(events, EventVocabulary(1), cfg)["offset_out"].tolist() == [0, 1, 3, 3, 3]


def test_out_of_vocabulary_rejected():
    events = EventSequence.from_runs([(0, 300)], 1, max_run_length=512)
    with pytest.raises(RLTError):
        event_features(events, EventVocabulary(1), SMALL)
    with pytest.raises(RLTError):
        event_features(EventSequence.from_runs([(0, 3)], 1, k=9), EventVocabulary(1), SMALL)


def test_zero_tables_give_zero_inputs():
    model = make_model(SMALL, EventVocabulary(2), seed=1)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if not name.startswith(("blocks", "norm", "value_head", "length_head")):
                param.zero_()
    x = assemble_inputs(model, EventSequence.from_runs(WORKED_RUNS, 2), condition=1)
    assert not x.any()


def test_flag_isolation(small_model):
    events = EventSequence.from_runs(WORKED_RUNS, 2)
    without = make_model(dataclasses.replace(SMALL, embed_offset_out=False), EventVocabulary(2), seed=0)
    without.load_state_dict(small_model.state_dict())
    with torch.no_grad():
        diff = assemble_inputs(small_model, events, 0) - assemble_inputs(without, events, 0)
        expected = small_model.offset_out(torch.tensor([0, 0, 2, 3, 5]))
    torch.testing.assert_close(diff, expected, rtol=0, atol=1e-6)


def test_catch_all_condition(small_model):
    events = EventSequence.from_runs(WORKED_RUNS, 2)
    with torch.no_grad():
        diff = assemble_inputs(small_model, events, None) - assemble_inputs(small_model, events, 0)
        expected = small_model.condition.weight[4] - small_model.condition.weight[0]
    torch.testing.assert_close(diff, expected.expand_as(diff), rtol=0, atol=1e-6)


# -- model ----------------------------------------------------------------------------------------

def test_untrained_nll_near_uniform():
    vocab = EventVocabulary(4)
    model = make_model(RLTConfig(), vocab, seed=0)
    corpus = EventCorpus.build([random_events(s, 100, 4) for s in range(8)], [0, 1, 2, 3] * 2, vocab, RLTConfig())
    nll = evaluate(model, corpus)
    assert abs(nll["value_nll"] - math.log(15)) < 0.5
    assert abs(nll["length_nll"] - math.log(256)) < 0.5


def test_head_sizes(small_model):
    batch, _ = collate([event_features(random_events(0), small_model.vocab, SMALL)])
    v, l = small_model(batch, torch.tensor([0]))
    assert v.shape[-1] == 15 and l.shape[-1] == 256


def test_causality(small_model):
    a = random_events(3, 60)
    n = len(a)
    j = n // 2
    values = a.values.copy()
    values[j:] = (values[j:] + 3 + 7) % 15 - 7
    b = EventSequence(values, a.lengths, a.num_channels, a.k)
    with torch.no_grad():
        va, la = small_model(*_one(small_model, a))
        vb, lb = small_model(*_one(small_model, b))
    torch.testing.assert_close(va[0, :j + 1], vb[0, :j + 1], rtol=0, atol=0)
    torch.testing.assert_close(la[0, :j], lb[0, :j], rtol=0, atol=0)
    assert not torch.allclose(va[0, j + 1:], vb[0, j + 1:])


def _one(model, events, cond=0):
    batch, _ = collate([event_features(events, model.vocab, model.cfg)])
    return batch, torch.tensor([cond])


def test_masked_positions_do_not_contribute(small_model):
    windows = [event_features(random_events(s, 30 + 20 * s), small_model.vocab, SMALL) for s in range(2)]
    batch, mask = collate(windows)
    grads = []
    for fill in (0, 1):
        b = {k: torch.where(mask, v, torch.full_like(v, fill)) for k, v in batch.items()}
        small_model.zero_grad()
        v, l = masked_nll(small_model, b, mask, torch.tensor([0, 1]))
        (v + l).backward()
        grads.append([p.grad.clone() for p in small_model.parameters() if p.grad is not None])
    for g0, g1 in zip(*grads):
        torch.testing.assert_close(g0, g1, rtol=0, atol=0)


# -- sampling -------------------------------------------------------------------------------------

def test_sample_teacher_parity(small_model):
    trace = sample(small_model, 2, 40, p=0.8, seed=5, trace=True)
    pv, pl = teacher_distributions(small_model, trace.events, 2)
    np.testing.assert_allclose(trace.value_probs, pv, atol=1e-6)
    np.testing.assert_allclose(trace.length_probs, pl, atol=1e-6)


def test_sampler_tracks_channels_offsets(small_model):
    trace = sample(small_model, None, 50, seed=1, trace=True)
    channels, offsets = infer_channels_offsets(trace.events.lengths, 2)
    assert trace.channels.tolist() == channels.tolist()
    assert trace.offsets.tolist() == offsets.tolist()


def test_one_hot_stub_emits_argmax():
    model = make_model(SMALL, EventVocabulary(2), seed=0)
    with torch.no_grad():
        for head, idx in ((model.value_head, 10), (model.length_head[-1], 4)):
            head.weight.zero_()
            head.bias.fill_(-50.0)
            head.bias[idx] = 50.0
    trace = sample(model, 0, 12, p=0.8, seed=0, trace=True)
    assert trace.events.values.tolist() == [3] * 12
    assert trace.events.lengths.tolist() == [5] * 12
    channels, offsets = infer_channels_offsets(trace.events.lengths, 2)
    assert trace.channels.tolist() == channels.tolist() == [0, 1] * 6
    assert trace.offsets.tolist() == offsets.tolist()


def test_samples_decode(small_model):
    for seed in range(100):
        events = sample(small_model, seed % 5 if seed % 5 < 4 else None, 20, seed=seed)
        events.validate()
        dense = interleaved_decode(events)
        assert dense.num_channels == 2 and dense.num_steps >= 1


def test_prompt_is_kept(small_model):
    prompt = EventSequence.from_runs(WORKED_RUNS, 2)
    events = sample(small_model, 0, 12, seed=0, prompt=prompt)
    assert events.values[:5].tolist() == prompt.values.tolist()
    assert events.lengths[:5].tolist() == prompt.lengths.tolist()


def test_sample_deterministic(small_model):
    a = sample(small_model, 1, 30, seed=9)
    b = sample(small_model, 1, 30, seed=9)
    assert a == b


# -- bound, ablation, checkpoints -----------------------------------------------------------------

def test_uniform_model_bound_matches_raw_rate():
    vocab = EventVocabulary(1, 7, 256, 4)
    model = make_model(SMALL, vocab, seed=0)
    with torch.no_grad():
        model.value_head.weight.zero_()
        model.length_head[-1].weight.zero_()
    # 75 events in one second: runs of 4 steps at a 300 Hz code rate.
    levels = np.tile([[1], [-1]], (75 // 2 + 1, 1))[:75].repeat(4, axis=0)
    events = interleaved_encode(DenseCodes(levels, 300.0, 7))
    assert len(events) == 75
    out = entropy_bound(model, EventCorpus.build([events], [0], vocab, SMALL))
    assert out["events_per_s"] == pytest.approx(75.0)
    assert out["raw_bps"] == pytest.approx(75 * (math.log2(15) + 8), rel=1e-12)
    assert out["bound_bps"] == pytest.approx(out["raw_bps"], rel=1e-6)
    assert out["raw_bps"] == pytest.approx(893, rel=0.01)


def test_trained_bound_below_raw_rate():
    vocab = EventVocabulary(2)
    corpus = EventCorpus.build([toy_language(8)], [0], vocab, SMALL)
    model = make_model(dataclasses.replace(SMALL, lr=3e-3, catch_all_prob=0.0), vocab, seed=0)
    from vdrl.rlt import train_rlt
    train_rlt(model, corpus, steps=60, seed=0)
    out = entropy_bound(model, corpus)
    assert out["nll_nats_per_event"] < math.log(15 * 256)
    assert out["bound_bps"] < out["raw_bps"]


def test_ablation_deterministic(tmp_path):
    vocab = EventVocabulary(2)
    train = EventCorpus.build([random_events(s) for s in range(6)], [0, 1, 2, 3, 0, 1], vocab, SMALL)
    hold = EventCorpus.build([random_events(s) for s in range(6, 8)], [2, 3], vocab, SMALL)
    variants = {"reference": SMALL, "bare": dataclasses.replace(SMALL, embed_offset_out=False)}
    runs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        runs.append(ablation_run(variants, vocab, train, hold, steps=6, seed=2, eval_every=3,
                                 out_dir=tmp_path / name))
    a, b = runs
    assert a == b
    for name in variants:
        assert (tmp_path / "a" / f"ablation_{name}.csv").read_bytes() == \
            (tmp_path / "b" / f"ablation_{name}.csv").read_bytes()
    assert [r["step"] for r in a["reference"]] == [3, 6]


def test_checkpoint_round_trip(tmp_path, small_model):
    save_rlt(tmp_path / "r.ckpt", small_model, {"steps": 0})
    loaded, meta = load_rlt(tmp_path / "r.ckpt")
    assert meta["steps"] == 0 and loaded.cfg == small_model.cfg and loaded.vocab == small_model.vocab
    events = random_events(4)
    with torch.no_grad():
        for x, y in zip(small_model(*_one(small_model, events)), loaded(*_one(loaded, events))):
            torch.testing.assert_close(x, y, rtol=0, atol=0)
