"""Toy run-length transformer over interleaved event sequences.

Position 0 of every window is a start slot. Position n >= 1 carries event
n - 1 (value, length, channel, offset) plus the channel and offset of event
n, which are known in advance from the lengths alone. The hidden state at
position n predicts the value of event n; the length head then sees that
hidden state concatenated with the embedding of the true (training) or
freshly sampled (generation) value.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import ChannelTracker, EventSequence, channel_event_indices, interleaved_encode, DenseCodes
from .config import RLTConfig

FEATURES = ("value", "length", "channel_in", "offset_in", "channel_out", "offset_out",
            "global_position", "channel_position")

REFERENCE_FLAGS = dict(embed_channel_in=True, embed_offset_in=True, embed_channel_out=True,
                       embed_offset_out=True, embed_global_position=False, embed_channel_position=False)


class RLTError(ValueError):
    pass


@dataclass(frozen=True)
class EventVocabulary:
    num_channels: int
    k: int = 7
    max_run_length: int = 256
    num_classes: int = 4

    @property
    def num_values(self) -> int:
        return 2 * self.k + 1

    @property
    def catch_all(self) -> int:
        return self.num_classes


def offset_bucket(offsets: np.ndarray, cfg: RLTConfig) -> np.ndarray:
    return np.minimum(np.asarray(offsets) // cfg.offset_bucket_width, cfg.offset_buckets - 1)


def event_features(events: EventSequence, vocab: EventVocabulary, cfg: RLTConfig) -> dict[str, np.ndarray]:
    """Embedding indices for every input position of one window.

    A window holds the first ``cfg.max_events`` events, so offsets are
    relative to the window start. Returns arrays of length N (one per event
    to predict); ``*_in`` entries at position 0 are unused (-1).
    """
    if events.k != vocab.k or events.num_channels != vocab.num_channels:
        raise RLTError(f"events have k={events.k}, C={events.num_channels}; "
                       f"vocabulary has k={vocab.k}, C={vocab.num_channels}")
    n = min(len(events), cfg.max_events)
    if n == 0:
        raise RLTError("empty event window")
    ev = events.with_structure()
    values = ev.values[:n].astype(np.int64)
    lengths = ev.lengths[:n].astype(np.int64)
    if np.any(np.abs(values) > vocab.k):
        raise RLTError(f"value out of range [-{vocab.k}, {vocab.k}]")
    if np.any((lengths < 1) | (lengths > vocab.max_run_length)):
        raise RLTError(f"length out of range [1, {vocab.max_run_length}]")
    channels, offsets = ev.channels[:n].astype(np.int64), ev.offsets[:n].astype(np.int64)

    def shift(a):
        return np.concatenate([[-1], a[:-1]])

    return {
        "value": values + vocab.k,
        "length": lengths - 1,
        "value_in": shift(values + vocab.k),
        "length_in": shift(lengths - 1),
        "channel_in": shift(channels),
        "offset_in": shift(offset_bucket(offsets, cfg)),
        "channel_out": channels,
        "offset_out": offset_bucket(offsets, cfg),
        "global_position": np.arange(n),
        "channel_position": np.minimum(channel_event_indices(channels, vocab.num_channels), cfg.max_events - 1),
        "channels": channels,
        "offsets": offsets,
    }


class RelativeSelfAttention(nn.Module):
    """Causal multi-head attention with a learned bias per head and clipped distance."""

    def __init__(self, width: int, heads: int, max_distance: int):
        super().__init__()
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.max_distance = max_distance
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.bias = nn.Parameter(torch.zeros(heads, max_distance))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        pos = torch.arange(n)
        dist = pos[:, None] - pos[None, :]
        bias = self.bias[:, dist.clamp(0, self.max_distance - 1)]
        bias = bias.masked_fill(dist < 0, float("-inf"))
        att = F.scaled_dot_product_attention(q, k, v, attn_mask=bias[None])
        return self.out(att.transpose(1, 2).reshape(b, n, w))


class Block(nn.Module):
    def __init__(self, width: int, heads: int, ff_mult: int, max_distance: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = RelativeSelfAttention(width, heads, max_distance)
        self.norm2 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff_mult * width), nn.GELU(), nn.Linear(ff_mult * width, width))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class RLTModel(nn.Module):
    def __init__(self, cfg: RLTConfig, vocab: EventVocabulary):
        super().__init__()
        self.cfg, self.vocab = cfg, vocab
        w = cfg.width
        self.value_embedding = nn.Embedding(vocab.num_values, w)
        self.length_embedding = nn.Embedding(vocab.max_run_length, w)
        self.channel_in = nn.Embedding(vocab.num_channels, w)
        self.channel_out = nn.Embedding(vocab.num_channels, w)
        self.offset_in = nn.Embedding(cfg.offset_buckets, w)
        self.offset_out = nn.Embedding(cfg.offset_buckets, w)
        self.condition = nn.Embedding(vocab.num_classes + 1, w)
        self.start = nn.Parameter(torch.zeros(w))
        self.global_position = nn.Embedding(cfg.max_events, w)
        self.channel_position = nn.Embedding(cfg.max_events, w)
        for emb in (self.value_embedding, self.length_embedding, self.channel_in, self.channel_out,
                    self.offset_in, self.offset_out, self.condition, self.global_position,
                    self.channel_position):
            nn.init.normal_(emb.weight, std=0.02)
        nn.init.normal_(self.start, std=0.02)

        self.blocks = nn.ModuleList(Block(w, cfg.heads, cfg.ff_mult, cfg.relative_distance)
                                    for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(w)
        self.value_head = nn.Linear(w, vocab.num_values)
        self.length_head = nn.Sequential(nn.Linear(2 * w, w), nn.GELU(), nn.Linear(w, vocab.max_run_length))
        for head in (self.value_head, self.length_head[-1]):
            nn.init.normal_(head.weight, std=1e-3)
            nn.init.zeros_(head.bias)

    def flags(self) -> dict[str, bool]:
        c = self.cfg
        return {"channel_in": c.embed_channel_in, "offset_in": c.embed_offset_in,
                "channel_out": c.embed_channel_out, "offset_out": c.embed_offset_out,
                "global_position": c.embed_global_position, "channel_position": c.embed_channel_position}

    def embed(self, feats: dict[str, torch.Tensor], conditions: torch.Tensor) -> torch.Tensor:
        """Additive input vectors (B, N, W) from batched index tensors (B, N)."""
        first = torch.zeros_like(feats["value_in"], dtype=torch.bool)
        first[:, 0] = True

        def lookup(table, idx, skip_first=False):
            out = table(idx.clamp(min=0))
            return out.masked_fill(first[..., None], 0.0) if skip_first else out

        x = lookup(self.value_embedding, feats["value_in"], True) + lookup(self.length_embedding, feats["length_in"], True)
        x = x + first[..., None] * self.start
        flags = self.flags()
        if flags["channel_in"]:
            x = x + lookup(self.channel_in, feats["channel_in"], True)
        if flags["offset_in"]:
            x = x + lookup(self.offset_in, feats["offset_in"], True)
        if flags["channel_out"]:
            x = x + lookup(self.channel_out, feats["channel_out"])
        if flags["offset_out"]:
            x = x + lookup(self.offset_out, feats["offset_out"])
        if flags["global_position"]:
            x = x + lookup(self.global_position, feats["global_position"])
        if flags["channel_position"]:
            x = x + lookup(self.channel_position, feats["channel_position"])
        return x + self.condition(conditions)[:, None, :]

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def length_logits(self, h: torch.Tensor, value_index: torch.Tensor) -> torch.Tensor:
        return self.length_head(torch.cat([h, self.value_embedding(value_index)], dim=-1))

    def forward(self, feats: dict[str, torch.Tensor], conditions: torch.Tensor):
        """Value logits (B, N, 2k+1) and teacher-forced length logits (B, N, L)."""
        h = self.hidden(self.embed(feats, conditions))
        return self.value_head(h), self.length_logits(h, feats["value"].clamp(min=0))


def collate(windows: list[dict[str, np.ndarray]]) -> tuple[dict[str, torch.Tensor], torch.Tensor]:
    """Pad feature dicts to a batch; padding uses -1 and the mask marks real positions."""
    n = max(len(w["value"]) for w in windows)
    keys = [k for k in windows[0] if k not in ("channels", "offsets")]
    batch = {}
    for key in keys:
        arr = np.full((len(windows), n), -1, dtype=np.int64)
        for i, w in enumerate(windows):
            arr[i, :len(w[key])] = w[key]
        batch[key] = torch.from_numpy(arr)
    mask = torch.zeros(len(windows), n, dtype=torch.bool)
    for i, w in enumerate(windows):
        mask[i, :len(w["value"])] = True
    return batch, mask


def assemble_inputs(model: RLTModel, events: EventSequence, condition: int | None = None) -> torch.Tensor:
    """Input vectors (N, W) for one window; ``condition=None`` selects the catch-all."""
    feats = event_features(events, model.vocab, model.cfg)
    batch, _ = collate([feats])
    cond = model.vocab.catch_all if condition is None else condition
    return model.embed(batch, torch.tensor([cond]))[0]


def masked_nll(model: RLTModel, batch: dict[str, torch.Tensor], mask: torch.Tensor,
               conditions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    value_logits, length_logits = model(batch, conditions)
    v = F.cross_entropy(value_logits[mask], batch["value"][mask])
    l = F.cross_entropy(length_logits[mask], batch["length"][mask])
    return v, l


def train_step(model: RLTModel, optimizer: torch.optim.Optimizer | None, windows: list[dict],
               conditions, generator: torch.Generator | None = None) -> tuple[float, float]:
    """One teacher-forced update; returns (value NLL, length NLL) in nats.

    Conditions are replaced by the catch-all with probability
    ``cfg.catch_all_prob``. Pass ``optimizer=None`` to skip the update.
    """
    batch, mask = collate(windows)
    conditions = torch.as_tensor(conditions, dtype=torch.long)
    if model.cfg.catch_all_prob > 0:
        drop = torch.rand(len(windows), generator=generator) < model.cfg.catch_all_prob
        conditions = torch.where(drop, torch.full_like(conditions, model.vocab.catch_all), conditions)
    v, l = masked_nll(model, batch, mask, conditions)
    if not (torch.isfinite(v) and torch.isfinite(l)):
        raise FloatingPointError(f"non-finite RLT loss: value={v.item()} length={l.item()}")
    if optimizer is not None:
        optimizer.zero_grad()
        (v + l).backward()
        optimizer.step()
    return v.item(), l.item()


@dataclass
class EventCorpus:
    """Event windows with their condition ids."""
    windows: list[dict[str, np.ndarray]]
    conditions: np.ndarray
    durations_s: np.ndarray

    @classmethod
    def build(cls, sequences: list[EventSequence], conditions, vocab: EventVocabulary, cfg: RLTConfig):
        windows = [event_features(s, vocab, cfg) for s in sequences]
        durations = []
        for s, w in zip(sequences, windows):
            ends = np.zeros(vocab.num_channels)
            np.maximum.at(ends, w["channels"], w["offsets"] + w["length"] + 1)
            durations.append(ends.min() / s.base_rate_hz)
        return cls(windows, np.asarray(conditions, dtype=np.int64), np.array(durations))

    def __len__(self):
        return len(self.windows)

    @property
    def num_events(self) -> int:
        return sum(len(w["value"]) for w in self.windows)


@torch.no_grad()
def evaluate(model: RLTModel, corpus: EventCorpus, batch_size: int = 64) -> dict[str, float]:
    """Per-event NLL in nats (value, length, sum) with true conditions."""
    v_sum = l_sum = 0.0
    count = 0
    for i in range(0, len(corpus), batch_size):
        batch, mask = collate(corpus.windows[i:i + batch_size])
        conds = torch.from_numpy(corpus.conditions[i:i + batch_size])
        value_logits, length_logits = model(batch, conds)
        v_sum += F.cross_entropy(value_logits[mask], batch["value"][mask], reduction="sum").item()
        l_sum += F.cross_entropy(length_logits[mask], batch["length"][mask], reduction="sum").item()
        count += int(mask.sum())
    return {"value_nll": v_sum / count, "length_nll": l_sum / count, "nll": (v_sum + l_sum) / count}


def make_model(cfg: RLTConfig, vocab: EventVocabulary, seed: int) -> RLTModel:
    torch.manual_seed(seed)
    return RLTModel(cfg, vocab)


def train_rlt(model: RLTModel, train: EventCorpus, *, steps: int | None = None, seed: int = 0,
              holdout: EventCorpus | None = None, eval_every: int = 0) -> list[dict]:
    """Adam training on random mini-batches; returns the logged curve."""
    cfg = model.cfg
    steps = cfg.steps if steps is None else steps
    rng = np.random.default_rng([seed, 3])
    gen = torch.Generator().manual_seed(seed + 4)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    curve = []
    for step in range(1, steps + 1):
        idx = rng.choice(len(train), min(cfg.batch_size, len(train)), replace=False)
        v, l = train_step(model, optimizer, [train.windows[i] for i in idx], train.conditions[idx], gen)
        row = {"step": step, "train_value_nll": v, "train_length_nll": l}
        if holdout is not None and eval_every and (step % eval_every == 0 or step == steps):
            row.update({f"holdout_{k}": x for k, x in evaluate(model, holdout).items()})
        if "holdout_nll" in row or step == steps:
            curve.append(row)
    return curve


def ablation_run(variants: dict[str, RLTConfig], vocab: EventVocabulary, train: EventCorpus,
                 holdout: EventCorpus, *, steps: int, seed: int = 0, eval_every: int = 50,
                 out_dir=None) -> dict[str, list[dict]]:
    """Train each variant from the same seed on the same data and log holdout NLL."""
    curves = {}
    for name, cfg in variants.items():
        model = make_model(cfg, vocab, seed)
        curves[name] = train_rlt(model, train, steps=steps, seed=seed, holdout=holdout, eval_every=eval_every)
        if out_dir is not None:
            write_curve(Path(out_dir) / f"ablation_{name}.csv", curves[name])
    return curves


CURVE_FIELDS = ("step", "train_value_nll", "train_length_nll", "holdout_value_nll", "holdout_length_nll",
                "holdout_nll")


def write_curve(path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CURVE_FIELDS)
        for row in curve:
            writer.writerow([row["step"]] + [repr(float(row[k])) if k in row else "" for k in CURVE_FIELDS[1:]])


def standard_variants(cfg: RLTConfig) -> dict[str, RLTConfig]:
    off = dict(embed_channel_in=False, embed_offset_in=False, embed_channel_out=False, embed_offset_out=False)
    return {
        "reference": dataclasses.replace(cfg, **REFERENCE_FLAGS),
        "no_channel_offset": dataclasses.replace(cfg, **{**REFERENCE_FLAGS, **off}),
        "no_input_co": dataclasses.replace(cfg, **{**REFERENCE_FLAGS, "embed_channel_in": False,
                                                   "embed_offset_in": False}),
        "no_output_co": dataclasses.replace(cfg, **{**REFERENCE_FLAGS, "embed_channel_out": False,
                                                    "embed_offset_out": False}),
        "absolute_position": dataclasses.replace(cfg, **{**REFERENCE_FLAGS, "embed_global_position": True}),
    }


# -- sampling -------------------------------------------------------------------------------------

def nucleus_truncate(probs, p: float) -> np.ndarray:
    """Keep the smallest most-probable set with mass >= p, then renormalise.

    Ties in probability are broken by lower index first.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    if probs.ndim != 1 or np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValueError("probabilities must be a finite nonnegative vector")
    total = probs.sum()
    if total <= 0:
        raise ValueError("all-zero probability vector")
    if p == 1:
        return probs / total
    order = np.lexsort((np.arange(len(probs)), -probs))
    cumulative = np.cumsum(probs[order]) / total
    keep = int(np.searchsorted(cumulative, p - 1e-12)) + 1
    out = np.zeros_like(probs)
    chosen = order[:min(keep, len(probs))]
    out[chosen] = probs[chosen]
    return out / out.sum()


@dataclass
class SampleTrace:
    events: EventSequence
    value_probs: np.ndarray
    length_probs: np.ndarray
    channels: np.ndarray
    offsets: np.ndarray


@torch.no_grad()
def sample(model: RLTModel, condition: int | None, num_events: int, p: float = 0.8, seed: int = 0,
           prompt: EventSequence | None = None, base_rate_hz: float = 250.0, trace: bool = False):
    """Alternately sample a value and a length per event.

    Channel and offset of the next event are tracked incrementally from the
    lengths so far. Returns an EventSequence, or a SampleTrace with the
    untruncated per-step distributions when ``trace`` is set.
    """
    vocab, cfg = model.vocab, model.cfg
    if num_events < 1 or num_events > cfg.max_events:
        raise RLTError(f"num_events must be in [1, {cfg.max_events}]")
    rng = np.random.default_rng(seed)
    cond = torch.tensor([vocab.catch_all if condition is None else condition])
    tracker = ChannelTracker(vocab.num_channels)
    values, lengths, channels, offsets = [], [], [], []
    if prompt is not None and len(prompt):
        feats = event_features(prompt, vocab, cfg)
        values = list(feats["value"] - vocab.k)
        lengths = list(feats["length"] + 1)
        for length in lengths:
            c, o = tracker.push(int(length))
            channels.append(c)
            offsets.append(o)
    value_probs, length_probs = [], []

    while len(values) < num_events:
        n = len(values)
        nxt_c, nxt_o = tracker.next_channel, tracker.next_offset
        ch = np.array(channels + [nxt_c], dtype=np.int64)
        off = np.array(offsets + [nxt_o], dtype=np.int64)
        v_idx = np.array([x + vocab.k for x in values] + [0], dtype=np.int64)
        l_idx = np.array([x - 1 for x in lengths] + [0], dtype=np.int64)
        shift = lambda a: np.concatenate([[-1], a[:-1]])
        feats = {
            "value": v_idx, "length": l_idx, "value_in": shift(v_idx), "length_in": shift(l_idx),
            "channel_in": shift(ch), "offset_in": shift(offset_bucket(off, cfg)),
            "channel_out": ch, "offset_out": offset_bucket(off, cfg),
            "global_position": np.arange(n + 1),
            "channel_position": np.minimum(channel_event_indices(ch, vocab.num_channels), cfg.max_events - 1),
        }
        batch = {k: torch.from_numpy(a)[None] for k, a in feats.items()}
        h = model.hidden(model.embed(batch, cond))[:, -1]
        pv = torch.softmax(model.value_head(h).double(), -1)[0].numpy()
        v = int(rng.choice(len(pv), p=nucleus_truncate(pv, p)))
        pl = torch.softmax(model.length_logits(h, torch.tensor([v])).double(), -1)[0].numpy()
        length = int(rng.choice(len(pl), p=nucleus_truncate(pl, p))) + 1
        value_probs.append(pv)
        length_probs.append(pl)
        values.append(v - vocab.k)
        lengths.append(length)
        c, o = tracker.push(length)
        channels.append(c)
        offsets.append(o)

    events = EventSequence(np.array(values, dtype=np.int64), np.array(lengths, dtype=np.int64),
                           vocab.num_channels, vocab.k, vocab.max_run_length, base_rate_hz,
                           np.array(channels, dtype=np.int64), np.array(offsets, dtype=np.int64))
    if not trace:
        return events
    return SampleTrace(events, np.array(value_probs), np.array(length_probs),
                       np.array(channels), np.array(offsets))


@torch.no_grad()
def teacher_distributions(model: RLTModel, events: EventSequence, condition: int | None):
    """Per-event value and length distributions from one teacher-forced pass."""
    feats = event_features(events, model.vocab, model.cfg)
    batch, _ = collate([feats])
    cond = torch.tensor([model.vocab.catch_all if condition is None else condition])
    value_logits, length_logits = model(batch, cond)
    return (torch.softmax(value_logits.double(), -1)[0].numpy(),
            torch.softmax(length_logits.double(), -1)[0].numpy())


# -- entropy bound --------------------------------------------------------------------------------

@torch.no_grad()
def entropy_bound(model: RLTModel, holdout: EventCorpus) -> dict[str, float]:
    """Bits per second of the model's NLL on ``holdout`` and the raw code rate."""
    if len(holdout) == 0:
        raise RLTError("empty holdout set")
    nll = evaluate(model, holdout)
    seconds = float(holdout.durations_s.sum())
    events = holdout.num_events
    bits = nll["nll"] * events / math.log(2)
    vocab = model.vocab
    raw = events / seconds * (math.log2(vocab.num_values) + math.log2(vocab.max_run_length))
    return {"bound_bps": bits / seconds, "raw_bps": raw, "events_per_s": events / seconds,
            "nll_nats_per_event": nll["nll"]}


# -- toy language ---------------------------------------------------------------------------------

TOY_PATTERN = {
    0: ([3, -2, 0, 5], [2, 3, 1, 2]),
    1: ([1, -4], [4, 4]),
}


def toy_language(periods: int = 16, k: int = 7, max_run_length: int = 256) -> EventSequence:
    """A strictly periodic two-channel event sequence (six events per period)."""
    columns = []
    for ch in sorted(TOY_PATTERN):
        vals, lens = TOY_PATTERN[ch]
        columns.append(np.repeat(np.tile(vals, periods), np.tile(lens, periods)))
    dense = DenseCodes(np.stack(columns, axis=1), 250.0, k)
    return interleaved_encode(dense, None, max_run_length)


# -- checkpoints ----------------------------------------------------------------------------------

def save_rlt(path, model: RLTModel, meta: dict | None = None) -> None:
    info = {"config": dataclasses.asdict(model.cfg), "vocab": dataclasses.asdict(model.vocab), **(meta or {})}
    save_checkpoint(path, "rlt", dict(model.state_dict()), info)


def load_rlt(path) -> tuple[RLTModel, dict]:
    tensors, meta = load_checkpoint(path, "rlt")
    cfg = RLTConfig(**meta["config"])
    model = RLTModel(cfg, EventVocabulary(**meta["vocab"]))
    model.load_state_dict(tensors)
    return model, meta

