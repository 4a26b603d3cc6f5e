"""Toy slow autoencoder.

Encoder: strided causal convolutions (downsampling by ``downsample``) and a
few residual dilated convolutions, run on the time-reversed signal so the
codes depend only on present and future samples. The continuous output z is
Schmitt-trigger quantised with straight-through gradients.

Decoder: a small WaveNet-style stack of gated, dilated causal convolutions
over embedded mu-law classes of the noisy input, conditioned on the
upsampled codes plus a class embedding. It predicts the next mu-law class.

Loss per step: NLL (nats per time step) + mu * margin(z) + lambda * slowness(z).
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import DenseCodes, EventSequence, interleaved_decode, interleaved_encode
from .config import Config, SlowAEConfig
from .controller import ControllerState, estimate_aer, update_lambda
from .quantiser import (
    QuantiserConfig,
    margin_penalty_torch,
    mu_law_compand,
    mu_law_decode,
    mu_law_encode,
    stq_levels,
    straight_through,
)
from .slowness import PenaltyKind, slowness_penalty_torch
from .synthetic import SyntheticSignal

NUM_CLASSES_AUDIO = 256
SILENCE_CLASS = 128

METRIC_FIELDS = ("step", "nll", "margin", "slow", "lambda", "aer", "total")


class TrainingDiverged(RuntimeError):
    pass


class CausalConv1d(nn.Conv1d):
    """Output frame j depends on inputs up to the end of its stride block, j*stride + stride - 1."""

    def __init__(self, cin: int, cout: int, kernel_size: int, stride: int = 1, dilation: int = 1):
        super().__init__(cin, cout, kernel_size, stride=stride, dilation=dilation)
        self.left = (kernel_size - 1) * dilation - (stride - 1)

    def forward(self, x):
        return super().forward(F.pad(x, (self.left, 0)))


class ResidualBlock(nn.Module):
    def __init__(self, width: int, dilation: int):
        super().__init__()
        self.conv = CausalConv1d(width, width, 2, dilation=dilation)
        self.proj = nn.Conv1d(width, width, 1)

    def forward(self, x):
        return x + self.proj(F.gelu(self.conv(F.gelu(x))))


def _flip(x: torch.Tensor) -> torch.Tensor:
    return torch.flip(x, dims=[-1])


class Encoder(nn.Module):
    def __init__(self, cfg: SlowAEConfig):
        super().__init__()
        n_down = int(round(math.log2(cfg.downsample)))
        if 2 ** n_down != cfg.downsample:
            raise ValueError("downsample factor must be a power of two")
        self.anti_causal = cfg.anti_causal
        self.down = nn.ModuleList(
            CausalConv1d(1 if i == 0 else cfg.width, cfg.width, 4, stride=2) for i in range(n_down)
        )
        self.blocks = nn.ModuleList(ResidualBlock(cfg.width, 2 ** i) for i in range(cfg.encoder_blocks))
        self.out = nn.Conv1d(cfg.width, cfg.channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T) companded audio -> (B, T / downsample, C) continuous codes."""
        h = x[:, None, :]
        if self.anti_causal:
            h = _flip(h)
        for conv in self.down:
            h = F.gelu(conv(h))
        for block in self.blocks:
            h = block(h)
        h = self.out(h)
        if self.anti_causal:
            h = _flip(h)
        return h.transpose(1, 2)


class ConditioningStack(nn.Module):
    def __init__(self, cfg: SlowAEConfig, num_classes: int):
        super().__init__()
        self.upsample = cfg.downsample
        self.inp = nn.Conv1d(cfg.channels, cfg.width, 1)
        self.class_embedding = nn.Embedding(num_classes, cfg.width)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.width, 2 ** i) for i in range(cfg.cond_blocks))

    def forward(self, codes: torch.Tensor, class_ids: torch.Tensor) -> torch.Tensor:
        h = self.inp(codes.transpose(1, 2)) + self.class_embedding(class_ids)[:, :, None]
        h = _flip(h)
        for block in self.blocks:
            h = block(h)
        h = F.gelu(_flip(h))
        return h.repeat_interleave(self.upsample, dim=-1).transpose(1, 2)


class CausalPair(nn.Module):
    """Kernel-2 dilated causal convolution on channels-last (B, T, W) input."""

    def __init__(self, cin: int, cout: int, dilation: int = 1):
        super().__init__()
        self.dilation = dilation
        self.past = nn.Linear(cin, cout, bias=False)
        self.now = nn.Linear(cin, cout)

    def forward(self, x):
        past = F.pad(x[:, :-self.dilation], (0, 0, self.dilation, 0)) if x.shape[1] > self.dilation \
            else torch.zeros_like(x)
        return self.past(past) + self.now(x)


class Decoder(nn.Module):
    def __init__(self, cfg: SlowAEConfig):
        super().__init__()
        w = cfg.width
        self.dilations = tuple(cfg.decoder_dilations)
        self.embed = nn.Embedding(NUM_CLASSES_AUDIO, w)
        self.inp = CausalPair(w, w)
        self.filters = nn.ModuleList(CausalPair(w, 2 * w, d) for d in self.dilations)
        self.conds = nn.ModuleList(nn.Linear(w, 2 * w) for _ in self.dilations)
        # The last layer only feeds the skip path.
        self.res = nn.ModuleList(nn.Linear(w, w) for _ in self.dilations[:-1])
        self.skip = nn.ModuleList(nn.Linear(w, w) for _ in self.dilations)
        self.head = nn.Linear(w, w)
        self.logits = nn.Linear(w, NUM_CLASSES_AUDIO)
        nn.init.normal_(self.logits.weight, std=1e-3)
        nn.init.zeros_(self.logits.bias)

    @property
    def receptive_field(self) -> int:
        """Past samples that can influence one prediction."""
        return 2 + sum(self.dilations)

    def forward(self, classes: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Logits (B, T, 256) for each step given classes (B, T) and conditioning (B, T, W).

        The prediction at step t sees classes before t only.
        """
        shifted = F.pad(classes[:, :-1], (1, 0), value=SILENCE_CLASS)
        x = self.inp(self.embed(shifted))
        skips = 0
        for i, (filt, cnd, skip) in enumerate(zip(self.filters, self.conds, self.skip)):
            a, b = (filt(x) + cnd(cond)).chunk(2, dim=-1)
            h = torch.tanh(a) * torch.sigmoid(b)
            if i < len(self.res):
                x = x + self.res[i](h)
            skips = skips + skip(h)
        return self.logits(F.gelu(self.head(F.gelu(skips))))


class SlowAE(nn.Module):
    def __init__(self, cfg: SlowAEConfig, num_classes: int = 4):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        self.encoder = Encoder(cfg)
        self.conditioning = ConditioningStack(cfg, num_classes)
        self.decoder = Decoder(cfg)

    @property
    def quantiser(self) -> QuantiserConfig:
        return QuantiserConfig(self.cfg.k, self.cfg.margin or None)

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.embed.weight.dtype

    def code_rate(self, sample_rate_hz: float) -> float:
        return sample_rate_hz / self.cfg.downsample

    def encode(self, audio: torch.Tensor) -> torch.Tensor:
        """Continuous codes z (B, M, C) for raw audio (B, T) in [-1, 1]."""
        companded = torch.as_tensor(mu_law_compand(audio.detach().cpu().numpy()), dtype=self.dtype)
        return self.encoder(companded)

    def quantise(self, z: torch.Tensor) -> tuple[torch.Tensor, np.ndarray]:
        levels = stq_levels(z.detach().cpu().double().numpy(), self.quantiser)
        values = torch.as_tensor(levels / self.cfg.k, dtype=z.dtype)
        return straight_through(z, values), levels


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _crop_to_frames(audio: np.ndarray, downsample: int) -> np.ndarray:
    n = (audio.shape[-1] // downsample) * downsample
    if n == 0:
        raise ValueError("signal shorter than one code frame")
    return audio[..., :n]


def stack_batch(signals: list[SyntheticSignal], downsample: int) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = {len(s.samples) for s in signals}
    if len(lengths) != 1:
        raise ValueError("all signals in a batch must have the same length")
    audio = _crop_to_frames(np.stack([s.samples for s in signals]), downsample)
    return torch.from_numpy(audio), torch.tensor([s.class_id for s in signals], dtype=torch.long)


@dataclass
class ForwardResult:
    z: torch.Tensor
    zq: torch.Tensor
    levels: np.ndarray
    logits: torch.Tensor
    targets: torch.Tensor
    nll: torch.Tensor
    margin: torch.Tensor
    slow: torch.Tensor
    total: torch.Tensor

    def loss_terms(self) -> dict[str, float]:
        return {"nll": self.nll.item(), "margin": self.margin.item(), "slow": self.slow.item(),
                "total": self.total.item()}


def forward(model: SlowAE, audio: torch.Tensor, class_ids: torch.Tensor, *, lam: float = 0.0,
            mu: float | None = None, noise: torch.Tensor | None = None,
            quantiser: str = "stq", penalty=None) -> ForwardResult:
    """One pass through encoder, bottleneck and decoder.

    ``noise`` is added to the decoder's view of the audio before companding.
    ``quantiser`` is ``"stq"`` (straight-through), ``"frozen"`` (quantised
    values as constants, i.e. the exact gradient of the piecewise function)
    or ``"none"`` (bottleneck bypassed).
    """
    cfg = model.cfg
    if audio.ndim != 2 or class_ids.shape != (audio.shape[0],):
        raise ValueError(f"expected audio (B, T) and class ids (B,), got {tuple(audio.shape)} and {tuple(class_ids.shape)}")
    if audio.shape[1] % cfg.downsample:
        raise ValueError(f"audio length {audio.shape[1]} is not a multiple of {cfg.downsample}")
    mu = cfg.mu if mu is None else mu
    penalty = PenaltyKind.parse(cfg.penalty if penalty is None else penalty)

    z = model.encode(audio)
    if quantiser == "none":
        zq, levels = z, model.quantise(z)[1]
    else:
        zq, levels = model.quantise(z)
        if quantiser == "frozen":
            zq = zq.detach()

    noisy = audio.detach().cpu().double()
    if noise is not None:
        noisy = noisy + noise.detach().cpu().double()
    targets = torch.from_numpy(mu_law_encode(np.clip(noisy.numpy(), -1.0, 1.0)))
    logits = model.decoder(targets, model.conditioning(zq, class_ids))
    nll = F.cross_entropy(logits.reshape(-1, NUM_CLASSES_AUDIO), targets.reshape(-1))
    margin = margin_penalty_torch(z).mean()
    slow = slowness_penalty_torch(z, penalty, cfg.gs_squared).mean()
    total = nll.double() + mu * margin + lam * slow
    return ForwardResult(z, zq, levels, logits, targets, nll, margin, slow, total)


# -- training -------------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SlowAE
    shadow: SlowAE
    controller: ControllerState
    history: list[dict] = field(default_factory=list)
    step: int = 0
    optimizer_state: dict | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.history])


def polyak_update(shadow: nn.Module, model: nn.Module, decay: float) -> None:
    with torch.no_grad():
        for s, p in zip(shadow.parameters(), model.parameters()):
            s.mul_(decay).add_(p, alpha=1.0 - decay)


def controller_from_config(cfg: Config) -> ControllerState:
    c = cfg.controller
    return ControllerState(c.lambda_init, c.target_rate_hz, c.epsilon, c.delta, c.lambda_min, c.lambda_max)


def train(model: SlowAE, signals: list[SyntheticSignal], cfg: Config, *, steps: int | None = None,
          target_rate_hz: float | None = None, metrics_path=None, seed: int | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Train with Adam, Polyak averaging and per-step lambda control.

    Every step logs (step, nll, margin, slow, lambda, aer, total), where
    ``lambda`` is the weight used for that step and ``aer`` the batch event
    rate that drives the next update.
    """
    scfg = cfg.slowae
    steps = scfg.steps if steps is None else steps
    if steps < 1:
        raise ValueError("steps must be >= 1")
    seed = cfg.seed if seed is None else seed
    state = controller_from_config(cfg)
    if target_rate_hz is not None:
        state = dataclasses.replace(state, target_rate_hz=target_rate_hz)

    audio, class_ids = stack_batch(signals, scfg.downsample)
    audio = audio.to(model.dtype)
    code_rate = model.code_rate(signals[0].sample_rate_hz)
    rng = np.random.default_rng([seed, 1])
    noise_gen = torch.Generator().manual_seed(seed + 2)

    shadow = copy.deepcopy(model)
    for p in shadow.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.Adam(model.parameters(), lr=scfg.lr, betas=(0.9, 0.999))
    drop_step = int(scfg.lr_drop_at * steps)

    writer, handle = None, None
    if metrics_path is not None:
        handle = open(metrics_path, "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(METRIC_FIELDS)

    history = []
    try:
        for step in range(1, steps + 1):
            lr = scfg.lr / scfg.lr_drop_factor if step > drop_step else scfg.lr
            for group in optimizer.param_groups:
                group["lr"] = lr
            if scfg.batch_size >= len(signals):
                idx = np.arange(len(signals))
            else:
                idx = np.sort(rng.choice(len(signals), scfg.batch_size, replace=False))
            batch = audio[idx]
            noise = torch.randn(batch.shape, generator=noise_gen, dtype=torch.float64) * scfg.noise_sigma
            out = forward(model, batch, class_ids[idx], lam=state.lambda_, noise=noise)
            if not torch.isfinite(out.total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: nll={out.nll.item()} margin={out.margin.item()} "
                    f"slow={out.slow.item()} lambda={state.lambda_}"
                )
            optimizer.zero_grad()
            out.total.backward()
            optimizer.step()
            polyak_update(shadow, model, scfg.polyak_decay)

            aer = estimate_aer(out.levels, code_rate)
            row = {"step": step, **out.loss_terms(), "lambda": state.lambda_, "aer": aer}
            history.append(row)
            if writer is not None:
                writer.writerow([row[k] if k == "step" else repr(float(row[k])) for k in METRIC_FIELDS])
            if callback is not None:
                callback(row)
            state = update_lambda(state, aer)
    finally:
        if handle is not None:
            handle.close()
    return TrainResult(model, shadow, state, history, steps, optimizer.state_dict())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


# -- checkpoints ----------------------------------------------------------------------------------

def save_slowae(path, result: TrainResult, cfg: Config) -> None:
    tensors = {f"params/{k}": v for k, v in result.model.state_dict().items()}
    tensors.update({f"polyak/{k}": v for k, v in result.shadow.state_dict().items()})
    if result.optimizer_state is not None:
        names = [k for k, _ in result.model.named_parameters()]
        for i, name in enumerate(names):
            moments = result.optimizer_state["state"].get(i)
            if moments:
                tensors[f"adam_m/{name}"] = moments["exp_avg"]
                tensors[f"adam_v/{name}"] = moments["exp_avg_sq"]
    meta = {"config": cfg.to_dict(), "controller": dataclasses.asdict(result.controller),
            "step": result.step, "seed": cfg.seed, "num_classes": result.model.num_classes}
    save_checkpoint(path, "slowae", tensors, meta)


def load_slowae(path) -> tuple[TrainResult, Config]:
    tensors, meta = load_checkpoint(path, "slowae")
    cfg = Config.from_dict(meta["config"])
    model = SlowAE(cfg.slowae, meta["num_classes"])
    shadow = SlowAE(cfg.slowae, meta["num_classes"])
    model.load_state_dict({k[len("params/"):]: v for k, v in tensors.items() if k.startswith("params/")})
    shadow.load_state_dict({k[len("polyak/"):]: v for k, v in tensors.items() if k.startswith("polyak/")})
    controller = ControllerState(**meta["controller"])
    return TrainResult(model, shadow, controller, [], meta["step"]), cfg


# -- gradient check -------------------------------------------------------------------------------

@dataclass
class GradientReport:
    groups: dict[str, dict]
    straight_through_error: float

    @property
    def max_rel_error(self) -> float:
        return max(g["max_rel_error"] for g in self.groups.values())

    def to_dict(self) -> dict:
        return {"groups": self.groups, "straight_through_error": self.straight_through_error,
                "max_rel_error": self.max_rel_error}


def _group_of(name: str) -> str:
    if name.startswith("conditioning.class_embedding"):
        return "class_embedding"
    return name.split(".", 1)[0]


def gradient_check(model: SlowAE, audio: torch.Tensor, class_ids: torch.Tensor, *, lam: float = 1.0,
                   mu: float | None = None, noise: torch.Tensor | None = None, h: float = 1e-4,
                   max_per_group: int | None = None, seed: int = 0,
                   quantiser: str = "stq") -> GradientReport:
    """Compare autograd gradients of the total loss with central differences.

    The loss is evaluated in double precision on a copy of ``model``. With
    the Schmitt-trigger bottleneck in place the loss is piecewise smooth in
    the encoder parameters, so the reference gradient there treats the
    quantised codes as constants; parameters whose finite-difference step
    moves any code level are counted as ``excluded`` and skipped. The
    straight-through path is checked separately: the encoder gradient must
    equal dL/dz' pushed back through the encoder as if the quantiser were
    the identity, plus the gradient of the smooth terms.

    ``quantiser="none"`` bypasses the bottleneck entirely.
    """
    m = copy.deepcopy(model).double()
    audio = audio.double()
    reference_mode = "frozen" if quantiser == "stq" else "none"

    def loss(mode):
        return forward(m, audio, class_ids, lam=lam, mu=mu, noise=noise, quantiser=mode)

    names = [n for n, _ in m.named_parameters()]
    params = [p for _, p in m.named_parameters()]

    base = loss(reference_mode)
    reference = torch.autograd.grad(base.total, params, allow_unused=True)
    reference = [torch.zeros_like(p) if g is None else g for p, g in zip(params, reference)]

    rng = np.random.default_rng(seed)
    groups: dict[str, dict] = {}
    with torch.no_grad():
        flat = []
        for name, p, g in zip(names, params, reference):
            for idx in np.ndindex(tuple(p.shape)):
                flat.append((_group_of(name), p, idx, g[idx].item()))
        by_group: dict[str, list] = {}
        for item in flat:
            by_group.setdefault(item[0], []).append(item)
        for group, items in by_group.items():
            if max_per_group is not None and len(items) > max_per_group:
                items = [items[i] for i in sorted(rng.choice(len(items), max_per_group, replace=False))]
            analytic, numeric, excluded = [], [], 0
            for _, p, idx, g in items:
                orig = p[idx].item()
                p[idx] = orig + h
                plus = loss(reference_mode)
                p[idx] = orig - h
                minus = loss(reference_mode)
                p[idx] = orig
                if quantiser == "stq" and not (np.array_equal(plus.levels, base.levels)
                                               and np.array_equal(minus.levels, base.levels)):
                    excluded += 1
                    continue
                analytic.append(g)
                numeric.append((plus.total.item() - minus.total.item()) / (2 * h))
            analytic, numeric = np.array(analytic), np.array(numeric)
            noise_floor = 100 * np.finfo(np.float64).eps * abs(base.total.item()) / h
            groups[group] = {"checked": len(analytic), "excluded": excluded,
                             "max_rel_error": _max_rel_error(analytic, numeric, noise_floor)}

    st_error = 0.0
    if quantiser == "stq":
        enc_params = list(m.encoder.parameters())
        ste = loss("stq")
        ste_grads = torch.autograd.grad(ste.total, enc_params)
        # Same pass, but with z' as an explicit leaf so dL/dz' can be pushed through by hand.
        z = m.encode(audio)
        zq_leaf = torch.as_tensor(ste.levels / m.cfg.k, dtype=m.dtype).requires_grad_(True)
        targets = ste.targets
        logits = m.decoder(targets, m.conditioning(zq_leaf, class_ids))
        nll = F.cross_entropy(logits.reshape(-1, NUM_CLASSES_AUDIO), targets.reshape(-1))
        (g_zq,) = torch.autograd.grad(nll, zq_leaf)
        smooth = (mu if mu is not None else m.cfg.mu) * margin_penalty_torch(z).mean() + lam * slowness_penalty_torch(
            z, PenaltyKind.parse(m.cfg.penalty), m.cfg.gs_squared).mean()
        manual = torch.autograd.grad([z, smooth], enc_params, grad_outputs=[g_zq, torch.ones_like(smooth)])
        st_error = max(((a - b).abs().max() / max(b.abs().max().item(), 1e-12)).item()
                       for a, b in zip(ste_grads, manual))
    return GradientReport(groups, st_error)


def _max_rel_error(analytic: np.ndarray, numeric: np.ndarray, noise_floor: float = 0.0) -> float:
    """Largest elementwise relative error.

    The denominator never drops below 1e-3 of the group's largest gradient
    or below ``noise_floor``, the size of round-off in a central difference
    (about 100 * eps * |L| / h). Smaller entries are compared absolutely.
    """
    if len(analytic) == 0:
        return 0.0
    floor = max(1e-3 * max(np.abs(numeric).max(), np.abs(analytic).max()), noise_floor, 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- inference ------------------------------------------------------------------------------------

@torch.no_grad()
def encode_levels(model: SlowAE, samples: np.ndarray) -> np.ndarray:
    """Quantised code levels (M, C) for a single signal."""
    audio = torch.from_numpy(_crop_to_frames(np.asarray(samples, dtype=np.float64), model.cfg.downsample))
    z = model.encode(audio[None].to(model.dtype))
    return stq_levels(z[0].double().numpy(), model.quantiser)


def encode_to_events(model: SlowAE, signal: SyntheticSignal) -> EventSequence:
    dense = DenseCodes(encode_levels(model, signal.samples), model.code_rate(signal.sample_rate_hz), model.cfg.k)
    return interleaved_encode(dense, None, model.cfg.max_run_length)


def _check_events(model: SlowAE, events: EventSequence) -> None:
    if events.k != model.cfg.k or events.num_channels != model.cfg.channels:
        raise ValueError(
            f"events have k={events.k}, C={events.num_channels}; model expects "
            f"k={model.cfg.k}, C={model.cfg.channels}"
        )


@torch.no_grad()
def reconstruct(model: SlowAE, events: EventSequence, class_id: int, seed: int = 0,
                greedy: bool = False) -> np.ndarray:
    """Autoregressively render audio conditioned on decoded event codes."""
    _check_events(model, events)
    levels = interleaved_decode(events).levels
    codes = torch.as_tensor(levels / model.cfg.k, dtype=model.dtype)[None]
    cond = model.conditioning(codes, torch.tensor([class_id]))
    steps = cond.shape[1]
    window = model.decoder.receptive_field
    gen = torch.Generator().manual_seed(seed)
    classes = torch.full((1, steps), SILENCE_CLASS, dtype=torch.long)
    for t in range(steps):
        lo = max(0, t + 1 - window)
        logits = model.decoder(classes[:, lo:t + 1], cond[:, lo:t + 1])[0, -1]
        if greedy:
            classes[0, t] = int(torch.argmax(logits))
        else:
            classes[0, t] = int(torch.multinomial(torch.softmax(logits.double(), -1), 1, generator=gen))
    return mu_law_decode(classes[0].numpy())


@torch.no_grad()
def reconstruction_accuracy(model: SlowAE, signals: list[SyntheticSignal]) -> tuple[float, float]:
    """Teacher-forced mu-law class accuracy from event-decoded codes, and the
    accuracy of always predicting the most common class."""
    correct = total = 0
    counts = np.zeros(NUM_CLASSES_AUDIO, dtype=np.int64)
    for s in signals:
        events = encode_to_events(model, s)
        codes = torch.as_tensor(interleaved_decode(events).levels / model.cfg.k, dtype=model.dtype)[None]
        audio = _crop_to_frames(s.samples, model.cfg.downsample)
        targets = torch.from_numpy(mu_law_encode(audio))[None]
        logits = model.decoder(targets, model.conditioning(codes, torch.tensor([s.class_id])))
        correct += int((logits.argmax(-1) == targets).sum())
        total += targets.numel()
        counts += np.bincount(targets[0].numpy(), minlength=NUM_CLASSES_AUDIO)
    return correct / total, counts.max() / total
