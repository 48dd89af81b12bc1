"""Mask loss, Adam, augmentation and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioClip, HOP, WINDOW, load_wav, stft
from .checkpoint import AdamState, Checkpoint, load_checkpoint, save_checkpoint
from .model import ModelConfig, init_params, pad_magnitude, unet_forward
from .tensor import ContractError, ShapeError, Tensor, add, backward, l1, mul, sub

log = logging.getLogger(__name__)


@dataclass
class TrackPair:
    voice: AudioClip
    accompaniment: AudioClip
    name: str = ""

    def __post_init__(self):
        if len(self.voice) != len(self.accompaniment):
            raise ShapeError(f"voice ({len(self.voice)}) and accompaniment ({len(self.accompaniment)}) lengths differ")
        if self.voice.sample_rate != self.accompaniment.sample_rate:
            raise ValueError("voice and accompaniment sample rates differ")

    def mixture(self) -> AudioClip:
        return AudioClip(self.voice.samples + self.accompaniment.samples, self.voice.sample_rate)


@dataclass
class TrainOptions:
    lr: float = 5e-5
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0      # 0 disables periodic checkpoints
    val_every: int = 0             # 0 disables validation
    val_fraction: float = 0.0      # share of manifest pairs held out for validation
    augment: bool = True
    gain_low: float = 0.25
    gain_high: float = 1.25
    batch: int = 1                 # windows per step; losses are averaged
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# loss and optimiser


def l1_mask_loss(masks, mixture_mag, target_mags) -> Tensor:
    """Sum over sources of |M_i * |Y| - |X_i|| summed over all bins."""
    Y = mixture_mag if isinstance(mixture_mag, Tensor) else Tensor(mixture_mag)
    total = None
    for m, x in zip(masks, target_mags):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if m.shape != Y.shape or x.shape != Y.shape:
            raise ShapeError(f"loss shapes differ: mask {m.shape}, mixture {Y.shape}, target {x.shape}")
        term = l1(sub(mul(m, Y), x))
        total = term if total is None else add(total, term)
    return total


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 5e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, state: AdamState | None = None):
        if state is None:
            state = AdamState({k: np.zeros_like(p.data) for k, p in params.items()},
                              {k: np.zeros_like(p.data) for k, p in params.items()},
                              0, lr, beta1, beta2, eps)
        self.params = params
        self.state = state

    def step(self) -> None:
        """Apply one update from ``.grad`` on every parameter, then clear the grads."""
        s = self.state
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for parameter {missing[0]!r}")
        s.t += 1
        c1 = 1 - s.beta1 ** s.t
        c2 = 1 - s.beta2 ** s.t
        for k, p in self.params.items():
            g = p.grad
            m, v = s.m[k], s.v[k]
            m *= s.beta1
            m += (1 - s.beta1) * g
            v *= s.beta2
            v += (1 - s.beta2) * (g * g)
            upd = s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
            p.data -= upd.astype(p.data.dtype)
            p.grad = None


# ---------------------------------------------------------------------------
# data


def window_samples(cfg: ModelConfig, window: int = WINDOW, hop: int = HOP) -> int:
    """Sample count whose STFT has exactly ``cfg.window_frames`` frames."""
    return window + (cfg.window_frames - 1) * hop


def read_manifest(path) -> list[TrackPair]:
    path = Path(path)
    base = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'voice<TAB>accompaniment'")
        v, a = (base / p.strip() for p in parts)
        voice, acc = load_wav(v), load_wav(a)
        n = min(len(voice), len(acc))
        pairs.append(TrackPair(AudioClip(voice.samples[:n]), AudioClip(acc.samples[:n]), name=v.stem))
    if not pairs:
        raise ValueError(f"{path}: manifest lists no tracks")
    return pairs


def augment_pair(pool: list[TrackPair], rng: np.random.Generator, length: int | None = None,
                 gain_range=(0.25, 1.25)) -> TrackPair:
    """Voice and accompaniment from independently drawn tracks, each gained and circularly shifted.

    Draw order is fixed (voice track, accompaniment track, voice gain,
    accompaniment gain, voice shift, accompaniment shift) so a given generator
    state always yields the same pair.
    """
    if not pool:
        raise ValueError("augmentation pool is empty")
    vi = int(rng.integers(len(pool)))
    ai = int(rng.integers(len(pool)))
    gv, ga = rng.uniform(gain_range[0], gain_range[1], size=2)
    v = pool[vi].voice.samples
    a = pool[ai].accompaniment.samples
    sv = int(rng.integers(len(v)))
    sa = int(rng.integers(len(a)))
    n = min(len(v), len(a)) if length is None else length
    if n > min(len(v), len(a)):
        raise ValueError(f"tracks shorter than the requested {n} samples")
    voice = gv * np.roll(v, -sv)[:n]
    acc = ga * np.roll(a, -sa)[:n]
    return TrackPair(AudioClip(voice), AudioClip(acc), name=f"{pool[vi].name}+{pool[ai].name}")


def _crop_pair(pair: TrackPair, length: int) -> TrackPair:
    return TrackPair(AudioClip(pair.voice.samples[:length]), AudioClip(pair.accompaniment.samples[:length]), pair.name)


def pair_features(pair: TrackPair, cfg: ModelConfig):
    """(mixture magnitude, voice magnitude, accompaniment magnitude) as float32, F x T_window."""
    mix = stft(pair.mixture())
    mags = [np.abs(mix.bins)] + [np.abs(stft(c).bins) for c in (pair.voice, pair.accompaniment)]
    T = cfg.window_frames
    return [m[:, :T].astype(np.float32) for m in mags]


def window_loss(params, cfg: ModelConfig, feats) -> Tensor:
    Y, X1, X2 = feats
    m1, m2 = unet_forward(pad_magnitude(Y, cfg), params, cfg)
    return l1_mask_loss((m1, m2), Y, (X1, X2))


def frozen_loss(params, cfg: ModelConfig, batch) -> float:
    """Mean window loss over precomputed features, no augmentation."""
    return float(np.mean([window_loss(params, cfg, f).item() for f in batch]))


def frozen_batch(pairs: list[TrackPair], cfg: ModelConfig) -> list:
    n = window_samples(cfg)
    return [pair_features(_crop_pair(p, n), cfg) for p in pairs]


# ---------------------------------------------------------------------------
# loop


def periodic_path(out_ckpt, step: int) -> Path:
    """``model.ckpt`` -> ``model.step000250.ckpt``."""
    out = Path(out_ckpt)
    return out.with_name(f"{out.stem}.step{step:06d}{out.suffix}")


def params_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def arrays_to_params(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def make_checkpoint(cfg, params, opt, rng, step, opts: TrainOptions) -> Checkpoint:
    extra = {"seed": opts.seed, **opts.extra}
    return Checkpoint(cfg, params_to_arrays(params), opt.state, rng.bit_generator.state, step, extra)


def split_pool(pairs: list[TrackPair], fraction: float):
    n_val = int(round(len(pairs) * fraction))
    if n_val and n_val >= len(pairs):
        n_val = len(pairs) - 1
    return pairs[:len(pairs) - n_val], pairs[len(pairs) - n_val:]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float]
    val_losses: dict[int, float]


def train(pairs: list[TrackPair], cfg: ModelConfig, opts: TrainOptions, out_ckpt=None,
          log_path=None, resume: Checkpoint | None = None) -> TrainResult:
    """Train on ``pairs``; one augmented window (or ``opts.batch`` of them) per step.

    Steps are numbered from 1.  Periodic checkpoints go next to ``out_ckpt``
    with the step in the name (see ``periodic_path``); the final state is
    written to ``out_ckpt`` itself.  Resuming restores parameters, Adam
    moments and the generator state, so the loss trace continues exactly.
    """
    if not pairs:
        raise ValueError("need at least one training pair")
    train_pool, val_pool = split_pool(pairs, opts.val_fraction)
    length = window_samples(cfg)
    val_batch = frozen_batch(val_pool, cfg) if val_pool else []

    if resume is None:
        params = init_params(cfg, opts.seed)
        opt = Adam(params, lr=opts.lr)
        rng = np.random.default_rng(opts.seed)
        start = 0
    else:
        if resume.config != cfg:
            raise ValueError("checkpoint config does not match the requested model config")
        params = arrays_to_params(resume.params)
        opt = Adam(params, state=resume.adam) if resume.adam is not None else Adam(params, lr=opts.lr)
        opt.state.lr = opts.lr
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start = resume.step

    losses: list[float] = []
    val_losses: dict[int, float] = {}
    writer = None
    fh = None
    if log_path is not None:
        append = resume is not None and Path(log_path).exists()
        fh = open(log_path, "a" if append else "w", newline="")
        writer = csv.writer(fh)
        if not append:
            writer.writerow(["step", "loss", "val_loss"])
    try:
        for step in range(start + 1, opts.steps + 1):
            total = None
            for _ in range(opts.batch):
                if opts.augment:
                    pair = augment_pair(train_pool, rng, length, (opts.gain_low, opts.gain_high))
                else:
                    pair = _crop_pair(train_pool[int(rng.integers(len(train_pool)))], length)
                loss = window_loss(params, cfg, pair_features(pair, cfg))
                total = loss if total is None else add(total, loss)
            if opts.batch > 1:
                total = mul(total, Tensor(1.0 / opts.batch))
            backward(total)
            opt.step()
            value = total.item()
            losses.append(value)
            val = ""
            if val_batch and opts.val_every and step % opts.val_every == 0:
                val_losses[step] = frozen_loss(params, cfg, val_batch)
                val = repr(val_losses[step])
            if writer:
                writer.writerow([step, repr(value), val])
            log.info("step %d loss %.6g%s", step, value, f" val {val}" if val else "")
            if out_ckpt and opts.checkpoint_every and step % opts.checkpoint_every == 0:
                save_checkpoint(periodic_path(out_ckpt, step), make_checkpoint(cfg, params, opt, rng, step, opts))
    finally:
        if fh:
            fh.close()
    ckpt = make_checkpoint(cfg, params, opt, rng, max(opts.steps, start), opts)
    if out_ckpt:
        save_checkpoint(out_ckpt, ckpt)
    return TrainResult(ckpt, losses, val_losses)


def train_from_manifest(manifest, cfg: ModelConfig, opts: TrainOptions, out_ckpt=None, log_path=None,
                        resume_path=None) -> TrainResult:
    pairs = read_manifest(manifest)
    resume = load_checkpoint(resume_path) if resume_path else None
    return train(pairs, cfg, opts, out_ckpt, log_path, resume)
