"""Whole-track separation with overlapping windows and mask averaging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import WINDOW, AudioClip, combine, istft, split_mag_phase, stft
from .checkpoint import Checkpoint
from .model import apply_masks, predict_masks
from .train import arrays_to_params


class UnsupportedOperationError(RuntimeError):
    pass


@dataclass
class SeparationResult:
    voice: AudioClip
    accompaniment: AudioClip
    attention: dict = field(default_factory=dict)  # subnet name -> beta for the dumped window


def window_starts(n_frames: int, window: int) -> list[int]:
    """Window offsets at stride window/4; the last window may run past the end."""
    stride = max(1, window // 4)
    starts = [0]
    while starts[-1] + window < n_frames:
        starts.append(starts[-1] + stride)
    return starts


def overlap_average(mag: np.ndarray, window: int, predict, collect=None):
    """Average per-window mask predictions over every frame.

    ``predict`` maps an (F, window) magnitude slice to two masks of the same
    shape.  Frames past the end of ``mag`` are zero-padded for prediction and
    discarded afterwards.  ``collect(index, start)`` is called before each
    prediction.
    """
    F, T = mag.shape
    starts = window_starts(T, window)
    padded = np.zeros((F, starts[-1] + window), dtype=mag.dtype)
    padded[:, :T] = mag
    sums = [np.zeros((F, T)), np.zeros((F, T))]
    counts = np.zeros(T)
    for i, s in enumerate(starts):
        if collect is not None:
            collect(i, s)
        masks = predict(padded[:, s:s + window])
        n = min(window, T - s)
        for acc, m in zip(sums, masks):
            acc[:, s:s + n] += m[:, :n]
        counts[s:s + n] += 1
    return sums[0] / counts, sums[1] / counts, counts


def _model(checkpoint: Checkpoint):
    return checkpoint.config, arrays_to_params(checkpoint.params)


def separate_track(clip: AudioClip, checkpoint: Checkpoint, dump_window: int | None = None) -> SeparationResult:
    """Separate ``clip`` into voice and accompaniment.

    With ``dump_window`` set, the attention maps of that window are returned
    in ``SeparationResult.attention``.
    """
    cfg, params = _model(checkpoint)
    if clip.sample_rate != 16000:
        raise ValueError(f"model expects 16 kHz audio, got {clip.sample_rate} Hz")
    n = len(clip)
    x = clip.samples
    if n < WINDOW:
        x = np.concatenate([x, np.zeros(WINDOW - n)])
    mix = split_mag_phase(stft(AudioClip(x, clip.sample_rate)))
    if mix.magnitude.shape[0] != cfg.freq_bins:
        raise ValueError(f"checkpoint expects {cfg.freq_bins} bins, audio gives {mix.magnitude.shape[0]}")
    mag = mix.magnitude.astype(np.float32)
    maps: dict = {}
    current = {"window": -1}

    def collect(i, s):
        current["window"] = i

    def predict(window_mag):
        sink = maps if current["window"] == dump_window else None
        return predict_masks(window_mag, params, cfg, sink)

    m1, m2, _ = overlap_average(mag, cfg.window_frames, predict, collect)
    if dump_window is not None and not maps and cfg.active_attn_blocks:
        raise IndexError(f"window index {dump_window} out of range")
    v, a = apply_masks((m1, m2), mix)
    voice = istft(combine(v.magnitude, v.phase, v), length=n)
    acc = istft(combine(a.magnitude, a.phase, a), length=n)
    return SeparationResult(voice, acc, maps)


def attention_maps(clip: AudioClip, checkpoint: Checkpoint, window: int) -> dict[str, np.ndarray]:
    cfg = checkpoint.config
    if not cfg.active_attn_blocks:
        raise UnsupportedOperationError("checkpoint has no attention subnets")
    return separate_track(clip, checkpoint, dump_window=window).attention


def dump_attention(clip: AudioClip, checkpoint: Checkpoint, window: int, subnet: int, path) -> np.ndarray:
    """Write one attention matrix as CSV (rows are query segments, 9 significant digits).

    ``subnet`` indexes the model's attention subnets in block order, from 0.
    """
    cfg = checkpoint.config
    if not cfg.active_attn_blocks:
        raise UnsupportedOperationError("checkpoint has no attention subnets")
    blocks = cfg.active_attn_blocks
    if not 0 <= subnet < len(blocks):
        raise IndexError(f"subnet index {subnet} out of range 0..{len(blocks) - 1}")
    beta = attention_maps(clip, checkpoint, window)[f"attn{blocks[subnet]}"]
    np.savetxt(path, beta, fmt="%.9g", delimiter=",")
    return beta


def periodic_attention_ratio(beta: np.ndarray, period: int, include_zero: bool = True) -> float:
    """Mean attention weight on lags that are multiples of ``period``, relative to uniform 1/T."""
    T = beta.shape[0]
    lag = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    sel = lag % period == 0
    if not include_zero:
        sel &= lag > 0
    if not sel.any():
        return float("nan")
    return float(beta[sel].mean() * T)
