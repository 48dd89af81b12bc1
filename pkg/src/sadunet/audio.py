"""WAV I/O and the STFT front end.

The transform is not centred: frame ``t`` covers samples
``[t*hop, t*hop + window)`` and the tail is zero-padded to complete the last
frame.  Synthesis is weighted overlap-add with the same Hann window,
normalised by the summed squared window, so interior samples reconstruct
exactly.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, ShapeError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WINDOW = 1024
HOP = 256

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavFormatError(ValueError):
    """Malformed or unsupported WAV data."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size


@dataclass
class Spectrogram:
    bins: np.ndarray  # complex, (freq, frames)
    window_size: int = WINDOW
    hop: int = HOP
    length: int | None = None  # original sample count, used to trim resynthesis
    sample_rate: int = SAMPLE_RATE

    @property
    def shape(self):
        return self.bins.shape


@dataclass
class MagPhase:
    magnitude: np.ndarray
    phase: np.ndarray
    window_size: int = WINDOW
    hop: int = HOP
    length: int | None = None
    sample_rate: int = SAMPLE_RATE


# ---------------------------------------------------------------------------
# WAV


def resample_linear(samples: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    n_out = max(1, int(round(samples.size * rate_out / rate_in)))
    t = np.arange(n_out) * (rate_in / rate_out)
    return np.interp(t, np.arange(samples.size), samples)


def load_wav(path, target_rate: int | None = SAMPLE_RATE) -> AudioClip:
    """Read PCM16 or float32 WAV, averaging channels to mono.

    Input at another rate is linearly resampled to ``target_rate`` (pass
    ``None`` to keep the file's rate).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError("missing RIFF/WAVE header", 0)
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack_from("<I", raw, pos + 4)[0]
        body = pos + 8
        if body + size > len(raw):
            if cid == b"data":
                size = len(raw) - body  # tolerate streaming writers that leave size unset
            else:
                raise WavFormatError(f"chunk {cid!r} overruns file", pos)
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError("fmt chunk too short", pos)
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", raw, body)
            if tag == _EXTENSIBLE and size >= 40:
                tag = struct.unpack_from("<H", raw, body + 24)[0]
            fmt = (tag, channels, rate, align, bits, pos)
        elif cid == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavFormatError("no fmt chunk", 12)
    if data is None:
        raise WavFormatError("no data chunk", 12)
    tag, channels, rate, align, bits, fpos = fmt
    if channels < 1 or rate == 0:
        raise WavFormatError("invalid channel count or sample rate", fpos)
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise WavFormatError(f"unsupported codec (format tag {tag}, {bits} bits)", fpos)
    start, size = data
    frame_bytes = dtype.itemsize * channels
    n = size // frame_bytes
    arr = np.frombuffer(raw, dtype=dtype, count=n * channels, offset=start).astype(np.float64)
    samples = arr.reshape(n, channels).mean(axis=1) * scale
    if target_rate is not None and rate != target_rate:
        log.warning("resampling %s from %d Hz to %d Hz (linear interpolation)", path, rate, target_rate)
        samples = resample_linear(samples, rate, target_rate)
        rate = target_rate
    return AudioClip(samples, rate)


def save_wav(path, clip: AudioClip, fmt: str = "float32") -> None:
    """Write a mono WAV; ``fmt`` is "float32" or "pcm16"."""
    x = clip.samples
    if fmt == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _IEEE_FLOAT, 32
    elif fmt == "pcm16":
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload = q.tobytes()
        tag, bits = _PCM, 16
    else:
        raise ValueError(f"unknown sample format {fmt!r}")
    block = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, 1, clip.sample_rate,
                                    clip.sample_rate * block, block, bits)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# STFT


def hann(n: int) -> np.ndarray:
    """Periodic Hann window; constant overlap-add at hop n/4."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def num_frames(length: int, window: int = WINDOW, hop: int = HOP) -> int:
    if length < window:
        raise ContractError(f"signal of {length} samples is shorter than one window ({window})")
    return 1 + -(-(length - window) // hop)


def stft(clip, window_size: int = WINDOW, hop: int = HOP) -> Spectrogram:
    if isinstance(clip, AudioClip):
        x, rate = clip.samples, clip.sample_rate
    else:
        x, rate = np.asarray(clip, dtype=np.float64), SAMPLE_RATE
    T = num_frames(x.size, window_size, hop)
    padded = np.zeros(window_size + (T - 1) * hop)
    padded[:x.size] = x
    frames = sliding_window_view(padded, window_size)[::hop] * hann(window_size)
    bins = np.fft.rfft(frames, axis=1).T
    return Spectrogram(np.ascontiguousarray(bins), window_size, hop, x.size, rate)


NORM_FLOOR = 0.1  # fraction of the peak window energy


def istft(spec: Spectrogram, length: int | None = None) -> AudioClip:
    """Overlap-add resynthesis; samples with zero window energy come out as 0.

    The window-energy normaliser is floored at ``NORM_FLOOR`` times its peak,
    which only affects samples within half a window of either end.
    """
    F, T = spec.bins.shape
    n = spec.window_size
    if F != n // 2 + 1:
        raise ShapeError(f"spectrogram has {F} bins, expected {n // 2 + 1} for window {n}")
    w = hann(n)
    frames = np.fft.irfft(spec.bins.T, n=n, axis=1) * w
    total = n + (T - 1) * spec.hop
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = w * w
    for t in range(T):
        s = t * spec.hop
        out[s:s + n] += frames[t]
        norm[s:s + n] += w2
    # Near the track ends only a window tail covers each sample; dividing by
    # its tiny energy would amplify any inconsistency in a modified spectrogram.
    # Flooring the normaliser leaves interior samples exact and bounds the gain.
    floor = NORM_FLOOR * norm.max()
    nz = norm > 1e-10
    out[nz] /= np.maximum(norm[nz], floor)
    out[~nz] = 0.0
    length = length if length is not None else spec.length
    if length is not None:
        if length > total:
            out = np.concatenate([out, np.zeros(length - total)])
        out = out[:length]
    return AudioClip(out, spec.sample_rate)


def split_mag_phase(spec: Spectrogram) -> MagPhase:
    mag = np.abs(spec.bins)
    phase = np.angle(spec.bins)
    phase[mag == 0] = 0.0
    phase[phase <= -np.pi] = np.pi
    return MagPhase(mag, phase, spec.window_size, spec.hop, spec.length, spec.sample_rate)


def combine(magnitude: np.ndarray, phase: np.ndarray, like: MagPhase | Spectrogram | None = None) -> Spectrogram:
    magnitude = np.asarray(magnitude, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if magnitude.shape != phase.shape:
        raise ShapeError(f"magnitude {magnitude.shape} and phase {phase.shape} differ")
    if np.any(magnitude < 0):
        raise ContractError("magnitudes must be nonnegative")
    bins = magnitude * np.exp(1j * phase)
    if like is None:
        return Spectrogram(bins)
    return Spectrogram(bins, like.window_size, like.hop, like.length, like.sample_rate)
