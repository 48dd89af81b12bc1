"""Deterministic synthetic voice/accompaniment pairs.

Accompaniment is one rendered pattern (plucked harmonic chord plus noise
clicks) tiled to the track length, so it repeats exactly at the sample level.
Voice is a sequence of gliding, vibrato-modulated harmonic notes with random
timing, which does not repeat at the accompaniment period.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, save_wav

MAX_VOICE_LAG_CORR = 0.3
VOICE_RMS = 0.1


class SynthSpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    duration_s: float = 4.096
    pattern_period_s: float = 0.512
    chord_tones: tuple[float, ...] = (196.0, 246.94, 293.66)
    harmonics: int = 4
    click_rate: float = 7.8125  # clicks per second; 4 per 0.512 s pattern
    voice_onset_rate: float = 3.0  # notes per second
    voice_pitch_range: tuple[float, float] = (300.0, 900.0)
    transpose: int = 5  # random transposition of the chord, +- semitones
    sample_rate: int = 16000

    def validate(self):
        sr = self.sample_rate
        period = self.pattern_period_s * sr
        if abs(period - round(period)) > 1e-6 or round(period) < 1:
            raise SynthSpecError(f"pattern period {self.pattern_period_s}s is not a whole number of samples")
        total = self.duration_s * sr
        if abs(total - round(total)) > 1e-6 or round(total) % round(period):
            raise SynthSpecError("pattern period must divide the duration exactly")
        nyq = sr / 2
        top = max(self.chord_tones) * self.harmonics * 2 ** (self.transpose / 12)
        if top >= nyq:
            raise SynthSpecError(f"chord harmonic at {top:.1f} Hz exceeds Nyquist ({nyq} Hz)")
        if self.voice_pitch_range[1] * 1.1 * 5 >= nyq:
            raise SynthSpecError("voice harmonics exceed Nyquist")

    @property
    def period_samples(self) -> int:
        return int(round(self.pattern_period_s * self.sample_rate))

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def gen_accompaniment(spec: SynthSpec, seed) -> AudioClip:
    spec.validate()
    rng = _rng(seed)
    sr, P = spec.sample_rate, spec.period_samples
    t = np.arange(P) / sr
    shift = 2 ** (rng.integers(-spec.transpose, spec.transpose + 1) / 12)
    pattern = np.zeros(P)
    # two chord plucks per pattern with exponential decay
    for start in (0, P // 2):
        env = np.zeros(P)
        n = P - start
        env[start:] = np.exp(-np.arange(n) / sr * rng.uniform(4.0, 8.0))
        for f0 in spec.chord_tones:
            f0 = f0 * shift
            for h in range(1, spec.harmonics + 1):
                phase = rng.uniform(0, 2 * np.pi)
                pattern += env * np.sin(2 * np.pi * f0 * h * t + phase) / h ** 1.5
    clicks = int(round(spec.click_rate * spec.pattern_period_s))
    click_len = int(0.015 * sr)
    decay = np.exp(-np.arange(click_len) / (0.003 * sr))
    for k in range(clicks):
        pos = k * P // max(clicks, 1)
        burst = rng.standard_normal(click_len) * decay * (1.5 if k % 2 == 0 else 0.8)
        end = min(P, pos + click_len)
        pattern[pos:end] += burst[:end - pos]
    pattern *= 0.45 / np.max(np.abs(pattern))
    return AudioClip(np.tile(pattern, spec.n_samples // P), sr)


def lag_correlation(x: np.ndarray, lag: int) -> float:
    """Normalised correlation between x[n] and x[n + lag]."""
    a, b = x[:-lag], x[lag:]
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return float(np.dot(a, b) / den) if den > 0 else 0.0


def _render_voice(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    sr, n = spec.sample_rate, spec.n_samples
    out = np.zeros(n)
    lo, hi = np.log(spec.voice_pitch_range[0]), np.log(spec.voice_pitch_range[1])
    pos = int(rng.uniform(0, 0.3) * sr)
    while pos < n:
        dur = int(rng.uniform(0.6, 1.6) / spec.voice_onset_rate * sr)
        dur = min(dur, n - pos)
        if dur < int(0.05 * sr):
            break
        tt = np.arange(dur) / sr
        f_start, f_end = np.exp(rng.uniform(lo, hi, size=2))
        glide = f_start * (f_end / f_start) ** (tt / tt[-1] if dur > 1 else 0)
        vib = 1 + rng.uniform(0.01, 0.03) * np.sin(2 * np.pi * rng.uniform(4.5, 6.5) * tt)
        inst = glide * vib
        phase = 2 * np.pi * np.cumsum(inst) / sr
        formant = rng.uniform(0.3, 1.0, size=5)
        note = sum(formant[h - 1] * np.sin(h * phase) / h for h in range(1, 6))
        attack = min(int(0.04 * sr), dur // 3)
        release = min(int(0.08 * sr), dur // 3)
        env = np.ones(dur) * rng.uniform(0.5, 1.0)
        if attack:
            env[:attack] *= np.linspace(0, 1, attack)
        if release:
            env[-release:] *= np.linspace(1, 0, release)
        out[pos:pos + dur] += env * note
        pos += dur + int(rng.uniform(0.02, 0.5) / spec.voice_onset_rate * sr)
    return out


def gen_voice(spec: SynthSpec, seed, max_tries: int = 20) -> AudioClip:
    """Normalised to RMS 0.1; re-drawn until its correlation at the pattern lag is < 0.3."""
    spec.validate()
    rng = _rng(seed)
    for _ in range(max_tries):
        x = _render_voice(spec, rng)
        rms = np.sqrt(np.mean(x * x))
        if rms == 0:
            continue
        x *= VOICE_RMS / rms
        peak = np.max(np.abs(x))
        if peak > 0.95:
            x *= 0.95 / peak
        if abs(lag_correlation(x, spec.period_samples)) < MAX_VOICE_LAG_CORR:
            return AudioClip(x, spec.sample_rate)
    raise RuntimeError("could not draw a voice that is aperiodic at the accompaniment lag")


def track_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def _child(seed_seq: np.random.SeedSequence, k: int) -> np.random.SeedSequence:
    # explicit spawn keys: SeedSequence.spawn() is stateful and would break repeat calls
    return np.random.SeedSequence(seed_seq.entropy, spawn_key=seed_seq.spawn_key + (k,))


def gen_pair(spec: SynthSpec, seed_seq: np.random.SeedSequence) -> tuple[AudioClip, AudioClip]:
    return gen_voice(spec, _child(seed_seq, 0)), gen_accompaniment(spec, _child(seed_seq, 1))


def gen_dataset(n_tracks: int, spec: SynthSpec, out_dir, seed: int) -> Path:
    """Write ``n_tracks`` float32 WAV pairs plus a tab-separated manifest.

    Manifest paths are relative to the manifest's directory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, ss in enumerate(track_seeds(seed, n_tracks)):
        voice, acc = gen_pair(spec, ss)
        vname, aname = f"voice_{i:03d}.wav", f"accomp_{i:03d}.wav"
        save_wav(out / vname, voice)
        save_wav(out / aname, acc)
        lines.append(f"{vname}\t{aname}\n")
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(lines))
    return manifest
