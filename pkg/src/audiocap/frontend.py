"""Waveform loading, log-mel features, and 16x16 patch extraction.

WAV input is strict: RIFF/WAVE, PCM16, mono, 16 kHz, little-endian. The
feature chain is a 25 ms / 10 ms Hann STFT (512-point FFT), 64 triangular
HTK-mel filters over 0-8000 Hz, and a natural log with a 1e-10 floor,
giving 100 frames per second. Patches tile the spectrogram into
non-overlapping 16x16 blocks, time-major with frequency ascending.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np


class UnsupportedFormat(ValueError):
    pass


class CorruptHeader(ValueError):
    pass


class InputTooShort(ValueError):
    pass


@dataclass
class FrontendConfig:
    sample_rate: int = 16000
    window: int = 400
    hop: int = 160
    n_fft: int = 512
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    patch: int = 16


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # (frames, n_mels)
    frame_rate: int = 100

    @property
    def frames(self) -> int:
        return self.values.shape[0]


@dataclass
class PatchSequence:
    patches: np.ndarray  # (count, 256)
    grid: tuple[int, int]  # (time_patches, freq_patches)

    @property
    def count(self) -> int:
        return self.patches.shape[0]


def load_wav(path) -> Waveform:
    """Read a PCM16 mono 16 kHz RIFF/WAVE file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            comp = f.getcomptype()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as e:
        raise CorruptHeader(f"{path}: {e}") from e
    if comp != "NONE" or width != 2:
        raise UnsupportedFormat(f"{path}: only uncompressed PCM16 is supported")
    if channels != 1:
        raise UnsupportedFormat(f"{path}: expected mono, got {channels} channels")
    if rate != 16000:
        raise UnsupportedFormat(f"{path}: expected 16 kHz, got {rate} (no resampling)")
    ints = np.frombuffer(raw, dtype="<i2")
    if ints.size == 0:
        raise UnsupportedFormat(f"{path}: empty audio payload")
    return Waveform(samples=ints.astype(np.float64) / 32768.0, sample_rate=rate)


def hann_window(n: int) -> np.ndarray:
    # periodic variant, the usual STFT analysis window
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """(n_mels, n_fft//2+1) triangular HTK-mel filters with unit peaks."""
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * (cfg.sample_rate / cfg.n_fft)
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max),
                                cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, ctr, hi = pts[m], pts[m + 1], pts[m + 2]
        rising = (bin_hz - lo) / (ctr - lo)
        falling = (hi - bin_hz) / (hi - ctr)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max),
                                cfg.n_mels + 2))
    return pts[1:-1]


def frame_count(n_samples: int, cfg: FrontendConfig) -> int:
    return 1 + (n_samples - cfg.window) // cfg.hop


def compute_log_mel(w: Waveform, cfg: FrontendConfig | None = None) -> LogMelSpectrogram:
    cfg = cfg or FrontendConfig()
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size < cfg.window:
        raise InputTooShort(f"need at least {cfg.window} samples, got {x.size}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window)[::cfg.hop]
    spec = np.fft.rfft(frames * hann_window(cfg.window), n=cfg.n_fft)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ mel_filterbank(cfg).T
    values = np.log(np.maximum(mel, cfg.log_floor))
    return LogMelSpectrogram(values=values,
                             frame_rate=cfg.sample_rate // cfg.hop)


def patchify(m: LogMelSpectrogram, cfg: FrontendConfig | None = None) -> PatchSequence:
    """Tile into 16x16 patches, right-padding time with the log floor."""
    cfg = cfg or FrontendConfig()
    p = cfg.patch
    values = m.values
    if values.shape[1] != cfg.n_mels:
        raise ValueError(f"expected {cfg.n_mels} mel bands, got {values.shape[1]}")
    freq_patches = cfg.n_mels // p
    time_patches = -(-values.shape[0] // p)  # ceil
    padded = np.full((time_patches * p, cfg.n_mels), np.log(cfg.log_floor))
    padded[:values.shape[0]] = values
    patches = np.empty((time_patches * freq_patches, p * p))
    for t in range(time_patches):
        tile_rows = padded[t * p:(t + 1) * p]
        for f in range(freq_patches):
            patches[t * freq_patches + f] = tile_rows[:, f * p:(f + 1) * p].reshape(-1)
    return PatchSequence(patches=patches, grid=(time_patches, freq_patches))


def unpatchify(p: PatchSequence, patch: int = 16) -> np.ndarray:
    """Inverse raster: rebuild the padded spectrogram from patches."""
    tp, fp = p.grid
    out = np.empty((tp * patch, fp * patch))
    for t in range(tp):
        for f in range(fp):
            tile = p.patches[t * fp + f].reshape(patch, patch)
            out[t * patch:(t + 1) * patch, f * patch:(f + 1) * patch] = tile
    return out


def wave_to_patches(w: Waveform, cfg: FrontendConfig | None = None) -> PatchSequence:
    return patchify(compute_log_mel(w, cfg), cfg)
