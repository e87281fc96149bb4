"""Waveform containers, 16-bit WAV I/O, mu-law companding and STFT/ISTFT."""

from __future__ import annotations

import math
import warnings
import wave
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0


class WavError(ValueError):
    """Raised for WAV files this toolkit refuses to read."""


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform, normalized to full scale, with its sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


def read_wav(path) -> AudioBuffer:
    """Read a 16 kHz mono 16-bit PCM WAV file.

    Integer sample ``v`` maps to ``v / 32768``. Files with other rates, widths
    or channel counts are rejected rather than converted.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise WavError(f"{path}: unsupported sample format ({msg})") from exc
        raise WavError(f"{path}: not a wav file ({msg})") from exc
    except EOFError as exc:
        raise WavError(f"{path}: not a wav file (truncated header)") from exc
    if width != 2:
        raise WavError(f"{path}: unsupported bit depth {8 * width}")
    if channels != 1:
        raise WavError(f"{path}: unsupported channel count {channels}")
    if rate != SAMPLE_RATE:
        raise WavError(f"{path}: unsupported sample rate {rate} (expected {SAMPLE_RATE})")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / PCM_SCALE, rate)


def to_pcm16(samples) -> tuple[np.ndarray, int]:
    """Quantize to int16 codes; returns the codes and how many samples had |x| > 1."""
    x = np.asarray(samples, dtype=np.float64)
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    codes = np.clip(np.rint(x * PCM_SCALE), -32768, 32767).astype("<i2")
    return codes, clipped


def write_wav(buffer: AudioBuffer, path) -> int:
    """Write ``buffer`` as 16-bit mono PCM. Returns the number of clipped samples."""
    codes, clipped = to_pcm16(buffer.samples)
    if clipped:
        warnings.warn(f"{path}: {clipped} samples outside [-1, 1] were clipped", stacklevel=2)
    with open(path, "wb") as fh, wave.open(fh, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(buffer.sample_rate)
        wf.writeframes(codes.tobytes())
    return clipped


# -- mu-law -----------------------------------------------------------------

def mu_law_compand(x, mu: float = 255.0):
    """sign(x) * ln(1 + mu|x|) / ln(1 + mu), elementwise."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1.0):
        raise ValueError("mu-law input must lie in [-1, 1]")
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / math.log1p(mu)
    return y if y.ndim else float(y)


def mu_law_expand(y, mu: float = 255.0):
    """Inverse of :func:`mu_law_compand`."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    y = np.asarray(y, dtype=np.float64)
    x = np.sign(y) * np.expm1(np.abs(y) * math.log1p(mu)) / mu
    return x if x.ndim else float(x)


def quantize_8bit(y):
    """Map [-1, 1] uniformly onto codes 0..255."""
    y = np.asarray(y, dtype=np.float64)
    codes = np.clip(np.floor((y + 1.0) * 128.0), 0, 255).astype(np.int64)
    return codes if codes.ndim else int(codes)


def dequantize_8bit(codes):
    """Midrise decode: the center of each code's cell."""
    c = np.asarray(codes, dtype=np.float64)
    y = (2.0 * c + 1.0) / 256.0 - 1.0
    return y if y.ndim else float(y)


# -- STFT -------------------------------------------------------------------

def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (satisfies COLA at 50% overlap)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOWS = {"hann": hann_window}


@dataclass(frozen=True)
class SpectralFrames:
    """One-sided STFT, shape ``[num_frames, fft_len // 2 + 1]``."""

    frames: np.ndarray
    frame_len: int
    hop: int
    fft_len: int
    window: str = "hann"
    length: int = 0
    sample_rate: int = SAMPLE_RATE

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "SpectralFrames":
        return SpectralFrames(frames, self.frame_len, self.hop, self.fft_len,
                              self.window, self.length, self.sample_rate)


def _samples_of(buffer) -> tuple[np.ndarray, int]:
    if isinstance(buffer, AudioBuffer):
        return buffer.samples, buffer.sample_rate
    return np.asarray(buffer, dtype=np.float64).reshape(-1), SAMPLE_RATE


def stft(buffer, frame_len: int = 512, hop: int = 256, window: str = "hann") -> SpectralFrames:
    x, rate = _samples_of(buffer)
    if frame_len <= 0 or frame_len & (frame_len - 1):
        raise ValueError(f"frame_len must be a power of two, got {frame_len}")
    if not 0 < hop <= frame_len:
        raise ValueError("hop must satisfy 0 < hop <= frame_len")
    if window not in _WINDOWS:
        raise ValueError(f"unsupported window {window!r}")
    if x.shape[0] < frame_len:
        raise ValueError(f"buffer shorter than frame_len ({x.shape[0]} < {frame_len})")
    win = _WINDOWS[window](frame_len)
    segments = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop]
    frames = np.fft.rfft(segments * win, n=frame_len, axis=-1)
    return SpectralFrames(frames, frame_len, hop, frame_len, window, x.shape[0], rate)


def istft(frames: SpectralFrames) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`.

    Only the hann / 50%-overlap configuration is accepted. Output length is
    ``(num_frames - 1) * hop + frame_len``; samples covered by two frames are
    reconstructed exactly (up to rounding).
    """
    if frames.window != "hann" or 2 * frames.hop != frames.frame_len:
        raise ValueError("istft requires a hann window with hop == frame_len / 2")
    n, hop = frames.frame_len, frames.hop
    win = hann_window(n)
    segments = np.fft.irfft(frames.frames, n=frames.fft_len, axis=-1)[:, :n] * win
    count = segments.shape[0]
    out = np.zeros((count - 1) * hop + n)
    norm = np.zeros_like(out)
    for i in range(count):
        out[i * hop:i * hop + n] += segments[i]
        norm[i * hop:i * hop + n] += win * win
    nonzero = norm > 1e-12
    out[nonzero] /= norm[nonzero]
    out[~nonzero] = 0.0
    return AudioBuffer(out, frames.sample_rate)
