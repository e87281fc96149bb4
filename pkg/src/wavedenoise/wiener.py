"""Wiener filtering with decision-directed a priori SNR estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import AudioBuffer, SpectralFrames, istft, stft

NOISE_FLOOR = 1e-12


@dataclass(frozen=True)
class WienerConfig:
    frame_len: int = 512
    hop: int = 256
    alpha: float = 0.98
    n_init_frames: int = 6
    gain_floor: float = 10 ** (-25 / 20)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.gain_floor <= 1.0:
            raise ValueError("gain_floor must lie in (0, 1]")
        if self.n_init_frames < 1:
            raise ValueError("n_init_frames must be at least 1")


def estimate_noise_psd(frames: SpectralFrames, n_init: int) -> np.ndarray:
    """Mean power per bin over the first ``n_init`` frames."""
    if frames.num_frames < n_init:
        raise ValueError(f"need {n_init} frames for the noise estimate, got {frames.num_frames}")
    head = frames.frames[:n_init]
    return np.mean(head.real ** 2 + head.imag ** 2, axis=0)


def decision_directed_step(prev_clean_power, current_power, noise_psd, alpha: float):
    """Return ``(xi, gamma)``: a priori and a posteriori SNR per bin."""
    noise_psd = np.maximum(np.asarray(noise_psd, dtype=np.float64), NOISE_FLOOR)
    gamma = np.asarray(current_power, dtype=np.float64) / noise_psd
    xi = alpha * np.asarray(prev_clean_power, dtype=np.float64) / noise_psd \
        + (1.0 - alpha) * np.maximum(gamma - 1.0, 0.0)
    return xi, gamma


def wiener_gain(xi, gain_floor: float = WienerConfig.gain_floor) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64)
    return np.maximum(xi / (1.0 + xi), gain_floor)


def wiener_gains(noisy: AudioBuffer, config: WienerConfig = WienerConfig()):
    """Run the recursion; returns the padded STFT and the gain of every frame/bin.

    The signal is padded by ``hop`` zeros in front and enough at the end that
    every input sample lies in two frames. The noise PSD is taken from the
    first ``n_init_frames`` frames of the unpadded input and then frozen.
    """
    x = noisy.samples
    n, hop, frame = len(x), config.hop, config.frame_len
    if n < config.n_init_frames * hop + frame:
        raise ValueError(f"input too short for Wiener filtering ({n} samples)")
    noise_psd = estimate_noise_psd(stft(x, frame, hop), config.n_init_frames)
    padded_len = frame + hop * -(-(n + 2 * hop - frame) // hop)
    padded = np.zeros(padded_len)
    padded[hop:hop + n] = x
    spec = stft(AudioBuffer(padded, noisy.sample_rate), frame, hop)
    gains = np.empty(spec.frames.shape)
    prev_clean = np.zeros(spec.frames.shape[1])
    for l, frame_bins in enumerate(spec.frames):
        power = frame_bins.real ** 2 + frame_bins.imag ** 2
        xi, _ = decision_directed_step(prev_clean, power, noise_psd, config.alpha)
        gains[l] = wiener_gain(xi, config.gain_floor)
        prev_clean = gains[l] ** 2 * power
    return spec, gains


def wiener_denoise(noisy: AudioBuffer, config: WienerConfig = WienerConfig()) -> AudioBuffer:
    """Apply the real-valued Wiener gain to each STFT bin; phase is untouched."""
    spec, gains = wiener_gains(noisy, config)
    out = istft(spec.with_frames(spec.frames * gains))
    return out.with_samples(out.samples[config.hop:config.hop + len(noisy)])
