"""Noisy-speech dataset construction: SNR mixing, manifests, fragments.

Also holds the synthetic speech surrogate (harmonic tones under random
amplitude envelopes) used for desk-scale experiments.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, AudioBuffer, read_wav, write_wav
from .model import ModelConfig, input_length, target_offset

TRAIN_SNRS = (0.0, 5.0, 10.0, 15.0)
TEST_SNRS = (2.5, 7.5, 12.5, 17.5)
SPLITS = ("train", "test")


def compute_rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("rms of an empty signal is undefined")
    return math.sqrt(float(np.mean(x * x)))


def mix_at_snr(speech: AudioBuffer, noise: AudioBuffer, snr_db: float, offset: int | None = None,
               rng: np.random.Generator | None = None) -> tuple[AudioBuffer, AudioBuffer]:
    """Scale a crop of ``noise`` so that speech-to-noise ratio is ``snr_db``.

    Returns ``(mixture, scaled_noise)`` with ``mixture = speech + scaled_noise``.
    The noise crop starts at ``offset``; when omitted it is drawn uniformly
    from ``rng`` (a fixed-seed generator if none is given).
    """
    if speech.sample_rate != noise.sample_rate:
        raise ValueError("speech and noise sample rates differ")
    n = len(speech)
    slack = len(noise) - n
    if slack < 0:
        raise ValueError(f"noise is shorter than speech ({len(noise)} < {n})")
    if offset is None:
        rng = np.random.default_rng(0) if rng is None else rng
        offset = int(rng.integers(0, slack + 1))
    if not 0 <= offset <= slack:
        raise ValueError(f"noise offset {offset} outside [0, {slack}]")
    crop = noise.samples[offset:offset + n]
    speech_rms, noise_rms = compute_rms(speech.samples), compute_rms(crop)
    if speech_rms == 0.0 or noise_rms == 0.0:
        raise ValueError("SNR undefined for silent speech or noise")
    gain = speech_rms / (noise_rms * 10.0 ** (snr_db / 20.0))
    scaled = gain * crop
    mixture = speech.samples + scaled
    return AudioBuffer(mixture, speech.sample_rate), AudioBuffer(scaled, speech.sample_rate)


# -- manifests --------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    speech_path: str
    noise_path: str
    snr_db: float
    speaker_id: int = 0
    split: str = "train"


@dataclass
class Manifest:
    rows: list[ManifestRow]
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    snr_list: tuple = ()
    split: str = "train"

    def __len__(self) -> int:
        return len(self.rows)

    def header(self) -> dict:
        return {"sample_rate": self.sample_rate, "seed": self.seed,
                "snr_list": list(self.snr_list), "split": self.split}

    def save(self, path) -> Path:
        """One JSON object per line: the header, then one line per row."""
        path = Path(path)
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(asdict(row), sort_keys=True) for row in self.rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("sample_rate") != SAMPLE_RATE:
            raise ValueError(f"{path}: manifest sample rate must be {SAMPLE_RATE}")
        rows = [ManifestRow(**json.loads(ln)) for ln in lines[1:]]
        return cls(rows, header.get("seed", 0), header["sample_rate"],
                   tuple(header.get("snr_list", ())), header.get("split", "train"))

    def split_rows(self, split: str) -> list[ManifestRow]:
        return [row for row in self.rows if row.split == split]


def speaker_key(path) -> str:
    """Speaker part of a file name such as ``p232_001.wav``."""
    return Path(path).stem.split("_")[0]


def _wav_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValueError(f"{directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise ValueError(f"{directory} contains no .wav files")
    return files


def build_manifest(speech_dir, noise_dir, snr_list, split: str = "train",
                   speaker_map: dict | None = None, seed: int = 0) -> Manifest:
    """Pair every speech file with a seeded-uniform (noise file, SNR) draw.

    ``speaker_map`` maps speaker keys (file-name prefix before ``_``) to ids;
    without one, keys get ids 1, 2, ... in sorted order. Unmapped speakers
    get id 0.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    snr_list = tuple(float(s) for s in snr_list)
    if not snr_list:
        raise ValueError("snr_list must not be empty")
    speech_files = _wav_files(speech_dir)
    noise_files = _wav_files(noise_dir)
    for f in speech_files + noise_files:
        read_wav(f)
    if speaker_map is None:
        keys = sorted({speaker_key(f) for f in speech_files})
        speaker_map = {k: i + 1 for i, k in enumerate(keys)}
    rng = np.random.default_rng(seed)
    rows = []
    for f in speech_files:
        noise = noise_files[int(rng.integers(len(noise_files)))]
        snr = snr_list[int(rng.integers(len(snr_list)))]
        rows.append(ManifestRow(str(f), str(noise), snr, int(speaker_map.get(speaker_key(f), 0)), split))
    return Manifest(rows, seed, SAMPLE_RATE, snr_list, split)


@functools.lru_cache(maxsize=4096)
def load_audio(path: str) -> AudioBuffer:
    """Cached :func:`read_wav`; buffers are read-only so sharing is safe."""
    return read_wav(path)


# -- fragments --------------------------------------------------------------

@dataclass
class TrainingExample:
    input: np.ndarray
    target_speech: np.ndarray
    target_mixture: np.ndarray
    condition: int = 0


def extract_fragment(mixture, speech, offset: int, model_config: ModelConfig,
                     tf: int | None = None) -> TrainingExample:
    """Cut an ``input_length`` window of the mixture and its aligned targets.

    Windows running past the clip end are zero-padded; clips shorter than the
    window are centred in it (padded on both sides) and ``offset`` is ignored.
    """
    tf = model_config.target_field if tf is None else tf
    length = input_length(model_config, tf)
    m = np.asarray(getattr(mixture, "samples", mixture), dtype=np.float64)
    s = np.asarray(getattr(speech, "samples", speech), dtype=np.float64)
    if m.shape != s.shape:
        raise ValueError("mixture and speech lengths differ")
    if offset < 0:
        raise ValueError("offset must be non-negative")
    if m.shape[0] < length:
        deficit = length - m.shape[0]
        left = deficit // 2
        m = np.pad(m, (left, deficit - left))
        s = np.pad(s, (left, deficit - left))
        offset = 0
    window_m = np.zeros(length)
    window_s = np.zeros(length)
    avail = max(0, min(length, m.shape[0] - offset))
    window_m[:avail] = m[offset:offset + avail]
    window_s[:avail] = s[offset:offset + avail]
    start = target_offset(model_config)
    return TrainingExample(window_m, window_s[start:start + tf].copy(),
                           window_m[start:start + tf].copy())


# -- synthetic surrogate corpus ---------------------------------------------

def harmonic_surrogate(num_samples: int, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE,
                       f0_range=(100.0, 250.0), lead_in: float = 0.0, peak: float = 0.5) -> np.ndarray:
    """Speech stand-in: three harmonics of a random f0, each under a smooth random envelope.

    ``lead_in`` seconds of silence precede the tones.
    """
    t = np.arange(num_samples) / sample_rate
    f0 = rng.uniform(*f0_range)
    # envelope knots every ~80 ms, linearly interpolated, never fully silent
    knots = max(2, int(num_samples / (0.08 * sample_rate)) + 2)
    knot_t = np.linspace(0.0, t[-1] if num_samples > 1 else 0.0, knots)
    out = np.zeros(num_samples)
    for harmonic in (1, 2, 3):
        env = np.interp(t, knot_t, rng.uniform(0.2, 1.0, knots))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out += env / harmonic * np.sin(2.0 * np.pi * harmonic * f0 * t + phase)
    silent = int(round(lead_in * sample_rate))
    if silent:
        ramp = np.clip((np.arange(num_samples) - silent) / (0.02 * sample_rate), 0.0, 1.0)
        out *= ramp
    return peak * out / max(np.max(np.abs(out)), 1e-12)


def write_surrogate_corpus(root, num_speech: int, num_noise: int = 2, duration: float = 1.0,
                           noise_duration: float | None = None, speakers: int = 4, seed: int = 0,
                           lead_in: float = 0.0) -> tuple[Path, Path]:
    """Write ``speech/`` (harmonic surrogate) and ``noise/`` (white noise) WAV folders."""
    root = Path(root)
    speech_dir, noise_dir = root / "speech", root / "noise"
    speech_dir.mkdir(parents=True, exist_ok=True)
    noise_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = int(round(duration * SAMPLE_RATE))
    for i in range(num_speech):
        x = harmonic_surrogate(n, rng, lead_in=lead_in)
        write_wav(AudioBuffer(x), speech_dir / f"s{i % speakers:02d}_{i:04d}.wav")
    n_noise = int(round((noise_duration or 2 * duration) * SAMPLE_RATE))
    for j in range(num_noise):
        noise = np.clip(rng.normal(0.0, 0.2, n_noise), -1.0, 1.0)
        write_wav(AudioBuffer(noise), noise_dir / f"white_{j:02d}.wav")
    return speech_dir, noise_dir
