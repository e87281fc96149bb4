"""Objective quality metrics and the evaluation harness."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Manifest, load_audio, mix_at_snr
from .dsp import AudioBuffer

SI_SDR_CAP = 100.0
SEG_SNR_RANGE = (-10.0, 35.0)

REPORT_FIELDS = ("clip_id", "system_id", "snr_db", "si_sdr_db", "seg_snr_db",
                 "si_sdr_improvement_db", "seg_snr_improvement_db")


def _vectors(est, ref) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(getattr(est, "samples", est), dtype=np.float64).reshape(-1)
    ref = np.asarray(getattr(ref, "samples", ref), dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape[0]} vs {ref.shape[0]}")
    return est, ref


def si_sdr(est, ref, cap: float = SI_SDR_CAP) -> float:
    """Scale-invariant SDR in dB, clamped to ``[-cap, cap]``."""
    est, ref = _vectors(est, ref)
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise ValueError("si_sdr undefined for an all-zero reference")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    error = est - target
    num, den = float(np.dot(target, target)), float(np.dot(error, error))
    if num == 0.0:
        return -cap
    if den == 0.0:
        return cap
    return float(np.clip(10.0 * math.log10(num / den), -cap, cap))


def seg_snr(est, ref, frame: int = 256, clamp=SEG_SNR_RANGE) -> float:
    """Mean of per-frame SNRs (non-overlapping frames, clamped); silent reference frames skipped."""
    est, ref = _vectors(est, ref)
    count = ref.shape[0] // frame
    if count < 1:
        raise ValueError(f"signal shorter than one frame of {frame}")
    r = ref[:count * frame].reshape(count, frame)
    e = est[:count * frame].reshape(count, frame)
    lo, hi = clamp
    values = []
    for rf, ef in zip(r, e):
        signal = float(np.dot(rf, rf))
        if signal == 0.0:
            continue
        diff = rf - ef
        noise = float(np.dot(diff, diff))
        values.append(hi if noise == 0.0 else min(max(10.0 * math.log10(signal / noise), lo), hi))
    if not values:
        raise ValueError("all reference frames are silent")
    return float(np.mean(values))


@dataclass
class EvalRow:
    clip_id: str
    system_id: str
    snr_db: float
    si_sdr_db: float
    seg_snr_db: float
    si_sdr_improvement_db: float
    seg_snr_improvement_db: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def aggregates(self) -> dict[tuple[str, float], dict[str, float]]:
        """Per (system, SNR condition) means of every metric column."""
        groups: dict[tuple[str, float], list[EvalRow]] = defaultdict(list)
        for row in self.rows:
            groups[(row.system_id, row.snr_db)].append(row)
        metrics = REPORT_FIELDS[3:]
        return {key: {m: float(np.mean([getattr(r, m) for r in rows])) for m in metrics}
                for key, rows in sorted(groups.items())}

    def mean(self, system_id: str, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.rows if r.system_id == system_id]))

    def write(self, path) -> Path:
        """CSV rows followed by ``#``-prefixed aggregate lines."""
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(row).items()})
            for (system, snr), values in self.aggregates().items():
                cells = ",".join(f"{k}={v!r}" for k, v in values.items())
                fh.write(f"# mean,{system},{snr!r},{cells}\n")
        return path

    @classmethod
    def read(cls, path) -> "EvalReport":
        with open(path, newline="", encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        rows = []
        for rec in csv.DictReader(lines):
            rows.append(EvalRow(rec["clip_id"], rec["system_id"],
                                *(float(rec[k]) for k in REPORT_FIELDS[2:])))
        return cls(rows)


System = Callable[[AudioBuffer], AudioBuffer]


def evaluate(systems: dict[str, System], manifest: Manifest, out_path=None,
             split: str | None = "test") -> EvalReport:
    """Mix each manifest row, run every system on it and score against the clean speech.

    Noise crop offsets come from a generator seeded with (manifest seed, row
    index), so repeated evaluations see identical mixtures.
    """
    rows = manifest.split_rows(split) if split else manifest.rows
    if split and not rows:
        rows = manifest.rows
    report = EvalReport()
    for index, row in enumerate(rows):
        speech = load_audio(row.speech_path)
        noise = load_audio(row.noise_path)
        mixture, _ = mix_at_snr(speech, noise, row.snr_db, rng=np.random.default_rng([manifest.seed, index]))
        base_si = si_sdr(mixture, speech)
        base_seg = seg_snr(mixture, speech)
        clip_id = f"{index}:{Path(row.speech_path).stem}"
        for name, system in systems.items():
            out = system(mixture)
            if len(out) != len(mixture):
                raise ValueError(f"system {name!r} changed the signal length")
            si, seg = si_sdr(out, speech), seg_snr(out, speech)
            report.rows.append(EvalRow(clip_id, name, row.snr_db, si, seg, si - base_si, seg - base_seg))
    if out_path is not None:
        report.write(out_path)
    return report
