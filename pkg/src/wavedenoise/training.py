"""Losses, training-example sampling and the training loop."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, as_tensor, backward
from .data import Manifest, TrainingExample, extract_fragment, load_audio, mix_at_snr
from .model import ModelConfig, WavenetModel, forward, input_length, save_checkpoint

log = logging.getLogger(__name__)

LOSSES = ("energy_conserving", "l1")


def _check_lengths(*arrays) -> None:
    shapes = {tuple(np.shape(a.data if isinstance(a, Tensor) else a)) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"length mismatch: {sorted(shapes)}")
    if np.prod(next(iter(shapes))) < 1:
        raise ValueError("loss needs at least one sample")


def l1_loss(est, target) -> Tensor:
    """Mean absolute error over all samples of the target field(s)."""
    _check_lengths(est, target)
    return (as_tensor(target) - as_tensor(est)).abs().mean()


def energy_conserving_loss(est_speech, target_speech, mixture) -> Tensor:
    """``mean|s - s_hat| + mean|b - b_hat|`` with ``b = m - s`` and ``b_hat = m - s_hat``."""
    _check_lengths(est_speech, target_speech, mixture)
    est, s, m = as_tensor(est_speech), as_tensor(target_speech), as_tensor(mixture)
    noise = m - s
    noise_est = m - est
    return (s - est).abs().mean() + (noise - noise_est).abs().mean()


@dataclass
class TrainConfig:
    loss: str = "energy_conserving"
    noise_only_prob: float = 0.0
    condition_zero_prob: float = 1.0 / 29.0
    batch_size: int = 4
    steps: int = 1000
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        for name in ("noise_only_prob", "condition_zero_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.steps < 1 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("steps, batch_size and workers must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_training_example(manifest: Manifest, config: TrainConfig, model_config: ModelConfig,
                            rng: np.random.Generator) -> TrainingExample:
    """Draw one aligned training example; fully determined by ``rng``."""
    rows = manifest.split_rows("train") or manifest.rows
    if not rows:
        raise ValueError("manifest has no rows")
    noise_only = rng.random() < config.noise_only_prob
    row = rows[int(rng.integers(len(rows)))]
    speech = load_audio(row.speech_path)
    noise = load_audio(row.noise_path)
    mixture, scaled_noise = mix_at_snr(speech, noise, row.snr_db, rng=rng)
    if noise_only:
        mixture, speech_samples = scaled_noise.samples, np.zeros(len(speech))
    else:
        mixture, speech_samples = mixture.samples, speech.samples
    length = input_length(model_config)
    offset = int(rng.integers(0, max(0, len(speech_samples) - length) + 1))
    example = extract_fragment(mixture, speech_samples, offset, model_config)
    example.condition = 0 if rng.random() < config.condition_zero_prob else row.speaker_id
    return example


def example_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per example index, so worker scheduling cannot matter."""
    return np.random.default_rng([seed, index])


def compute_loss(model: WavenetModel, batch: list[TrainingExample], loss: str) -> Tensor:
    inputs = np.stack([ex.input for ex in batch])[:, None, :]
    est = forward(model, inputs, [ex.condition for ex in batch])
    speech = np.stack([ex.target_speech for ex in batch])[:, None, :]
    if loss == "l1":
        return l1_loss(est, speech)
    mixture = np.stack([ex.target_mixture for ex in batch])[:, None, :]
    return energy_conserving_loss(est, speech, mixture)


@dataclass
class TrainResult:
    checkpoint_path: Path | None
    losses: list[float] = field(default_factory=list)


def train(model: WavenetModel, manifest: Manifest, config: TrainConfig,
          checkpoint_path=None, trace_path=None) -> TrainResult:
    """Run ``config.steps`` Adam steps on batches sampled from ``manifest``.

    The loss of every step is appended to ``trace_path`` (CSV ``step,loss``)
    and the model is written to ``checkpoint_path`` every
    ``checkpoint_every`` steps and at the end.
    """
    state = AdamState.for_params(model.params, lr=config.lr, beta1=config.beta1,
                                 beta2=config.beta2, eps=config.eps)
    checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
    trace = open(trace_path, "w", encoding="utf-8") if trace_path else None
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    result = TrainResult(checkpoint_path)

    def draw(index: int) -> TrainingExample:
        return sample_training_example(manifest, config, model.config, example_rng(config.seed, index))

    try:
        if trace:
            trace.write("step,loss\n")
        for step in range(config.steps):
            indices = range(step * config.batch_size, (step + 1) * config.batch_size)
            batch = list(pool.map(draw, indices)) if pool else [draw(i) for i in indices]
            model.zero_grad()
            loss = compute_loss(model, batch, config.loss)
            backward(loss)
            adam_step(model.state(), {n: p.grad for n, p in model.params.items()}, state)
            value = loss.item()
            result.losses.append(value)
            if trace:
                trace.write(f"{step},{value!r}\n")
                trace.flush()
            if step % 100 == 0:
                log.info("step %d loss %.6f", step, value)
            if checkpoint_path and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, checkpoint_path)
        if checkpoint_path:
            save_checkpoint(model, checkpoint_path)
    finally:
        if trace:
            trace.close()
        if pool:
            pool.shutdown()
    return result
