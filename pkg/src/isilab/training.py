"""Loss functions and training drivers for the message-passing detectors.

A training "epoch" consumes exactly one freshly simulated batch: draw
bits, transmit them at a uniformly sampled SNR, run inference, average
the binary cross-entropy over all readout iterations and apply one Adam
step.  Per-step generators are derived from (seed, step), so runs resume
bit-exactly from checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import neural
from .channel import build_channel_matrix, snr_to_sigma2, zero_pad
from .detectors import LLR_MAX
from .gnn import (DET, GraphRuntime, Schedule, bits_to_payload_layout,
                  detection_features, llr_tensor_to_batch)
from .metrics import bmi_estimate, mu_of_ia


def bce_loss(bits, probabilities):
    """Mean binary cross-entropy in bits (positive; clamped at 1e-12)."""
    c = np.asarray(bits, dtype=np.float64)
    q = np.clip(np.asarray(probabilities, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    if c.shape != q.shape:
        raise ValueError("bits and probabilities must have equal shapes")
    return float(-np.mean(c * np.log2(q) + (1.0 - c) * np.log2(1.0 - q)))


def multi_loss(per_iteration_losses):
    """Arithmetic mean of per-iteration losses."""
    losses = list(per_iteration_losses)
    if not losses:
        raise ValueError("multi_loss needs at least one iteration loss")
    return float(np.mean(losses))


def sample_prior_llrs(bits, mutual_information, rng):
    """Consistent Gaussian prior LLRs carrying the requested information.

    Mean (1-2c) * mu, variance 2 * mu, with mu from the inverse
    information mapping.  ``mutual_information`` = 1 returns saturated
    LLRs and a flag instead of infinities.
    """
    c = np.asarray(bits, dtype=np.float64)
    ia = float(mutual_information)
    if not (0.0 <= ia <= 1.0):
        raise ValueError("mutual information must lie in [0, 1]")
    if ia >= 1.0:
        return np.where(c == 0, LLR_MAX, -LLR_MAX), True
    mu = mu_of_ia(ia)
    llrs = (1.0 - 2.0 * c) * mu + np.sqrt(2.0 * mu) * rng.standard_normal(c.shape)
    return llrs, False


@dataclass
class TrainConfig:
    """One-batch-per-step training settings."""

    batch_size: int = 128
    steps: int = 20_000
    snr_range_db: tuple = (10.0, 14.0)
    learning_rate: float = 1e-4
    loss: str = "multi"  # multi | bce (final iteration only)
    seed: int = 0
    n_iterations: int = 8
    schedule: Schedule | None = None
    gaussian_priors: bool = False  # feedback-aware pretraining
    ia_range: tuple = (0.0, 1.0)
    log_every: int = 100

    def __post_init__(self):
        if self.snr_range_db[0] > self.snr_range_db[1]:
            raise ValueError("snr range must be ordered")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("counts must be positive")


PAPER_BUDGET = {
    "detection": dict(batch_size=256, steps=50_000, snr_range_db=(10.0, 14.0)),
    "jdd": dict(batch_size=256, steps=160_000, snr_range_db=(10.0, 13.0)),
}


def apply_paper_budget(config, kind="detection"):
    return replace(config, **PAPER_BUDGET[kind])


@dataclass
class TrainingContext:
    """Fixed system pieces one trainer run operates on."""

    model: object
    graph: object
    cir: object
    constellation: object
    pcm: object = None
    interleaver: object = None
    runtime: object = None
    channel_matrix: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.runtime is None:
            self.runtime = GraphRuntime(self.graph)
        n_sym = self.graph.meta["n_sym"] if "n_sym" in self.graph.meta else self.graph.num_vn
        if self.channel_matrix is None:
            self.channel_matrix = build_channel_matrix(self.cir, n_sym)

    @property
    def n_sym(self):
        return self.graph.meta.get("n_sym", self.graph.num_vn)

    @property
    def is_joint(self):
        return self.graph.kind == "joint"


def simulate_batch(context, batch_size, sigma2, rng):
    """Fresh random frames through the ISI channel.

    Returns (info_bits, payload_bits, observations); ``payload_bits`` are
    the bits riding on the detector VNs (interleaved code bits for joint
    graphs, the raw bits otherwise).
    """
    const = context.constellation
    n_sym = context.n_sym
    k = const.bits_per_symbol
    if context.is_joint or context.pcm is not None and context.interleaver is not None:
        if const.order != 2:
            raise ValueError("coded transmission is wired for binary signalling")
    if context.is_joint:
        K = context.pcm.dimension
        info = rng.integers(0, 2, size=(batch_size, K))
        code = np.stack([_encode_cached(context.pcm, u) for u in info])
        payload = np.stack([context.interleaver.interleave(c) for c in code])
    else:
        info = rng.integers(0, 2, size=(batch_size, n_sym * k))
        payload = info
    symbols = np.stack([const.modulate(b) for b in payload])
    padded = np.concatenate(
        [
            np.zeros((batch_size, context.cir.memory), dtype=np.complex128),
            symbols,
            np.zeros((batch_size, context.cir.memory), dtype=np.complex128),
        ],
        axis=1,
    )
    ys = padded @ context.channel_matrix.T
    if sigma2 > 0:
        n = ys.shape
        ys = ys + np.sqrt(sigma2 / 2.0) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return info, payload, ys


def _encode_cached(pcm, u):
    from .ldpc import encode

    return encode(pcm, u)


@dataclass
class StepMetrics:
    step: int
    loss: float
    bmi: float
    snr_db: float


def train_epoch(context, adam_state, config, step_index):
    """One data-generation + inference + SGD step; returns StepMetrics."""
    rng = np.random.default_rng([config.seed, step_index])
    snr_db = rng.uniform(*config.snr_range_db)
    sigma2 = snr_to_sigma2(snr_db)
    info, payload, ys = simulate_batch(context, config.batch_size, sigma2, rng)

    priors = None
    if config.gaussian_priors:
        ia = rng.uniform(*config.ia_range)
        prior_flat, _ = sample_prior_llrs(payload, ia, rng)
        priors = bits_to_payload_layout(
            prior_flat, context.runtime.payload.size, context.constellation.bits_per_symbol
        )

    model = context.model
    feats = detection_features(model, context.graph, ys, sigma2, context.cir,
                               context.constellation)
    if config.schedule is not None:
        outs = model.detect(context.runtime, feats, schedule=config.schedule,
                            prior_llrs=priors, batch=config.batch_size)
    else:
        outs = model.detect(context.runtime, feats, n_iterations=config.n_iterations,
                            prior_llrs=priors, batch=config.batch_size)
    target = bits_to_payload_layout(
        payload, context.runtime.payload.size, context.constellation.bits_per_symbol
    )
    if config.loss == "bce":
        loss = ad.bce_with_llrs(outs[-1], target)
    else:
        total = ad.bce_with_llrs(outs[0], target)
        for o in outs[1:]:
            total = ad.add(total, ad.bce_with_llrs(o, target))
        loss = ad.mul(total, 1.0 / len(outs))

    record = neural.backward(loss, model.store, batch_seed=(config.seed, step_index))
    neural.adam_step(adam_state, model.store, record)

    final_llrs = llr_tensor_to_batch(outs[-1])
    bmi = bmi_estimate(payload.ravel(), final_llrs.ravel())
    return StepMetrics(step=step_index, loss=record.loss_value, bmi=bmi, snr_db=snr_db)


def gaussian_prior_pretrain_epoch(context, adam_state, config, step_index):
    """Feedback pretraining step: priors drawn at I_A ~ U(0,1) on the bits.

    The loss targets the total (not extrinsic) output information.
    """
    if not context.model.config.with_prior_embedding:
        raise ValueError("model has no prior embedding; rebuild with one")
    cfg = replace(config, gaussian_priors=True)
    return train_epoch(context, adam_state, cfg, step_index)


def train(context, config, start_step=0, callback=None, adam_state=None):
    """Run config.steps epochs; returns the metric history."""
    if adam_state is None:
        adam_state = neural.AdamState(learning_rate=config.learning_rate)
    history = []
    step_fn = gaussian_prior_pretrain_epoch if config.gaussian_priors else train_epoch
    for step in range(start_step, start_step + config.steps):
        m = step_fn(context, adam_state, config, step)
        history.append(m)
        if callback is not None and (step % config.log_every == 0 or step == start_step + config.steps - 1):
            callback(m)
    return history


def two_stage_finetune(context, stage1: TrainConfig, stage2: TrainConfig, callback=None):
    """Train at the first schedule, then continue at the deeper one.

    Weight sharing over iterations makes the same parameters valid for
    any unrolling depth, so stage two continues with the same parameters,
    optimizer moments and seed stream.
    """
    adam_state = neural.AdamState(learning_rate=stage1.learning_rate)
    hist1 = train(context, stage1, start_step=0, callback=callback, adam_state=adam_state)
    adam_state.learning_rate = stage2.learning_rate
    hist2 = train(context, stage2, start_step=stage1.steps, callback=callback,
                  adam_state=adam_state)
    return hist1 + hist2
