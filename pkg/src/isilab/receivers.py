"""Prior-conditioned receiver components and the turbo feedback loop.

Every detector component exposes the two-call protocol used by the EXIT
machinery: ``sample(rng, n_frames)`` draws fresh transmissions and
``infer(context, prior_llrs)`` produces total bit LLRs given per-bit
priors.  ``TddSystem`` wires a detector and an LDPC decoder through an
interleaver for real turbo iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channel import build_channel_matrix, ufg_statistics
from .detectors import bcjr_detect_batch, spa_detect
from .gnn import GraphRuntime, bits_to_payload_layout, detection_features, llr_tensor_to_batch
from .graphs import build_ffg, build_ufg
from .ldpc import channel_llrs_with_punctures, encode, spa_decode


@dataclass
class FrameContext:
    observations: np.ndarray  # (B, n_obs)
    sigma2: float


class _UncodedSampler:
    """Shared transmission sampling for detector components."""

    def __init__(self, cir, constellation, sigma2, n_sym):
        self.cir = cir
        self.constellation = constellation
        self.sigma2 = float(sigma2)
        self.n_sym = n_sym
        self.channel_matrix = build_channel_matrix(cir, n_sym)
        self.n_bits = n_sym * constellation.bits_per_symbol

    @property
    def snr_db(self):
        return -10.0 * np.log10(self.sigma2)

    def sample(self, rng, n_frames):
        bits = rng.integers(0, 2, size=(n_frames, self.n_bits))
        symbols = np.stack([self.constellation.modulate(b) for b in bits])
        L = self.cir.memory
        padded = np.concatenate(
            [np.zeros((n_frames, L), dtype=np.complex128), symbols,
             np.zeros((n_frames, L), dtype=np.complex128)], axis=1)
        ys = padded @ self.channel_matrix.T
        if self.sigma2 > 0:
            ys = ys + np.sqrt(self.sigma2 / 2.0) * (
                rng.standard_normal(ys.shape) + 1j * rng.standard_normal(ys.shape))
        return bits, FrameContext(observations=ys, sigma2=self.sigma2)


class BcjrDetectorComponent(_UncodedSampler):
    name = "bcjr"

    def __init__(self, cir, constellation, sigma2, n_sym, state_budget=2_000_000):
        super().__init__(cir, constellation, sigma2, n_sym)
        self.state_budget = state_budget

    def infer(self, ctx, prior_llrs=None):
        return bcjr_detect_batch(ctx.observations, self.cir, ctx.sigma2,
                                 self.constellation, prior_llrs, self.state_budget)


class SpaDetectorComponent(_UncodedSampler):
    """Damped sum-product detection on an FFG or UFG."""

    def __init__(self, cir, constellation, sigma2, n_sym, graph_kind="ffg",
                 damping=1.0, n_iterations=10):
        super().__init__(cir, constellation, sigma2, n_sym)
        self.graph_kind = graph_kind
        self.damping = damping
        self.n_iterations = n_iterations
        self.graph = (build_ffg(n_sym, cir.memory) if graph_kind == "ffg"
                      else build_ufg(n_sym, cir.memory))
        self.name = f"spa-{graph_kind}"

    def infer(self, ctx, prior_llrs=None):
        ys = ctx.observations
        if self.graph_kind == "ffg":
            res = spa_detect(self.graph, ys, ctx.sigma2, self.constellation,
                             cir=self.cir, damping=self.damping,
                             n_iterations=self.n_iterations,
                             prior_bit_llrs=prior_llrs)
            return np.atleast_2d(res.llrs_per_iteration[-1])
        out = np.empty((ys.shape[0], self.n_bits))
        for b in range(ys.shape[0]):
            G, chi = ufg_statistics(self.channel_matrix, ys[b])
            pr = None if prior_llrs is None else prior_llrs[b]
            res = spa_detect(self.graph, (G, chi), ctx.sigma2, self.constellation,
                             damping=self.damping, n_iterations=self.n_iterations,
                             prior_bit_llrs=pr)
            out[b] = res.llrs_per_iteration[-1]
        return out


class GnnDetectorComponent(_UncodedSampler):
    name = "gnn"

    def __init__(self, model, graph, cir, constellation, sigma2, n_iterations,
                 chunk=256):
        super().__init__(cir, constellation, sigma2, graph.meta["n_sym"])
        self.model = model
        self.graph = graph
        self.runtime = GraphRuntime(graph)
        self.n_iterations = n_iterations
        self.chunk = chunk

    def infer(self, ctx, prior_llrs=None):
        ys = np.atleast_2d(ctx.observations)
        outs = []
        with ad.no_grad():
            for lo in range(0, ys.shape[0], self.chunk):
                block = ys[lo:lo + self.chunk]
                priors = None
                if prior_llrs is not None and np.any(prior_llrs):
                    priors = bits_to_payload_layout(
                        prior_llrs[lo:lo + self.chunk],
                        self.runtime.payload.size,
                        self.constellation.bits_per_symbol)
                feats = detection_features(self.model, self.graph, block, ctx.sigma2,
                                           self.cir, self.constellation)
                res = self.model.detect(self.runtime, feats,
                                        n_iterations=self.n_iterations,
                                        prior_llrs=priors, batch=block.shape[0])
                outs.append(llr_tensor_to_batch(res[-1]))
        return np.concatenate(outs, axis=0)


class SpaDecoderComponent:
    """LDPC decoder as an EXIT component over its a-priori side channel."""

    name = "ldpc-spa"
    snr_db = None

    def __init__(self, pcm, n_iterations=20, early_stop=True):
        self.pcm = pcm
        self.n_iterations = n_iterations
        self.early_stop = early_stop

    def sample(self, rng, n_frames):
        K = self.pcm.dimension
        info = rng.integers(0, 2, size=(n_frames, K))
        code = np.stack([encode(self.pcm, u) for u in info])
        return code, None

    def infer(self, ctx, prior_llrs):
        out = np.empty_like(prior_llrs)
        for b in range(prior_llrs.shape[0]):
            chan = channel_llrs_with_punctures(self.pcm, prior_llrs[b])
            out[b] = spa_decode(self.pcm, chan, self.n_iterations,
                                self.early_stop).posterior.values
        return out


class TddSystem:
    """Turbo detection and decoding with extrinsic feedback.

    The detector works on interleaved code bits; sampled ``bits`` are the
    detector-side (interleaved) code bits so information measurements and
    prior generation share one coordinate system.
    """

    def __init__(self, detector, pcm, interleaver, decoder_iterations=20):
        self.detector = detector
        self.pcm = pcm
        self.interleaver = interleaver
        self.decoder_iterations = decoder_iterations
        if detector.n_bits != pcm.num_cols:
            raise ValueError("detector bit count must equal the codeword length")

    def sample(self, rng, n_frames):
        K = self.pcm.dimension
        info = rng.integers(0, 2, size=(n_frames, K))
        code = np.stack([encode(self.pcm, u) for u in info])
        interleaved = np.stack([self.interleaver.interleave(c) for c in code])
        const = self.detector.constellation
        symbols = np.stack([const.modulate(b) for b in interleaved])
        L = self.detector.cir.memory
        padded = np.concatenate(
            [np.zeros((n_frames, L), dtype=np.complex128), symbols,
             np.zeros((n_frames, L), dtype=np.complex128)], axis=1)
        ys = padded @ self.detector.channel_matrix.T
        if self.detector.sigma2 > 0:
            ys = ys + np.sqrt(self.detector.sigma2 / 2.0) * (
                rng.standard_normal(ys.shape) + 1j * rng.standard_normal(ys.shape))
        ctx = FrameContext(observations=ys, sigma2=self.detector.sigma2)
        ctx.info_bits = info
        return interleaved, ctx

    def detect(self, ctx, det_prior):
        return self.detector.infer(ctx, det_prior)

    def decode(self, det_extrinsic):
        """Decoder extrinsic, returned in detector (interleaved) coordinates."""
        out = np.empty_like(det_extrinsic)
        self.last_decoded_bits = np.empty(det_extrinsic.shape, dtype=np.int64)
        for b in range(det_extrinsic.shape[0]):
            dec_in = self.interleaver.deinterleave(det_extrinsic[b])
            dec_in = channel_llrs_with_punctures(self.pcm, dec_in)
            res = spa_decode(self.pcm, dec_in, self.decoder_iterations)
            dec_ext = res.posterior.values - dec_in
            out[b] = self.interleaver.interleave(dec_ext)
            self.last_decoded_bits[b] = res.hard_bits
        return out

    def run_turbo(self, ctx, n_turbo_iterations):
        """Full receiver chain; returns decoded info bits (B, K)."""
        det_prior = np.zeros((ctx.observations.shape[0], self.pcm.num_cols))
        for _ in range(n_turbo_iterations):
            det_total = self.detect(ctx, det_prior)
            det_ext = det_total - det_prior
            det_prior = self.decode(det_ext)
        info_pos = self.pcm.encoder().info_positions
        return self.last_decoded_bits[:, info_pos]
