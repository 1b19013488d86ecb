"""Error counting, information estimation, EXIT analysis and latency model.

Information quantities are measured from LLRs with the standard
demapper-free estimator: I = 1 - E[log2(1 + exp(-(1-2c) * llr))].  The
inverse mapping mu(I) between the mean of consistent Gaussian LLRs and
their information content uses the three-constant curve fit
(H1 = 0.3073, H2 = 0.8935, H3 = 1.1064).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

H1 = 0.3073
H2 = 0.8935
H3 = 1.1064


def ber(reference_bits, decisions):
    """Bit error fraction."""
    a = np.asarray(reference_bits).ravel()
    b = np.asarray(decisions).ravel()
    if a.size == 0 or a.size != b.size:
        raise ValueError("need equal, non-empty bit vectors")
    return float(np.mean(a != b))


def bler(reference_frames, decided_frames):
    """Fraction of frames containing at least one bit error."""
    a = np.atleast_2d(np.asarray(reference_frames))
    b = np.atleast_2d(np.asarray(decided_frames))
    if a.shape != b.shape or a.size == 0:
        raise ValueError("need equal, non-empty frame arrays")
    return float(np.mean(np.any(a != b, axis=1)))


def bmi_estimate(bits, llrs):
    """Information estimate in bits/bit from LLR samples, clipped to [0, 1]."""
    c = np.asarray(bits, dtype=np.float64).ravel()
    l = np.asarray(llrs, dtype=np.float64).ravel()
    if c.size != l.size:
        raise ValueError("bits and llrs must have equal lengths")
    t = (1.0 - 2.0 * c) * l
    raw = 1.0 - np.mean(np.logaddexp(0.0, -t)) / np.log(2.0)
    return float(np.clip(raw, 0.0, 1.0))


def mu_of_ia(mutual_information):
    """Mean of consistent Gaussian LLRs carrying the given information."""
    ia = float(mutual_information)
    if not (0.0 <= ia < 1.0):
        raise ValueError("mutual information must lie in [0, 1)")
    if ia == 0.0:
        return 0.0
    sigma_sq = (-np.log2(1.0 - ia ** (1.0 / H3)) / H1) ** (1.0 / H2)
    return 0.5 * sigma_sq


@dataclass
class ExitCurve:
    """Measured extrinsic-information transfer characteristic."""

    ia_grid: np.ndarray
    ie_values: np.ndarray
    snr_db: float | None = None
    component: str = ""
    method: str = "subtract"
    samples: int = 0

    def __post_init__(self):
        self.ia_grid = np.asarray(self.ia_grid, dtype=np.float64)
        self.ie_values = np.clip(np.asarray(self.ie_values, dtype=np.float64), 0.0, 1.0)
        if np.any(np.diff(self.ia_grid) <= 0):
            raise ValueError("ia grid must be strictly increasing")
        if self.ia_grid.shape != self.ie_values.shape:
            raise ValueError("grid/value length mismatch")

    def to_csv_rows(self):
        for ia, ie in zip(self.ia_grid, self.ie_values):
            yield {
                "ia": ia,
                "ie": ie,
                "snr_db": "" if self.snr_db is None else self.snr_db,
                "component": self.component,
                "method": self.method,
                "samples": self.samples,
            }


def exit_characteristic(component, ia_grid, n_frames, rng, method="subtract",
                        omit_budget=16):
    """Measure I_E over an a-priori information grid.

    ``component`` follows a two-call protocol:

    * ``sample(rng, n_frames) -> (bits, context)`` draws fresh frames;
      ``bits`` has shape (n_frames, n_bits).
    * ``infer(context, prior_llrs) -> total_llrs`` runs prior-conditioned
      inference, shapes (n_frames, n_bits).

    ``subtract`` uses extrinsic = total - prior; ``omit_index`` re-runs
    inference once per bit position with that prior zeroed (quadratic
    cost, guarded by ``omit_budget``).
    """
    from .training import sample_prior_llrs

    ia_grid = np.asarray(ia_grid, dtype=np.float64)
    ie = np.empty_like(ia_grid)
    samples = 0
    for g, ia in enumerate(ia_grid):
        bits, ctx = component.sample(rng, n_frames)
        n_bits = bits.shape[1]
        if method == "omit_index" and n_bits > omit_budget:
            raise ValueError(
                f"omit_index over {n_bits} positions exceeds the budget {omit_budget}"
            )
        priors, _ = sample_prior_llrs(bits, ia, rng)
        if method == "subtract":
            total = component.infer(ctx, priors)
            extrinsic = total - priors
        elif method == "omit_index":
            extrinsic = np.empty_like(priors)
            for i in range(n_bits):
                p = priors.copy()
                p[:, i] = 0.0
                extrinsic[:, i] = component.infer(ctx, p)[:, i]
        else:
            raise ValueError(f"unknown method {method!r}")
        ie[g] = bmi_estimate(bits, extrinsic)
        samples = bits.size
    return ExitCurve(ia_grid=ia_grid, ie_values=ie, method=method,
                     component=getattr(component, "name", ""), samples=samples,
                     snr_db=getattr(component, "snr_db", None))


@dataclass
class TrajectoryPoint:
    stage: str  # detector | decoder
    ia: float
    ie: float


def exit_trajectory(system, n_turbo_iterations, rng, n_frames=200,
                    divergence_drop=0.05):
    """Measured information staircase through real turbo iterations.

    ``system`` implements ``sample(rng, n)``, ``detect(ctx, prior_llrs)``
    and ``decode(extrinsic_llrs)``; priors travel through its interleaver
    internally.  Returns the trajectory points and a divergence flag that
    trips when either component loses more than ``divergence_drop`` bits.
    """
    bits, ctx = system.sample(rng, n_frames)
    det_prior = np.zeros_like(np.asarray(bits, dtype=np.float64))
    points = []
    diverged = False
    last = {"detector": 0.0, "decoder": 0.0}
    for _ in range(n_turbo_iterations):
        det_total = system.detect(ctx, det_prior)
        det_ext = det_total - det_prior
        ia_in = bmi_estimate(bits, det_prior) if np.any(det_prior) else 0.0
        ie_det = bmi_estimate(bits, det_ext)
        points.append(TrajectoryPoint("detector", ia_in, ie_det))
        if ie_det < last["detector"] - divergence_drop:
            diverged = True
        last["detector"] = ie_det

        dec_ext = system.decode(det_ext)
        ie_dec = bmi_estimate(bits, dec_ext)
        points.append(TrajectoryPoint("decoder", ie_det, ie_dec))
        if ie_dec < last["decoder"] - divergence_drop:
            diverged = True
        last["decoder"] = ie_dec
        det_prior = dec_ext
    return points, diverged


def tdd_rate(curve: ExitCurve):
    """Area under the transfer curve over [0, 1].

    Trapezoidal rule with nearest-value extension to the interval ends.
    """
    ia = curve.ia_grid
    ie = curve.ie_values
    if ia.size < 2:
        raise ValueError("need at least two grid points")
    xs, ys = [], []
    if ia[0] > 0.0:
        xs.append(0.0)
        ys.append(ie[0])
    xs.extend(ia.tolist())
    ys.extend(ie.tolist())
    if ia[-1] < 1.0:
        xs.append(1.0)
        ys.append(ie[-1])
    return float(np.trapezoid(ys, xs))


_CYCLES_PER_ITERATION = {
    "gnn": 12,
    "fgnn": 10,
    "spa": 2,
    "nspa": 2,
    "ep": 4,
}


def latency_cycles(kind, n_iterations=1, n_sym=None, memory=None):
    """Clock-cycle accounting: one cycle per node or network layer.

    Iterative detectors cost a fixed number of cycles per iteration; the
    trellis detector costs n_sym + L + 2 per run (parallel forward and
    backward sweeps plus likelihood and output stages).
    """
    kind = kind.lower()
    if kind == "bcjr":
        if n_sym is None or memory is None:
            raise ValueError("bcjr latency needs n_sym and memory")
        return int(n_sym + memory + 2)
    if kind in _CYCLES_PER_ITERATION:
        if n_iterations < 1:
            raise ValueError("n_iterations must be positive")
        return int(_CYCLES_PER_ITERATION[kind] * n_iterations)
    raise ValueError(f"unknown detector kind {kind!r}")
