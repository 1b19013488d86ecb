"""Modulation, tapped-delay-line ISI channel and channel-matrix utilities.

Conventions used throughout the package:

* Constellations have unit average energy; BPSK maps bit b to 1 - 2b.
* Noise is circularly-symmetric complex Gaussian with *total* variance
  ``sigma2`` (sigma2/2 per real dimension).  Likelihood exponents are
  ``-|y - s|^2 / sigma2``.
* A block of ``n_sym`` symbols is observed through ``y_i = sum_l h_l
  x_{i-l} + z_i`` for ``i = 0 .. n_sym + L - 1`` with symbols outside the
  block fixed to zero, so ``len(y) = n_sym + L``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRESET_CIRS = {
    # Severe-ISI reference channel with spectral notches.
    "proakis-c": np.array([0.227, 0.460, 0.688, 0.460, 0.227]),
    # Mild two-tap channel whose detection factor graph is a tree.
    "two-tap": np.array([0.8, 0.6]),
    "identity": np.array([1.0]),
}


@dataclass(frozen=True)
class Cir:
    """Channel impulse response; memory L = number of taps - 1."""

    taps: np.ndarray

    def __post_init__(self):
        taps = np.atleast_1d(np.asarray(self.taps, dtype=np.complex128))
        if taps.ndim != 1 or taps.size == 0:
            raise ValueError("CIR must be a non-empty vector")
        if not np.all(np.isfinite(taps)):
            raise ValueError("CIR taps must be finite")
        object.__setattr__(self, "taps", taps)

    @property
    def memory(self):
        return self.taps.size - 1

    @property
    def is_real(self):
        return bool(np.all(self.taps.imag == 0.0))

    @classmethod
    def preset(cls, name):
        try:
            return cls(PRESET_CIRS[name])
        except KeyError:
            raise KeyError(f"unknown CIR preset {name!r}; available: {sorted(PRESET_CIRS)}")


def random_cir(memory, rng):
    """Unit-energy CIR with i.i.d. complex Gaussian taps."""
    if memory < 0:
        raise ValueError("memory must be non-negative")
    n = memory + 1
    taps = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2.0)
    taps /= np.linalg.norm(taps)
    return Cir(taps)


def perturb_csi(cir, variance, rng):
    """Add white Gaussian estimation noise of the given per-tap MSE.

    Real CIRs get real noise; complex CIRs get variance/2 per real
    dimension, so the per-tap mean-square perturbation equals
    ``variance`` in both cases.
    """
    if variance < 0:
        raise ValueError("variance must be non-negative")
    if variance == 0:
        return Cir(cir.taps.copy())
    n = cir.taps.size
    if cir.is_real:
        noise = rng.normal(0.0, np.sqrt(variance), size=n)
    else:
        noise = np.sqrt(variance / 2.0) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return Cir(cir.taps + noise)


class Constellation:
    """Gray-mapped unit-energy constellation for M in {2, 4, 16, 64}.

    Square QAM labels split the bit group in half: the first bits pick the
    in-phase level, the rest the quadrature level, each axis Gray coded.
    """

    def __init__(self, order):
        k = int(round(np.log2(order)))
        if 2**k != order or order < 2:
            raise ValueError(f"order must be a power of two >= 2, got {order}")
        self.order = order
        self.bits_per_symbol = k
        if order == 2:
            points = np.array([1.0, -1.0], dtype=np.complex128)
            labels = np.array([[0], [1]], dtype=np.int64)
        else:
            if k % 2:
                raise ValueError("only square QAM orders are supported above BPSK")
            ka = k // 2
            la = 2**ka
            axis_amp = 2 * np.arange(la) - (la - 1)  # ascending odd levels
            labels = np.zeros((order, k), dtype=np.int64)
            points = np.zeros(order, dtype=np.complex128)
            for idx in range(order):
                bits = [(idx >> (k - 1 - j)) & 1 for j in range(k)]
                bi = _gray_to_index(bits[:ka])
                bq = _gray_to_index(bits[ka:])
                points[idx] = axis_amp[bi] + 1j * axis_amp[bq]
                labels[idx] = bits
            points /= np.sqrt(np.mean(np.abs(points) ** 2))
        self.points = points
        self.bit_labels = labels
        # index lookup: label bits (as binary int) -> point index
        self._label_to_index = np.zeros(order, dtype=np.int64)
        for idx in range(order):
            key = int("".join(map(str, self.bit_labels[idx])), 2) if k > 0 else 0
            self._label_to_index[key] = idx

    def modulate(self, bits):
        """Map a flat 0/1 array (length divisible by bits/symbol) to symbols."""
        bits = np.asarray(bits, dtype=np.int64).ravel()
        k = self.bits_per_symbol
        if bits.size % k:
            raise ValueError(f"bit count {bits.size} not divisible by {k}")
        groups = bits.reshape(-1, k)
        keys = groups @ (1 << np.arange(k - 1, -1, -1))
        return self.points[self._label_to_index[keys]]

    def hard_demodulate(self, symbols):
        """Nearest-point decisions back to bits."""
        symbols = np.asarray(symbols, dtype=np.complex128).ravel()
        d2 = np.abs(symbols[:, None] - self.points[None, :]) ** 2
        idx = np.argmin(d2, axis=1)
        return self.bit_labels[idx].ravel()


def _gray_to_index(bits):
    """Decode a reflected Gray code bit list to its level index."""
    idx = 0
    acc = 0
    for b in bits:
        acc ^= b
        idx = (idx << 1) | acc
    return idx


def modulate(bits, constellation):
    return constellation.modulate(bits)


def apply_isi(symbols, cir, sigma2, rng=None):
    """Propagate symbols through the ISI channel and add complex AWGN."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    x = np.asarray(symbols, dtype=np.complex128)
    y = np.convolve(x, cir.taps, mode="full")
    if sigma2 > 0:
        if rng is None:
            raise ValueError("rng required for sigma2 > 0")
        n = y.size
        y = y + np.sqrt(sigma2 / 2.0) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return y


def build_channel_matrix(cir, n_sym):
    """Banded Toeplitz H of shape (n_sym+L, n_sym+2L) with y = H xt + z.

    ``xt`` is the symbol block padded by L zeros on both sides; row i
    carries the taps reversed at columns i .. i+L.
    """
    if n_sym < 1:
        raise ValueError("n_sym must be positive")
    L = cir.memory
    H = np.zeros((n_sym + L, n_sym + 2 * L), dtype=np.complex128)
    rev = cir.taps[::-1]
    for i in range(n_sym + L):
        H[i, i : i + L + 1] = rev
    return H


def zero_pad(symbols, memory):
    """The padded transmit sequence xt matching build_channel_matrix."""
    x = np.asarray(symbols, dtype=np.complex128)
    return np.concatenate([np.zeros(memory, dtype=np.complex128), x, np.zeros(memory, dtype=np.complex128)])


def ufg_statistics(H, y):
    """Matched-filter statistics (G, chi) = (H^H H, H^H y).

    ``chi`` has one entry per padded symbol position; the first and last L
    entries correspond to the virtual (known-zero) boundary symbols.
    """
    H = np.asarray(H, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    if H.shape[0] != y.shape[0]:
        raise ValueError("H and y disagree on the number of observations")
    G = H.conj().T @ H
    chi = H.conj().T @ y
    return G, chi


def ebn0_to_sigma2(ebn0_db, code_rate, bits_per_symbol):
    """Total complex noise variance for a unit-energy constellation."""
    if not (0 < code_rate <= 1):
        raise ValueError("code rate must be in (0, 1]")
    if bits_per_symbol < 1:
        raise ValueError("bits_per_symbol must be >= 1")
    return 1.0 / (code_rate * bits_per_symbol * 10.0 ** (ebn0_db / 10.0))


def snr_to_sigma2(snr_db):
    """Symbol-energy SNR to total complex noise variance (Es = 1)."""
    return 10.0 ** (-snr_db / 10.0)


@dataclass
class TransmissionRecord:
    """Everything the receiver side of one simulated frame needs."""

    info_bits: np.ndarray
    code_bits: np.ndarray
    symbols: np.ndarray
    observations: np.ndarray
    noise_variance: float
    cir: Cir
    interleaved_bits: np.ndarray | None = None

    def __post_init__(self):
        n_sym = self.symbols.size
        if self.observations.size != n_sym + self.cir.memory:
            raise ValueError("observation length must be n_sym + L")


def transmit(bits, constellation, cir, sigma2, rng):
    """Modulate a bit vector and push it through the channel."""
    bits = np.asarray(bits, dtype=np.int64)
    x = constellation.modulate(bits)
    y = apply_isi(x, cir, sigma2, rng)
    return TransmissionRecord(
        info_bits=bits,
        code_bits=bits,
        symbols=x,
        observations=y,
        noise_variance=float(sigma2),
        cir=cir,
    )
