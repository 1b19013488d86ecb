"""LDPC codes: alist interchange, GF(2) encoding, belief-propagation decoding.

Parity-check matrices are held sparsely as (row, col) index pairs.  Codes
whose parity section is a dual-diagonal staircase encode in linear time;
anything else goes through bit-level Gaussian elimination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detectors import LLR_MAX, LlrVector, clip_llr

_TANH_CLIP = 1.0 - 1e-15


class AlistFormatError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ParityCheckMatrix:
    """Sparse binary matrix defining an LDPC code and its Tanner graph."""

    def __init__(self, num_rows, num_cols, ones_rows, ones_cols, puncture_mask=None):
        self.num_rows = int(num_rows)
        self.num_cols = int(num_cols)
        rows = np.asarray(ones_rows, dtype=np.int64)
        cols = np.asarray(ones_cols, dtype=np.int64)
        if rows.shape != cols.shape:
            raise ValueError("ones_rows and ones_cols must match")
        if rows.size and (rows.min() < 0 or rows.max() >= num_rows):
            raise ValueError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= num_cols):
            raise ValueError("column index out of range")
        order = np.lexsort((cols, rows))
        self.ones_rows = rows[order]
        self.ones_cols = cols[order]
        if puncture_mask is not None:
            pm = np.asarray(puncture_mask, dtype=np.int64)
            if pm.size and (pm.min() < 0 or pm.max() >= num_cols):
                raise ValueError("puncture mask outside the column range")
            puncture_mask = np.unique(pm)
        self.puncture_mask = puncture_mask
        self._encoder = None

    @property
    def num_ones(self):
        return self.ones_rows.size

    def to_dense(self):
        H = np.zeros((self.num_rows, self.num_cols), dtype=np.uint8)
        H[self.ones_rows, self.ones_cols] = 1
        return H

    def syndrome(self, bits):
        bits = np.asarray(bits, dtype=np.int64)
        return np.bincount(self.ones_rows, weights=bits[self.ones_cols],
                           minlength=self.num_rows).astype(np.int64) % 2

    def encoder(self):
        if self._encoder is None:
            self._encoder = _build_encoder(self)
        return self._encoder

    @property
    def dimension(self):
        """Code dimension K = n - rank(H) over GF(2)."""
        return self.encoder().dimension


def from_dense(H, puncture_mask=None):
    H = np.asarray(H) % 2
    rows, cols = np.nonzero(H)
    return ParityCheckMatrix(H.shape[0], H.shape[1], rows, cols, puncture_mask)


# -- alist interchange ------------------------------------------------------


def load_alist(text):
    """Parse alist text into a ParityCheckMatrix.

    Layout: 'n m', 'dv_max dc_max', n column degrees, m row degrees, then
    n column adjacency lines (1-based row indices, zero padding allowed)
    and m row adjacency lines.
    """
    lines = text.splitlines()
    tokens = [ln.split() for ln in lines]

    def ints(idx, expect=None):
        if idx >= len(tokens) or not tokens[idx]:
            raise AlistFormatError("unexpected end of file", line=idx + 1)
        try:
            vals = [int(t) for t in tokens[idx]]
        except ValueError:
            raise AlistFormatError(f"non-integer token in {lines[idx]!r}", line=idx + 1)
        if expect is not None and len(vals) != expect:
            raise AlistFormatError(f"expected {expect} integers, got {len(vals)}", line=idx + 1)
        return vals

    n, m = ints(0, 2)
    if n < 1 or m < 1:
        raise AlistFormatError("matrix dimensions must be positive", line=1)
    dv_max, dc_max = ints(1, 2)
    col_deg = ints(2)
    if len(col_deg) != n:
        raise AlistFormatError(f"expected {n} column degrees, got {len(col_deg)}", line=3)
    row_deg = ints(3)
    if len(row_deg) != m:
        raise AlistFormatError(f"expected {m} row degrees, got {len(row_deg)}", line=4)
    if max(col_deg) > dv_max or max(row_deg) > dc_max:
        raise AlistFormatError("degree exceeds declared maximum", line=2)

    rows_acc, cols_acc = [], []
    for j in range(n):
        vals = [v for v in ints(4 + j) if v != 0]
        if len(vals) != col_deg[j]:
            raise AlistFormatError(
                f"column {j + 1} lists {len(vals)} rows, degree says {col_deg[j]}",
                line=5 + j,
            )
        for v in vals:
            if not (1 <= v <= m):
                raise AlistFormatError(f"row index {v} out of range", line=5 + j)
            rows_acc.append(v - 1)
            cols_acc.append(j)
    pcm = ParityCheckMatrix(m, n, rows_acc, cols_acc)
    # cross-check the row adjacency section when present
    base = 4 + n
    if base + m <= len(tokens) and all(tokens[base + i] for i in range(m)):
        for i in range(m):
            vals = [v for v in ints(base + i) if v != 0]
            if len(vals) != row_deg[i]:
                raise AlistFormatError(
                    f"row {i + 1} lists {len(vals)} columns, degree says {row_deg[i]}",
                    line=base + i + 1,
                )
    if np.any(np.bincount(pcm.ones_rows, minlength=m) != np.asarray(row_deg)):
        raise AlistFormatError("row degrees disagree with the column adjacency")
    return pcm


def save_alist(pcm):
    """Serialize to alist text (unpadded adjacency lines)."""
    n, m = pcm.num_cols, pcm.num_rows
    col_lists = [[] for _ in range(n)]
    row_lists = [[] for _ in range(m)]
    for r, c in zip(pcm.ones_rows, pcm.ones_cols):
        col_lists[c].append(int(r) + 1)
        row_lists[r].append(int(c) + 1)
    out = [f"{n} {m}"]
    out.append(f"{max(len(c) for c in col_lists)} {max(len(r) for r in row_lists)}")
    out.append(" ".join(str(len(c)) for c in col_lists))
    out.append(" ".join(str(len(r)) for r in row_lists))
    out.extend(" ".join(map(str, sorted(c))) for c in col_lists)
    out.extend(" ".join(map(str, sorted(r))) for r in row_lists)
    return "\n".join(out) + "\n"


# -- encoding ----------------------------------------------------------------


@dataclass
class _Encoder:
    dimension: int
    info_positions: np.ndarray
    kind: str  # "staircase" | "eliminated"
    # staircase path
    info_matrix_rows: np.ndarray | None = None
    info_matrix_cols: np.ndarray | None = None
    # eliminated path: parity rows over info bits, aligned with pivot columns
    pivot_cols: np.ndarray | None = None
    parity_eqs: np.ndarray | None = None  # (rank, K) uint8


def _is_staircase(pcm):
    """True when the last m columns form the dual-diagonal accumulator."""
    m, n = pcm.num_rows, pcm.num_cols
    if n <= m:
        return False
    sel = pcm.ones_cols >= (n - m)
    rows = pcm.ones_rows[sel]
    cols = pcm.ones_cols[sel] - (n - m)
    want_rows, want_cols = [], []
    for j in range(m):
        want_rows.append(j)
        want_cols.append(j)
        if j + 1 < m:
            want_rows.append(j + 1)
            want_cols.append(j)
    got = set(zip(rows.tolist(), cols.tolist()))
    return got == set(zip(want_rows, want_cols))


def _build_encoder(pcm):
    m, n = pcm.num_rows, pcm.num_cols
    if _is_staircase(pcm):
        k = n - m
        sel = pcm.ones_cols < k
        return _Encoder(
            dimension=k,
            info_positions=np.arange(k),
            kind="staircase",
            info_matrix_rows=pcm.ones_rows[sel],
            info_matrix_cols=pcm.ones_cols[sel],
        )
    H = pcm.to_dense()
    rref, pivot_cols = _gf2_rref(H)
    rank = len(pivot_cols)
    info = np.setdiff1d(np.arange(n), pivot_cols)
    parity_eqs = rref[:rank][:, info].astype(np.uint8)
    return _Encoder(
        dimension=n - rank,
        info_positions=info,
        kind="eliminated",
        pivot_cols=np.asarray(pivot_cols),
        parity_eqs=parity_eqs,
    )


def _gf2_rref(H):
    """Reduced row echelon form over GF(2); returns (rref, pivot column list)."""
    H = H.copy().astype(np.uint8)
    m, n = H.shape
    pivots = []
    r = 0
    for c in range(n):
        if r >= m:
            break
        rows = np.flatnonzero(H[r:, c]) + r
        if rows.size == 0:
            continue
        if rows[0] != r:
            H[[r, rows[0]]] = H[[rows[0], r]]
        mask = H[:, c].astype(bool)
        mask[r] = False
        H[mask] ^= H[r]
        pivots.append(c)
        r += 1
    return H, pivots


def encode(pcm, info_bits):
    """Systematic encoding; H c^T = 0 over GF(2).

    For non-staircase matrices the information positions come from the
    recorded column permutation of the elimination; rank deficiencies
    enlarge K = n - rank accordingly.
    """
    enc = pcm.encoder()
    u = np.asarray(info_bits, dtype=np.int64) % 2
    if u.size != enc.dimension:
        raise ValueError(f"expected {enc.dimension} info bits, got {u.size}")
    n = pcm.num_cols
    c = np.zeros(n, dtype=np.int64)
    c[enc.info_positions] = u
    if enc.kind == "staircase":
        s = np.bincount(enc.info_matrix_rows,
                        weights=u[enc.info_matrix_cols],
                        minlength=pcm.num_rows).astype(np.int64) % 2
        c[enc.dimension:] = np.cumsum(s) % 2
    else:
        par = (enc.parity_eqs @ u) % 2
        c[enc.pivot_cols] = par
    return c


# -- decoding ----------------------------------------------------------------


@dataclass
class DecodeResult:
    posterior: LlrVector
    hard_bits: np.ndarray
    converged: bool
    iterations_used: int


class _DecoderIndex:
    def __init__(self, pcm):
        order = np.lexsort((pcm.ones_cols, pcm.ones_rows))
        self.row = pcm.ones_rows[order]
        self.col = pcm.ones_cols[order]
        deg = np.bincount(self.row, minlength=pcm.num_rows)
        self.dc_max = int(deg.max()) if deg.size else 0
        port = np.arange(self.row.size) - np.repeat(np.concatenate([[0], np.cumsum(deg)[:-1]]), deg)
        self.port = port.astype(np.int64)
        self.num_rows = pcm.num_rows
        self.num_cols = pcm.num_cols


_DECODER_CACHE = {}


def _decoder_index(pcm):
    key = id(pcm)
    idx = _DECODER_CACHE.get(key)
    if idx is None or idx.num_cols != pcm.num_cols:
        idx = _DecoderIndex(pcm)
        _DECODER_CACHE[key] = idx
    return idx


def channel_llrs_with_punctures(pcm, llrs):
    """Zero out the punctured positions of a channel LLR vector."""
    out = np.asarray(llrs, dtype=np.float64).copy()
    if pcm.puncture_mask is not None:
        out[pcm.puncture_mask] = 0.0
    return out


def spa_decode(pcm, channel_llrs, n_iterations=20, early_stop=True):
    """Flooding belief propagation with the exact tanh/arctanh check rule."""
    idx = _decoder_index(pcm)
    chan = clip_llr(_values(channel_llrs))
    if chan.shape != (pcm.num_cols,):
        raise ValueError("channel LLR length must equal the number of columns")
    row, col, port = idx.row, idx.col, idx.port
    m, dc = idx.num_rows, idx.dc_max
    v2c = chan[col]
    c2v = np.zeros_like(v2c)
    total = chan.copy()
    converged = False
    iterations = 0
    for it in range(1, n_iterations + 1):
        iterations = it
        T = np.ones((m, dc))
        T[row, port] = np.tanh(0.5 * np.clip(v2c, -LLR_MAX, LLR_MAX))
        prod = np.empty_like(T)
        for p in range(dc):
            prod[:, p] = np.prod(np.delete(T, p, axis=1), axis=1)
        c2v = 2.0 * np.arctanh(np.clip(prod[row, port], -_TANH_CLIP, _TANH_CLIP))
        total = chan + np.bincount(col, weights=c2v, minlength=pcm.num_cols)
        v2c = np.clip(total[col] - c2v, -LLR_MAX, LLR_MAX)
        hard = (total < 0).astype(np.int64)
        if early_stop and not np.any(pcm.syndrome(hard)):
            converged = True
            break
    hard = (total < 0).astype(np.int64)
    if not converged and not np.any(pcm.syndrome(hard)):
        converged = True
    return DecodeResult(
        posterior=LlrVector(total, role="total"),
        hard_bits=hard,
        converged=converged,
        iterations_used=iterations,
    )


def extrinsic_llrs(total, prior):
    """Extrinsic = total - prior, saturated; role tags are enforced."""
    if not isinstance(total, LlrVector) or not isinstance(prior, LlrVector):
        raise TypeError("extrinsic_llrs expects LlrVector arguments")
    if total.role != "total" or prior.role != "prior":
        raise ValueError(f"role mismatch: got ({total.role}, {prior.role})")
    if total.values.shape != prior.values.shape:
        raise ValueError("length mismatch")
    return LlrVector(clip_llr(total.values - prior.values), role="extrinsic")


def _values(x):
    return x.values if isinstance(x, LlrVector) else np.asarray(x, dtype=np.float64)
