"""Bipartite factor-graph construction: FFG, UFG, Tanner and joint graphs.

Graphs are immutable topology holders.  Variable nodes (VNs) carry flags
(payload / virtual / punctured), factor nodes (FNs) carry a class tag
(detection / check), and every edge carries a small type index used to
select shared edge parameters.
"""

from __future__ import annotations

import numpy as np

VN_PAYLOAD = 0
VN_VIRTUAL = 1
VN_PUNCTURED = 2

FN_DETECTION = 0
FN_CHECK = 1


class BipartiteGraph:
    """Typed VN/FN adjacency with per-edge type indices."""

    def __init__(self, kind, num_vn, num_fn, edge_vn, edge_fn, edge_type,
                 fn_class, vn_flags, n_edge_types, meta=None, warnings=()):
        self.kind = kind
        self.num_vn = int(num_vn)
        self.num_fn = int(num_fn)
        self.edge_vn = np.asarray(edge_vn, dtype=np.int64)
        self.edge_fn = np.asarray(edge_fn, dtype=np.int64)
        self.edge_type = np.asarray(edge_type, dtype=np.int64)
        self.fn_class = np.asarray(fn_class, dtype=np.int64)
        self.vn_flags = np.asarray(vn_flags, dtype=np.int64)
        self.n_edge_types = int(n_edge_types)
        self.meta = dict(meta or {})
        self.warnings = list(warnings)
        self._validate()
        self.vn_neighbors = _group(self.edge_vn, self.edge_fn, self.num_vn)
        self.fn_neighbors = _group(self.edge_fn, self.edge_vn, self.num_fn)

    def _validate(self):
        e = self.num_edges
        if not (self.edge_fn.shape == (e,) and self.edge_type.shape == (e,)):
            raise ValueError("edge arrays must have equal length")
        if e and (self.edge_vn.min() < 0 or self.edge_vn.max() >= self.num_vn):
            raise ValueError("edge VN index out of range")
        if e and (self.edge_fn.min() < 0 or self.edge_fn.max() >= self.num_fn):
            raise ValueError("edge FN index out of range")
        if self.fn_class.shape != (self.num_fn,):
            raise ValueError("fn_class must have one tag per FN")
        if self.vn_flags.shape != (self.num_vn,):
            raise ValueError("vn_flags must have one flag per VN")
        keys = self.edge_vn * self.num_fn + self.edge_fn
        if np.unique(keys).size != e:
            raise ValueError("duplicate edges")

    @property
    def num_edges(self):
        return self.edge_vn.size

    @property
    def payload_vns(self):
        return np.flatnonzero(self.vn_flags != VN_VIRTUAL)

    @property
    def virtual_vns(self):
        return np.flatnonzero(self.vn_flags == VN_VIRTUAL)

    def vn_degrees(self):
        return np.bincount(self.edge_vn, minlength=self.num_vn)

    def fn_degrees(self):
        return np.bincount(self.edge_fn, minlength=self.num_fn)

    def is_connected(self):
        """Union-find connectivity over the union of VNs and FNs."""
        n = self.num_vn + self.num_fn
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for v, f in zip(self.edge_vn, self.edge_fn):
            ra, rb = find(int(v)), find(self.num_vn + int(f))
            if ra != rb:
                parent[ra] = rb
        roots = {find(i) for i in range(n)}
        return len(roots) == 1

    def to_edge_list_text(self):
        """One 'vn fn type class' line per edge, for debugging tools."""
        lines = []
        for v, f, t in zip(self.edge_vn, self.edge_fn, self.edge_type):
            cls = "check" if self.fn_class[f] == FN_CHECK else "detection"
            lines.append(f"{v} {f} {t} {cls}")
        return "\n".join(lines) + "\n"


def _group(keys, values, n):
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    sorted_vals = values[order]
    starts = np.searchsorted(sorted_keys, np.arange(n), side="left")
    ends = np.searchsorted(sorted_keys, np.arange(n), side="right")
    return [sorted_vals[s:e] for s, e in zip(starts, ends)]


def build_ffg(n_sym, memory):
    """Observation-factor graph: FN i connects the L+1 symbols shaping y_i.

    VNs follow the padded symbol sequence (L virtual VNs on each side), so
    every FN has degree exactly L+1.  The edge type is the tap index.
    """
    if n_sym < 1 or memory < 0:
        raise ValueError("need n_sym >= 1 and memory >= 0")
    L = memory
    num_vn = n_sym + 2 * L
    num_fn = n_sym + L
    edge_vn, edge_fn, edge_type = [], [], []
    for i in range(num_fn):
        for slot in range(L + 1):
            # x-tilde position i+slot contributes through tap L-slot
            edge_vn.append(i + slot)
            edge_fn.append(i)
            edge_type.append(L - slot)
    vn_flags = np.full(num_vn, VN_PAYLOAD, dtype=np.int64)
    vn_flags[:L] = VN_VIRTUAL
    vn_flags[num_vn - L:] = VN_VIRTUAL
    return BipartiteGraph(
        kind="ffg",
        num_vn=num_vn,
        num_fn=num_fn,
        edge_vn=edge_vn,
        edge_fn=edge_fn,
        edge_type=edge_type,
        fn_class=np.zeros(num_fn, dtype=np.int64),
        vn_flags=vn_flags,
        n_edge_types=L + 1,
        meta={"n_sym": n_sym, "memory": L},
    )


def build_ufg(n_sym, memory):
    """Pairwise interference graph over G = H^H H.

    One degree-2 FN per symbol pair within the channel memory; the
    self-term of each symbol is absorbed into the VN input, so VNs are
    payload symbols only.  Edge types index the signed partner offset.
    """
    if n_sym < 1 or memory < 0:
        raise ValueError("need n_sym >= 1 and memory >= 0")
    L = memory
    edge_vn, edge_fn, edge_type = [], [], []
    pairs = []
    for i in range(n_sym):
        for j in range(i + 1, min(i + L, n_sym - 1) + 1):
            f = len(pairs)
            pairs.append((i, j))
            edge_vn.append(i)
            edge_fn.append(f)
            edge_type.append(_offset_type(j - i, L))
            edge_vn.append(j)
            edge_fn.append(f)
            edge_type.append(_offset_type(i - j, L))
    warnings = []
    if L == 0:
        warnings.append("memoryless channel: UFG has no factor nodes")
    return BipartiteGraph(
        kind="ufg",
        num_vn=n_sym,
        num_fn=len(pairs),
        edge_vn=edge_vn,
        edge_fn=edge_fn,
        edge_type=edge_type,
        fn_class=np.zeros(len(pairs), dtype=np.int64),
        vn_flags=np.full(n_sym, VN_PAYLOAD, dtype=np.int64),
        n_edge_types=max(2 * L, 1),
        meta={"n_sym": n_sym, "memory": L, "pairs": pairs},
        warnings=warnings,
    )


def _offset_type(offset, memory):
    """Map a signed partner offset in [-L..-1] u [1..L] to [0..2L-1]."""
    if offset < 0:
        return offset + memory
    return memory + offset - 1


def build_tanner(pcm):
    """Tanner graph of a parity-check matrix; all edge types are zero."""
    rows, cols = pcm.ones_rows, pcm.ones_cols
    if rows.size == 0:
        raise ValueError("parity-check matrix has no ones")
    row_deg = np.bincount(rows, minlength=pcm.num_rows)
    col_deg = np.bincount(cols, minlength=pcm.num_cols)
    warnings = []
    if np.any(row_deg == 0):
        warnings.append(f"{int(np.sum(row_deg == 0))} empty check rows")
    if np.any(col_deg == 0):
        warnings.append(f"{int(np.sum(col_deg == 0))} unprotected bit columns")
    vn_flags = np.full(pcm.num_cols, VN_PAYLOAD, dtype=np.int64)
    if pcm.puncture_mask is not None:
        vn_flags[pcm.puncture_mask] = VN_PUNCTURED
    return BipartiteGraph(
        kind="tanner",
        num_vn=pcm.num_cols,
        num_fn=pcm.num_rows,
        edge_vn=cols,
        edge_fn=rows,
        edge_type=np.zeros(rows.size, dtype=np.int64),
        fn_class=np.ones(pcm.num_rows, dtype=np.int64),
        vn_flags=vn_flags,
        n_edge_types=1,
        meta={"num_rows": pcm.num_rows, "num_cols": pcm.num_cols},
        warnings=warnings,
    )


class Interleaver:
    """Bijective reordering between code-bit and symbol positions.

    ``interleave(c)[permutation[j]] = c[j]``: code bit j rides at detector
    position ``permutation[j]``.
    """

    def __init__(self, permutation):
        p = np.asarray(permutation, dtype=np.int64)
        if np.any(np.sort(p) != np.arange(p.size)):
            raise ValueError("not a permutation")
        self.permutation = p
        self.inverse = np.argsort(p)

    def __len__(self):
        return self.permutation.size

    @classmethod
    def random(cls, n, rng):
        return cls(rng.permutation(n))

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n))

    def interleave(self, x):
        x = np.asarray(x)
        out = np.empty_like(x)
        out[self.permutation] = x
        return out

    def deinterleave(self, y):
        return np.asarray(y)[self.permutation]


def build_joint(detection_graph, tanner_graph, interleaver):
    """Connect a detection graph and a Tanner graph through shared VNs.

    Requires one detector payload VN per code bit (binary signalling);
    code bit j attaches to the detector payload VN at position
    ``interleaver.permutation[j]``.
    """
    payload = detection_graph.payload_vns
    n_code = tanner_graph.num_vn
    if payload.size != n_code or len(interleaver) != n_code:
        raise ValueError(
            f"detector payload count {payload.size} must equal codeword length {n_code}"
        )
    det_fn = detection_graph.num_fn
    edge_vn = np.concatenate([
        detection_graph.edge_vn,
        payload[interleaver.permutation[tanner_graph.edge_vn]],
    ])
    edge_fn = np.concatenate([detection_graph.edge_fn, tanner_graph.edge_fn + det_fn])
    edge_type = np.concatenate([detection_graph.edge_type, tanner_graph.edge_type])
    fn_class = np.concatenate([
        np.full(det_fn, FN_DETECTION, dtype=np.int64),
        np.full(tanner_graph.num_fn, FN_CHECK, dtype=np.int64),
    ])
    return BipartiteGraph(
        kind="joint",
        num_vn=detection_graph.num_vn,
        num_fn=det_fn + tanner_graph.num_fn,
        edge_vn=edge_vn,
        edge_fn=edge_fn,
        edge_type=edge_type,
        fn_class=fn_class,
        vn_flags=detection_graph.vn_flags.copy(),
        n_edge_types=detection_graph.n_edge_types,
        meta={
            **detection_graph.meta,
            "num_code_bits": n_code,
            "num_checks": tanner_graph.num_fn,
        },
    )
