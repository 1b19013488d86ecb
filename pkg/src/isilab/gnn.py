"""Message-passing neural detection on factor graphs.

The model assigns small MLPs to node updates and directed-edge updates on
a bipartite detection graph (or a joint detection/decoding graph), with
learned attribute vectors selecting per-tap edge behavior.  States are
``(num_nodes, batch, d)`` tensors; one forward iteration updates factor
states, edge messages and variable states, after which a linear readout
maps payload variable states to bit LLRs.

Detection factor nodes and parity-check factor nodes use separate MLP
sets; the variable-node update is shared.  Check-side attributes are
fixed to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .channel import build_channel_matrix, ufg_statistics
from .graphs import FN_CHECK, FN_DETECTION, VN_VIRTUAL
from .neural import Mlp, ParameterStore, glorot_init

DET = "det"
CHK = "chk"


class InferenceDivergedError(RuntimeError):
    pass


@dataclass
class Schedule:
    """Factor-update schedule for joint graphs.

    ``flooding``: every iteration updates both FN classes in parallel.
    ``sequential``: each outer round runs ``inner[0]`` detection-only
    iterations followed by ``inner[1]`` decoding-only iterations.
    """

    kind: str = "flooding"
    outer: int = 10
    inner: tuple = (1,)

    def __post_init__(self):
        if self.kind not in ("flooding", "sequential"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "sequential" and len(self.inner) != 2:
            raise ValueError("sequential schedules need inner = (det, dec)")
        if self.total_iterations() < 1:
            raise ValueError("schedule performs no factor updates")

    def phases(self):
        """Yield (active_classes, count) in execution order."""
        if self.kind == "flooding":
            yield (DET, CHK), self.outer
        else:
            for _ in range(self.outer):
                if self.inner[0]:
                    yield (DET,), self.inner[0]
                if self.inner[1]:
                    yield (CHK,), self.inner[1]

    def total_iterations(self):
        if self.kind == "flooding":
            return self.outer
        return self.outer * (self.inner[0] + self.inner[1])


@dataclass
class GnnConfig:
    """Architecture switches; defaults follow the reference setup."""

    feature_size: int = 16
    hidden: tuple = (64, 64)
    edge_matrix_hidden: tuple = (64,)
    modulation_order: int = 2
    embedding: str = "linear"  # linear | llr | neural | cct
    variant: str = "gnn"  # gnn | fgnn
    include_noise_input: bool = True
    with_check_class: bool = False
    with_prior_embedding: bool = False
    embed_input_width: int | None = None  # inferred by build_model_for_graph
    cct_band: int | None = None  # taps of the learnable target response

    @property
    def bits_per_symbol(self):
        return int(round(np.log2(self.modulation_order)))


class GraphRuntime:
    """Pre-compiled per-class edge indices and aggregation operators."""

    def __init__(self, graph):
        self.graph = graph
        self.num_vn = graph.num_vn
        self.payload = graph.payload_vns
        self.vn_attr_index = (graph.vn_flags == VN_VIRTUAL).astype(np.int64)
        self.classes = {}
        for name, tag in ((DET, FN_DETECTION), (CHK, FN_CHECK)):
            fn_ids = np.flatnonzero(graph.fn_class == tag)
            if fn_ids.size == 0:
                continue
            local = -np.ones(graph.num_fn, dtype=np.int64)
            local[fn_ids] = np.arange(fn_ids.size)
            sel = np.flatnonzero(local[graph.edge_fn] >= 0)
            e_vn = graph.edge_vn[sel]
            e_fn = local[graph.edge_fn[sel]]
            e_type = graph.edge_type[sel]
            n_e = sel.size
            agg_vn = sp.csr_matrix(
                (np.ones(n_e), (e_vn, np.arange(n_e))), shape=(graph.num_vn, n_e)
            )
            agg_fn = sp.csr_matrix(
                (np.ones(n_e), (e_fn, np.arange(n_e))), shape=(fn_ids.size, n_e)
            )
            self.classes[name] = {
                "fn_ids": fn_ids,
                "num_fn": fn_ids.size,
                "edge_vn": e_vn,
                "edge_fn": e_fn,
                "edge_type": e_type,
                "agg_vn": agg_vn,
                "agg_fn": agg_fn,
                "deg_fn": np.maximum(agg_fn @ np.ones(n_e), 1.0),
                "deg_vn": agg_vn @ np.ones(n_e),
            }
        # payload scatter: (num_vn x n_payload) selector for VN-side inputs
        self.scatter_payload = sp.csr_matrix(
            (np.ones(self.payload.size), (self.payload, np.arange(self.payload.size))),
            shape=(graph.num_vn, self.payload.size),
        )

    def vn_inv_degree(self, active):
        deg = np.zeros(self.num_vn)
        for name in active:
            if name in self.classes:
                deg += self.classes[name]["deg_vn"]
        return 1.0 / np.maximum(deg, 1.0)


def _as_feature_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=np.float64))


@dataclass
class GnnState:
    s_vn: ad.Tensor
    s_fn: dict
    iteration: int = 0


class GnnModel:
    """Trainable parameters plus the forward pass over a GraphRuntime."""

    def __init__(self, config: GnnConfig, n_edge_types, rng):
        self.config = config
        self.store = ParameterStore()
        self.n_edge_types = n_edge_types
        d = config.feature_size
        hid = list(config.hidden)
        self.mlps = {}
        classes = [DET] + ([CHK] if config.with_check_class else [])
        if config.variant == "gnn":
            self.mlps["vn"] = Mlp([3 * d] + hid + [d], self.store, "vn", rng)
            for c in classes:
                self.mlps[f"{c}_fn"] = Mlp([3 * d] + hid + [d], self.store, f"{c}_fn", rng)
                self.mlps[f"{c}_msg_fv"] = Mlp([3 * d] + hid + [d], self.store, f"{c}_msg_fv", rng)
                self.mlps[f"{c}_msg_vf"] = Mlp([3 * d] + hid + [d], self.store, f"{c}_msg_vf", rng)
        elif config.variant == "fgnn":
            ehid = list(config.edge_matrix_hidden)
            for c in classes:
                self.mlps[f"{c}_msg_fv"] = Mlp([2 * d] + hid + [d], self.store, f"{c}_msg_fv", rng)
                self.mlps[f"{c}_msg_vf"] = Mlp([2 * d] + hid + [d], self.store, f"{c}_msg_vf", rng)
                self.mlps[f"{c}_edge_mat"] = Mlp([d] + ehid + [d * d], self.store, f"{c}_edge_mat", rng)
        else:
            raise ValueError(f"unknown variant {config.variant!r}")

        # attribute vectors: payload/virtual VN rows, detection FN, typed edges
        self.store.add("att_vn", rng.standard_normal((2, d)))
        self.store.add("att_fn_det", rng.standard_normal(d))
        self.store.add("att_fv", rng.standard_normal((n_edge_types, d)))
        self.store.add("att_vf", rng.standard_normal((n_edge_types, d)))

        nb = config.bits_per_symbol
        width = config.embed_input_width
        if width is None:
            width = (2 if config.embedding in ("linear", "cct") else 0)
            width += 1 if config.include_noise_input else 0
            if not width:
                raise ValueError(f"embed_input_width required for {config.embedding!r}")
            config.embed_input_width = width
        if config.embedding in ("linear", "llr"):
            self.store.add("w_embed", glorot_init(d, width, rng))
        elif config.embedding == "neural":
            self.mlps["embed"] = Mlp([width] + hid + [d], self.store, "embed", rng)
        elif config.embedding == "cct":
            if not config.cct_band:
                raise ValueError("cct embedding needs cct_band")
            taps = np.zeros((config.cct_band, 2))
            taps[:, 0] = 1.0
            self.store.add("cct_taps", taps)
            self.store.add("w_embed", glorot_init(d, width, rng))
        else:
            raise ValueError(f"unknown embedding {config.embedding!r}")
        if config.with_prior_embedding:
            self.store.add("w_prior", glorot_init(d, nb, rng))
        self.store.add("readout", glorot_init(nb, d, rng))
        self._zero_cache = {}

    # -- parameter views ---------------------------------------------------

    def parameters(self):
        return self.store

    def num_parameters(self):
        return self.store.num_parameters()

    def _zeros(self, shape):
        key = tuple(shape)
        z = self._zero_cache.get(key)
        if z is None or z.data.shape != key:
            z = ad.Tensor(np.zeros(shape))
            self._zero_cache[key] = z
        return z

    # -- embeddings ----------------------------------------------------------

    def initial_state(self, runtime, features, prior_llrs=None, batch=None):
        """Build the iteration-zero node states.

        ``features``: dict with optional keys ``fn_det`` (num_det_fn, B, f)
        and ``vn`` (num_vn, B, f) of constant input features, already
        containing the noise-variance column when configured.
        """
        cfg = self.config
        d = cfg.feature_size
        B = batch
        parts_vn = []
        if "fn_det" in features:
            feats = _as_feature_tensor(features["fn_det"])
            if cfg.embedding == "neural":
                s_f_det = self.mlps["embed"](feats)
            else:
                s_f_det = ad.matmul(feats, self.store["w_embed"])
            B = feats.shape[1]
        else:
            s_f_det = None
        if "vn" in features:
            feats = _as_feature_tensor(features["vn"])
            if cfg.embedding == "neural":
                parts_vn.append(self.mlps["embed"](feats))
            else:
                parts_vn.append(ad.matmul(feats, self.store["w_embed"]))
            B = feats.shape[1]
        if B is None:
            raise ValueError("cannot infer the batch size")

        if prior_llrs is not None:
            if not cfg.with_prior_embedding:
                raise ValueError("model was built without a prior embedding")
            pr = np.asarray(prior_llrs, dtype=np.float64)
            emb = ad.matmul(ad.Tensor(pr), self.store["w_prior"])  # (n_payload, B, d)
            full = ad.sparse_matmul(
                runtime.scatter_payload, ad.reshape(emb, (pr.shape[0], B * d))
            )
            parts_vn.append(ad.reshape(full, (runtime.num_vn, B, d)))

        if parts_vn:
            s_vn = parts_vn[0]
            for p in parts_vn[1:]:
                s_vn = ad.add(s_vn, p)
            if s_vn.shape[0] != runtime.num_vn:
                raise ValueError("VN feature rows must cover every VN")
        else:
            s_vn = self._zeros((runtime.num_vn, B, d))

        s_fn = {}
        for name, cls in runtime.classes.items():
            if name == DET and s_f_det is not None:
                if s_f_det.shape[0] != cls["num_fn"]:
                    raise ValueError("one detection-FN feature row per observation required")
                s_fn[name] = s_f_det
            else:
                s_fn[name] = self._zeros((cls["num_fn"], B, d))
        return GnnState(s_vn=s_vn, s_fn=s_fn)

    # -- one message-passing iteration ----------------------------------------

    def iterate(self, state, runtime, active=(DET, CHK)):
        cfg = self.config
        d = cfg.feature_size
        B = state.s_vn.shape[1]
        active = tuple(c for c in active if c in runtime.classes)
        if not active:
            raise ValueError("no active factor class present in the graph")

        # factor-to-variable messages
        msgs_fv = {}
        for name in active:
            cls = runtime.classes[name]
            src = ad.gather(state.s_fn[name], cls["edge_fn"])
            dst = ad.gather(state.s_vn, cls["edge_vn"])
            msgs_fv[name] = self._message(name, "fv", src, dst, cls)

        # variable update: mean over active incoming messages
        inv_deg = runtime.vn_inv_degree(active)[:, None, None]
        agg = None
        for name in active:
            cls = runtime.classes[name]
            flat = ad.reshape(msgs_fv[name], (cls["edge_vn"].size, B * d))
            part = ad.sparse_matmul(cls["agg_vn"], flat)
            agg = part if agg is None else ad.add(agg, part)
        mean_vn = ad.mul(ad.reshape(agg, (runtime.num_vn, B, d)), inv_deg)
        if cfg.variant == "gnn":
            att_vn = ad.reshape(ad.gather(self.store["att_vn"], runtime.vn_attr_index),
                                (runtime.num_vn, 1, d))
            s_vn = self.mlps["vn"].forward_terms(
                [(state.s_vn, 0), (mean_vn, d), (att_vn, 2 * d)]
            )
        else:
            s_vn = ad.add(state.s_vn, mean_vn)

        # variable-to-factor messages and factor update
        s_fn = dict(state.s_fn)
        for name in active:
            cls = runtime.classes[name]
            src = ad.gather(s_vn, cls["edge_vn"])
            dst = ad.gather(state.s_fn[name], cls["edge_fn"])
            m_vf = self._message(name, "vf", src, dst, cls)
            flat = ad.reshape(m_vf, (cls["edge_vn"].size, B * d))
            mean_fn = ad.mul(
                ad.reshape(ad.sparse_matmul(cls["agg_fn"], flat), (cls["num_fn"], B, d)),
                (1.0 / cls["deg_fn"])[:, None, None],
            )
            if cfg.variant == "gnn":
                terms = [(state.s_fn[name], 0), (mean_fn, d)]
                if name == DET:
                    att = ad.reshape(self.store["att_fn_det"], (1, 1, d))
                    terms.append((att, 2 * d))
                s_fn[name] = self.mlps[f"{name}_fn"].forward_terms(terms)
            else:
                s_fn[name] = ad.add(state.s_fn[name], mean_fn)

        if not np.all(np.isfinite(s_vn.data)):
            raise InferenceDivergedError(f"non-finite VN state at iteration {state.iteration + 1}")
        return GnnState(s_vn=s_vn, s_fn=s_fn, iteration=state.iteration + 1)

    def _message(self, name, direction, src, dst, cls):
        """Directed edge update; the typed attribute enters the first layer
        as a per-type bias term (zero on the check class)."""
        d = self.config.feature_size
        if self.config.variant == "gnn":
            mlp = self.mlps[f"{name}_msg_{direction}"]
            terms = [(src, 0), (dst, d)]
            if name == DET:
                table = self.store["att_fv" if direction == "fv" else "att_vf"]
                rows = ad.gather(table, cls["edge_type"])
                terms.append((ad.reshape(rows, (cls["edge_type"].size, 1, d)), 2 * d))
            return mlp.forward_terms(terms)
        core = self.mlps[f"{name}_msg_{direction}"].forward_terms([(src, 0), (dst, d)])
        if name == DET:
            table = self.mlps[f"{name}_edge_mat"](self.store["att_fv" if direction == "fv" else "att_vf"])
            table = ad.reshape(table, (self.n_edge_types, d, d))
            mats = ad.gather(table, cls["edge_type"])
        else:
            zero_att = ad.Tensor(np.zeros((1, d)))
            table = ad.reshape(self.mlps[f"{name}_edge_mat"](zero_att), (1, d, d))
            mats = ad.gather(table, np.zeros(cls["edge_type"].size, dtype=np.int64))
        return ad.edge_matvec(mats, core)

    # -- readout ---------------------------------------------------------------

    def readout(self, state, runtime):
        """Project payload VN states to per-bit LLRs (n_payload, B, nbits)."""
        payload_states = ad.gather(state.s_vn, runtime.payload)
        return ad.matmul(payload_states, self.store["readout"])

    # -- full pipeline -----------------------------------------------------------

    def detect(self, runtime, features, n_iterations=None, schedule=None,
               prior_llrs=None, batch=None):
        """Embed, iterate and read out after every iteration.

        Returns the list of per-iteration LLR tensors, shaped
        (n_payload, B, bits_per_symbol).
        """
        if schedule is None:
            schedule = Schedule(kind="flooding", outer=n_iterations or 10)
        state = self.initial_state(runtime, features, prior_llrs=prior_llrs, batch=batch)
        outputs = []
        for active, count in schedule.phases():
            for _ in range(count):
                state = self.iterate(state, runtime, active=active)
                outputs.append(self.readout(state, runtime))
        return outputs


# -- input feature builders ---------------------------------------------------


def observation_features(y, sigma2, include_noise=True):
    """(n_obs, B, 2[+1]) real features from complex observations (B, n_obs)."""
    y = np.atleast_2d(np.asarray(y, dtype=np.complex128))
    feats = np.stack([y.real.T, y.imag.T], axis=-1)
    if include_noise:
        col = np.full(feats.shape[:2] + (1,), float(sigma2))
        feats = np.concatenate([feats, col], axis=-1)
    return feats


def neural_csi_features(y, cir, sigma2, include_noise=True):
    """Observation features concatenated with the (shared) CIR taps."""
    y = np.atleast_2d(np.asarray(y, dtype=np.complex128))
    n_obs, B = y.shape[1], y.shape[0]
    base = observation_features(y, sigma2, include_noise=False)
    taps = np.concatenate([cir.taps.real, cir.taps.imag])
    rep = np.broadcast_to(taps, (n_obs, B, taps.size))
    parts = [base, rep]
    if include_noise:
        parts.append(np.full((n_obs, B, 1), float(sigma2)))
    return np.concatenate(parts, axis=-1)


def ffg_loglik_features(y, cir, sigma2, constellation, graph, budget=2_000_000):
    """Max-normalized log-likelihood table per observation FN.

    One row of M^(L+1) channel log-likelihoods per factor node, the exact
    local evidence each FN marginalizes in sum-product detection.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.complex128))
    B, n_obs = y.shape
    L = graph.meta["memory"]
    M = constellation.order
    n_slot = L + 1
    if M**n_slot > budget:
        raise ValueError(f"{M ** n_slot} likelihoods per node exceeds the budget")
    combos = np.indices((M,) * n_slot).reshape(n_slot, -1).T
    virtual = graph.vn_flags == VN_VIRTUAL
    out = np.zeros((n_obs, combos.shape[0]), dtype=np.complex128)
    for slot in range(n_slot):
        vals = constellation.points[combos[:, slot]]
        mask = ~virtual[np.arange(n_obs) + slot]
        out += cir.taps[L - slot] * np.where(mask[:, None], vals[None, :], 0.0)
    table = -np.abs(y[:, :, None] - out[None, :, :]) ** 2 / max(float(sigma2), 1e-30)
    table -= table.max(axis=-1, keepdims=True)
    return np.ascontiguousarray(np.swapaxes(table, 0, 1))


def ufg_vn_features(y, cir, sigma2, include_noise=True, mode="linear",
                    constellation=None):
    """Matched-filter VN inputs for the pairwise-interference graph.

    ``linear``: [Re chi, Im chi, G_ii (+ sigma2)] per payload symbol.
    ``llr``: the M self-term log factors, max normalized.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.complex128))
    B, n_obs = y.shape
    L = cir.memory
    n_sym = n_obs - L
    H = build_channel_matrix(cir, n_sym)
    G = (H.conj().T @ H)
    chi = y @ H.conj()  # (B, n_pad)
    chi_p = chi[:, L:L + n_sym]
    g_diag = np.real(np.diag(G))[L:L + n_sym]
    if mode == "linear":
        feats = np.stack([
            chi_p.real.T,
            chi_p.imag.T,
            np.broadcast_to(g_diag[:, None], (n_sym, B)),
        ], axis=-1)
        if include_noise:
            feats = np.concatenate([feats, np.full((n_sym, B, 1), float(sigma2))], axis=-1)
        return feats
    if mode == "llr":
        pts = constellation.points
        s2 = max(float(sigma2), 1e-30)
        table = (2.0 * np.real(np.conj(pts)[None, None, :] * chi_p[:, :, None])
                 - g_diag[None, :, None] * np.abs(pts[None, None, :]) ** 2) / s2
        table -= table.max(axis=-1, keepdims=True)
        return np.ascontiguousarray(np.swapaxes(table, 0, 1))
    raise ValueError(f"unknown UFG feature mode {mode!r}")


def cct_filter(H, sigma2, taps):
    """Receive filter mapping a varying channel onto a fixed banded target.

    ``taps`` holds the learnable target response (band width L+1); the
    returned matrix has shape (n_pad, n_obs) so the filtered vector has
    one entry per padded symbol position.  The constant part
    ``(H^H H + I / sigma2)^{-1} H^H`` is returned for reuse; a flag marks
    a floored noise variance.
    """
    H = np.asarray(H, dtype=np.complex128)
    n_obs, n_pad = H.shape
    s2 = float(sigma2)
    flagged = not (1e-12 <= s2 <= 1e12)
    s2 = min(max(s2, 1e-12), 1e12)
    core = np.linalg.solve(H.conj().T @ H + np.eye(n_pad) / s2, H.conj().T)
    taps_c = np.asarray(taps)[:, 0] + 1j * np.asarray(taps)[:, 1]
    W = taps_c.size
    target = np.zeros((n_pad, n_pad), dtype=np.complex128)
    for o in range(W):
        target += np.diag(np.full(n_pad - o, taps_c[o]), k=o)
    return target @ core, core, flagged


def cct_features(model, y, cir, sigma2, include_noise=True):
    """Differentiable filtered-observation features at the VN positions."""
    y = np.atleast_2d(np.asarray(y, dtype=np.complex128))
    B, n_obs = y.shape
    L = cir.memory
    n_sym = n_obs - L
    H = build_channel_matrix(cir, n_sym)
    s2 = min(max(float(sigma2), 1e-12), 1e12)
    core = np.linalg.solve(H.conj().T @ H + np.eye(n_sym + 2 * L) / s2, H.conj().T)
    z = core @ y.T  # (n_pad, B)
    band = model.config.cct_band
    z_ext = np.concatenate([z, np.zeros((band - 1, B), dtype=np.complex128)], axis=0)
    filtered = ad.banded_correlate(model.store["cct_taps"], z_ext)  # (n_pad, B, 2)
    if include_noise:
        const = ad.Tensor(np.full((z.shape[0], B, 1), float(sigma2)))
        return ad.concat([filtered, const])
    return filtered


# -- convenience drivers ------------------------------------------------------


def build_model_for_graph(graph, constellation, embedding="linear", rng=None,
                          config=None, cir=None):
    """Construct a GnnModel whose input widths match graph and embedding."""
    rng = rng if rng is not None else np.random.default_rng(0)
    cfg = config or GnnConfig()
    cfg.modulation_order = constellation.order
    cfg.embedding = embedding
    cfg.with_check_class = bool(np.any(graph.fn_class == FN_CHECK))
    L = graph.meta.get("memory", 0)
    extra = 1 if cfg.include_noise_input else 0
    on_vn_side = graph.kind == "ufg"
    base = 3 if on_vn_side else 2  # UFG inputs carry the self-gain column
    if embedding == "linear":
        cfg.embed_input_width = base + extra
    elif embedding == "llr":
        cfg.embed_input_width = (
            constellation.order if on_vn_side
            else constellation.order ** (L + 1)
        )
    elif embedding == "neural":
        if cir is None:
            raise ValueError("neural embedding needs the CIR")
        cfg.embed_input_width = base + 2 * cir.taps.size + extra
    elif embedding == "cct":
        cfg.cct_band = L + 1
        cfg.embed_input_width = 2 + extra
    else:
        raise ValueError(f"unknown embedding {embedding!r}")
    return GnnModel(cfg, n_edge_types=graph.n_edge_types, rng=rng)


def detection_features(model, graph, y, sigma2, cir, constellation):
    """Assemble the embedding inputs for a detection or joint graph."""
    cfg = model.config
    inc = cfg.include_noise_input
    if graph.kind in ("ffg", "joint"):
        if cfg.embedding == "linear":
            return {"fn_det": observation_features(y, sigma2, inc)}
        if cfg.embedding == "neural":
            return {"fn_det": neural_csi_features(y, cir, sigma2, inc)}
        if cfg.embedding == "llr":
            return {"fn_det": ffg_loglik_features(y, cir, sigma2, constellation, graph)}
        if cfg.embedding == "cct":
            return {"vn": cct_features(model, y, cir, sigma2, inc)}
    elif graph.kind == "ufg":
        if cfg.embedding in ("linear", "neural"):
            mode = "linear"
            feats = ufg_vn_features(y, cir, sigma2, inc, mode=mode)
            if cfg.embedding == "neural":
                taps = np.concatenate([cir.taps.real, cir.taps.imag])
                rep = np.broadcast_to(taps, feats.shape[:2] + (taps.size,))
                feats = np.concatenate([feats, rep], axis=-1)
            return {"vn": feats}
        if cfg.embedding == "llr":
            return {"vn": ufg_vn_features(y, cir, sigma2, inc, mode="llr",
                                          constellation=constellation)}
    raise ValueError(f"no feature recipe for graph {graph.kind!r} with {cfg.embedding!r}")


def gnn_detect(model, graph, y, sigma2, cir, constellation, n_iterations,
               prior_llrs=None, runtime=None):
    """Full detection pipeline; returns per-iteration LLR tensors."""
    runtime = runtime or GraphRuntime(graph)
    feats = detection_features(model, graph, y, sigma2, cir, constellation)
    batch = np.atleast_2d(y).shape[0]
    return model.detect(runtime, feats, n_iterations=n_iterations,
                        prior_llrs=prior_llrs, batch=batch), runtime


def jdd_infer(model, joint_graph, y, sigma2, cir, constellation, schedule,
              prior_llrs=None, runtime=None):
    """Joint detection-and-decoding inference under a factor schedule."""
    runtime = runtime or GraphRuntime(joint_graph)
    feats = detection_features(model, joint_graph, y, sigma2, cir, constellation)
    batch = np.atleast_2d(y).shape[0]
    return model.detect(runtime, feats, schedule=schedule,
                        prior_llrs=prior_llrs, batch=batch), runtime


def llr_tensor_to_batch(llr_tensor):
    """(n_payload, B, nb) tensor -> (B, n_payload * nb) array of LLRs."""
    data = llr_tensor.data if isinstance(llr_tensor, ad.Tensor) else np.asarray(llr_tensor)
    n, B, nb = data.shape
    return np.ascontiguousarray(np.transpose(data, (1, 0, 2)).reshape(B, n * nb))


def bits_to_payload_layout(bits, n_payload, bits_per_symbol):
    """(B, n_payload * nb) bit array -> (n_payload, B, nb) layout."""
    bits = np.atleast_2d(np.asarray(bits))
    B = bits.shape[0]
    return np.ascontiguousarray(
        np.transpose(bits.reshape(B, n_payload, bits_per_symbol), (1, 0, 2))
    ).astype(np.float64)
