"""Context-conditioned entropy model for quantized RAHT coefficients.

For every transmitted coefficient the model builds

* an initial-coding context ``I`` from the node itself (``H``: depth, weight,
  reconstructed low coefficient and attribute) and from all nodes of its
  level pooled at four scales (``L``);
* an inter-channel context ``C`` from the already decoded channels at the
  same node (``C``) and at nearby high-frequency nodes (``S``), zero for the
  first channel;

and maps ``[I, C]`` to the biases and input scale of a per-channel monotone
cumulative network ``c(x)``. Symbol probabilities are ``c(r + 1/2) - c(r - 1/2)``.
Everything the contexts read is available to the decoder before the symbol
itself is decoded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .nn import glorot, init_mlp, mlp_backward, mlp_forward, sigmoid, softplus, softplus_inv
from .raht import RahtTree

COMPONENTS = "HLCS"
SCALES = (1, 2, 3, 4)
PROJ_DIMS = (3, 3, 6, 8)
HIDDEN = (8, 16, 8)
EMB = HIDDEN[-1]
HEAD_OUT = 9  # layer-0 bias (3), layer-1 bias (3), output bias (1), log scale (1), location (1)
PROB_FLOOR = 1e-9
MAX_CODED_BOUND = 1024

MAGIC = b"3DACNN"
VERSION = 1


class ModelError(ValueError):
    pass


def parse_components(text) -> str:
    if text in (None, "", "none", "factorized"):
        return ""
    text = str(text).upper()
    bad = set(text) - set(COMPONENTS)
    if bad:
        raise ValueError(f"unknown context components {sorted(bad)}; choose from {COMPONENTS}")
    return "".join(c for c in COMPONENTS if c in text)


# ---------------------------------------------------------------- node context


def node_features(tree: RahtTree, depth: int, lows: np.ndarray) -> np.ndarray:
    """Normalized [depth, log2 weight, low / 255, low / sqrt(w) / 255] per node."""
    lv = tree.levels[depth]
    w = lv.weight.astype(np.float64)
    bd = tree.binary_depth
    attr = lows / np.sqrt(w)[:, None]
    return np.column_stack(
        [np.full(len(w), depth / bd), np.log2(w) / bd, lows / 255.0, attr / 255.0]
    )


def n_node_features(n_channels: int) -> int:
    return 2 + 2 * n_channels


def l_dim(n_channels: int) -> int:
    """Width of the low-frequency context: pooled projections plus gradients."""
    return sum(PROJ_DIMS) + len(SCALES) * n_channels


# ---------------------------------------------------------------- pooling


def _cell_keys(cells):
    c = cells.astype(np.int64) + 1
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def pool_matrix(node_pos, query_pos, scale: int, strict: bool = True):
    """Row-stochastic (queries x nodes) map: cell means, then trilinear lookup.

    Nodes are averaged into cubic cells of side ``2**scale``; each query
    interpolates between the 8 surrounding cell centers, renormalized over
    the occupied ones. A query with no occupied neighbouring cell raises,
    or gets an all-zero row when ``strict`` is false.
    """
    node_pos = np.asarray(node_pos, dtype=np.int64).reshape(-1, 3)
    query_pos = np.asarray(query_pos, dtype=np.float64).reshape(-1, 3)
    n, m = len(node_pos), len(query_pos)
    if n == 0 or m == 0:
        return sparse.csr_matrix((m, n))
    side = float(1 << scale)
    keys = _cell_keys(node_pos >> scale)
    uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    avg = sparse.csr_matrix(
        (1.0 / counts[inv], (inv, np.arange(n))), shape=(len(uniq), n)
    )
    u = (query_pos + 0.5) / side - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base
    rows, cols, vals = [], [], []
    for corner in range(8):
        off = np.array([(corner >> a) & 1 for a in range(3)])
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        key = _cell_keys(base + off)
        idx = np.clip(np.searchsorted(uniq, key), 0, len(uniq) - 1)
        hit = (uniq[idx] == key) & (w > 0)
        rows.append(np.flatnonzero(hit))
        cols.append(idx[hit])
        vals.append(w[hit])
    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    lookup = sparse.csr_matrix((vals, (rows, cols)), shape=(m, len(uniq)))
    norm = np.asarray(lookup.sum(axis=1)).ravel()
    empty = norm <= 0
    if strict and np.any(empty):
        raise ValueError("query point has no occupied neighbouring cell")
    lookup = sparse.diags(np.where(empty, 0.0, 1.0 / np.where(empty, 1.0, norm))) @ lookup
    return (lookup @ avg).tocsr()


def gradient_matrix(node_pos, query_pos, scale: int, axis: int):
    """Difference of pooled lookups at ``+-2**(scale-1)`` along ``axis``.

    A side without occupied cells falls back to the query itself, giving a
    one-sided difference (or zero when both sides are empty).
    """
    query_pos = np.asarray(query_pos, dtype=np.float64).reshape(-1, 3)
    center = pool_matrix(node_pos, query_pos, scale)
    step = np.zeros(3)
    step[axis] = 2.0 ** (scale - 1)
    sides = []
    for sign in (1.0, -1.0):
        side = pool_matrix(node_pos, query_pos + sign * step, scale, strict=False)
        hit = np.asarray(side.sum(axis=1)).ravel() > 0
        keep = sparse.diags(hit.astype(np.float64))
        sides.append(keep @ side + sparse.diags((~hit).astype(np.float64)) @ center)
    return (sides[0] - sides[1]).tocsr()


def merge_axis(depth: int) -> int:
    """Axis along which the pairs of level ``depth`` were merged."""
    return (depth - 1) % 3


class Pyramid:
    """Multi-scale mean-pooled feature volumes over the nodes of one level.

    ``features`` is one (N, F) array shared by every scale or a list with one
    array per scale (e.g. per-scale projections).
    """

    def __init__(self, positions, features, scales=SCALES):
        self.positions = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
        self.scales = tuple(scales)
        if isinstance(features, (list, tuple)):
            self.features = [np.asarray(f, dtype=np.float64) for f in features]
        else:
            self.features = [np.asarray(features, dtype=np.float64)] * len(self.scales)
        if len(self.features) != len(self.scales):
            raise ValueError("need one feature array per scale")

    @property
    def width(self) -> int:
        return sum(f.shape[1] for f in self.features)

    def query(self, positions) -> np.ndarray:
        """Trilinearly interpolated features, scales concatenated: (m, width)."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) == 0:
            return np.zeros((len(positions), self.width))
        return np.concatenate(
            [pool_matrix(self.positions, positions, s) @ f for s, f in zip(self.scales, self.features)],
            axis=1,
        )


# ---------------------------------------------------------------- samples


@dataclass
class LevelContext:
    """Inputs for the high-frequency nodes of one level that need no symbols."""

    depth: int
    positions: np.ndarray
    node_ctx: np.ndarray  # features of the level's high-frequency nodes
    level_feats: np.ndarray  # features of every node of the level
    pool: list  # per scale, (high nodes x level nodes)
    spatial: list  # per scale, (high nodes x high nodes)
    gradient: np.ndarray  # merge-axis attribute differences in quantizer steps, per scale


def level_context(tree: RahtTree, depth: int, lows: np.ndarray, qstep: float) -> LevelContext:
    lv = tree.levels[depth]
    idx = lv.high_nodes
    feats = node_features(tree, depth, lows)
    pos = lv.pos[idx]
    axis = merge_axis(depth)
    pool = [pool_matrix(lv.pos, pos, s) for s in SCALES]
    spatial = [pool_matrix(pos, pos, s) for s in SCALES]
    attr = lows / np.sqrt(lv.weight.astype(np.float64))[:, None] / qstep
    grad = np.concatenate([gradient_matrix(lv.pos, pos, s, axis) @ attr for s in SCALES], axis=1)
    return LevelContext(depth, pos, feats[idx], feats, pool, spatial, grad)


def previous_channels(deq: np.ndarray, channel: int, n_channels: int, qstep: float) -> np.ndarray:
    """Coefficients of channels before ``channel`` in quantizer steps, zero padded."""
    prev = np.zeros((len(deq), max(n_channels - 1, 0)))
    if channel:
        prev[:, :channel] = deq[:, :channel] / qstep
    return prev


@dataclass
class Sample:
    """Model inputs for a set of high-frequency nodes (one level or a whole cloud)."""

    node_ctx: np.ndarray
    level_feats: np.ndarray
    pool: list
    spatial: list
    gradient: np.ndarray
    prev: list = field(default_factory=list)  # per channel (m, n-1)
    symbols: np.ndarray | None = None  # (m, n)

    def __len__(self):
        return len(self.node_ctx)

    @classmethod
    def from_level(cls, ctx: LevelContext, prev=None, symbols=None):
        return cls(ctx.node_ctx, ctx.level_feats, ctx.pool, ctx.spatial, ctx.gradient, prev or [], symbols)


def cloud_sample(tree: RahtTree, lows_by_depth, symbols_by_depth, qstep) -> Sample:
    """Teacher-forced sample covering every transmitted level of a cloud."""
    n = tree.n_channels
    f = n_node_features(n)
    ctxs, prevs, syms = [], [], []
    for d in tree.transmission_levels():
        ctx = level_context(tree, d, lows_by_depth[d], qstep)
        sym = np.asarray(symbols_by_depth[d], dtype=np.int64)
        deq = sym * qstep
        ctxs.append(ctx)
        prevs.append([previous_channels(deq, ch, n, qstep) for ch in range(n)])
        syms.append(sym)
    if not ctxs:
        empty = sparse.csr_matrix((0, 0))
        return Sample(
            np.zeros((0, f)),
            np.zeros((0, f)),
            [empty] * len(SCALES),
            [empty] * len(SCALES),
            np.zeros((0, len(SCALES) * n)),
            [np.zeros((0, max(n - 1, 0)))] * n,
            np.zeros((0, n), dtype=np.int64),
        )
    cat = np.concatenate

    def blocks(attr, k):
        return sparse.block_diag([getattr(c, attr)[k] for c in ctxs], format="csr")

    return Sample(
        node_ctx=cat([c.node_ctx for c in ctxs]),
        level_feats=cat([c.level_feats for c in ctxs]),
        pool=[blocks("pool", k) for k in range(len(SCALES))],
        spatial=[blocks("spatial", k) for k in range(len(SCALES))],
        gradient=cat([c.gradient for c in ctxs]),
        prev=[cat([p[ch] for p in prevs]) for ch in range(n)],
        symbols=cat(syms),
    )


# ---------------------------------------------------------------- model


class DensityModel:
    """Context networks plus one conditioned monotone density per channel."""

    def __init__(self, n_channels: int, components: str = COMPONENTS, seed: int = 0):
        if not 1 <= n_channels <= 255:
            raise ValueError("n_channels must be in 1..255")
        self.n_channels = n_channels
        self.components = parse_components(components)
        self.params = self._declare(np.random.default_rng(seed))
        self.round_to_f32()

    # -- parameters

    def _declare(self, rng):
        n = self.n_channels
        f = n_node_features(n)
        p = {}
        init_mlp(p, rng, "h", (f,) + HIDDEN)
        for k, d in enumerate(PROJ_DIMS):
            p[f"l.W{k}"] = glorot(rng, f, d)
            p[f"l.b{k}"] = np.zeros(d)
        init_mlp(p, rng, "I", (EMB + l_dim(n),) + HIDDEN)
        if n > 1:
            init_mlp(p, rng, "c", (n - 1,) + HIDDEN)
            for k, d in enumerate(PROJ_DIMS):
                p[f"s.W{k}"] = glorot(rng, 2 * (n - 1), d)
                p[f"s.b{k}"] = np.zeros(d)
            init_mlp(p, rng, "C", (EMB + sum(PROJ_DIMS),) + HIDDEN)
        one = softplus_inv(1.0)
        for ch in range(n):
            # zero head keeps the initial density symmetric around 0
            p[f"d{ch}.head_W"] = np.zeros((2 * EMB, HEAD_OUT))
            p[f"d{ch}.head_b"] = np.zeros(HEAD_OUT)
            p[f"d{ch}.H0"] = np.full((3, 1), one)
            p[f"d{ch}.H1"] = np.full((3, 3), one)
            p[f"d{ch}.H2"] = np.full((1, 3), one)
            p[f"d{ch}.a0"] = np.zeros(3)
            p[f"d{ch}.a1"] = np.zeros(3)
        return p

    def round_to_f32(self):
        for k, v in self.params.items():
            self.params[k] = v.astype(np.float32).astype(np.float64)

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def parameter_groups(self):
        """Parameter names grouped by sub-network, restricted to active parts."""
        groups = {}
        for name in self.params:
            head = name.split(".")[0]
            if head == "h" and "H" not in self.components:
                continue
            if head == "l" and "L" not in self.components:
                continue
            if head == "I" and not set("HL") & set(self.components):
                continue
            if head == "c" and "C" not in self.components:
                continue
            if head == "s" and "S" not in self.components:
                continue
            if head == "C" and not set("CS") & set(self.components):
                continue
            groups.setdefault(head, []).append(name)
        return groups

    def check_finite(self):
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ModelError(f"parameter {k} is not finite")

    # -- context networks

    def _initial(self, s: Sample):
        m = len(s)
        use_h, use_l = "H" in self.components, "L" in self.components
        if not (use_h or use_l):
            return np.zeros((m, EMB)), None
        p = self.params
        if use_h:
            h, hcache = mlp_forward(p, "h", s.node_ctx, 3)
        else:
            h, hcache = np.zeros((m, EMB)), None
        if use_l:
            l, lcache = _pyramid_forward(p, "l", s.level_feats, s.pool)
            l = np.concatenate([l, s.gradient], axis=1)
        else:
            l, lcache = np.zeros((m, l_dim(self.n_channels))), None
        out, icache = mlp_forward(p, "I", np.concatenate([h, l], axis=1), 3)
        return out, (hcache, lcache, icache)

    def _initial_backward(self, s, cache, d_out, g):
        if cache is None:
            return
        hcache, lcache, icache = cache
        p = self.params
        d_in = mlp_backward(p, "I", icache, d_out, g)
        if hcache is not None:
            mlp_backward(p, "h", hcache, d_in[:, :EMB], g)
        if lcache is not None:
            _pyramid_backward("l", s.level_feats, s.pool, lcache, d_in[:, EMB : EMB + sum(PROJ_DIMS)], g)

    def _channel(self, s: Sample, ch: int):
        m = len(s)
        use_c, use_s = "C" in self.components, "S" in self.components
        if ch == 0 or self.n_channels == 1 or not (use_c or use_s):
            return np.zeros((m, EMB)), None
        p = self.params
        if use_c:
            c, ccache = mlp_forward(p, "c", s.prev[ch], 3)
        else:
            c, ccache = np.zeros((m, EMB)), None
        if use_s:
            sv, scache = _pyramid_forward(p, "s", _signed_and_abs(s.prev[ch]), s.spatial)
        else:
            sv, scache = np.zeros((m, sum(PROJ_DIMS))), None
        out, fcache = mlp_forward(p, "C", np.concatenate([c, sv], axis=1), 3)
        return out, (ccache, scache, fcache)

    def _channel_backward(self, s, ch, cache, d_out, g):
        if cache is None:
            return
        ccache, scache, fcache = cache
        p = self.params
        d_in = mlp_backward(p, "C", fcache, d_out, g)
        if ccache is not None:
            mlp_backward(p, "c", ccache, d_in[:, :EMB], g)
        if scache is not None:
            _pyramid_backward("s", _signed_and_abs(s.prev[ch]), s.spatial, scache, d_in[:, EMB:], g)

    def initial_context(self, s: Sample) -> np.ndarray:
        return self._initial(s)[0]

    def channel_context(self, s: Sample, ch: int) -> np.ndarray:
        return self._channel(s, ch)[0]

    # -- density

    def _density(self, ch, theta, x):
        p = self.params
        H0 = softplus(p[f"d{ch}.H0"])[:, 0]
        H1 = softplus(p[f"d{ch}.H1"])
        H2 = softplus(p[f"d{ch}.H2"])[0]
        ta0 = np.tanh(p[f"d{ch}.a0"])
        ta1 = np.tanh(p[f"d{ch}.a1"])
        scale = np.exp(-theta[:, 7])
        u = (x - theta[:, 8:9]) * scale[:, None]
        z0 = u[..., None] * H0 + theta[:, None, 0:3]
        t0 = np.tanh(z0)
        y0 = z0 + ta0 * t0
        z1 = y0 @ H1.T + theta[:, None, 3:6]
        t1 = np.tanh(z1)
        y1 = z1 + ta1 * t1
        f = y1 @ H2 + theta[:, 6:7]
        return f, (H0, H1, H2, ta0, ta1, u, t0, y0, t1, y1, scale)

    def _density_backward(self, ch, cache, df, g):
        H0, H1, H2, ta0, ta1, u, t0, y0, t1, y1, scale = cache
        p = self.params
        dy1 = df[..., None] * H2
        gH2 = np.einsum("np,npk->k", df, y1)
        db2 = df.sum(axis=1)
        dz1 = dy1 * (1.0 + ta1 * (1.0 - t1 * t1))
        ga1 = np.einsum("npk,npk->k", dy1, t1) * (1.0 - ta1 * ta1)
        gH1 = np.einsum("npk,npj->kj", dz1, y0)
        db1 = dz1.sum(axis=1)
        dy0 = dz1 @ H1
        dz0 = dy0 * (1.0 + ta0 * (1.0 - t0 * t0))
        ga0 = np.einsum("npk,npk->k", dy0, t0) * (1.0 - ta0 * ta0)
        gH0 = np.einsum("npk,np->k", dz0, u)
        db0 = dz0.sum(axis=1)
        du = dz0 @ H0
        dlog = -(du * u).sum(axis=1)
        dloc = -(du.sum(axis=1) * scale)
        g[f"d{ch}.H0"] += gH0[:, None] * sigmoid(p[f"d{ch}.H0"])
        g[f"d{ch}.H1"] += gH1 * sigmoid(p[f"d{ch}.H1"])
        g[f"d{ch}.H2"] += gH2[None, :] * sigmoid(p[f"d{ch}.H2"])
        g[f"d{ch}.a0"] += ga0
        g[f"d{ch}.a1"] += ga1
        return np.column_stack([db0, db1, db2, dlog, dloc])

    def cdf_logits(self, ch, emb, x):
        """Pre-sigmoid cumulative values at points ``x`` (per-row, shape (m, P))."""
        theta = emb @ self.params[f"d{ch}.head_W"] + self.params[f"d{ch}.head_b"]
        return self._density(ch, theta, np.asarray(x, dtype=np.float64))[0]

    def cdf(self, ch, emb, x):
        return sigmoid(self.cdf_logits(ch, emb, x))

    def embedding(self, s: Sample, ch: int) -> np.ndarray:
        return np.concatenate([self.initial_context(s), self.channel_context(s, ch)], axis=1)

    # -- probabilities

    def pmf(self, s: Sample, ch: int, bound: int) -> np.ndarray:
        """Rows of [P(< -B), P(-B), ..., P(B), P(> B)] for every node of ``s``."""
        self.check_finite()
        return self.pmf_from_embedding(self.embedding(s, ch), ch, bound)

    def pmf_from_embedding(self, emb, ch: int, bound: int) -> np.ndarray:
        if bound < 0:
            raise ValueError("bound must be non-negative")
        edges = np.arange(-bound - 0.5, bound + 1.0, 1.0)
        m = len(emb)
        out = np.empty((m, 2 * bound + 3))
        step = max(1, 2_000_000 // len(edges))
        for a in range(0, m, step):
            rows = min(step, m - a)
            f = self.cdf_logits(ch, emb[a : a + rows], np.broadcast_to(edges, (rows, len(edges))))
            out[a : a + rows, 0] = sigmoid(f[:, 0])
            out[a : a + rows, -1] = sigmoid(-f[:, -1])
            out[a : a + rows, 1:-1] = _bin_probs(f[:, :-1], f[:, 1:])
        return out

    def project(self, prefix: str, feats) -> list:
        """Per-scale pooling inputs tanh(x W_k + b_k) of the ``l`` or ``s`` path."""
        feats = np.asarray(feats, dtype=np.float64)
        if prefix == "s":
            feats = _signed_and_abs(feats)
        return [
            np.tanh(feats @ self.params[f"{prefix}.W{k}"] + self.params[f"{prefix}.b{k}"])
            for k in range(len(SCALES))
        ]

    def symbol_probs(self, s: Sample, ch: int, symbols) -> np.ndarray:
        emb = self.embedding(s, ch)
        r = np.asarray(symbols, dtype=np.float64)
        f = self.cdf_logits(ch, emb, np.column_stack([r - 0.5, r + 0.5]))
        return _bin_probs(f[:, 0], f[:, 1])

    # -- training objective

    def loss(self, samples) -> float:
        return self.loss_and_grad(samples, need_grad=False)[0]

    def loss_and_grad(self, samples, need_grad=True):
        """Summed cross-entropy in nats over every symbol of ``samples``."""
        if isinstance(samples, Sample):
            samples = [samples]
        g = self.zero_grads() if need_grad else None
        total = 0.0
        p = self.params
        for s in samples:
            if len(s) == 0:
                continue
            I, icache = self._initial(s)
            dI = np.zeros_like(I)
            for ch in range(self.n_channels):
                C, ccache = self._channel(s, ch)
                emb = np.concatenate([I, C], axis=1)
                theta = emb @ p[f"d{ch}.head_W"] + p[f"d{ch}.head_b"]
                r = s.symbols[:, ch].astype(np.float64)
                f, dcache = self._density(ch, theta, np.column_stack([r - 0.5, r + 0.5]))
                lo, up = f[:, 0], f[:, 1]
                prob = _bin_probs(lo, up)
                kept = prob > PROB_FLOOR
                total -= np.log(np.where(kept, prob, PROB_FLOOR)).sum()
                if not need_grad:
                    continue
                dprob = np.where(kept, -1.0 / np.where(kept, prob, 1.0), 0.0)
                df = np.column_stack([-dprob * _dsigmoid(lo), dprob * _dsigmoid(up)])
                dtheta = self._density_backward(ch, dcache, df, g)
                g[f"d{ch}.head_W"] += emb.T @ dtheta
                g[f"d{ch}.head_b"] += dtheta.sum(axis=0)
                demb = dtheta @ p[f"d{ch}.head_W"].T
                dI += demb[:, :EMB]
                self._channel_backward(s, ch, ccache, demb[:, EMB:], g)
            if need_grad:
                self._initial_backward(s, icache, dI, g)
        return float(total), g

    # -- persistence

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        flags = sum(1 << COMPONENTS.index(c) for c in self.components)
        out = bytearray(MAGIC)
        out += struct.pack("<BBBH", VERSION, self.n_channels, flags, len(self.params))
        for v in self.params.values():
            out += struct.pack("<B", v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape)
        for v in self.params.values():
            out += np.ascontiguousarray(v, dtype="<f4").tobytes()
        return bytes(out)

    @classmethod
    def load(cls, path) -> "DensityModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    @classmethod
    def from_bytes(cls, data: bytes) -> "DensityModel":
        if data[: len(MAGIC)] != MAGIC:
            raise ModelError("not a model file (bad magic)")
        pos = len(MAGIC)
        try:
            version, n_channels, flags, count = struct.unpack_from("<BBBH", data, pos)
        except struct.error as exc:
            raise ModelError("model file truncated") from exc
        if version != VERSION:
            raise ModelError(f"unsupported model version {version}")
        pos += 5
        components = "".join(c for i, c in enumerate(COMPONENTS) if flags >> i & 1)
        model = cls(n_channels, components)
        if count != len(model.params):
            raise ModelError("model tensor table does not match this architecture")
        shapes = []
        try:
            for _ in range(count):
                (ndim,) = struct.unpack_from("<B", data, pos)
                pos += 1
                shapes.append(struct.unpack_from(f"<{ndim}I", data, pos))
                pos += 4 * ndim
            for (name, ref), shape in zip(model.params.items(), shapes):
                if tuple(shape) != ref.shape:
                    raise ModelError(f"tensor {name} has shape {shape}, expected {ref.shape}")
                size = int(np.prod(shape)) * 4
                if pos + size > len(data):
                    raise ModelError("model file truncated")
                model.params[name] = (
                    np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos)
                    .reshape(shape)
                    .astype(np.float64)
                )
                pos += size
        except struct.error as exc:
            raise ModelError("model file truncated") from exc
        if pos != len(data):
            raise ModelError("trailing bytes in model file")
        model.check_finite()
        return model

    def copy(self) -> "DensityModel":
        other = DensityModel.__new__(DensityModel)
        other.n_channels = self.n_channels
        other.components = self.components
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def _signed_and_abs(x):
    """Spatial inputs: coefficients and their magnitudes (local energy survives pooling)."""
    return np.concatenate([x, np.abs(x)], axis=1)


def _pyramid_forward(params, prefix, feats, mats):
    """Project node features per scale (tanh), pool them, concatenate scales."""
    parts, acts = [], []
    for k, mat in enumerate(mats):
        a = np.tanh(feats @ params[f"{prefix}.W{k}"] + params[f"{prefix}.b{k}"])
        acts.append(a)
        parts.append(mat @ a)
    return np.concatenate(parts, axis=1), acts


def _pyramid_backward(prefix, feats, mats, acts, d_out, g):
    col = 0
    for k, (mat, a) in enumerate(zip(mats, acts)):
        width = a.shape[1]
        dz = (mat.T @ d_out[:, col : col + width]) * (1.0 - a * a)
        g[f"{prefix}.W{k}"] += feats.T @ dz
        g[f"{prefix}.b{k}"] += dz.sum(axis=0)
        col += width


def _bin_probs(lo, up):
    """c(up) - c(lo) from logits, evaluated on the flatter side of the sigmoid."""
    flip = (lo + up) > 0
    return np.where(flip, sigmoid(-lo) - sigmoid(-up), sigmoid(up) - sigmoid(lo))


def _dsigmoid(x):
    return sigmoid(x) * sigmoid(-x)


# ---------------------------------------------------------------- single-step views


def high_freq_context(model: DensityModel, tree: RahtTree, depth: int, index: int, lows) -> np.ndarray:
    """Embedding h_j of one high-frequency node from decode-side lows."""
    lv = tree.levels[depth]
    if not 0 <= index < len(lv) or not lv.is_high[index]:
        raise ValueError(f"node {index} at level {depth} is not a high-frequency node")
    feats = node_features(tree, depth, np.asarray(lows, dtype=np.float64))[index : index + 1]
    return mlp_forward(model.params, "h", feats, 3)[0][0]


def multiscale_pool(model: DensityModel, positions, features, prefix: str = "l") -> Pyramid:
    """Pyramid over projected ``features`` (node contexts for ``l``, coefficients for ``s``)."""
    return Pyramid(positions, model.project(prefix, features))


def fuse_initial(model: DensityModel, h, l) -> np.ndarray:
    x = np.concatenate([np.atleast_2d(h), np.atleast_2d(l)], axis=1)
    return mlp_forward(model.params, "I", x, 3)[0]


def inter_channel_context(model: DensityModel, channel: int, prev, spatial) -> np.ndarray:
    """C_j for ``channel``; all zeros for the first channel."""
    prev = np.atleast_2d(np.asarray(prev, dtype=np.float64))
    if channel == 0 or model.n_channels == 1:
        return np.zeros((len(prev), EMB))
    c = mlp_forward(model.params, "c", prev, 3)[0]
    return mlp_forward(model.params, "C", np.concatenate([c, np.atleast_2d(spatial)], axis=1), 3)[0]


def predict_pmf(model: DensityModel, initial, inter, channel: int, bound: int) -> np.ndarray:
    """PMF rows [tail_lo, -B..B, tail_hi] from fused contexts I_j and C_j."""
    model.check_finite()
    emb = np.concatenate([np.atleast_2d(initial), np.atleast_2d(inter)], axis=1)
    return model.pmf_from_embedding(emb, channel, bound)
