"""MPGAT network built on the autodiff engine.

Activation layouts (B = batch):
  * multivariate input          (B, F, N, T)
  * M-GAT latent                (B, N, T, F, D')   feature axis next to latent
  * spatial-temporal blocks     (B, N, C, T)
  * skip accumulator            (B, N, d_skip)
  * prediction                  (B, N, T_out)
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import IntersectionGraph, build_adjacency


class ModelRuntimeError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    n_nodes: int = 6
    n_features: int = 4
    t_in: int = 12
    t_out: int = 12
    d_latent: int = 32
    d_residual: int = 32
    d_skip: int = 64
    d_end: int = 128
    n_blocks: int = 8
    kernel_size: int = 2
    dilation_cycle: tuple = (1, 2)
    beta: float = 0.05
    prop_steps: int = 2
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.dilation_cycle = tuple(int(d) for d in self.dilation_cycle)
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.prop_steps < 0:
            raise ValueError("prop_steps must be >= 0")
        if self.n_blocks < 1 or self.kernel_size < 1:
            raise ValueError("need at least one block and kernel_size >= 1")

    @property
    def dilations(self):
        cyc = self.dilation_cycle
        return [cyc[b % len(cyc)] for b in range(self.n_blocks)]

    @property
    def receptive_field(self):
        return 1 + (self.kernel_size - 1) * sum(self.dilations)

    def to_json(self):
        doc = asdict(self)
        doc["dilation_cycle"] = list(self.dilation_cycle)
        return doc

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def init_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    D, C, K = cfg.d_latent, cfg.d_residual, cfg.kernel_size
    U1 = cfg.prop_steps + 1
    p = {
        "proj.w": _glorot(rng, (cfg.n_features, D), 1, D),
        "mgat.0.w": _glorot(rng, (2 * D,), 2 * D, 1),
        "mgat.1.w": _glorot(rng, (2 * D,), 2 * D, 1),
        "distill.w": _glorot(rng, (C, D), D, C),
    }
    for b in range(cfg.n_blocks):
        pre = f"block{b}."
        p[pre + "filter"] = _glorot(rng, (C, C, K), C * K, C)
        p[pre + "gate"] = _glorot(rng, (C, C, K), C * K, C)
        for br in ("fwd", "bwd", "glob"):
            p[pre + "wp_" + br] = _glorot(rng, (2 * C,), 2 * C, 1)
            p[pre + "mix_" + br] = _glorot(rng, (C, U1 * C), U1 * C, C)
        p[pre + "residual"] = _glorot(rng, (C, C), C, C)
        p[pre + "skip"] = _glorot(rng, (cfg.d_skip, C), C, cfg.d_skip)
    p["skip_end"] = _glorot(rng, (cfg.d_skip, C), C, cfg.d_skip)
    p["head.w1"] = _glorot(rng, (cfg.d_end, cfg.d_skip), cfg.d_skip, cfg.d_end)
    p["head.b1"] = Tensor(np.zeros(cfg.d_end), requires_grad=True)
    p["head.w2"] = _glorot(rng, (cfg.t_out, cfg.d_end), cfg.d_end, cfg.t_out)
    p["head.b2"] = Tensor(np.zeros(cfg.t_out), requires_grad=True)
    return p


# ---------------------------------------------------------------------------
# M-GAT over the feature graph of each intersection
# ---------------------------------------------------------------------------


def project_multivariate(x, w):
    """Lift each scalar feature channel to D' with its own bias-free 1x1 conv.

    ``x`` (B, F, N, T), ``w`` (F, D') -> (B, F, N, T, D').
    """
    x = ad.as_tensor(x)
    f, d = w.shape
    return ad.reshape(x, x.shape + (1,)) * ad.reshape(w, (f, 1, 1, d))


def pair_scores(h, w):
    """Source and destination halves of w^T (h_i || h_j) along axis -2 of ``h`` (..., M, D)."""
    d = h.shape[-1]
    s_src = ad.matmul(h, ad.reshape(w[:d], (d, 1)))
    s_dst = ad.matmul(h, ad.reshape(w[d:], (d, 1)))
    return s_src, s_dst


def mgat_attention(h, w_c, slope=ad.LEAKY_SLOPE):
    """Row-stochastic (..., F, F) attention among the F feature nodes of ``h`` (..., F, D')."""
    s_src, s_dst = pair_scores(h, w_c)
    e = s_src + ad.moveaxis(s_dst, -1, -2)
    return ad.softmax_lastdim(ad.leaky_relu(e, slope))


def mgat_layer(h, w_c, slope=ad.LEAKY_SLOPE):
    """ReLU(sum_j a_ij h_j) per (node, time) position; ``h`` is (..., F, D')."""
    a = mgat_attention(h, w_c, slope)
    return ad.relu(ad.matmul(a, h))


def distill_q(h_hat, w):
    """Keep the X_q feature node and mix D' -> D''.  (B, N, T, F, D') -> (B, N, D'', T)."""
    return ad.einsum("bntd,cd->bnct", h_hat[..., 0, :], w)


# ---------------------------------------------------------------------------
# temporal convolution
# ---------------------------------------------------------------------------


def tcn_forward(v, w_filter, w_gate, dilation):
    """Gated dilated causal conv, applied per node: tanh(conv_f) * sigmoid(conv_g)."""
    f = ad.tanh(ad.dilated_causal_conv1d(v, w_filter, dilation))
    g = ad.sigmoid(ad.dilated_causal_conv1d(v, w_gate, dilation))
    return f * g


# ---------------------------------------------------------------------------
# P-GAT: masked attention propagation + global attention
# ---------------------------------------------------------------------------


def pgat_attention_matrix(v, blocked, w_p, slope=ad.LEAKY_SLOPE):
    """Attention (B, N, N) over time-mean node summaries of ``v`` (B, N, C, T).

    ``blocked`` (N, N) is True where j is not a neighbour of i; those scores
    are filled with -9e15 before the LeakyReLU-softmax, giving exact zeros.
    """
    summary = ad.mean(v, axis=-1)
    s_src, s_dst = pair_scores(summary, w_p)
    e = s_src + ad.moveaxis(s_dst, -1, -2)
    if blocked is not None and np.any(blocked):
        e = ad.masked_fill(e, np.broadcast_to(blocked, e.shape), ad.MASK_FILL)
    return ad.softmax_lastdim(ad.leaky_relu(e, slope))


def propagation_states(v_in, attn, beta, steps):
    """[V^0, ..., V^U] with V^mu = (1 - beta) V_in + beta * A V^{mu-1}; V^0 = V_in."""
    v_in = ad.as_tensor(v_in)
    shape = v_in.shape
    flat = ad.reshape(v_in, shape[:-2] + (shape[-2] * shape[-1],))
    keep = flat * (1.0 - beta)
    states = [v_in]
    cur = flat
    for _ in range(steps):
        cur = keep + ad.matmul(attn, cur) * beta
        states.append(ad.reshape(cur, shape))
    return states


def pgat_propagate(v_in, attn, beta, steps, mix):
    """Propagate then fuse the U+1 states with the Delta 1x1 conv ((U+1)C -> C)."""
    states = propagation_states(v_in, attn, beta, steps)
    stacked = ad.concat(states, axis=-2)
    return ad.matmul(mix, stacked)


def adjacency_masks(graph):
    return {
        "fwd": build_adjacency(graph, "forward").mask(),
        "bwd": build_adjacency(graph, "backward").mask(),
        "glob": build_adjacency(graph, "global").mask(),
    }


def pgat_block(v, masks, params, prefix, beta, steps, slope=ad.LEAKY_SLOPE):
    """Sum of forward, backward and global branches, each with its own w_p and Delta."""
    out = None
    for br in ("fwd", "bwd", "glob"):
        attn = pgat_attention_matrix(v, masks[br], params[prefix + "wp_" + br], slope)
        y = pgat_propagate(v, attn, beta, steps, params[prefix + "mix_" + br])
        out = y if out is None else out + y
    return out


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------


class MPGAT:
    """Config + graph + parameters, with a differentiable ``forward``."""

    def __init__(self, cfg, graph, params=None, seed=0):
        if graph.n != cfg.n_nodes:
            raise ValueError(f"graph has {graph.n} nodes but config expects {cfg.n_nodes}")
        self.cfg = cfg
        self.graph = graph
        self.masks = adjacency_masks(graph)
        self.params = params if params is not None else init_params(cfg, seed)
        self._check_shapes()

    def _check_shapes(self):
        ref = init_params(self.cfg, 0)
        if set(ref) != set(self.params):
            raise ValueError(f"parameter names differ from config: {sorted(set(ref) ^ set(self.params))}")
        for k, v in ref.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {v.shape}")

    def n_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def forward(self, x):
        cfg, p = self.cfg, self.params
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (cfg.n_features, cfg.n_nodes, cfg.t_in):
            raise ad.ShapeError(
                f"expected input (B, {cfg.n_features}, {cfg.n_nodes}, {cfg.t_in}), got {x.shape}"
            )
        h = project_multivariate(x, p["proj.w"])
        h = ad.transpose(h, (0, 2, 3, 1, 4))
        h = mgat_layer(h, p["mgat.0.w"], cfg.leaky_slope)
        h = mgat_layer(h, p["mgat.1.w"], cfg.leaky_slope)
        v = distill_q(h, p["distill.w"])

        skip = None
        for b, dil in enumerate(cfg.dilations):
            pre = f"block{b}."
            z = tcn_forward(v, p[pre + "filter"], p[pre + "gate"], dil)
            tap = ad.matmul(z[..., -1], ad.transpose(p[pre + "skip"]))
            skip = tap if skip is None else skip + tap
            g = pgat_block(z, self.masks, p, pre, cfg.beta, cfg.prop_steps, cfg.leaky_slope)
            v = g + ad.matmul(p[pre + "residual"], v)
            if not np.all(np.isfinite(v.data)):
                raise ModelRuntimeError(f"non-finite activation in spatial-temporal block {b}")

        # the last block's output has no later TCN, so it gets its own tap
        skip = skip + ad.matmul(v[..., -1], ad.transpose(p["skip_end"]))
        out = ad.matmul(ad.relu(skip), ad.transpose(p["head.w1"])) + p["head.b1"]
        out = ad.matmul(ad.relu(out), ad.transpose(p["head.w2"])) + p["head.b2"]
        return out

    __call__ = forward

    def predict(self, x, batch_size=512):
        """Normalized-unit predictions as a numpy array, no graph recorded."""
        x = np.asarray(x, dtype=np.float64)
        outs = []
        with ad.no_grad():
            for lo in range(0, len(x), batch_size):
                outs.append(self.forward(x[lo : lo + batch_size]).data)
        return np.concatenate(outs, axis=0)

    def header(self):
        return {"model": "mpgat", "config": self.cfg.to_json(), "graph": self.graph.to_json()}

    def save(self, path, extra=None):
        header = self.header()
        if extra:
            header.update(extra)
        ad.save_params(path, self.params, header)

    @classmethod
    def load(cls, path):
        params, header = ad.load_params(path)
        if header.get("model") != "mpgat":
            raise ValueError(f"{path}: checkpoint header is not an MPGAT model")
        cfg = ModelConfig.from_json(header["config"])
        g = header["graph"]
        graph = IntersectionGraph(g["n"], tuple(map(tuple, g["edges"])), tuple(g.get("labels", ())))
        return cls(cfg, graph, params), header
