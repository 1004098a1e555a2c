"""Spatio-temporal forecaster: embedding, attention + Chebyshev blocks, two output heads."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import adaptive
from .adaptive import GraphState, MacroParams, MicroParams
from .graph import ChebCoeffs, cheb_conv_steps, scaled_laplacian_from_adjacency
from .tensor import ShapeError, Tensor, as_tensor, conv1d, conv2d, linear, matmul, relu, reshape, softmax


@dataclass
class ModelConfig:
    n_nodes: int
    in_features: int
    in_steps: int = 24
    out_steps: int = 6
    d_model: int = 64
    heads: int = 2
    blocks: int = 3
    cheb_order: int = 3
    target_index: int = 0
    use_moran: bool = True
    use_macro: bool = True
    use_micro: bool = True
    uncertainty: bool = False
    macro_dim: int = 16
    micro_hidden: int = 16
    head_hidden: int = 16
    aux_hidden: int = 16

    def __post_init__(self):
        for name in ("n_nodes", "in_features", "in_steps", "out_steps", "d_model", "heads",
                     "blocks", "cheb_order", "macro_dim", "micro_hidden", "head_hidden", "aux_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0 <= self.target_index < self.in_features:
            raise ValueError(f"target_index {self.target_index} out of range")
        if self.use_micro and self.in_steps < 3:
            raise ValueError("micro graph learning needs in_steps >= 3")

    def to_dict(self) -> dict:
        return asdict(self)


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V over the second-to-last (time) axis."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def multi_head_attention(x: Tensor, heads: int, wq: Tensor, wk: Tensor, wv: Tensor,
                         wo: Tensor) -> Tensor:
    """Temporal multi-head self-attention, independently per node. ``x`` is (B, N, T, d)."""
    *lead, t, d = x.shape
    if d % heads:
        raise ValueError(f"d_model={d} is not divisible by heads={heads}")
    dk = d // heads

    def split(z):
        z = reshape(z, tuple(lead) + (t, heads, dk))
        nl = len(lead)
        return z.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2))

    out = attention(split(matmul(x, wq)), split(matmul(x, wk)), split(matmul(x, wv)))
    nl = len(lead)
    out = out.transpose(tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return matmul(reshape(out, tuple(lead) + (t, d)), wo)


def _uniform(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class STForecaster:
    """Adaptive-graph spatio-temporal forecaster with an optional Moran auxiliary head."""

    def __init__(self, config: ModelConfig, a0: np.ndarray, seed: int = 0):
        a0 = np.asarray(a0, dtype=np.float64)
        if a0.shape != (config.n_nodes, config.n_nodes):
            raise ShapeError(f"A0 shape {a0.shape} does not match n_nodes={config.n_nodes}")
        self.config = config
        self.a0 = a0
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------------

    def _add(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t.requires_grad = True
        t.name = name
        self.params[name] = t
        return t

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d = c.d_model
        self._add("embed.weight", _uniform(rng, (c.in_features, d), c.in_features, d))
        self._add("embed.bias", Tensor(np.zeros(d)))
        self._add("embed.pos", Tensor(rng.normal(0.0, 0.02, (c.in_steps, d))))
        if c.use_macro:
            mp = MacroParams.init(c.in_features, c.macro_dim, rng)
            self._add("macro.phi_weight", mp.phi_weight)
            self._add("macro.phi_bias", mp.phi_bias)
        if c.use_micro:
            mi = MicroParams.init(c.n_nodes, c.in_features, c.in_steps, c.micro_hidden, rng)
            self._add("micro.conv1", mi.conv1)
            self._add("micro.conv2", mi.conv2)
        for i in range(c.blocks):
            for w in ("wq", "wk", "wv", "wo"):
                self._add(f"block{i}.{w}", _uniform(rng, (d, d), d, d))
            cc = ChebCoeffs.init(c.cheb_order, d, d, rng)
            self._add(f"block{i}.cheb.theta", cc.theta)
            self._add(f"block{i}.cheb.weights", cc.weights)
        tau, hh = c.out_steps, c.head_hidden
        self._add("head.conv1.weight", _uniform(rng, (tau, c.in_steps, 1, 1), c.in_steps, tau))
        self._add("head.conv1.bias", Tensor(np.zeros(tau)))
        self._add("head.conv2.weight", _uniform(rng, (hh, d, 1, 1), d, hh))
        self._add("head.conv2.bias", Tensor(np.zeros(hh)))
        self._add("head.conv3.weight", _uniform(rng, (1, hh, 3), 3 * hh, 3))
        self._add("head.conv3.bias", Tensor(np.zeros(1)))
        if c.use_moran:
            ah = c.aux_hidden
            self._add("aux.fc1.weight", _uniform(rng, (c.in_steps, ah), c.in_steps, ah))
            self._add("aux.fc1.bias", Tensor(np.zeros(ah)))
            self._add("aux.fc2.weight", _uniform(rng, (ah, tau), ah, tau))
            self._add("aux.fc2.bias", Tensor(np.zeros(tau)))
            if c.uncertainty:
                self._add("loss.log_var_main", Tensor(0.0))
                self._add("loss.log_var_aux", Tensor(0.0))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def macro_params(self) -> MacroParams:
        return MacroParams(self.params["macro.phi_weight"], self.params["macro.phi_bias"])

    def micro_params(self) -> MicroParams:
        return MicroParams(self.params["micro.conv1"], self.params["micro.conv2"])

    def cheb(self, i: int) -> ChebCoeffs:
        return ChebCoeffs(self.params[f"block{i}.cheb.theta"], self.params[f"block{i}.cheb.weights"])

    # -- forward pieces -----------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.n_nodes, c.in_steps, c.in_features):
            raise ShapeError(
                f"expected input (B, {c.n_nodes}, {c.in_steps}, {c.in_features}), got {x.shape}"
            )

    def embed(self, x: Tensor) -> Tensor:
        p = self.params
        return linear(x, p["embed.weight"], p["embed.bias"]) + p["embed.pos"]

    def graph(self, x: Tensor) -> GraphState:
        """Per-window learned graph for a (B, N, T, C) batch."""
        c = self.config
        x = as_tensor(x)
        b = x.shape[0]
        if c.use_macro:
            x_mean = as_tensor(x.data.mean(axis=2))
            a_macro = adaptive.macro_adjacency(x_mean, self.macro_params(), self.a0)
        else:
            a_macro = Tensor(np.broadcast_to(self.a0, (b,) + self.a0.shape))
        if c.use_micro:
            a_micro = adaptive.micro_adjacency(x, self.micro_params())
        else:
            a_micro = Tensor(np.ones((b, c.n_nodes, c.n_nodes)))
        return GraphState(self.a0, a_macro, a_micro, adaptive.fuse(a_macro, a_micro))

    def st_block(self, h: Tensor, lt: Tensor, i: int) -> Tensor:
        """h + ChebConv(MHA(h)) with the graph convolution applied at every time step."""
        p = self.params
        z = multi_head_attention(h, self.config.heads, p[f"block{i}.wq"], p[f"block{i}.wk"],
                                 p[f"block{i}.wv"], p[f"block{i}.wo"])
        return h + cheb_conv_steps(z, lt, self.cheb(i))

    def main_head(self, hid: Tensor) -> Tensor:
        p = self.params
        b, n, t, d = hid.shape
        z = conv2d(hid.transpose(0, 2, 1, 3), p["head.conv1.weight"], p["head.conv1.bias"])
        z = relu(z)  # (B, tau, N, d)
        z = conv2d(z.transpose(0, 3, 2, 1), p["head.conv2.weight"], p["head.conv2.bias"])
        tau = z.shape[-1]  # (B, hh, N, tau)
        z = reshape(z.transpose(0, 2, 1, 3), (b * n, z.shape[1], tau))
        z = conv1d(z, p["head.conv3.weight"], p["head.conv3.bias"], padding=1)
        return reshape(z, (b, n, tau, 1))

    def aux_head(self, hid: Tensor) -> Tensor:
        p = self.params
        pooled = hid.mean(axis=-1)  # (B, N, T)
        z = relu(linear(pooled, p["aux.fc1.weight"], p["aux.fc1.bias"]))
        z = linear(z, p["aux.fc2.weight"], p["aux.fc2.bias"])
        return reshape(z, z.shape + (1,))

    def forward(self, x):
        """Direct multi-step forecast.

        Returns ``(y_hat, y_moran_hat, graph)``; ``y_moran_hat`` is None when the auxiliary
        head is disabled. Accepts (N, T, C) or (B, N, T, C); unbatched input gives unbatched output.
        """
        x = as_tensor(x)
        single = x.ndim == 3
        if single:
            x = reshape(x, (1,) + x.shape)
        self._check_input(x)
        graph = self.graph(x)
        lt = scaled_laplacian_from_adjacency(graph.a_fused).matrix
        h = self.embed(x)
        for i in range(self.config.blocks):
            h = self.st_block(h, lt, i)
        y_hat = self.main_head(h)
        ym_hat = self.aux_head(h) if self.config.use_moran else None
        if single:
            y_hat = reshape(y_hat, y_hat.shape[1:])
            ym_hat = None if ym_hat is None else reshape(ym_hat, ym_hat.shape[1:])
        return y_hat, ym_hat, graph

    __call__ = forward

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())
