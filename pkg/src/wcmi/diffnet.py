"""Small feed-forward networks with reverse-mode gradients.

Networks are stacks of affine maps and element-wise activations over a
single flat float64 parameter vector. ``backward`` returns gradients with
respect to both the parameters and the inputs, which is what the
input-space attacks need.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .numerics import seeded_rng

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "tanh")


@dataclass
class GradientBundle:
    param_grads: Optional[np.ndarray]
    input_grads: np.ndarray
    value: float = math.nan


def _affine_size(layer: dict) -> int:
    return layer["in"] * layer["out"] + layer["out"]


class Network:
    """Affine/activation stack with a flat parameter store.

    ``layers`` is a list of descriptors, either
    ``{"kind": "affine", "in": a, "out": b}`` or ``{"kind": "relu"}`` /
    ``{"kind": "tanh"}``.
    """

    def __init__(self, layers: Sequence[dict], params=None, seed: int = 0):
        self.layers: List[dict] = [dict(layer) for layer in layers]
        dims = [layer for layer in self.layers if layer["kind"] == "affine"]
        if not dims:
            raise ValueError("a network needs at least one affine layer")
        for layer in self.layers:
            if layer["kind"] not in ("affine",) + ACTIVATIONS:
                raise ValueError(f"unknown layer kind {layer['kind']!r}")
        for a, b in zip(dims, dims[1:]):
            if a["out"] != b["in"]:
                raise ValueError(f"layer dims do not chain: {a['out']} -> {b['in']}")
        self.input_dim = dims[0]["in"]
        self.output_dim = dims[-1]["out"]
        self.n_params = sum(_affine_size(layer) for layer in dims)
        self._offsets = []
        off = 0
        for layer in self.layers:
            if layer["kind"] == "affine":
                self._offsets.append(off)
                off += _affine_size(layer)
            else:
                self._offsets.append(None)
        if params is None:
            self.params = self._init_params(seed)
        else:
            # kept as given (no copy) so sub-networks can share a parameter view
            params = np.asarray(params, dtype=np.float64)
            if params.ndim != 1:
                params = params.ravel()
            if params.size != self.n_params:
                raise ValueError(f"expected {self.n_params} parameters, got {params.size}")
            self.params = params

    # construction -----------------------------------------------------------

    @classmethod
    def mlp(
        cls,
        sizes: Sequence[int],
        activation: str = "relu",
        output_activation: Optional[str] = None,
        seed: int = 0,
    ) -> "Network":
        layers = []
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            layers.append({"kind": "affine", "in": int(a), "out": int(b)})
            if i < len(sizes) - 2:
                layers.append({"kind": activation})
        if output_activation:
            layers.append({"kind": output_activation})
        return cls(layers, seed=seed)

    def _init_params(self, seed: int) -> np.ndarray:
        rng = seeded_rng(seed)
        params = np.zeros(self.n_params)
        for layer, off in zip(self.layers, self._offsets):
            if off is None:
                continue
            n_in, n_out = layer["in"], layer["out"]
            bound = math.sqrt(6.0 / (n_in + n_out))
            params[off : off + n_in * n_out] = rng.uniform(-bound, bound, size=n_in * n_out)
        return params

    def affine(self, index: int):
        """(W, b) views of the ``index``-th affine layer; W has shape (in, out)."""
        affines = [(l, o) for l, o in zip(self.layers, self._offsets) if o is not None]
        layer, off = affines[index]
        n_in, n_out = layer["in"], layer["out"]
        W = self.params[off : off + n_in * n_out].reshape(n_in, n_out)
        b = self.params[off + n_in * n_out : off + n_in * n_out + n_out]
        return W, b

    def copy(self) -> "Network":
        return Network(self.layers, params=self.params.copy())

    def split_first(self):
        """(W, b, tail) where ``tail`` runs every layer after the first affine
        map and shares this network's parameter storage; ``tail`` is None for
        a single-layer network."""
        if self.layers[0]["kind"] != "affine":
            raise ValueError("network does not start with an affine layer")
        W, b = self.affine(0)
        if len(self.layers) == 1:
            return W, b, None
        first = _affine_size(self.layers[0])
        rest = self.layers[1:]
        if not any(l["kind"] == "affine" for l in rest):
            raise ValueError("split_first needs an affine layer after the first one")
        return W, b, Network(rest, params=self.params[first:])

    # evaluation -------------------------------------------------------------

    def _check_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"batch shape {x.shape} does not match input_dim {self.input_dim}")
        return x

    def forward_trace(self, x):
        h = self._check_batch(x)
        trace = [h]
        for layer, off in zip(self.layers, self._offsets):
            kind = layer["kind"]
            if kind == "affine":
                n_in, n_out = layer["in"], layer["out"]
                W = self.params[off : off + n_in * n_out].reshape(n_in, n_out)
                b = self.params[off + n_in * n_out : off + n_in * n_out + n_out]
                h = h @ W + b
            elif kind == "relu":
                h = np.maximum(h, 0.0)
            else:
                h = np.tanh(h)
            trace.append(h)
        return h, trace

    def forward(self, x) -> np.ndarray:
        return self.forward_trace(x)[0]

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)

    def backward(self, x, cotangent, trace=None, need_params: bool = True) -> GradientBundle:
        """Gradients of sum(cotangent * forward(x)) w.r.t. parameters and inputs."""
        if trace is None:
            out, trace = self.forward_trace(x)
        else:
            out = trace[-1]
        g = np.asarray(cotangent, dtype=np.float64)
        if g.ndim == 1 and out.shape[0] == 1:
            g = g[None, :]
        if g.shape != out.shape:
            raise ValueError(f"cotangent shape {g.shape} does not match output {out.shape}")
        grads = np.zeros(self.n_params) if need_params else None
        for i in range(len(self.layers) - 1, -1, -1):
            layer, off = self.layers[i], self._offsets[i]
            h_in, h_out = trace[i], trace[i + 1]
            kind = layer["kind"]
            if kind == "relu":
                # subgradient 0 at 0
                g = g * (h_in > 0.0)
            elif kind == "tanh":
                g = g * (1.0 - h_out * h_out)
            else:
                n_in, n_out = layer["in"], layer["out"]
                W = self.params[off : off + n_in * n_out].reshape(n_in, n_out)
                if need_params:
                    grads[off : off + n_in * n_out] = (h_in.T @ g).ravel()
                    grads[off + n_in * n_out : off + n_in * n_out + n_out] = g.sum(axis=0)
                g = g @ W.T
        return GradientBundle(param_grads=grads, input_grads=g)

    # persistence ------------------------------------------------------------

    def to_dict(self) -> dict:
        weights = []
        for i, layer in enumerate(l for l in self.layers if l["kind"] == "affine"):
            W, b = self.affine(i)
            weights.append({"W": W.tolist(), "b": b.tolist()})
        return {"layers": [dict(l) for l in self.layers], "weights": weights}

    @classmethod
    def from_dict(cls, data: dict) -> "Network":
        net = cls(data["layers"], params=None, seed=0)
        for i, w in enumerate(data["weights"]):
            W, b = net.affine(i)
            W[...] = np.asarray(w["W"], dtype=np.float64).reshape(W.shape)
            b[...] = np.asarray(w["b"], dtype=np.float64).reshape(b.shape)
        return net

    def __repr__(self) -> str:
        kinds = "->".join(
            f"A{l['in']}x{l['out']}" if l["kind"] == "affine" else l["kind"] for l in self.layers
        )
        return f"Network({kinds}, n_params={self.n_params})"


def forward(net: Network, batch) -> np.ndarray:
    return net.forward(batch)


def backward(net: Network, batch, output_cotangent) -> GradientBundle:
    return net.backward(batch, output_cotangent)


def linear_feature(w, gain: float = 1.0, squash: Optional[str] = None) -> Network:
    """One-output network x -> squash(gain * w.x)."""
    w = np.asarray(w, dtype=np.float64).ravel()
    layers = [{"kind": "affine", "in": w.size, "out": 1}]
    if squash:
        layers.append({"kind": squash})
    net = Network(layers, params=np.concatenate([gain * w, [0.0]]))
    return net


def identity_network(dim: int) -> Network:
    return Network(
        [{"kind": "affine", "in": dim, "out": dim}],
        params=np.concatenate([np.eye(dim).ravel(), np.zeros(dim)]),
    )


def compose(*nets: Network) -> Network:
    """Single network computing nets[-1](...nets[0](x)); parameters are copied."""
    if not nets:
        raise ValueError("compose needs at least one network")
    for a, b in zip(nets, nets[1:]):
        if a.output_dim != b.input_dim:
            raise ValueError(f"cannot compose: output dim {a.output_dim} feeds input dim {b.input_dim}")
    layers = [layer for net in nets for layer in net.layers]
    return Network(layers, params=np.concatenate([net.params for net in nets]))


def select_output(net: Network, index: int) -> Network:
    """``net`` followed by a frozen selector keeping output coordinate ``index``."""
    if not 0 <= index < net.output_dim:
        raise ValueError(f"output index {index} out of range for dim {net.output_dim}")
    sel = np.zeros((net.output_dim, 1))
    sel[index, 0] = 1.0
    layers = net.layers + [{"kind": "affine", "in": net.output_dim, "out": 1}]
    return Network(layers, params=np.concatenate([net.params, sel.ravel(), [0.0]]))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    rule: str = "adam"
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.rule not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer rule {self.rule!r}")


def make_optimizer(net: Network, rule: str = "adam", step_size: float = 1e-3, **kw) -> OptimizerState:
    return OptimizerState(
        rule=rule, step_size=step_size, m=np.zeros(net.n_params), v=np.zeros(net.n_params), **kw
    )


def optimizer_step(state: OptimizerState, net: Network, grads, direction: str = "descend") -> Network:
    """Update ``net.params`` in place; ``direction='ascend'`` follows +grad."""
    g = grads.param_grads if isinstance(grads, GradientBundle) else np.asarray(grads, dtype=np.float64)
    if g is None or g.shape != net.params.shape:
        raise ValueError("gradient array is not aligned with the network parameters")
    if direction == "ascend":
        g = -g
    elif direction != "descend":
        raise ValueError(f"direction must be 'ascend' or 'descend', got {direction!r}")
    state.t += 1
    if state.rule == "sgd":
        net.params -= state.step_size * g
        return net
    if state.m is None:
        state.m = np.zeros_like(net.params)
        state.v = np.zeros_like(net.params)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    net.params -= state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)
    return net


# ---------------------------------------------------------------------------
# JSON persistence
# ---------------------------------------------------------------------------


def save_network(net: Network, path, seed: Optional[int] = None, config: Optional[dict] = None) -> None:
    doc = {"format_version": FORMAT_VERSION, **net.to_dict(), "seed": seed, "config": config or {}}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_network(path) -> Network:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {doc.get('format_version')!r}")
    return Network.from_dict(doc)
