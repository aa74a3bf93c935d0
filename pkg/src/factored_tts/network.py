"""Dense, augmented-input and factored layers and the eight named networks.

All arithmetic is float64. Layer inputs are row vectors, either a single
``(d,)`` vector or a ``(batch, d)`` stack; outputs follow the same shape.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from factored_tts.errors import InvalidState, InvalidTopology, ShapeError
from factored_tts.factor_encoding import Architecture, Placement, aux_width, layer_aux

ACTIVATIONS = ("sigmoid", "linear")


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return expit(z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, out: np.ndarray) -> np.ndarray:
    """Derivative of the activation, expressed through its output."""
    if name == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(out)


def _as_rows(v: np.ndarray, width: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    if v.ndim != 2 or v.shape[1] != width:
        raise ShapeError(f"{what}: expected trailing dimension {width}, got shape {v.shape}")
    return v


@dataclass
class DenseLayer:
    weights: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)
    activation: str = "sigmoid"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"weights {self.weights.shape} and bias {self.bias.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise InvalidTopology(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def parameters(self):
        return [("W", self.weights), ("b", self.bias)]


@dataclass
class AugmentedInputLayer:
    """Layer whose input is the previous output with an auxiliary vector appended."""

    weights: np.ndarray  # (d_out, d_in)
    aux_weights: np.ndarray  # (d_out, d_a)
    bias: np.ndarray
    activation: str = "sigmoid"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.aux_weights = np.asarray(self.aux_weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        d_out = self.weights.shape[0]
        if self.aux_weights.ndim != 2 or self.aux_weights.shape[0] != d_out or self.bias.shape != (d_out,):
            raise ShapeError("augmented layer weight shapes disagree")
        if self.activation not in ACTIVATIONS:
            raise InvalidTopology(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def aux_dim(self) -> int:
        return self.aux_weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def full_weights(self) -> np.ndarray:
        return np.hstack([self.weights, self.aux_weights])

    def parameters(self):
        return [("W", self.weights), ("Wa", self.aux_weights), ("b", self.bias)]


@dataclass
class FactoredLayer:
    """Weighted sum of parallel branches that all read the same input."""

    branches: List[DenseLayer]

    def __post_init__(self):
        if not self.branches:
            raise ShapeError("a factored layer needs at least one branch")
        shape = self.branches[0].weights.shape
        for br in self.branches:
            if br.weights.shape != shape:
                raise ShapeError("all branches of a factored layer must share input/output dims")

    @property
    def in_dim(self) -> int:
        return self.branches[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.branches[0].out_dim

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def parameters(self):
        out = []
        for i, br in enumerate(self.branches):
            out.append((f"branch{i}.W", br.weights))
            out.append((f"branch{i}.b", br.bias))
        return out


def forward_dense(layer: DenseLayer, h_prev) -> np.ndarray:
    """f(W h + b)."""
    h = np.asarray(h_prev, dtype=np.float64)
    rows = _as_rows(h, layer.in_dim, "dense layer input")
    out = _activate(layer.activation, rows @ layer.weights.T + layer.bias)
    return out[0] if h.ndim == 1 else out


def forward_augmented(layer: AugmentedInputLayer, h_prev, aux) -> np.ndarray:
    """f(W h + W_a v + b)."""
    h = np.asarray(h_prev, dtype=np.float64)
    rows = _as_rows(h, layer.in_dim, "augmented layer input")
    a = _as_rows(aux, layer.aux_dim, "auxiliary vector")
    if a.shape[0] != rows.shape[0]:
        if a.shape[0] != 1:
            raise ShapeError("auxiliary batch does not match input batch")
        a = np.broadcast_to(a, (rows.shape[0], a.shape[1]))
    z = (rows @ layer.weights.T + a @ layer.aux_weights.T) + layer.bias
    out = _activate(layer.activation, z)
    return out[0] if h.ndim == 1 else out


def _factored_branches(layer: FactoredLayer, rows: np.ndarray) -> List[np.ndarray]:
    return [forward_dense(br, rows) for br in layer.branches]


def _weighted_sum(branch_outs: Sequence[np.ndarray], a: np.ndarray) -> np.ndarray:
    # strict left-to-right accumulation keeps results bitwise reproducible
    acc = np.zeros_like(branch_outs[0])
    for i, out in enumerate(branch_outs):
        acc = acc + a[:, i:i + 1] * out
    return acc


def forward_factored(layer: FactoredLayer, h_prev, aux) -> np.ndarray:
    """Sum over branches of aux_i * f_i(W_i h + b_i), in branch order."""
    h = np.asarray(h_prev, dtype=np.float64)
    rows = _as_rows(h, layer.in_dim, "factored layer input")
    a = _as_rows(aux, layer.n_branches, "auxiliary vector")
    if a.shape[0] != rows.shape[0]:
        if a.shape[0] != 1:
            raise ShapeError("auxiliary batch does not match input batch")
        a = np.broadcast_to(a, (rows.shape[0], a.shape[1]))
    out = _weighted_sum(_factored_branches(layer, rows), a)
    return out[0] if h.ndim == 1 else out


def _glorot(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_out, d_in))


@dataclass
class Network:
    kind: Architecture
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    M: int
    N: int
    init_seed: int
    layers: list
    placements: list  # Placement or None per layer
    _version: int = field(default=0, repr=False)
    _cache: Optional[dict] = field(default=None, repr=False)

    # --- parameter access -------------------------------------------------
    def parameters(self):
        """Ordered ``(name, array)`` pairs; arrays are live views."""
        out = []
        for li, layer in enumerate(self.layers):
            for name, arr in layer.parameters():
                out.append((f"L{li}.{name}", arr))
        return out

    def param_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.parameters())

    @property
    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.parameters())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_parameters:
            raise ShapeError(f"expected {self.n_parameters} parameters, got {flat.size}")
        pos = 0
        for _, arr in self.parameters():
            arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size
        self.mark_modified()

    def mark_modified(self) -> None:
        """Record an in-place parameter change; invalidates cached activations."""
        self._version += 1

    def copy(self) -> "Network":
        clone = build_architecture(self.kind, self.input_dim, self.hidden_dims, self.output_dim,
                                   self.M, self.N, self.init_seed)
        clone.set_flat(self.get_flat())
        return clone

    @property
    def aux_input_dim(self) -> int:
        """Width of the input the first layer actually consumes."""
        first = self.layers[0]
        extra = first.aux_dim if isinstance(first, AugmentedInputLayer) else 0
        return self.input_dim + extra

    # --- evaluation -------------------------------------------------------
    def _check_factors(self, x, e, s):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = _as_rows(x, self.input_dim, "network input")
        e = _as_rows(e, self.M, "emotion ID") if self.M else np.zeros((1, 0))
        s = _as_rows(s, self.N, "speaker ID") if self.N else np.zeros((1, 0))
        n = rows.shape[0]
        if e.shape[0] not in (1, n) or s.shape[0] not in (1, n):
            raise ShapeError("factor batch size does not match input batch")
        e = np.broadcast_to(e, (n, e.shape[1]))
        s = np.broadcast_to(s, (n, s.shape[1]))
        return single, rows, e, s

    def forward(self, x, e, s, keep_cache: bool = False) -> np.ndarray:
        single, h, e, s = self._check_factors(x, e, s)
        x_rows = h
        acts = [h]
        auxes = []
        branch_outs = []
        for layer, placement in zip(self.layers, self.placements):
            aux = None if placement is None else layer_aux(self.kind, placement, e, s)
            auxes.append(aux)
            if isinstance(layer, DenseLayer):
                h = forward_dense(layer, h)
                branch_outs.append(None)
            elif isinstance(layer, AugmentedInputLayer):
                h = forward_augmented(layer, h, aux)
                branch_outs.append(None)
            else:
                outs = _factored_branches(layer, h)
                h = _weighted_sum(outs, aux)
                branch_outs.append(outs)
            acts.append(h)
        if keep_cache:
            self._cache = {
                "key": (x_rows.copy(), np.array(e), np.array(s), self._version),
                "acts": acts,
                "auxes": auxes,
                "branch_outs": branch_outs,
            }
        return h[0] if single else h

    def __call__(self, x, e, s):
        return self.forward(x, e, s)

    def backward(self, x, e, s, grad_out) -> Dict[str, np.ndarray]:
        """Gradients of the loss whose output gradient is ``grad_out``.

        Requires a preceding ``forward(x, e, s, keep_cache=True)`` on the
        same inputs with unchanged parameters.
        """
        if self._cache is None:
            raise InvalidState("no cached forward pass; call forward(..., keep_cache=True) first")
        _, x_rows, e, s = self._check_factors(x, e, s)
        cx, ce, cs, version = self._cache["key"]
        if (version != self._version or not np.array_equal(cx, x_rows)
                or not np.array_equal(ce, e) or not np.array_equal(cs, s)):
            raise InvalidState("cached activations do not belong to these inputs/parameters")
        g = _as_rows(grad_out, self.output_dim, "output gradient")
        if g.shape[0] != x_rows.shape[0]:
            raise ShapeError("output gradient batch does not match input batch")

        acts = self._cache["acts"]
        grads: Dict[str, np.ndarray] = {}
        for li in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[li]
            h_in, h_out = acts[li], acts[li + 1]
            aux = self._cache["auxes"][li]
            if isinstance(layer, FactoredLayer):
                outs = self._cache["branch_outs"][li]
                g_in = np.zeros_like(h_in)
                for bi, (br, out) in enumerate(zip(layer.branches, outs)):
                    dz = aux[:, bi:bi + 1] * g * _activation_grad(br.activation, out)
                    grads[f"L{li}.branch{bi}.W"] = dz.T @ h_in
                    grads[f"L{li}.branch{bi}.b"] = dz.sum(axis=0)
                    g_in = g_in + dz @ br.weights
            else:
                dz = g * _activation_grad(layer.activation, h_out)
                grads[f"L{li}.W"] = dz.T @ h_in
                if isinstance(layer, AugmentedInputLayer):
                    grads[f"L{li}.Wa"] = dz.T @ aux
                grads[f"L{li}.b"] = dz.sum(axis=0)
                g_in = dz @ layer.weights
            g = g_in
        return {name: grads[name] for name, _ in self.parameters()}


def build_architecture(kind, input_dim: int, hidden_dims: Sequence[int], output_dim: int,
                       M: int, N: int, init_seed: int = 0) -> Network:
    """Build one of the eight named networks with freshly initialised weights.

    Hidden layers use sigmoid, the output layer is linear. Weights are drawn
    uniformly from +-sqrt(6 / (fan_in + fan_out)); biases start at zero.
    """
    kind = Architecture.parse(kind)
    hidden_dims = tuple(int(h) for h in hidden_dims)
    if not hidden_dims:
        raise InvalidTopology("at least one hidden layer is required")
    if min(hidden_dims) < 1 or input_dim < 1 or output_dim < 1:
        raise InvalidTopology("layer widths must be positive")
    if M < 0 or N < 0:
        raise InvalidTopology("factor counts must be non-negative")
    if kind.has_input_aux and kind.serial_order is not None and len(hidden_dims) < 2:
        raise InvalidTopology(f"{kind.value} needs two hidden layers: the first is input-augmented, "
                              "the last is factored")

    rng = np.random.default_rng(init_seed)
    dims = (input_dim,) + hidden_dims + (output_dim,)
    n_layers = len(dims) - 1
    last_hidden = n_layers - 2
    layers, placements = [], []
    for li in range(n_layers):
        d_in, d_out = dims[li], dims[li + 1]
        act = "linear" if li == n_layers - 1 else "sigmoid"
        if li == 0 and kind.has_input_aux:
            d_a = aux_width(kind, Placement.INPUT, M, N)
            full = _glorot(rng, d_out, d_in + d_a)
            layers.append(AugmentedInputLayer(full[:, :d_in].copy(), full[:, d_in:].copy(),
                                              np.zeros(d_out), act))
            placements.append(Placement.INPUT)
            continue
        placement = None
        if li == n_layers - 1 and Placement.OUTPUT in kind.placements():
            placement = Placement.OUTPUT
        elif li == last_hidden and Placement.HIDDEN in kind.placements():
            placement = Placement.HIDDEN
        if placement is None:
            layers.append(DenseLayer(_glorot(rng, d_out, d_in), np.zeros(d_out), act))
        else:
            n_br = aux_width(kind, placement, M, N)
            layers.append(FactoredLayer([DenseLayer(_glorot(rng, d_out, d_in), np.zeros(d_out), act)
                                         for _ in range(n_br)]))
        placements.append(placement)
    return Network(kind, input_dim, hidden_dims, output_dim, M, N, init_seed, layers, placements)


def forward(net: Network, x, e, s) -> np.ndarray:
    return net.forward(x, e, s)


def backward(net: Network, x, e, s, grad_out) -> Dict[str, np.ndarray]:
    return net.backward(x, e, s, grad_out)


# --- serialization ----------------------------------------------------------
#
# Text header of "key = value" lines, one "block = <name> <rows>x<cols>" line
# per parameter array in Network.parameters() order (plus optional extra
# blocks), terminated by "end_header". Raw little-endian float64 data for
# each block follows in the same order, row-major.

MAGIC = "# factored-tts network v1"


def _shape_str(shape) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple:
    return () if text == "scalar" else tuple(int(d) for d in text.split("x"))


def dumps_network(net: Network, extras: Optional[Dict[str, np.ndarray]] = None) -> bytes:
    lines = [
        MAGIC,
        f"kind = {net.kind.value}",
        f"input_dim = {net.input_dim}",
        f"hidden_dims = {','.join(str(h) for h in net.hidden_dims)}",
        f"output_dim = {net.output_dim}",
        f"n_emotions = {net.M}",
        f"n_speakers = {net.N}",
        f"init_seed = {net.init_seed}",
    ]
    blocks = list(net.parameters())
    for name, arr in sorted((extras or {}).items()):
        blocks.append((f"extra.{name}", np.asarray(arr, dtype=np.float64)))
    for name, arr in blocks:
        lines.append(f"block = {name} {_shape_str(arr.shape)}")
    lines.append("end_header")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for _, arr in blocks:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_network(data: bytes):
    """Inverse of :func:`dumps_network`; returns ``(network, extras)``."""
    marker = b"end_header\n"
    end = data.find(marker)
    if end < 0 or not data.startswith(MAGIC.encode()):
        raise ShapeError("not a factored-tts network file")
    header = data[:end].decode("ascii").splitlines()[1:]
    meta, blocks = {}, []
    for line in header:
        key, _, value = (part.strip() for part in line.partition("="))
        if key == "block":
            try:
                name, shape = value.rsplit(" ", 1)
                blocks.append((name, _parse_shape(shape)))
            except ValueError:
                raise ShapeError(f"bad block line {line!r}") from None
        else:
            meta[key] = value
    try:
        hidden = tuple(int(h) for h in meta["hidden_dims"].split(","))
        net = build_architecture(meta["kind"], int(meta["input_dim"]), hidden, int(meta["output_dim"]),
                                 int(meta["n_emotions"]), int(meta["n_speakers"]), int(meta["init_seed"]))
    except (KeyError, ValueError) as exc:
        raise ShapeError(f"bad network header: {exc}") from None
    params = net.param_dict()
    extras = {}
    pos = end + len(marker)
    for name, shape in blocks:
        count = int(np.prod(shape)) if shape else 1
        if pos + 8 * count > len(data):
            raise ShapeError(f"file ends inside block {name}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * count
        if name.startswith("extra."):
            extras[name[len("extra."):]] = arr
        elif name in params:
            if params[name].shape != arr.shape:
                raise ShapeError(f"block {name} has shape {arr.shape}, expected {params[name].shape}")
            params[name][...] = arr
        else:
            raise ShapeError(f"unexpected parameter block {name}")
    missing = set(params) - {n for n, _ in blocks}
    if missing:
        raise ShapeError(f"missing parameter blocks: {sorted(missing)}")
    if pos != len(data):
        raise ShapeError("trailing bytes after the last parameter block")
    net.mark_modified()
    return net, extras


def save_network(net: Network, path, extras: Optional[Dict[str, np.ndarray]] = None) -> None:
    with open(os.fspath(path), "wb") as fh:
        fh.write(dumps_network(net, extras))


def load_network(path):
    with open(os.fspath(path), "rb") as fh:
        return loads_network(fh.read())
