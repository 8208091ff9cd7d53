"""Hamiltonian and baseline models.

Three families compete:

* :class:`KarHamiltonian`: stacked KAN layers; each output of a layer is a
  sum of learnable univariate spline edges of its inputs, the last layer
  has a single output which is the energy.
* :class:`MlpHamiltonian`: a tanh multilayer perceptron with a scalar output.
* :class:`BaselineNet`: the same perceptron predicting ``dz/dt`` directly.

For the two Hamiltonian families the input gradient ``dH/dz`` is written out
analytically as graph nodes (a hand-rolled backward pass through the
network), so losses built on the symplectic field ``J dH/dz`` differentiate
with respect to the parameters in one reverse sweep.

Each model also evaluates energy and field in plain numpy; rollouts and
metrics use that path.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from . import diffcore as dc
from . import spline
from . import systems
from .errors import FormatError, ModelKindError, ShapeError

__all__ = [
    "BaselineNet",
    "KarHamiltonian",
    "MlpHamiltonian",
    "TrueSystem",
    "baseline_forward",
    "deserialize_model",
    "eval_hamiltonian",
    "grad_wrt_inputs",
    "load_model",
    "save_model",
    "serialize_model",
    "symplectic_matrix",
    "symplectic_vector_field",
]

FORMAT_MAGIC = b"KHM\x00"
FORMAT_VERSION = 1


def symplectic_matrix(d):
    """``J = [[0, I_d], [-I_d, 0]]``."""
    eye = np.eye(d)
    zero = np.zeros((d, d))
    return np.block([[zero, eye], [-eye, zero]])


def _as_batch(model, z):
    """Return ``(node, squeeze)`` for an input of shape ``(dim,)`` or ``(B, dim)``."""
    if isinstance(z, dc.Node):
        shape = np.shape(z.value) if z.value is not None else None
        if shape is not None and shape[-1] != model.dim:
            raise ShapeError(f"model expects {model.dim} inputs, got {shape[-1]}")
        return z, False
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.dim:
        raise ShapeError(f"model expects {model.dim} inputs, got {z.shape[-1]}")
    squeeze = z.ndim == 1
    return dc.constant(np.atleast_2d(z)), squeeze


def _check_np(model, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.dim:
        raise ShapeError(f"model expects {model.dim} inputs, got {z.shape[-1]}")
    return z


class _Model:
    kind = ""
    hamiltonian = True

    def __init__(self, dim):
        if dim % 2:
            raise ShapeError("phase space dimension must be even")
        self.dim = dim
        self.store = dc.ParameterStore()

    @property
    def d(self):
        return self.dim // 2

    @property
    def n_params(self):
        return self.store.size

    def param(self, name):
        return self.store.node(name)

    def arch(self):
        raise NotImplementedError

    def field(self, z):
        """Predicted ``dz/dt`` as a numpy array."""
        raise NotImplementedError


class _HamiltonianModel(_Model):
    def energy_node(self, z):
        """Energies of a ``(B, dim)`` batch node as a ``(B,)`` node."""
        raise NotImplementedError

    def input_gradient_node(self, z):
        """``dH/dz`` of a ``(B, dim)`` batch node as a ``(B, dim)`` node."""
        raise NotImplementedError

    def energy(self, z):
        raise NotImplementedError

    def input_gradient(self, z):
        raise NotImplementedError

    def field(self, z):
        g = self.input_gradient(z)
        d = self.d
        return np.concatenate([g[..., d:], -g[..., :d]], axis=-1)


def _glorot(rng, n_in, n_out):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, (n_in, n_out))


class _Perceptron:
    """Shared tanh MLP pieces for :class:`MlpHamiltonian` and :class:`BaselineNet`."""

    def _init_layers(self, sizes, rng):
        self.sizes = list(sizes)
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = _glorot(rng, n_in, n_out) if rng is not None else np.zeros((n_in, n_out))
            self.store.add(f"W{i}", w)
            self.store.add(f"b{i}", np.zeros(n_out))
        self.store.freeze()

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def _forward_nodes(self, z):
        """Return ``(output, hidden activations)``."""
        h = z
        hidden = []
        for i in range(self.n_layers):
            a = h @ self.param(f"W{i}") + self.param(f"b{i}")
            if i < self.n_layers - 1:
                h = dc.tanh(a)
                hidden.append(h)
            else:
                h = a
        return h, hidden

    def _forward_np(self, z):
        h = z
        hidden = []
        for i in range(self.n_layers):
            a = h @ self.store.get(f"W{i}") + self.store.get(f"b{i}")
            if i < self.n_layers - 1:
                h = np.tanh(a)
                hidden.append(h)
            else:
                h = a
        return h, hidden


class MlpHamiltonian(_Perceptron, _HamiltonianModel):
    kind = "hnn"

    def __init__(self, dim, hidden=(200, 200), rng=None):
        _HamiltonianModel.__init__(self, dim)
        self.hidden = tuple(int(h) for h in hidden)
        self._init_layers([dim, *self.hidden, 1], rng)

    def arch(self):
        return {"dim": self.dim, "hidden": list(self.hidden)}

    @classmethod
    def from_arch(cls, arch):
        return cls(arch["dim"], arch["hidden"])

    def energy_node(self, z):
        out, _ = self._forward_nodes(z)
        return out[:, 0]

    def input_gradient_node(self, z):
        _, hidden = self._forward_nodes(z)
        last = self.n_layers - 1
        w_out = dc.reshape(self.param(f"W{last}"), (self.sizes[-2],))
        a = (1.0 - hidden[-1] * hidden[-1]) * w_out
        for i in range(last - 1, -1, -1):
            a = dc.einsum("bj,ij->bi", a, self.param(f"W{i}"))
            if i > 0:
                a = a * (1.0 - hidden[i - 1] * hidden[i - 1])
        return a

    def energy(self, z):
        z = _check_np(self, z)
        out, _ = self._forward_np(z)
        return out[..., 0]

    def input_gradient(self, z):
        z = _check_np(self, z)
        _, hidden = self._forward_np(z)
        last = self.n_layers - 1
        a = (1.0 - hidden[-1] ** 2) * self.store.get(f"W{last}")[:, 0]
        for i in range(last - 1, -1, -1):
            a = a @ self.store.get(f"W{i}").T
            if i > 0:
                a = a * (1.0 - hidden[i - 1] ** 2)
        return a


class BaselineNet(_Perceptron, _Model):
    kind = "baseline"
    hamiltonian = False

    def __init__(self, dim, hidden=(200, 200), rng=None):
        _Model.__init__(self, dim)
        self.hidden = tuple(int(h) for h in hidden)
        self._init_layers([dim, *self.hidden, dim], rng)

    def arch(self):
        return {"dim": self.dim, "hidden": list(self.hidden)}

    @classmethod
    def from_arch(cls, arch):
        return cls(arch["dim"], arch["hidden"])

    def output_node(self, z):
        out, _ = self._forward_nodes(z)
        return out

    def field(self, z):
        z = _check_np(self, z)
        out, _ = self._forward_np(z)
        return out


def _kan_layer_np(x, knots, lo, hi, k, coef, wb, ws, order):
    """Layer outputs (``order=0``) or per-edge slopes ``(..., n_in, n_out)``."""
    wc = ws[:, :, None] * coef
    base = spline._base_features(x, lo, hi, order)
    basis = spline._features(x, knots, k, order)
    if order == 0:
        return base @ wb + np.einsum("...si,sji->...j", basis, wc)
    return base[..., :, None] * wb + np.einsum("...si,sji->...sj", basis, wc)


class KarHamiltonian(_HamiltonianModel):
    """Kolmogorov-Arnold Hamiltonian built from spline-edge layers.

    ``widths`` lists every layer size including input and the scalar output,
    e.g. ``[2, 2, 1]``.  ``domains[l]`` holds the ``(lo, hi)`` spline domain
    of each input of layer ``l``; parameters per layer are ``coef`` with
    shape ``(n_in, n_out, G + k)`` and ``wb``/``ws`` with shape
    ``(n_in, n_out)``.
    """

    kind = "kar"

    def __init__(self, widths, G, k, domains, params=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or widths[-1] != 1:
            raise ShapeError(f"KAR widths must end in a single output, got {widths}")
        super().__init__(widths[0])
        self.widths = widths
        self.G, self.k = int(G), int(k)
        self.domains = [np.asarray(dom, dtype=np.float64).reshape(n, 2) for dom, n in zip(domains, widths[:-1])]
        if len(self.domains) != len(widths) - 1:
            raise ShapeError("need one domain table per layer")
        self.grids = [[spline.SplineGrid(lo, hi, self.G, self.k) for lo, hi in dom] for dom in self.domains]
        self.knots = [np.stack([g.knots for g in row]) for row in self.grids]
        nb = self.G + self.k
        for l, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            if params is None:
                coef, wb, ws = np.zeros((n_in, n_out, nb)), np.ones((n_in, n_out)), np.ones((n_in, n_out))
            else:
                coef, wb, ws = params[l]
            self.store.add(f"coef{l}", coef)
            self.store.add(f"wb{l}", wb)
            self.store.add(f"ws{l}", ws)
        self.store.freeze()

    @classmethod
    def initialize(cls, widths, G, k, z_data, rng, pad=0.1):
        """Random model whose first-layer grids cover ``z_data``.

        Hidden-layer grids are set from the initial network's own activations
        on ``z_data`` so that every layer starts inside its spline domain.
        """
        widths = [int(w) for w in widths]
        z_data = np.atleast_2d(np.asarray(z_data, dtype=np.float64))
        if z_data.shape[-1] != widths[0]:
            raise ShapeError(f"data has {z_data.shape[-1]} dims, model expects {widths[0]}")
        nb = G + k
        std = 0.1 / np.sqrt(nb)
        params, domains = [], []
        x = z_data
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            grids = [spline.SplineGrid.from_range(x[:, s].min(), x[:, s].max(), G, k, pad=pad) for s in range(n_in)]
            domains.append([(g.a, g.b) for g in grids])
            # 1/sqrt(fan-in) keeps the summed edge outputs O(1) through the layers
            w = np.full((n_in, n_out), 1.0 / np.sqrt(n_in))
            layer = (rng.normal(0.0, std, (n_in, n_out, nb)), w, w.copy())
            params.append(layer)
            knots = np.stack([g.knots for g in grids])
            lo, hi = np.array(domains[-1]).T
            x = _kan_layer_np(x, knots, lo, hi, k, *layer, order=0)
        return cls(widths, G, k, domains, params)

    def update_hidden_grids(self, z_data, pad=0.1):
        """Move hidden-layer spline domains onto the current activations.

        Each edge's spline part is refitted by least squares on the new grid,
        so the network changes only by the fit residual.  The input layer
        keeps its domain.
        """
        x = _check_np(self, z_data)
        nb = self.G + self.k
        for l in range(self.n_layers):
            if l > 0:
                coef = self.store.get(f"coef{l}").copy()
                for s in range(self.widths[l]):
                    old = self.grids[l][s]
                    new = spline.SplineGrid.from_range(x[:, s].min(), x[:, s].max(), self.G, self.k, pad=pad)
                    xs = np.concatenate([x[:, s], np.linspace(new.a, new.b, 8 * nb)])
                    target = spline.bspline_basis(xs, old) @ coef[s].T
                    coef[s] = np.linalg.lstsq(spline.bspline_basis(xs, new), target, rcond=None)[0].T
                    self.grids[l][s] = new
                    self.domains[l][s] = (new.a, new.b)
                self.knots[l] = np.stack([g.knots for g in self.grids[l]])
                theta = self.store.theta.copy()
                theta[self.store.slices()[f"coef{l}"]] = coef.ravel()
                self.store.set_flat(theta)
            x = self._layer_np(l, x, 0)

    def arch(self):
        return {
            "widths": self.widths,
            "G": self.G,
            "k": self.k,
            "domains": [dom.tolist() for dom in self.domains],
        }

    @classmethod
    def from_arch(cls, arch):
        return cls(arch["widths"], arch["G"], arch["k"], arch["domains"])

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def edge(self, layer, s, j):
        """The edge from input ``s`` to output ``j`` of ``layer`` as a standalone object."""
        return spline.UnivariateEdge(
            self.grids[layer][s],
            self.store.get(f"coef{layer}")[s, j].copy(),
            float(self.store.get(f"wb{layer}")[s, j]),
            float(self.store.get(f"ws{layer}")[s, j]),
        )

    def _weights_node(self, l):
        ws = self.param(f"ws{l}")
        n_in, n_out = self.widths[l], self.widths[l + 1]
        return dc.reshape(ws, (n_in, n_out, 1)) * self.param(f"coef{l}")

    def _layers_nodes(self, z):
        """Forward through all layers; return (energy node, per-layer cache)."""
        x = z
        cache = []
        for l in range(self.n_layers):
            lo, hi = self.domains[l][:, 0], self.domains[l][:, 1]
            wb = self.param(f"wb{l}")
            wc = self._weights_node(l)
            base = spline.base_node(x, lo, hi, 0)
            basis = spline.basis_node(x, self.knots[l], self.k, 0)
            cache.append((x, lo, hi, wb, wc))
            x = dc.einsum("bs,sj->bj", base, wb) + dc.einsum("bsi,sji->bj", basis, wc)
        return x[:, 0], cache

    def energy_node(self, z):
        return self._layers_nodes(z)[0]

    def input_gradient_node(self, z):
        _, cache = self._layers_nodes(z)
        adj = None
        for l in range(self.n_layers - 1, -1, -1):
            x, lo, hi, wb, wc = cache[l]
            dbase = spline.base_node(x, lo, hi, 1)
            dbasis = spline.basis_node(x, self.knots[l], self.k, 1)
            # slope of every edge at its input: (B, n_in, n_out)
            slope = dc.einsum("bs,sj->bsj", dbase, wb) + dc.einsum("bsi,sji->bsj", dbasis, wc)
            if adj is None:
                adj = dc.sum(slope, axis=2)
            else:
                adj = dc.einsum("bj,bsj->bs", adj, slope)
        return adj

    def _layer_np(self, l, x, order):
        lo, hi = self.domains[l][:, 0], self.domains[l][:, 1]
        return _kan_layer_np(
            x, self.knots[l], lo, hi, self.k,
            self.store.get(f"coef{l}"), self.store.get(f"wb{l}"), self.store.get(f"ws{l}"), order,
        )

    def energy(self, z):
        x = _check_np(self, z)
        for l in range(self.n_layers):
            x = self._layer_np(l, x, 0)
        return x[..., 0]

    def input_gradient(self, z):
        x = _check_np(self, z)
        inputs = []
        for l in range(self.n_layers):
            inputs.append(x)
            x = self._layer_np(l, x, 0)
        adj = np.ones(x.shape)
        for l in range(self.n_layers - 1, -1, -1):
            slope = self._layer_np(l, inputs[l], 1)
            adj = np.einsum("...j,...sj->...s", adj, slope)
        return adj


class TrueSystem(_HamiltonianModel):
    """Ground-truth dynamics dressed as a model (no parameters)."""

    kind = "true"

    def __init__(self, spec):
        super().__init__(spec.dim)
        self.spec = spec
        self.store.freeze()

    def arch(self):
        return {"system": self.spec.to_dict()}

    @classmethod
    def from_arch(cls, arch):
        return cls(systems.SystemSpec.from_dict(arch["system"]))

    def energy(self, z):
        return systems.hamiltonian(self.spec, z)

    def input_gradient(self, z):
        dHdq, dHdp = systems.split_gradient(self.spec, z)
        return np.concatenate([dHdq, dHdp], axis=-1)

    def field(self, z):
        return systems.true_vector_field(self.spec, z)

    def energy_node(self, z):
        raise ModelKindError("the true system is not a differentiable model")

    input_gradient_node = energy_node


_KINDS = {cls.kind: cls for cls in (MlpHamiltonian, BaselineNet, KarHamiltonian, TrueSystem)}


def eval_hamiltonian(model, z):
    """Energy node for one state ``(dim,)`` or a batch ``(B, dim)``."""
    if not model.hamiltonian:
        raise ModelKindError(f"{type(model).__name__} has no Hamiltonian")
    node, squeeze = _as_batch(model, z)
    out = model.energy_node(node)
    return out[0] if squeeze else out


def grad_wrt_inputs(model, z):
    """``dH/dz`` as a differentiable node, same leading shape as ``z``."""
    if not model.hamiltonian:
        raise ModelKindError(f"{type(model).__name__} has no Hamiltonian")
    node, squeeze = _as_batch(model, z)
    out = model.input_gradient_node(node)
    return out[0] if squeeze else out


def symplectic_vector_field(model, z):
    """``(dH/dp, -dH/dq)`` as a differentiable node."""
    if not model.hamiltonian:
        raise ModelKindError(f"{type(model).__name__} predicts the field directly; use baseline_forward")
    node, squeeze = _as_batch(model, z)
    g = model.input_gradient_node(node)
    d = model.d
    out = dc.concat([g[:, d:], -g[:, :d]], axis=1)
    return out[0] if squeeze else out


def baseline_forward(net, z):
    if not isinstance(net, BaselineNet):
        raise ModelKindError(f"{type(net).__name__} is not a baseline network")
    node, squeeze = _as_batch(net, z)
    out = net.output_node(node)
    return out[0] if squeeze else out


def predicted_field_node(model, z):
    """The model's ``dz/dt`` prediction for a batch node, whatever its family."""
    if isinstance(model, BaselineNet):
        return model.output_node(z)
    g = model.input_gradient_node(z)
    d = model.d
    return dc.concat([g[:, d:], -g[:, :d]], axis=1)


def serialize_model(model):
    """Binary model file contents.

    Layout (little-endian): magic ``KHM\\0``; uint32 format version; uint32
    header length; UTF-8 JSON header ``{"kind", "arch", "n_params"}``; uint64
    parameter count; that many float64 parameters.
    """
    header = json.dumps({"kind": model.kind, "arch": model.arch(), "n_params": model.n_params}, sort_keys=True)
    header = header.encode("utf-8")
    buf = io.BytesIO()
    buf.write(FORMAT_MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<Q", model.n_params))
    buf.write(model.store.theta.astype("<f8").tobytes())
    return buf.getvalue()


def _take(data, offset, n, what):
    if offset + n > len(data):
        raise FormatError(f"truncated model file: need {n} bytes for {what}, {len(data) - offset} left", offset)
    return data[offset : offset + n], offset + n


def deserialize_model(data):
    data = bytes(data)
    magic, off = _take(data, 0, 4, "magic")
    if magic != FORMAT_MAGIC:
        raise FormatError(f"not a model file (magic {magic!r})", 0)
    raw, off = _take(data, off, 8, "version and header length")
    version, hlen = struct.unpack("<II", raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version: expected {FORMAT_VERSION}, found {version}", 4)
    raw, off = _take(data, off, hlen, "header")
    try:
        header = json.loads(raw.decode("utf-8"))
        cls = _KINDS[header["kind"]]
        model = cls.from_arch(header["arch"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad model header: {exc}", 12) from exc
    count_at = off
    raw, off = _take(data, off, 8, "parameter count")
    (count,) = struct.unpack("<Q", raw)
    if count != model.n_params or count != header.get("n_params"):
        raise FormatError(f"parameter count {count} does not match architecture ({model.n_params})", count_at)
    raw, off = _take(data, off, 8 * count, "parameters")
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after parameters", off)
    model.store.set_flat(np.frombuffer(raw, dtype="<f8"))
    return model


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path):
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
