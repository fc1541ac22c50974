"""BiSEL layers, BiMoNN models, whole-network binarization and bit-packed execution."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._ops import FFTConv, softplus, softplus_grad, xi, xi_grad
from .bise import (
    BIAS_OFFSET,
    BINARY,
    ActivationCertificate,
    AlmostBinaryRange,
    BiSEParams,
    binarize_bise,
    output_range,
)
from .lui import LUICertificate, LUIParams, binarize_lui, lui_output_range, MAX_CHANNELS
from .morphology import BinarySet, read_pbm, write_pbm

MAGIC = "BIMONN"
FORMAT_VERSION = 1
PARAM_NAMES = ("W", "b", "p", "beta", "lui_b", "lui_p")


class ModelFormatError(ValueError):
    """Raised for unreadable or incompatible model files."""


class BiselLayer:
    """``N`` input channels, ``K`` outputs: one BiSE per ``(k, n)`` and one LUI per ``k``.

    Raw parameters live in a dict of arrays::

        W      (K, N, s, s)   BiSE weights
        b      (K, N)         BiSE biases
        p      (K, N)         BiSE scales
        beta   (K, N)         LUI coefficients
        lui_b  (K,)           LUI biases
        lui_p  (K,)           LUI scales
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_side: int,
                 params: dict | None = None, dtype=np.float32):
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be positive")
        if in_channels > MAX_CHANNELS:
            raise ValueError(f"at most {MAX_CHANNELS} input channels are supported")
        if kernel_side < 1 or kernel_side % 2 == 0:
            raise ValueError(f"kernel side must be odd, got {kernel_side}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_side = kernel_side
        shapes = self.param_shapes()
        if params is None:
            params = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.params = {}
        for name in PARAM_NAMES:
            arr = np.asarray(params[name], dtype=dtype)
            if arr.shape != shapes[name]:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shapes[name]}")
            self.params[name] = arr.copy()

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k, n, s = self.out_channels, self.in_channels, self.kernel_side
        return {"W": (k, n, s, s), "b": (k, n), "p": (k, n),
                "beta": (k, n), "lui_b": (k,), "lui_p": (k,)}

    @property
    def dtype(self):
        return self.params["W"].dtype

    def n_trainable(self, include_scales: bool = False) -> int:
        total = sum(self.params[name].size for name in PARAM_NAMES)
        if not include_scales:
            total -= self.params["p"].size + self.params["lui_p"].size
        return total

    def bise(self, k: int, n: int) -> BiSEParams:
        P = self.params
        return BiSEParams(P["W"][k, n].astype(np.float64), float(P["b"][k, n]), float(P["p"][k, n]))

    def lui(self, k: int) -> LUIParams:
        P = self.params
        return LUIParams(P["beta"][k].astype(np.float64), float(P["lui_b"][k]), float(P["lui_p"][k]))

    def set_bise(self, k: int, n: int, params: BiSEParams) -> None:
        self.params["W"][k, n] = params.weights
        self.params["b"][k, n] = params.bias
        self.params["p"][k, n] = params.scale

    def set_lui(self, k: int, params: LUIParams) -> None:
        self.params["beta"][k] = params.betas
        self.params["lui_b"][k] = params.bias
        self.params["lui_p"][k] = params.scale

    def copy(self, dtype=None) -> BiselLayer:
        return BiselLayer(self.in_channels, self.out_channels, self.kernel_side,
                          self.params, dtype or self.dtype)

    def forward(self, x: np.ndarray, keep: bool = False):
        """``x`` is ``(B, N, H, W)``; returns ``(B, K, H, W)`` (and a cache if ``keep``)."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected input (B, {self.in_channels}, H, W), got {x.shape}")
        P = self.params
        dt = self.dtype
        x = x.astype(dt, copy=False)
        conv = FFTConv(x, self.kernel_side)
        w_eff = softplus(P["W"])
        c = softplus(P["b"]) + dt.type(BIAS_OFFSET)
        z = conv.forward(w_eff) - c[None, :, :, None, None]
        y = xi(P["p"][None, :, :, None, None] * z)
        beta = softplus(P["beta"])
        c_lui = softplus(P["lui_b"]) + dt.type(BIAS_OFFSET)
        t = np.einsum("bknhw,kn->bkhw", y, beta) - c_lui[None, :, None, None]
        out = xi(P["lui_p"][None, :, None, None] * t)
        if keep:
            return out, (conv, w_eff, z, y, beta, t)
        return out

    def backward(self, cache, grad_out: np.ndarray) -> tuple[dict, np.ndarray]:
        P = self.params
        conv, w_eff, z, y, beta, t = cache
        q = P["lui_p"][None, :, None, None]
        slope = xi_grad(q * t) * grad_out
        grads = {"lui_p": np.einsum("bkhw,bkhw->k", slope, t)}
        gt = slope * q
        grads["beta"] = np.einsum("bkhw,bknhw->kn", gt, y) * softplus_grad(P["beta"])
        grads["lui_b"] = -gt.sum(axis=(0, 2, 3)) * softplus_grad(P["lui_b"])
        gy = gt[:, :, None] * beta[None, :, :, None, None]
        p = P["p"][None, :, :, None, None]
        slope_b = xi_grad(p * z) * gy
        grads["p"] = np.einsum("bknhw,bknhw->kn", slope_b, z)
        gz = slope_b * p
        grads["b"] = -gz.sum(axis=(0, 3, 4)) * softplus_grad(P["b"])
        gw_eff, gx = conv.backward(gz, w_eff)
        grads["W"] = gw_eff * softplus_grad(P["W"])
        return grads, gx

    def __repr__(self) -> str:
        return f"BiselLayer({self.in_channels} -> {self.out_channels}, side={self.kernel_side})"


class BimonnModel:
    """A stack of BiSEL layers with matching channel counts."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("a BiMoNN needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError(
                    f"channel mismatch: {prev.out_channels} outputs feed {nxt.in_channels} inputs"
                )
        self.layers = layers

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    @property
    def dtype(self):
        return self.layers[0].dtype

    @property
    def border(self) -> int:
        """Pixels on each side affected by zero padding: the sum of kernel radii."""
        return sum(layer.kernel_side // 2 for layer in self.layers)

    def architecture(self) -> list[tuple[int, int, int]]:
        return [(l.in_channels, l.out_channels, l.kernel_side) for l in self.layers]

    def copy(self, dtype=None) -> BimonnModel:
        return BimonnModel([layer.copy(dtype) for layer in self.layers])

    def astype(self, dtype) -> BimonnModel:
        return self.copy(np.dtype(dtype))

    def parameters(self):
        """``(layer_index, name, array)`` in declaration order; arrays are live views."""
        for i, layer in enumerate(self.layers):
            for name in PARAM_NAMES:
                yield i, name, layer.params[name]

    def n_trainable(self, include_scales: bool = False) -> int:
        return sum(layer.n_trainable(include_scales) for layer in self.layers)

    def forward(self, x: np.ndarray, keep: bool = False):
        caches = []
        for layer in self.layers:
            if keep:
                x, cache = layer.forward(x, keep=True)
                caches.append(cache)
            else:
                x = layer.forward(x)
        return (x, caches) if keep else x

    def backward(self, caches, grad_out: np.ndarray) -> tuple[list[dict], np.ndarray]:
        grads = [None] * len(self.layers)
        g = grad_out
        for i in reversed(range(len(self.layers))):
            grads[i], g = self.layers[i].backward(caches[i], g)
        return grads, g

    def __repr__(self) -> str:
        return f"BimonnModel({self.architecture()})"


def _to_batch(inputs, n_channels: int) -> tuple[np.ndarray, bool]:
    if isinstance(inputs, np.ndarray) and inputs.ndim == 4:
        return inputs, False
    channels = [c.to_array() if isinstance(c, BinarySet) else np.asarray(c) for c in inputs]
    if len(channels) != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {len(channels)}")
    return np.stack(channels)[None], True


def bisel_forward(layer: BiselLayer, inputs):
    """Apply one layer to a list of ``N`` grids; returns a list of ``K`` grids."""
    x, single = _to_batch(inputs, layer.in_channels)
    out = layer.forward(x.astype(layer.dtype, copy=False))
    return list(out[0]) if single else out


def bimonn_forward(model: BimonnModel, inputs):
    x, single = _to_batch(inputs, model.in_channels)
    out = model.forward(x.astype(model.dtype, copy=False))
    return list(out[0]) if single else out


def threshold(values) -> np.ndarray:
    """Binarize float outputs with the strict ``> 1/2`` rule."""
    return np.asarray(values) > 0.5


# --- binarization ---------------------------------------------------------------

@dataclass
class LayerCertificate:
    bise: list          # [k][n] ActivationCertificate
    lui: list           # [k] LUICertificate
    input_ranges: list  # [n] AlmostBinaryRange
    output_ranges: list  # [k] AlmostBinaryRange

    @property
    def totally_activated(self) -> bool:
        return all(c.exact for row in self.bise for c in row) and all(c.exact for c in self.lui)


@dataclass
class NetworkCertificate:
    layers: list = field(default_factory=list)

    @property
    def totally_activated(self) -> bool:
        return all(layer.totally_activated for layer in self.layers)

    @property
    def in_channels(self) -> int:
        return len(self.layers[0].input_ranges)

    def elements(self):
        """``(layer, kind, k, n, certificate)`` for every element; ``n`` is None for LUIs."""
        for li, layer in enumerate(self.layers):
            for k, row in enumerate(layer.bise):
                for n, cert in enumerate(row):
                    yield li, "bise", k, n, cert
                yield li, "lui", k, None, layer.lui[k]


def binarize_network(model: BimonnModel) -> NetworkCertificate:
    """Certify every element layer by layer, propagating almost-binary ranges.

    A channel keeps a tight range only when the LUI producing it and every
    BiSE feeding that LUI are exact; otherwise it falls back to ``(0, 1)``.
    """
    result = NetworkCertificate()
    ranges = [BINARY] * model.in_channels
    for layer in model.layers:
        bise_rows, luis, out_ranges = [], [], []
        for k in range(layer.out_channels):
            row, lui_in = [], []
            for n in range(layer.in_channels):
                params = layer.bise(k, n)
                cert = binarize_bise(params, ranges[n])
                row.append(cert)
                lui_in.append(output_range(params, ranges[n], cert) if cert.exact else BINARY)
            lui_params = layer.lui(k)
            lcert = binarize_lui(lui_params, lui_in)
            luis.append(lcert)
            bise_rows.append(row)
            if lcert.exact and all(c.exact for c in row):
                out_ranges.append(lui_output_range(lui_params, lui_in, lcert))
            else:
                out_ranges.append(BINARY)
        result.layers.append(LayerCertificate(bise_rows, luis, list(ranges), out_ranges))
        ranges = out_ranges
    return result


def execute_binarized(cert: NetworkCertificate, inputs) -> list[BinarySet]:
    """Run the certified set-operation program on bit-packed channels."""
    channels = list(inputs)
    if len(channels) != cert.in_channels:
        raise ValueError(f"expected {cert.in_channels} channels, got {len(channels)}")
    for layer in cert.layers:
        outputs = []
        for k, row in enumerate(layer.bise):
            branch = [c.apply(x) for c, x in zip(row, channels)]
            outputs.append(layer.lui[k].apply(branch))
        channels = outputs
    return channels


# --- persistence ---------------------------------------------------------------

def encode_model(model: BimonnModel) -> bytes:
    lines = [f"{MAGIC}{FORMAT_VERSION}", f"layers={len(model.layers)}"]
    for i, layer in enumerate(model.layers):
        lines.append(f"layer{i}={layer.in_channels},{layer.out_channels},{layer.kernel_side}")
    lines.append("dtype=float32")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    blocks = [np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, _, arr in model.parameters()]
    return header + b"".join(blocks)


def decode_model(data: bytes) -> BimonnModel:
    end = data.find(b"\nend\n")
    if end < 0:
        raise ModelFormatError("missing header terminator")
    try:
        lines = data[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise ModelFormatError("header is not ASCII") from exc
    magic = lines[0]
    if not magic.startswith(MAGIC):
        raise ModelFormatError(f"bad magic {magic!r}")
    if magic != f"{MAGIC}{FORMAT_VERSION}":
        raise ModelFormatError(f"unsupported format version {magic[len(MAGIC):]!r}")
    meta = dict(line.split("=", 1) for line in lines[1:])
    try:
        n_layers = int(meta["layers"])
        shapes = [tuple(int(v) for v in meta[f"layer{i}"].split(",")) for i in range(n_layers)]
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"malformed header: {exc}") from exc
    if meta.get("dtype") != "float32":
        raise ModelFormatError(f"unsupported dtype {meta.get('dtype')!r}")
    pos = end + len(b"\nend\n")
    layers = []
    for n_in, n_out, side in shapes:
        layer = BiselLayer(n_in, n_out, side)
        params = {}
        for name, shape in layer.param_shapes().items():
            count = int(np.prod(shape))
            chunk = data[pos:pos + 4 * count]
            if len(chunk) != 4 * count:
                raise ModelFormatError("truncated parameter block")
            params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
            pos += 4 * count
        layers.append(BiselLayer(n_in, n_out, side, params))
    if pos != len(data):
        raise ModelFormatError("trailing bytes after parameter blocks")
    return BimonnModel(layers)


def save_model(model: BimonnModel, path) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path) -> BimonnModel:
    return decode_model(Path(path).read_bytes())


def _range_record(r: AlmostBinaryRange) -> list[float]:
    return [r.u, r.v]


def save_certificate(cert: NetworkCertificate, path) -> None:
    """Write ``certificate.json`` plus one PBM per BiSE structuring element into ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "bimonn-certificate", "version": FORMAT_VERSION,
                "totally_activated": cert.totally_activated, "layers": []}
    for li, layer in enumerate(cert.layers):
        entry = {"input_ranges": [_range_record(r) for r in layer.input_ranges],
                 "output_ranges": [_range_record(r) for r in layer.output_ranges],
                 "bise": [], "lui": []}
        for k, row in enumerate(layer.bise):
            recs = []
            for n, c in enumerate(row):
                name = f"layer{li}_k{k}_n{n}.pbm"
                write_pbm(root / name, BinarySet.from_array(c.se))
                recs.append({**c.to_record(), "se": name})
            entry["bise"].append(recs)
            entry["lui"].append(layer.lui[k].to_record())
        manifest["layers"].append(entry)
    (root / "certificate.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_certificate(path) -> NetworkCertificate:
    root = Path(path)
    manifest = json.loads((root / "certificate.json").read_text())
    if manifest.get("format") != "bimonn-certificate":
        raise ModelFormatError("not a certificate manifest")
    cert = NetworkCertificate()
    for entry in manifest["layers"]:
        bise_rows = []
        for recs in entry["bise"]:
            row = []
            for rec in recs:
                se = read_pbm(root / rec["se"]).to_array()
                row.append(ActivationCertificate(rec["op"], se, rec["complemented"],
                                                 rec["exact"], rec["dissimilarity"]))
            bise_rows.append(row)
        luis = []
        for rec in entry["lui"]:
            n = len(entry["input_ranges"])
            chosen = np.zeros(n, dtype=bool)
            chosen[rec["channels"]] = True
            luis.append(LUICertificate(rec["kind"], chosen, rec["complemented"],
                                       rec["exact"], rec["dissimilarity"]))
        cert.layers.append(LayerCertificate(
            bise_rows, luis,
            [AlmostBinaryRange(*r) for r in entry["input_ranges"]],
            [AlmostBinaryRange(*r) for r in entry["output_ranges"]],
        ))
    return cert


def describe_certificate(cert: NetworkCertificate) -> str:
    """One row per element: layer, position, operation, exactness, dissimilarity."""
    rows = [f"{'layer':>5} {'elem':<10} {'operation':<26} {'act':<3} {'dissim':>10}"]
    for li, kind, k, n, c in cert.elements():
        if kind == "bise":
            where = f"bise[{k},{n}]"
            what = ("anti-" if c.complemented else "") + f"{c.op} |S|={int(c.se.sum())}"
        else:
            where = f"lui[{k}]"
            chans = ",".join(str(i) for i in np.flatnonzero(c.channels))
            what = ("not " if c.complemented else "") + f"{c.kind}({chans})"
        mark = "ok" if c.exact else "x"
        rows.append(f"{li:>5} {where:<10} {what:<26} {mark:<3} {c.dissimilarity:>10.4g}")
    return "\n".join(rows)
