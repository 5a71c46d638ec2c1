"""Small encoder-decoder segmentation network with analytic gradients.

Layout (default widths)::

    stage1  3x3 conv, stride 1 -> affine -> relu
    stage2  3x3 conv, stride 2 -> affine -> relu
    stage3  3x3 conv, stride 2 -> affine -> relu
    head    1x1 conv           -> affine -> relu      (feature tap, stride 4)
    cls     1x1 conv + bias                            (logits at stride 4)
    bilinear upsampling back to input resolution

All arithmetic is float64. Arrays are NCHW; unbatched ``[C, H, W]`` inputs
are accepted and the trace mirrors the input rank.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

STAGES = ("stage1", "stage2", "stage3")


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Arch:
    in_channels: int = 3
    widths: tuple = (8, 16, 32)
    strides: tuple = (1, 2, 2)
    kernel: int = 3
    feature_dim: int = 16
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.widths) != len(STAGES) or len(self.strides) != len(STAGES):
            raise ModelError(f"need {len(STAGES)} widths and strides")
        if self.kernel % 2 != 1:
            raise ModelError("kernel size must be odd")

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Arch":
        return cls(**d)


# ---------------------------------------------------------------------------
# layer primitives


def _im2col(x: np.ndarray, k: int, stride: int):
    n, c, h, w = x.shape
    p = k // 2
    if k == 1 and stride == 1:
        return x.transpose(0, 2, 3, 1).reshape(n * h * w, c), (h, w)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, (ho, wo)


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int):
    n = x.shape[0]
    co, _, k, _ = w.shape
    cols, (ho, wo) = _im2col(x, k, stride)
    out = cols @ w.reshape(co, -1).T
    return out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2), cols


def conv_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape, stride: int):
    n, c, h, wd = x_shape
    co, _, k, _ = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, co)
    dw = (d2.T @ cols).reshape(w.shape)
    dcols = d2 @ w.reshape(co, -1)
    if k == 1 and stride == 1:
        return dw, dcols.reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    p = k // 2
    dcols = dcols.reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dw, dxp[:, :, p:p + h, p:p + wd]


def upsample_matrix(n_out: int, factor: int) -> np.ndarray:
    """1-D bilinear interpolation matrix (half-pixel centres, edge clamped)."""
    n_in = n_out // factor
    m = np.zeros((n_out, n_in))
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    logits: np.ndarray
    features: np.ndarray
    activations: Dict[str, np.ndarray] = field(default_factory=dict)
    batched: bool = True
    _cache: Optional[dict] = field(default=None, repr=False)
    consumed: bool = False


class SegModel:
    def __init__(self, arch: Arch, params: Optional[Dict[str, np.ndarray]] = None, seed: int = 0):
        self.arch = arch
        self.mode = "train"
        self.params = OrderedDict()
        shapes = self.param_shapes(arch)
        if params is None:
            params = self._init_params(arch, shapes, seed)
        for name, shape in shapes.items():
            if name not in params:
                raise ModelError(f"missing parameter {name}")
            value = np.asarray(params[name], dtype=np.float64)
            if value.shape != shape:
                raise ModelError(f"parameter {name} has shape {value.shape}, arch expects {shape}")
            self.params[name] = value.copy()
        self._up_cache = {}

    @staticmethod
    def param_shapes(arch: Arch) -> "OrderedDict[str, tuple]":
        shapes = OrderedDict()
        c_in = arch.in_channels
        for name, width in zip(STAGES, arch.widths):
            shapes[f"{name}.weight"] = (width, c_in, arch.kernel, arch.kernel)
            shapes[f"{name}.scale"] = (width,)
            shapes[f"{name}.shift"] = (width,)
            c_in = width
        shapes["head.weight"] = (arch.feature_dim, c_in, 1, 1)
        shapes["head.scale"] = (arch.feature_dim,)
        shapes["head.shift"] = (arch.feature_dim,)
        shapes["cls.weight"] = (arch.num_classes, arch.feature_dim, 1, 1)
        shapes["cls.bias"] = (arch.num_classes,)
        return shapes

    @staticmethod
    def _init_params(arch: Arch, shapes, seed: int) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in shapes.items():
            if name.endswith(".weight") and not name.startswith("cls"):
                fan_in = int(np.prod(shape[1:]))
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            elif name.endswith(".scale"):
                params[name] = np.ones(shape)
            else:
                # shifts, classifier weight and bias start at zero
                params[name] = np.zeros(shape)
        return params

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def train(self) -> "SegModel":
        self.mode = "train"
        return self

    def eval(self) -> "SegModel":
        self.mode = "eval"
        return self

    def copy(self) -> "SegModel":
        m = SegModel(self.arch, self.params)
        m.mode = self.mode
        return m

    def _upsample(self, size: int) -> np.ndarray:
        if size not in self._up_cache:
            self._up_cache[size] = upsample_matrix(size, self.arch.stride)
        return self._up_cache[size]

    def forward(self, x: np.ndarray) -> ForwardTrace:
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == 4
        if not batched:
            if x.ndim != 3:
                raise ModelError(f"expected [C, H, W] or [N, C, H, W], got {x.shape}")
            x = x[None]
        n, c, h, w = x.shape
        a = self.arch
        if c != a.in_channels:
            raise ModelError(f"input has {c} channels, model expects {a.in_channels}")
        if h % a.stride or w % a.stride:
            raise ModelError(f"input size {h}x{w} is not a multiple of stride {a.stride}")
        keep = self.mode == "train"
        p = self.params
        cache = {}
        acts = {}
        cur = x
        for name, s in zip(STAGES, a.strides):
            pre, cols = conv_forward(cur, p[f"{name}.weight"], s)
            acts[f"{name}.pre"] = pre
            z = pre * p[f"{name}.scale"][:, None, None] + p[f"{name}.shift"][:, None, None]
            out = np.maximum(z, 0.0)
            if keep:
                cache[name] = (cur.shape, cols, pre, z > 0, s)
            cur = out
        pre, cols = conv_forward(cur, p["head.weight"], 1)
        z = pre * p["head.scale"][:, None, None] + p["head.shift"][:, None, None]
        feats = np.maximum(z, 0.0)
        if keep:
            cache["head"] = (cur.shape, cols, pre, z > 0, 1)
        low, cols = conv_forward(feats, p["cls.weight"], 1)
        low = low + p["cls.bias"][:, None, None]
        if keep:
            cache["cls"] = (feats.shape, cols)
        if a.stride == 1:
            logits = low
        else:
            uh, uw = self._upsample(h), self._upsample(w)
            logits = uh @ low @ uw.T
        if keep:
            cache["up"] = (h, w)
        if not batched:
            return ForwardTrace(logits[0], feats[0], {k: v[0] for k, v in acts.items()}, False,
                                cache if keep else None)
        return ForwardTrace(logits, feats, acts, True, cache if keep else None)

    def backward(self, trace: ForwardTrace, d_logits=None, d_features=None) -> Dict[str, np.ndarray]:
        """Gradients of ``<logits, d_logits> + <features, d_features>`` w.r.t. every parameter."""
        if trace.consumed:
            raise ModelError("forward trace already consumed by a backward pass")
        if trace._cache is None:
            raise ModelError("trace was produced in eval mode; call model.train() first")
        trace.consumed = True
        cache = trace._cache
        trace._cache = None
        p = self.params
        a = self.arch

        def batch(v, like):
            if v is None:
                return None
            v = np.asarray(v, dtype=np.float64)
            if v.shape != like.shape:
                raise ModelError(f"gradient shape {v.shape} does not match output {like.shape}")
            return v if trace.batched else v[None]

        dl = batch(d_logits, trace.logits)
        df = batch(d_features, trace.features)
        grads = {}
        feats_shape, cls_cols = cache["cls"]
        n = feats_shape[0]
        if dl is None:
            dl = np.zeros((n, a.num_classes) + tuple(cache["up"]))
        if a.stride == 1:
            dlow = dl
        else:
            h, w = cache["up"]
            dlow = self._upsample(h).T @ dl @ self._upsample(w)
        grads["cls.bias"] = dlow.sum(axis=(0, 2, 3))
        grads["cls.weight"], dfeat = conv_backward(dlow, cls_cols, p["cls.weight"], feats_shape, 1)
        if df is not None:
            dfeat = dfeat + df
        dcur = dfeat
        for name in ("head",) + tuple(reversed(STAGES)):
            in_shape, cols, pre, on, s = cache[name]
            dz = dcur * on
            grads[f"{name}.shift"] = dz.sum(axis=(0, 2, 3))
            grads[f"{name}.scale"] = (dz * pre).sum(axis=(0, 2, 3))
            dpre = dz * p[f"{name}.scale"][:, None, None]
            grads[f"{name}.weight"], dcur = conv_backward(dpre, cols, p[f"{name}.weight"], in_shape, s)
        return OrderedDict((k, grads[k]) for k in p)


def forward(model: SegModel, x: np.ndarray) -> ForwardTrace:
    return model.forward(x)


def backward(model: SegModel, trace: ForwardTrace, d_logits=None, d_features=None):
    return model.backward(trace, d_logits, d_features)


def expand_input_nir(model: SegModel) -> SegModel:
    """Return a 4-channel copy whose NIR input weights duplicate the red-channel weights."""
    if model.arch.in_channels != 3:
        raise ModelError(f"expand_input_nir needs a 3-channel model, got {model.arch.in_channels}")
    arch = Arch(**{**model.arch.to_json(), "in_channels": 4})
    params = {k: v.copy() for k, v in model.params.items()}
    w = params["stage1.weight"]
    params["stage1.weight"] = np.concatenate([w, w[:, :1]], axis=1)
    out = SegModel(arch, params)
    out.mode = model.mode
    return out


# ---------------------------------------------------------------------------
# checkpoint format:
#   b"AGSP" | u16 version | u32 len | arch JSON | u32 count |
#   count x (u16 len, name | u8 len, dtype | u8 ndim, ndim x u32 | raw data)
# all integers and tensor data little-endian

MAGIC = b"AGSP"
VERSION = 1


def save_checkpoint(path, arch: Arch, tensors: Dict[str, np.ndarray], dtype="<f8", meta: Optional[dict] = None):
    header = {"arch": arch.to_json()}
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype=np.dtype(dtype))
        nb = name.encode()
        dt = arr.dtype.str.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(dt)) + dt)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Return ``(arch, tensors, meta)`` from a checkpoint file."""
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(n))
        arch = Arch.from_json(header["arch"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    (count,) = r.unpack("<I")
    tensors = OrderedDict()
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ld,) = r.unpack("<B")
        dtype = np.dtype(r.take(ld).decode())
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return arch, tensors, header.get("meta", {})


def save_model(model: SegModel, path, dtype="<f8") -> None:
    save_checkpoint(path, model.arch, model.params, dtype)


def load_model(path, expect: Optional[Arch] = None) -> SegModel:
    arch, tensors, _ = read_checkpoint(path)
    if expect is not None and arch != expect:
        raise CheckpointError(f"{path}: arch mismatch: checkpoint has {arch.to_json()}, run expects {expect.to_json()}")
    params = {k: v for k, v in tensors.items() if k in SegModel.param_shapes(arch)}
    try:
        return SegModel(arch, params)
    except ModelError as e:
        raise CheckpointError(f"{path}: {e}") from e
