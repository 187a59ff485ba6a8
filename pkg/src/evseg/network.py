"""Three-stage U-shaped evidential segmentation network.

    image -> EEB(c1) ------------------------------ skip1 --(EUGA)--+
               |  pool                                               |
             EEB(c2) ------------- skip2 ------+                     |
               |  pool                         |                     |
             conv3x3(c3) -> tokenised KAN      |                     |
               |  upsample, concat ------------+                     |
             conv3x3(c2)                                             |
               |  upsample, concat ----------------------------------+
             conv3x3(c1) -> conv1x1(C) -> logits

The EEB (multi-scale block) is three parallel 3x3 convolutions at dilations
1, 2, 4, concatenated and fused by a 1x1 convolution, then relu. The KAN block
flattens the bottleneck pixels into tokens and applies one KAN layer with a
residual connection.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import flatcfg
from . import tensor as T
from .euga import EugaConfig, EugaWeights, euga_forward
from .evidential import GENERATORS, EvidenceField, to_field
from .tensor import Tensor, _record, as_tensor


@dataclass
class NetConfig:
    in_channels: int = 3
    classes: int = 2
    stage_channels: tuple[int, ...] = (16, 32, 64)
    eeb_dilations: tuple[int, ...] = (1, 2, 4)
    kan_grid: int = 8
    kan_spline_order: int = 3
    kan_range: float = 3.0
    use_euga: bool = True
    evidence_fn: str = "evi"
    euga: EugaConfig = field(default_factory=EugaConfig)
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.eeb_dilations = tuple(self.eeb_dilations)
        if len(self.stage_channels) != 3:
            raise ValueError("stage_channels must list exactly 3 widths")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.evidence_fn not in GENERATORS:
            raise ValueError(f"evidence_fn must be one of {sorted(GENERATORS)}")
        if self.kan_grid < 1 or self.kan_spline_order < 0:
            raise ValueError("invalid KAN grid")
        if self.euga.feature_channels != self.stage_channels[0]:
            self.euga = EugaConfig(self.euga.rank, self.euga.token_stride,
                                   self.stage_channels[0], self.euga.qk_kernel)


# ---------------------------------------------------------------- KAN


def spline_knots(grid: int, order: int, lo: float, hi: float) -> np.ndarray:
    h = (hi - lo) / grid
    return lo + h * np.arange(-order, grid + order + 1, dtype=np.float64)


def _bspline_reference(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    """Full Cox-de Boor recursion: x (...,) -> bases (..., len(knots) - order - 1)."""
    xe = x[..., None]
    b = ((xe >= knots[:-1]) & (xe < knots[1:])).astype(np.float64)
    for p in range(1, order + 1):
        left = (xe - knots[: -p - 1]) / (knots[p:-1] - knots[: -p - 1])
        right = (knots[p + 1:] - xe) / (knots[p + 1:] - knots[1:-p])
        b = left * b[..., :-1] + right * b[..., 1:]
    return b


def _bspline_local(x: np.ndarray, grid: int, order: int, lo: float, hi: float):
    """Nonzero uniform B-spline values per input.

    Returns (first basis index, values (..., order + 1), derivatives wrt x).
    Inputs outside the extended knot span get all-zero values.
    """
    h = (hi - lo) / grid
    n_int = grid + 2 * order
    u = (x - lo) / h + order
    inside = (u >= 0) & (u < n_int)
    i = np.clip(np.floor(u), 0, n_int - 1)
    f = np.where(inside, u - i, 0.0)
    vals = [np.where(inside, 1.0, 0.0)]
    prev = vals
    for p in range(1, order + 1):
        prev = vals
        vals = []
        for r in range(p + 1):
            v = 0.0
            if r >= 1:
                v = v + (f + p - r) / p * prev[r - 1]
            if r < p:
                v = v + (r + 1 - f) / p * prev[r]
            vals.append(v)
    if order == 0:
        derivs = [np.zeros_like(x)]
    else:
        derivs = []
        for r in range(order + 1):
            d = 0.0
            if r >= 1:
                d = d + prev[r - 1]
            if r < order:
                d = d - prev[r]
            derivs.append(np.asarray(d) / h)
    start = i.astype(np.int64) - order
    return start, np.stack(vals, axis=-1), np.stack(derivs, axis=-1)


def _scatter(start: np.ndarray, local: np.ndarray, order: int, n_basis: int) -> np.ndarray:
    padded = np.zeros(start.shape + (n_basis + 2 * order,))
    idx = (start + order)[..., None] + np.arange(order + 1)
    np.put_along_axis(padded, idx, local, axis=-1)
    return padded[..., order:order + n_basis]


def bspline_basis(x, grid: int, order: int, lo: float, hi: float) -> Tensor:
    """Tape-registered uniform B-spline basis, (M, D) -> (M, D, grid + order)."""
    x = as_tensor(x)
    n_basis = grid + order
    start, vals, derivs = _bspline_local(x.data, grid, order, lo, hi)
    out = _scatter(start, vals, order, n_basis)

    def back(g):
        # basis indices outside [0, n_basis) do not exist; zero-pad g to match
        gp = np.zeros(g.shape[:-1] + (n_basis + 2 * order,))
        gp[..., order:order + n_basis] = g
        idx = (start + order)[..., None] + np.arange(order + 1)
        return ((np.take_along_axis(gp, idx, axis=-1) * derivs).sum(axis=-1),)

    return _record("bspline", out, (x,), back)


@dataclass
class KanLayer:
    base_weight: Tensor  # (D_in, D_out)
    coef: Tensor  # (D_in, grid + order, D_out)
    grid: int = 8
    order: int = 3
    lo: float = -3.0
    hi: float = 3.0

    @property
    def num_basis(self) -> int:
        return self.grid + self.order


def kan_forward(tokens, layer: KanLayer) -> Tensor:
    """out_j = sum_i w_b[i, j] silu(x_i) + sum_i sum_k c[i, k, j] B_k(x_i)."""
    x = as_tensor(tokens)
    m, d_in = x.shape
    base = T.silu(x) @ layer.base_weight
    basis = bspline_basis(x, layer.grid, layer.order, layer.lo, layer.hi)
    k = layer.num_basis
    spline = basis.reshape(m, d_in * k) @ layer.coef.reshape(d_in * k, layer.coef.shape[-1])
    return base + spline


# ---------------------------------------------------------------- EEB


def eeb_forward(x, branches, fuse, dilations=(1, 2, 4)) -> Tensor:
    """branches: [(w, b)] per dilation; fuse: (w, b) 1x1 over the concatenation."""
    outs = [T.conv2d(x, w, b, dilation=d) for (w, b), d in zip(branches, dilations)]
    return T.relu(T.conv2d(T.concat(outs, axis=1), fuse[0], fuse[1]))


# ---------------------------------------------------------------- network


def _param_shapes(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    c1, c2, c3 = cfg.stage_channels
    nd = len(cfg.eeb_dilations)
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def eeb(name, cin, cout):
        for d in cfg.eeb_dilations:
            shapes.append((f"{name}.d{d}.w", (cout, cin, 3, 3)))
            shapes.append((f"{name}.d{d}.b", (cout,)))
        shapes.append((f"{name}.fuse.w", (cout, nd * cout, 1, 1)))
        shapes.append((f"{name}.fuse.b", (cout,)))

    eeb("enc1", cfg.in_channels, c1)
    eeb("enc2", c1, c2)
    shapes += [("bott.w", (c3, c2, 3, 3)), ("bott.b", (c3,)),
               ("tkb.base", (c3, c3)), ("tkb.coef", (c3, cfg.kan_grid + cfg.kan_spline_order, c3)),
               ("dec2.w", (c2, c3 + c2, 3, 3)), ("dec2.b", (c2,)),
               ("dec1.w", (c1, c2 + c1, 3, 3)), ("dec1.b", (c1,)),
               ("head.w", (cfg.classes, c1, 1, 1)), ("head.b", (cfg.classes,))]
    if cfg.use_euga:
        r, k = cfg.euga.rank, cfg.euga.qk_kernel
        shapes += [("euga.q.w", (r, 1, k, k)), ("euga.q.b", (r,)),
                   ("euga.k.w", (r, 1, k, k)), ("euga.k.b", (r,))]
    return shapes


def param_count(cfg: NetConfig) -> int:
    return sum(int(np.prod(s)) for _, s in _param_shapes(cfg))


def init_params(cfg: NetConfig) -> "OrderedDict[str, Tensor]":
    """Fan-in uniform init (bound sqrt(6 / fan_in)) for weights, zero biases,
    spline coefficients ~ N(0, 0.01^2). Deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in _param_shapes(cfg):
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif name == "tkb.coef":
            data = rng.normal(0.0, 0.01, size=shape)
        else:
            fan_in = shape[0] if name == "tkb.base" else int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


class Net:
    def __init__(self, cfg: NetConfig, params=None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        expected = _param_shapes(cfg)
        if [(n, tuple(p.shape)) for n, p in self.params.items()] != expected:
            raise CheckpointError("parameter layout does not match the network config")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def skip_uses_euga(self) -> bool:
        return self.cfg.use_euga

    def kan_layer(self) -> KanLayer:
        cfg = self.cfg
        return KanLayer(self["tkb.base"], self["tkb.coef"], cfg.kan_grid, cfg.kan_spline_order,
                        -cfg.kan_range, cfg.kan_range)

    def euga_weights(self) -> EugaWeights:
        return EugaWeights(self["euga.q.w"], self["euga.q.b"], self["euga.k.w"], self["euga.k.b"])

    def _eeb(self, name, x):
        ds = self.cfg.eeb_dilations
        branches = [(self[f"{name}.d{d}.w"], self[f"{name}.d{d}.b"]) for d in ds]
        return eeb_forward(x, branches, (self[f"{name}.fuse.w"], self[f"{name}.fuse.b"]), ds)

    def forward(self, image, umap=None) -> Tensor:
        """image (N, C_in, H, W), umap (N, 1, H, W) or None for all-ones -> logits (N, C, H, W)."""
        x = as_tensor(image)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        n, _, h, w = x.shape
        if h % 4 or w % 4:
            raise T.DimensionError(f"image size {h}x{w} must be divisible by 4")
        if umap is None:
            umap = Tensor(np.ones((n, 1, h, w)))
        umap = as_tensor(umap)
        if umap.ndim == 3:
            umap = umap.reshape(1, *umap.shape)

        e1 = self._eeb("enc1", x)
        e2 = self._eeb("enc2", T.avgpool(e1, 2))
        b = T.relu(T.conv2d(T.avgpool(e2, 2), self["bott.w"], self["bott.b"]))
        _, c3, hb, wb = b.shape
        tokens = T.transpose(b, (0, 2, 3, 1)).reshape(n * hb * wb, c3)
        k = kan_forward(tokens, self.kan_layer())
        b = b + T.transpose(k.reshape(n, hb, wb, c3), (0, 3, 1, 2))

        d2 = T.relu(T.conv2d(T.concat([T.upsample(b, 2), e2]), self["dec2.w"], self["dec2.b"]))
        skip = euga_forward(e1, umap, self.euga_weights(), self.cfg.euga) if self.cfg.use_euga else e1
        d1 = T.relu(T.conv2d(T.concat([T.upsample(d2, 2), skip]), self["dec1.w"], self["dec1.b"]))
        return T.conv2d(d1, self["head.w"], self["head.b"])

    def evidence(self, logits) -> Tensor:
        return GENERATORS[self.cfg.evidence_fn](logits)

    def field(self, image, umap=None) -> EvidenceField:
        return to_field(self.evidence(self.forward(image, umap)))


def net_forward(image, umap, net: Net) -> Tensor:
    return net.forward(image, umap)


# ---------------------------------------------------------------- Adam


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def sgd_adam_step(params, grads, state: Adam | None = None, lr: float = 1e-4) -> Adam:
    """One Adam update; creates the optimizer state on first call."""
    if state is None:
        state = Adam(params, lr=lr)
    state.lr = lr
    state.step(grads)
    return state


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


CKPT_MAGIC = b"EVSEGCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, net: Net) -> None:
    """magic, u32 version, u32-length config text, u32 count, then per tensor:
    u32-length name, u32 ndim, u32 dims, float64 payload. All little-endian."""
    cfg_text = flatcfg.dumps(net.cfg).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(cfg_text)))
        fh.write(cfg_text)
        fh.write(struct.pack("<I", len(net.params)))
        for name, p in net.params.items():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Net:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    try:
        version, n = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        cfg = flatcfg.loads(NetConfig(), blob[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        params: OrderedDict[str, Tensor] = OrderedDict()
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + ln].decode()
            pos += ln
            (nd,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{nd}I", blob, pos)
            pos += 4 * nd
            size = int(np.prod(shape))
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    except (struct.error, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from None
    return Net(cfg, params)
