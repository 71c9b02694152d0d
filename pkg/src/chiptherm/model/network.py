"""Conditioned encoder/decoder surrogate.

The query map and a reference pair (a source map and its successor) are
encoded by dilated-conv encoders with progressive 2x pooling. At the bottleneck the three feature maps
are concatenated channel-wise (or, in pixel-level mode, the three inputs are
stacked before a single encoder), sinusoidal coordinate channels are appended,
and a decoder of stride-2 transposed convolutions with skip connections from
the query encoder reconstructs the next-frame map through a linear 1x1 head.

Level widths are ``base_channels * 2**level``. Skip connections always come
from the encoder that sees the query (the only encoder in pixel-level mode).
"""

from __future__ import annotations

import enum
import functools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..fields import FieldKind, GridSpec, ScalarField
from . import autodiff as ad


class ConcatMode(enum.Enum):
    FeatureLevel = "FeatureLevel"
    PixelLevel = "PixelLevel"


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 8
    depth: int = 3
    dilation_rates: tuple[int, ...] = (1, 2, 4)
    pos_dim: int = 16
    concat_mode: ConcatMode = ConcatMode.FeatureLevel
    use_pair_conditioning: bool = True
    dropout_rate: float = 0.25
    shared_encoder: bool = True
    bilinear_decoder: bool = False
    padding: str = "edge"

    def __post_init__(self):
        if self.pos_dim % 4:
            raise ValueError("pos_dim must be a multiple of 4")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if len(self.dilation_rates) != self.depth:
            raise ValueError("need one dilation rate per encoder level")
        if self.padding not in ("zeros", "edge"):
            raise ValueError("padding must be 'zeros' or 'edge'")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        object.__setattr__(self, "dilation_rates", tuple(int(d) for d in self.dilation_rates))

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** l for l in range(self.depth)]

    @property
    def n_encoders(self) -> int:
        if self.concat_mode is ConcatMode.PixelLevel or not self.use_pair_conditioning:
            return 1
        return 1 if self.shared_encoder else 3

    @property
    def encoder_in_channels(self) -> int:
        if self.concat_mode is ConcatMode.PixelLevel and self.use_pair_conditioning:
            return 3
        return 1

    @property
    def fused_channels(self) -> int:
        c = self.widths()[-1]
        if self.concat_mode is ConcatMode.FeatureLevel and self.use_pair_conditioning:
            return 3 * c
        return c

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["concat_mode"] = self.concat_mode.value
        rec["dilation_rates"] = list(self.dilation_rates)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> ArchConfig:
        rec = dict(rec)
        rec.setdefault("padding", "zeros")
        rec["concat_mode"] = ConcatMode(rec["concat_mode"])
        rec["dilation_rates"] = tuple(rec["dilation_rates"])
        return cls(**rec)


@dataclass(frozen=True)
class Normalization:
    """Affine map of temperatures onto [0, 1]: (T - t_floor) / (max_i - t_floor)."""
    t_floor: float = 25.0
    max_i: float = 55.0

    def __post_init__(self):
        if not self.max_i > self.t_floor:
            raise ValueError("max_i must exceed t_floor")

    @property
    def span(self) -> float:
        return self.max_i - self.t_floor

    def forward(self, t):
        return (np.asarray(t, dtype=np.float64) - self.t_floor) / self.span

    def inverse(self, y):
        return self.t_floor + np.asarray(y, dtype=np.float64) * self.span


def param_layout(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Named parameter slices in checkpoint order."""
    out = []
    w = arch.widths()
    for e in range(arch.n_encoders):
        cin = arch.encoder_in_channels
        for l, c in enumerate(w):
            out.append((f"enc{e}.l{l}.w", (c, cin, 3, 3)))
            out.append((f"enc{e}.l{l}.b", (c,)))
            cin = c
    cb = w[-1]
    out.append(("fuse.w", (cb, arch.fused_channels + arch.pos_dim, 3, 3)))
    out.append(("fuse.b", (cb,)))
    cin = cb
    for l in reversed(range(arch.depth)):
        c = w[l]
        out.append((f"dec.l{l}.up.w", (c, cin, 3, 3)))
        out.append((f"dec.l{l}.up.b", (c,)))
        out.append((f"dec.l{l}.merge.w", (c, 2 * c, 3, 3)))
        out.append((f"dec.l{l}.merge.b", (c,)))
        cin = c
    out.append(("head.w", (1, w[0])))
    out.append(("head.b", (1,)))
    return out


def positional_encoding(spec, d: int) -> np.ndarray:
    """Sinusoidal coordinate channels, shape (d, H, W), read-only.

    ``spec`` is a GridSpec or an (H, W) tuple. Channels come in groups of four
    per frequency index i: sin(x/w_i), cos(x/w_i), sin(y/w_i), cos(y/w_i) with
    ``w_i = 10000**(2i/d)`` and x, y the integer pixel column and row.
    """
    if d % 4:
        raise ValueError("encoding dimension must be a multiple of 4")
    h, w = spec.shape if isinstance(spec, GridSpec) else spec
    return _encoding(int(h), int(w), int(d))


@functools.lru_cache(maxsize=32)
def _encoding(h: int, w: int, d: int) -> np.ndarray:
    x = np.arange(w, dtype=np.float64)[None, :]
    y = np.arange(h, dtype=np.float64)[:, None]
    out = np.empty((d, h, w))
    for i in range(d // 4):
        div = 10000.0 ** (2.0 * i / d)
        out[4 * i] = np.broadcast_to(np.sin(x / div), (h, w))
        out[4 * i + 1] = np.broadcast_to(np.cos(x / div), (h, w))
        out[4 * i + 2] = np.broadcast_to(np.sin(y / div), (h, w))
        out[4 * i + 3] = np.broadcast_to(np.cos(y / div), (h, w))
    out.flags.writeable = False
    return out


@dataclass(eq=False)
class SurrogateModel:
    arch: ArchConfig
    params: np.ndarray
    norm: Normalization = field(default_factory=Normalization)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.param_count,):
            raise ValueError(f"expected {self.param_count} parameters, got {self.params.shape}")

    @property
    def layout(self):
        return param_layout(self.arch)

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in param_layout(self.arch))

    def slices(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        out, start = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    def named(self, vector: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Reshaped views of ``vector`` (default: the parameters) keyed by slice name."""
        v = self.params if vector is None else vector
        return {k: v[s].reshape(shape) for k, (s, shape) in self.slices().items()}

    def copy(self) -> SurrogateModel:
        return SurrogateModel(self.arch, self.params.copy(), self.norm)

    def describe(self) -> dict:
        return {"arch": self.arch.to_record(), "param_count": self.param_count,
                "normalization": asdict(self.norm)}

    def arch_json(self) -> str:
        return json.dumps(self.describe(), sort_keys=True)


def init_model(arch: ArchConfig, seed: int = 0, norm: Normalization | None = None) -> SurrogateModel:
    """He-normal conv weights, zero biases and a zero output head; deterministic in ``seed``.

    With a zero head the first prediction is a flat map, so the stiff
    diffusion term of the loss starts near zero instead of amplifying
    random output texture.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in param_layout(arch):
        fan_in = int(np.prod(shape[1:]))
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        if name.endswith(".b") or name == "head.w":
            w = np.zeros(shape)
        chunks.append(w.ravel())
    return SurrogateModel(arch, np.concatenate(chunks), norm or Normalization())


class Graph:
    """One forward pass on the tape. Keeps parameter leaves so gradients can be read back."""

    def __init__(self, model: SurrogateModel, grad: np.ndarray | None = None):
        self.model = model
        views = model.named()
        gviews = model.named(grad) if grad is not None else {}
        self.p = {k: ad.leaf(v, k, gviews.get(k)) for k, v in views.items()}

    def encode(self, x: ad.Node, e: int) -> tuple[ad.Node, list[ad.Node]]:
        arch = self.model.arch
        skips = []
        h = x
        for l, d in enumerate(arch.dilation_rates):
            h = ad.conv3x3(h, self.p[f"enc{e}.l{l}.w"], self.p[f"enc{e}.l{l}.b"], d, f"enc{e}.l{l}",
                           arch.padding)
            h = ad.check_finite(ad.relu(h, f"enc{e}.l{l}.relu"), f"enc{e}.l{l}")
            skips.append(h)
            h = ad.avg_pool2(h, f"enc{e}.l{l}.pool")
        return h, skips

    def decode(self, fused: ad.Node, skips: list[ad.Node], rng) -> ad.Node:
        arch = self.model.arch
        B, _, h, w = fused.value.shape
        pos = ad.constant(np.broadcast_to(positional_encoding((h, w), arch.pos_dim),
                                          (B, arch.pos_dim, h, w)), "pos")
        x = ad.concat([fused, pos], "f_m")
        x = ad.conv3x3(x, self.p["fuse.w"], self.p["fuse.b"], 1, "fuse", arch.padding)
        x = ad.check_finite(ad.relu(x, "fuse.relu"), "fuse")
        x = ad.dropout(x, arch.dropout_rate, rng, "fuse.dropout")
        for l in reversed(range(arch.depth)):
            if arch.bilinear_decoder:
                x = ad.upsample_bilinear2(x, f"dec.l{l}.bilinear")
                x = ad.conv3x3(x, self.p[f"dec.l{l}.up.w"], self.p[f"dec.l{l}.up.b"], 1, f"dec.l{l}.up",
                               arch.padding)
            else:
                x = ad.conv_transpose3x3_s2(x, self.p[f"dec.l{l}.up.w"], self.p[f"dec.l{l}.up.b"],
                                            f"dec.l{l}.up", arch.padding)
            x = ad.check_finite(ad.relu(x, f"dec.l{l}.up.relu"), f"dec.l{l}.up")
            x = ad.concat([x, skips[l]], f"dec.l{l}.skip")
            x = ad.conv3x3(x, self.p[f"dec.l{l}.merge.w"], self.p[f"dec.l{l}.merge.b"], 1,
                           f"dec.l{l}.merge", arch.padding)
            x = ad.check_finite(ad.relu(x, f"dec.l{l}.merge.relu"), f"dec.l{l}.merge")
        y = ad.conv1x1(x, self.p["head.w"], self.p["head.b"], "head")
        return ad.squeeze_channel(ad.check_finite(y, "head"), "output")

    def run(self, query: np.ndarray, source: np.ndarray, target: np.ndarray, rng=None,
            pair_features=None) -> ad.Node:
        """Normalized (B, H, W) inputs to a normalized (B, H, W) prediction node.

        ``pair_features`` lets rollouts reuse the encoded reference pair.
        """
        arch = self.model.arch
        q = ad.constant(query[:, None], "query")
        if arch.concat_mode is ConcatMode.PixelLevel:
            if arch.use_pair_conditioning:
                q = ad.constant(np.stack([query, source, target], axis=1), "query|source|target_ref")
            fused, skips = self.encode(q, 0)
            return self.decode(fused, skips, rng)
        feat_q, skips = self.encode(q, 0)
        if not arch.use_pair_conditioning:
            return self.decode(feat_q, skips, rng)
        if pair_features is None:
            pair_features = self.encode_pair(source, target)
        fused = ad.concat([feat_q, *pair_features], "fused")
        return self.decode(fused, skips, rng)

    def encode_pair(self, source: np.ndarray, target: np.ndarray):
        e_s, e_t = (0, 0) if self.model.arch.shared_encoder else (1, 2)
        feat_s, _ = self.encode(ad.constant(source[:, None], "source"), e_s)
        feat_t, _ = self.encode(ad.constant(target[:, None], "target_ref"), e_t)
        return feat_s, feat_t


def check_shape(arch: ArchConfig, shape: tuple[int, int]):
    h, w = shape
    k = 2 ** arch.depth
    if h % k or w % k:
        raise ValueError(f"grid {h}x{w} must be divisible by {k} for depth {arch.depth}")


def predict_normalized(model: SurrogateModel, query, source, target) -> np.ndarray:
    """Inference on normalized (B, H, W) or (H, W) arrays; dropout off."""
    single = np.ndim(query) == 2
    q, s, t = (np.asarray(a, dtype=np.float64) for a in (query, source, target))
    if single:
        q, s, t = q[None], s[None], t[None]
    if not q.shape == s.shape == t.shape:
        raise ValueError("query and reference maps must share one shape")
    check_shape(model.arch, q.shape[1:])
    out = Graph(model).run(q, s, t).value
    return out[0] if single else out


def forward(model: SurrogateModel, query: ScalarField, pair: tuple[ScalarField, ScalarField]) -> ScalarField:
    """Predict the next-frame temperature map from ``query`` and a reference pair (``source``, ``target``)."""
    source, target = pair
    if not query.spec == source.spec == target.spec:
        raise ValueError("query and reference pair must share one grid spec")
    n = model.norm
    y = predict_normalized(model, n.forward(query.values), n.forward(source.values),
                           n.forward(target.values))
    return ScalarField(query.spec, FieldKind.TemperatureC, n.inverse(y))
