"""A small reverse-mode tape over numpy arrays.

Every op returns a Node holding its value and a closure that pushes the
output gradient back to its inputs. Only the ops the surrogate network and its
loss need are provided; image tensors are laid out (batch, channel, H, W).
"""

from __future__ import annotations

import numpy as np

from ..stencil import laplacian_array


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activation in layer {layer!r}")
        self.layer = layer


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "requires")

    def __init__(self, value, parents=(), backward_fn=None, name="", grad=None, requires=None):
        self.value = value
        self.grad = grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        if requires is None:
            requires = any(p.requires for p in parents)
        self.requires = requires

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if not self.requires:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g


def leaf(value, name="", grad=None) -> Node:
    """Input or parameter.

    Parameters pass ``grad``, a writable zero buffer that gradients are summed
    into; leaves without one are treated as constants.
    """
    return Node(value, name=name, grad=grad, requires=grad is not None)


def backward(root: Node, seed=1.0):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.accumulate(np.asarray(seed, dtype=np.float64))
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None and node.requires:
            node.backward_fn(node.grad)


def check_finite(node: Node, layer: str) -> Node:
    if not np.all(np.isfinite(node.value)):
        raise NonFiniteActivation(layer)
    return node


# --- convolution ---------------------------------------------------------

def pad_edge(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Replicate-pad the last two axes; same values as ``np.pad(mode="edge")`` with less overhead."""
    H, W = x.shape[-2:]
    out = np.empty(x.shape[:-2] + (H + top + bottom, W + left + right))
    out[..., top:top + H, left:left + W] = x
    out[..., :top, left:left + W] = x[..., :1, :]
    out[..., top + H:, left:left + W] = x[..., -1:, :]
    out[..., :left] = out[..., left:left + 1]
    out[..., left + W:] = out[..., left + W - 1:left + W]
    return out


def im2col3x3(x: np.ndarray, dilation: int, padding: str = "zeros") -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W) 3x3 neighborhoods, tap-major within a channel.

    ``padding`` is "zeros" or "edge" (out-of-range taps repeat the nearest
    boundary pixel).
    """
    B, C, H, W = x.shape
    d = dilation
    if padding == "edge":
        xp = pad_edge(x, d, d, d, d)
        cols = np.empty((B, C, 9, H, W))
        for t in range(9):
            ky, kx = divmod(t, 3)
            cols[:, :, t] = xp[:, :, ky * d:ky * d + H, kx * d:kx * d + W]
        return cols.reshape(B, C * 9, H * W)
    cols = np.zeros((B, C, 9, H, W))
    for t in range(9):
        ky, kx = divmod(t, 3)
        dy, dx = (ky - 1) * d, (kx - 1) * d
        y0, y1 = max(0, -dy), min(H, H - dy)
        x0, x1 = max(0, -dx), min(W, W - dx)
        if y1 > y0 and x1 > x0:
            cols[:, :, t, y0:y1, x0:x1] = x[:, :, y0 + dy:y1 + dy, x0 + dx:x1 + dx]
    return cols.reshape(B, C * 9, H * W)


def _unpad_edge(gp: np.ndarray, d: int) -> np.ndarray:
    """Adjoint of edge padding by ``d`` on the last two axes."""
    g = gp.copy()
    g[..., d, :] += g[..., :d, :].sum(axis=-2)
    g[..., -d - 1, :] += g[..., -d:, :].sum(axis=-2)
    g = g[..., d:-d, :]
    g[..., :, d] += g[..., :, :d].sum(axis=-1)
    g[..., :, -d - 1] += g[..., :, -d:].sum(axis=-1)
    return g[..., :, d:-d]


def col2im3x3(gcols: np.ndarray, shape, dilation: int, padding: str = "zeros") -> np.ndarray:
    """Adjoint of ``im2col3x3``."""
    B, C, H, W = shape
    d = dilation
    g = gcols.reshape(B, C, 9, H, W)
    if padding == "edge":
        gp = np.zeros((B, C, H + 2 * d, W + 2 * d))
        for t in range(9):
            ky, kx = divmod(t, 3)
            gp[:, :, ky * d:ky * d + H, kx * d:kx * d + W] += g[:, :, t]
        return _unpad_edge(gp, d)
    out = np.zeros(shape)
    for t in range(9):
        ky, kx = divmod(t, 3)
        dy, dx = (ky - 1) * d, (kx - 1) * d
        y0, y1 = max(0, -dy), min(H, H - dy)
        x0, x1 = max(0, -dx), min(W, W - dx)
        if y1 > y0 and x1 > x0:
            out[:, :, y0 + dy:y1 + dy, x0 + dx:x1 + dx] += g[:, :, t, y0:y1, x0:x1]
    return out


def conv3x3(x: Node, weight: Node, bias: Node, dilation: int = 1, name="conv",
            padding: str = "zeros") -> Node:
    """Same-size 3x3 convolution; weight is (out, in, 3, 3)."""
    B, C, H, W = x.value.shape
    O = weight.value.shape[0]
    cols = im2col3x3(x.value, dilation, padding)
    w2 = weight.value.reshape(O, C * 9)
    out = np.matmul(w2, cols).reshape(B, O, H, W)
    out += bias.value[None, :, None, None]

    def back(g):
        g2 = g.reshape(B, O, H * W)
        weight.accumulate(np.einsum("bok,bck->oc", g2, cols).reshape(weight.value.shape))
        bias.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires:
            x.accumulate(col2im3x3(np.matmul(w2.T, g2), x.value.shape, dilation, padding))

    return Node(out, (x, weight, bias), back, name)


def conv1x1(x: Node, weight: Node, bias: Node, name="head") -> Node:
    """Pointwise convolution; weight is (out, in)."""
    B, C, H, W = x.value.shape
    w = weight.value
    xs = x.value.reshape(B, C, H * W)
    out = np.matmul(w, xs).reshape(B, w.shape[0], H, W) + bias.value[None, :, None, None]

    def back(g):
        g2 = g.reshape(B, w.shape[0], H * W)
        weight.accumulate(np.einsum("bok,bck->oc", g2, xs))
        bias.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires:
            x.accumulate(np.matmul(w.T, g2).reshape(B, C, H, W))

    return Node(out, (x, weight, bias), back, name)


def conv_transpose3x3_s2(x: Node, weight: Node, bias: Node, name="up", padding: str = "zeros") -> Node:
    """Stride-2 transposed 3x3 convolution, padding 1, output padding 1 (H -> 2H).

    Output pixel ``o`` receives input ``i`` through tap ``k`` when ``o = 2i - 1 + k``.
    The last output row and column would need input ``H`` (resp. ``W``); with
    ``padding="edge"`` that input repeats the border pixel instead of being zero.
    Weight is (out, in, 3, 3).
    """
    B, C, H, W = x.value.shape
    O = weight.value.shape[0]
    xv = x.value
    if padding == "edge":
        xv = pad_edge(xv, 0, 1, 0, 1)
    Hp, Wp = xv.shape[2:]
    w9 = weight.value.transpose(0, 2, 3, 1).reshape(O * 9, C)
    xs = xv.reshape(B, C, Hp * Wp)
    z = np.matmul(w9, xs).reshape(B, O, 9, Hp, Wp)
    yp = np.zeros((B, O, 2 * Hp + 2, 2 * Wp + 2))
    t = 0
    for ky in range(3):
        for kx in range(3):
            yp[:, :, ky:ky + 2 * Hp:2, kx:kx + 2 * Wp:2] += z[:, :, t]
            t += 1
    out = yp[:, :, 1:2 * H + 1, 1:2 * W + 1] + bias.value[None, :, None, None]

    def back(g):
        gp = np.zeros((B, O, 2 * Hp + 2, 2 * Wp + 2))
        gp[:, :, 1:2 * H + 1, 1:2 * W + 1] = g
        gz = np.empty((B, O, 9, Hp, Wp))
        t = 0
        for ky in range(3):
            for kx in range(3):
                gz[:, :, t] = gp[:, :, ky:ky + 2 * Hp:2, kx:kx + 2 * Wp:2]
                t += 1
        gz = gz.reshape(B, O * 9, Hp * Wp)
        gw9 = np.einsum("bpk,bck->pc", gz, xs)
        weight.accumulate(gw9.reshape(O, 3, 3, C).transpose(0, 3, 1, 2))
        bias.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires:
            gx = np.matmul(w9.T, gz).reshape(B, C, Hp, Wp)
            if padding == "edge":
                gx[:, :, H - 1, :] += gx[:, :, H, :]
                gx[:, :, :, W - 1] += gx[:, :, :, W]
                gx = gx[:, :, :H, :W]
            x.accumulate(gx)

    return Node(out, (x, weight, bias), back, name)


# --- resampling ----------------------------------------------------------

def avg_pool2(x: Node, name="pool") -> Node:
    B, C, H, W = x.value.shape
    if H % 2 or W % 2:
        raise ValueError(f"cannot 2x-pool a {H}x{W} map")
    v = x.value
    out = (v[:, :, 0::2, 0::2] + v[:, :, 1::2, 0::2] + v[:, :, 0::2, 1::2] + v[:, :, 1::2, 1::2]) * 0.25

    def back(g):
        x.accumulate(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return Node(out, (x,), back, name)


def bilinear_matrix(n: int) -> np.ndarray:
    """(2n, n) half-pixel-centered 2x bilinear upsampling with clamped edges."""
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.minimum(np.floor(src).astype(int), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    m = np.zeros((2 * n, n))
    m[np.arange(2 * n), lo] += 1.0 - frac
    m[np.arange(2 * n), hi] += frac
    return m


def upsample_bilinear2(x: Node, name="bilinear") -> Node:
    B, C, H, W = x.value.shape
    uh, uw = bilinear_matrix(H), bilinear_matrix(W)
    out = np.einsum("ih,bchw,jw->bcij", uh, x.value, uw, optimize=True)

    def back(g):
        x.accumulate(np.einsum("ih,bcij,jw->bchw", uh, g, uw, optimize=True))

    return Node(out, (x,), back, name)


# --- pointwise and structural ---------------------------------------------

def relu(x: Node, name="relu") -> Node:
    mask = x.value > 0
    out = x.value * mask

    def back(g):
        x.accumulate(g * mask)

    return Node(out, (x,), back, name)


def dropout(x: Node, rate: float, rng: np.random.Generator | None, name="dropout") -> Node:
    """Inverted dropout; identity when ``rng`` is None (inference) or rate is 0."""
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    out = x.value * keep

    def back(g):
        x.accumulate(g * keep)

    return Node(out, (x,), back, name)


def concat(xs, name="concat") -> Node:
    """Channel-axis concatenation."""
    sizes = [n.value.shape[1] for n in xs]
    out = np.concatenate([n.value for n in xs], axis=1)

    def back(g):
        start = 0
        for n, s in zip(xs, sizes):
            n.accumulate(g[:, start:start + s])
            start += s

    return Node(out, tuple(xs), back, name)


def constant(value, name="const") -> Node:
    return Node(np.asarray(value, dtype=np.float64), name=name, requires=False)


def sub(a: Node, b: Node, name="sub") -> Node:
    def back(g):
        a.accumulate(g)
        b.accumulate(-g)

    return Node(a.value - b.value, (a, b), back, name)


def add(a: Node, b: Node, name="add") -> Node:
    def back(g):
        a.accumulate(g)
        b.accumulate(g)

    return Node(a.value + b.value, (a, b), back, name)


def scale(a: Node, c: float, name="scale") -> Node:
    def back(g):
        a.accumulate(c * g)

    return Node(c * a.value, (a,), back, name)


def squeeze_channel(x: Node, name="squeeze") -> Node:
    """(B, 1, H, W) -> (B, H, W)."""
    def back(g):
        x.accumulate(g[:, None])

    return Node(x.value[:, 0], (x,), back, name)


def laplacian(x: Node, name="laplacian") -> Node:
    """Unit-pitch zero-flux Laplacian over the last two axes (symmetric operator)."""
    def back(g):
        x.accumulate(laplacian_array(g))

    return Node(laplacian_array(x.value), (x,), back, name)


def mean_sq_per_sample(x: Node, name="msq") -> Node:
    """(B, ...) -> (B,) mean of squares over all but the first axis."""
    B = x.value.shape[0]
    n = x.value[0].size
    out = (x.value.reshape(B, -1) ** 2).mean(axis=1)

    def back(g):
        x.accumulate((2.0 / n) * g.reshape((B,) + (1,) * (x.value.ndim - 1)) * x.value)

    return Node(out, (x,), back, name)


def sqrt(x: Node, name="sqrt") -> Node:
    """Elementwise square root; the derivative at 0 is taken as 0."""
    out = np.sqrt(x.value)

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        x.accumulate(np.where(out > 0, g / (2.0 * safe), 0.0))

    return Node(out, (x,), back, name)


def mean(x: Node, name="mean") -> Node:
    n = x.value.size

    def back(g):
        x.accumulate(np.full(x.value.shape, float(g) / n))

    return Node(np.asarray(x.value.mean()), (x,), back, name)
