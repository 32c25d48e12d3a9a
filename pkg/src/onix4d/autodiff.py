"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors wrap float32 arrays by default; float64 is used by the finite
difference checks.  The operation set is exactly what the reconstruction
models need: dense and convolution layers, pointwise nonlinearities,
reductions, pooling, concatenation, and bilinear sampling of feature maps.
``backward`` walks a deterministic topological order, so repeated runs on
the same graph produce bit-identical gradients.
"""

from __future__ import annotations

import zlib

import numpy as np


class ShapeError(ValueError):
    """Raised when operands cannot be combined under the supported shapes."""


class Tensor:
    """A node in the computation graph.

    ``data`` is always a numpy array.  ``grad`` starts as ``None`` and is
    filled (accumulating across calls) by ``backward``; call sites that
    reuse parameters across several graphs are expected to zero grads
    between optimisation steps, not between graphs.
    """

    __slots__ = ("data", "grad", "parents", "vjp", "name")

    def __init__(self, data, parents=(), vjp=None, dtype=None, name=""):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, name={self.name!r})"

    # Operator sugar; every binary op coerces plain scalars/arrays to
    # constant Tensors of the same dtype.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __sub__(self, other):
        return add(self, negate(_coerce(other, self.dtype)))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), negate(self))

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    if grad.shape != shape:
        raise ShapeError(f"cannot reduce grad {grad.shape} to {shape}")
    return grad


# ---------------------------------------------------------------------------
# pointwise and arithmetic ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", np.float32))
    b = _coerce(b, a.dtype)
    out_data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out_data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", np.float32))
    b = _coerce(b, a.dtype)
    out_data = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), vjp)


def negate(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return Tensor(out_data, (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float):
    """Clip to [lo, hi].  Returns (tensor, count of clipped elements);
    gradient is zero on the clipped elements."""
    inside = (a.data > lo) & (a.data < hi)
    out_data = np.clip(a.data, lo, hi)
    n_clipped = int(a.data.size - np.count_nonzero(inside))

    def vjp(g):
        return (g * inside,)

    return Tensor(out_data, (a,), vjp), n_clipped


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    s = x.dtype.type(slope)
    # max(x, s*x) == where(x > 0, x, s*x) whenever 0 <= s <= 1
    out_data = np.maximum(x, x * s) if 0.0 <= slope <= 1.0 else np.where(x > 0, x, x * s)

    def vjp(g):
        return (np.where(x > 0, g, g * s),)

    return Tensor(out_data, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out_data * (1.0 - out_data),)

    return Tensor(out_data, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    out_data = np.logaddexp(a.data.dtype.type(0), a.data)

    def vjp(g):
        x = a.data
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return Tensor(out_data, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor, axis=None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).astype(a.dtype, copy=True),)

    return Tensor(out_data, (a,), vjp)


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    out_data = a.data.mean(axis=axis)
    inv = 1.0 / count

    def vjp(g):
        if axis is None:
            return ((np.broadcast_to(g, a.data.shape) * inv).astype(a.dtype, copy=True),)
        return ((np.broadcast_to(np.expand_dims(g, axis), a.data.shape) * inv).astype(a.dtype, copy=True),)

    return Tensor(out_data, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)
    return Tensor(out_data, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(a.data, axes)
    return Tensor(out_data, (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (N, Fin) @ w (Fin, Fout) + b (Fout,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: {x.data.shape} @ {w.data.shape}")
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    if b is None:
        def vjp(g):
            return g @ w.data.T, x.data.T @ g
        return Tensor(out_data, (x, w), vjp)

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor(out_data, (x, w, b), vjp)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x.shape
    if padding:
        xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]          # (b, c, ho, wo, kh, kw)
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(col), ho, wo


def _col2im(dcol: np.ndarray, xshape, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    b, c, h, w = xshape
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dcol.dtype)
    d6 = dcol.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution (cross-correlation): x (B,C,H,W), w (O,C,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: x {x.data.shape} w {w.data.shape}")
    bsz, c, h, wd = x.data.shape
    o, _, kh, kw = w.data.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    col, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wm = w.data.reshape(o, c * kh * kw)
    out = col @ wm.T
    if b is not None:
        out = out + b.data
    out_data = out.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * ho * wo, o)
        dw = (gm.T @ col).reshape(o, c, kh, kw)
        dcol = gm @ wm
        dx = _col2im(dcol, x.data.shape, kh, kw, stride, padding, ho, wo)
        if b is None:
            return dx, dw
        return dx, dw, gm.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out_data, parents, vjp)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {x.data.shape}")
    out_data = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return ((gx * x.data.dtype.type(0.25)),)

    return Tensor(out_data, (x,), vjp)


def bilinear_sample(maps: Tensor, map_idx: np.ndarray, xy: np.ndarray) -> Tensor:
    """Sample feature maps (M,C,H,W) at continuous pixel positions.

    ``map_idx`` (N,) selects the map per sample and ``xy`` (N,2) holds
    (x, y) pixel coordinates; x runs along W, y along H, and positions
    outside [0, W-1] x [0, H-1] read as zero.  The gradient flows to the
    maps only; coordinates are treated as constants.
    """
    m, c, h, w = maps.data.shape
    map_idx = np.asarray(map_idx, dtype=np.int64)
    xy = np.asarray(xy)
    n = xy.shape[0]
    if map_idx.shape != (n,) or xy.shape != (n, 2):
        raise ShapeError(f"bilinear_sample: idx {map_idx.shape} xy {xy.shape}")
    if map_idx.size and (map_idx.min() < 0 or map_idx.max() >= m):
        raise ShapeError("bilinear_sample: map index out of range")

    x, y = xy[:, 0], xy[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0).astype(maps.dtype)
    fy = (y - y0).astype(maps.dtype)

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            cx, cy = x0 + dx, y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            flat = (map_idx * h + np.clip(cy, 0, h - 1)) * w + np.clip(cx, 0, w - 1)
            corners.append((flat, (wgt * valid).astype(maps.dtype)))

    flat_maps = np.ascontiguousarray(maps.data.transpose(0, 2, 3, 1)).reshape(m * h * w, c)
    out_data = np.zeros((n, c), dtype=maps.dtype)
    for flat, wgt in corners:
        out_data += flat_maps[flat] * wgt[:, None]

    def vjp(g):
        idx_all = np.concatenate([flat for flat, _ in corners])
        val_all = np.ascontiguousarray(
            np.concatenate([g * wgt[:, None] for _, wgt in corners]).T)
        # per-channel bincount scatter; much faster than unbuffered np.add.at
        dflat = np.empty((c, m * h * w), dtype=maps.dtype)
        for ch in range(c):
            dflat[ch] = np.bincount(idx_all, weights=val_all[ch], minlength=m * h * w)
        return (dflat.reshape(c, m, h, w).transpose(1, 0, 2, 3),)

    return Tensor(out_data, (maps,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def topo_order(root: Tensor) -> list:
    """Parents-before-children order, deterministic for a given graph."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every graph node.

    ``root`` must hold a single element.  Grads add onto whatever is
    already in ``.grad``, which lets a caller accumulate over a batch by
    running one backward per item.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.data.shape}")
    order = topo_order(root)
    local = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = local.get(id(p))
            local[id(p)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# parameters and optimiser
# ---------------------------------------------------------------------------

def _name_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng((seed, zlib.crc32(name.encode("utf-8"))))


class ParamStore:
    """Named trainable tensors with per-name seeded initialisation.

    Each parameter gets its own RNG stream derived from (seed, name), so
    the initial values do not depend on creation order.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, shape, init: str = "he_uniform",
              fan_in: int | None = None) -> Tensor:
        if name in self.params:
            t = self.params[name]
            if t.data.shape != tuple(shape):
                raise ShapeError(f"param {name!r} exists with shape {t.data.shape}")
            return t
        if isinstance(init, np.ndarray):
            data = init.astype(self.dtype)
            if data.shape != tuple(shape):
                raise ShapeError(f"param {name!r}: array shape {data.shape} != {tuple(shape)}")
        elif init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        elif init == "he_uniform":
            if fan_in is None:
                fan_in = int(np.prod(shape[:-1])) if len(shape) == 2 else int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / max(fan_in, 1))
            data = _name_stream(self.seed, name).uniform(-limit, limit, size=shape).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params.keys())

    def n_values(self) -> int:
        return sum(int(t.data.size) for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, arr in state.items():
            arr = np.asarray(arr, dtype=self.dtype)
            if k in self.params:
                if self.params[k].data.shape != arr.shape:
                    raise ShapeError(f"checkpoint shape {arr.shape} != {self.params[k].data.shape} for {k!r}")
                self.params[k].data = arr.copy()
            else:
                self.params[k] = Tensor(arr.copy(), name=k)


class Adam:
    """Adam with bias correction; steps with non-finite grads are skipped
    per parameter and counted in ``skipped``."""

    def __init__(self, store: ParamStore, lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t: dict[str, int] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.skipped = 0

    def step(self) -> None:
        for name, p in self.store.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                continue
            g = g.astype(np.float64)
            if name not in self.m:
                self.m[name] = np.zeros(p.data.shape, dtype=np.float64)
                self.v[name] = np.zeros(p.data.shape, dtype=np.float64)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data = (p.data.astype(np.float64)
                      - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(self.store.dtype)

    def state_dict(self) -> dict:
        return {"t": dict(self.t),
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()},
                "skipped": self.skipped}


# ---------------------------------------------------------------------------
# finite difference checking
# ---------------------------------------------------------------------------

def check_gradients(f, tensors, h: float = 1e-3, atol: float = 1e-7) -> float:
    """Compare backward() grads of scalar-valued ``f`` against central
    finite differences; returns the worst relative error.

    Elements where both gradients are below ``atol`` are skipped (the
    relative error of two near-zeros is noise, not signal).
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    out = f(*tensors)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*tensors).data)
            flat[i] = orig - h
            fm = float(f(*tensors).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = float(a.reshape(-1)[i])
            if abs(ana) < atol and abs(num) < atol:
                continue
            rel = abs(ana - num) / max(abs(ana), abs(num))
            worst = max(worst, rel)
    return worst
