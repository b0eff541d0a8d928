"""Reverse-mode automatic differentiation over dense numpy tensors.

The graph is define-by-run: every operation creates a fresh output tensor
holding a closure that propagates gradients to its inputs. `backward` walks
the recorded graph once, in reverse topological order. Gradients accumulate
into leaf `.grad` buffers; call `zero_grads` (or set `.grad = None`) between
optimization steps.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, ParameterError, ShapeError, ValidationError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference / frozen forward passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense n-dimensional float array, optionally tracked by the graph.

    `data` is a row-major numpy array; `grad` (same shape) is populated by
    `backward`. Tensors hash by identity so they can key a GradientMap.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return not self._prev

    def detach(self) -> "Tensor":
        """Same data, cut from the graph; no gradient flows through."""
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, scalar):
        return scale(self, scalar)

    def __rmul__(self, scalar):
        return scale(self, scalar)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _make_node(data, inputs, backward_fn):
    """Wrap an op result; records the closure only while grads are enabled."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._prev = tuple(inputs)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> dict:
    """Run reverse-mode differentiation from a scalar loss.

    Returns the GradientMap: every requires-grad leaf reachable from the
    loss, mapped to its gradient array. Leaf gradients accumulate across
    calls; intermediate node gradients are scratch and reset per call.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._prev):
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        if node._prev:
            node.grad = None
    loss.accumulate_grad(np.ones_like(loss.data))

    grad_map: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node.is_leaf() and node.requires_grad and node.grad is not None:
            grad_map[node] = node.grad
    return grad_map


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make_node(a.data + b.data, (a, b), bw)


def scale(x: Tensor, factor) -> Tensor:
    factor = float(factor)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * factor)

    return _make_node(x.data * factor, (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g.reshape(()) / n))

    return _make_node(x.data.mean(), (x,), bw)


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g.reshape(())))

    return _make_node(x.data.sum(), (x,), bw)


def relu(x: Tensor) -> Tensor:
    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return _make_node(np.maximum(x.data, 0), (x,), bw)


def grad_reverse(x: Tensor) -> Tensor:
    """Identity forward; multiplies the incoming gradient by -1 in backward."""

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(-g)

    return _make_node(x.data, (x,), bw)


# ---------------------------------------------------------------------------
# linear-algebra ops

def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("affine expects 2-d input and weight")
    n, d = x.data.shape
    dw, k = weight.data.shape
    if d != dw:
        raise ShapeError(f"affine: inner dims {d} vs {dw}")
    if bias.data.shape != (k,):
        raise ShapeError(f"affine: bias shape {bias.data.shape}, expected ({k},)")

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate_grad(x.data.T @ g)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return _make_node(x.data @ weight.data + bias.data, (x, weight, bias), bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution (cross-correlation) on a [C,H,W] input.

    kernel is [C_out, C_in, k, k]; output is [C_out, H', W'] with
    H' = (H + 2p - dilation*(k-1) - 1) // stride + 1.
    """
    if stride < 1 or dilation < 1:
        raise ParameterError(f"stride={stride}, dilation={dilation} must be >= 1")
    if padding < 0:
        raise ParameterError(f"padding={padding} must be >= 0")
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects input [C,H,W] and kernel [Co,Ci,k,k]")
    c_in, h, w = x.data.shape
    c_out, ck, kh, kw = kernel.data.shape
    if ck != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernel expects {ck}")
    if kh != kw or kh < 1:
        raise ShapeError(f"conv2d: kernel must be square and >= 1, got {kh}x{kw}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape}, expected ({c_out},)")
    k = kh
    span = dilation * (k - 1) + 1
    if h + 2 * padding < span or w + 2 * padding < span:
        raise ShapeError(f"conv2d: effective kernel span {span} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")

    if padding:
        xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    h_out = (h + 2 * padding - span) // stride + 1
    w_out = (w + 2 * padding - span) // stride + 1

    s0, s1, s2 = xp.strides
    windows = as_strided(
        xp,
        shape=(c_in, k, k, h_out, w_out),
        strides=(s0, s1 * dilation, s2 * dilation, s1 * stride, s2 * stride),
    )
    cols = windows.reshape(c_in * k * k, h_out * w_out)
    kmat = kernel.data.reshape(c_out, c_in * k * k)
    out_data = (kmat @ cols + bias.data[:, None]).reshape(c_out, h_out, w_out)

    needs_kernel_grad = kernel.requires_grad
    saved_cols = cols if needs_kernel_grad else None

    def bw(g):
        gmat = g.reshape(c_out, h_out * w_out)
        if bias.requires_grad:
            bias.accumulate_grad(gmat.sum(axis=1))
        if needs_kernel_grad:
            kernel.accumulate_grad((gmat @ saved_cols.T).reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = (kmat.T @ gmat).reshape(c_in, k, k, h_out, w_out)
            gxp = np.zeros_like(xp)
            for i in range(k):
                ri = i * dilation
                for j in range(k):
                    cj = j * dilation
                    gxp[:, ri:ri + (h_out - 1) * stride + 1:stride,
                        cj:cj + (w_out - 1) * stride + 1:stride] += gcols[:, i, j]
            if padding:
                x.accumulate_grad(gxp[:, padding:padding + h, padding:padding + w])
            else:
                x.accumulate_grad(gxp)

    return _make_node(out_data, (x, kernel, bias), bw)


def pool_avg2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Average pooling over k x k windows of a [C,H,W] input."""
    if k < 1 or stride < 1:
        raise ParameterError(f"k={k}, stride={stride} must be >= 1")
    if x.data.ndim != 3:
        raise ShapeError("pool_avg2d expects input [C,H,W]")
    c, h, w = x.data.shape
    if h < k or w < k:
        raise ShapeError(f"pool window {k} larger than input {h}x{w}")
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1

    s0, s1, s2 = x.data.strides
    windows = as_strided(
        np.ascontiguousarray(x.data),
        shape=(c, k, k, h_out, w_out),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
    )
    out_data = windows.mean(axis=(1, 2))

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            share = g / (k * k)
            for i in range(k):
                for j in range(k):
                    gx[:, i:i + (h_out - 1) * stride + 1:stride,
                       j:j + (w_out - 1) * stride + 1:stride] += share
            x.accumulate_grad(gx)

    return _make_node(out_data, (x,), bw)


_interp_cache: dict = {}


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Corner-aligned bilinear weights mapping n_in samples to n_out."""
    key = (n_in, n_out, np.dtype(dtype).str)
    cached = _interp_cache.get(key)
    if cached is not None:
        return cached
    mat = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        mat[:, 0] = 1
    else:
        positions = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(positions.astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (positions - lo).astype(dtype)
        rows = np.arange(n_out)
        np.add.at(mat, (rows, lo), 1 - frac)
        np.add.at(mat, (rows, hi), frac)
    _interp_cache[key] = mat
    return mat


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear interpolation of a [C,h,w] map to [C,out_h,out_w]."""
    if x.data.ndim != 3:
        raise ShapeError("upsample_bilinear expects input [C,h,w]")
    c, h, w = x.data.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    wr = _interp_matrix(h, out_h, x.data.dtype)
    wc = _interp_matrix(w, out_w, x.data.dtype)
    # out[c,o,p] = sum_{i,j} wr[o,i] * x[c,i,j] * wc[p,j]
    out_data = np.tensordot(np.tensordot(x.data, wr, axes=(1, 1)), wc, axes=(1, 1))

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.tensordot(np.tensordot(g, wr, axes=(1, 0)), wc, axes=(1, 0)))

    return _make_node(out_data, (x,), bw)


# ---------------------------------------------------------------------------
# reshaping / indexing ops

def spatial_to_rows(x: Tensor) -> Tensor:
    """[C,H,W] -> [H*W, C]; row r is the channel vector of cell (r // W, r % W)."""
    if x.data.ndim != 3:
        raise ShapeError("spatial_to_rows expects input [C,H,W]")
    c, h, w = x.data.shape

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g.T.reshape(c, h, w))

    return _make_node(x.data.reshape(c, h * w).T.copy(), (x,), bw)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a [N,C] tensor; backward scatter-adds into place."""
    if x.data.ndim != 2:
        raise ShapeError("gather_rows expects input [N,C]")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index array")
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValidationError(f"gather_rows: index out of range for {n} rows")

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x.accumulate_grad(gx)

    return _make_node(x.data[idx], (x,), bw)


def concat_rows(tensors) -> Tensor:
    """Stack [n_i, C] tensors along rows, preserving order."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat_rows needs at least one tensor")
    width = tensors[0].data.shape[1]
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[1] != width:
            raise ShapeError("concat_rows: all tensors must be [n_i, C] with equal C")
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[lo:hi])

    return _make_node(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), bw)


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits: Tensor, labels, ignore_index: int = 255) -> Tensor:
    """Mean negative log-likelihood over non-ignored rows of [N,K] logits.

    Rows whose label equals `ignore_index` contribute nothing to the value or
    the gradient; if every row is ignored the loss is 0 with zero gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects logits [N,K]")
    n, k = logits.data.shape
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise ShapeError(f"labels shape {lab.shape}, expected ({n},)")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ValidationError("labels must be integers")
    active = lab != ignore_index
    if np.any((lab[active] < 0) | (lab[active] >= k)):
        raise ValidationError(f"label out of range [0,{k})")

    n_active = int(active.sum())
    if n_active == 0:
        def bw_zero(g):
            if logits.requires_grad:
                logits.accumulate_grad(np.zeros_like(logits.data))
        return _make_node(np.asarray(0.0, dtype=logits.data.dtype), (logits,), bw_zero)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    rows = np.nonzero(active)[0]
    loss = -log_probs[rows, lab[rows]].sum() / n_active

    def bw(g):
        if logits.requires_grad:
            grad = np.exp(log_probs)
            grad[rows, lab[rows]] -= 1.0
            grad[~active] = 0.0
            logits.accumulate_grad(grad * (g.reshape(()) / n_active))

    return _make_node(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def l2_distance_map(a: Tensor, b: Tensor) -> Tensor:
    """Per-location Euclidean distance over channels of two [C,H,W] maps.

    The gradient at locations with distance below 1e-12 is defined as zero.
    """
    if a.data.shape != b.data.shape:
        raise ShapeError(f"l2_distance_map: {a.data.shape} vs {b.data.shape}")
    if a.data.ndim != 3:
        raise ShapeError("l2_distance_map expects [C,H,W] maps")
    diff = a.data - b.data
    dist = np.sqrt((diff * diff).sum(axis=0))

    def bw(g):
        safe = np.where(dist > 1e-12, dist, 1.0)
        unit = np.where(dist > 1e-12, diff / safe, 0.0)
        if a.requires_grad:
            a.accumulate_grad(unit * g)
        if b.requires_grad:
            b.accumulate_grad(-unit * g)

    return _make_node(dist, (a, b), bw)
