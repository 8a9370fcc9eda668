"""Reverse-mode automatic differentiation over dense arrays.

Exactly the ops an image-to-tensor regression net needs: 3x3 same-size
convolution (shared or per-sample kernels), ReLU, 2x2 max pooling,
nearest-neighbor upsampling, channel concat, row-band global average
pooling, dense and 1D-conv layers, and MSE loss.  Graphs are built by the
ops themselves (each output remembers its parents and a backward closure);
`backward` topologically sorts and accumulates.

Compute is float32 by default; build graphs from float64 arrays to run the
engine in 64-bit gradient-check mode.
"""

import numpy as np

from .errors import (DisconnectedLoss, ImageTooSmall, NonFiniteValue,
                     OddSpatialDims, ShapeMismatch)

_nan_checks = False


def set_nan_checks(enabled):
    """Toggle finite-value verification of every op output (slow)."""
    global _nan_checks
    _nan_checks = bool(enabled)


class Tensor:
    """A node in the computation graph: array value plus gradient slot."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        data = np.asarray(data)
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        if _nan_checks and not np.all(np.isfinite(self.data)):
            raise NonFiniteValue("non-finite values in op output")
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class ParamStore:
    """Named parameter tensors; names unique, shapes fixed at creation."""

    def __init__(self):
        self._params = {}

    def create(self, name, array):
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor(array)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state):
        for name, t in self._params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise ShapeMismatch(
                    f"param {name!r}: stored {arr.shape}, expected {t.data.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)


def _topo_order(root):
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
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss, params=None):
    """Reverse accumulation from a scalar loss node.

    When a ParamStore is given, every parameter's gradient is (re)set —
    zeros for parameters the graph never touched — and DisconnectedLoss is
    raised if no parameter is reachable from the loss at all.
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    order = _topo_order(loss)
    if params is not None:
        in_graph = {id(t) for t in order}
        if not any(id(t) in in_graph for t in params.tensors()):
            raise DisconnectedLoss("loss does not depend on any parameter")
        for t in params.tensors():
            t.grad = np.zeros_like(t.data)
    for t in order:
        if t.grad is None or t.grad.shape != t.data.shape:
            t.grad = np.zeros_like(t.data)
        else:
            t.grad[...] = 0.0
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t._backward is not None:
            t._backward()


# --- convolution helpers ----------------------------------------------------

def _im2col3(x):
    """(n, c, h, w) -> (n, c*9, h*w) patches of the zero-padded input."""
    n, c, h, w = x.shape
    p = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    p[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, c, 3, 3, h, w), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = p[:, :, ki:ki + h, kj:kj + w]
    return cols.reshape(n, c * 9, h * w)


def _col2im3(gcols, n, c, h, w):
    g = gcols.reshape(n, c, 3, 3, h, w)
    out = np.zeros((n, c, h + 2, w + 2), dtype=gcols.dtype)
    for ki in range(3):
        for kj in range(3):
            out[:, :, ki:ki + h, kj:kj + w] += g[:, :, ki, kj]
    return out[:, :, 1:-1, 1:-1]


def conv2d(x, w, b):
    """3x3, stride 1, zero padding 1 cross-correlation plus bias.

    `w` is (c_out, c_in, 3, 3) for one shared kernel, or
    (n, c_out, c_in, 3, 3) for a per-sample (dynamic) kernel with a matching
    (n, c_out) bias.
    """
    n, c_in, h, wd = x.data.shape
    per_sample = w.data.ndim == 5
    if per_sample:
        if w.data.shape[0] != n or w.data.shape[2] != c_in:
            raise ShapeMismatch(f"kernel {w.data.shape} vs input {x.data.shape}")
        c_out = w.data.shape[1]
        wr = w.data.reshape(n, c_out, c_in * 9)
        bias = b.data.reshape(n, c_out, 1)
    else:
        if w.data.shape[1] != c_in or w.data.shape[2:] != (3, 3):
            raise ShapeMismatch(f"kernel {w.data.shape} vs input {x.data.shape}")
        c_out = w.data.shape[0]
        wr = w.data.reshape(c_out, c_in * 9)
        bias = b.data.reshape(c_out, 1)
    if b.data.size != bias.size:
        raise ShapeMismatch(f"bias {b.data.shape} vs {c_out} output channels")

    cols = _im2col3(x.data)
    out_data = (np.matmul(wr, cols) + bias).reshape(n, c_out, h, wd)
    out = Tensor(out_data, parents=(x, w, b))

    def _back():
        go = out.grad.reshape(n, c_out, h * wd)
        cols_b = _im2col3(x.data)   # recomputed: cheaper than holding every buffer
        if per_sample:
            w.grad += np.matmul(go, cols_b.transpose(0, 2, 1)).reshape(w.data.shape)
            b.grad += go.sum(axis=2).reshape(b.data.shape)
            gcols = np.matmul(wr.transpose(0, 2, 1), go)
        else:
            w.grad += np.matmul(go, cols_b.transpose(0, 2, 1)) \
                        .sum(axis=0).reshape(w.data.shape)
            b.grad += go.sum(axis=(0, 2)).reshape(b.data.shape)
            gcols = np.matmul(wr.T, go)
        x.grad += _col2im3(gcols, n, c_in, h, wd)

    out._backward = _back
    return out


def relu(x):
    out = Tensor(np.maximum(x.data, 0), parents=(x,))

    def _back():
        x.grad += out.grad * (out.data > 0)

    out._backward = _back
    return out


def maxpool2(x):
    """Max over disjoint 2x2 blocks; gradient routes to the first argmax."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise OddSpatialDims(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2) \
                   .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = Tensor(np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0],
                 parents=(x,))

    def _back():
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], out.grad[..., None], axis=-1)
        x.grad += gb.reshape(n, c, h // 2, w // 2, 2, 2) \
                    .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    out._backward = _back
    return out


def upsample2(x):
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 block."""
    n, c, h, w = x.data.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3),
                 parents=(x,))

    def _back():
        x.grad += out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))

    out._backward = _back
    return out


def concat_channels(xs):
    """Concatenate along axis 1 in argument order."""
    if not xs:
        raise ShapeMismatch("nothing to concatenate")
    lead = xs[0].data.shape[:1]
    tail = xs[0].data.shape[2:]
    for t in xs[1:]:
        if t.data.shape[:1] != lead or t.data.shape[2:] != tail:
            raise ShapeMismatch("concat inputs differ outside the channel axis")
    sizes = [t.data.shape[1] for t in xs]
    out = Tensor(np.concatenate([t.data for t in xs], axis=1), parents=tuple(xs))

    def _back():
        start = 0
        for t, size in zip(xs, sizes):
            t.grad += out.grad[:, start:start + size]
            start += size

    out._backward = _back
    return out


def band_gap(x, bands=10):
    """Global average pooling into `bands` contiguous row bands.

    Input is a (n, 1, h, w) single-channel image; the output (n, bands)
    holds the mean over all pixels of each band (band heights differ by at
    most one row).
    """
    n, c, h, w = x.data.shape
    if c != 1:
        raise ShapeMismatch(f"band_gap expects a single channel, got {c}")
    if h < bands:
        raise ImageTooSmall(f"{h} rows cannot form {bands} bands")
    edges = np.linspace(0, h, bands + 1).round().astype(int)
    data = np.stack([x.data[:, 0, a:z, :].mean(axis=(1, 2))
                     for a, z in zip(edges[:-1], edges[1:])], axis=1)
    out = Tensor(data, parents=(x,))

    def _back():
        for i, (a, z) in enumerate(zip(edges[:-1], edges[1:])):
            x.grad[:, 0, a:z, :] += (out.grad[:, i] / ((z - a) * w))[:, None, None]

    out._backward = _back
    return out


def dense(x, w, b):
    """Fully connected layer; input is flattened beyond the batch axis."""
    n = x.data.shape[0]
    xf = x.data.reshape(n, -1)
    if w.data.ndim != 2 or w.data.shape[1] != xf.shape[1]:
        raise ShapeMismatch(f"weights {w.data.shape} vs input {xf.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeMismatch(f"bias {b.data.shape} vs {w.data.shape[0]} outputs")
    out = Tensor(xf @ w.data.T + b.data, parents=(x, w, b))

    def _back():
        x.grad += (out.grad @ w.data).reshape(x.data.shape)
        w.grad += out.grad.T @ xf
        b.grad += out.grad.sum(axis=0)

    out._backward = _back
    return out


def conv1d(x, w, b):
    """1D convolution, kernel 3, stride 1, zero padding 1 (same length)."""
    n, c_in, length = x.data.shape
    if w.data.shape[1] != c_in or w.data.shape[2] != 3:
        raise ShapeMismatch(f"kernel {w.data.shape} vs input {x.data.shape}")
    c_out = w.data.shape[0]
    if b.data.shape != (c_out,):
        raise ShapeMismatch(f"bias {b.data.shape} vs {c_out} output channels")
    xp = np.zeros((n, c_in, length + 2), dtype=x.data.dtype)
    xp[:, :, 1:-1] = x.data
    taps = np.stack([xp[:, :, k:k + length] for k in range(3)], axis=2)
    out = Tensor(np.einsum('ock,nckl->nol', w.data, taps) + b.data[:, None],
                 parents=(x, w, b))

    def _back():
        w.grad += np.einsum('nol,nckl->ock', out.grad, taps)
        b.grad += out.grad.sum(axis=(0, 2))
        gxp = np.zeros_like(xp)
        for k in range(3):
            gxp[:, :, k:k + length] += np.einsum('oc,nol->ncl',
                                                 w.data[:, :, k], out.grad)
        x.grad += gxp[:, :, 1:-1]

    out._backward = _back
    return out


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape), parents=(x,))

    def _back():
        x.grad += out.grad.reshape(x.data.shape)

    out._backward = _back
    return out


def narrow(x, start, length, axis=1):
    """Contiguous slice along one axis (gradient scatters back)."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index], parents=(x,))

    def _back():
        x.grad[index] += out.grad

    out._backward = _back
    return out


def mse_loss(pred, target, mask=None):
    """Mean squared difference; with a mask, the mean runs over masked
    elements only (mask broadcasts against pred)."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ShapeMismatch(f"target {target.shape} vs pred {pred.data.shape}")
    diff = pred.data - target
    if mask is None:
        denom = diff.size
        loss = float((diff ** 2).mean())
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=pred.data.dtype),
                               pred.data.shape)
        denom = float(mask.sum())
        if denom == 0:
            raise ShapeMismatch("mask selects nothing")
        diff = diff * mask
        loss = float((diff ** 2).sum() / denom)
    out = Tensor(np.asarray(loss, dtype=pred.data.dtype), parents=(pred,))

    def _back():
        pred.grad += (2.0 / denom) * diff * out.grad

    out._backward = _back
    return out


# --- optimizer ---------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(store, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction, in place on the store."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# --- gradient checking --------------------------------------------------------

def gradient_check(build_loss, tensors, n_samples=8, h=None, seed=0):
    """Compare analytic gradients against central differences.

    `build_loss` rebuilds the loss graph from the current `.data` of the
    given tensors; up to `n_samples` coordinates per tensor are perturbed.
    Returns the maximum relative error over all checked coordinates, with
    near-zero-gradient coordinates damped by an absolute floor so float32
    noise cannot dominate the ratio.
    """
    loss = build_loss()
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    if h is None:
        h = 1e-2 if loss.data.dtype == np.float32 else 1e-6

    rng = np.random.Generator(np.random.Philox(key=seed))
    pairs = []
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        size = flat.shape[0]
        coords = (np.arange(size) if size <= n_samples
                  else rng.choice(size, size=n_samples, replace=False))
        for c in coords:
            orig = flat[c]
            step = h * max(1.0, abs(float(orig)))
            flat[c] = orig + step
            lp = float(build_loss().data)
            flat[c] = orig - step
            lm = float(build_loss().data)
            flat[c] = orig
            gf = (lp - lm) / (2.0 * step)
            pairs.append((float(ga.reshape(-1)[c]), gf))

    gmax = max((abs(a) + abs(f) for a, f in pairs), default=0.0)
    if gmax == 0.0:
        return 0.0
    floor = gmax * (1e-3 if h >= 1e-3 else 1e-7)
    return max(abs(a - f) / max(abs(a) + abs(f), floor) for a, f in pairs)
