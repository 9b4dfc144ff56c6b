"""Minimal dense-tensor compute with reverse-mode differentiation.

Exactly the op set needed to train the gradient-grid generator network and
the toy classifier: affine, strided (de)convolution, a few activations,
channel concat/slice, two losses, and Adam. Heavy lifting is routed through
im2col/col2im and batched matmuls so training stays fast on one core.

Ops are functional and never mutate their inputs. Passing a Tape records the
backward closure for the op; Tape.backward then traverses nodes in exact
reverse recording order, accumulating gradients additively at fan-out.
Training runs in float32; build graphs from float64 arrays to run the
finite-difference gradient checks at tight tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BCE_EPS = 1e-7


class Tensor:
    """A shape-checked view over a contiguous numpy array plus its gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        data = np.asarray(data)
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Records backward closures in execution order."""

    def __init__(self):
        self._nodes = []

    def record(self, backward_fn):
        self._nodes.append(backward_fn)

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss) = 1 and run every node in reverse order."""
        self.backward_from(loss, np.ones_like(loss.data))

    def backward_from(self, out: Tensor, grad: np.ndarray):
        """Backward from an arbitrary output with a caller-supplied cotangent."""
        out.grad = np.asarray(grad, dtype=out.data.dtype)
        for fn in reversed(self._nodes):
            fn()


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# im2col plumbing shared by conv2d / deconv2d


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(B, C, Hp, Wp) padded input -> (B, C*k*k, out_h*out_w) patch matrix."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, out_h, out_w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
    return cols.reshape(b, c * k * k, out_h * out_w)


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back into the padded image."""
    b, c = padded_shape[:2]
    cols = cols.reshape(b, c, k, k, out_h, out_w)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += cols[:, :, i, j]
    return xp


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


# ---------------------------------------------------------------------------
# Differentiable ops


def fully_connected(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """y = x @ w + b for x (B, in), w (in, out), b (out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"fc shape mismatch: x {x.data.shape}, w {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(f"fc bias shape {b.data.shape} != ({w.data.shape[1]},)")
    out = Tensor(x.data @ w.data + b.data)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(w, x.data.T @ out.grad)
            _accum(x, out.grad @ w.data.T)
            _accum(b, out.grad.sum(axis=0))
        tape.record(backward)
    return out


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0,
           b: Tensor | None = None, tape: Tape | None = None) -> Tensor:
    """Cross-correlation of x (B, C, H, W) with kernels k (C_out, C, kh, kw)."""
    bsz, c, h, w = x.data.shape
    c_out, c_in, kh, kw = k.data.shape
    if c_in != c or kh != kw:
        raise ValueError(f"conv kernel {k.data.shape} incompatible with input {x.data.shape}")
    ksz = kh
    out_h = (h + 2 * padding - ksz) // stride + 1
    out_w = (w + 2 * padding - ksz) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError("conv output would be empty")
    xp = _pad_hw(x.data, padding)
    cols = _im2col(xp, ksz, stride, out_h, out_w)           # (B, C*k*k, L)
    wm = k.data.reshape(c_out, c_in * ksz * ksz)
    y = np.matmul(wm, cols).reshape(bsz, c_out, out_h, out_w)
    if b is not None:
        y = y + b.data.reshape(1, c_out, 1, 1)
    out = Tensor(y)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dy = out.grad.reshape(bsz, c_out, out_h * out_w)
            dw = np.einsum("bol,bcl->oc", dy, cols).reshape(k.data.shape)
            _accum(k, dw)
            dcols = np.matmul(wm.T, dy)
            dxp = _col2im(dcols, xp.shape, ksz, stride, out_h, out_w)
            _accum(x, _unpad_hw(dxp, padding))
            if b is not None:
                _accum(b, out.grad.sum(axis=(0, 2, 3)))
        tape.record(backward)
    return out


def deconv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0,
             b: Tensor | None = None, tape: Tape | None = None) -> Tensor:
    """Transposed convolution: x (B, C, H, W), kernels k (C, C_out, kh, kw).

    Output spatial size is (H - 1) * stride - 2 * padding + k; implemented as
    the adjoint of conv2d (col2im scatter), which makes the k=3/stride=2/pad=1
    stages double 3 -> 5 -> 9 -> 17 -> 33 -> 65.
    """
    bsz, c, h, w = x.data.shape
    c_in, c_out, kh, kw = k.data.shape
    if c_in != c or kh != kw:
        raise ValueError(f"deconv kernel {k.data.shape} incompatible with input {x.data.shape}")
    ksz = kh
    out_h = (h - 1) * stride - 2 * padding + ksz
    out_w = (w - 1) * stride - 2 * padding + ksz
    if out_h < 1 or out_w < 1:
        raise ValueError("deconv output would be empty")
    wm = k.data.reshape(c_in, c_out * ksz * ksz)
    x_flat = x.data.reshape(bsz, c_in, h * w)
    cols = np.matmul(wm.T, x_flat)                           # (B, C_out*k*k, H*W)
    padded = (bsz, c_out, out_h + 2 * padding, out_w + 2 * padding)
    y = _unpad_hw(_col2im(cols, padded, ksz, stride, h, w), padding)
    if b is not None:
        y = y + b.data.reshape(1, c_out, 1, 1)
    out = Tensor(y)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dyp = _pad_hw(out.grad, padding)
            dy_cols = _im2col(dyp, ksz, stride, h, w)        # (B, C_out*k*k, H*W)
            _accum(x, np.matmul(wm, dy_cols).reshape(x.data.shape))
            dw = np.einsum("bil,bjl->ij", x_flat, dy_cols).reshape(k.data.shape)
            _accum(k, dw)
            if b is not None:
                _accum(b, out.grad.sum(axis=(0, 2, 3)))
        tape.record(backward)
    return out


def leaky_relu(x: Tensor, slope: float = 0.2, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.where(x.data > 0, x.data, slope * x.data))
    if tape is not None:
        # subgradient at 0 is the slope
        factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)

        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad * factor)
        tape.record(backward)
    return out


def tanh(x: Tensor, tape: Tape | None = None) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad * (1.0 - y * y))
        tape.record(backward)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad * y * (1.0 - y))
        tape.record(backward)
    return out


def concat_channels(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Concatenate (B, C, H, W) tensors along the channel axis."""
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(f"concat mismatch: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(a, out.grad[:, :ca])
            _accum(b, out.grad[:, ca:])
        tape.record(backward)
    return out


def slice_channels(x: Tensor, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    """Select channels [start, stop) of a (B, C, H, W) tensor."""
    out = Tensor(x.data[:, start:stop])
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g = np.zeros_like(x.data)
            g[:, start:stop] = out.grad
            _accum(x, g)
        tape.record(backward)
    return out


def reshape(x: Tensor, shape, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad.reshape(x.data.shape))
        tape.record(backward)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(a, out.grad)
            _accum(b, out.grad)
        tape.record(backward)
    return out


def scale(x: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data * c)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accum(x, out.grad * c)
        tape.record(backward)
    return out


def bce_loss(pred: Tensor, target, tape: Tape | None = None) -> Tensor:
    """Binary cross-entropy, averaged over every element of pred.

    Predictions are clamped to [eps, 1-eps]; clamped entries get zero
    gradient (the clamp is flat there).
    """
    t = np.broadcast_to(np.asarray(target, dtype=pred.data.dtype), pred.data.shape)
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean()
    out = Tensor(np.asarray(loss, dtype=pred.data.dtype))
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dp = (-t / p + (1.0 - t) / (1.0 - p)) / n
            _accum(pred, out.grad * np.where(inside, dp, 0.0))
        tape.record(backward)
    return out


def bce_with_logits(logits: Tensor, target, tape: Tape | None = None) -> Tensor:
    """Binary cross-entropy computed from logits: mean(softplus(x) - t * x).

    Numerically stable for any logit magnitude; the gradient sigmoid(x) - t
    never vanishes, unlike the clamped probability-space form.
    """
    t = np.broadcast_to(np.asarray(target, dtype=logits.data.dtype),
                        logits.data.shape)
    x = logits.data
    loss = (np.logaddexp(0.0, x) - t * x).mean()
    out = Tensor(np.asarray(loss, dtype=logits.data.dtype))
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            sig = 1.0 / (1.0 + np.exp(-x))
            _accum(logits, out.grad * (sig - t) / x.size)
        tape.record(backward)
    return out


def softmax_cross_entropy(logits: Tensor, labels, tape: Tape | None = None) -> Tensor:
    """Mean cross-entropy of softmax(logits) (B, m) against integer labels (B,)."""
    lab = np.asarray(labels)
    bsz = logits.data.shape[0]
    if lab.shape != (bsz,):
        raise ValueError(f"labels shape {lab.shape} != ({bsz},)")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    nll = -np.log(np.maximum(probs[np.arange(bsz), lab], 1e-300))
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            d = probs.copy()
            d[np.arange(bsz), lab] -= 1.0
            _accum(logits, out.grad * d / bsz)
        tape.record(backward)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain (non-differentiable) softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one ordered parameter list."""

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float = 2e-4, beta1: float = 0.5,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns new parameter arrays.

    Input arrays are left untouched; the moment buffers and step counter in
    state advance, as they must.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param/grad shape mismatch at {i}: {p.shape} vs {g.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return new_params


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Seeded uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weight init."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
