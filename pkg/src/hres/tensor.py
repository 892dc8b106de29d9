"""Rank-N float tensors with reverse-mode autodiff.

Implements exactly the operations the classifier needs: 2-D convolution
(cross-correlation, no kernel flip), ELU, ReLU, elementwise add, global
average pooling, dense layers and softmax cross-entropy.  Gradients are
recorded on an explicit :class:`GradTape` and replayed in reverse
execution order.

Storage is float32; convolution and loss reductions accumulate in
float64 before rounding back, which keeps tolerances reproducible on
100x100 inputs.  Every op also runs unchanged on float64 tensors, which
is what :func:`grad_check` uses to make central differences meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """Raised when a NaN/Inf shows up in an intermediate result."""


class Tensor:
    """Flat row-major float array plus shape metadata and a grad slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = np.asarray(arr, dtype=dtype)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _accumulate(tensor, grad):
    if tensor.grad is None:
        tensor.grad = grad.astype(tensor.data.dtype, copy=True)
    else:
        tensor.grad = tensor.grad + grad.astype(tensor.data.dtype, copy=False)


class GradTape:
    """Ordered record of executed ops; replaying it backwards yields grads.

    Each entry is (op name, output tensor, backward rule).  The backward
    rule reads the output's grad and accumulates into the inputs' grads.
    Replaying is deterministic: same inputs give bitwise-same gradients.
    """

    def __init__(self):
        self.entries = []

    def record(self, name, out, backward_fn):
        self.entries.append((name, out, backward_fn))

    def backward(self, loss):
        """Seed d(loss)/d(loss)=1 and run all recorded rules in reverse."""
        loss.grad = np.ones_like(loss.data)
        for _, out, fn in reversed(self.entries):
            if out.grad is not None:
                fn(out.grad)

    def first_nonfinite(self):
        """Name of the earliest op whose output holds NaN/Inf, or None."""
        for name, out, _ in self.entries:
            if not np.all(np.isfinite(out.data)):
                return name
        return None


@dataclass(frozen=True)
class Conv2dSpec:
    """Geometry of one 2-D convolution.

    ``padding`` is explicit per side: (top, bottom, left, right).  The
    model layer computes these from its padding policy; this spec only
    checks arithmetic consistency.
    """

    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: tuple = (0, 0, 0, 0)

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ShapeError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if len(self.padding) != 4 or any(p < 0 for p in self.padding):
            raise ShapeError(f"padding must be 4 non-negative per-side counts, got {self.padding}")

    @property
    def weight_count(self):
        """k*k*f_in*f_out, excluding bias."""
        k = self.kernel_size
        return k * k * self.in_channels * self.out_channels

    @property
    def param_count(self):
        """Weight elements plus one bias term per output channel."""
        return self.weight_count + self.out_channels

    def output_size(self, in_h, in_w):
        k, s = self.kernel_size, self.stride
        pt, pb, pl, pr = self.padding
        if in_h + pt + pb < k or in_w + pl + pr < k:
            raise ShapeError(
                f"padded input {in_h + pt + pb}x{in_w + pl + pr} smaller than kernel {k}x{k}"
            )
        return (in_h + pt + pb - k) // s + 1, (in_w + pl + pr - k) // s + 1


def conv2d(x, weights, bias, spec, tape=None):
    """Batched 2-D cross-correlation plus bias.

    x: N x f_in x H x W, weights: f_out x f_in x k x k, bias: f_out.
    Accumulates in float64, stores in the input dtype.
    """
    k, s = spec.kernel_size, spec.stride
    n, c, h, w = _expect_rank(x, 4, "conv2d input")
    if c != spec.in_channels:
        raise ShapeError(f"conv2d input has {c} channels, spec expects {spec.in_channels}")
    if weights.shape != (spec.out_channels, spec.in_channels, k, k):
        raise ShapeError(
            f"conv2d weights shape {weights.shape} != "
            f"({spec.out_channels}, {spec.in_channels}, {k}, {k})"
        )
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({spec.out_channels},)")

    pt, pb, pl, pr = spec.padding
    oh, ow = spec.output_size(h, w)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))).astype(np.float64)
    w64 = weights.data.astype(np.float64)

    acc = np.zeros((n, spec.out_channels, oh, ow), dtype=np.float64)
    for u in range(k):
        for v in range(k):
            patch = xp[:, :, u : u + s * oh : s, v : v + s * ow : s]
            # (f_out, f_in) x (N, f_in, oh, ow) summed over f_in
            acc += np.einsum("fc,nchw->nfhw", w64[:, :, u, v], patch, optimize=True)
    acc += bias.data.astype(np.float64)[None, :, None, None]
    out = Tensor(acc.astype(x.data.dtype), requires_grad=True)

    if tape is not None:

        def backward(grad):
            g = grad.astype(np.float64)
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            if weights.requires_grad:
                dw = np.zeros_like(w64)
                for u in range(k):
                    for v in range(k):
                        patch = xp[:, :, u : u + s * oh : s, v : v + s * ow : s]
                        dw[:, :, u, v] = np.einsum("nfhw,nchw->fc", g, patch, optimize=True)
                _accumulate(weights, dw)
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                for u in range(k):
                    for v in range(k):
                        dxp[:, :, u : u + s * oh : s, v : v + s * ow : s] += np.einsum(
                            "fc,nfhw->nchw", w64[:, :, u, v], g, optimize=True
                        )
                dx = dxp[:, :, pt : pt + h, pl : pl + w]
                _accumulate(x, dx)

        tape.record("conv2d", out, backward)
    return out


def elu(x, alpha=1.0, tape=None):
    """x if x>0 else alpha*(exp(x)-1); gradient is 1 or output+alpha."""
    if alpha <= 0:
        raise ValueError(f"elu alpha must be > 0, got {alpha}")
    pos = x.data > 0
    y = np.where(pos, x.data, alpha * np.expm1(np.minimum(x.data, 0.0)))
    out = Tensor(y.astype(x.data.dtype), requires_grad=True)

    if tape is not None:

        def backward(grad):
            if x.requires_grad:
                _accumulate(x, grad * np.where(pos, 1.0, out.data + alpha))

        tape.record("elu", out, backward)
    return out


def relu(x, tape=None):
    """max(x, 0); subgradient at exactly 0 is 0."""
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, 0.0).astype(x.data.dtype), requires_grad=True)

    if tape is not None:

        def backward(grad):
            if x.requires_grad:
                _accumulate(x, grad * pos)

        tape.record("relu", out, backward)
    return out


def add(a, b, tape=None):
    """Elementwise sum; upstream grad passes to both inputs unchanged."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=True)

    if tape is not None:

        def backward(grad):
            if a.requires_grad:
                _accumulate(a, grad)
            if b.requires_grad:
                _accumulate(b, grad)

        tape.record("add", out, backward)
    return out


def global_avg_pool(x, tape=None):
    """Per-channel spatial mean: N x C x H x W -> N x C."""
    n, c, h, w = _expect_rank(x, 4, "global_avg_pool input")
    out = Tensor(
        x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.data.dtype), requires_grad=True
    )

    if tape is not None:

        def backward(grad):
            if x.requires_grad:
                _accumulate(x, np.broadcast_to(grad[:, :, None, None] / (h * w), x.shape))

        tape.record("global_avg_pool", out, backward)
    return out


def dense(x, weights, bias, tape=None):
    """Affine map: (N x D) @ (D x K) + K."""
    n, d = _expect_rank(x, 2, "dense input")
    if weights.shape[0] != d:
        raise ShapeError(f"dense input dim {d} != weight rows {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({weights.shape[1]},)")
    y = x.data.astype(np.float64) @ weights.data.astype(np.float64) + bias.data
    out = Tensor(y.astype(x.data.dtype), requires_grad=True)

    if tape is not None:

        def backward(grad):
            g = grad.astype(np.float64)
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=0))
            if weights.requires_grad:
                _accumulate(weights, x.data.astype(np.float64).T @ g)
            if x.requires_grad:
                _accumulate(x, g @ weights.data.astype(np.float64).T)

        tape.record("dense", out, backward)
    return out


def softmax(logits):
    """Row-wise stable softmax of an N x K array."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels, tape=None):
    """Mean over the batch of -log softmax(logits)[label].

    Gradient w.r.t. logits is (softmax - one_hot) / N.
    """
    n, k = _expect_rank(logits, 2, "softmax_cross_entropy logits")
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise ShapeError(f"labels shape {lab.shape} != ({n},)")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{lab.min()}, {lab.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(n), lab]
    out = Tensor(np.asarray(losses.mean(), dtype=logits.data.dtype), requires_grad=True)

    if tape is not None:

        def backward(grad):
            if logits.requires_grad:
                p = np.exp(z - lse[:, None])
                p[np.arange(n), lab] -= 1.0
                _accumulate(logits, float(grad) * p / n)

        tape.record("softmax_cross_entropy", out, backward)
    return out


def grad_check(loss_fn, params, epsilon=1e-3):
    """Max relative error between analytic and central-difference grads.

    ``loss_fn(tape)`` must run a forward pass over ``params`` (a list of
    parameter Tensors) and return the scalar loss Tensor.  Parameters
    are promoted to float64 for the duration: central differences at
    eps=1e-3 are dominated by storage rounding in float32, which would
    say nothing about the backward rules under test.

    Returns max over parameter elements of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")

    saved = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None

        tape = GradTape()
        loss = loss_fn(tape)
        if not np.all(np.isfinite(loss.data)):
            culprit = tape.first_nonfinite() or "loss"
            raise NonFiniteError(f"non-finite values in output of {culprit}")
        tape.backward(loss)

        worst = 0.0
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = float(loss_fn(None).data)
                flat[i] = orig - epsilon
                f_minus = float(loss_fn(None).data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * epsilon)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
        return worst
    finally:
        for p, data in zip(params, saved):
            p.data = data
            p.grad = None


def _expect_rank(t, rank, what):
    if len(t.shape) != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {t.shape}")
    return t.shape
