"""3-D cross-correlation over (n, c, t, h, w) tensors.

Two forward paths exist. :func:`conv3d_naive` is the reference: plain Python
loops, kept deliberately simple so it can serve as an oracle. :func:`conv3d_forward`
gathers receptive fields into a column matrix and reduces them with one matrix
product per call. Both accumulate in float64 and round once to the input dtype,
so they agree to within one float32 ulp.

The reduction axis of the column matrix is laid out as (c_in, kt, kh, kw), which
fixes the summation order of every output element. Threads only split the
independent output rows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fastconv.tensor import ShapeError, as_tensor, check_shape


class Padding(str, enum.Enum):
    VALID = "valid"
    SAME = "same"


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    out = tuple(int(s) for s in v)
    if len(out) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return out  # type: ignore[return-value]


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution.

    ``kernel`` is (kt, kh, kw) and ``stride`` is (st, sh, sw).
    """

    kernel: tuple[int, int, int]
    c_in: int
    c_out: int
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: Padding = Padding.SAME
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", Padding(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel and stride must be >= 1: {self}")
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError(f"channels must be >= 1: {self}")
        if self.padding is Padding.SAME and any(k % 2 == 0 for k in self.kernel):
            raise ValueError(f"same padding needs odd kernel extents, got {self.kernel}")

    @property
    def pads(self) -> tuple[int, int, int]:
        if self.padding is Padding.VALID:
            return (0, 0, 0)
        return tuple((k - 1) // 2 for k in self.kernel)  # type: ignore[return-value]

    @property
    def weight_shape(self) -> tuple[int, int, int, int, int]:
        return (self.c_out, self.c_in, *self.kernel)

    @property
    def param_count(self) -> int:
        kt, kh, kw = self.kernel
        return self.c_out * self.c_in * kt * kh * kw + (self.c_out if self.bias else 0)

    def output_shape(self, in_shape) -> tuple[int, int, int, int, int]:
        n, c, t, h, w = check_shape(in_shape)
        if c != self.c_in:
            raise ShapeError(f"input has {c} channels, conv expects {self.c_in}")
        out = []
        for size, k, s, p in zip((t, h, w), self.kernel, self.stride, self.pads):
            padded = size + 2 * p
            if padded < k:
                raise ShapeError(f"kernel {self.kernel} larger than padded input {(t, h, w)}")
            out.append((padded - k) // s + 1)
        return (n, self.c_out, *out)

    def flops(self, in_shape) -> int:
        kt, kh, kw = self.kernel
        out = self.output_shape(in_shape)
        return 2 * kt * kh * kw * self.c_in * int(np.prod(out))

    def to_dict(self) -> dict:
        return {
            "kernel": list(self.kernel),
            "c_in": self.c_in,
            "c_out": self.c_out,
            "stride": list(self.stride),
            "padding": self.padding.value,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvSpec":
        return cls(
            kernel=tuple(d["kernel"]),
            c_in=int(d["c_in"]),
            c_out=int(d["c_out"]),
            stride=tuple(d.get("stride", (1, 1, 1))),
            padding=Padding(d.get("padding", "same")),
            bias=bool(d.get("bias", True)),
        )


@dataclass
class ConvWeights:
    kernels: np.ndarray  # (c_out, c_in, kt, kh, kw)
    bias: np.ndarray = field(default=None)  # (c_out,)

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels)
        if self.kernels.ndim != 5:
            raise ShapeError(f"kernels must be 5-D, got {self.kernels.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.kernels.shape[0], dtype=self.kernels.dtype)
        self.bias = np.asarray(self.bias, dtype=self.kernels.dtype)

    def check(self, spec: ConvSpec) -> None:
        if self.kernels.shape != spec.weight_shape:
            raise ShapeError(f"kernels {self.kernels.shape} do not match spec {spec.weight_shape}")
        if self.bias.shape != (spec.c_out,):
            raise ShapeError(f"bias {self.bias.shape} does not match c_out={spec.c_out}")

    def astype(self, dtype) -> "ConvWeights":
        return ConvWeights(self.kernels.astype(dtype), self.bias.astype(dtype))

    def copy(self) -> "ConvWeights":
        return ConvWeights(self.kernels.copy(), self.bias.copy())


INIT_SCHEMES = ("he", "glorot")


def init_weights(spec: ConvSpec, rng: np.random.Generator, dtype=np.float32, scheme: str = "he") -> ConvWeights:
    """Uniform kernels and zero bias.

    ``he`` draws from +-sqrt(6 / fan_in) and keeps activation variance
    roughly constant through ReLU stacks without normalization layers;
    ``glorot`` draws from +-sqrt(6 / (fan_in + fan_out)).
    """
    kt, kh, kw = spec.kernel
    taps = kt * kh * kw
    if scheme == "he":
        limit = np.sqrt(6.0 / (spec.c_in * taps))
    elif scheme == "glorot":
        limit = np.sqrt(6.0 / (spec.c_in * taps + spec.c_out * taps))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    kernels = rng.uniform(-limit, limit, size=spec.weight_shape).astype(dtype)
    return ConvWeights(kernels, np.zeros(spec.c_out, dtype=dtype))


def _prepare(x, spec: ConvSpec, wts: ConvWeights):
    x = as_tensor(x)
    wts.check(spec)
    out_shape = spec.output_shape(x.shape)
    return x, out_shape


def conv3d_naive(x, spec: ConvSpec, wts: ConvWeights) -> np.ndarray:
    """Reference convolution, one output element at a time."""
    x, out_shape = _prepare(x, spec, wts)
    n, c_out, to, ho, wo = out_shape
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    pt, ph, pw = spec.pads
    _, c_in, t, h, w = x.shape
    xs = x.tolist()
    ks = wts.kernels.tolist()
    bs = wts.bias.tolist() if spec.bias else [0.0] * c_out
    out = np.zeros(out_shape, dtype=np.float64)
    for b in range(n):
        for o in range(c_out):
            for ot in range(to):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for i in range(c_in):
                            for dt in range(kt):
                                ti = ot * st + dt - pt
                                if ti < 0 or ti >= t:
                                    continue
                                for dh in range(kh):
                                    hi = oh * sh + dh - ph
                                    if hi < 0 or hi >= h:
                                        continue
                                    for dw in range(kw):
                                        wi = ow * sw + dw - pw
                                        if wi < 0 or wi >= w:
                                            continue
                                        acc += ks[o][i][dt][dh][dw] * xs[b][i][ti][hi][wi]
                        out[b, o, ot, oh, ow] = acc + bs[o]
    return out.astype(x.dtype)


def _columns(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Receptive fields as a float64 (c_in*kt*kh*kw, n*to*ho*wo) matrix.

    Rows follow (c_in, kt, kh, kw) order; columns follow (n, to, ho, wo).
    """
    pt, ph, pw = spec.pads
    if pt or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    st, sh, sw = spec.stride
    win = sliding_window_view(x, spec.kernel, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    n, c, to, ho, wo = win.shape[:5]
    cols = np.empty((c, *spec.kernel, n, to, ho, wo), dtype=np.float64)
    cols[...] = win.transpose(1, 5, 6, 7, 0, 2, 3, 4)
    return cols.reshape(c * int(np.prod(spec.kernel)), -1)


def _forward(x: np.ndarray, spec: ConvSpec, wts: ConvWeights, out_shape) -> tuple[np.ndarray, np.ndarray]:
    cols = _columns(x, spec)
    kmat = wts.kernels.reshape(spec.c_out, -1).astype(np.float64)
    out = kmat @ cols  # (c_out, n*to*ho*wo)
    if spec.bias:
        out += wts.bias.astype(np.float64)[:, None]
    n, c_out, to, ho, wo = out_shape
    out = out.reshape(c_out, n, to, ho, wo).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(out, dtype=x.dtype), cols


def conv3d_forward(x, spec: ConvSpec, wts: ConvWeights) -> np.ndarray:
    x, out_shape = _prepare(x, spec, wts)
    return _forward(x, spec, wts, out_shape)[0]


def conv3d_forward_cached(x, spec: ConvSpec, wts: ConvWeights) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`conv3d_forward` but also returns the column matrix for reuse in backward."""
    x, out_shape = _prepare(x, spec, wts)
    return _forward(x, spec, wts, out_shape)


def conv3d_backward(
    x, spec: ConvSpec, wts: ConvWeights, grad_out, cols: np.ndarray | None = None,
    input_grad: bool = True,
) -> tuple[np.ndarray | None, ConvWeights]:
    """Gradients of a scalar loss w.r.t. the input, kernels and bias.

    ``cols`` may be passed from :func:`conv3d_forward_cached` to skip
    re-gathering the receptive fields. With ``input_grad=False`` the input
    gradient is skipped and returned as ``None``.
    """
    x, out_shape = _prepare(x, spec, wts)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != out_shape:
        raise ShapeError(f"grad_out {grad_out.shape} does not match output {out_shape}")
    n, c_out, to, ho, wo = out_shape
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    pt, ph, pw = spec.pads
    c_in = spec.c_in
    if cols is None:
        cols = _columns(x, spec)

    g = np.empty((c_out, n, to, ho, wo), dtype=np.float64)
    g[...] = grad_out.transpose(1, 0, 2, 3, 4)
    g = g.reshape(c_out, -1)
    grad_k = (g @ cols.T).reshape(spec.weight_shape)
    grad_b = g.sum(axis=1) if spec.bias else np.zeros(c_out)
    dtype = x.dtype
    grad_w = ConvWeights(grad_k.astype(dtype), grad_b.astype(dtype))
    if not input_grad:
        return None, grad_w

    kmat = wts.kernels.reshape(c_out, -1).astype(np.float64)
    gcols = (kmat.T @ g).reshape(c_in, kt, kh, kw, n, to, ho, wo)
    _, _, t, h, w = x.shape
    gx = np.zeros((c_in, n, t + 2 * pt, h + 2 * ph, w + 2 * pw))
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                gx[:, :, dt:dt + st * to:st, dh:dh + sh * ho:sh, dw:dw + sw * wo:sw] += gcols[:, dt, dh, dw]
    gx = gx[:, :, pt:pt + t, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(gx, dtype=dtype), grad_w


def compose_kernels(
    a_spec: ConvSpec, a: ConvWeights, b_spec: ConvSpec, b: ConvWeights
) -> tuple[ConvSpec, ConvWeights]:
    """Single Valid convolution equivalent to applying ``a`` then ``b``.

    Exact for Valid padding and unit stride with no nonlinearity in between.
    The effective kernel is the full (flipped) convolution of the two kernels,
    contracted over the shared channel axis; biases fold in as
    ``b.bias + sum(b.kernels) . a.bias``.
    """
    if a_spec.c_out != b_spec.c_in:
        raise ShapeError(f"channel mismatch: {a_spec.c_out} -> {b_spec.c_in}")
    if a_spec.stride != (1, 1, 1) or b_spec.stride != (1, 1, 1):
        raise ValueError("compose_kernels requires unit strides")
    a.check(a_spec)
    b.check(b_spec)

    kb = b_spec.kernel
    dtype = np.result_type(a.kernels.dtype, b.kernels.dtype)
    # a as a batch of c_in "clips" with c_mid channels; correlate with flipped b.
    xa = a.kernels.transpose(1, 0, 2, 3, 4).astype(dtype)
    xa = np.pad(xa, ((0, 0), (0, 0), *[(k - 1, k - 1) for k in kb]))
    flip = np.ascontiguousarray(b.kernels[:, :, ::-1, ::-1, ::-1], dtype=dtype)
    spec = ConvSpec(kb, b_spec.c_in, b_spec.c_out, padding=Padding.VALID, bias=False)
    e = conv3d_forward(xa, spec, ConvWeights(flip)).transpose(1, 0, 2, 3, 4)

    kernel = tuple(ka + k - 1 for ka, k in zip(a_spec.kernel, kb))
    bias = b.bias.astype(np.float64) + b.kernels.sum(axis=(2, 3, 4)).astype(np.float64) @ a.bias.astype(np.float64)
    use_bias = a_spec.bias or b_spec.bias
    out_spec = ConvSpec(kernel, a_spec.c_in, b_spec.c_out, padding=Padding.VALID, bias=use_bias)
    return out_spec, ConvWeights(np.ascontiguousarray(e, dtype=dtype), bias.astype(dtype))


def with_padding(spec: ConvSpec, padding: Padding) -> ConvSpec:
    return replace(spec, padding=Padding(padding))
