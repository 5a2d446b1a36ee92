"""Factorized spatio-temporal convolution blocks.

Every block is a short chain of *segments*. A segment feeds its input to one
or more branches (each a sequence of conv + ReLU layers), sums the branch
outputs, and optionally adds a skip path (identity, or a 1x1x1 projection when
the shapes differ). That is enough to express all nine kinds:

=============  ==========================================================
kind           segments
=============  ==========================================================
conv3d         [k,k,k]
2plus1d        [1,k,k] -> [k,1,1]
p3d_a          ([1,k,k] -> [k,1,1]) + skip
p3d_b          [1,k,k] || [k,1,1]
p3d_c          ([1,k,k] + skip) then ([k,1,1] + skip)
fast           [1,k,k] -> [k,1,k] -> [k,k,1]
split_fast     [1,k,k] then ([k,1,k] || [k,k,1])
fast_xt_only   [1,k,k] -> [k,1,k] -> [k,1,1]
fast_yt_only   [1,k,k] -> [k,1,1] -> [k,k,1]
=============  ==========================================================

``->`` is sequential, ``||`` is parallel with summed outputs. ReLU follows
every conv (never a sum) unless the block is built in linear mode.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fastconv import tensor
from fastconv.conv import (
    ConvSpec,
    ConvWeights,
    Padding,
    conv3d_backward,
    conv3d_forward,
    conv3d_forward_cached,
    init_weights,
)
from fastconv.tensor import ShapeError


class BlockKind(str, enum.Enum):
    CONV3D = "conv3d"
    TWO_PLUS_ONE_D = "2plus1d"
    P3D_A = "p3d_a"
    P3D_B = "p3d_b"
    P3D_C = "p3d_c"
    FAST = "fast"
    SPLIT_FAST = "split_fast"
    FAST_XT_ONLY = "fast_xt_only"
    FAST_YT_ONLY = "fast_yt_only"

    @classmethod
    def parse(cls, name: str) -> "BlockKind":
        key = name.strip().lower().replace("-", "_")
        aliases = {"3d": "conv3d", "2+1d": "2plus1d", "(2+1)d": "2plus1d", "r2plus1d": "2plus1d",
                   "xt_only": "fast_xt_only", "yt_only": "fast_yt_only", "splitfast": "split_fast"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown block kind {name!r}; choose from {[k.value for k in cls]}") from None


SEQUENTIAL_KINDS = (
    BlockKind.CONV3D,
    BlockKind.TWO_PLUS_ONE_D,
    BlockKind.FAST,
    BlockKind.FAST_XT_ONLY,
    BlockKind.FAST_YT_ONLY,
)

RESIDUAL_KINDS = (BlockKind.P3D_A, BlockKind.P3D_C)


@dataclass
class ConvLayer:
    name: str
    spec: ConvSpec
    weights: ConvWeights


@dataclass(frozen=True)
class Segment:
    branches: tuple[tuple[str, ...], ...]
    skip: bool = False


@dataclass
class Block:
    kind: BlockKind
    convs: dict[str, ConvLayer]
    segments: list[Segment]
    # segment index -> name of its 1x1x1 projection (absent means identity skip)
    projections: dict[int, str] = field(default_factory=dict)
    linear: bool = False
    seed: int | None = None
    k: int = 3
    stride: tuple[int, int, int] = (1, 1, 1)

    @property
    def c_in(self) -> int:
        return self.convs[self.segments[0].branches[0][0]].spec.c_in

    @property
    def c_out(self) -> int:
        return self.convs[self.segments[-1].branches[0][-1]].spec.c_out

    def param_count(self) -> int:
        return block_param_count(self)

    def output_shape(self, in_shape) -> tuple[int, ...]:
        shape = tuple(in_shape)
        for seg in self.segments:
            outs = []
            for branch in seg.branches:
                s = shape
                for name in branch:
                    s = self.convs[name].spec.output_shape(s)
                outs.append(s)
            if len(set(outs)) != 1:
                raise ShapeError(f"{self.kind.value}: branch shapes differ {outs}")
            shape = outs[0]
        return shape

    def astype(self, dtype) -> "Block":
        convs = {n: ConvLayer(n, c.spec, c.weights.astype(dtype)) for n, c in self.convs.items()}
        return Block(self.kind, convs, list(self.segments), dict(self.projections),
                     self.linear, self.seed, self.k, self.stride)

    def params(self) -> dict[str, np.ndarray]:
        """Flat view of every weight array, keyed ``<conv>.w`` / ``<conv>.b``."""
        out = {}
        for name, layer in self.convs.items():
            out[f"{name}.w"] = layer.weights.kernels
            if layer.spec.bias:
                out[f"{name}.b"] = layer.weights.bias
        return out


def _kernels(k: int) -> dict[str, tuple[int, int, int]]:
    return {
        "full": (k, k, k),
        "xy": (1, k, k),
        "xt": (k, 1, k),
        "yt": (k, k, 1),
        "t": (k, 1, 1),
    }


def make_block(
    kind: BlockKind | str,
    c_in: int,
    c_out: int,
    k: int = 3,
    stride=1,
    seed: int = 0,
    *,
    bias: bool = True,
    linear: bool = False,
    padding: Padding | str = Padding.SAME,
    mid_channels: int | None = None,
    init: str = "he",
    dtype=np.float32,
) -> Block:
    """Build one block with seeded uniform weights (He limits unless ``init="glorot"``).

    Spatial stride goes on the first conv that spans h/w, temporal stride on
    the first conv that spans t; convs running in parallel share the stride
    so their outputs line up. ``mid_channels`` only affects the (2+1)D kinds
    (2plus1d, p3d_a) and defaults to ``c_out``.
    """
    kind = BlockKind.parse(kind) if isinstance(kind, str) else kind
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if c_in < 1 or c_out < 1:
        raise ValueError("channel counts must be >= 1")
    st, sh, sw = stride if not isinstance(stride, int) else (stride,) * 3
    padding = Padding(padding)
    if kind in RESIDUAL_KINDS and padding is not Padding.SAME:
        raise ValueError(f"{kind.value} has skip connections and needs same padding")
    ks = _kernels(k)
    space = (1, sh, sw)
    time = (st, 1, 1)
    full = (st, sh, sw)
    one = (1, 1, 1)
    mid = mid_channels or c_out

    plan: list[tuple[str, tuple, int, int, tuple]] = []  # name, kernel, c_in, c_out, stride
    if kind is BlockKind.CONV3D:
        plan = [("conv", ks["full"], c_in, c_out, full)]
        segments = [Segment((("conv",),))]
    elif kind in (BlockKind.TWO_PLUS_ONE_D, BlockKind.P3D_A):
        plan = [("s", ks["xy"], c_in, mid, space), ("t", ks["t"], mid, c_out, time)]
        segments = [Segment((("s", "t"),), skip=kind is BlockKind.P3D_A)]
    elif kind is BlockKind.P3D_B:
        plan = [("s", ks["xy"], c_in, c_out, full), ("t", ks["t"], c_in, c_out, full)]
        segments = [Segment((("s",), ("t",)))]
    elif kind is BlockKind.P3D_C:
        plan = [("s", ks["xy"], c_in, c_out, space), ("t", ks["t"], c_out, c_out, time)]
        segments = [Segment((("s",),), skip=True), Segment((("t",),), skip=True)]
    elif kind is BlockKind.FAST:
        plan = [("xy", ks["xy"], c_in, c_out, space), ("xt", ks["xt"], c_out, c_out, time),
                ("yt", ks["yt"], c_out, c_out, one)]
        segments = [Segment((("xy", "xt", "yt"),))]
    elif kind is BlockKind.SPLIT_FAST:
        plan = [("xy", ks["xy"], c_in, c_out, space), ("xt", ks["xt"], c_out, c_out, time),
                ("yt", ks["yt"], c_out, c_out, time)]
        segments = [Segment((("xy",),)), Segment((("xt",), ("yt",)))]
    elif kind is BlockKind.FAST_XT_ONLY:
        plan = [("xy", ks["xy"], c_in, c_out, space), ("xt", ks["xt"], c_out, c_out, time),
                ("t", ks["t"], c_out, c_out, one)]
        segments = [Segment((("xy", "xt", "t"),))]
    elif kind is BlockKind.FAST_YT_ONLY:
        plan = [("xy", ks["xy"], c_in, c_out, space), ("t", ks["t"], c_out, c_out, time),
                ("yt", ks["yt"], c_out, c_out, one)]
        segments = [Segment((("xy", "t", "yt"),))]
    else:  # pragma: no cover
        raise ValueError(kind)

    rng = np.random.default_rng(seed)
    convs: dict[str, ConvLayer] = {}
    for name, kernel, ci, co, strd in plan:
        spec = ConvSpec(kernel, ci, co, strd, padding, bias)
        convs[name] = ConvLayer(name, spec, init_weights(spec, rng, dtype, init))

    # Skip paths need a projection whenever channels or stride change.
    projections = {}
    for idx, seg in enumerate(segments):
        if not seg.skip:
            continue
        first = convs[seg.branches[0][0]].spec
        seg_stride = tuple(int(np.prod(s)) for s in zip(*(convs[n].spec.stride for n in seg.branches[0])))
        seg_out = convs[seg.branches[0][-1]].spec.c_out
        if first.c_in != seg_out or seg_stride != (1, 1, 1):
            name = f"proj{idx}"
            spec = ConvSpec((1, 1, 1), first.c_in, seg_out, seg_stride, Padding.SAME, bias)
            convs[name] = ConvLayer(name, spec, init_weights(spec, rng, dtype, init))
            projections[idx] = name

    return Block(kind, convs, segments, projections, linear, seed, k, (st, sh, sw))


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class BlockCache:
    block_id: int
    x_shape: tuple
    # per segment: segment input, per branch list of (conv input, relu mask or None)
    segments: list


def _conv_unit(block: Block, name: str, x: np.ndarray):
    layer = block.convs[name]
    y, cols = conv3d_forward_cached(x, layer.spec, layer.weights)
    if block.linear:
        return y, (x, cols, None)
    return tensor.relu(y), (x, cols, y > 0)


def block_forward(block: Block, x) -> tuple[np.ndarray, BlockCache]:
    x = tensor.as_tensor(x)
    if x.shape[1] != block.c_in:
        raise ShapeError(f"{block.kind.value}: input has {x.shape[1]} channels, expected {block.c_in}")
    cache = BlockCache(id(block), x.shape, [])
    h = x
    for idx, seg in enumerate(block.segments):
        seg_in = h
        branch_caches = []
        out = None
        for branch in seg.branches:
            y = seg_in
            steps = []
            for name in branch:
                y, c = _conv_unit(block, name, y)
                steps.append(c)
            branch_caches.append(steps)
            out = y if out is None else tensor.add(out, y)
        if seg.skip:
            proj = block.projections.get(idx)
            if proj is None:
                skip = seg_in
            else:
                layer = block.convs[proj]
                skip = conv3d_forward(seg_in, layer.spec, layer.weights)
            out = tensor.add(out, skip)
        cache.segments.append((seg_in, branch_caches))
        h = out
    return h, cache


def block_backward(block: Block, cache: BlockCache, grad_out) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Backpropagate through ``block``.

    Returns the input gradient and a dict of weight gradients keyed like
    :meth:`Block.params`.
    """
    if cache is None or cache.block_id != id(block) or len(cache.segments) != len(block.segments):
        raise ValueError("stale or missing forward cache for this block")
    grads: dict[str, np.ndarray] = {}

    def accumulate(name: str, gw: ConvWeights):
        spec = block.convs[name].spec
        grads[f"{name}.w"] = gw.kernels
        if spec.bias:
            grads[f"{name}.b"] = gw.bias

    g = np.asarray(grad_out)
    for idx in reversed(range(len(block.segments))):
        seg = block.segments[idx]
        seg_in, branch_caches = cache.segments[idx]
        g_in = None
        for branch, steps in zip(seg.branches, branch_caches):
            gb = g
            for name, (conv_in, cols, mask) in zip(reversed(branch), reversed(steps)):
                if mask is not None:
                    gb = gb * mask
                layer = block.convs[name]
                gb, gw = conv3d_backward(conv_in, layer.spec, layer.weights, gb, cols)
                accumulate(name, gw)
            g_in = gb if g_in is None else g_in + gb
        if seg.skip:
            proj = block.projections.get(idx)
            if proj is None:
                g_in = g_in + g
            else:
                layer = block.convs[proj]
                gs, gw = conv3d_backward(seg_in, layer.spec, layer.weights, g)
                accumulate(proj, gw)
                g_in = g_in + gs
        g = g_in
    ordered = {k: grads[k] for k in block.params()}
    return g, ordered


def block_param_count(block: Block) -> int:
    return sum(layer.spec.param_count for layer in block.convs.values())


def composed_kernel(block: Block) -> tuple[ConvSpec, ConvWeights]:
    """Collapse a single-branch, skip-free block into one convolution.

    Only meaningful in linear mode with unit strides and valid padding.
    """
    from fastconv.conv import compose_kernels

    if len(block.segments) != 1 or len(block.segments[0].branches) != 1 or block.segments[0].skip:
        raise ValueError(f"{block.kind.value} is not a plain sequential block")
    names = block.segments[0].branches[0]
    spec, wts = block.convs[names[0]].spec, block.convs[names[0]].weights
    for name in names[1:]:
        spec, wts = compose_kernels(spec, wts, block.convs[name].spec, block.convs[name].weights)
    return spec, wts


def inflate_kernel(k2d, kt: int, bias=None) -> ConvWeights:
    """Turn (c_out, c_in, kh, kw) 2-D kernels into 3-D ones.

    The kernel is repeated ``kt`` times along time and scaled by ``1/kt``, so a
    clip that is constant over time gives the same response as the 2-D kernel
    does on one frame.
    """
    if kt < 1:
        raise ValueError(f"kt must be >= 1, got {kt}")
    k2d = np.asarray(k2d)
    if k2d.ndim != 4:
        raise ShapeError(f"expected (c_out, c_in, kh, kw), got {k2d.shape}")
    k3d = np.repeat(k2d[:, :, None], kt, axis=2) / k2d.dtype.type(kt)
    return ConvWeights(k3d.astype(k2d.dtype), bias)


# ---------------------------------------------------------------------------
# serialization


def save_block(block: Block, directory: str | Path) -> None:
    """Write one ``.t5b`` per weight array plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for key, arr in block.params().items():
        fname = f"{key}.t5b"
        tensor.save_t5b(directory / fname, _as5(arr))
        files[key] = fname
    manifest = {
        "kind": block.kind.value,
        "seed": block.seed,
        "k": block.k,
        "stride": list(block.stride),
        "linear": block.linear,
        "c_in": block.c_in,
        "c_out": block.c_out,
        "mid_channels": block.convs["s"].spec.c_out if "s" in block.convs else None,
        "specs": {n: c.spec.to_dict() for n, c in block.convs.items()},
        "tensors": files,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_block(directory: str | Path) -> Block:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    specs = {n: ConvSpec.from_dict(d) for n, d in manifest["specs"].items()}
    first = next(iter(specs.values()))
    block = make_block(
        manifest["kind"], manifest["c_in"], manifest["c_out"], manifest["k"],
        tuple(manifest["stride"]), manifest["seed"] or 0, bias=first.bias,
        linear=manifest["linear"], padding=first.padding,
        mid_channels=manifest["mid_channels"],
    )
    for name, layer in block.convs.items():
        if layer.spec != specs[name]:
            raise ValueError(f"manifest spec for {name} disagrees with rebuilt block")
        layer.weights.kernels[...] = tensor.load_t5b(directory / manifest["tensors"][f"{name}.w"])
        if layer.spec.bias:
            layer.weights.bias[...] = tensor.load_t5b(directory / manifest["tensors"][f"{name}.b"]).ravel()
    return block


def _as5(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 5:
        return arr
    return arr.reshape((1,) * (5 - arr.ndim) + arr.shape)
