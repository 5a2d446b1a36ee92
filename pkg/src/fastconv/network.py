"""Classification networks assembled from blocks, plus parameter/FLOP accounting.

A network is ``stem conv -> stages of units -> global average pool -> linear``.
Each unit wraps one block. Two optional extras turn a unit into a ResNet-style
basic unit: a trailing spatial ``1 x k x k`` conv (``post_spatial``) and an
identity skip around the whole unit (``residual``, with a ``1x1x1`` projection
when channels or stride change).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fastconv import tensor
from fastconv.blocks import Block, BlockCache, BlockKind, block_backward, block_forward, make_block
from fastconv.conv import ConvSpec, ConvWeights, Padding, conv3d_backward, conv3d_forward, conv3d_forward_cached, init_weights
from fastconv.tensor import ShapeError

BYTES_PER_VALUE = 4


@dataclass
class NetConfig:
    block_kind: BlockKind
    stage_widths: list[int]
    blocks_per_stage: list[int]
    input_shape: tuple[int, int, int, int, int]
    num_classes: int
    stem: ConvSpec
    # stride of the first unit in each stage, (st, sh, sw)
    stage_strides: list[tuple[int, int, int]]
    residual: bool = False
    post_spatial: bool = False
    k: int = 3
    bias: bool = True
    mid_channels: int | None = None
    init: str = "he"

    def __post_init__(self):
        if isinstance(self.block_kind, str):
            self.block_kind = BlockKind.parse(self.block_kind)
        if isinstance(self.stem, dict):
            self.stem = ConvSpec.from_dict(self.stem)
        self.input_shape = tensor.check_shape(self.input_shape)
        self.stage_strides = [tuple(int(v) for v in s) for s in self.stage_strides]
        self.stage_widths = [int(w) for w in self.stage_widths]
        self.blocks_per_stage = [int(b) for b in self.blocks_per_stage]
        self.validate()

    def validate(self) -> None:
        n = len(self.stage_widths)
        if not n or len(self.blocks_per_stage) != n or len(self.stage_strides) != n:
            raise ValueError("stage_widths, blocks_per_stage and stage_strides must have equal nonzero length")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError(f"every stage needs at least one block, got {self.blocks_per_stage}")
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ValueError(f"stage widths must be nondecreasing, got {self.stage_widths}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.stem.c_in != self.input_shape[1]:
            raise ValueError(f"stem expects {self.stem.c_in} channels, input has {self.input_shape[1]}")

    def replace(self, **changes) -> "NetConfig":
        d = self.to_dict()
        d.update({k: (v.value if isinstance(v, BlockKind) else v) for k, v in changes.items()})
        return NetConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_kind"] = self.block_kind.value
        d["stem"] = self.stem.to_dict()
        d["input_shape"] = list(self.input_shape)
        d["stage_strides"] = [list(s) for s in self.stage_strides]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        if isinstance(d.get("stem"), ConvSpec):
            d["stem"] = d["stem"].to_dict()
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "NetConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def tiny_config(kind: BlockKind | str = BlockKind.FAST, num_classes: int = 4,
                input_shape=(1, 3, 8, 32, 32)) -> NetConfig:
    """Two stages of one block each; small enough to train on a laptop CPU."""
    return NetConfig(
        block_kind=kind,
        stage_widths=[16, 32],
        blocks_per_stage=[1, 1],
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        stem=ConvSpec((3, 7, 7), input_shape[1], 16, (1, 2, 2)),
        stage_strides=[(1, 1, 1), (2, 2, 2)],
    )


def resnet34_config(kind: BlockKind | str = BlockKind.CONV3D, num_classes: int = 101,
                    input_shape=(1, 3, 24, 224, 224)) -> NetConfig:
    """ResNet-34 layout with the first conv of every basic unit swapped for a block.

    Stages (3, 4, 6, 3) of widths (64, 128, 256, 512); stem 3x7x7 with spatial
    stride 2; spatial stride 2 entering stages 2-4 and temporal stride 2
    entering stages 3 and 4; 1x1x1 projections on the skip where shapes change.
    """
    return NetConfig(
        block_kind=kind,
        stage_widths=[64, 128, 256, 512],
        blocks_per_stage=[3, 4, 6, 3],
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        stem=ConvSpec((3, 7, 7), input_shape[1], 64, (1, 2, 2), bias=False),
        stage_strides=[(1, 1, 1), (1, 2, 2), (2, 2, 2), (2, 2, 2)],
        residual=True,
        post_spatial=True,
        bias=False,
    )


PRESETS = {"tiny": tiny_config, "resnet34": resnet34_config}


@dataclass
class Unit:
    block: Block
    post: tuple[ConvSpec, ConvWeights] | None = None
    proj: tuple[ConvSpec, ConvWeights] | None = None
    residual: bool = False


@dataclass
class Network:
    config: NetConfig
    stem: tuple[ConvSpec, ConvWeights]
    units: list[Unit]
    head_w: np.ndarray  # (num_classes, width)
    head_b: np.ndarray
    seed: int = 0
    unit_names: list[str] = field(default_factory=list)

    def params(self) -> dict[str, np.ndarray]:
        """Every trainable array by name, in a fixed order."""
        out = {"stem.w": self.stem[1].kernels}
        if self.stem[0].bias:
            out["stem.b"] = self.stem[1].bias
        for uname, unit in zip(self.unit_names, self.units):
            for key, arr in unit.block.params().items():
                out[f"{uname}.{key}"] = arr
            for tag, part in (("post", unit.post), ("proj", unit.proj)):
                if part is None:
                    continue
                out[f"{uname}.{tag}.w"] = part[1].kernels
                if part[0].bias:
                    out[f"{uname}.{tag}.b"] = part[1].bias
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def conv_specs(self) -> list[ConvSpec]:
        specs = [self.stem[0]]
        for unit in self.units:
            specs.extend(layer.spec for layer in unit.block.convs.values())
            specs.extend(part[0] for part in (unit.post, unit.proj) if part is not None)
        return specs

    def astype(self, dtype) -> "Network":
        def cast(part):
            return None if part is None else (part[0], part[1].astype(dtype))

        units = [Unit(u.block.astype(dtype), cast(u.post), cast(u.proj), u.residual) for u in self.units]
        return Network(self.config, cast(self.stem), units, self.head_w.astype(dtype),
                       self.head_b.astype(dtype), self.seed, list(self.unit_names))


def build_network(cfg: NetConfig, seed: int = 0) -> Network:
    seeds = np.random.SeedSequence(seed).spawn(2 + sum(cfg.blocks_per_stage))
    stem_rng = np.random.default_rng(seeds[0])
    stem = (cfg.stem, init_weights(cfg.stem, stem_rng, scheme=cfg.init))
    shape = cfg.stem.output_shape(cfg.input_shape)
    units, names = [], []
    c = cfg.stem.c_out
    i = 1
    for si, (width, count, stride) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage, cfg.stage_strides)):
        for ui in range(count):
            s = stride if ui == 0 else (1, 1, 1)
            unit_seed = int(seeds[i].generate_state(1)[0])
            i += 1
            block = make_block(cfg.block_kind, c, width, cfg.k, s, unit_seed, bias=cfg.bias,
                               mid_channels=cfg.mid_channels, init=cfg.init)
            rng = np.random.default_rng(unit_seed + 1)
            post = proj = None
            if cfg.post_spatial:
                spec = ConvSpec((1, cfg.k, cfg.k), width, width, bias=cfg.bias)
                post = (spec, init_weights(spec, rng, scheme=cfg.init))
            if cfg.residual and (c != width or s != (1, 1, 1)):
                spec = ConvSpec((1, 1, 1), c, width, s, bias=cfg.bias)
                proj = (spec, init_weights(spec, rng, scheme=cfg.init))
            units.append(Unit(block, post, proj, cfg.residual))
            names.append(f"s{si}.u{ui}")
            shape = block.output_shape(shape)
            c = width
    if min(shape[2:]) < 1:
        raise ShapeError(f"activation collapsed to {shape} before the head")
    head_rng = np.random.default_rng(seeds[-1])
    limit = np.sqrt(6.0 / c) if cfg.init == "he" else np.sqrt(6.0 / (c + cfg.num_classes))
    head_w = head_rng.uniform(-limit, limit, (cfg.num_classes, c)).astype(np.float32)
    head_b = np.zeros(cfg.num_classes, dtype=np.float32)
    return Network(cfg, stem, units, head_w, head_b, seed, names)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class NetCache:
    net_id: int
    x: np.ndarray
    stem_cols: np.ndarray
    stem_mask: np.ndarray
    units: list
    pooled: np.ndarray
    feat_shape: tuple


def net_forward(net: Network, x) -> tuple[np.ndarray, NetCache]:
    """Logits of shape (n, num_classes) and the cache for :func:`net_backward`."""
    x = tensor.as_tensor(x)
    expect = net.config.input_shape[1:]
    if x.shape[1:] != expect:
        raise ShapeError(f"input {x.shape} does not match configured (*, {', '.join(map(str, expect))})")
    spec, wts = net.stem
    pre, stem_cols = conv3d_forward_cached(x, spec, wts)
    stem_mask = pre > 0
    h = tensor.relu(pre)
    unit_caches = []
    for unit in net.units:
        u_in = h
        h, bcache = block_forward(unit.block, h)
        post_cache = None
        if unit.post is not None:
            p_in = h
            pre, cols = conv3d_forward_cached(p_in, *unit.post)
            h = tensor.relu(pre)
            post_cache = (p_in, cols, pre > 0)
        if unit.residual:
            skip = u_in if unit.proj is None else conv3d_forward(u_in, *unit.proj)
            h = tensor.add(h, skip)
        unit_caches.append((u_in, bcache, post_cache))
    pooled = h.mean(axis=(2, 3, 4), dtype=np.float64).astype(h.dtype)
    logits = pooled @ net.head_w.T + net.head_b
    return logits, NetCache(id(net), x, stem_cols, stem_mask, unit_caches, pooled, h.shape)


def net_backward(
    net: Network, cache: NetCache, grad_logits, input_grad: bool = True
) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
    """Weight gradients keyed like :meth:`Network.params`, plus the input gradient.

    Training has no use for the input gradient; ``input_grad=False`` skips it.
    """
    if cache is None or cache.net_id != id(net):
        raise ValueError("stale or missing forward cache for this network")
    g_logits = np.asarray(grad_logits, dtype=net.head_w.dtype)
    grads: dict[str, np.ndarray] = {}
    grads["head.w"] = g_logits.T @ cache.pooled
    grads["head.b"] = g_logits.sum(axis=0)
    g_pool = g_logits @ net.head_w
    n, c, t, h, w = cache.feat_shape
    g = np.broadcast_to((g_pool / (t * h * w))[:, :, None, None, None], cache.feat_shape)
    g = np.ascontiguousarray(g)
    for uname, unit, (u_in, bcache, post_cache) in reversed(list(zip(net.unit_names, net.units, cache.units))):
        g_skip = None
        if unit.residual:
            if unit.proj is None:
                g_skip = g
            else:
                g_skip, gw = conv3d_backward(u_in, unit.proj[0], unit.proj[1], g)
                _put(grads, f"{uname}.proj", unit.proj[0], gw)
        if unit.post is not None:
            p_in, cols, mask = post_cache
            g, gw = conv3d_backward(p_in, unit.post[0], unit.post[1], g * mask, cols)
            _put(grads, f"{uname}.post", unit.post[0], gw)
        g, bgrads = block_backward(unit.block, bcache, g)
        for key, arr in bgrads.items():
            grads[f"{uname}.{key}"] = arr
        if g_skip is not None:
            g = g + g_skip
    g = g * cache.stem_mask
    gx, gw = conv3d_backward(cache.x, net.stem[0], net.stem[1], g, cache.stem_cols, input_grad)
    _put(grads, "stem", net.stem[0], gw)
    return gx, {k: grads[k] for k in net.params()}


def _put(grads: dict, prefix: str, spec: ConvSpec, gw: ConvWeights) -> None:
    grads[f"{prefix}.w"] = gw.kernels
    if spec.bias:
        grads[f"{prefix}.b"] = gw.bias


# ---------------------------------------------------------------------------
# accounting


@dataclass
class AccountingReport:
    total_params: int
    depth: int
    flops_per_clip: int
    activation_bytes_per_clip: int
    conv_layers: int
    fc_layers: int
    block_params: int
    stem_params: int
    head_params: int

    def to_dict(self) -> dict:
        return asdict(self)


def accounting(net: Network) -> AccountingReport:
    """Parameter, depth, FLOP and activation-memory totals for one clip.

    Depth counts weight-bearing layers (every conv, projections included, plus
    the linear head). FLOPs count the convolutions only, two per
    multiply-accumulate. Activation bytes are four bytes per value for every
    conv output, the pooled vector and the logits, doubled for the gradient
    buffers of the backward pass.
    """
    cfg = net.config
    shape = (1, *cfg.input_shape[1:])
    flops = 0
    act = 0

    def run(spec: ConvSpec, in_shape):
        nonlocal flops, act
        out = spec.output_shape(in_shape)
        flops += spec.flops(in_shape)
        act += int(np.prod(out))
        return out

    shape = run(net.stem[0], shape)
    block_params = 0
    for unit in net.units:
        u_in = shape
        for seg in unit.block.segments:
            seg_in = shape
            outs = []
            for branch in seg.branches:
                s = seg_in
                for name in branch:
                    s = run(unit.block.convs[name].spec, s)
                outs.append(s)
            if seg.skip:
                idx = unit.block.segments.index(seg)
                proj = unit.block.projections.get(idx)
                if proj is not None:
                    run(unit.block.convs[proj].spec, seg_in)
            shape = outs[0]
        block_params += unit.block.param_count()
        if unit.post is not None:
            shape = run(unit.post[0], shape)
            block_params += unit.post[0].param_count
        if unit.proj is not None:
            run(unit.proj[0], u_in)
            block_params += unit.proj[0].param_count
    act += shape[1] + cfg.num_classes
    specs = net.conv_specs()
    stem_params = net.stem[0].param_count
    head_params = int(net.head_w.size + net.head_b.size)
    return AccountingReport(
        total_params=stem_params + block_params + head_params,
        depth=len(specs) + 1,
        flops_per_clip=int(flops),
        activation_bytes_per_clip=BYTES_PER_VALUE * act * 2,
        conv_layers=len(specs),
        fc_layers=1,
        block_params=block_params,
        stem_params=stem_params,
        head_params=head_params,
    )


def activation_shapes(net: Network) -> list[tuple[int, ...]]:
    """Shape after the stem and after every unit, for a batch of one."""
    shape = net.stem[0].output_shape((1, *net.config.input_shape[1:]))
    shapes = [shape]
    for unit in net.units:
        shape = unit.block.output_shape(shape)
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# serialization


def save_network(net: Network, directory: str | Path) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for key, arr in net.params().items():
        fname = f"{key}.t5b"
        tensor.save_t5b(directory / fname, arr.reshape((1,) * (5 - arr.ndim) + arr.shape))
        files[key] = fname
    manifest = {"config": net.config.to_dict(), "seed": net.seed, "tensors": files}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_network(directory: str | Path) -> Network:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    net = build_network(NetConfig.from_dict(manifest["config"]), manifest["seed"])
    for key, arr in net.params().items():
        arr[...] = tensor.load_t5b(directory / manifest["tensors"][key]).reshape(arr.shape)
    return net
