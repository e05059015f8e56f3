"""Declarative residual-network builders with three head kinds, a named
parameter registry, and a bit-exact binary checkpoint format.

Blocks use pre-activation ordering (batch norm and relu before each conv);
depth 18/34 use basic blocks, depth 50 uses bottlenecks.  A width multiplier
scales every stage's channel count for desk-scale runs while preserving the
stage structure and the final spatial map.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DEFAULT_DTYPE, Tensor
from .layers import BatchNorm, Conv2d, Dense, Pool2d, relu
from .swp import SWPLayer, SWPSpec

HEAD_KINDS = ("plain_avgpool_fc", "swp_head", "loc_head")
# localisation outputs: centre-x and centre-y bins, then width and height bins
LOC_HEAD_NODES = (25, 25, 40, 40)

_STAGE_BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3), 50: (3, 4, 6, 3)}
_STAGE_CHANNELS = (64, 128, 256, 512)
_STAGE_STRIDES = (1, 2, 2, 2)


class ModelBuildError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth_variant: int
    num_classes: int
    width_multiplier: float = 1.0
    input_size: int = 224
    head: str = "plain_avgpool_fc"
    pre_activation: bool = True

    def __post_init__(self):
        if self.depth_variant not in _STAGE_BLOCKS:
            raise ModelBuildError(f"depth must be one of {sorted(_STAGE_BLOCKS)}, got {self.depth_variant}")
        if not 0 < self.width_multiplier <= 1:
            raise ModelBuildError(f"width multiplier must lie in (0, 1], got {self.width_multiplier}")
        if self.head not in HEAD_KINDS:
            raise ModelBuildError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if not self.pre_activation:
            raise ModelBuildError("only pre-activation block ordering is supported")
        if self.num_classes < 2 and self.head != "loc_head":
            raise ModelBuildError("classification needs at least 2 classes")
        if self.input_size < 16:
            raise ModelBuildError(f"input size {self.input_size} too small for the stem and four stages")


def _width(channels: int, multiplier: float) -> int:
    return max(1, round(channels * multiplier))


def stage_plan(config: ModelConfig) -> list[tuple[int, int, int]]:
    """(block_count, channels, first-block stride) per stage."""
    counts = _STAGE_BLOCKS[config.depth_variant]
    return [(n, _width(c, config.width_multiplier), s)
            for n, c, s in zip(counts, _STAGE_CHANNELS, _STAGE_STRIDES)]


def feature_map_extent(config: ModelConfig) -> int:
    """Spatial extent of the pre-head feature map (7 for 224 input)."""
    e = (config.input_size + 2 * 3 - 7) // 2 + 1     # stem conv 7x7/2 pad 3
    e = (e - 3) // 2 + 1                             # stem max pool 3x3/2
    for stride in _STAGE_STRIDES:
        e = (e - 1) // stride + 1                    # each stage's first block
    if e < 1:
        raise ModelBuildError(f"input {config.input_size} collapses below 1x1")
    return e


def final_channels(config: ModelConfig) -> int:
    expansion = 4 if config.depth_variant == 50 else 1
    return stage_plan(config)[-1][1] * expansion


def _named(pairs, prefix):
    return [(f"{prefix}.{name}", obj) for name, obj in pairs]


class BasicBlock:
    """Two 3x3 convs with a shortcut; projection 1x1 conv only when the
    shape changes.  The very first block after the stem skips its leading
    bn-relu (the stem already applied one)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, skip_preact: bool,
                 rng: np.random.Generator, dtype):
        self.bn1 = None if skip_preact else BatchNorm(in_ch, dtype=dtype)
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(in_ch, out_ch, 1, stride, 0, bias=False, rng=rng, dtype=dtype)
        self.out_channels = out_ch

    def forward(self, x: Tensor, train: bool) -> Tensor:
        h = x if self.bn1 is None else relu(self.bn1(x, train))
        y = self.conv1(h)
        y = self.conv2(relu(self.bn2(y, train)))
        sc = x if self.shortcut is None else self.shortcut(x)
        return ad.add(y, sc)

    def conv_layers(self):
        convs = [self.conv1, self.conv2]
        if self.shortcut is not None:
            convs.append(self.shortcut)
        return convs

    def _parts(self):
        parts = [] if self.bn1 is None else [("bn1", self.bn1)]
        parts += [("conv1", self.conv1), ("bn2", self.bn2), ("conv2", self.conv2)]
        if self.shortcut is not None:
            parts.append(("shortcut", self.shortcut))
        return parts

    def parameters(self):
        out = []
        for name, part in self._parts():
            out += _named(part.parameters(), name)
        return out

    def buffers(self):
        out = []
        for name, part in self._parts():
            if isinstance(part, BatchNorm):
                out += _named(part.buffers(), name)
        return out


class BottleneckBlock:
    """1x1 reduce (carries the stride), 3x3, 1x1 expand by 4."""

    expansion = 4

    def __init__(self, in_ch: int, mid_ch: int, stride: int, skip_preact: bool,
                 rng: np.random.Generator, dtype):
        out_ch = mid_ch * self.expansion
        self.bn1 = None if skip_preact else BatchNorm(in_ch, dtype=dtype)
        self.conv1 = Conv2d(in_ch, mid_ch, 1, stride, 0, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm(mid_ch, dtype=dtype)
        self.conv2 = Conv2d(mid_ch, mid_ch, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm(mid_ch, dtype=dtype)
        self.conv3 = Conv2d(mid_ch, out_ch, 1, 1, 0, bias=False, rng=rng, dtype=dtype)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(in_ch, out_ch, 1, stride, 0, bias=False, rng=rng, dtype=dtype)
        self.out_channels = out_ch

    def forward(self, x: Tensor, train: bool) -> Tensor:
        h = x if self.bn1 is None else relu(self.bn1(x, train))
        y = self.conv1(h)
        y = self.conv2(relu(self.bn2(y, train)))
        y = self.conv3(relu(self.bn3(y, train)))
        sc = x if self.shortcut is None else self.shortcut(x)
        return ad.add(y, sc)

    def conv_layers(self):
        convs = [self.conv1, self.conv2, self.conv3]
        if self.shortcut is not None:
            convs.append(self.shortcut)
        return convs

    def _parts(self):
        parts = [] if self.bn1 is None else [("bn1", self.bn1)]
        parts += [("conv1", self.conv1), ("bn2", self.bn2), ("conv2", self.conv2),
                  ("bn3", self.bn3), ("conv3", self.conv3)]
        if self.shortcut is not None:
            parts.append(("shortcut", self.shortcut))
        return parts

    parameters = BasicBlock.parameters
    buffers = BasicBlock.buffers


class PlainHead:
    """Global average pool over the final map, then a single classifier."""

    kind = "plain_avgpool_fc"

    def __init__(self, channels: int, map_extent: int, num_classes: int,
                 rng: np.random.Generator, dtype):
        self.pool = Pool2d("average", map_extent, stride=1)
        self.fc = Dense(channels, num_classes, rng=rng, dtype=dtype)
        self.channels = channels

    def forward(self, feats: Tensor, train: bool) -> Tensor:
        pooled = self.pool(feats)
        return self.fc(ad.reshape(pooled, (feats.shape[0], self.channels)))

    def parameters(self):
        return _named(self.fc.parameters(), "fc")

    def buffers(self):
        return []

    def extras(self):
        return {}


class SWPHead:
    """Spatially-weighted pooling, batch norm over the pooled vector, a
    hidden dense layer, then the classifier."""

    kind = "swp_head"

    def __init__(self, channels: int, swp_spec: SWPSpec, fc_nodes: int,
                 num_classes: int, rng: np.random.Generator, dtype):
        self.swp = SWPLayer(swp_spec, dtype=dtype)
        width = swp_spec.num_masks * channels
        self.bn = BatchNorm(width, dtype=dtype)
        self.fc = Dense(width, fc_nodes, rng=rng, dtype=dtype)
        self.classifier = Dense(fc_nodes, num_classes, rng=rng, dtype=dtype)
        self.fc_nodes = fc_nodes

    def forward(self, feats: Tensor, train: bool) -> Tensor:
        pooled = self.swp(feats)
        return self.classifier(self.fc(self.bn(pooled, train)))

    def pooled_vector(self, feats: Tensor) -> Tensor:
        return self.swp(feats)

    def parameters(self):
        return (_named(self.swp.parameters(), "swp") + _named(self.bn.parameters(), "bn")
                + _named(self.fc.parameters(), "fc") + _named(self.classifier.parameters(), "classifier"))

    def buffers(self):
        return _named(self.bn.buffers(), "bn")

    def extras(self):
        s = self.swp.spec
        return {"swp": {"num_masks": s.num_masks, "mask_h": s.mask_h, "mask_w": s.mask_w,
                        "fc_nodes": self.fc_nodes}}


class LocHead:
    """Four parallel classifiers over one shared pooled vector: centre-x
    (25 bins), centre-y (25), width (40), height (40).  With an SWP front
    the shared vector is swp -> bn -> dense instead of the average pool."""

    kind = "loc_head"

    def __init__(self, channels: int, map_extent: int, rng: np.random.Generator, dtype,
                 swp_spec: SWPSpec | None = None, fc_nodes: int = 1024):
        self.channels = channels
        self.swp = self.bn = self.fc = None
        if swp_spec is None:
            self.pool = Pool2d("average", map_extent, stride=1)
            shared = channels
        else:
            self.pool = None
            self.swp = SWPLayer(swp_spec, dtype=dtype)
            width = swp_spec.num_masks * channels
            self.bn = BatchNorm(width, dtype=dtype)
            self.fc = Dense(width, fc_nodes, rng=rng, dtype=dtype)
            shared = fc_nodes
        self.fc_nodes = fc_nodes if swp_spec is not None else None
        self.outputs = [Dense(shared, nodes, rng=rng, dtype=dtype) for nodes in LOC_HEAD_NODES]

    def forward(self, feats: Tensor, train: bool) -> list[Tensor]:
        if self.pool is not None:
            shared = ad.reshape(self.pool(feats), (feats.shape[0], self.channels))
        else:
            shared = self.fc(self.bn(self.swp(feats), train))
        return [out(shared) for out in self.outputs]

    def parameters(self):
        out = []
        if self.swp is not None:
            out += (_named(self.swp.parameters(), "swp") + _named(self.bn.parameters(), "bn")
                    + _named(self.fc.parameters(), "fc"))
        for name, layer in zip(("cx", "cy", "w", "h"), self.outputs):
            out += _named(layer.parameters(), name)
        return out

    def buffers(self):
        return _named(self.bn.buffers(), "bn") if self.bn is not None else []

    def extras(self):
        if self.swp is None:
            return {}
        s = self.swp.spec
        return {"swp": {"num_masks": s.num_masks, "mask_h": s.mask_h, "mask_w": s.mask_w,
                        "fc_nodes": self.fc_nodes}}


class Model:
    """Stem, four residual stages, final bn-relu, and one head."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE,
                 swp_spec: SWPSpec | None = None, fc_nodes: int = 1024):
        self.config = config
        self.dtype = dtype
        self.trained_epochs = 0
        rng = np.random.default_rng(seed)

        stem_ch = _width(64, config.width_multiplier)
        self.stem_conv = Conv2d(3, stem_ch, 7, stride=2, padding=3, bias=False, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm(stem_ch, dtype=dtype)
        self.stem_pool = Pool2d("max", 3, stride=2)

        block_cls = BottleneckBlock if config.depth_variant == 50 else BasicBlock
        self.stages: list[list] = []
        in_ch = stem_ch
        for stage_idx, (count, channels, first_stride) in enumerate(stage_plan(config)):
            blocks = []
            for block_idx in range(count):
                stride = first_stride if block_idx == 0 else 1
                skip = stage_idx == 0 and block_idx == 0
                block = block_cls(in_ch, channels, stride, skip, rng, dtype)
                in_ch = block.out_channels
                blocks.append(block)
            self.stages.append(blocks)

        self.final_bn = BatchNorm(in_ch, dtype=dtype)
        map_extent = feature_map_extent(config)

        if config.head == "plain_avgpool_fc":
            self.head = PlainHead(in_ch, map_extent, config.num_classes, rng, dtype)
        elif config.head == "swp_head":
            spec = swp_spec or SWPSpec(9, map_extent, map_extent)
            _check_mask_extent(spec, map_extent)
            self.head = SWPHead(in_ch, spec, fc_nodes, config.num_classes, rng, dtype)
        else:
            if swp_spec is not None:
                _check_mask_extent(swp_spec, map_extent)
            self.head = LocHead(in_ch, map_extent, rng, dtype, swp_spec=swp_spec, fc_nodes=fc_nodes)

    # -- running the network -------------------------------------------------

    def backbone(self, x: Tensor, train: bool = False) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ad.ShapeMismatch(f"expected [batch, 3, H, W] input, got {x.shape}")
        if x.shape[2] != self.config.input_size or x.shape[3] != self.config.input_size:
            raise ad.ShapeMismatch(f"input spatial {x.shape[2]}x{x.shape[3]} != "
                                   f"configured {self.config.input_size}")
        y = self.stem_pool(relu(self.stem_bn(self.stem_conv(x), train)))
        for blocks in self.stages:
            for block in blocks:
                y = block.forward(y, train)
        return relu(self.final_bn(y, train))

    def forward(self, x: Tensor, train: bool = False):
        return self.head.forward(self.backbone(x, train), train)

    def swp_vector(self, x: Tensor) -> Tensor:
        """Raw spatially-weighted pooling output, for heatmap export."""
        if not isinstance(self.head, SWPHead):
            raise ModelBuildError("model has no spatially-weighted pooling head")
        return self.head.pooled_vector(self.backbone(x, train=False))

    # -- registry -------------------------------------------------------------

    def _components(self):
        parts = [("stem.conv", self.stem_conv), ("stem.bn", self.stem_bn)]
        for i, blocks in enumerate(self.stages):
            for j, block in enumerate(blocks):
                parts.append((f"stages.{i}.blocks.{j}", block))
        parts.append(("final_bn", self.final_bn))
        parts.append(("head", self.head))
        return parts

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, part in self._components():
            out += _named(part.parameters(), prefix) if hasattr(part, "parameters") else []
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for prefix, part in self._components():
            if hasattr(part, "buffers"):
                out += _named(part.buffers(), prefix)
        return out

    def batchnorms(self) -> list[BatchNorm]:
        states = [self.stem_bn]
        for blocks in self.stages:
            for block in blocks:
                states += [part for _, part in block._parts() if isinstance(part, BatchNorm)]
        states.append(self.final_bn)
        head_bn = getattr(self.head, "bn", None)
        if head_bn is not None:
            states.append(head_bn)
        return states

    def all_blocks(self):
        return [block for blocks in self.stages for block in blocks]


def _check_mask_extent(spec: SWPSpec, map_extent: int) -> None:
    if (spec.mask_h, spec.mask_w) != (map_extent, map_extent):
        raise ModelBuildError(f"masks {spec.mask_h}x{spec.mask_w} do not match the "
                              f"{map_extent}x{map_extent} feature map")


def build_model(config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE,
                swp_spec: SWPSpec | None = None, fc_nodes: int = 1024) -> Model:
    return Model(config, seed=seed, dtype=dtype, swp_spec=swp_spec, fc_nodes=fc_nodes)


def build_localisation_model(config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE,
                             swp_spec: SWPSpec | None = None, fc_nodes: int = 1024) -> Model:
    if config.head != "loc_head":
        raise ModelBuildError(f"localisation model needs head='loc_head', got {config.head!r}")
    return Model(config, seed=seed, dtype=dtype, swp_spec=swp_spec, fc_nodes=fc_nodes)


def attach_swp_head(model: Model, swp_spec: SWPSpec, fc_nodes: int = 1024, seed: int = 0) -> Model:
    """Replace a plain average-pool head with swp -> bn -> dense -> classifier,
    keeping every backbone parameter."""
    if model.config.head != "plain_avgpool_fc":
        raise ModelBuildError(f"can only attach to a plain head, model has {model.config.head!r}")
    map_extent = feature_map_extent(model.config)
    _check_mask_extent(swp_spec, map_extent)
    channels = model.head.channels
    rng = np.random.default_rng(seed)
    model.head = SWPHead(channels, swp_spec, fc_nodes, model.config.num_classes, rng, model.dtype)
    model.config = dataclasses.replace(model.config, head="swp_head")
    return model


def param_count(model: Model) -> int:
    """Learnable scalars only; batch-norm running statistics are excluded."""
    return sum(t.size for _, t in model.parameters())


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config echo, named little-endian
# float32 arrays in registry order (parameters, then buffers)
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SWPNETC1"
CHECKPOINT_VERSION = 1


def _config_echo(model: Model) -> dict:
    cfg = model.config
    return {
        "depth_variant": cfg.depth_variant,
        "num_classes": cfg.num_classes,
        "width_multiplier": cfg.width_multiplier,
        "input_size": cfg.input_size,
        "head": cfg.head,
        "pre_activation": cfg.pre_activation,
        "head_extras": model.head.extras(),
        "trained_epochs": model.trained_epochs,
    }


def _write_array(f, name: str, data: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", data.ndim))
    for extent in data.shape:
        f.write(struct.pack("<I", extent))
    f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def save_checkpoint(model: Model, path) -> None:
    if model.dtype != np.float32:
        raise CheckpointError("checkpoints store float32 models only")
    params = model.parameters()
    buffers = model.buffers()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    echo = json.dumps(_config_echo(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(echo)))
    buf.write(echo)
    buf.write(struct.pack("<I", len(params)))
    for name, tensor in params:
        _write_array(buf, name, tensor.data)
    buf.write(struct.pack("<I", len(buffers)))
    for name, data in buffers:
        _write_array(buf, name, data)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def _read_array(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.take(r.u16()).decode("utf-8")
    shape = tuple(r.u32() for _ in range(r.u8()))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(r.take(count * 4), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes: not a swpnet checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    echo = json.loads(r.take(r.u32()).decode("utf-8"))

    config = ModelConfig(depth_variant=echo["depth_variant"], num_classes=echo["num_classes"],
                         width_multiplier=echo["width_multiplier"], input_size=echo["input_size"],
                         head=echo["head"], pre_activation=echo["pre_activation"])
    extras = echo.get("head_extras", {})
    swp_spec = None
    fc_nodes = 1024
    if "swp" in extras:
        s = extras["swp"]
        swp_spec = SWPSpec(s["num_masks"], s["mask_h"], s["mask_w"])
        fc_nodes = s["fc_nodes"]
    model = Model(config, seed=0, swp_spec=swp_spec, fc_nodes=fc_nodes)
    model.trained_epochs = echo.get("trained_epochs", 0)

    stored_params = [_read_array(r) for _ in range(r.u32())]
    stored_buffers = [_read_array(r) for _ in range(r.u32())]
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after checkpoint payload")

    def apply(stored, expected, setter):
        if len(stored) != len(expected):
            raise CheckpointError(f"array count mismatch: {len(stored)} stored, {len(expected)} expected")
        by_name = dict(stored)
        for name, target in expected:
            if name not in by_name:
                raise CheckpointError(f"missing array {name!r}")
            data = by_name[name]
            tshape = target.shape if isinstance(target, np.ndarray) else target.data.shape
            if data.shape != tshape:
                raise CheckpointError(f"shape mismatch for {name!r}: {data.shape} vs {tshape}")
            setter(name, target, data)

    apply(stored_params, model.parameters(), lambda n, t, d: t.data.__setitem__(Ellipsis, d))
    apply(stored_buffers, model.buffers(), lambda n, t, d: t.__setitem__(Ellipsis, d))
    return model
