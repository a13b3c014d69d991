"""UPANets building blocks and the full model.

Channel pixel attention (CPA) mixes all channels at each pixel through a
learned matrix; spatial pixel attention (SPA) is a learned global pooling
over pixel positions. UPA blocks run an inverted-triangle pair of 3x3
convolutions in parallel with CPA; UPA layers chain blocks densely, carrying
the layer input forward by concatenation; the extreme connection flattens a
pooled summary of every layer straight into the classifier.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, _fan_in_uniform
from .tensor import Tensor

EXC_MODES = ("final_gap", "final_spa", "exc_gap", "exc_spa", "exc_spa_and_gap")
MODEL_PRESETS = {"upa16": 16, "upa32": 32, "upa64": 64}


# ---------------------------------------------------------------------------
# attention layers


class CpaLayer(Module):
    """Per-pixel channel mixer: weight [Cin, Cout], bias [Cout], then
    batch norm, optional residual, optional 2x2 downsample, layer norm."""

    def __init__(self, cin, cout, out_spatial, rng, downsample=False, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.downsample = downsample
        h, w = out_spatial
        self.weight = Tensor(_fan_in_uniform(rng, (cin, cout), cin, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.ln = LayerNorm((cout, h, w), dtype=dtype)


def cpa_attention(x, layer):
    """The bare attention map: every output pixel is a weighted sum of the
    input channels at the same position, before any normalization."""
    if x.ndim != 4 or x.shape[1] != layer.cin:
        raise DimensionError(f"cpa expects {layer.cin} input channels, got shape {x.shape}")
    n, c, h, w = x.shape
    flat = T.reshape(T.transpose(x, (0, 2, 3, 1)), (n, h * w, c))
    mixed = T.add(T.matmul(flat, layer.weight), layer.bias)
    return T.transpose(T.reshape(mixed, (n, h, w, layer.cout)), (0, 3, 1, 2))


def cpa_forward(x, layer, mode):
    """attention -> batch norm -> (pool both branches) -> residual -> layer norm."""
    y = layer.bn(cpa_attention(x, layer), mode)
    residual = x
    if layer.downsample:
        y = T.avgpool2d(y, 2, 2)
        if layer.cin == layer.cout:
            residual = T.avgpool2d(x, 2, 2)
    if layer.cin == layer.cout:
        y = T.add(y, residual)
    return layer.ln(y)


class SpaLayer(Module):
    """Learned pooling: one weight per pixel position, shared across
    channels, plus one scalar bias. Initialized to exactly reproduce
    global average pooling."""

    def __init__(self, spatial_len, use_bias=True, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.spatial_len = spatial_len
        self.use_bias = use_bias
        self.weight = Tensor(np.full(spatial_len, 1.0 / spatial_len, dtype=dtype), requires_grad=True)
        if use_bias:
            self.bias = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)


def spa_forward(x, layer):
    """Reduce each channel's map to one value via the learned weights."""
    if x.ndim != 4:
        raise DimensionError(f"spa expects N,C,H,W input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h * w != layer.spatial_len:
        raise DimensionError(f"spa weights cover {layer.spatial_len} positions, input map has {h * w}")
    flat = T.reshape(x, (n, c, h * w))
    pooled = T.reshape(T.matmul(flat, T.reshape(layer.weight, (layer.spatial_len, 1))), (n, c))
    if layer.use_bias:
        pooled = T.add(pooled, layer.bias)
    return pooled


def gap(x):
    """Global average pooling to [N, C]."""
    return T.spatial_mean(x)


def channel_shuffle(x, groups):
    """Interleave channels across groups (transpose group/channel indices)."""
    n, c, h, w = x.shape
    if c % groups:
        raise ConfigError(f"channel_shuffle groups={groups} must divide {c} channels")
    folded = T.reshape(x, (n, groups, c // groups, h, w))
    return T.reshape(T.transpose(folded, (0, 2, 1, 3, 4)), (n, c, h, w))


# ---------------------------------------------------------------------------
# blocks and layers


@dataclass
class UpaBlockConfig:
    in_channels: int
    out_channels: int
    stride: int = 1
    use_cpa: bool = True
    groups: int = 1
    shuffle: bool = False

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"block stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("block channel counts must be positive")


class UpaBlock(Module):
    """conv3x3(in -> 2*out) -> bn -> relu -> [shuffle] -> conv3x3 -> bn,
    added to a parallel CPA path, then layer-normalized. Stride-2 blocks
    average-pool both paths before the add."""

    def __init__(self, cfg: UpaBlockConfig, spatial, rng, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        h, w = spatial
        ho, wo = h // cfg.stride, w // cfg.stride
        wide = 2 * cfg.out_channels
        self.conv1 = Conv2d(cfg.in_channels, wide, 3, rng, pad=1, groups=cfg.groups, dtype=dtype)
        self.bn1 = BatchNorm2d(wide, dtype=dtype)
        self.conv2 = Conv2d(wide, cfg.out_channels, 3, rng, pad=1, dtype=dtype)
        self.bn2 = BatchNorm2d(cfg.out_channels, dtype=dtype)
        if cfg.use_cpa:
            self.cpa = CpaLayer(cfg.in_channels, cfg.out_channels, (ho, wo), rng,
                                downsample=(cfg.stride == 2), dtype=dtype)
        else:
            self.cpa = None
        self.ln = LayerNorm((cfg.out_channels, ho, wo), dtype=dtype)

    def forward_parts(self, x, mode):
        """Returns (block output, conv-path output, attention-path output);
        the two paths are the addends feeding the block layer norm."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"block expects {cfg.in_channels} channels, got shape {x.shape}")
        c = T.relu(self.bn1(self.conv1(x), mode))
        if cfg.shuffle and cfg.groups > 1:
            c = channel_shuffle(c, cfg.groups)
        c = self.bn2(self.conv2(c), mode)
        if cfg.stride == 2:
            c = T.avgpool2d(c, 2, 2)
        a = cpa_forward(x, self.cpa, mode) if self.cpa is not None else None
        out = self.ln(T.add(c, a) if a is not None else c)
        return out, c, a

    def forward(self, x, mode):
        return self.forward_parts(x, mode)[0]

    __call__ = forward


def upa_block_forward(x, block: UpaBlock, mode):
    return block.forward(x, mode)


@dataclass
class UpaLayerPlan:
    """Width bookkeeping for one densely-connected layer."""

    in_width: int
    blocks: int
    growth: int
    downsample_first: bool = False

    @property
    def out_width(self):
        return 2 * self.in_width


def plan_layer(in_width, blocks, downsample_first=False, name="layer"):
    """Split a layer's input width across its blocks; width doubles overall."""
    if blocks < 1:
        raise ConfigError(f"{name}: block count must be >= 1, got {blocks}")
    if in_width % blocks:
        raise ConfigError(f"{name}: in_width {in_width} is not divisible by {blocks} blocks")
    return UpaLayerPlan(in_width=in_width, blocks=blocks, growth=in_width // blocks,
                        downsample_first=downsample_first)


class UpaLayer(Module):
    """Dense chain of UPA blocks. Block 0 sees the layer input (stride 2 when
    the layer downsamples, with the carry average-pooled alongside); each
    output is the running concatenation of everything produced so far."""

    def __init__(self, plan: UpaLayerPlan, spatial, block_cfg_fn, rng, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.plan = plan
        self.blocks = []
        h, w = spatial
        width = plan.in_width
        for i in range(plan.blocks):
            stride = 2 if (i == 0 and plan.downsample_first) else 1
            cfg = block_cfg_fn(i, width, plan.growth, stride)
            blk = UpaBlock(cfg, (h, w), rng, dtype=dtype)
            self.add_child(f"block{i}", blk)
            self.blocks.append(blk)
            if stride == 2:
                h, w = h // 2, w // 2
            width += plan.growth
        self.out_spatial = (h, w)

    def forward(self, x, mode):
        plan = self.plan
        if x.ndim != 4 or x.shape[1] != plan.in_width:
            raise DimensionError(f"block 0: layer expects {plan.in_width} channels, got shape {x.shape}")
        carry = T.avgpool2d(x, 2, 2) if plan.downsample_first else x
        out = T.concat_channels([carry, self.blocks[0](x, mode)])
        for i, blk in enumerate(self.blocks[1:], start=1):
            if out.shape[1] != blk.cfg.in_channels:
                raise DimensionError(f"block {i}: expects {blk.cfg.in_channels} channels, "
                                     f"running tensor has {out.shape[1]}")
            out = T.concat_channels([out, blk(out, mode)])
        return out

    __call__ = forward


def upa_layer_forward(x, layer: UpaLayer, mode):
    return layer.forward(x, mode)


# ---------------------------------------------------------------------------
# extreme connection


class ExConnect(Module):
    """Pooled summaries of every tap, flatten-concatenated in network order.

    The combined mode layer-normalizes the SPA and GAP vectors separately
    (bringing both to the same scale) and adds them; the single-pooling
    modes concatenate the raw pooled vectors.
    """

    def __init__(self, taps, mode, dtype=T.DEFAULT_DTYPE, spa_bias=True):
        super().__init__()
        if mode not in EXC_MODES:
            raise ConfigError(f"unknown exc_mode {mode!r}, expected one of {EXC_MODES}")
        self.mode = mode
        self.taps = [(name, channels, h * w) for name, channels, (h, w) in taps]
        used = self.taps if mode.startswith("exc") else self.taps[-1:]
        self.used_taps = used
        self.feature_len = sum(c for _, c, _ in used)
        for i, (name, channels, length) in enumerate(used):
            if mode in ("final_spa", "exc_spa", "exc_spa_and_gap"):
                self.add_child(f"spa{i}", SpaLayer(length, use_bias=spa_bias, dtype=dtype))
            if mode == "exc_spa_and_gap":
                self.add_child(f"ln_spa{i}", LayerNorm((channels,), dtype=dtype))
                self.add_child(f"ln_gap{i}", LayerNorm((channels,), dtype=dtype))

    def forward(self, taps):
        if len(taps) != len(self.taps):
            raise ConfigError(f"expected {len(self.taps)} taps, got {len(taps)}")
        for t, (name, channels, _) in zip(taps, self.taps):
            if t.shape[1] != channels:
                raise ConfigError(f"tap {name} expects {channels} channels, got {t.shape[1]}")
        used = taps if self.mode.startswith("exc") else taps[-1:]
        vectors = []
        for i, t in enumerate(used):
            if self.mode in ("final_gap", "exc_gap"):
                v = gap(t)
            elif self.mode in ("final_spa", "exc_spa"):
                v = spa_forward(t, self._children[f"spa{i}"])
            else:
                v = T.add(self._children[f"ln_spa{i}"](spa_forward(t, self._children[f"spa{i}"])),
                          self._children[f"ln_gap{i}"](gap(t)))
            vectors.append(v)
        if len(vectors) == 1:
            return vectors[0]
        n = vectors[0].shape[0]
        stacked = T.concat_channels([T.reshape(v, (n, v.shape[1], 1, 1)) for v in vectors])
        return T.reshape(stacked, (n, self.feature_len))

    __call__ = forward


def exconnect_forward(taps, exc: ExConnect):
    return exc.forward(taps)


# ---------------------------------------------------------------------------
# model


@dataclass
class AblationSpec:
    use_cpa: bool = True
    groups: int = 1
    shuffle: bool = False


@dataclass
class UpaNetsConfig:
    """Architecture plan: base width F, depth multiplier d, and ablations."""

    f: int = 16
    depth: int = 1
    classes: int = 10
    image_size: int = 32
    exc_mode: str = "exc_spa_and_gap"
    spa_bias: bool = True
    ablation: AblationSpec = field(default_factory=AblationSpec)
    overrides: dict = field(default_factory=dict)  # block path -> AblationSpec

    def __post_init__(self):
        if self.f < 1 or self.depth < 1:
            raise ConfigError(f"need f >= 1 and depth >= 1, got f={self.f} d={self.depth}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.exc_mode not in EXC_MODES:
            raise ConfigError(f"unknown exc_mode {self.exc_mode!r}, expected one of {EXC_MODES}")
        if self.image_size % 8:
            raise ConfigError(f"image_size must be divisible by 8, got {self.image_size}")


class UpaNets(Module):
    """Root block, four densely-connected layers doubling in width, extreme
    connection over the five taps, linear classifier."""

    def __init__(self, cfg: UpaNetsConfig, seed=0, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        f, d, s = cfg.f, cfg.depth, cfg.image_size

        def block_cfg(path, in_c, out_c, stride):
            ab = cfg.overrides.get(path, cfg.ablation)
            groups = ab.groups
            if in_c % groups or (2 * out_c) % groups:
                groups = 1  # root (3 channels) and any indivisible width stay ungrouped
            return UpaBlockConfig(in_c, out_c, stride=stride, use_cpa=ab.use_cpa,
                                  groups=groups, shuffle=ab.shuffle)

        self.root = UpaBlock(block_cfg("root", 3, f, 1), (s, s), rng, dtype=dtype)
        self.layers = []
        widths = [f, 2 * f, 4 * f, 8 * f]
        spatial = (s, s)
        for li, width in enumerate(widths, start=1):
            plan = plan_layer(width, 4 * d, downsample_first=(li > 1), name=f"layer{li}")
            fn = (lambda li: lambda i, in_c, out_c, stride:
                  block_cfg(f"layer{li}.block{i}", in_c, out_c, stride))(li)
            layer = UpaLayer(plan, spatial, fn, rng, dtype=dtype)
            self.add_child(f"layer{li}", layer)
            self.layers.append(layer)
            spatial = layer.out_spatial
        tap_specs = [("root", f, (s, s)),
                     ("layer1", 2 * f, (s, s)),
                     ("layer2", 4 * f, (s // 2, s // 2)),
                     ("layer3", 8 * f, (s // 4, s // 4)),
                     ("layer4", 16 * f, (s // 8, s // 8))]
        self.tap_specs = tap_specs
        self.exc = ExConnect(tap_specs, cfg.exc_mode, dtype=dtype, spa_bias=cfg.spa_bias)
        self.head = Linear(self.exc.feature_len, cfg.classes, rng, dtype=dtype)

    def forward(self, x, mode="train", want_taps=False):
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"model expects N,3,H,W input, got shape {x.shape}")
        taps = [self.root(x, mode)]
        for layer in self.layers:
            taps.append(layer(taps[-1], mode))
        logits = self.head(self.exc(taps))
        return (logits, taps) if want_taps else logits

    __call__ = forward

    def block_paths(self):
        paths = ["root"]
        for li, layer in enumerate(self.layers, start=1):
            paths += [f"layer{li}.block{i}" for i in range(len(layer.blocks))]
        return paths

    def get_block(self, path):
        if path == "root":
            return self.root
        if "." in path:
            layer_name, block_name = path.split(".", 1)
            layer = self._children.get(layer_name)
            if isinstance(layer, UpaLayer) and block_name in layer._children:
                return layer._children[block_name]
        raise ConfigError(f"unknown block path {path!r}; valid taps: {', '.join(self.block_paths())}")

    def inspect_block(self, x, path, mode="eval"):
        """Run forward up to one block and return its pre-combine pieces:
        {"conv": conv-path output, "cpa": attention output (None without
        CPA), "sum": their sum before the block layer norm}."""
        self.get_block(path)  # validates the path early
        def pack(c, a):
            return {"conv": c, "cpa": a, "sum": T.add(c, a) if a is not None else c}
        with T.no_grad():
            if path == "root":
                _, c, a = self.root.forward_parts(x, mode)
                return pack(c, a)
            t = self.root(x, mode)
            for li, layer in enumerate(self.layers, start=1):
                prefix = f"layer{li}.block"
                if not path.startswith(prefix):
                    t = layer(t, mode)
                    continue
                target = int(path[len(prefix):])
                carry = T.avgpool2d(t, 2, 2) if layer.plan.downsample_first else t
                out, c, a = layer.blocks[0].forward_parts(t, mode)
                if target == 0:
                    return pack(c, a)
                run = T.concat_channels([carry, out])
                for i, blk in enumerate(layer.blocks[1:], start=1):
                    out, c, a = blk.forward_parts(run, mode)
                    if i == target:
                        return pack(c, a)
                    run = T.concat_channels([run, out])
        raise ConfigError(f"unknown block path {path!r}")

    def loss_and_error(self, eval_set, batch_size=500):
        """Mean cross-entropy loss and top-1 error over (images, labels),
        batch norm in eval mode, no gradient recording."""
        images, labels = eval_set
        n = len(labels)
        total_loss = 0.0
        correct = 0
        with T.no_grad():
            for lo in range(0, n, batch_size):
                hi = min(lo + batch_size, n)
                logits = self.forward(Tensor(images[lo:hi]), mode="eval")
                loss = T.softmax_crossentropy(logits, labels[lo:hi])
                total_loss += float(loss.data) * (hi - lo)
                correct += int((np.argmax(logits.data, axis=1) == labels[lo:hi]).sum())
        return total_loss / n, 1.0 - correct / n

    def summary(self, batch=2):
        """Plain-text table of (module path, output shape, parameter count)."""
        saved = [(name, buf.copy()) for name, buf in self.named_buffers()]
        x = Tensor(np.zeros((batch, 3, self.cfg.image_size, self.cfg.image_size),
                            dtype=T.DEFAULT_DTYPE))
        rows = []
        with T.no_grad():
            taps = [self.root(x, "train")]
            rows.append(("root", taps[0].shape, self.root.param_count()))
            out = taps[0]
            for li, layer in enumerate(self.layers, start=1):
                carry = T.avgpool2d(out, 2, 2) if layer.plan.downsample_first else out
                run = T.concat_channels([carry, layer.blocks[0](out, "train")])
                rows.append((f"layer{li}.block0", run.shape, layer.blocks[0].param_count()))
                for i, blk in enumerate(layer.blocks[1:], start=1):
                    run = T.concat_channels([run, blk(run, "train")])
                    rows.append((f"layer{li}.block{i}", run.shape, blk.param_count()))
                out = run
                taps.append(out)
                rows.append((f"layer{li}", out.shape, layer.param_count()))
            feats = self.exc(taps)
            rows.append(("exc", feats.shape, self.exc.param_count()))
            logits = self.head(feats)
            rows.append(("head", logits.shape, self.head.param_count()))
        current = dict(self.named_buffers())
        for name, buf in saved:
            current[name][...] = buf
        lines = [f"{'module':<18} {'output shape':<22} {'params':>10}"]
        for name, shape, count in rows:
            lines.append(f"{name:<18} {'x'.join(str(s) for s in shape):<22} {count:>10}")
        lines.append(f"{'TOTAL':<18} {'':<22} {self.param_count():>10}")
        return "\n".join(lines)


def build_upanets(cfg: UpaNetsConfig, seed=0):
    """Construct the model for a config; same seed gives identical weights."""
    return UpaNets(cfg, seed=seed)
