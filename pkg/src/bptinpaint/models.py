"""Generator, patch discriminators and the frozen perceptual feature stack."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .engine import ConvSpec, Tensor
from .engine import ops


class Module:
    """Minimal container: registers parameters, buffers and child modules by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, list) and all(isinstance(v, Module) for v in value):
            self._children[name] = ModuleList(value)
            value = self._children[name]
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, arr: np.ndarray) -> None:
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            src = np.asarray(state[name])
            if src.shape != p.shape:
                raise ValueError(f"{name}: shape {src.shape} != {p.shape}")
            p.data[...] = src
        for name, b in bufs.items():
            b[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _he_normal(rng: np.random.Generator, shape, fan_in: float, dtype, gain: float = 2.0) -> Tensor:
    std = np.sqrt(gain / fan_in)
    return Tensor(rng.standard_normal(shape).astype(dtype) * dtype(std), requires_grad=True)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng, dtype=np.float32, bias: bool = True, gain: float = 2.0):
        super().__init__()
        self.spec = spec
        kh, kw = spec.kernel_hw
        shape = (spec.out_channels, spec.in_channels, kh, kw)
        self.weight = _he_normal(rng, shape, spec.in_channels * kh * kw, dtype, gain)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)


class ConvTranspose2d(Module):
    """Learned upsampling; weight layout follows the adjoint conv: ``(in, out, k, k)``."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int, rng,
                 dtype=np.float32, bias: bool = True):
        super().__init__()
        self.spec = ConvSpec(out_ch, in_ch, kernel, stride, padding)
        fan_in = in_ch * kernel * kernel / (stride * stride)
        self.weight = _he_normal(rng, (in_ch, out_ch, kernel, kernel), fan_in, dtype)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.spec)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class ResidualBlock(Module):
    """conv-BN-ReLU-conv-BN, identity add, ReLU. Convs are 3x3 and extent-preserving."""

    def __init__(self, channels: int, dilation: int, rng, dtype=np.float32):
        super().__init__()
        spec = ConvSpec(channels, channels, 3, stride=1, padding=dilation, dilation=dilation)
        self.conv1 = Conv2d(spec, rng, dtype, bias=False)
        self.bn1 = BatchNorm2d(channels, dtype)
        self.conv2 = Conv2d(spec, rng, dtype, bias=False)
        self.bn2 = BatchNorm2d(channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return ops.relu(h + x)


@dataclass
class GeneratorConfig:
    image_size: int = 64
    base_width: int = 16
    core_blocks: int = 9
    dilation: int = 2
    seed: int = 0
    dtype: type = np.float32

    def validate(self) -> None:
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        if self.image_size < 8 or self.image_size % 8:
            raise ValueError(f"image_size {self.image_size} must be a positive multiple of 8")
        if self.core_blocks < 0 or self.dilation < 1:
            raise ValueError("core_blocks must be >= 0 and dilation >= 1")


@dataclass
class GrowthState:
    stage: int = 0
    alpha: float = 1.0
    stage_iter: int = 0


class GeneratorNet(Module):
    """Strided-conv front end, dilated residual core, transposed-conv back end.

    Takes an RGB image with holes zeroed plus the binary mask (4 channels) and
    returns a full-image prediction in [-1, 1]. Blocks added by
    :meth:`add_block` run after the core and are blended against the core
    output with weight ``growth.alpha`` on the skip path.
    """

    IN_CHANNELS = 4

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c, dt = cfg.base_width, cfg.dtype
        widths = [self.IN_CHANNELS, c, 2 * c, 4 * c]
        self.front = [
            _ConvBNReLU(ConvSpec(widths[i], widths[i + 1], 4, stride=2, padding=1), rng, dt) for i in range(3)
        ]
        self.core = [ResidualBlock(4 * c, cfg.dilation, rng, dt) for _ in range(cfg.core_blocks)]
        self.grown = []
        self.back = [
            _TConvBNReLU(4 * c, 2 * c, rng, dt),
            _TConvBNReLU(2 * c, c, rng, dt),
            _TConvBNReLU(c, c, rng, dt),
        ]
        self.out = Conv2d(ConvSpec(c, 3, 3, stride=1, padding=1), rng, dt, bias=True, gain=1.0)
        self.growth = GrowthState()

    def grown_block_rng(self, stage: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 1_000 + stage]))

    def add_block(self) -> "GeneratorNet":
        """Append a residual block right before the back end and reset alpha to 1."""
        g = self.growth
        if g.stage >= 1 and g.alpha > 0 and g.stage_iter > 0:
            raise RuntimeError(f"add_block called mid-stage (stage {g.stage}, alpha {g.alpha}, iter {g.stage_iter})")
        stage = g.stage + 1
        block = ResidualBlock(4 * self.cfg.base_width, self.cfg.dilation, self.grown_block_rng(stage), self.cfg.dtype)
        block.train(self.training)
        self.grown.append(block)
        self.growth = GrowthState(stage=stage, alpha=1.0, stage_iter=0)
        return self

    def forward(self, image: Tensor, mask: np.ndarray) -> Tensor:
        """``image`` is NCHW RGB in [-1, 1]; ``mask`` is N1HW with 1 on hole pixels."""
        n, c, h, w = image.shape
        if (h, w) != (self.cfg.image_size, self.cfg.image_size):
            raise ValueError(f"generator built for {self.cfg.image_size}px, got {h}x{w}")
        if c != 3 or mask.shape != (n, 1, h, w):
            raise ValueError("expected RGB image and N1HW mask")
        m = mask.astype(image.dtype)
        s = ops.concat([image * (1 - m), Tensor(m)], axis=1)
        return self.forward_input(s)

    def forward_input(self, s: Tensor) -> Tensor:
        x = s
        for layer in self.front:
            x = layer(x)
        for block in self.core:
            x = block(x)
        if len(self.grown):
            y = x
            for block in self.grown:
                y = block(y)
            a = self.growth.alpha
            x = ops.scale(x, a) + ops.scale(y, 1.0 - a)
        for layer in self.back:
            x = layer(x)
        return ops.tanh(self.out(x))


class _ConvBNReLU(Module):
    def __init__(self, spec: ConvSpec, rng, dtype):
        super().__init__()
        self.conv = Conv2d(spec, rng, dtype, bias=False)
        self.bn = BatchNorm2d(spec.out_channels, dtype)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class _TConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, rng, dtype):
        super().__init__()
        self.conv = ConvTranspose2d(cin, cout, 4, 2, 1, rng, dtype, bias=False)
        self.bn = BatchNorm2d(cout, dtype)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


def build_generator(cfg: Optional[GeneratorConfig] = None, **kwargs) -> GeneratorNet:
    return GeneratorNet(cfg if cfg is not None else GeneratorConfig(**kwargs))


# discriminators


@dataclass
class DiscriminatorConfig:
    image_size: int = 64
    base_width: int = 16
    n_strided: int = 3
    in_channels: int = 4
    seed: int = 0
    dtype: type = np.float32


class PatchDiscriminator(Module):
    """Fully convolutional patch classifier producing one logit per input patch.

    Strided 4x4 convs double the width each step (leaky ReLU 0.2, BN on all but
    the first), then a 3x3 stride-1 conv to one channel.
    """

    def __init__(self, cfg: DiscriminatorConfig, seed: int):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, dt = cfg.base_width, cfg.dtype
        specs = []
        cin = cfg.in_channels
        for i in range(cfg.n_strided):
            cout = c * 2**i
            specs.append(ConvSpec(cin, cout, 4, stride=2, padding=1))
            cin = cout
        specs.append(ConvSpec(cin, 1, 3, stride=1, padding=1))
        self.convs = [Conv2d(s, rng, dt, bias=(i == 0 or i == len(specs) - 1), gain=2.0 / (1 + 0.2**2))
                      for i, s in enumerate(specs)]
        self.norms = [BatchNorm2d(s.out_channels, dt) for s in specs[1:-1]]

    def conv_specs(self) -> list[ConvSpec]:
        return [conv.spec for conv in self.convs]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        for spec in self.conv_specs():
            h, w = spec.output_size(h, w)
        return h, w

    def forward(self, x: Tensor) -> Tensor:
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i == last:
                break
            if i >= 1:
                x = self.norms[i - 1](x)
            x = ops.leaky_relu(x, 0.2)
        return x


def build_discriminators(cfg: Optional[DiscriminatorConfig] = None, **kwargs) -> list[PatchDiscriminator]:
    """Three identically shaped discriminators for scales 1, 1/2 and 1/4."""
    cfg = cfg if cfg is not None else DiscriminatorConfig(**kwargs)
    nets = []
    for k in range(3):
        net = PatchDiscriminator(cfg, seed=int(np.random.SeedSequence([cfg.seed, 2_000 + k]).generate_state(1)[0]))
        extent = cfg.image_size // 2**k
        try:
            net.output_size(extent, extent)
        except ValueError as exc:
            raise ValueError(f"discriminator depth too large for scale-{k + 1} extent {extent}") from exc
        nets.append(net)
    return nets


# perceptual features


FEATURE_LAYERS = (
    # (out_channels, kernel, stride)
    (16, 5, 2),
    (32, 3, 2),
    (48, 3, 1),
    (32, 3, 1),
    (32, 3, 1),
)


class FeatureStack(Module):
    """Frozen five-layer conv+ReLU stack standing in for a pretrained backbone.

    Weights are a deterministic function of ``seed``. ``layer_weights`` holds
    the per-layer channel weights (all ones unless loaded).
    """

    def __init__(self, seed: int = 0, input_extent: int = 64, dtype=np.float32):
        super().__init__()
        self.seed = seed
        self.input_extent = input_extent
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3_000]))
        cin = 3
        convs = []
        for cout, k, s in FEATURE_LAYERS:
            conv = Conv2d(ConvSpec(cin, cout, k, stride=s, padding=k // 2), rng, dtype, bias=True)
            conv.bias.data[...] = rng.normal(0.0, 0.1, cout).astype(dtype)
            convs.append(conv)
            cin = cout
        self.convs = convs
        self.requires_grad_(False)
        self.layer_weights = [np.ones(cout, dtype=dtype) for cout, _, _ in FEATURE_LAYERS]

    @property
    def n_layers(self) -> int:
        return len(self.convs)

    def set_layer_weights(self, weights) -> None:
        weights = [np.asarray(w, dtype=self.convs[0].weight.dtype) for w in weights]
        if len(weights) != self.n_layers:
            raise ValueError(f"expected {self.n_layers} layer weight vectors, got {len(weights)}")
        for w, conv in zip(weights, self.convs):
            if w.shape != (conv.spec.out_channels,):
                raise ValueError("layer weight length must equal the layer's channel count")
        self.layer_weights = weights

    def forward(self, patch: Tensor) -> list[Tensor]:
        """Per-layer feature maps, each position's channel vector unit-normalized."""
        if patch.shape[2:] != (self.input_extent, self.input_extent):
            raise ValueError(f"feature input must be {self.input_extent}x{self.input_extent}, got {patch.shape[2:]}")
        feats = []
        x = patch
        for conv in self.convs:
            x = ops.relu(conv(x))
            feats.append(ops.channel_normalize(x))
        return feats


def feature_forward(fs: FeatureStack, patch: Tensor) -> list[Tensor]:
    return fs(patch)


def parameter_checksum(module: Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, arr in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
