"""The six U-Net-family segmentation networks.

All variants share one encoder/decoder skeleton; only the per-level block
(plain, dense, recurrent-residual) and the presence of attention gates on the
skip connections differ. Inputs and outputs at the public boundary are
channels-last numpy arrays, ``(B, H, W, 1)`` in and ``(B, H, W, 5)`` out.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import GRID, NUM_CLASSES
from .errors import ConfigError, ShapeError


class Architecture(str, enum.Enum):
    UNET = "UNET"
    ATT_UNET = "ATT_UNET"
    DENSE_UNET = "DENSE_UNET"
    ATT_DENSE_UNET = "ATT_DENSE_UNET"
    R2U_NET = "R2U_NET"
    ATT_R2U_NET = "ATT_R2U_NET"

    @property
    def attention(self) -> bool:
        return self.value.startswith("ATT_")

    @property
    def block(self) -> str:
        return {"UNET": "plain", "DENSE_UNET": "dense", "R2U_NET": "r2"}[self.value.removeprefix("ATT_")]


ARCHITECTURE_ORDER = tuple(Architecture)


@dataclass(frozen=True)
class ModelConfig:
    architecture: Architecture = Architecture.UNET
    base_filters: int = 64
    depth: int = 4
    recurrence_steps: int = 2
    dense_layers_per_block: int = 4
    dense_growth_rate: int = 16
    num_classes: int = NUM_CLASSES
    init_seed: int = 0
    input_size: int = GRID

    def __post_init__(self):
        try:
            object.__setattr__(self, "architecture", Architecture(self.architecture))
        except ValueError:
            raise ConfigError(f"unknown architecture {self.architecture!r}") from None
        if self.depth < 1 or self.base_filters < 1 or self.recurrence_steps < 1:
            raise ConfigError("depth, base_filters and recurrence_steps must all be >= 1")
        if self.dense_layers_per_block < 1 or self.dense_growth_rate < 1:
            raise ConfigError("dense_layers_per_block and dense_growth_rate must be >= 1")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes is fixed at {NUM_CLASSES}")
        if self.input_size % (2**self.depth):
            raise ConfigError(f"input_size {self.input_size} is not divisible by 2**depth")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["architecture"] = self.architecture.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


# ---------------------------------------------------------------- blocks


def conv_bn_relu(cin: int, cout: int, kernel: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, padding=kernel // 2),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class PlainBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, cfg: ModelConfig):
        super().__init__(conv_bn_relu(cin, cout), conv_bn_relu(cout, cout))


class DenseBlock(nn.Module):
    """Each layer sees the block input plus every earlier layer's output.

    A 1x1 transition brings the concatenated width back to ``cout`` so the
    surrounding skeleton keeps the usual filter doubling.
    """

    def __init__(self, cin: int, cout: int, cfg: ModelConfig):
        super().__init__()
        g = cfg.dense_growth_rate
        self.layers = nn.ModuleList(
            conv_bn_relu(cin + i * g, g) for i in range(cfg.dense_layers_per_block)
        )
        self.transition = conv_bn_relu(cin + len(self.layers) * g, cout, kernel=1)

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, dim=1)))
        return self.transition(torch.cat(feats, dim=1))


class RecurrentConv(nn.Module):
    """3x3 conv unrolled ``steps`` times; each step re-reads the step-0 input.

    The convolution weights are shared across steps but every step has its
    own normalization, since the activation statistics differ per step.
    """

    def __init__(self, channels: int, steps: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.norms = nn.ModuleList(nn.BatchNorm2d(channels) for _ in range(steps + 1))

    def forward(self, x):
        h = F.relu(self.norms[0](self.conv(x)))
        for norm in self.norms[1:]:
            h = F.relu(norm(self.conv(x + h)))
        return h


class R2Block(nn.Module):
    def __init__(self, cin: int, cout: int, cfg: ModelConfig):
        super().__init__()
        self.project = nn.Conv2d(cin, cout, 1)
        self.rcnn = nn.Sequential(
            RecurrentConv(cout, cfg.recurrence_steps), RecurrentConv(cout, cfg.recurrence_steps)
        )

    def forward(self, x):
        x = self.project(x)
        return x + self.rcnn(x)


BLOCKS = {"plain": PlainBlock, "dense": DenseBlock, "r2": R2Block}


class AttentionGate(nn.Module):
    """Additive attention: ``skip * sigmoid(psi(relu(Wx skip + Wg up(gate))))``."""

    def __init__(self, skip_channels: int, gate_channels: int, inter_channels: int):
        super().__init__()
        self.w_skip = nn.Conv2d(skip_channels, inter_channels, 1, bias=False)
        self.w_gate = nn.Conv2d(gate_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)

    def coefficients(self, skip, gate):
        if gate.shape[-2:] != skip.shape[-2:]:
            if tuple(2 * s for s in gate.shape[-2:]) != tuple(skip.shape[-2:]):
                raise ShapeError(
                    f"gate {tuple(gate.shape[-2:])} cannot be up-sampled x2 to skip {tuple(skip.shape[-2:])}"
                )
            gate = F.interpolate(gate, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.psi(F.relu(self.w_skip(skip) + self.w_gate(gate))))

    def forward(self, skip, gate):
        return skip * self.coefficients(skip, gate)


class UpConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(nn.Upsample(scale_factor=2, mode="nearest"), conv_bn_relu(cin, cout))


class UNetFamily(nn.Module):
    """Encoder of ``depth`` levels, bottleneck, mirrored decoder, 1x1 head, softmax."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        block = BLOCKS[cfg.architecture.block]
        widths = [cfg.base_filters * 2**i for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList()
        cin = 1
        for w in widths[:-1]:
            self.encoders.append(block(cin, w, cfg))
            cin = w
        self.bottleneck = block(widths[-2], widths[-1], cfg)
        self.ups = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in reversed(range(cfg.depth)):
            w, below = widths[level], widths[level + 1]
            self.ups.append(UpConv(below, w))
            if cfg.architecture.attention:
                self.gates.append(AttentionGate(w, below, max(w // 2, 1)))
            self.decoders.append(block(2 * w, w, cfg))
        self.head = nn.Conv2d(widths[0], cfg.num_classes, 1)

    def logits(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for i, (up, dec) in enumerate(zip(self.ups, self.decoders)):
            skip = skips.pop()
            if self.gates:
                skip = self.gates[i](skip, x)
            x = dec(torch.cat([skip, up(x)], dim=1))
        return self.head(x)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


# ---------------------------------------------------------------- handle


def init_parameters(net: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights (He bound), zero biases, unit norm scales."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if isinstance(_owner(net, name), nn.BatchNorm2d):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)


def _owner(net: nn.Module, param_name: str) -> nn.Module:
    return net.get_submodule(param_name.rpartition(".")[0])


class ModelHandle:
    """A built network plus its config; ``parameters`` maps names to arrays."""

    def __init__(self, config: ModelConfig, net: UNetFamily | None = None):
        self.config = config
        self.net = net if net is not None else UNetFamily(config)

    @property
    def name(self) -> str:
        return self.config.architecture.value

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.net.named_parameters()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint must hold: parameters and normalization statistics."""
        return {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}

    def __repr__(self):
        return f"ModelHandle({self.name}, params={count_parameters(self)})"


def build(config: ModelConfig | dict) -> ModelHandle:
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    handle = ModelHandle(config)
    init_parameters(handle.net, config.init_seed)
    # NHWC kernels are markedly faster on CPU for these channel widths
    handle.net.to(memory_format=torch.channels_last)
    handle.net.eval()
    return handle


def count_parameters(model: ModelHandle) -> int:
    return sum(p.numel() for p in model.net.parameters() if p.requires_grad)


def to_tensor(batch: np.ndarray, size: int, dtype=torch.float32) -> torch.Tensor:
    batch = np.asarray(batch)
    if batch.ndim == 3:
        batch = batch[..., None]
    if batch.ndim != 4 or batch.shape[1:] != (size, size, 1):
        raise ShapeError(f"expected a (B, {size}, {size}, 1) batch, got {batch.shape}")
    return torch.from_numpy(np.ascontiguousarray(batch)).to(dtype).permute(0, 3, 1, 2)


def forward(model: ModelHandle, batch: np.ndarray, chunk: int = 8) -> np.ndarray:
    """Inference-mode class probabilities, ``(B, H, W, 5)`` float32."""
    dtype = next(model.net.parameters()).dtype
    x = to_tensor(batch, model.config.input_size, dtype)
    was_training = model.net.training
    model.net.eval()
    try:
        with torch.no_grad():
            out = torch.cat([model.net(x[i : i + chunk]) for i in range(0, x.shape[0], chunk)])
    finally:
        model.net.train(was_training)
    return out.permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


def attention_gate(gate_module: AttentionGate, skip: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """Apply ``gate_module`` to channels-last ``(H, W, C)`` arrays (or batches thereof)."""
    single = skip.ndim == 3
    if single:
        skip, gate = skip[None], gate[None]
    dtype = next(gate_module.parameters()).dtype
    s = torch.from_numpy(np.ascontiguousarray(skip.transpose(0, 3, 1, 2))).to(dtype)
    g = torch.from_numpy(np.ascontiguousarray(gate.transpose(0, 3, 1, 2))).to(dtype)
    with torch.no_grad():
        out = gate_module(s, g).permute(0, 2, 3, 1).numpy()
    return out[0] if single else out
