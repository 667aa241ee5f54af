"""The six U-Net-family architectures and their checkpoint format.

Single-path nets (UNET, ATT_UNET, XATT_UNET) use a five-level encoder
(widths b, 2b, 4b, 8b, 16b) and a bicubic-upsampling decoder. Dual-path nets
run one four-level encoder per modality (b .. 8b), pool both to the
bottleneck grid, fuse the pair into 16b channels, and apply the bottleneck
double conv. Every decoder stage of a dual net concatenates the upsampled
features with both encoders' skips.

All architectures use the bicubic decoder, including the plain UNET baseline,
so decoder differences never confound the comparison.

Checkpoint archive (``torch.save`` of a dict):

    format       "nervseg-checkpoint-v1"
    config       ModelConfig as a plain dict
    parameters   state_dict: dotted parameter/buffer name -> tensor
    train_state  free-form dict (epoch, metrics, optimizer state, ...)
"""

import dataclasses
import enum
from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import AttentionGate, CrossAttentionSkip, DoubleConv, Down, UpStage, init_weights
from .fusion import CoLearnFusion, DXMFusion, LateConcatFusion

CHECKPOINT_FORMAT = "nervseg-checkpoint-v1"


class Architecture(str, enum.Enum):
    UNET = "UNET"
    ATT_UNET = "ATT_UNET"
    XATT_UNET = "XATT_UNET"
    DUAL_UNET = "DUAL_UNET"
    COLEARN_UNET = "COLEARN_UNET"
    DXM_TRANSFUSE = "DXM_TRANSFUSE"

    @property
    def is_dual(self):
        return self in (Architecture.DUAL_UNET, Architecture.COLEARN_UNET, Architecture.DXM_TRANSFUSE)


ARCHITECTURES = list(Architecture)


@dataclass
class ModelConfig:
    architecture: Architecture = Architecture.UNET
    in_channels_per_modality: int = 3
    base_width: int = 64
    heads: int = 4
    dropout_p: float = 0.1
    seed: int = 0
    image_size: int = 256
    # which stream a single-path net consumes
    modality: str = "jet"
    xatt_heads: int = 1
    xatt_max_grid: int = 16

    def __post_init__(self):
        self.architecture = Architecture(self.architecture)

    def validate(self):
        errors = []
        if self.base_width < 8:
            errors.append(f"base_width must be >= 8, got {self.base_width}")
        if self.in_channels_per_modality < 1:
            errors.append("in_channels_per_modality must be >= 1")
        if self.image_size < 16 or self.image_size % 16:
            errors.append(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if not 0.0 <= self.dropout_p < 1.0:
            errors.append(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.modality not in ("jet", "rgb"):
            errors.append(f"modality must be 'jet' or 'rgb', got {self.modality!r}")
        if self.architecture is Architecture.DXM_TRANSFUSE and (
                self.heads <= 0 or (8 * self.base_width) % self.heads):
            errors.append(f"heads={self.heads} does not divide the bottleneck token dim {8 * self.base_width}")
        if self.architecture is Architecture.XATT_UNET and self.base_width % max(self.xatt_heads, 1):
            errors.append(f"xatt_heads={self.xatt_heads} does not divide base_width {self.base_width}")
        return errors

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["architecture"] = self.architecture.value
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class _Encoder(nn.Module):
    def __init__(self, in_channels, widths):
        super().__init__()
        self.stages = nn.ModuleList()
        prev = in_channels
        for w in widths:
            self.stages.append(DoubleConv(prev, w))
            prev = w
        self.down = Down()

    def forward(self, x):
        """Returns the per-stage outputs; each stage after the first is pooled first."""
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x if i == 0 else self.down(x))
            feats.append(x)
        return feats


class SegmentationNet(nn.Module):
    """Base class: validates inputs against the config and exposes ``n_inputs``."""

    n_inputs = 1

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg

    def _check_inputs(self, inputs):
        if len(inputs) != self.n_inputs:
            raise ValueError(
                f"{self.cfg.architecture.value} expects {self.n_inputs} input stream(s), got {len(inputs)}")
        for x in inputs:
            if x.dim() != 4:
                raise ValueError(f"inputs must be rank-4 (B, C, H, W), got {tuple(x.shape)}")
            if x.shape[1] != self.cfg.in_channels_per_modality:
                raise ValueError(f"expected {self.cfg.in_channels_per_modality} channels, got {x.shape[1]}")
            if tuple(x.shape[-2:]) != (self.cfg.image_size, self.cfg.image_size):
                raise ValueError(
                    f"expected {self.cfg.image_size}x{self.cfg.image_size} inputs, got {tuple(x.shape[-2:])}")
        if len({x.shape[0] for x in inputs}) != 1:
            raise ValueError("input streams have different batch sizes")


class UNet(SegmentationNet):
    """Single-modality U-Net with optional skip gating ('gate' or 'cross')."""

    def __init__(self, cfg, skip_mode=None):
        super().__init__(cfg)
        b = cfg.base_width
        widths = [b, 2 * b, 4 * b, 8 * b, 16 * b]
        self.skip_mode = skip_mode
        self.encoder = _Encoder(cfg.in_channels_per_modality, widths)
        self.decoder = nn.ModuleList(UpStage(2 * c, c, c) for c in reversed(widths[:-1]))
        if skip_mode == "gate":
            self.gates = nn.ModuleList(AttentionGate(c, c) for c in reversed(widths[:-1]))
        elif skip_mode == "cross":
            self.gates = nn.ModuleList(
                CrossAttentionSkip(c, 2 * c, heads=cfg.xatt_heads, max_grid=cfg.xatt_max_grid)
                for c in reversed(widths[:-1]))
        else:
            self.gates = None
        self.head = nn.Conv2d(b, 1, kernel_size=1)

    def forward(self, *inputs):
        self._check_inputs(inputs)
        feats = self.encoder(inputs[0])
        x = feats[-1]
        for i, stage in enumerate(self.decoder):
            skip = feats[-2 - i]
            up = stage.up(x)
            if self.skip_mode == "gate":
                skip = self.gates[i](skip, up)
            elif self.skip_mode == "cross":
                skip = self.gates[i](skip, x)
            x = stage.conv(torch.cat([up, skip], dim=1))
        return self.head(x)


class DualUNet(SegmentationNet):
    """Two modality encoders, a bottleneck fusion module, one shared decoder."""

    n_inputs = 2

    def __init__(self, cfg, fusion="concat"):
        super().__init__(cfg)
        b = cfg.base_width
        widths = [b, 2 * b, 4 * b, 8 * b]
        self.encoder_jet = _Encoder(cfg.in_channels_per_modality, widths)
        self.encoder_rgb = _Encoder(cfg.in_channels_per_modality, widths)
        self.down = Down()
        c = 8 * b
        if fusion == "concat":
            self.fusion = LateConcatFusion(c)
        elif fusion == "colearn":
            self.fusion = CoLearnFusion(c)
        elif fusion == "dxm":
            self.fusion = DXMFusion(c, heads=cfg.heads, dropout_p=cfg.dropout_p)
        else:
            raise ValueError(f"unknown fusion {fusion!r}")
        self.fusion_kind = fusion
        self.bottleneck = DoubleConv(2 * c, 16 * b)
        self.decoder = nn.ModuleList(UpStage(2 * w, 2 * w, w) for w in reversed(widths))
        self.head = nn.Conv2d(b, 1, kernel_size=1)
        self.dropout_generator = None

    def fuse(self, jet_bottleneck, rgb_bottleneck):
        if self.fusion_kind == "dxm":
            return self.fusion(jet_bottleneck, rgb_bottleneck, training=self.training,
                               generator=self.dropout_generator)
        return self.fusion(jet_bottleneck, rgb_bottleneck)

    def forward(self, *inputs):
        self._check_inputs(inputs)
        jet, rgb = inputs
        fj = self.encoder_jet(jet)
        fr = self.encoder_rgb(rgb)
        x = self.bottleneck(self.fuse(self.down(fj[-1]), self.down(fr[-1])))
        for i, stage in enumerate(self.decoder):
            x = stage(x, fj[-1 - i], fr[-1 - i])
        return self.head(x)


def build_model(cfg):
    """Builds and deterministically initializes the configured architecture."""
    if not isinstance(cfg, ModelConfig):
        raise TypeError("build_model expects a ModelConfig")
    errors = cfg.validate()
    if errors:
        raise ValueError("invalid model config: " + "; ".join(errors))
    arch = cfg.architecture
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        if arch is Architecture.UNET:
            model = UNet(cfg)
        elif arch is Architecture.ATT_UNET:
            model = UNet(cfg, skip_mode="gate")
        elif arch is Architecture.XATT_UNET:
            model = UNet(cfg, skip_mode="cross")
        elif arch is Architecture.DUAL_UNET:
            model = DualUNet(cfg, fusion="concat")
        elif arch is Architecture.COLEARN_UNET:
            model = DualUNet(cfg, fusion="colearn")
        elif arch is Architecture.DXM_TRANSFUSE:
            model = DualUNet(cfg, fusion="dxm")
        else:  # pragma: no cover - Architecture() already rejects unknown names
            raise ValueError(f"unknown architecture {arch}")
        init_weights(model)
    if isinstance(model, DualUNet):
        model.dropout_generator = torch.Generator().manual_seed(cfg.seed)
    return model


def parameter_count(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def model_inputs(model, batch):
    """Selects the input streams a model consumes from a ``{'jet', 'rgb'}`` batch."""
    if model.n_inputs == 2:
        return batch["jet"], batch["rgb"]
    return (batch[model.cfg.modality],)


def save_checkpoint(path, model, train_state=None):
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "parameters": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "train_state": train_state or {},
    }, path)


def load_checkpoint(path, expected_architecture=None):
    """Returns ``(model, train_state)``; the model is left in eval mode."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    cfg = ModelConfig.from_dict(payload["config"])
    if expected_architecture is not None and Architecture(expected_architecture) is not cfg.architecture:
        raise ValueError(
            f"checkpoint architecture {cfg.architecture.value} does not match requested "
            f"{Architecture(expected_architecture).value}")
    model = build_model(cfg)
    model.load_state_dict(payload["parameters"])
    model.eval()
    return model, payload["train_state"]
