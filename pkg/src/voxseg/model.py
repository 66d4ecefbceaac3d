"""The segmentation network: SE-augmented 3D CNN encoder, Transformer
bottleneck with a learnable MLP positional encoding, and a skip-connected
upsampling decoder, plus the autoencoder twin used for self-pretraining.

Key properties the tests pin down:

* every encoder stage carries a squeeze-and-excitation block;
* the positional encoding is a residual stack of exactly three
  (1x1x1 conv -> ReLU -> batch norm) blocks, so the Transformer accepts any
  bottleneck resolution and one built model can run on any input whose
  spatial dims are divisible by 2^(stages-1);
* the autoencoder's encoder is structurally identical (same parameter names
  and shapes) to the segmentation encoder, so weights transfer bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError


@dataclass
class ModelConfig:
    in_channels: int = 4
    num_classes: int = 4
    base_channels: int = 16
    encoder_stages: int = 5
    se_reduction: int = 16
    embed_dim: int = 512
    tf_layers: int = 4
    tf_heads: int = 8
    mlp_pe_blocks: int = 3
    dropout: float = 0.1

    def __post_init__(self):
        if self.encoder_stages < 2:
            raise ValidationError("model.encoder_stages must be >= 2")
        if self.embed_dim % self.tf_heads != 0:
            raise ValidationError(
                f"model.embed_dim ({self.embed_dim}) must be divisible by "
                f"tf_heads ({self.tf_heads})"
            )
        if self.se_reduction < 1:
            raise ValidationError("model.se_reduction must be >= 1")
        if self.mlp_pe_blocks != 3:
            raise ValidationError("model.mlp_pe_blocks is fixed at 3")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.encoder_stages - 1)

    @property
    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.encoder_stages)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _num_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class SEBlock3d(nn.Module):
    """Squeeze-and-excitation: global average pool -> bottleneck MLP ->
    sigmoid gates rescaling channels. Hidden width is max(C // reduction, 1)."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3, 4))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.gates(x)
        return x * s.view(x.shape[0], -1, 1, 1, 1)


class ConvBlock3d(nn.Module):
    """3x3x3 conv -> group norm -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1)
        self.norm = nn.GroupNorm(_num_groups(out_ch), out_ch)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class EncoderStage(nn.Module):
    """Optional x2 downsampling conv, two conv blocks, then an SE block."""

    def __init__(self, in_ch: int, out_ch: int, reduction: int, downsample: bool):
        super().__init__()
        self.down = (
            nn.Conv3d(in_ch, in_ch, kernel_size=3, stride=2, padding=1)
            if downsample else None
        )
        self.conv1 = ConvBlock3d(in_ch, out_ch)
        self.conv2 = ConvBlock3d(out_ch, out_ch)
        self.se = SEBlock3d(out_ch, reduction)

    def forward(self, x):
        if self.down is not None:
            x = self.down(x)
        return self.se(self.conv2(self.conv1(x)))


class CnnEncoder(nn.Module):
    """Stages double channels from base_channels and halve resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        stages = []
        in_ch = cfg.in_channels
        for i, out_ch in enumerate(cfg.stage_channels):
            stages.append(EncoderStage(in_ch, out_ch, cfg.se_reduction, downsample=i > 0))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> list[torch.Tensor]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class MlpPositionalEncoding(nn.Module):
    """Residual stack of (1x1x1 conv -> ReLU -> batch norm) blocks.

    Being purely pointwise it is defined for any spatial shape, which is what
    lets one trained model run on any admissible input size.
    """

    def __init__(self, dim: int, blocks: int = 3):
        super().__init__()
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Conv3d(dim, dim, kernel_size=1),
                nn.ReLU(inplace=True),
                nn.BatchNorm3d(dim),
            )
            for _ in range(blocks)
        )

    def forward(self, x):
        h = x
        for block in self.blocks:
            h = block(h)
        return h + x


class TransformerBlock(nn.Module):
    """Pre-norm multi-head self-attention block with an MLP sublayer."""

    def __init__(self, dim: int, heads: int, dropout: float, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, tokens):
        h = self.norm1(tokens)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        tokens = tokens + self.drop(attn_out)
        tokens = tokens + self.drop(self.mlp(self.norm2(tokens)))
        return tokens


class TransformerBottleneck(nn.Module):
    """1x1x1 projection to embed_dim, MLP positional encoding on the 3D map,
    token-space self-attention layers, then projection back."""

    def __init__(self, in_ch: int, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Conv3d(in_ch, cfg.embed_dim, kernel_size=1)
        self.pos_enc = MlpPositionalEncoding(cfg.embed_dim, cfg.mlp_pe_blocks)
        self.layers = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.tf_heads, cfg.dropout)
            for _ in range(cfg.tf_layers)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.unembed = nn.Conv3d(cfg.embed_dim, in_ch, kernel_size=1)

    def forward(self, x):
        z = self.pos_enc(self.embed(x))
        n, e, d, h, w = z.shape
        tokens = z.flatten(2).transpose(1, 2)
        for layer in self.layers:
            tokens = layer(tokens)
        tokens = self.norm(tokens)
        z = tokens.transpose(1, 2).reshape(n, e, d, h, w)
        return self.unembed(z)


class DecoderStage(nn.Module):
    """x2 transposed-conv upsampling, skip concatenation, two conv blocks."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_ch, out_ch, kernel_size=2, stride=2)
        self.conv1 = ConvBlock3d(out_ch * 2, out_ch)
        self.conv2 = ConvBlock3d(out_ch, out_ch)

    def forward(self, x, skip):
        x = self.up(x)
        x = torch.cat([x, skip], dim=1)
        return self.conv2(self.conv1(x))


class ReconDecoderStage(nn.Module):
    """Upsampling stage without skip connections (autoencoder decoder)."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_ch, out_ch, kernel_size=2, stride=2)
        self.conv1 = ConvBlock3d(out_ch, out_ch)
        self.conv2 = ConvBlock3d(out_ch, out_ch)

    def forward(self, x):
        return self.conv2(self.conv1(self.up(x)))


def _check_spatial(shape, factor: int):
    for axis, dim in zip((2, 3, 4), shape[2:]):
        if dim % factor != 0:
            raise ValidationError(
                f"spatial dim {dim} on axis {axis} is not divisible by {factor}; "
                f"pad or crop the input"
            )


class SegModel(nn.Module):
    """Encoder -> Transformer bottleneck -> decoder with skips -> class logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels
        self.encoder = CnnEncoder(cfg)
        self.bottleneck = TransformerBottleneck(chans[-1], cfg)
        self.decoder_stages = nn.ModuleList(
            DecoderStage(chans[i], chans[i - 1]) for i in range(len(chans) - 1, 0, -1)
        )
        self.head = nn.Conv3d(chans[0], cfg.num_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_spatial(x.shape, self.cfg.downsample_factor)
        features = self.encoder(x)
        z = self.bottleneck(features[-1])
        for stage, skip in zip(self.decoder_stages, reversed(features[:-1])):
            z = stage(z, skip)
        return self.head(z)


class AutoencoderModel(nn.Module):
    """Reconstruction twin: identical encoder, skip-free mirror decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels
        self.encoder = CnnEncoder(cfg)
        self.decoder_stages = nn.ModuleList(
            ReconDecoderStage(chans[i], chans[i - 1]) for i in range(len(chans) - 1, 0, -1)
        )
        self.head = nn.Conv3d(chans[0], cfg.in_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_spatial(x.shape, self.cfg.downsample_factor)
        z = self.encoder(x)[-1]
        for stage in self.decoder_stages:
            z = stage(z)
        return self.head(z)


def _init_weights(model: nn.Module):
    for module in model.modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.MultiheadAttention):
            nn.init.trunc_normal_(module.in_proj_weight, std=0.02)
            nn.init.zeros_(module.in_proj_bias)
        elif isinstance(module, (nn.GroupNorm, nn.BatchNorm3d, nn.LayerNorm)):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)


def _zero_final_pe_conv(pos_enc: MlpPositionalEncoding):
    # The residual starts as identity, easing early training.
    final_conv = pos_enc.blocks[-1][0]
    nn.init.zeros_(final_conv.weight)
    nn.init.zeros_(final_conv.bias)


def build_model(cfg: ModelConfig, seed: int = 0) -> SegModel:
    """Construct a segmentation model with deterministic initialization."""
    torch.manual_seed(seed)
    model = SegModel(cfg)
    _init_weights(model)
    _zero_final_pe_conv(model.bottleneck.pos_enc)
    return model


def build_autoencoder(cfg: ModelConfig, seed: int = 0) -> AutoencoderModel:
    """Construct the pretraining autoencoder with deterministic initialization."""
    torch.manual_seed(seed)
    model = AutoencoderModel(cfg)
    _init_weights(model)
    return model


def transfer_encoder_weights(src: AutoencoderModel, dst: SegModel) -> SegModel:
    """Copy the autoencoder's encoder parameters into ``dst`` in place.

    Fails loudly on the first name or shape mismatch; every non-encoder
    parameter of ``dst`` is left untouched.
    """
    src_state = src.encoder.state_dict()
    dst_state = dst.encoder.state_dict()
    for name, dst_tensor in dst_state.items():
        if name not in src_state:
            raise ValidationError(f"encoder transfer: parameter {name!r} missing in source")
        if src_state[name].shape != dst_tensor.shape:
            raise ValidationError(
                f"encoder transfer: shape mismatch for {name!r}: "
                f"{tuple(src_state[name].shape)} vs {tuple(dst_tensor.shape)}"
            )
    for name in src_state:
        if name not in dst_state:
            raise ValidationError(f"encoder transfer: unexpected source parameter {name!r}")
    dst.encoder.load_state_dict(src_state)
    return dst


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
