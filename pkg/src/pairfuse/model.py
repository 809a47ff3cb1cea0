"""Dual encoder: image and text towers projected into one unit-norm embedding space.

The image tower is either a small pre-norm vision transformer or a strided
convolutional stack; the text tower is a pre-norm transformer pooled at the
end-of-text token. No dropout anywhere: evaluation-mode forward passes are
pure functions of their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class TemperatureSpec:
    """Fixed constant or learnable (stored as log-tau, clamped) temperature."""

    mode: str = "fixed"  # fixed | learnable
    value: float = 0.01
    tau_min: float = 0.001
    tau_max: float = 100.0

    def __post_init__(self):
        if self.mode not in ("fixed", "learnable"):
            raise ValueError(f"unknown temperature mode: {self.mode}")
        if self.value <= 0:
            raise ValueError("temperature must be positive")
        if not self.tau_min <= self.value <= self.tau_max:
            raise ValueError("temperature value outside its clamp range")


@dataclass
class EncoderConfig:
    """Sizes for both towers, the shared embedding, and the temperature."""

    vocab_size: int
    context_length: int
    eot_id: int
    image_size: int = 64
    image_type: str = "vit"  # vit | conv
    patch_size: int = 8
    image_width: int = 128
    image_depth: int = 4
    image_heads: int = 4
    text_width: int = 128
    text_depth: int = 4
    text_heads: int = 4
    embed_dim: int = 128
    temperature: TemperatureSpec = None

    def __post_init__(self):
        if self.temperature is None:
            self.temperature = TemperatureSpec()
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.image_type not in ("vit", "conv"):
            raise ValueError(f"unknown image encoder type: {self.image_type}")
        if self.image_type == "vit" and self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.image_width % self.image_heads or self.text_width % self.text_heads:
            raise ValueError("width must be divisible by the head count")


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with a 4x GELU MLP."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width)
        )

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.ln1(x)
        attn_out, _ = self.attn(
            h, h, h, key_padding_mask=key_padding_mask, need_weights=False
        )
        x = x + attn_out
        return x + self.mlp(self.ln2(x))


class VisionTransformer(nn.Module):
    def __init__(self, image_size: int, patch_size: int, width: int, depth: int, heads: int):
        super().__init__()
        self.image_size = image_size
        self.patch_embed = nn.Conv2d(3, width, kernel_size=patch_size, stride=patch_size)
        num_patches = (image_size // patch_size) ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, width))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches + 1, width))
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(depth))
        self.ln_final = nn.LayerNorm(width)
        self.feature_width = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        x = self.patch_embed(x).flatten(2).transpose(1, 2)  # B x N x w
        cls = self.cls_token.expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.ln_final(x[:, 0])


class ConvImageEncoder(nn.Module):
    """Strided conv stack with group norms, mean-pooled to a feature vector."""

    def __init__(self, width: int, depth: int):
        super().__init__()
        groups = 8 if width % 8 == 0 else 1
        layers: list[nn.Module] = []
        in_ch = 3
        for _ in range(depth):
            layers += [
                nn.Conv2d(in_ch, width, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(groups, width),
                nn.GELU(),
            ]
            in_ch = width
        self.stages = nn.Sequential(*layers)
        self.feature_width = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x).mean(dim=(2, 3))


class TextTransformer(nn.Module):
    def __init__(self, vocab_size: int, context_length: int, width: int, depth: int,
                 heads: int, eot_id: int):
        super().__init__()
        self.context_length = context_length
        self.eot_id = eot_id
        self.token_embed = nn.Embedding(vocab_size, width)
        self.pos_embed = nn.Parameter(torch.zeros(1, context_length, width))
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(depth))
        self.ln_final = nn.LayerNorm(width)
        self.feature_width = width

    def eot_positions(self, tokens: torch.Tensor) -> torch.Tensor:
        """Index of the first end-of-text token per row; error if absent."""
        is_eot = tokens == self.eot_id
        if not bool(is_eot.any(dim=1).all()):
            raise ValueError("a token sequence is missing its end-of-text token")
        positions = torch.arange(tokens.shape[1], device=tokens.device)
        return torch.where(is_eot, positions, tokens.shape[1]).min(dim=1).values

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] != self.context_length:
            raise ValueError(
                f"expected sequences of length {self.context_length}, got {tokens.shape[1]}"
            )
        eot_idx = self.eot_positions(tokens)
        # everything after the end-of-text token is padding: mask it out of attention
        pad_mask = torch.arange(tokens.shape[1], device=tokens.device)[None, :] > eot_idx[:, None]
        x = self.token_embed(tokens) + self.pos_embed
        for block in self.blocks:
            x = block(x, key_padding_mask=pad_mask)
        x = self.ln_final(x)
        return x[torch.arange(tokens.shape[0], device=tokens.device), eot_idx]


class DualEncoder(nn.Module):
    """Image/text encoders, linear projections to the shared space, temperature."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        if config.image_type == "vit":
            self.image_encoder = VisionTransformer(
                config.image_size, config.patch_size, config.image_width,
                config.image_depth, config.image_heads,
            )
        else:
            self.image_encoder = ConvImageEncoder(config.image_width, config.image_depth)
        self.text_encoder = TextTransformer(
            config.vocab_size, config.context_length, config.text_width,
            config.text_depth, config.text_heads, config.eot_id,
        )
        self.image_proj = nn.Linear(self.image_encoder.feature_width, config.embed_dim, bias=False)
        self.text_proj = nn.Linear(config.text_width, config.embed_dim, bias=False)

        spec = config.temperature
        if spec.mode == "learnable":
            self.log_tau = nn.Parameter(torch.tensor(math.log(spec.value)))
        else:
            self.register_buffer("tau_fixed", torch.tensor(float(spec.value)))
        self._init_parameters(seed)

    def _init_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
            elif isinstance(module, nn.MultiheadAttention):
                nn.init.trunc_normal_(module.in_proj_weight, std=0.02, a=-0.04, b=0.04, generator=gen)
                nn.init.zeros_(module.in_proj_bias)
        for name in ("cls_token", "pos_embed"):
            param = getattr(self.image_encoder, name, None)
            if param is not None:
                nn.init.trunc_normal_(param, std=0.02, a=-0.04, b=0.04, generator=gen)
        nn.init.trunc_normal_(self.text_encoder.pos_embed, std=0.02, a=-0.04, b=0.04, generator=gen)

    def temperature(self) -> torch.Tensor:
        """Current tau as a scalar tensor; always positive."""
        spec = self.config.temperature
        if spec.mode == "learnable":
            return torch.clamp(
                self.log_tau, min=math.log(spec.tau_min), max=math.log(spec.tau_max)
            ).exp()
        return self.tau_fixed

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        """B x 3 x S x S normalized floats -> B x d unit-norm embeddings."""
        expected = (3, self.config.image_size, self.config.image_size)
        if tuple(images.shape[1:]) != expected:
            raise ValueError(f"expected image batch of shape B x {expected}, got {tuple(images.shape)}")
        return F.normalize(self.image_proj(self.image_encoder(images)), dim=-1)

    def encode_texts(self, tokens: torch.Tensor) -> torch.Tensor:
        """B x L token ids -> B x d unit-norm embeddings pooled at end-of-text."""
        return F.normalize(self.text_proj(self.text_encoder(tokens)), dim=-1)

    def no_decay_param_names(self) -> set[str]:
        """Parameters excluded from weight decay: norm gains/biases and tau."""
        names = set()
        for mod_name, module in self.named_modules():
            if isinstance(module, (nn.LayerNorm, nn.GroupNorm)):
                for p_name, _ in module.named_parameters(recurse=False):
                    names.add(f"{mod_name}.{p_name}" if mod_name else p_name)
        if self.config.temperature.mode == "learnable":
            names.add("log_tau")
        return names


def _block_params(width: int) -> int:
    attn = 3 * width * width + 3 * width + width * width + width
    mlp = width * 4 * width + 4 * width + 4 * width * width + width
    norms = 4 * width
    return attn + mlp + norms


def analytic_parameter_count(config: EncoderConfig) -> int:
    """Expected number of trainable parameters for a config (drift check)."""
    w_i, w_t = config.image_width, config.text_width
    if config.image_type == "vit":
        num_patches = (config.image_size // config.patch_size) ** 2
        image = (
            3 * config.patch_size ** 2 * w_i + w_i  # patch embedding
            + w_i                                   # cls token
            + (num_patches + 1) * w_i               # position embeddings
            + config.image_depth * _block_params(w_i)
            + 2 * w_i                               # final layer norm
        )
    else:
        image = (3 * 9 * w_i + w_i + 2 * w_i) + (config.image_depth - 1) * (
            9 * w_i * w_i + w_i + 2 * w_i
        )
    text = (
        config.vocab_size * w_t
        + config.context_length * w_t
        + config.text_depth * _block_params(w_t)
        + 2 * w_t
    )
    proj = w_i * config.embed_dim + w_t * config.embed_dim
    temp = 1 if config.temperature.mode == "learnable" else 0
    return image + text + proj + temp
