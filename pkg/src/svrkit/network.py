"""Pose regression network: score slices, encode, and predict rigid motion.

The model takes a multiband slice stack ``(B, K, H, W)`` plus a motion-free
reference volume ``(B, D, H, W)`` and outputs six rigid parameters (three
rotations in degrees, three translations in mm).  An optional self-attention
scorer weights every pixel row of the stack before encoding, letting the
regressor discount rows that disagree with the rest of the shot.

Architecture, in order:

* scorer: rows as tokens, learned positions, a small post-norm transformer,
  and a sigmoid map back to per-pixel weights in (0, 1).  The output layer
  starts at zero so scoring begins as a uniform 0.5.
* a 2D convolution lifting the K weighted slices to the full volume depth.
* two independent 3D residual encoders (four stages, one basic block each,
  all stride 2) for the lifted stack and the reference.
* three grouped-convolution bottleneck blocks over the concatenated
  features, global average pooling, and a zero-initialised linear head, so
  an untrained model predicts exactly zero motion.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

__all__ = [
    "ModelConfig",
    "full_scale_config",
    "desk_scale_config",
    "MultiHeadSelfAttention",
    "TransformerLayer",
    "SliceScorer",
    "ResidualEncoder3d",
    "SliceToVolumeRegressor",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Every architecture knob in one immutable record."""

    volume_shape: tuple[int, int, int] = (70, 100, 100)
    stack_slices: int = 6
    use_attention: bool = True
    hidden_dim: int = 256
    num_heads: int = 8
    num_layers: int = 2
    ffn_dim: int = 8192
    encoder_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    stem_kernel: int = 7
    resnext_width: int = 512
    resnext_blocks: int = 3
    cardinality: int = 32

    def __post_init__(self) -> None:
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 16:
            raise ValueError(f"volume_shape dims must be >= 16, got {self.volume_shape}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.num_heads}"
            )
        if self.stem_kernel % 2 != 1:
            raise ValueError(f"stem_kernel must be odd, got {self.stem_kernel}")
        if self.resnext_width % self.cardinality != 0:
            raise ValueError(
                f"resnext_width {self.resnext_width} not divisible by "
                f"cardinality {self.cardinality}"
            )
        if min(self.stack_slices, self.num_layers, self.ffn_dim, self.resnext_blocks) < 1:
            raise ValueError("all size fields must be positive")
        object.__setattr__(self, "volume_shape", tuple(int(n) for n in self.volume_shape))
        object.__setattr__(
            self, "encoder_channels", tuple(int(c) for c in self.encoder_channels)
        )

    @property
    def n_tokens(self) -> int:
        return self.stack_slices * self.volume_shape[1]

    @property
    def token_width(self) -> int:
        return self.volume_shape[2]


def full_scale_config(use_attention: bool = True) -> ModelConfig:
    """Full acquisition-scale model."""
    return ModelConfig(use_attention=use_attention)


def desk_scale_config(use_attention: bool = True) -> ModelConfig:
    """Small configuration that trains in minutes on a CPU."""
    return ModelConfig(
        volume_shape=(24, 32, 32),
        use_attention=use_attention,
        hidden_dim=64,
        num_heads=4,
        ffn_dim=256,
        stem_kernel=3,
        resnext_width=256,
    )


class MultiHeadSelfAttention(nn.Module):
    """Standard scaled dot-product attention with separate q/k/v/out maps."""

    def __init__(self, hidden_dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.q_proj = nn.Linear(hidden_dim, hidden_dim)
        self.k_proj = nn.Linear(hidden_dim, hidden_dim)
        self.v_proj = nn.Linear(hidden_dim, hidden_dim)
        self.o_proj = nn.Linear(hidden_dim, hidden_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, tokens, channels = x.shape

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(batch, tokens, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scale = self.head_dim ** -0.5
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(batch, tokens, channels)
        return self.o_proj(out)


class TransformerLayer(nn.Module):
    """Post-norm block: normalise after each residual sum."""

    def __init__(self, hidden_dim: int, num_heads: int, ffn_dim: int) -> None:
        super().__init__()
        self.attn = MultiHeadSelfAttention(hidden_dim, num_heads)
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.ff = nn.Sequential(
            nn.Linear(hidden_dim, ffn_dim),
            nn.ReLU(inplace=True),
            nn.Linear(ffn_dim, hidden_dim),
        )
        self.norm2 = nn.LayerNorm(hidden_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ff(x))


class SliceScorer(nn.Module):
    """Per-pixel reliability weights for a slice stack, rows as tokens."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.embed = nn.Linear(config.token_width, config.hidden_dim)
        self.positions = nn.Parameter(torch.empty(config.n_tokens, config.hidden_dim))
        nn.init.normal_(self.positions, std=0.02)
        self.layers = nn.ModuleList(
            TransformerLayer(config.hidden_dim, config.num_heads, config.ffn_dim)
            for _ in range(config.num_layers)
        )
        self.out = nn.Linear(config.hidden_dim, config.token_width)
        # zero logits at init: every score starts at exactly 0.5
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        batch, slices, height, width = stack.shape
        tokens = stack.reshape(batch, slices * height, width)
        x = self.embed(tokens) + self.positions
        for layer in self.layers:
            x = layer(x)
        logits = self.out(x)
        return torch.sigmoid(logits).reshape(batch, slices, height, width)


class BasicBlock3d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_ch),
            )
        else:
            self.down = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.down(x))


class ResidualEncoder3d(nn.Module):
    """Ten-layer residual encoder: stem plus four stride-2 basic blocks."""

    def __init__(self, channels: tuple[int, int, int, int], stem_kernel: int) -> None:
        super().__init__()
        first = channels[0]
        self.stem = nn.Sequential(
            nn.Conv3d(1, first, stem_kernel, padding=stem_kernel // 2, bias=False),
            nn.BatchNorm3d(first),
            nn.ReLU(inplace=True),
        )
        blocks = []
        in_ch = first
        for out_ch in channels:
            blocks.append(BasicBlock3d(in_ch, out_ch, stride=2))
            in_ch = out_ch
        self.stages = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(self.stem(x))


class ResNeXtBlock3d(nn.Module):
    """Bottleneck with a grouped middle convolution and identity skip."""

    def __init__(self, channels: int, width: int, cardinality: int) -> None:
        super().__init__()
        self.reduce = nn.Conv3d(channels, width, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(width)
        self.grouped = nn.Conv3d(width, width, 3, padding=1, groups=cardinality, bias=False)
        self.bn2 = nn.BatchNorm3d(width)
        self.expand = nn.Conv3d(width, channels, 1, bias=False)
        self.bn3 = nn.BatchNorm3d(channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.reduce(x)))
        out = self.relu(self.bn2(self.grouped(out)))
        out = self.bn3(self.expand(out))
        return self.relu(out + x)


class SliceToVolumeRegressor(nn.Module):
    """Full pipeline from (stack, reference volume) to six motion parameters."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        depth = config.volume_shape[0]
        if config.use_attention:
            self.scorer = SliceScorer(config)
        self.lift = nn.Conv2d(config.stack_slices, depth, 3, padding=1)
        self.stack_encoder = ResidualEncoder3d(config.encoder_channels, config.stem_kernel)
        self.volume_encoder = ResidualEncoder3d(config.encoder_channels, config.stem_kernel)
        fused = 2 * config.encoder_channels[-1]
        self.regressor = nn.Sequential(
            *(
                ResNeXtBlock3d(fused, config.resnext_width, config.cardinality)
                for _ in range(config.resnext_blocks)
            )
        )
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.head = nn.Linear(fused, 6)
        # zero head: the untrained model predicts the identity motion
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _check_shapes(self, stack: torch.Tensor, volume: torch.Tensor) -> None:
        depth, height, width = self.config.volume_shape
        if stack.ndim != 4 or stack.shape[1:] != (self.config.stack_slices, height, width):
            raise ValueError(
                f"stack shape {tuple(stack.shape)} does not match "
                f"(B, {self.config.stack_slices}, {height}, {width})"
            )
        if volume.ndim != 4 or volume.shape[1:] != (depth, height, width):
            raise ValueError(
                f"volume shape {tuple(volume.shape)} does not match "
                f"(B, {depth}, {height}, {width})"
            )
        if stack.shape[0] != volume.shape[0]:
            raise ValueError("stack and volume batch sizes differ")

    def forward(
        self,
        stack: torch.Tensor,
        volume: torch.Tensor,
        force_unit_scores: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Predict motion parameters; also return the scores when computed.

        ``force_unit_scores`` bypasses the scorer (weights all one), which
        makes an attention model behave exactly like its plain counterpart.
        """
        self._check_shapes(stack, volume)
        scores = None
        weighted = stack
        if self.config.use_attention and not force_unit_scores:
            scores = self.scorer(stack)
            weighted = stack * scores
        lifted = self.lift(weighted).unsqueeze(1)
        stack_features = self.stack_encoder(lifted)
        volume_features = self.volume_encoder(volume.unsqueeze(1))
        fused = torch.cat([stack_features, volume_features], dim=1)
        pooled = self.pool(self.regressor(fused)).flatten(1)
        return self.head(pooled), scores


def count_parameters(module: nn.Module) -> int:
    """Total learnable parameter count."""
    return sum(p.numel() for p in module.parameters())


def _config_to_jsonable(config: ModelConfig) -> dict:
    payload = asdict(config)
    payload["volume_shape"] = list(payload["volume_shape"])
    payload["encoder_channels"] = list(payload["encoder_channels"])
    return payload


def _config_from_jsonable(payload: dict) -> ModelConfig:
    payload = dict(payload)
    payload["volume_shape"] = tuple(payload["volume_shape"])
    payload["encoder_channels"] = tuple(payload["encoder_channels"])
    return ModelConfig(**payload)


def save_checkpoint(
    model: SliceToVolumeRegressor, path: str | Path, meta: dict | None = None
) -> Path:
    """Persist weights plus config as a compressed archive with a JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": _config_to_jsonable(model.config),
        "meta": meta or {},
    }
    arrays = {
        f"param::{name}": tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    header_bytes = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    np.savez_compressed(path, __header__=header_bytes, **arrays)
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_checkpoint(path: str | Path) -> tuple[SliceToVolumeRegressor, dict]:
    """Rebuild a model from :func:`save_checkpoint` output; returns (model, meta)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    with np.load(path) as archive:
        if "__header__" not in archive:
            raise ValueError(f"{path}: not a model checkpoint")
        header = json.loads(bytes(archive["__header__"]).decode())
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint format {header.get('format_version')}"
            )
        state = {
            name[len("param::"):]: torch.from_numpy(np.array(archive[name]))
            for name in archive.files
            if name.startswith("param::")
        }
    model = SliceToVolumeRegressor(_config_from_jsonable(header["config"]))
    model.load_state_dict(state)
    model.eval()
    return model, header["meta"]
