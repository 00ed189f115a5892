"""Shared-weight student/teacher ViT encoders, fusion, decoder and heads.

One encoder processes both modalities, distinguished only by a learned
modality embedding. The teacher is an EMA shadow of the student encoder and
runs without gradients. Fusion keeps every position that is visible in at
least one modality; the decoder reconstructs teacher features at masked
positions from learned query tokens.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import MaskMap, Modality, ModalityImage


@dataclass
class ModelConfig:
    encoder_dim: int = 768
    encoder_mlp_dim: int = 3072
    encoder_layers: int = 12
    encoder_heads: int = 12
    fusion_dim: int = 384
    fusion_mlp_dim: int = 1536
    fusion_layers: int = 3
    fusion_heads: int = 6
    decoder_dim: int = 384
    decoder_mlp_dim: int = 1536
    decoder_layers: int = 4
    decoder_heads: int = 6
    patch_size: int = 16
    image_size: int = 320
    dropout: float = 0.1
    drop_path: float = 0.1

    def __post_init__(self):
        if self.encoder_dim % self.encoder_heads:
            raise ValueError("encoder_dim not divisible by encoder_heads")
        if self.fusion_dim % self.fusion_heads:
            raise ValueError("fusion_dim not divisible by fusion_heads")
        if self.decoder_dim % self.decoder_heads:
            raise ValueError("decoder_dim not divisible by decoder_heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size not divisible by patch_size")

    @classmethod
    def toy(cls, image_size: int = 32) -> "ModelConfig":
        return cls(
            encoder_dim=64,
            encoder_mlp_dim=128,
            encoder_layers=2,
            encoder_heads=4,
            fusion_dim=32,
            fusion_mlp_dim=64,
            fusion_layers=3,
            fusion_heads=2,
            decoder_dim=32,
            decoder_mlp_dim=64,
            decoder_layers=4,
            decoder_heads=2,
            patch_size=16,
            image_size=image_size,
            dropout=0.0,
            drop_path=0.0,
        )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * 3


@dataclass
class TokenSequence:
    """Position-indexed, modality-tagged token embeddings."""

    tokens: torch.Tensor  # N x D
    positions: list[int]
    modality: Modality

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError("tokens must be N x D")
        if len(self.positions) != self.tokens.shape[0]:
            raise ValueError("positions length must match token count")
        if len(set(self.positions)) != len(self.positions):
            raise ValueError("positions must be distinct")


class Role(enum.Enum):
    STUDENT = "student"
    TEACHER = "teacher"


def patchify(image: ModalityImage, patch_size: int) -> np.ndarray:
    """Row-major patches, N x (patch_size^2 * C); lossless."""
    h, w, c = image.pixels.shape
    if h % patch_size or w % patch_size:
        raise ValueError("image dims not divisible by patch size")
    hp, wp = h // patch_size, w // patch_size
    x = image.pixels.reshape(hp, patch_size, wp, patch_size, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(hp * wp, patch_size * patch_size * c)


def unpatchify(patches: np.ndarray, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    hp, wp = grid
    c = patches.shape[1] // (patch_size * patch_size)
    x = patches.reshape(hp, wp, patch_size, patch_size, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(hp * patch_size, wp * patch_size, c)


def sincos_position_encoding(grid: tuple[int, int], dim: int) -> torch.Tensor:
    """Fixed 2D sine/cosine positional table, (grid_h * grid_w) x dim.

    Half the channels encode the row coordinate, half the column; within
    each half, even channels are sines and odd channels cosines.
    """
    if dim % 4:
        raise ValueError("position encoding dim must be divisible by 4")
    hp, wp = grid

    def axis_encoding(coords, d):
        omega = 1.0 / (10000 ** (np.arange(d // 2, dtype=np.float64) / (d // 2)))
        angles = np.outer(coords, omega)  # n x d/2
        out = np.empty((len(coords), d))
        out[:, 0::2] = np.sin(angles)
        out[:, 1::2] = np.cos(angles)
        return out

    rows, cols = np.meshgrid(np.arange(hp), np.arange(wp), indexing="ij")
    enc = np.concatenate(
        [axis_encoding(rows.ravel(), dim // 2), axis_encoding(cols.ravel(), dim // 2)],
        axis=1,
    )
    return torch.from_numpy(enc)


class DropPath(nn.Module):
    """Per-sample stochastic depth on the residual branch."""

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def forward(self, x):
        if self.rate == 0.0 or not self.training:
            return x
        keep = 1.0 - self.rate
        gate = torch.bernoulli(torch.full((x.shape[0], 1), keep, dtype=x.dtype)) / keep
        return x * gate


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        n, d = x.shape
        qkv = self.qkv(x).reshape(n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(1, 2, 0, 3)  # heads x n x head_dim
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = self.drop(attn.softmax(dim=-1))
        out = (attn @ v).transpose(0, 1).reshape(n, d)
        return self.drop(self.proj(out))


class Block(nn.Module):
    """Pre-norm transformer block: attention + GELU MLP with residuals."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, dropout: float, drop_path: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(mlp_dim, dim),
            nn.Dropout(dropout),
        )
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        x = x + self.drop_path(self.attn(self.norm1(x)))
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x


def _init_weights(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class Encoder(nn.Module):
    """Modality-shared ViT encoder (used for both student and teacher)."""

    MODALITY_INDEX = {Modality.RGB: 0, Modality.OTHER: 1}

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.patch_proj = nn.Linear(config.patch_dim, config.encoder_dim)
        self.modality_embed = nn.Parameter(torch.zeros(2, config.encoder_dim))
        self.register_buffer(
            "pos_embed",
            sincos_position_encoding(
                (config.grid_size, config.grid_size), config.encoder_dim
            ),
        )
        rates = np.linspace(0, config.drop_path, config.encoder_layers)
        self.blocks = nn.ModuleList(
            Block(
                config.encoder_dim,
                config.encoder_heads,
                config.encoder_mlp_dim,
                config.dropout,
                float(r),
            )
            for r in rates
        )
        self.norm = nn.LayerNorm(config.encoder_dim)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.modality_embed, std=0.02)

    def embed_tokens(self, patches: torch.Tensor, modality: Modality) -> TokenSequence:
        """Linear patch projection + sinusoidal positions + modality embedding."""
        if patches.shape[1] != self.config.patch_dim:
            raise ValueError(
                f"patch dim {patches.shape[1]} != expected {self.config.patch_dim}"
            )
        n = patches.shape[0]
        tokens = (
            self.patch_proj(patches)
            + self.pos_embed[:n].to(patches.dtype)
            + self.modality_embed[self.MODALITY_INDEX[modality]]
        )
        return TokenSequence(tokens, list(range(n)), modality)

    def encode(
        self,
        tokens: TokenSequence,
        mask: MaskMap | None,
        role: Role,
        positions: list[int] | None = None,
    ) -> TokenSequence:
        """Run the transformer stack.

        The student drops tokens at masked positions first; the teacher keeps
        everything and runs with gradients disabled. ``positions`` overrides
        the default row-major position labelling of the input tokens.
        """
        pos = list(positions) if positions is not None else list(tokens.positions)
        x = tokens.tokens
        if role is Role.STUDENT and mask is not None:
            flat = mask.masked.ravel()
            keep = [i for i, p in enumerate(pos) if not flat[p]]
            if not keep:
                raise ValueError("student has no retained tokens (all masked)")
            x = x[keep]
            pos = [pos[i] for i in keep]
        if role is Role.TEACHER:
            with torch.no_grad():
                for blk in self.blocks:
                    x = blk(x)
                x = self.norm(x)
            x = x.detach()
        else:
            for blk in self.blocks:
                x = blk(x)
            x = self.norm(x)
        return TokenSequence(x, pos, tokens.modality)


@dataclass
class EmaState:
    """Flat EMA shadow of the student encoder parameters."""

    teacher_params: torch.Tensor
    momentum: float

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0,1]")


def ema_update(state: EmaState, student_params: torch.Tensor) -> EmaState:
    """teacher <- m * teacher + (1 - m) * student, elementwise."""
    if state.teacher_params.shape != student_params.shape:
        raise ValueError("parameter layout mismatch")
    m = state.momentum
    with torch.no_grad():
        new = m * state.teacher_params + (1.0 - m) * student_params
    return EmaState(new, m)


def flatten_params(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def unflatten_into(module: nn.Module, flat: torch.Tensor) -> None:
    offset = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(flat[offset : offset + n].view_as(p))
            offset += n
    if offset != flat.numel():
        raise ValueError("parameter layout mismatch")


class Fusion(nn.Module):
    """Merges per-modality student tokens over the union of visible positions."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.proj_rgb = nn.Linear(config.encoder_dim, config.fusion_dim)
        self.proj_other = nn.Linear(config.encoder_dim, config.fusion_dim)
        rates = np.linspace(0, config.drop_path, config.fusion_layers)
        self.blocks = nn.ModuleList(
            Block(
                config.fusion_dim,
                config.fusion_heads,
                config.fusion_mlp_dim,
                config.dropout,
                float(r),
            )
            for r in rates
        )
        self.norm = nn.LayerNorm(config.fusion_dim)
        self.apply(_init_weights)

    def combine(self, f_rgb: TokenSequence, f_other: TokenSequence) -> TokenSequence:
        """Pre-transformer merge: project per modality, mean where both exist."""
        rgb_at = dict(zip(f_rgb.positions, self.proj_rgb(f_rgb.tokens)))
        other_at = dict(zip(f_other.positions, self.proj_other(f_other.tokens)))
        union = sorted(set(rgb_at) | set(other_at))
        if not union:
            raise ValueError("no visible position in either modality")
        rows = []
        for p in union:
            if p in rgb_at and p in other_at:
                rows.append((rgb_at[p] + other_at[p]) / 2)
            elif p in rgb_at:
                rows.append(rgb_at[p])
            else:
                rows.append(other_at[p])
        return TokenSequence(torch.stack(rows), union, Modality.FUSED)

    def forward(
        self,
        f_rgb: TokenSequence,
        f_other: TokenSequence,
    ) -> TokenSequence:
        combined = self.combine(f_rgb, f_other)
        x = combined.tokens
        for blk in self.blocks:
            x = blk(x)
        return TokenSequence(self.norm(x), combined.positions, Modality.FUSED)


class Decoder(nn.Module):
    """Recovers masked-position features from fused context and query tokens."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.context_proj = nn.Linear(config.fusion_dim, config.decoder_dim)
        self.mask_query = nn.Parameter(torch.zeros(config.decoder_dim))
        self.target_modality_embed = nn.Parameter(torch.zeros(2, config.decoder_dim))
        self.register_buffer(
            "pos_embed",
            sincos_position_encoding(
                (config.grid_size, config.grid_size), config.decoder_dim
            ),
        )
        rates = np.linspace(0, config.drop_path, config.decoder_layers)
        self.blocks = nn.ModuleList(
            Block(
                config.decoder_dim,
                config.decoder_heads,
                config.decoder_mlp_dim,
                config.dropout,
                float(r),
            )
            for r in rates
        )
        self.norm = nn.LayerNorm(config.decoder_dim)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.mask_query, std=0.02)
        nn.init.trunc_normal_(self.target_modality_embed, std=0.02)

    def forward(
        self,
        fused: TokenSequence,
        target_positions: list[int],
        target_modality: Modality,
    ) -> TokenSequence:
        if not target_positions:
            empty = fused.tokens.new_zeros((0, self.config.decoder_dim))
            return TokenSequence(empty, [], target_modality)
        pos_table = self.pos_embed.to(fused.tokens.dtype)
        mod_idx = Encoder.MODALITY_INDEX[target_modality]
        queries = (
            self.mask_query
            + pos_table[list(target_positions)]
            + self.target_modality_embed[mod_idx]
        )
        context = self.context_proj(fused.tokens) + pos_table[list(fused.positions)]
        x = torch.cat([queries, context], dim=0)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x[: len(target_positions)])
        return TokenSequence(x, list(target_positions), target_modality)


class PredictionHead(nn.Module):
    """Linear bridge from decoder width back to encoder width."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(config.decoder_dim, config.encoder_dim)
        self.apply(_init_weights)

    def forward(self, decoded: TokenSequence) -> TokenSequence:
        if decoded.tokens.shape[1] != self.proj.in_features:
            raise ValueError("decoded dim does not match prediction head")
        return TokenSequence(
            self.proj(decoded.tokens), list(decoded.positions), decoded.modality
        )


class ModalityClassifierHead(nn.Module):
    """Per-token scalar logit for the modality pseudo-label task."""

    def __init__(self, dim: int):
        super().__init__()
        self.linear = nn.Linear(dim, 1)
        self.apply(_init_weights)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] != self.linear.in_features:
            raise ValueError("token dim does not match classifier head")
        return self.linear(tokens).squeeze(-1)


class PretrainModel(nn.Module):
    """Student encoder + fusion + decoder + heads, with an EMA teacher."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.student = Encoder(config)
        self.fusion = Fusion(config)
        self.decoder = Decoder(config)
        self.pred_head = PredictionHead(config)
        self.cls_head = ModalityClassifierHead(config.encoder_dim)
        self.teacher = Encoder(config)
        self.teacher.load_state_dict(self.student.state_dict())
        for p in self.teacher.parameters():
            p.requires_grad_(False)

    def trainable_modules(self) -> nn.ModuleList:
        return nn.ModuleList(
            [self.student, self.fusion, self.decoder, self.pred_head, self.cls_head]
        )

    def trainable_parameters(self):
        return self.trainable_modules().parameters()

    def ema_step(self, momentum: float) -> None:
        state = EmaState(flatten_params(self.teacher), momentum)
        state = ema_update(state, flatten_params(self.student))
        unflatten_into(self.teacher, state.teacher_params)


# ---------------------------------------------------------------------------
# Named-tensor archive
# ---------------------------------------------------------------------------

_MAGIC = b"PMTAR1\n"


def save_named_tensors(tensors: dict[str, torch.Tensor], path) -> None:
    """Flat archive: magic, JSON manifest (name/shape/dtype/offset), raw bytes."""
    manifest = []
    offset = 0
    blobs = []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        data = arr.tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"tensors": manifest}).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_named_tensors(path) -> dict[str, torch.Tensor]:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a tensor archive")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        data = f.read()
    out = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(data):
            raise ValueError(f"{path}: truncated archive at tensor {entry['name']!r}")
        arr = np.frombuffer(data[start : start + n], dtype=entry["dtype"]).reshape(
            entry["shape"]
        )
        out[entry["name"]] = torch.from_numpy(arr.copy())
    return out


def save_model_params(model: PretrainModel, path) -> None:
    tensors = {f"student/{k}": v for k, v in model.trainable_modules().state_dict().items()}
    tensors.update({f"teacher/{k}": v for k, v in model.teacher.state_dict().items()})
    save_named_tensors(tensors, path)


def load_model_params(model: PretrainModel, path) -> None:
    """Load an archive, verifying every expected name and shape first."""
    tensors = load_named_tensors(path)
    expected = {f"student/{k}": v for k, v in model.trainable_modules().state_dict().items()}
    expected.update({f"teacher/{k}": v for k, v in model.teacher.state_dict().items()})
    for name in sorted(expected):
        if name not in tensors:
            raise ValueError(f"archive missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(expected[name].shape):
            raise ValueError(
                f"shape mismatch for {name!r}: archive {tuple(tensors[name].shape)} "
                f"vs model {tuple(expected[name].shape)}"
            )
    student_sd = {
        k.removeprefix("student/"): v for k, v in tensors.items() if k.startswith("student/")
    }
    teacher_sd = {
        k.removeprefix("teacher/"): v for k, v in tensors.items() if k.startswith("teacher/")
    }
    model.trainable_modules().load_state_dict(student_sd)
    model.teacher.load_state_dict(teacher_sd)
