"""Two-channel spectrogram encoder-decoder.

normalise -> pad -> patchify -> project -> + positional encoding ->
encoder blocks -> decoder blocks -> reconstruction head -> fold -> unpad.
No token masking: every patch passes through both stacks.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from rfsr.dataset import read_bytes, write_atomic
from rfsr.dsp import MagPhaseTensor, StftConfig, from_polar, istft_frames, stft_frames, to_polar
from rfsr.errors import ConfigError, DataError, NumericError

logger = logging.getLogger(__name__)

PRESETS = {
    "desk": {"dim": 64, "enc_layers": 2, "dec_layers": 2, "heads": 4},
    "large": {"dim": 768, "enc_layers": 4, "dec_layers": 2, "heads": 12},
}


def _padded(size: int, kernel: int, stride: int) -> int:
    size = max(size, kernel)
    return kernel + math.ceil((size - kernel) / stride) * stride


@dataclass
class ModelConfig:
    patch_t: int = 8
    patch_f: int = 8
    stride_t: int = 8
    stride_f: int = 8
    dim: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    n_frames: int = 49
    n_bins: int = 257

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ConfigError(f"model.dim={self.dim} is not divisible by model.heads={self.heads}")
        if self.dim % 4:
            raise ConfigError(f"model.dim={self.dim} must be a multiple of 4 for the 2-D positional encoding")
        if self.stride_t > self.patch_t or self.stride_f > self.patch_f:
            raise ConfigError("patch strides larger than the kernel leave gaps")

    @classmethod
    def preset(cls, name: str, **overrides) -> ModelConfig:
        if name not in PRESETS:
            raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**(PRESETS[name] | overrides))

    @property
    def pad_t(self) -> int:
        return _padded(self.n_frames, self.patch_t, self.stride_t)

    @property
    def pad_f(self) -> int:
        return _padded(self.n_bins, self.patch_f, self.stride_f)

    @property
    def grid(self) -> tuple[int, int]:
        return (
            (self.pad_t - self.patch_t) // self.stride_t + 1,
            (self.pad_f - self.patch_f) // self.stride_f + 1,
        )

    @property
    def n_patches(self) -> int:
        grid_t, grid_f = self.grid
        return grid_t * grid_f

    @property
    def patch_dim(self) -> int:
        return 2 * self.patch_t * self.patch_f


def sinusoid_ladder(positions: Tensor, dim: int) -> Tensor:
    freqs = 10000.0 ** (-2 * torch.arange(dim // 2, dtype=torch.float64) / dim)
    angles = positions.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([angles.sin(), angles.cos()], dim=1)


def positional_encoding(grid_t: int, grid_f: int, dim: int) -> Tensor:
    """First dim/2 columns encode the time block, the rest the frequency block."""
    t_idx = torch.arange(grid_t).repeat_interleave(grid_f)
    f_idx = torch.arange(grid_f).repeat(grid_t)
    return torch.cat([sinusoid_ladder(t_idx, dim // 2), sinusoid_ladder(f_idx, dim // 2)], dim=1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(x)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class SpectralViT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.check_finite = True
        self.norm = nn.BatchNorm2d(2, eps=1e-5, momentum=0.1)
        self.proj = nn.Linear(cfg.patch_dim, cfg.dim, bias=False)
        self.register_buffer(
            "pos_embed", positional_encoding(*cfg.grid, cfg.dim), persistent=False
        )
        self.encoder = nn.ModuleList(
            Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.enc_layers)
        )
        self.encoder_norm = nn.LayerNorm(cfg.dim)
        self.decoder = nn.ModuleList(
            Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.dec_layers)
        )
        self.decoder_norm = nn.LayerNorm(cfg.dim)
        self.recon = nn.Linear(cfg.dim, cfg.patch_dim)
        self.apply(_init_weights)

    def _check(self, name: str, x: Tensor) -> Tensor:
        if self.check_finite and not torch.isfinite(x).all():
            raise NumericError(f"non-finite values after {name}")
        return x

    def pad(self, x: Tensor) -> Tensor:
        return F.pad(x, (0, self.cfg.pad_f - x.shape[-1], 0, self.cfg.pad_t - x.shape[-2]))

    def patchify(self, x: Tensor) -> Tensor:
        """(B, 2, pad_t, pad_f) -> (B, N, 2*k_t*k_f), channel-major rows, time blocks outer."""
        cols = F.unfold(
            x, (self.cfg.patch_t, self.cfg.patch_f), stride=(self.cfg.stride_t, self.cfg.stride_f)
        )
        return cols.transpose(1, 2)

    def fold(self, patches: Tensor) -> Tensor:
        kw = {
            "output_size": (self.cfg.pad_t, self.cfg.pad_f),
            "kernel_size": (self.cfg.patch_t, self.cfg.patch_f),
            "stride": (self.cfg.stride_t, self.cfg.stride_f),
        }
        summed = F.fold(patches.transpose(1, 2), **kw)
        ones = torch.ones(1, patches.shape[2], patches.shape[1], dtype=patches.dtype, device=patches.device)
        return summed / F.fold(ones, **kw)

    def transform_patches(self, patches: Tensor) -> Tensor:
        x = self._check("projection", self.proj(patches) + self.pos_embed.to(patches.dtype))
        for i, block in enumerate(self.encoder):
            x = self._check(f"encoder block {i}", block(x))
        x = self.encoder_norm(x)
        for i, block in enumerate(self.decoder):
            x = self._check(f"decoder block {i}", block(x))
        return self._check("reconstruction head", self.recon(self.decoder_norm(x)))

    def forward(self, x: Tensor) -> Tensor:
        """(B, 2, T, F) magnitude/phase -> predicted (B, 2, T, F) magnitude/phase."""
        n_frames, n_bins = x.shape[-2:]
        x = self._check("input normalisation", self.norm(self._check("input", x)))
        out = self.fold(self.transform_patches(self.patchify(self.pad(x))))
        out = out[..., :n_frames, :n_bins]
        mag = F.softplus(out[:, 0])
        phase = torch.atan2(torch.sin(out[:, 1]), torch.cos(out[:, 1]))
        return torch.stack([mag, phase], dim=1)


def stack_polar(polar: MagPhaseTensor, dtype: torch.dtype = torch.float32) -> Tensor:
    mag = torch.as_tensor(np.asarray(polar.mag), dtype=dtype)
    phase = torch.as_tensor(np.asarray(polar.phase), dtype=dtype)
    x = torch.stack([mag, phase], dim=-3)
    return x if x.dim() == 4 else x.unsqueeze(0)


def predict(model: SpectralViT, polar: MagPhaseTensor) -> MagPhaseTensor:
    """Inference on numpy polar spectrograms; keeps running statistics untouched."""
    dtype = next(model.parameters()).dtype
    x = stack_polar(polar, dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(x).to(torch.float64).numpy()
    finally:
        model.train(was_training)
    if np.asarray(polar.mag).ndim == 2:
        out = out[0]
    return MagPhaseTensor(mag=out[..., 0, :, :], phase=out[..., 1, :, :])


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    if loss.grad_fn is None:
        raise NumericError("backward called without a recorded forward pass")
    loss.backward(retain_graph=retain_graph)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


CHECKPOINT_MAGIC = b"RFCK"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def save_checkpoint(model: SpectralViT, path: Path, extra: dict | None = None) -> Path:
    tensors, chunks, offset = [], [], 0
    for name, value in model.state_dict().items():
        array = value.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(value.shape), "dtype": str(value.dtype).removeprefix("torch."),
                        "offset": offset, "count": int(array.size)})
        chunks.append(array.tobytes())
        offset += array.nbytes
    header = json.dumps({"model": asdict(model.cfg), "tensors": tensors, "extra": extra or {}}).encode()
    write_atomic(path, _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header + b"".join(chunks))
    return Path(path)


def load_checkpoint(path: Path) -> tuple[SpectralViT, dict]:
    payload = read_bytes(path)
    if len(payload) < _PREFIX.size:
        raise DataError(f"{path}: truncated checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not an RFCK v{CHECKPOINT_VERSION} checkpoint")
    try:
        header = json.loads(payload[_PREFIX.size : _PREFIX.size + header_len])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed checkpoint header: {e}") from e

    model = SpectralViT(ModelConfig(**header["model"]))
    base = _PREFIX.size + header_len
    state = {}
    for entry in header["tensors"]:
        array = np.frombuffer(payload, dtype="<f4", count=entry["count"], offset=base + entry["offset"])
        state[entry["name"]] = torch.from_numpy(array.copy()).reshape(entry["shape"]).to(getattr(torch, entry["dtype"]))
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise DataError(f"{path}: parameters do not match the stored config: {e}") from e
    return model, header.get("extra", {})


def infer_lines(model: SpectralViT, lines: np.ndarray, stft_cfg: StftConfig, batch_size: int = 64) -> np.ndarray:
    """Low-band RF lines (N, L) -> predicted wide-band RF lines (N, L)."""
    lines = np.atleast_2d(np.asarray(lines, dtype=np.float64))
    n_frames = stft_cfg.n_frames(lines.shape[-1])
    if (n_frames, stft_cfg.n_bins) != (model.cfg.n_frames, model.cfg.n_bins):
        raise DataError(
            f"checkpoint expects {model.cfg.n_frames}x{model.cfg.n_bins} spectrograms, "
            f"lines of length {lines.shape[-1]} give {n_frames}x{stft_cfg.n_bins}"
        )
    out = []
    for start in range(0, len(lines), batch_size):
        chunk = lines[start : start + batch_size]
        pred = predict(model, to_polar(stft_frames(chunk, stft_cfg)))
        out.append(istft_frames(from_polar(pred), stft_cfg, chunk.shape[-1]))
    return np.concatenate(out) if out else np.zeros_like(lines)
