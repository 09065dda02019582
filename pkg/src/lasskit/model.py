"""FiLM-conditioned ResUNet separator operating on STFT magnitudes.

Feature maps are laid out as (batch, channels, frequency, time). Every conv
layer inside a residual unit is followed by a FiLM modulation whose
(gamma, beta) come from a two-layer generator fed with the query embedding.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import AudioClip
from .dsp import MaskPair, StftConfig, window_sumsquare
from .query import QueryEmbedding, Vocabulary, canonicalize


@dataclass(frozen=True)
class ModelConfig:
    n_encoder_blocks: int = 3
    n_bottleneck_blocks: int = 2
    channels: tuple[int, ...] = (8, 16, 32)
    units_per_block: int = 2
    kernel: int = 3
    leaky_slope: float = 0.01
    d_query: int = 64
    film_hidden: int = 64
    mask_ceiling: float = 2.0
    downsample: str = "avgpool2x2"
    bn_momentum: float = 0.99
    sample_rate: int = 8000
    window_size: int = 256
    hop_size: int = 80

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != self.n_encoder_blocks:
            raise ValueError("need one channel count per encoder block")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError("encoder channels must be strictly increasing")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.downsample != "avgpool2x2":
            raise ValueError(f"unsupported downsampling {self.downsample!r}")
        if not self.mask_ceiling > 0:
            raise ValueError("mask_ceiling must be positive")
        if self.n_bottleneck_blocks < 1 or self.units_per_block < 1:
            raise ValueError("need at least one bottleneck block and one unit per block")
        StftConfig(self.window_size, self.hop_size)

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.window_size, self.hop_size)

    @property
    def bottleneck_channels(self) -> int:
        return 2 * self.channels[-1]

    def film_channels(self) -> list[int]:
        """Channel count of every FiLM-modulated conv layer, in forward order."""
        out = []
        for c in self.channels:
            out += [c] * (2 * self.units_per_block)
        out += [self.bottleneck_channels] * (2 * self.n_bottleneck_blocks)
        for c in reversed(self.channels):
            out += [c] * (2 * self.units_per_block)
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "channels": tuple(d["channels"])})

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(
            n_encoder_blocks=6,
            n_bottleneck_blocks=4,
            channels=(32, 64, 128, 256, 512, 1024),
            units_per_block=4,
            d_query=512,
            film_hidden=512,
            sample_rate=32000,
            window_size=1024,
            hop_size=320,
        )


# -- differentiable spectral transforms ------------------------------------


def torch_stft(x: torch.Tensor, cfg: StftConfig, window: torch.Tensor) -> torch.Tensor:
    """(B, L) real -> (B, T, F) complex; same framing as :func:`lasskit.dsp.stft`."""
    if cfg.center_pad:
        half = cfg.window_size // 2
        mode = "reflect" if x.shape[-1] > half else "constant"
        x = F.pad(x[:, None, :], (half, half), mode=mode)[:, 0, :]
    frames = x.unfold(-1, cfg.window_size, cfg.hop_size)
    return torch.fft.rfft(frames * window, dim=-1)


def torch_istft(spec: torch.Tensor, cfg: StftConfig, window: torch.Tensor, length: int) -> torch.Tensor:
    """(B, T, F) complex -> (B, length) real via weighted overlap-add."""
    n_frames = spec.shape[1]
    frames = torch.fft.irfft(spec, n=cfg.window_size, dim=-1) * window
    total = cfg.window_size + cfg.hop_size * (n_frames - 1)
    y = F.fold(
        frames.transpose(1, 2),
        output_size=(1, total),
        kernel_size=(1, cfg.window_size),
        stride=(1, cfg.hop_size),
    )[:, 0, 0, :]
    denom = torch.as_tensor(window_sumsquare(cfg, n_frames), dtype=y.dtype)
    start = cfg.window_size // 2 if cfg.center_pad else 0
    return y[:, start : start + length] / denom[start : start + length]


# -- building blocks --------------------------------------------------------


def film(h: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Per-channel affine modulation broadcast over (freq, time)."""
    if gamma.shape[-1] != h.shape[1] or beta.shape[-1] != h.shape[1]:
        raise ValueError(f"FiLM params of size {gamma.shape[-1]} for a {h.shape[1]}-channel map")
    return h * gamma[..., None, None] + beta[..., None, None]


class FilmGenerator(nn.Module):
    """Query embedding -> one (gamma, beta) pair per modulated conv layer."""

    def __init__(self, d_query: int, hidden: int, channels: list[int]):
        super().__init__()
        self.channels = list(channels)
        self.fc1 = nn.Linear(d_query, hidden)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, 2 * sum(self.channels))
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, e_q: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        raw = self.fc2(self.act(self.fc1(e_q)))
        out, i = [], 0
        for m in self.channels:
            out.append((1.0 + raw[:, i : i + m], raw[:, i + m : i + 2 * m]))
            i += 2 * m
        return out


class ResidualUnit(nn.Module):
    """Pre-activation residual unit: (BN -> LeakyReLU -> conv -> FiLM) x 2 plus shortcut."""

    n_films = 2

    def __init__(self, in_ch: int, out_ch: int, cfg: ModelConfig):
        super().__init__()
        pad = cfg.kernel // 2
        momentum = 1.0 - cfg.bn_momentum
        self.bn1 = nn.BatchNorm2d(in_ch, momentum=momentum)
        self.act1 = nn.LeakyReLU(cfg.leaky_slope)
        self.conv1 = nn.Conv2d(in_ch, out_ch, cfg.kernel, padding=pad, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch, momentum=momentum)
        self.act2 = nn.LeakyReLU(cfg.leaky_slope)
        self.conv2 = nn.Conv2d(out_ch, out_ch, cfg.kernel, padding=pad, bias=False)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, h, films):
        (g1, b1), (g2, b2) = films
        y = film(self.conv1(self.act1(self.bn1(h))), g1, b1)
        y = film(self.conv2(self.act2(self.bn2(y))), g2, b2)
        return self.shortcut(h) + y


class EncoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cfg: ModelConfig):
        super().__init__()
        self.units = nn.ModuleList(
            ResidualUnit(in_ch if i == 0 else out_ch, out_ch, cfg) for i in range(cfg.units_per_block)
        )

    def forward(self, h, films):
        for i, unit in enumerate(self.units):
            h = unit(h, films[2 * i : 2 * i + 2])
        return F.avg_pool2d(h, 2), h


class DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cfg: ModelConfig):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, 2, stride=2)
        self.units = nn.ModuleList(
            ResidualUnit(2 * out_ch if i == 0 else out_ch, out_ch, cfg) for i in range(cfg.units_per_block)
        )

    def forward(self, h, skip, films):
        h = torch.cat([self.up(h), skip], dim=1)
        for i, unit in enumerate(self.units):
            h = unit(h, films[2 * i : 2 * i + 2])
        return h


class QueryTable(nn.Module):
    """Trainable closed-vocabulary embedding table."""

    def __init__(self, vocab: Vocabulary):
        super().__init__()
        self.entries = list(vocab.entries)
        self.table = nn.Parameter(torch.as_tensor(vocab.embedding_table, dtype=torch.float32).clone())
        self._index = {k: i for i, k in enumerate(self.entries)}

    def __contains__(self, query: str) -> bool:
        return canonicalize(query) in self._index

    def forward(self, queries: list[str]) -> torch.Tensor:
        idx = torch.tensor([self._index[canonicalize(q)] for q in queries])
        rows = self.table[idx]
        return rows / rows.norm(dim=-1, keepdim=True)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(list(self.entries), self.table.detach().double().cpu().numpy())


class Separator(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.film_gen = FilmGenerator(cfg.d_query, cfg.film_hidden, cfg.film_channels())
        self.encoder = nn.ModuleList(
            EncoderBlock(1 if i == 0 else ch[i - 1], ch[i], cfg) for i in range(cfg.n_encoder_blocks)
        )
        bc = cfg.bottleneck_channels
        self.bottleneck = nn.ModuleList(
            ResidualUnit(ch[-1] if i == 0 else bc, bc, cfg) for i in range(cfg.n_bottleneck_blocks)
        )
        dec_in = [bc] + list(reversed(ch))[:-1]
        self.decoder = nn.ModuleList(DecoderBlock(i, o, cfg) for i, o in zip(dec_in, reversed(ch)))
        # three channels: magnitude logit, phase real part, phase imaginary part
        self.head = nn.Conv2d(ch[0], 3, 1)
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias.copy_(torch.tensor([0.0, 1.0, 0.0]))
        self._window = cfg.stft.window_array()
        self.query = QueryTable(vocab) if vocab is not None else None
        if vocab is not None and vocab.dim != cfg.d_query:
            raise ValueError(f"vocabulary dim {vocab.dim} != d_query {cfg.d_query}")

    def embed(self, queries: list[str]) -> torch.Tensor:
        if self.query is None:
            raise ValueError("model has no query table")
        return self.query(queries)

    def masks(self, spec: torch.Tensor, e_q: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Complex (B, T, F) mixture spectrogram -> (|M|, angle M), each (B, T, F)."""
        cfg = self.cfg
        n_frames, n_bins = spec.shape[1], spec.shape[2]
        feat = torch.log1p(spec.abs()).transpose(1, 2)[:, None, : n_bins - 1, :]
        mult = 2**cfg.n_encoder_blocks
        pad_f = -(n_bins - 1) % mult
        pad_t = -n_frames % mult
        h = F.pad(feat, (0, pad_t, 0, pad_f))

        films = self.film_gen(e_q)
        k = 0
        skips = []
        for block in self.encoder:
            n = 2 * cfg.units_per_block
            h, skip = block(h, films[k : k + n])
            skips.append(skip)
            k += n
        for unit in self.bottleneck:
            h = unit(h, films[k : k + 2])
            k += 2
        for block, skip in zip(self.decoder, reversed(skips)):
            n = 2 * cfg.units_per_block
            h = block(h, skip, films[k : k + n])
            k += n

        out = self.head(h)[:, :, : n_bins - 1, :n_frames]
        out = F.pad(out, (0, 0, 0, 1), mode="replicate")
        mag = cfg.mask_ceiling * torch.sigmoid(out[:, 0])
        phase = torch.atan2(out[:, 2], out[:, 1])
        return mag.transpose(1, 2), phase.transpose(1, 2)

    def forward(self, mixture: torch.Tensor, e_q: torch.Tensor):
        """(B, L) waveform and (B, D) embedding -> (estimate (B, L), |M|, angle M)."""
        cfg = self.cfg
        if mixture.shape[-1] < cfg.window_size // 2 + 1 and cfg.stft.center_pad:
            raise ValueError("mixture is shorter than one STFT window")
        # built per call in the input dtype so double-precision runs keep an exact window
        window = torch.as_tensor(self._window, dtype=mixture.dtype)
        spec = torch_stft(mixture, cfg.stft, window)
        mag, phase = self.masks(spec, e_q)
        rot = torch.complex(mag * torch.cos(phase), mag * torch.sin(phase))
        est = torch_istft(spec * rot, cfg.stft, window, mixture.shape[-1])
        return est, mag, phase


def separate(
    model: Separator, mixture: AudioClip, e_q: QueryEmbedding
) -> tuple[AudioClip, MaskPair]:
    """Inference on a single clip (batch-norm running statistics)."""
    cfg = model.cfg
    if mixture.sample_rate != cfg.sample_rate:
        raise ValueError(f"model expects {cfg.sample_rate} Hz audio, got {mixture.sample_rate} Hz")
    if len(mixture) < cfg.window_size:
        raise ValueError(f"mixture of {len(mixture)} samples is shorter than the {cfg.window_size}-sample window")
    if e_q.dim != cfg.d_query:
        raise ValueError(f"query embedding has dim {e_q.dim}, model expects {cfg.d_query}")
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ValueError(f"parameter {name} is not finite")
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.tensor(mixture.samples, dtype=dtype)[None]
            e = torch.as_tensor(e_q.normalize().vector, dtype=dtype)[None]
            est, mag, phase = model(x, e)
    finally:
        model.train(was_training)
    mask = MaskPair(mag[0].double().numpy(), np.clip(phase[0].double().numpy(), -np.pi, np.pi))
    return AudioClip(est[0].double().numpy(), mixture.sample_rate), mask


def init_model(cfg: ModelConfig, vocab: Vocabulary | None = None, seed: int = 0) -> Separator:
    """Deterministically initialised separator."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Separator(cfg, vocab)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class ParamStore:
    """Flat, name-ordered view of the trainable parameters."""

    names: list[str] = field(default_factory=list)
    tensors: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def of(cls, model: nn.Module) -> "ParamStore":
        named = list(model.named_parameters())
        return cls([n for n, _ in named], [p for _, p in named])

    def __len__(self) -> int:
        return sum(t.numel() for t in self.tensors)

    def locate(self, flat_index: int) -> tuple[int, int]:
        for i, t in enumerate(self.tensors):
            if flat_index < t.numel():
                return i, flat_index
            flat_index -= t.numel()
        raise IndexError(flat_index)
