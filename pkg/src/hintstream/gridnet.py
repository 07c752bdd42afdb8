"""Causal grid-structured backbone used by both the small and large models.

Each block interleaves three axis-separable stages over a latent of shape
(batch, T, F, D):

* an intra-frame frequency stage (bidirectional LSTM along F, per frame),
* a sub-band temporal stage (unidirectional LSTM along T, per bin),
* optionally a causal local self-attention stage along T (per bin, weights
  shared across bins) with a feed-forward sublayer.

Layer norm precedes every stage and a residual follows it, so the latent
shape (D, F, T) is invariant across blocks.  The temporal stage and the
attention mask are the only places information can move along time, and both
are strictly causal.

Streaming evaluation carries LSTM states and an attention token cache per
block; chunk-by-chunk evaluation matches the full-sequence pass to float32
rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from . import numerics
from .errors import ConfigError

SPEAKER_EMBED_DIM = 32


@dataclass
class GridConfig:
    """Hyperparameters of one backbone model."""

    d: int  # embedding dimension per T-F unit
    b: int  # number of blocks
    h: int  # LSTM hidden units
    l: int  # attention heads
    attention: bool
    attention_window: int = 50
    k: int = 2  # output time-frequency channels
    unfold_kernel: int = 1  # I; pointwise in all shipped configs
    unfold_stride: int = 1  # J

    def __post_init__(self):
        if self.d <= 0 or self.b < 1 or self.h <= 0 or self.l <= 0:
            raise ConfigError(f"degenerate model config: {self}")
        if self.unfold_kernel != 1 or self.unfold_stride != 1:
            raise ConfigError("only pointwise unfold (I=J=1) is supported")
        if self.k not in (2, 4):
            raise ConfigError(f"k must be 2 (SE/TSE) or 4 (SS), got {self.k}")
        if self.attention:
            if self.d % self.l != 0:
                raise ConfigError(f"d={self.d} not divisible by l={self.l} heads")
            if self.attention_window < 1:
                raise ConfigError("attention window must be >= 1")


SMALL = GridConfig(d=16, l=4, b=3, h=16, attention=False)
MEDIUM = GridConfig(d=26, l=4, b=3, h=18, attention=False)
LARGE = GridConfig(d=64, l=8, b=3, h=64, attention=True)

SHIPPED_CONFIGS = {"small": SMALL, "medium": MEDIUM, "large": LARGE}

TASK_OUTPUT_CHANNELS = {"ss": 4, "se": 2, "tse": 2}


def config_for(name: str, task: str) -> GridConfig:
    base = SHIPPED_CONFIGS[name]
    return GridConfig(
        d=base.d,
        b=base.b,
        h=base.h,
        l=base.l,
        attention=base.attention,
        attention_window=base.attention_window,
        k=TASK_OUTPUT_CHANNELS[task],
    )


def _init_lstm(lstm: nn.LSTM) -> None:
    # uniform +-1/sqrt(fan_in): fan_in differs for input and recurrent maps
    for name, p in lstm.named_parameters():
        if name.startswith("weight_ih"):
            numerics.uniform_init_(p, lstm.input_size)
        elif name.startswith("weight_hh"):
            numerics.uniform_init_(p, lstm.hidden_size)
        else:
            numerics.uniform_init_(p, lstm.hidden_size)


class FrequencyStage(nn.Module):
    """Bidirectional LSTM along the frequency axis, applied per frame."""

    def __init__(self, d: int, h: int):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.lstm = nn.LSTM(d, h, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * h, d)
        _init_lstm(self.lstm)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        b, t, f, d = z.shape
        x = self.norm(z).reshape(b * t, f, d)
        y, _ = self.lstm(x)
        return z + self.proj(y).reshape(b, t, f, d)


class TemporalStage(nn.Module):
    """Unidirectional LSTM along time, applied per frequency bin."""

    def __init__(self, d: int, h: int):
        super().__init__()
        self.h = h
        self.norm = nn.LayerNorm(d)
        self.lstm = nn.LSTM(d, h, batch_first=True)
        self.proj = nn.Linear(h, d)
        _init_lstm(self.lstm)

    def forward(self, z, state=None):
        b, t, f, d = z.shape
        x = self.norm(z).permute(0, 2, 1, 3).reshape(b * f, t, d)
        y, state = self.lstm(x, state)
        y = self.proj(y).reshape(b, f, t, d).permute(0, 2, 1, 3)
        return z + y, state

    def init_state(self, batch_bins: int, dtype, device):
        shape = (1, batch_bins, self.h)
        return (
            torch.zeros(shape, dtype=dtype, device=device),
            torch.zeros(shape, dtype=dtype, device=device),
        )


class CausalAttentionStage(nn.Module):
    """Local causal self-attention along time, per bin, plus feed-forward."""

    def __init__(self, d: int, heads: int, window: int, ffn_mult: int = 4):
        super().__init__()
        self.heads = heads
        self.window = window
        self.norm_attn = nn.LayerNorm(d)
        self.w_q = nn.Linear(d, d)
        # no key bias: softmax is invariant to a uniform shift of the key
        # logits, so the parameter would be redundant with zero gradient
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d)
        self.w_o = nn.Linear(d, d)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, ffn_mult * d), nn.ReLU(), nn.Linear(ffn_mult * d, d)
        )

    def _attend(self, x_q, x_kv, mask):
        # functional attention shares the qkv/out biases by folding them in
        q = self.w_q(x_q)
        k = self.w_k(x_kv)
        v = self.w_v(x_kv)
        eye = torch.eye(q.shape[-1], dtype=q.dtype, device=q.device)
        out = numerics.mha(
            q, k, v, self.heads, w_q=eye, w_k=eye, w_v=eye, w_o=eye, mask=mask
        )
        return self.w_o(out)

    def _mask(self, t_q: int, t_kv: int, offset: int, causal: bool, device):
        """Mask for queries at absolute times offset..offset+t_q-1 over a
        key cache covering absolute times offset+t_q-t_kv..offset+t_q-1."""
        qpos = torch.arange(t_q, device=device)[:, None] + (t_kv - t_q)
        kpos = torch.arange(t_kv, device=device)[None, :]
        mask = kpos > qpos - self.window
        if causal:
            mask &= kpos <= qpos
        return mask

    def forward(self, z, cache=None, causal: bool = True):
        """``cache`` is the tail of previous post-norm tokens (b*f, n, d);
        returns the updated cache trimmed to window-1 tokens."""
        b, t, f, d = z.shape
        x = self.norm_attn(z).permute(0, 2, 1, 3).reshape(b * f, t, d)
        kv = x if cache is None else torch.cat([cache, x], dim=1)
        n_prev = kv.shape[1] - t
        if causal and t > self.window:
            # a causal query reads at most the last `window` keys, so tile
            # the queries instead of materialising t x t score matrices
            outs = []
            for s in range(0, t, self.window):
                e = min(s + self.window, t)
                lo = max(0, n_prev + s - (self.window - 1))
                q_tile, kv_tile = x[:, s:e], kv[:, lo : n_prev + e]
                mask = self._mask(e - s, kv_tile.shape[1], 0, True, z.device)
                if torch.is_grad_enabled() and q_tile.requires_grad:
                    outs.append(
                        torch.utils.checkpoint.checkpoint(
                            self._attend, q_tile, kv_tile, mask,
                            use_reentrant=False,
                        )
                    )
                else:
                    outs.append(self._attend(q_tile, kv_tile, mask))
            y = torch.cat(outs, dim=1)
        else:
            mask = self._mask(t, kv.shape[1], 0, causal, z.device)
            y = self._attend(x, kv, mask)
        y = y.reshape(b, f, t, d).permute(0, 2, 1, 3)
        z = z + y
        z = z + self.ffn(self.norm_ffn(z))
        new_cache = kv[:, -(self.window - 1) :] if self.window > 1 else kv[:, :0]
        return z, new_cache


class GridBlock(nn.Module):
    """One backbone block: frequency stage, temporal stage, optional attention."""

    def __init__(self, config: GridConfig):
        super().__init__()
        self.config = config
        self.freq = FrequencyStage(config.d, config.h)
        self.time = TemporalStage(config.d, config.h)
        self.attn = (
            CausalAttentionStage(config.d, config.l, config.attention_window)
            if config.attention
            else None
        )

    def forward(self, z, state: Optional[dict] = None, causal_attention: bool = True):
        """Full-sequence or streaming pass.

        ``state`` (mutated in place) carries ``lstm`` and ``attn_cache``
        entries; pass None for a stateless full-sequence evaluation.
        """
        z = self.freq(z)
        if state is None:
            z, _ = self.time(z)
            if self.attn is not None:
                z, _ = self.attn(z, causal=causal_attention)
        else:
            z, state["lstm"] = self.time(z, state.get("lstm"))
            if self.attn is not None:
                z, state["attn_cache"] = self.attn(
                    z, cache=state.get("attn_cache"), causal=causal_attention
                )
        return z

    def init_state(self) -> dict:
        return {}


class Encoder(nn.Module):
    """Pointwise map from stacked real/imag spectrogram channels to D."""

    def __init__(self, d: int, in_channels: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.proj = nn.Linear(2 * in_channels, d)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.shape[1] != self.in_channels:
            raise ConfigError(
                f"expected {self.in_channels} input channels, got {spec.shape[1]}"
            )
        x = torch.cat([spec.real, spec.imag], dim=1)  # (b, 2ch, F, T)
        x = x.permute(0, 3, 2, 1)  # (b, T, F, 2ch)
        return self.proj(x)


class Decoder(nn.Module):
    """Pointwise map from D to K complex time-frequency channels."""

    def __init__(self, d: int, k: int):
        super().__init__()
        self.k = k
        self.proj = nn.Linear(d, 2 * k)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        y = self.proj(z)  # (b, T, F, 2K)
        y = y.permute(0, 3, 2, 1)  # (b, 2K, F, T)
        return torch.complex(y[:, : self.k], y[:, self.k :])


class SpeakerEncoder(nn.Module):
    """Enrollment-utterance encoder for target speaker extraction."""

    def __init__(self, config: GridConfig):
        super().__init__()
        self.encoder = Encoder(config.d)
        self.block = GridBlock(config)
        self.proj = nn.Linear(config.d, SPEAKER_EMBED_DIM)

    def forward(self, enrollment_spec: torch.Tensor) -> torch.Tensor:
        z = self.block(self.encoder(enrollment_spec))
        return self.proj(z.mean(dim=(1, 2)))  # (b, embed)


class GridNet(nn.Module):
    """Full backbone model for one task (``ss``, ``se`` or ``tse``)."""

    def __init__(self, config: GridConfig, task: str = "ss"):
        super().__init__()
        if task not in TASK_OUTPUT_CHANNELS:
            raise ConfigError(f"unknown task {task!r}")
        if config.k != TASK_OUTPUT_CHANNELS[task]:
            raise ConfigError(
                f"config k={config.k} inconsistent with task {task!r}"
            )
        self.config = config
        self.task = task
        self.encoder = Encoder(config.d)
        self.blocks = nn.ModuleList(GridBlock(config) for _ in range(config.b))
        self.decoder = Decoder(config.d, config.k)
        if task == "tse":
            self.speaker_encoder = SpeakerEncoder(config)
            self.speaker_gate = nn.Linear(SPEAKER_EMBED_DIM, config.d)
        else:
            self.speaker_encoder = None
            self.speaker_gate = None

    # -- conditioning --------------------------------------------------

    def speaker_embedding(self, enrollment_spec: torch.Tensor) -> torch.Tensor:
        if self.speaker_encoder is None:
            raise ConfigError("speaker embeddings only exist for the TSE task")
        return self.speaker_encoder(enrollment_spec)

    def tse_condition(self, z0: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        """Scale the input latent per D-channel by a dense map of the
        speaker embedding."""
        if self.speaker_gate is None:
            raise ConfigError("model was not built for TSE")
        gate = self.speaker_gate(embedding)  # (b, d)
        return z0 * gate[:, None, None, :]

    def encode(self, spec: torch.Tensor, speaker_embedding=None) -> torch.Tensor:
        z = self.encoder(spec)
        if self.task == "tse":
            if speaker_embedding is None:
                raise ConfigError("TSE forward requires an enrollment embedding")
            z = self.tse_condition(z, speaker_embedding)
        return z

    # -- offline -------------------------------------------------------

    def forward(
        self,
        spec: torch.Tensor,
        speaker_embedding: Optional[torch.Tensor] = None,
        causal_attention: bool = True,
        return_latents: bool = False,
    ):
        """``spec`` is complex (b, 2, F, T); returns complex (b, K, F, T)."""
        z = self.encode(spec, speaker_embedding)
        latents = [z]
        for block in self.blocks:
            if torch.is_grad_enabled() and z.requires_grad:
                # recompute block internals in backward; full-length training
                # sequences do not fit in memory otherwise
                z = torch.utils.checkpoint.checkpoint(
                    lambda zz, blk=block: blk(zz, causal_attention=causal_attention),
                    z,
                    use_reentrant=False,
                )
            else:
                z = block(z, causal_attention=causal_attention)
            latents.append(z)
        out = self.decoder(z)
        if return_latents:
            return out, latents
        return out

    # -- streaming -------------------------------------------------------

    def init_stream_state(self) -> List[dict]:
        return [block.init_state() for block in self.blocks]

    def step(
        self,
        spec_frames: torch.Tensor,
        state: List[dict],
        speaker_embedding: Optional[torch.Tensor] = None,
        causal_attention: bool = True,
    ) -> torch.Tensor:
        """Process ``spec_frames`` (b, 2, F, n) given carried ``state``."""
        z = self.encode(spec_frames, speaker_embedding)
        for block, block_state in zip(self.blocks, state):
            z = block(z, state=block_state, causal_attention=causal_attention)
        return self.decoder(z)


def mac_estimate_per_chunk(config: GridConfig, bins: int = 97) -> int:
    """Analytic multiply-accumulate count for one new chunk (one frame).

    Counts the dense, LSTM, and attention products; reported for comparison
    against published figures, never gated.
    """
    d, h, f = config.d, config.h, bins
    total = f * 4 * d  # encoder
    per_lstm_step = 4 * h * (d + h)
    for _ in range(config.b):
        total += 2 * f * per_lstm_step + f * 2 * h * d  # frequency stage
        total += f * per_lstm_step + f * h * d  # temporal stage
        if config.attention:
            w = config.attention_window
            total += f * (4 * d * d + 2 * w * d)  # qkvo + scores + context
            total += f * 8 * d * d  # feed-forward
    total += f * d * 2 * config.k  # decoder
    return total


def param_count(config: GridConfig, task: str = "ss", include_speaker: bool = False) -> int:
    """Exact count of trainable scalars by enumerating model parameters."""
    model = GridNet(config, task=task)
    total = 0
    for name, p in model.named_parameters():
        if not include_speaker and (
            name.startswith("speaker_encoder") or name.startswith("speaker_gate")
        ):
            continue
        if p.requires_grad:
            total += p.numel()
    return total
