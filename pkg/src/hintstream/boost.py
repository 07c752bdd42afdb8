"""Delayed-hint boosting: embedding extraction/compression on the large
side; FiLM contextualization, cross-attention merging and the context cache
on the small side.

Conventions: latents use the model-internal layout (batch, T, F, D); hint
embeddings use channel-first (batch, E, F, T) like the wire format, with
E = 2K/P.  The hint computed from chunk ``i`` is first usable when producing
output chunk ``i + C``.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import numerics
from .errors import ConfigError, ProtocolFault
from .gridnet import GridConfig, GridNet

DEFAULT_CONTEXT_LEN = 49  # past entries beyond the most recent one


@dataclass
class MergeConfig:
    """Shape of the hint-injection path on the small model."""

    context_len: int = DEFAULT_CONTEXT_LEN  # V
    heads: int = 4

    def __post_init__(self):
        if self.context_len < 0:
            raise ConfigError("context length must be >= 0")


def extract_embedding(output_spec: torch.Tensor) -> torch.Tensor:
    """Stack real then imaginary parts of a complex (b, K, F, T) tensor."""
    return torch.cat([output_spec.real, output_spec.imag], dim=1)


def embedding_channels(k: int, ratio: int) -> int:
    if ratio <= 0 or (2 * k) % ratio != 0:
        raise ConfigError(f"2K={2 * k} not divisible by compression ratio {ratio}")
    return 2 * k // ratio


class CompressionModule(nn.Module):
    """Causal kernel-3 convolution over time, shared across frequency bins,
    mapping 2K channels down to 2K/P."""

    KERNEL = 3

    def __init__(self, k: int, ratio: int):
        super().__init__()
        self.k = k
        self.ratio = ratio
        out_ch = embedding_channels(k, ratio)
        self.weight = nn.Parameter(torch.empty(out_ch, 2 * k, self.KERNEL))
        self.bias = nn.Parameter(torch.empty(out_ch))
        fan_in = 2 * k * self.KERNEL
        numerics.uniform_init_(self.weight, fan_in)
        numerics.uniform_init_(self.bias, fan_in)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        """(b, 2K, F, T) -> (b, 2K/P, F, T), causal along T."""
        b, ch, f, t = e.shape
        x = e.permute(0, 2, 1, 3).reshape(b * f, ch, t)
        y = numerics.causal_conv1d(x, self.weight, self.bias)
        return y.reshape(b, f, -1, t).permute(0, 2, 1, 3)

    def init_state(self, b: int, f: int, dtype, device) -> torch.Tensor:
        return torch.zeros(b, 2 * self.k, f, self.KERNEL - 1, dtype=dtype, device=device)

    def step(self, e: torch.Tensor, state: torch.Tensor):
        """Streaming variant: ``e`` holds n new frames; returns (out, state)."""
        hist = torch.cat([state, e], dim=-1)
        b, ch, f, t = hist.shape
        x = hist.permute(0, 2, 1, 3).reshape(b * f, ch, t)
        y = torch.nn.functional.conv1d(x, self.weight, self.bias)
        y = y.reshape(b, f, -1, e.shape[-1]).permute(0, 2, 1, 3)
        return y, hist[..., -(self.KERNEL - 1) :]

    def set_identity(self) -> None:
        """Identity kernel (only defined for P=1): output equals input."""
        if self.ratio != 1:
            raise ConfigError("identity compression kernel requires P=1")
        with torch.no_grad():
            self.weight.zero_()
            self.weight[:, :, -1] = torch.eye(2 * self.k, dtype=self.weight.dtype)
            self.bias.zero_()


def shift_embeddings(e: torch.Tensor, delay_chunks: int) -> torch.Tensor:
    """Right-shift along the last (time) axis by ``delay_chunks``, filling
    the head with zeros: output position i holds input position i - C."""
    if delay_chunks < 0:
        raise ConfigError("delay must be >= 0")
    if delay_chunks == 0:
        return e
    pad = e.new_zeros(*e.shape[:-1], min(delay_chunks, e.shape[-1]))
    return torch.cat([pad, e[..., : max(e.shape[-1] - delay_chunks, 0)]], dim=-1)


class ContextCache:
    """Ring of contextual representations, keyed by source chunk index.

    Readable entries after processing chunk ``i`` are exactly the window
    ``[i - C - V, i - C]``; anything older is evicted.
    """

    def __init__(self, delay_chunks: int, context_len: int):
        self.delay_chunks = delay_chunks
        self.context_len = context_len
        self._entries: "OrderedDict[int, torch.Tensor]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def append(self, source_chunk: int, value: torch.Tensor) -> None:
        if self._entries and source_chunk <= next(reversed(self._entries)):
            raise ProtocolFault(
                f"out-of-order cache append for chunk {source_chunk}"
            )
        self._entries[source_chunk] = value

    def evict_before(self, oldest_kept: int) -> None:
        for key in [k for k in self._entries if k < oldest_kept]:
            del self._entries[key]

    def window(self, chunk_index: int) -> List[torch.Tensor]:
        """Entries usable when producing output chunk ``chunk_index``."""
        lo = chunk_index - self.delay_chunks - self.context_len
        hi = chunk_index - self.delay_chunks
        return [v for k, v in self._entries.items() if lo <= k <= hi]

    def has(self, source_chunk: int) -> bool:
        return source_chunk in self._entries


class MergeModule(nn.Module):
    """FiLM contextualization plus per-bin cross-attention over the hint
    window, with a residual from the current latent."""

    def __init__(self, d: int, hint_channels: int, heads: int):
        super().__init__()
        if d % heads != 0:
            raise ConfigError(f"latent dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.film_proj = nn.Linear(hint_channels, 2 * d)
        self.w_q = nn.Linear(d, d)
        # no key bias: softmax is invariant to a uniform shift of the key
        # logits, so the parameter would be redundant with zero gradient
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d)
        # no output bias: an empty attention window must pass the latent
        # through bit-exactly via the residual
        self.w_o = nn.Linear(d, d, bias=False)

    def contextualize(self, z: torch.Tensor, hint: torch.Tensor) -> torch.Tensor:
        """FiLM: hint-derived scale/shift applied to the latent.

        ``z`` is (..., D), ``hint`` is (..., E) with matching leading dims.
        """
        return numerics.film(z, hint, self.film_proj.weight, self.film_proj.bias)

    def _attend(self, q_tokens, kv_tokens, mask=None):
        q = self.w_q(q_tokens)
        k = self.w_k(kv_tokens)
        v = self.w_v(kv_tokens)
        eye = torch.eye(self.d, dtype=q.dtype, device=q.device)
        out = numerics.mha(q, k, v, self.heads, eye, eye, eye, eye, mask=mask)
        return self.w_o(out)

    def forward_offline(
        self,
        z: torch.Tensor,
        shifted_hints: torch.Tensor,
        delay_chunks: int,
        context_len: int,
    ) -> torch.Tensor:
        """Vectorized equivalent of the streaming merge.

        ``z`` is (b, T, F, D); ``shifted_hints`` is (b, E, F, T) where
        position i holds the hint computed from chunk i - C (zeros before
        that exists).  Output chunk i attends over contextual entries with
        source index in [i-C-V, i-C]; chunks with an empty window pass
        through unchanged.
        """
        b, t, f, d = z.shape
        # undo the shift to recover source-aligned hints for FiLM pairing
        hints = torch.cat(
            [
                shifted_hints[..., delay_chunks:],
                shifted_hints.new_zeros(*shifted_hints.shape[:-1], min(delay_chunks, t)),
            ],
            dim=-1,
        )[..., :t]
        hints = hints.permute(0, 3, 2, 1)  # (b, T, F, E)
        zhat = self.contextualize(z, hints)
        q_all = z.permute(0, 2, 1, 3).reshape(b * f, t, d)
        kv_all = zhat.permute(0, 2, 1, 3).reshape(b * f, t, d)
        idx = torch.arange(t, device=z.device)
        # keys for query i live in [i-C-V, i-C]; tile the queries so the
        # score matrices stay (tile, ~2*tile) instead of (T, T)
        w = context_len + 1
        outs = []
        for s in range(0, t, w):
            e = min(s + w, t)
            lo = max(0, s - delay_chunks - context_len)
            hi = max(0, e - delay_chunks)  # exclusive
            if hi <= lo:
                outs.append(q_all.new_zeros(b * f, e - s, d))
                continue
            qpos = idx[s:e, None]
            kpos = idx[None, lo:hi]
            mask = (kpos <= qpos - delay_chunks) & (
                kpos >= qpos - delay_chunks - context_len
            )
            q_tile, kv_tile = q_all[:, s:e], kv_all[:, lo:hi]
            if torch.is_grad_enabled() and (
                q_tile.requires_grad or kv_tile.requires_grad
            ):
                outs.append(
                    torch.utils.checkpoint.checkpoint(
                        self._attend, q_tile, kv_tile, mask, use_reentrant=False
                    )
                )
            else:
                outs.append(self._attend(q_tile, kv_tile, mask))
        y = torch.cat(outs, dim=1)
        return z + y.reshape(b, f, t, d).permute(0, 2, 1, 3)

    def merge_step(self, z_token: torch.Tensor, window: Sequence[torch.Tensor]) -> torch.Tensor:
        """Streaming merge of one chunk.

        ``z_token`` is (b, F, D); ``window`` is the usable cache slice, each
        entry (b, F, D).  Empty window: pass-through.
        """
        if not window:
            return z_token
        b, f, d = z_token.shape
        q = z_token.reshape(b * f, 1, d)
        kv = torch.stack(list(window), dim=2).reshape(b * f, len(window), d)
        y = self._attend(q, kv)
        return z_token + y.reshape(b, f, d)


class BoostedSmallModel(nn.Module):
    """Small backbone with merge modules between consecutive blocks."""

    def __init__(
        self,
        config: GridConfig,
        hint_channels: int,
        merge: Optional[MergeConfig] = None,
        task: str = "ss",
    ):
        super().__init__()
        self.merge_config = merge or MergeConfig(heads=config.l)
        self.net = GridNet(config, task=task)
        self.hint_channels = hint_channels
        self.merges = nn.ModuleList(
            MergeModule(config.d, hint_channels, self.merge_config.heads)
            for _ in range(config.b - 1)
        )

    @property
    def config(self) -> GridConfig:
        return self.net.config

    def forward(
        self,
        spec: torch.Tensor,
        shifted_hints: torch.Tensor,
        delay_chunks: int,
        speaker_embedding: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Offline boosted pass; ``shifted_hints`` as produced by
        :func:`shift_embeddings`."""
        z = self.net.encode(spec, speaker_embedding)
        for j, block in enumerate(self.net.blocks):
            if torch.is_grad_enabled() and z.requires_grad:
                z = torch.utils.checkpoint.checkpoint(
                    block, z, use_reentrant=False
                )
            else:
                z = block(z)
            if j < len(self.merges):
                z = self.merges[j].forward_offline(
                    z, shifted_hints, delay_chunks, self.merge_config.context_len
                )
        return self.net.decoder(z)


class BoostedStream:
    """Streaming state of the boosted small model on the local node."""

    def __init__(
        self,
        model: BoostedSmallModel,
        delay_chunks: int,
        speaker_embedding: Optional[torch.Tensor] = None,
    ):
        self.model = model
        self.delay_chunks = delay_chunks
        self.speaker_embedding = speaker_embedding
        self.block_states = model.net.init_stream_state()
        v = model.merge_config.context_len
        self.caches = [ContextCache(delay_chunks, v) for _ in model.merges]
        # per-merge history of own latents, needed to contextualize a hint
        # for chunk m once it arrives C ticks later
        self.latent_history: List[Dict[int, torch.Tensor]] = [
            {} for _ in model.merges
        ]

    def cache_sizes(self) -> List[int]:
        return [len(c) for c in self.caches]

    def step(
        self,
        chunk_index: int,
        spec_frame: torch.Tensor,
        delivered_hints: Sequence[Tuple[int, torch.Tensor]],
    ) -> torch.Tensor:
        """Process one chunk.

        ``spec_frame`` is complex (b, 2, F, 1); ``delivered_hints`` holds
        (source_chunk, hint (b, E, F)) pairs that arrived this tick, in
        source order.  Returns the output frame, complex (b, K, F, 1).
        """
        net = self.model.net
        z = net.encode(spec_frame, self.speaker_embedding)
        for j, block in enumerate(net.blocks):
            z = block(z, state=self.block_states[j])
            if j < len(self.model.merges):
                merge = self.model.merges[j]
                history = self.latent_history[j]
                cache = self.caches[j]
                token = z[:, 0]  # (b, F, D)
                history[chunk_index] = token
                for source_chunk, hint in delivered_hints:
                    if source_chunk not in history:
                        raise ProtocolFault(
                            f"latent history underrun: chunk {source_chunk} "
                            f"needed at tick {chunk_index}"
                        )
                    hint_tokens = hint.permute(0, 2, 1)  # (b, F, E)
                    cache.append(
                        source_chunk,
                        merge.contextualize(history[source_chunk], hint_tokens),
                    )
                cache.evict_before(
                    chunk_index - self.delay_chunks - self.model.merge_config.context_len
                )
                for old in [m for m in history if m <= chunk_index - self.delay_chunks]:
                    del history[old]
                merged = merge.merge_step(token, cache.window(chunk_index))
                z = merged[:, None]
        return net.decoder(z)


class JointModel(nn.Module):
    """Large model + compression + boosted small model, trained jointly."""

    def __init__(
        self,
        small_config: GridConfig,
        large_config: GridConfig,
        ratio: int,
        task: str = "ss",
        merge: Optional[MergeConfig] = None,
    ):
        super().__init__()
        if small_config.k != large_config.k:
            raise ConfigError("small and large models must share K")
        self.task = task
        self.ratio = ratio
        self.large = GridNet(large_config, task=task)
        self.compression = CompressionModule(large_config.k, ratio)
        self.small = BoostedSmallModel(
            small_config,
            embedding_channels(large_config.k, ratio),
            merge=merge,
            task=task,
        )

    def hints_offline(
        self,
        spec: torch.Tensor,
        speaker_embedding: Optional[torch.Tensor] = None,
        causal_attention: bool = True,
    ) -> torch.Tensor:
        """Full-sequence large pass producing unshifted compressed hints."""
        s_hat = self.large(
            spec,
            speaker_embedding=speaker_embedding,
            causal_attention=causal_attention,
        )
        return self.compression(extract_embedding(s_hat))

    def forward(
        self,
        spec: torch.Tensor,
        delay_chunks: int,
        enrollment_spec: Optional[torch.Tensor] = None,
        causal_attention: bool = True,
    ) -> torch.Tensor:
        """Offline joint pass with the training-time shift simulation."""
        large_emb = small_emb = None
        if self.task == "tse":
            large_emb = self.large.speaker_embedding(enrollment_spec)
            small_emb = self.small.net.speaker_embedding(enrollment_spec)
        hints = self.hints_offline(
            spec, speaker_embedding=large_emb, causal_attention=causal_attention
        )
        shifted = shift_embeddings(hints, delay_chunks)
        return self.small(spec, shifted, delay_chunks, speaker_embedding=small_emb)


# --- wire format ------------------------------------------------------------

_HEADER = struct.Struct("<IBHH")


def pack_hint(chunk_index: int, ratio: int, values: np.ndarray) -> bytes:
    """Serialize one hint: header {chunk u32, ratio u8, channels u16,
    bins u16} + little-endian f32 payload of (channels, bins) values."""
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ConfigError("hint payload must be (channels, bins)")
    header = _HEADER.pack(chunk_index, ratio, values.shape[0], values.shape[1])
    return header + values.tobytes()


def unpack_hint(data: bytes) -> Tuple[int, int, np.ndarray]:
    chunk_index, ratio, channels, bins = _HEADER.unpack_from(data)
    payload = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if payload.size != channels * bins:
        raise ConfigError("hint payload size mismatch")
    return chunk_index, ratio, payload.reshape(channels, bins).copy()


def hint_wire_overhead_bits() -> int:
    return _HEADER.size * 8
