"""Deterministic two-node streaming simulator.

Simulated time advances in chunk ticks (one STFT hop per tick).  The local
node runs the boosted small model; the remote node runs the large model plus
the compression module.  The only medium between them is a pair of ordered
FIFO channels with fixed tick delays: audio travels out with delay
``C_out = floor(c_out/tau)`` and hints travel back with ``C_in = C - C_out``,
so the hint computed from chunk ``i`` is first usable at tick ``i + C``.

A session is replayable: identical inputs, weights, and config reproduce the
trace and output frames bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import dsp
from .boost import BoostedStream, JointModel, extract_embedding
from .errors import CausalityViolation, ConfigError, ProtocolFault

DEFAULT_BACKPRESSURE_BOUND = 64


@dataclass
class DelayConfig:
    """Round-trip communication delay in seconds; tau is the chunk duration."""

    c_out_s: float = 0.0  # local -> remote
    c_in_s: float = 0.0  # remote -> local
    tau_s: float = 0.008

    def __post_init__(self):
        if self.tau_s <= 0:
            raise ConfigError("chunk duration tau must be positive")
        if self.c_out_s < 0 or self.c_in_s < 0:
            raise ConfigError("delays must be >= 0")

    @property
    def total_chunks(self) -> int:
        return delay_to_chunks(self)

    @property
    def out_chunks(self) -> int:
        return int(math.floor(self.c_out_s / self.tau_s))

    @property
    def in_chunks(self) -> int:
        return self.total_chunks - self.out_chunks

    @classmethod
    def from_total_ms(cls, total_ms: float, tau_s: float = 0.008) -> "DelayConfig":
        return cls(c_out_s=total_ms / 1000.0, c_in_s=0.0, tau_s=tau_s)


def delay_to_chunks(config: DelayConfig) -> int:
    """Number of additional chunks received while the round trip completes."""
    return int(math.floor((config.c_in_s + config.c_out_s) / config.tau_s))


@dataclass
class ChannelMessage:
    kind: str  # "audio_chunk" | "hint_embedding"
    payload: Any
    sent_tick: int
    deliver_tick: int


class Channel:
    """Ordered FIFO channel with a fixed per-message tick delay."""

    def __init__(self, name: str, delay_ticks: int, bound: int = DEFAULT_BACKPRESSURE_BOUND):
        self.name = name
        self.delay_ticks = delay_ticks
        self.bound = bound
        self._queue: List[ChannelMessage] = []

    def send(self, kind: str, payload, tick: int) -> ChannelMessage:
        if len(self._queue) >= self.bound:
            raise ProtocolFault(
                f"channel {self.name!r} exceeded backpressure bound {self.bound}"
            )
        msg = ChannelMessage(kind, payload, tick, tick + self.delay_ticks)
        self._queue.append(msg)
        return msg

    def deliver(self, tick: int) -> List[ChannelMessage]:
        out = [m for m in self._queue if m.deliver_tick <= tick]
        self._queue = [m for m in self._queue if m.deliver_tick > tick]
        return out

    @property
    def depth(self) -> int:
        return len(self._queue)


class SessionTrace:
    """Per-tick log of the session; replayable and diffable."""

    def __init__(self):
        self.records: List[Dict[str, Any]] = []

    def log(self, **record) -> None:
        self.records.append(record)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for record in self.records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def __eq__(self, other) -> bool:
        return isinstance(other, SessionTrace) and self.records == other.records


@dataclass
class SessionResult:
    output_spec: np.ndarray  # complex (K, F, T)
    output: dsp.AudioSignal
    trace: SessionTrace
    num_ticks: int


def _frame_hash(frame: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(frame).tobytes()).hexdigest()[:16]


class _RemoteNode:
    """Sequential state machine running the large model and compression."""

    def __init__(
        self,
        joint: JointModel,
        remote_frames: torch.Tensor,
        speaker_embedding: Optional[torch.Tensor],
        fault_unmasked_attention: bool,
    ):
        self.joint = joint
        self.remote_frames = remote_frames  # complex (1, 2, F, T)
        self.speaker_embedding = speaker_embedding
        self.fault_unmasked_attention = fault_unmasked_attention
        if fault_unmasked_attention:
            # fault-injection path: the whole stream is processed at once
            # with the attention causality mask removed
            with torch.no_grad():
                self.precomputed = self.joint.hints_offline(
                    remote_frames,
                    speaker_embedding=speaker_embedding,
                    causal_attention=False,
                )
        else:
            self.precomputed = None
            self.large_state = joint.large.init_stream_state()
            f = remote_frames.shape[2]
            self.comp_state = joint.compression.init_state(
                1, f, remote_frames.real.dtype, remote_frames.device
            )

    def process(self, chunk_index: int) -> torch.Tensor:
        """Compute the hint for one delivered audio chunk; returns (1, E, F)."""
        with torch.no_grad():
            if self.precomputed is not None:
                return self.precomputed[..., chunk_index]
            frame = self.remote_frames[..., chunk_index : chunk_index + 1]
            s_hat = self.joint.large.step(
                frame, self.large_state, speaker_embedding=self.speaker_embedding
            )
            raw = extract_embedding(s_hat)
            hint, self.comp_state = self.joint.compression.step(raw, self.comp_state)
            return hint[..., 0]


class _RemoteWorker(threading.Thread):
    """Two-worker mode: the remote node on its own thread, fed through an
    ordered in-memory channel; must reproduce the single-worker trace."""

    def __init__(self, node: _RemoteNode):
        super().__init__(daemon=True)
        self.node = node
        self.requests: "queue.Queue" = queue.Queue()
        self.replies: "queue.Queue" = queue.Queue()

    def run(self):
        while True:
            item = self.requests.get()
            if item is None:
                return
            chunk_indices = item
            self.replies.put([(j, self.node.process(j)) for j in chunk_indices])


def _prepare_frames(signal: dsp.AudioSignal, window_len: int, hop_len: int) -> torch.Tensor:
    spec = dsp.stft(signal, window_len, hop_len)
    return torch.from_numpy(spec.values[None]).to(torch.complex64)


def run_session(
    joint: JointModel,
    signal: dsp.AudioSignal,
    delay: DelayConfig,
    window_len: int = 192,
    hop_len: int = 128,
    remote_signal: Optional[dsp.AudioSignal] = None,
    enrollment: Optional[dsp.AudioSignal] = None,
    fault_unmasked_attention: bool = False,
    two_worker: bool = False,
    backpressure_bound: int = DEFAULT_BACKPRESSURE_BOUND,
) -> SessionResult:
    """Stream a signal through the two-node pipeline tick by tick.

    ``remote_signal`` lets audits hand the remote node a perturbed copy of
    the stream; by default both nodes see the same audio.
    """
    joint.eval()
    local_frames = _prepare_frames(signal, window_len, hop_len)
    remote_frames = (
        local_frames
        if remote_signal is None
        else _prepare_frames(remote_signal, window_len, hop_len)
    )
    if remote_frames.shape != local_frames.shape:
        raise ConfigError("remote stream must have the same framing as the local one")
    num_ticks = local_frames.shape[-1]
    c = delay.total_chunks

    large_emb = small_emb = None
    if joint.task == "tse":
        if enrollment is None:
            raise ConfigError("TSE sessions require an enrollment signal")
        enroll_frames = _prepare_frames(enrollment, window_len, hop_len)
        with torch.no_grad():
            large_emb = joint.large.speaker_embedding(enroll_frames)
            small_emb = joint.small.net.speaker_embedding(enroll_frames)

    remote = _RemoteNode(joint, remote_frames, large_emb, fault_unmasked_attention)
    local = BoostedStream(joint.small, c, speaker_embedding=small_emb)
    audio_channel = Channel("audio", delay.out_chunks, backpressure_bound)
    hint_channel = Channel("hints", delay.in_chunks, backpressure_bound)
    trace = SessionTrace()
    out_frames: List[np.ndarray] = []

    worker = None
    if two_worker:
        worker = _RemoteWorker(remote)
        worker.start()

    try:
        for tick in range(num_ticks):
            audio_channel.send("audio_chunk", tick, tick)
            arrived = [m.payload for m in audio_channel.deliver(tick)]
            if worker is not None:
                worker.requests.put(arrived)
                produced = worker.replies.get()
            else:
                produced = [(j, remote.process(j)) for j in arrived]
            for j, hint in produced:
                hint_channel.send("hint_embedding", (j, hint), tick)
            delivered = [m.payload for m in hint_channel.deliver(tick)]
            with torch.no_grad():
                y = local.step(tick, local_frames[..., tick : tick + 1], delivered)
            frame = y[0, ..., 0].numpy()
            out_frames.append(frame)
            trace.log(
                tick=tick,
                hints_delivered=[j for j, _ in delivered],
                cache_sizes=local.cache_sizes(),
                audio_queue=audio_channel.depth,
                hint_queue=hint_channel.depth,
                output_hash=_frame_hash(frame),
            )
    finally:
        if worker is not None:
            worker.requests.put(None)
            worker.join()

    output_spec = np.stack(out_frames, axis=-1)  # (K, F, T)
    samples = dsp.istft(
        dsp.Spectrogram(output_spec.astype(np.complex128), window_len, hop_len),
        window_len,
        hop_len,
    )
    # SE/TSE emit binaural audio directly; SS stacks 2 speakers x 2 mics,
    # so expose speaker 0 as the nominal signal and keep the full spec
    sig_samples = samples if samples.shape[0] <= 2 else samples[:2]
    output = dsp.AudioSignal(sig_samples, signal.sample_rate)
    return SessionResult(output_spec, output, trace, num_ticks)


@dataclass
class AuditViolation:
    probe_tick: int
    kind: str  # "future_leak" | "remote_recent_leak"
    first_bad_tick: int


@dataclass
class AuditReport:
    probe_ticks: List[int]
    violations: List[AuditViolation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def _first_diff(a: np.ndarray, b: np.ndarray, upto: int) -> Optional[int]:
    """First frame index <= upto where the two outputs differ bitwise."""
    for t in range(upto + 1):
        if not np.array_equal(a[..., t], b[..., t]):
            return t
    return None


def causality_audit(
    joint: JointModel,
    signal: dsp.AudioSignal,
    delay: DelayConfig,
    probe_ticks: Sequence[int],
    window_len: int = 192,
    hop_len: int = 128,
    enrollment: Optional[dsp.AudioSignal] = None,
    fault_unmasked_attention: bool = False,
    seed: int = 0,
) -> AuditReport:
    """Verify the real-time information contract by perturb-and-replay.

    For each probe tick ``t``:

    * replace every sample only frames > t can read with noise, on both
      nodes, and require output frames 0..t to be bit-identical;
    * replace every sample only frames > t-C can read on the remote node's
      copy alone, and require output frames 0..t to be bit-identical
      (the local node may not benefit from hints newer than E_{t-C}).
    """
    rng = np.random.default_rng(seed)
    c = delay.total_chunks
    kwargs = dict(
        window_len=window_len,
        hop_len=hop_len,
        enrollment=enrollment,
        fault_unmasked_attention=fault_unmasked_attention,
    )
    base = run_session(joint, signal, delay, **kwargs)
    report = AuditReport(probe_ticks=list(probe_ticks))
    for t in probe_ticks:
        if not 0 <= t < base.num_ticks:
            raise ConfigError(f"probe tick {t} outside the session")
        # future perturbation on both nodes
        cut = t * hop_len + window_len
        perturbed = signal.samples.copy()
        if cut < perturbed.shape[1]:
            perturbed[:, cut:] = rng.standard_normal(perturbed[:, cut:].shape)
        noisy = dsp.AudioSignal(perturbed, signal.sample_rate)
        res = run_session(joint, noisy, delay, **kwargs)
        bad = _first_diff(base.output_spec, res.output_spec, t)
        if bad is not None:
            report.violations.append(AuditViolation(t, "future_leak", bad))
        # remote-side perturbation of everything newer than chunk t-C
        cut = max(0, (t - c) * hop_len + window_len)
        perturbed = signal.samples.copy()
        if cut < perturbed.shape[1]:
            perturbed[:, cut:] = rng.standard_normal(perturbed[:, cut:].shape)
        remote_noisy = dsp.AudioSignal(perturbed, signal.sample_rate)
        res = run_session(
            joint, signal, delay, remote_signal=remote_noisy, **kwargs
        )
        bad = _first_diff(base.output_spec, res.output_spec, t)
        if bad is not None:
            report.violations.append(AuditViolation(t, "remote_recent_leak", bad))
    return report


def hint_throughput(
    k: int,
    ratio: int,
    bins: int,
    chunk_rate_hz: float = 125.0,
    bits_per_value: int = 32,
) -> float:
    """Payload data rate in bits/second for the hint stream.

    Header overhead is reported separately via
    :func:`hint_header_overhead_bps`.
    """
    if ratio <= 0 or (2 * k) % ratio != 0:
        raise ConfigError(f"2K={2 * k} not divisible by compression ratio {ratio}")
    return (2 * k // ratio) * bins * chunk_rate_hz * bits_per_value


def hint_header_overhead_bps(chunk_rate_hz: float = 125.0) -> float:
    from .boost import hint_wire_overhead_bits

    return hint_wire_overhead_bits() * chunk_rate_hz
