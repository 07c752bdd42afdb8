"""Losses, permutation-invariant training, LR schedule, and the two training
entry points: baseline pretraining and joint boosted training (with the
frozen-large ablation).

The training loss is the negative mean scale-invariant SDR over channels
(and over the best speaker permutation for separation), computed on the
time-domain reconstruction with the first window-hop warm-up samples
excluded.  Validation uses the same formula; the scheduler halves the
learning rate after four consecutive validation epochs without a new best.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import dsp, numerics, synth
from .boost import JointModel
from .errors import ConfigError, NumericFaultError
from .gridnet import GridConfig, GridNet

_CAP_RATIO = 1e-12  # matches the +120 dB cap of dsp.si_sdr


def si_sdr_torch(estimate: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Differentiable per-channel SI-SDR in dB over the last axis.

    The residual energy is floored at 1e-12 of the scaled-reference energy,
    so a perfect estimate yields exactly +120 dB with finite gradients.
    """
    if estimate.shape != reference.shape:
        raise ConfigError("estimate/reference shape mismatch")
    ref_energy = (reference**2).sum(dim=-1)
    if torch.any(ref_energy == 0):
        raise ConfigError("si_sdr is undefined for an all-zero reference")
    alpha = (estimate * reference).sum(dim=-1) / ref_energy
    target = alpha.unsqueeze(-1) * reference
    target_energy = (target**2).sum(dim=-1)
    residual_energy = ((estimate - target) ** 2).sum(dim=-1)
    return 10.0 * torch.log10(
        target_energy / (residual_energy + _CAP_RATIO * target_energy)
    )


def loss_sisdr(estimate: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Negative mean per-channel SI-SDR; channels are scaled independently."""
    return -si_sdr_torch(estimate, reference).mean()


def loss_pit(
    estimate: torch.Tensor, reference: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Two-speaker permutation-invariant loss.

    ``estimate`` and ``reference`` are (batch, 2 speakers, channels, T); the
    speaker assignment is chosen per batch element, channel pairing is fixed.
    Returns (mean loss, chosen permutation index per element: 0 = identity,
    1 = swapped).
    """
    if estimate.shape[1] != 2 or reference.shape[1] != 2:
        raise ConfigError("loss_pit expects exactly 2 speakers")
    per = si_sdr_torch(estimate, reference)  # (b, 2, ch), identity pairing
    swapped = si_sdr_torch(estimate, reference.flip(1))
    loss_id = -per.mean(dim=(1, 2))
    loss_sw = -swapped.mean(dim=(1, 2))
    both = torch.stack([loss_id, loss_sw], dim=1)
    best, perm = both.min(dim=1)
    return best.mean(), perm


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    task: str = "ss"
    epochs: int = 20
    lr_initial: float = 1e-3
    batch_size: int = 8
    clip_norm: float = 1.0
    patience: int = 4
    factor: float = 0.5
    delay_chunks: int = 0
    ratio: int = 1
    freeze_large: bool = False
    seed: int = 0
    window_len: int = 192
    hop_len: int = 128
    micro_batch_size: int = 2  # gradient-accumulation slice; memory only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.micro_batch_size < 1:
            raise ConfigError("micro batch size must be >= 1")
        if self.delay_chunks < 0:
            raise ConfigError("delay must be >= 0")
        if self.task not in ("ss", "se", "tse"):
            raise ConfigError(f"unknown task {self.task!r}")


class LrSchedule:
    """Halve the LR when the best validation SI-SNR has not improved for
    ``patience`` consecutive evaluations; improvement resets the counter."""

    def __init__(self, lr: float, patience: int = 4, factor: float = 0.5):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best: Optional[float] = None
        self.stale = 0
        self.events: List[str] = []

    def step(self, val_metric: float) -> float:
        if self.best is None or val_metric > self.best:
            self.best = val_metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
                self.events.append(f"halved to {self.lr:g}")
        return self.lr


class TrainLog:
    """Per-epoch log rows, exportable as line-delimited JSON."""

    def __init__(self):
        self.rows: List[dict] = []

    def log(self, **row) -> None:
        if self.rows and row.get("lr", 0) > self.rows[-1]["lr"]:
            raise ConfigError("learning rate must be non-increasing")
        self.rows.append(row)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# --- data ------------------------------------------------------------------


@dataclass
class Example:
    """One manifest row loaded into tensors."""

    spec_in: torch.Tensor  # complex (2, F, T)
    reference: torch.Tensor  # (speakers*channels, n) time-domain, full length
    enrollment_spec: Optional[torch.Tensor]  # complex (2, F, T_e) for TSE
    mixture: dsp.AudioSignal


def load_example(corpus_dir, row: dict, window_len: int, hop_len: int) -> Example:
    corpus_dir = Path(corpus_dir)
    mixture = dsp.read_wav(corpus_dir / row["mixture_path"])
    spec = dsp.stft(mixture, window_len, hop_len)
    spec_in = torch.from_numpy(spec.values).to(torch.complex64)
    refs = [dsp.read_wav(corpus_dir / p) for p in row["reference_paths"]]
    if row["task"] == "tse":
        refs = [refs[row.get("target_index", 0)]]
    reference = torch.from_numpy(
        np.concatenate([r.samples for r in refs], axis=0)
    ).float()
    enrollment_spec = None
    if row["task"] == "tse":
        enr = dsp.read_wav(corpus_dir / row["enrollment_path"])
        enrollment_spec = torch.from_numpy(
            dsp.stft(enr, window_len, hop_len).values
        ).to(torch.complex64)
    return Example(spec_in, reference, enrollment_spec, mixture)


def _collate(examples: Sequence[Example]):
    spec = torch.stack([e.spec_in for e in examples])
    ref = torch.stack([e.reference for e in examples])
    enr = (
        torch.stack([e.enrollment_spec for e in examples])
        if examples[0].enrollment_spec is not None
        else None
    )
    return spec, ref, enr


def reconstruct(outputs: torch.Tensor, window_len: int, hop_len: int) -> torch.Tensor:
    """Complex (b, K, F, T) model output -> time-domain (b, K, n)."""
    return numerics.istft_overlap_add(outputs, window_len, hop_len)


def task_loss(
    task: str,
    outputs: torch.Tensor,
    reference: torch.Tensor,
    window_len: int,
    hop_len: int,
) -> torch.Tensor:
    """Time-domain SI-SDR training loss with the warm-up region excluded."""
    est = reconstruct(outputs, window_len, hop_len)
    warmup = window_len - hop_len
    n = est.shape[-1]
    ref = reference[..., :n]
    est = est[..., warmup:]
    ref = ref[..., warmup:]
    if task == "ss":
        b = est.shape[0]
        loss, _ = loss_pit(est.reshape(b, 2, 2, -1), ref.reshape(b, 2, 2, -1))
        return loss
    return loss_sisdr(est, ref)


def task_val_metric(
    task: str,
    outputs: torch.Tensor,
    reference: torch.Tensor,
    window_len: int,
    hop_len: int,
) -> float:
    """Validation SI-SNR in dB (higher is better); same formula as the loss."""
    with torch.no_grad():
        return -float(
            task_loss(task, outputs, reference, window_len, hop_len).item()
        )


# --- training loops ----------------------------------------------------------


def _batches(rows: List[dict], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(rows))
    for start in range(0, len(rows), batch_size):
        yield [rows[i] for i in order[start : start + batch_size]]


def _run_training(
    forward: Callable,
    parameters: List[torch.nn.Parameter],
    rows_by_split: Dict[str, List[dict]],
    corpus_dir,
    cfg: TrainConfig,
    save_best: Callable[[], None],
) -> TrainLog:
    opt = torch.optim.Adam(parameters, lr=cfg.lr_initial, betas=(0.9, 0.999), eps=1e-8)
    schedule = LrSchedule(cfg.lr_initial, cfg.patience, cfg.factor)
    log = TrainLog()
    rng = np.random.default_rng(cfg.seed)
    best_val = -np.inf
    for epoch in range(cfg.epochs):
        train_losses = []
        for batch_rows in _batches(rows_by_split["train"], cfg.batch_size, rng):
            examples = [
                load_example(corpus_dir, r, cfg.window_len, cfg.hop_len)
                for r in batch_rows
            ]
            # gradient accumulation over micro batches; identical to a full
            # batch (mean-reduced loss) but bounds peak memory
            opt.zero_grad()
            batch_loss = 0.0
            for start in range(0, len(examples), cfg.micro_batch_size):
                micro = examples[start : start + cfg.micro_batch_size]
                loss = forward(_collate(micro), training=True)
                if not torch.isfinite(loss):
                    raise NumericFaultError(
                        f"training diverged at epoch {epoch}: loss={loss.item()}"
                    )
                weight = len(micro) / len(examples)
                (loss * weight).backward()
                batch_loss += float(loss.item()) * weight
            torch.nn.utils.clip_grad_norm_(parameters, cfg.clip_norm)
            opt.step()
            train_losses.append(batch_loss)
        val_metrics = []
        for batch_rows in _batches(
            rows_by_split["val"], cfg.batch_size, np.random.default_rng(0)
        ):
            batch = _collate(
                [
                    load_example(corpus_dir, r, cfg.window_len, cfg.hop_len)
                    for r in batch_rows
                ]
            )
            with torch.no_grad():
                val_metrics.append(-float(forward(batch, training=False).item()))
        val_metric = float(np.mean(val_metrics))
        lr = schedule.step(val_metric)
        for group in opt.param_groups:
            group["lr"] = lr
        if val_metric > best_val:
            best_val = val_metric
            save_best()
        log.log(
            epoch=epoch,
            train_loss=float(np.mean(train_losses)),
            val_si_snr=val_metric,
            lr=lr,
            events=list(schedule.events),
        )
        schedule.events.clear()
    return log


def _split_rows(manifest_rows: List[dict]) -> Dict[str, List[dict]]:
    out: Dict[str, List[dict]] = {s: [] for s in synth.SPLITS}
    for row in manifest_rows:
        out[row["split"]].append(row)
    return out


def pretrain_baseline(
    model_config: GridConfig,
    manifest_path,
    cfg: TrainConfig,
    out_dir,
    config_hash: str = "",
    name: str = "baseline",
) -> Tuple[Path, TrainLog]:
    """Train one backbone model alone on its task (used for the large-model
    pretraining stage and for the small/medium baselines)."""
    torch.manual_seed(cfg.seed)
    model = GridNet(model_config, task=cfg.task)
    rows = _split_rows(synth.load_manifest(manifest_path))
    corpus_dir = Path(manifest_path).parent
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / f"{name}.ckpt"

    def forward(batch, training: bool):
        spec, ref, enr = batch
        model.train(training)
        emb = model.speaker_embedding(enr) if cfg.task == "tse" else None
        out = model(spec, speaker_embedding=emb)
        return task_loss(cfg.task, out, ref, cfg.window_len, cfg.hop_len)

    def save_best():
        numerics.save_model_checkpoint(ckpt, model, config_hash)

    log = _run_training(
        forward, list(model.parameters()), rows, corpus_dir, cfg, save_best
    )
    log.save(out_dir / f"{name}.log.jsonl")
    return ckpt, log


pretrain_large = pretrain_baseline


def train_kb(
    small_config: GridConfig,
    large_config: GridConfig,
    large_ckpt,
    manifest_path,
    cfg: TrainConfig,
    out_dir,
    config_hash: str = "",
    name: str = "boosted",
) -> Tuple[Path, TrainLog]:
    """Joint boosted training: pretrained large + untrained small, trained
    end to end on the small model's output.

    With ``cfg.freeze_large`` the large backbone receives no updates; the
    compression module and the small side always train.
    """
    torch.manual_seed(cfg.seed)
    joint = JointModel(small_config, large_config, cfg.ratio, task=cfg.task)
    if large_ckpt is not None:
        numerics.load_model_checkpoint(large_ckpt, joint.large)
    if cfg.freeze_large:
        for p in joint.large.parameters():
            p.requires_grad_(False)
    rows = _split_rows(synth.load_manifest(manifest_path))
    corpus_dir = Path(manifest_path).parent
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / f"{name}.ckpt"

    def forward(batch, training: bool):
        spec, ref, enr = batch
        joint.train(training)
        out = joint(spec, cfg.delay_chunks, enrollment_spec=enr)
        return task_loss(cfg.task, out, ref, cfg.window_len, cfg.hop_len)

    def save_best():
        numerics.save_model_checkpoint(ckpt, joint, config_hash)

    params = [p for p in joint.parameters() if p.requires_grad]
    log = _run_training(forward, params, rows, corpus_dir, cfg, save_best)
    log.save(out_dir / f"{name}.log.jsonl")
    return ckpt, log


def evaluate_outputs(
    estimate: dsp.AudioSignal,
    reference: dsp.AudioSignal,
    warmup: int = 64,
) -> float:
    """Mean SI-SDR in dB with the warm-up region excluded."""
    n = min(estimate.length, reference.length)
    est = dsp.AudioSignal(estimate.samples[:, warmup:n], estimate.sample_rate)
    ref = dsp.AudioSignal(reference.samples[:, warmup:n], reference.sample_rate)
    return dsp.mean_si_sdr(est, ref)
