"""Command-line entry point.

Subcommands: ``synth``, ``pretrain``, ``train-kb``, ``eval``, ``stream``,
``calc``, ``sweep``, ``audit``.  Exit codes: 0 success, 2 config error,
3 numeric fault, 4 causality/protocol violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import dsp, gridnet, numerics, runtime, synth, train
from .boost import JointModel
from .config import SessionConfig
from .errors import CausalityViolation, ConfigError, HintstreamError
from .gridnet import GridNet, config_for, mac_estimate_per_chunk, param_count

#: published figures for the original system, used for comparison only
REFERENCE_PARAMS_K = {"small": 23.96, "medium": 37.38, "large": 518.77}
REFERENCE_THROUGHPUT = {1_552_000: "1.55 Mbps", 776_000: "776 kbps"}
PARAM_TOLERANCE = 0.15


# --- shared helpers ---------------------------------------------------------


def _load_config(args) -> SessionConfig:
    cfg = SessionConfig.load(args.config) if args.config else SessionConfig(
        task=getattr(args, "task", None) or "ss"
    )
    updates = {}
    if getattr(args, "task", None) and not args.config:
        updates["task"] = args.task
    if getattr(args, "c_in_ms", None) is not None:
        updates["c_in_ms"] = args.c_in_ms
    if getattr(args, "c_out_ms", None) is not None:
        updates["c_out_ms"] = args.c_out_ms
    if getattr(args, "compression", None) is not None:
        updates["ratio"] = args.compression
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if updates:
        data = cfg.to_dict()
        data.update(updates)
        cfg = SessionConfig.from_dict(data)
    return cfg


def _build_joint(cfg: SessionConfig) -> JointModel:
    torch.manual_seed(cfg.seed)
    return JointModel(cfg.small, cfg.large, cfg.ratio, task=cfg.task)


@dataclass
class MetricsReport:
    config_hash: str
    rows: List[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def aggregate(self, key: str) -> Dict[str, float]:
        vals = [r[key] for r in self.rows if key in r]
        return {
            "mean": float(np.mean(vals)) if vals else float("nan"),
            "std": float(np.std(vals)) if vals else float("nan"),
            "count": len(vals),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"config_hash": self.config_hash}) + "\n")
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def save_csv(self, path) -> None:
        if not self.rows:
            return
        keys = sorted({k for r in self.rows for k in r})
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.rows)


def _pit_si_sdr(est: np.ndarray, refs: List[np.ndarray], warmup: int) -> float:
    """Best-permutation mean SI-SDR for stacked (speakers*2, n) estimates."""
    n = min(est.shape[-1], refs[0].shape[-1])
    est = est[..., warmup:n]
    refs = [r[..., warmup:n] for r in refs]
    spk = len(refs)
    if spk == 1:
        return float(
            np.mean([dsp.si_sdr(est[c], refs[0][c]) for c in range(refs[0].shape[0])])
        )
    est_spk = est.reshape(spk, -1, est.shape[-1])
    perms = [(0, 1), (1, 0)]
    best = -np.inf
    for perm in perms:
        vals = []
        for s, p in enumerate(perm):
            for c in range(est_spk.shape[1]):
                vals.append(dsp.si_sdr(est_spk[s, c], refs[p][c]))
        best = max(best, float(np.mean(vals)))
    return best


def _eval_file(
    cfg: SessionConfig,
    row: dict,
    corpus_dir: Path,
    joint: Optional[JointModel],
    baseline: Optional[GridNet],
) -> dict:
    mixture = dsp.read_wav(corpus_dir / row["mixture_path"])
    refs = [dsp.read_wav(corpus_dir / p).samples for p in row["reference_paths"]]
    if row["task"] == "tse":
        refs = [refs[row.get("target_index", 0)]]
    enrollment = (
        dsp.read_wav(corpus_dir / row["enrollment_path"])
        if row["task"] == "tse"
        else None
    )
    warmup = cfg.window_len - cfg.hop_len
    if joint is not None:
        res = runtime.run_session(
            joint,
            mixture,
            cfg.delay,
            window_len=cfg.window_len,
            hop_len=cfg.hop_len,
            enrollment=enrollment,
        )
        est_spec = res.output_spec
    else:
        spec = dsp.stft(mixture, cfg.window_len, cfg.hop_len)
        x = torch.from_numpy(spec.values[None]).to(torch.complex64)
        with torch.no_grad():
            emb = None
            if cfg.task == "tse":
                espec = dsp.stft(enrollment, cfg.window_len, cfg.hop_len)
                emb = baseline.speaker_embedding(
                    torch.from_numpy(espec.values[None]).to(torch.complex64)
                )
            est_spec = baseline(x, speaker_embedding=emb)[0].numpy()
    est = dsp.istft(
        dsp.Spectrogram(est_spec.astype(np.complex128), cfg.window_len, cfg.hop_len),
        cfg.window_len,
        cfg.hop_len,
    )
    si = _pit_si_sdr(est, refs, warmup)
    # input-mixture score: the mixture itself presented for every speaker
    mix_est = np.concatenate([mixture.samples] * len(refs), axis=0)
    si_mix = _pit_si_sdr(mix_est, refs, warmup)
    return {
        "id": row["mixture_id"],
        "si_sdr": si,
        "si_sdr_mixture": si_mix,
        "si_sdri": si - si_mix,
    }


def _evaluate_split(
    cfg: SessionConfig,
    manifest_path,
    split: str,
    joint: Optional[JointModel] = None,
    baseline: Optional[GridNet] = None,
    limit: Optional[int] = None,
) -> MetricsReport:
    rows = [r for r in synth.load_manifest(manifest_path) if r["split"] == split]
    if limit:
        rows = rows[:limit]
    if not rows:
        raise ConfigError(f"no rows in split {split!r}")
    corpus_dir = Path(manifest_path).parent
    report = MetricsReport(config_hash=cfg.hash())
    for row in rows:
        report.add(**_eval_file(cfg, row, corpus_dir, joint, baseline))
    return report


# --- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out or cfg.corpus.directory)
    counts = dict(cfg.corpus.counts)
    if args.counts:
        names = ("train", "test", "val")
        counts = dict(zip(names, (int(x) for x in args.counts.split(","))))
    duration = args.duration or cfg.corpus.duration_s
    manifest = out_dir / "manifest.jsonl"
    if manifest.exists() and not args.force:
        with tempfile.TemporaryDirectory() as tmp_dir:
            tmp = synth.build_corpus(
                tmp_dir, cfg.task, counts, cfg.seed, duration, write_audio=False
            )
            if tmp.read_text() == manifest.read_text():
                print(f"no changes: {manifest} is up to date")
                return 0
        raise ConfigError(
            f"{manifest} exists with different contents; pass --force to rebuild"
        )
    path = synth.build_corpus(out_dir, cfg.task, counts, cfg.seed, duration)
    rows = synth.load_manifest(path)
    per_split = {s: sum(1 for r in rows if r["split"] == s) for s in synth.SPLITS}
    print(f"manifest: {path}")
    print(
        "split counts: "
        + ", ".join(f"{s}={per_split[s]}" for s in ("train", "test", "val"))
    )
    print(f"sources per mixture: {synth.TASK_NUM_SOURCES[cfg.task]}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    model_cfg = config_for(args.model, cfg.task)
    tc = replace(cfg.train, epochs=args.epochs or cfg.train.epochs,
                 lr_initial=args.lr or 2e-3, seed=cfg.seed)
    manifest = Path(args.corpus) / "manifest.jsonl"
    ckpt, log = train.pretrain_baseline(
        model_cfg, manifest, tc, args.out, config_hash=cfg.hash(), name=args.model
    )
    print(f"checkpoint: {ckpt}")
    print(f"final val SI-SNR: {log.rows[-1]['val_si_snr']:.2f} dB")
    return 0


def cmd_train_kb(args) -> int:
    cfg = _load_config(args)
    if args.freeze_large:
        cfg.train.freeze_large = True
    tc = replace(cfg.train, epochs=args.epochs or cfg.train.epochs,
                 lr_initial=args.lr or cfg.train.lr_initial, seed=cfg.seed)
    manifest = Path(args.corpus) / "manifest.jsonl"
    ckpt, log = train.train_kb(
        cfg.small,
        cfg.large,
        args.large_ckpt,
        manifest,
        tc,
        args.out,
        config_hash=cfg.hash(),
        name=args.name,
    )
    print(f"checkpoint: {ckpt}")
    print(f"final val SI-SNR: {log.rows[-1]['val_si_snr']:.2f} dB")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    tensors, stored_hash = numerics.load_checkpoint(args.checkpoint)
    if stored_hash and stored_hash != cfg.hash() and not args.override_hash:
        raise ConfigError(
            f"checkpoint was trained under config hash {stored_hash}, current "
            f"config hashes to {cfg.hash()} (delay/compression are part of the "
            f"config); pass --override-hash to evaluate anyway"
        )
    joint = baseline = None
    if args.kind == "joint":
        joint = _build_joint(cfg)
        joint.load_state_dict(tensors)
    else:
        torch.manual_seed(cfg.seed)
        baseline = GridNet(config_for(args.kind, cfg.task), task=cfg.task)
        baseline.load_state_dict(tensors)
    manifest = Path(args.corpus) / "manifest.jsonl"
    report = _evaluate_split(
        cfg, manifest, args.split, joint=joint, baseline=baseline, limit=args.limit
    )
    agg = report.aggregate("si_sdr")
    aggi = report.aggregate("si_sdri")
    if args.out:
        report.save(args.out)
    if args.csv:
        report.save_csv(args.csv)
    print(f"files: {agg['count']}")
    print(f"SI-SDR:  {agg['mean']:7.2f} +- {agg['std']:.2f} dB")
    print(f"SI-SDRi: {aggi['mean']:7.2f} +- {aggi['std']:.2f} dB")
    return 0


def cmd_stream(args) -> int:
    cfg = _load_config(args)
    if args.input:
        signal = dsp.read_wav(args.input)
    else:
        rng = np.random.default_rng(cfg.seed)
        signal = dsp.AudioSignal(
            0.05 * rng.standard_normal((2, cfg.sample_rate * 2)), cfg.sample_rate
        )
    joint = _build_joint(cfg)
    if args.checkpoint:
        numerics.load_model_checkpoint(args.checkpoint, joint)
    res = runtime.run_session(
        joint,
        signal,
        cfg.delay,
        window_len=cfg.window_len,
        hop_len=cfg.hop_len,
        two_worker=args.two_worker,
    )
    if args.trace:
        res.trace.save(args.trace)
        print(f"trace: {args.trace}")
    if args.output:
        dsp.write_wav(args.output, res.output)
        print(f"output: {args.output}")
    c = cfg.delay.total_chunks
    print(f"ticks: {res.num_ticks}, delay C={c} chunks, P={cfg.ratio}")
    return 0


def cmd_calc(args) -> int:
    cfg = _load_config(args)
    k = gridnet.TASK_OUTPUT_CHANNELS[cfg.task]
    bins = cfg.window_len // 2 + 1
    chunk_rate = cfg.sample_rate / cfg.hop_len
    print(f"task={cfg.task} K={k} F={bins} chunk_rate={chunk_rate:g}/s")
    for ratio in sorted({1, 2, cfg.ratio}):
        if (2 * k) % ratio:
            continue
        bps = runtime.hint_throughput(k, ratio, bins, chunk_rate)
        ref = REFERENCE_THROUGHPUT.get(int(bps), "-")
        print(
            f"P={ratio}: {bps:,.0f} bps payload "
            f"(+{runtime.hint_header_overhead_bps(chunk_rate):,.0f} bps header) "
            f"[reference: {ref}]"
        )
    print()
    bad = []
    for name in ("small", "medium", "large"):
        count = param_count(config_for(name, "ss"), task="ss")
        ref_k = REFERENCE_PARAMS_K[name]
        dev = count / (ref_k * 1000.0) - 1.0
        macs = mac_estimate_per_chunk(config_for(name, "ss"), bins) / 1e6
        print(
            f"{name:7s} params={count:>8,d} reference={ref_k:7.2f}K "
            f"deviation={dev:+.1%} macs/chunk={macs:.2f}M"
        )
        if abs(dev) > PARAM_TOLERANCE:
            bad.append((name, dev))
    if bad:
        raise ConfigError(
            f"parameter counts outside +-{PARAM_TOLERANCE:.0%} of the reference "
            f"figures: {bad}; the causal block internals are underspecified, "
            f"see the gridnet module notes"
        )
    return 0


SWEEP_AXES = {
    "delay": [0, 1, 3, 6],  # chunks
    "compression": [1, 2, 4],
    "freeze": [False, True],
}


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = SWEEP_AXES[args.axis]
    manifest = Path(args.corpus) / "manifest.jsonl"
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []

    def run_point(value):
        data = cfg.to_dict()
        name = f"{args.axis}-{value}"
        if args.axis == "delay":
            data["c_out_ms"] = value * cfg.hop_ms
            data["c_in_ms"] = 0.0
        elif args.axis == "compression":
            data["ratio"] = value
        point_cfg = SessionConfig.from_dict(data)
        if args.axis == "freeze":
            point_cfg.train.freeze_large = bool(value)
        tc = replace(
            point_cfg.train, epochs=args.epochs or point_cfg.train.epochs
        )
        ckpt, log = train.train_kb(
            point_cfg.small,
            point_cfg.large,
            args.large_ckpt,
            manifest,
            tc,
            out_dir / name,
            config_hash=point_cfg.hash(),
            name="boosted",
        )
        joint = _build_joint(point_cfg)
        numerics.load_model_checkpoint(ckpt, joint)
        report = _evaluate_split(
            point_cfg, manifest, args.split, joint=joint, limit=args.limit
        )
        agg = report.aggregate("si_sdr")
        return {
            "point": name,
            args.axis: value,
            "si_sdr_mean": agg["mean"],
            "si_sdr_std": agg["std"],
            "val_si_snr_last": log.rows[-1]["val_si_snr"],
            "checkpoint": str(ckpt),
        }

    for value in values:
        try:
            results.append(run_point(value))
        except HintstreamError as exc:
            results.append({"point": f"{args.axis}-{value}", "error": str(exc)})
    table = MetricsReport(config_hash=cfg.hash(), rows=results)
    table.save(out_dir / "sweep.jsonl")
    table.save_csv(out_dir / "sweep.csv")
    for row in results:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_audit(args) -> int:
    cfg = _load_config(args)
    joint = _build_joint(cfg)
    if args.checkpoint:
        numerics.load_model_checkpoint(args.checkpoint, joint)
    rng = np.random.default_rng(cfg.seed)
    signal = dsp.AudioSignal(
        0.05 * rng.standard_normal((2, int(cfg.sample_rate * args.duration))),
        cfg.sample_rate,
    )
    ticks = dsp.num_frames(signal.length, cfg.window_len, cfg.hop_len)
    probes = sorted(rng.choice(ticks, size=min(args.probes, ticks), replace=False))
    report = runtime.causality_audit(
        joint,
        signal,
        cfg.delay,
        [int(p) for p in probes],
        window_len=cfg.window_len,
        hop_len=cfg.hop_len,
        fault_unmasked_attention=args.inject_fault,
        seed=cfg.seed,
    )
    print(f"probes: {report.probe_ticks}")
    if report.passed:
        print("causality audit passed: no violations")
        return 0
    for v in report.violations:
        print(
            f"VIOLATION probe={v.probe_tick} kind={v.kind} "
            f"first_bad_tick={v.first_bad_tick}"
        )
    raise CausalityViolation(
        f"{len(report.violations)} violations",
        first_bad_tick=report.violations[0].first_bad_tick,
    )


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hintstream",
        description="Delayed-hint model collaboration for streaming speech tasks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, task=True):
        p.add_argument("--config", help="session config YAML")
        if task:
            p.add_argument("--task", choices=("ss", "se", "tse"))
        p.add_argument("--seed", type=int)
        p.add_argument("--c-in-ms", type=float, dest="c_in_ms")
        p.add_argument("--c-out-ms", type=float, dest="c_out_ms")
        p.add_argument("--compression", type=int, help="hint compression factor P")

    p = sub.add_parser("synth", help="build the synthetic corpus")
    common(p)
    p.add_argument("--out", help="corpus directory")
    p.add_argument("--counts", help="train,test,val counts, e.g. 2000,200,200")
    p.add_argument("--duration", type=float, help="mixture length in seconds")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="train one baseline model alone")
    common(p)
    p.add_argument("--model", choices=("small", "medium", "large"), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-kb", help="joint boosted training")
    common(p)
    p.add_argument("--large-ckpt", help="pretrained large checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="boosted")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--freeze-large", action="store_true")
    p.set_defaults(func=cmd_train_kb)

    p = sub.add_parser("eval", help="stream a corpus split through a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", default="joint", choices=("joint", "small", "medium", "large"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", help="per-file JSONL report")
    p.add_argument("--csv", help="CSV export")
    p.add_argument("--override-hash", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", help="run one streaming session")
    common(p)
    p.add_argument("--input", help="input WAV (binaural); synthesized if omitted")
    p.add_argument("--checkpoint")
    p.add_argument("--output", help="output WAV")
    p.add_argument("--trace", help="trace JSONL")
    p.add_argument("--two-worker", action="store_true")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("calc", help="throughput and parameter calculators")
    common(p)
    p.set_defaults(func=cmd_calc)

    p = sub.add_parser("sweep", help="train/evaluate along one ablation axis")
    common(p)
    p.add_argument("--axis", choices=tuple(SWEEP_AXES), required=True)
    p.add_argument("--large-ckpt")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--epochs", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--jobs", type=int, default=1, help="accepted for compatibility")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("audit", help="causality audit by perturb-and-replay")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--inject-fault", action="store_true",
                   help="remove the attention causality mask to demo detection")
    p.set_defaults(func=cmd_audit)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except HintstreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
