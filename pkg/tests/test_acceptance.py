"""Acceptance gate: one test per release criterion, one verdict line each.

Run with ``pytest tests/test_acceptance.py -v -s``.  Criterion 9 is a full
scaled-down training experiment and is marked ``nightly``; the default
pytest options exclude it per commit.
"""

import itertools
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from hintstream import dsp, numerics, runtime, synth, train
from hintstream.boost import JointModel, MergeConfig
from hintstream.config import SessionConfig
from hintstream.gridnet import GridConfig, config_for, param_count
from hintstream.runtime import DelayConfig
from hintstream.train import TrainConfig, loss_pit, loss_sisdr, task_loss

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
SR = 16000
W, H = 192, 128


def _verdict(num: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {num:02d} {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


def _joint_for(cfg: SessionConfig) -> JointModel:
    torch.manual_seed(cfg.seed)
    return JointModel(cfg.small, cfg.large, cfg.ratio, task=cfg.task).eval()


def _noise(rng, seconds: float) -> dsp.AudioSignal:
    return dsp.AudioSignal(0.05 * rng.standard_normal((2, int(SR * seconds))), SR)


def test_criterion_01_throughput_reproduction():
    p1 = runtime.hint_throughput(2, 1, 97, 125.0)
    p2 = runtime.hint_throughput(2, 2, 97, 125.0)
    ok = (
        p1 == 1_552_000
        and p2 == 776_000
        and round(p1 / 1e6, 2) == 1.55
        and round(p2 / 1e3) == 776
    )
    _verdict(1, "throughput reproduction", ok, f"P=1 {p1:,.0f} bps, P=2 {p2:,.0f} bps")


def test_criterion_02_delay_arithmetic():
    got = {ms: DelayConfig.from_total_ms(ms).total_chunks for ms in (0, 8, 24, 48)}
    ok = got == {0: 0, 8: 1, 24: 3, 48: 6}
    _verdict(2, "delay arithmetic", ok, f"{got}")


def test_criterion_03_streaming_offline_equivalence(rng):
    cfg = SessionConfig(task="ss")
    joint = _joint_for(cfg)
    sig = _noise(rng, 5.0)
    spec = dsp.stft(sig, W, H)
    x = torch.from_numpy(spec.values[None]).to(torch.complex64)
    worst = 0.0
    for c in (0, 1, 3, 6):
        res = runtime.run_session(
            joint, sig, DelayConfig(c_out_s=c * 0.008), window_len=W, hop_len=H
        )
        with torch.no_grad():
            offline = joint(x, c)[0].numpy()
        rel = np.abs(res.output_spec - offline).max() / np.abs(offline).max()
        worst = max(worst, rel)
    ok = worst < 1e-5
    _verdict(3, "streaming/offline equivalence", ok, f"worst rel err {worst:.2e}")


def test_criterion_04_causality_audit(rng):
    configs = sorted(CONFIG_DIR.glob("*.yaml"))
    assert configs
    clean = True
    for path in configs:
        cfg = SessionConfig.load(path)
        joint = _joint_for(cfg)
        sig = _noise(rng, 0.35)
        enrollment = _noise(rng, 0.5) if cfg.task == "tse" else None
        ticks = dsp.num_frames(sig.length, W, H)
        probes = sorted(
            int(t) for t in rng.choice(ticks, size=min(10, ticks), replace=False)
        )
        report = runtime.causality_audit(
            joint, sig, cfg.delay, probes, window_len=W, hop_len=H,
            enrollment=enrollment,
        )
        clean = clean and report.passed
    # the deliberately unmasked variant must be caught
    cfg = SessionConfig.load(configs[0])
    faulted = runtime.causality_audit(
        _joint_for(cfg), _noise(rng, 0.35), cfg.delay, [8, 20, 33],
        window_len=W, hop_len=H, fault_unmasked_attention=True,
    )
    ok = clean and not faulted.passed
    _verdict(
        4, "causality audit", ok,
        f"{len(configs)} configs clean={clean}, fault detected={not faulted.passed}",
    )


def test_criterion_05_gradient_correctness(rng):
    torch.manual_seed(0)
    small = GridConfig(d=4, b=2, h=4, l=2, attention=False, k=4)
    large = GridConfig(d=4, b=2, h=4, l=2, attention=True, attention_window=5, k=4)
    joint = JointModel(
        small, large, ratio=2, task="ss", merge=MergeConfig(context_len=3, heads=2)
    ).double()
    w, h, t = 16, 8, 12
    spec = torch.from_numpy(
        rng.standard_normal((1, 2, 9, t)) + 1j * rng.standard_normal((1, 2, 9, t))
    )
    n = (t - 1) * h + w
    ref = torch.from_numpy(rng.standard_normal((1, 4, n)))

    def fn():
        out = joint(spec, 2)
        # permutation-invariant loss plus the plain per-channel loss, so both
        # training objectives sit on the differentiated path
        est = train.reconstruct(out, w, h)[..., w - h :]
        cut = ref[..., : est.shape[-1] + w - h][..., w - h :]
        return task_loss("ss", out, ref, w, h) + loss_sisdr(est, cut)

    params = [p for p in joint.parameters()]
    # eps small enough that near-zero ReLU pre-activations stay on one side
    # of the kink across the central difference
    err = numerics.grad_check(fn, params, eps=1e-6)
    ok = err < 1e-4
    _verdict(5, "gradient correctness", ok, f"max rel err {err:.2e} over {sum(p.numel() for p in params)} params")


def test_criterion_06_pit_oracle(rng):
    b, n = 1000, 40
    est = torch.from_numpy(rng.standard_normal((b, 2, 2, n)))
    ref = torch.from_numpy(rng.standard_normal((b, 2, 2, n)))
    loss, perm = loss_pit(est, ref)
    expect = []
    for i in range(b):
        candidates = []
        for p in itertools.permutations(range(2)):
            vals = [
                train.si_sdr_torch(est[i, s, c], ref[i, p[s], c])
                for s in range(2)
                for c in range(2)
            ]
            candidates.append(-torch.stack(vals).mean().item())
        expect.append(min(candidates))
    ok = abs(loss.item() - np.mean(expect)) < 1e-12 and perm.shape == (b,)
    _verdict(6, "PIT oracle", ok, f"{b} instances, |diff|={abs(loss.item() - np.mean(expect)):.1e}")


def test_criterion_07_stft_reconstruction(rng):
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(W + H, 4 * SR))
        sig = dsp.AudioSignal(rng.standard_normal((2, n)), SR)
        back = dsp.istft(dsp.stft(sig, W, H), W, H)
        m = min(n, back.shape[-1])
        a, b = sig.samples[:, W : m - W], back[:, W : m - W]
        rel = np.abs(a - b).max() / np.abs(a).max()
        worst = max(worst, rel)
    ok = worst < 1e-6
    _verdict(7, "STFT reconstruction", ok, f"worst interior rel err {worst:.2e}")


def test_criterion_08_frozen_large_contract(tmp_path, tiny_ss_corpus):
    from hintstream.gridnet import GridNet

    cfg = SessionConfig(task="ss")
    torch.manual_seed(cfg.seed)
    large = GridNet(cfg.large, task="ss")
    large_ckpt = tmp_path / "large.ckpt"
    numerics.save_model_checkpoint(large_ckpt, large, config_hash="")
    tc = replace(cfg.train, epochs=1, batch_size=2, micro_batch_size=2,
                 freeze_large=True, delay_chunks=0)
    ckpt, _ = train.train_kb(
        cfg.small, cfg.large, large_ckpt, tiny_ss_corpus, tc, tmp_path / "fkb"
    )
    before, _ = numerics.load_checkpoint(large_ckpt)
    after, _ = numerics.load_checkpoint(ckpt)
    frozen_ok = all(
        torch.equal(after[f"large.{name}"], tensor) for name, tensor in before.items()
    )
    # unfrozen joint step: the large model must receive gradient
    torch.manual_seed(cfg.seed)
    joint = JointModel(cfg.small, cfg.large, cfg.ratio, task="ss")
    rows = [r for r in synth.load_manifest(tiny_ss_corpus) if r["split"] == "train"]
    ex = train.load_example(tiny_ss_corpus.parent, rows[0], W, H)
    loss = task_loss("ss", joint(ex.spec_in[None], 0), ex.reference[None], W, H)
    loss.backward()
    norm = torch.sqrt(
        sum((p.grad ** 2).sum() for p in joint.large.parameters() if p.grad is not None)
    ).item()
    ok = frozen_ok and norm > 0
    _verdict(8, "frozen-large contract", ok,
             f"bit-identical={frozen_ok}, KB large grad norm={norm:.3e}")


@pytest.mark.nightly
def test_criterion_09_directional_boosting(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk-run")
    manifest = synth.build_corpus(
        root / "corpus", "ss", {"train": 2000, "test": 200, "val": 200},
        seed=0, duration=5.0,
    )
    base_cfg = SessionConfig(task="ss")
    torch.manual_seed(base_cfg.seed)
    _, small_log = train.pretrain_baseline(
        base_cfg.small, manifest,
        replace(base_cfg.train, epochs=20, lr_initial=2e-3),
        root / "small", name="small",
    )
    torch.manual_seed(base_cfg.seed)
    large_ckpt, _ = train.pretrain_baseline(
        base_cfg.large, manifest,
        replace(base_cfg.train, epochs=20, lr_initial=2e-3),
        root / "large", name="large",
    )
    baseline = max(r["val_si_snr"] for r in small_log.rows)
    margins = {}
    for c_ms in (0, 48):
        cfg = SessionConfig(task="ss", c_out_ms=float(c_ms))
        torch.manual_seed(cfg.seed)
        _, log = train.train_kb(
            cfg.small, cfg.large, large_ckpt, manifest,
            replace(cfg.train, epochs=20, lr_initial=1e-3),
            root / f"kb-c{cfg.delay.total_chunks}",
        )
        margins[cfg.delay.total_chunks] = max(r["val_si_snr"] for r in log.rows) - baseline
    ok = margins[0] >= 0.5 and margins[6] >= 0.0
    _verdict(9, "directional boosting", ok,
             f"margin C=0 {margins[0]:+.2f} dB, C=6 {margins[6]:+.2f} dB")


def test_criterion_10_parameter_count_proximity():
    reference_k = {"small": 23.96, "medium": 37.38, "large": 518.77}
    devs = {}
    for name, ref_k in reference_k.items():
        count = param_count(config_for(name, "ss"), task="ss")
        devs[name] = count / (ref_k * 1000.0) - 1.0
    ok = all(abs(d) <= 0.15 for d in devs.values())
    detail = ", ".join(f"{n} {d:+.1%}" for n, d in devs.items())
    _verdict(10, "parameter-count proximity", ok, detail)


def test_criterion_11_snr_synthesis_fidelity():
    recipes = synth.plan_corpus("ss", {"train": 200, "test": 0, "val": 0}, seed=11)
    assert len(recipes) == 200
    worst = 0.0
    measured = []
    for recipe in recipes:
        mix = synth.make_mixture(recipe, duration=5.0)
        speech = dsp.AudioSignal(
            np.sum([r.samples for r in mix.references], axis=0), SR
        )
        snr = synth.measure_mean_snr(speech, mix.scaled_noise)
        worst = max(worst, abs(snr - recipe.snr_db))
        measured.append(snr)
    mean = float(np.mean(measured))
    ok = worst <= 0.01 and abs(mean) <= 0.5
    _verdict(11, "SNR synthesis fidelity", ok,
             f"worst per-file err {worst:.2e} dB, corpus mean {mean:+.3f} dB")
