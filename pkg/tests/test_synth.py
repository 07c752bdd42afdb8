import numpy as np
import pytest

from hintstream import dsp, synth
from hintstream.errors import ConfigError
from hintstream.synth import (
    MixtureRecipe,
    binaural_noise,
    build_corpus,
    load_manifest,
    make_brir,
    make_mixture,
    measure_mean_snr,
    plan_corpus,
    scale_noise_to_snr,
    speech_like_source,
    split_id_range,
    verify_split_disjointness,
)


def _recipe(snr=3.0, task="ss", split="train", seed=0):
    pool = split_id_range("speaker", split)
    n = synth.TASK_NUM_SOURCES[task]
    return MixtureRecipe(
        mixture_id="t-0",
        task=task,
        split=split,
        speaker_ids=[pool[0], pool[1]][:n],
        utterances=list(range(n)),
        brir_ids=[pool[2], pool[3]][:n],
        noise_id=pool[4],
        snr_db=snr,
        seed=seed,
        enrollment_utterance=7 if task == "tse" else None,
    )


def test_source_is_deterministic_and_normalised():
    a = speech_like_source(3, 11, 0.5, seed=0)
    b = speech_like_source(3, 11, 0.5, seed=0)
    assert np.array_equal(a, b)
    assert np.sqrt(np.mean(a**2)) == pytest.approx(0.05, rel=1e-12)
    # different utterance of the same speaker differs
    assert not np.array_equal(a, speech_like_source(3, 12, 0.5, seed=0))


def test_brir_contract():
    for brir_id in range(5):
        brir = make_brir(brir_id, seed=0)
        assert abs(brir.itd_samples) <= synth.MAX_ITD_SAMPLES
        assert len(brir.left) <= synth.MAX_BRIR_SUPPORT
        energy = 0.5 * (np.sum(brir.left**2) + np.sum(brir.right**2))
        assert energy == pytest.approx(1.0, rel=1e-12)


def test_binaural_noise_shape_and_determinism():
    a = binaural_noise(5, 0.25, seed=0)
    assert a.shape == (2, 4000)
    assert np.array_equal(a, binaural_noise(5, 0.25, seed=0))


def test_snr_scaling_round_trip(rng):
    speech = dsp.AudioSignal(rng.standard_normal((2, 4000)), synth.SAMPLE_RATE)
    noise = dsp.AudioSignal(rng.standard_normal((2, 4000)), synth.SAMPLE_RATE)
    for target in (-6.0, -1.3, 0.0, 4.2, 6.0):
        g = scale_noise_to_snr(speech, noise, target)
        scaled = dsp.AudioSignal(g * noise.samples, synth.SAMPLE_RATE)
        assert measure_mean_snr(speech, scaled) == pytest.approx(target, abs=1e-9)


def test_mixture_decomposition_is_exact():
    mix = make_mixture(_recipe(), duration=0.5)
    total = np.sum([r.samples for r in mix.references], axis=0) + mix.scaled_noise.samples
    assert np.array_equal(mix.mixture.samples, total)
    assert mix.mixture.samples.dtype == np.float64


def test_mixture_snr_matches_recipe():
    for snr in (-6.0, 0.0, 5.5):
        mix = make_mixture(_recipe(snr=snr), duration=0.5)
        speech = dsp.AudioSignal(
            np.sum([r.samples for r in mix.references], axis=0), synth.SAMPLE_RATE
        )
        assert abs(measure_mean_snr(speech, mix.scaled_noise) - snr) < 0.01


def test_tse_mixture_has_enrollment():
    mix = make_mixture(_recipe(task="tse"), duration=0.5)
    assert mix.enrollment is not None
    assert mix.enrollment.channels == 2
    assert mix.enrollment.duration == pytest.approx(synth.ENROLLMENT_SECONDS)
    # both channels carry the same mono enrollment
    assert np.array_equal(mix.enrollment.samples[0], mix.enrollment.samples[1])


def test_recipe_validation():
    with pytest.raises(ConfigError):
        _recipe(snr=7.0)  # outside [-6, 6]
    # identity from the wrong split pool
    val_pool = split_id_range("speaker", "val")
    with pytest.raises(ConfigError):
        MixtureRecipe(
            mixture_id="x",
            task="se",
            split="train",
            speaker_ids=[val_pool[0]],
            utterances=[0],
            brir_ids=[1],
            noise_id=2,
            snr_db=0.0,
            seed=0,
        )


def test_split_pools_are_disjoint_ranges():
    pools = [set(split_id_range("speaker", s)) for s in synth.SPLITS]
    for i in range(len(pools)):
        for j in range(i + 1, len(pools)):
            assert not pools[i] & pools[j]


def test_plan_corpus_is_deterministic_and_disjoint():
    counts = {"train": 20, "test": 5, "val": 5}
    a = plan_corpus("ss", counts, seed=3)
    b = plan_corpus("ss", counts, seed=3)
    assert a == b
    verify_split_disjointness(a)
    snrs = [r.snr_db for r in a]
    assert min(snrs) >= -6.0 and max(snrs) <= 6.0


def test_verify_split_disjointness_catches_leak():
    recipes = plan_corpus("se", {"train": 2, "test": 2, "val": 2}, seed=0)
    leaked = synth.MixtureRecipe(**{**recipes[0].__dict__, "mixture_id": "leak"})
    # force a test recipe to reuse a train identity
    object.__setattr__(leaked, "split", "test")
    with pytest.raises(ConfigError):
        verify_split_disjointness(recipes + [leaked])


def test_manifest_is_byte_stable(tmp_path):
    counts = {"train": 2, "test": 1, "val": 1}
    m1 = build_corpus(tmp_path / "a", "se", counts, seed=0, duration=0.3)
    m2 = build_corpus(tmp_path / "b", "se", counts, seed=0, duration=0.3)
    assert m1.read_text() == m2.read_text()
    rows = load_manifest(m1)
    assert len(rows) == 4
    for row in rows:
        assert (tmp_path / "a" / row["mixture_path"]).exists()
        for ref in row["reference_paths"]:
            assert (tmp_path / "a" / ref).exists()


def test_written_corpus_decomposes_on_disk(tmp_path):
    manifest = build_corpus(
        tmp_path, "ss", {"train": 1, "test": 0, "val": 0}, seed=0, duration=0.3
    )
    row = load_manifest(manifest)[0]
    mix = dsp.read_wav(tmp_path / row["mixture_path"])
    refs = [dsp.read_wav(tmp_path / p) for p in row["reference_paths"]]
    # float32 wav round trip: decomposition holds to writer precision
    resid = mix.samples - np.sum([r.samples for r in refs], axis=0)
    speech = np.sum([r.samples for r in refs], axis=0)
    # residual is the scaled noise, bounded by the mixture scale
    assert np.abs(resid).max() < np.abs(mix.samples).max() + 1e-6
    assert speech.shape == mix.samples.shape
