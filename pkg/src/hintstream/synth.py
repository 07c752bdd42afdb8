"""Desk-scale binaural mixture synthesis.

All audio is generated, so the repository ships no corpora: sources are
speech-like harmonic signals with random pitch contours and syllabic
amplitude modulation, rooms are toy binaural impulse responses (direct path
with inter-aural time/level differences plus an exponentially decaying
diffuse tail), and the ambient noise is correlated binaural shaped noise.

Everything is derived deterministically from (kind, identity, seed), and
identity pools are disjoint across the train/val/test splits.  Mixtures are
synthesized in float64 so the decomposition ``mixture = sum(references) +
scale * noise`` holds bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.signal import fftconvolve

from . import dsp
from .errors import ConfigError

SAMPLE_RATE = 16000
MIXTURE_SECONDS = 5.0
ENROLLMENT_SECONDS = 2.0
SNR_RANGE_DB = (-6.0, 6.0)

SPLITS = ("train", "val", "test")

#: identity pool sizes per split; ids never overlap because each split owns
#: a contiguous, disjoint range
_POOL_SIZES = {"train": 200, "val": 40, "test": 40}

_KIND_CODES = {"speaker": 1, "brir": 2, "noise": 3}

TASK_NUM_SOURCES = {"ss": 2, "se": 1, "tse": 2}


def split_id_range(kind: str, split: str) -> range:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    start = 0
    for s in SPLITS:
        if s == split:
            return range(start, start + _POOL_SIZES[s])
        start += _POOL_SIZES[s]
    raise ConfigError(f"unknown split {split!r}")


def split_of_id(ident: int) -> str:
    for s in SPLITS:
        if ident in split_id_range("speaker", s):
            return s
    raise ConfigError(f"identity {ident} outside all split pools")


def _rng(seed: int, kind: str, *idents: int) -> np.random.Generator:
    return np.random.default_rng([seed, _KIND_CODES[kind], *idents])


# --- sources ---------------------------------------------------------------


def speech_like_source(
    speaker_id: int, utterance: int, duration: float, seed: int, sr: int = SAMPLE_RATE
) -> np.ndarray:
    """Synthetic speech-like mono signal for one (speaker, utterance) pair."""
    voice = _rng(seed, "speaker", speaker_id)
    f0_base = voice.uniform(90.0, 250.0)
    tilt = voice.uniform(0.55, 0.85)
    syllable_rate = voice.uniform(2.5, 5.0)

    rng = _rng(seed, "speaker", speaker_id, utterance)
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    # slow log-pitch random walk, smoothed with a long moving average
    steps = rng.standard_normal(n) * 0.002
    contour = np.cumsum(steps)
    kernel = np.ones(1600) / 1600.0
    contour = np.convolve(contour, kernel, mode="same")
    f0 = f0_base * np.exp2(np.clip(contour, -0.5, 0.5))
    phase = 2.0 * np.pi * np.cumsum(f0) / sr
    sig = np.zeros(n)
    for h in range(1, 11):
        sig += (tilt**h) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    # syllabic amplitude modulation with voiced/silent alternation
    env = 0.5 * (1.0 - np.cos(2.0 * np.pi * syllable_rate * t + rng.uniform(0, 2 * np.pi)))
    gate = (env > rng.uniform(0.05, 0.25)).astype(float)
    env = np.convolve(env * gate, np.ones(400) / 400.0, mode="same")
    sig *= env
    rms = float(np.sqrt(np.mean(sig**2)))
    if rms == 0.0:
        raise ConfigError(
            f"silent source for speaker {speaker_id} utterance {utterance}"
        )
    return 0.05 * sig / rms


# --- rooms -----------------------------------------------------------------

MAX_ITD_SAMPLES = 16
MAX_BRIR_SUPPORT = 4000


@dataclass
class ToyBrir:
    """Toy binaural room impulse response."""

    left: np.ndarray
    right: np.ndarray
    itd_samples: int
    decay_per_s: float
    seed: int

    def __post_init__(self):
        if abs(self.itd_samples) > MAX_ITD_SAMPLES:
            raise ConfigError(f"|itd| must be <= {MAX_ITD_SAMPLES} samples")
        if len(self.left) > MAX_BRIR_SUPPORT or len(self.right) > MAX_BRIR_SUPPORT:
            raise ConfigError(f"support must be <= {MAX_BRIR_SUPPORT} samples")


def make_brir(brir_id: int, seed: int, sr: int = SAMPLE_RATE) -> ToyBrir:
    rng = _rng(seed, "brir", brir_id)
    itd = int(rng.integers(-MAX_ITD_SAMPLES, MAX_ITD_SAMPLES + 1))
    ild_db = rng.uniform(-6.0, 6.0)
    decay = rng.uniform(20.0, 80.0)  # 1/s
    support = 3000
    base_delay = 24
    tail_gain = rng.uniform(0.05, 0.3)

    def one_ear(extra_delay: int, gain: float, ear_code: int) -> np.ndarray:
        ir = np.zeros(support)
        d = base_delay + extra_delay
        ir[d] = gain
        tail_t = np.arange(support - d - 8) / sr
        tail_rng = _rng(seed, "brir", brir_id, ear_code)
        ir[d + 8 :] = gain * tail_gain * tail_rng.standard_normal(len(tail_t)) * np.exp(
            -decay * tail_t
        )
        return ir

    left = one_ear(max(0, itd), 10.0 ** (ild_db / 40.0), 0)
    right = one_ear(max(0, -itd), 10.0 ** (-ild_db / 40.0), 1)
    # normalise so the mean energy across ears is 1
    energy = 0.5 * (np.sum(left**2) + np.sum(right**2))
    left /= np.sqrt(energy)
    right /= np.sqrt(energy)
    return ToyBrir(left, right, itd, decay, seed)


def binaural_noise(noise_id: int, duration: float, seed: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Correlated binaural ambient noise, shape (2, n)."""
    rng = _rng(seed, "noise", noise_id)
    n = int(round(duration * sr))
    coherence = rng.uniform(0.3, 0.9)
    smooth = int(rng.integers(2, 12))  # moving-average lowpass length
    common = rng.standard_normal(n + smooth)
    chans = []
    for _ in range(2):
        ind = rng.standard_normal(n + smooth)
        mixed = np.sqrt(coherence) * common + np.sqrt(1 - coherence) * ind
        mixed = np.convolve(mixed, np.ones(smooth) / smooth, mode="same")[:n]
        chans.append(mixed)
    noise = np.stack(chans)
    rms = np.sqrt(np.mean(noise**2))
    return 0.05 * noise / rms


# --- mixing ----------------------------------------------------------------


def scale_noise_to_snr(
    speech: dsp.AudioSignal, noise: dsp.AudioSignal, target_db: float
) -> float:
    """Amplitude scale for the noise so the mean of the two per-channel SNRs
    (in dB) equals ``target_db``."""
    if speech.samples.shape != noise.samples.shape:
        raise ConfigError("speech and noise must have matching shapes")
    p_speech = np.mean(speech.samples**2, axis=1)
    p_noise = np.mean(noise.samples**2, axis=1)
    if np.any(p_speech == 0) or np.any(p_noise == 0):
        raise ConfigError("zero-power channel in SNR scaling")
    snr0_db = float(np.mean(10.0 * np.log10(p_speech / p_noise)))
    return 10.0 ** ((snr0_db - target_db) / 20.0)


def measure_mean_snr(speech: dsp.AudioSignal, scaled_noise: dsp.AudioSignal) -> float:
    p_speech = np.mean(speech.samples**2, axis=1)
    p_noise = np.mean(scaled_noise.samples**2, axis=1)
    return float(np.mean(10.0 * np.log10(p_speech / p_noise)))


@dataclass
class MixtureRecipe:
    """Deterministic description of one mixture."""

    mixture_id: str
    task: str
    split: str
    speaker_ids: List[int]
    utterances: List[int]
    brir_ids: List[int]
    noise_id: int
    snr_db: float
    seed: int
    target_index: int = 0  # TSE: which source is the target
    enrollment_utterance: Optional[int] = None

    def __post_init__(self):
        if self.task not in TASK_NUM_SOURCES:
            raise ConfigError(f"unknown task {self.task!r}")
        if len(self.speaker_ids) != TASK_NUM_SOURCES[self.task]:
            raise ConfigError(
                f"{self.task} needs {TASK_NUM_SOURCES[self.task]} sources, "
                f"got {len(self.speaker_ids)}"
            )
        if not SNR_RANGE_DB[0] <= self.snr_db <= SNR_RANGE_DB[1]:
            raise ConfigError(f"target SNR {self.snr_db} outside {SNR_RANGE_DB}")
        pool = split_id_range("speaker", self.split)
        for ident in [*self.speaker_ids, *self.brir_ids, self.noise_id]:
            if ident not in pool:
                raise ConfigError(
                    f"identity {ident} does not belong to split {self.split!r}"
                )


@dataclass
class Mixture:
    mixture: dsp.AudioSignal
    references: List[dsp.AudioSignal]
    scaled_noise: dsp.AudioSignal
    enrollment: Optional[dsp.AudioSignal]


def make_mixture(
    recipe: MixtureRecipe, duration: float = MIXTURE_SECONDS, sr: int = SAMPLE_RATE
) -> Mixture:
    """Render one mixture plus per-source binaural reference images."""
    n = int(round(duration * sr))
    references = []
    for speaker, utt, brir_id in zip(
        recipe.speaker_ids, recipe.utterances, recipe.brir_ids
    ):
        src = speech_like_source(speaker, utt, duration, recipe.seed, sr)
        if not np.any(src):
            raise ConfigError(f"silent source {speaker}/{utt}")
        brir = make_brir(brir_id, recipe.seed, sr)
        image = np.stack(
            [
                fftconvolve(src, brir.left)[:n],
                fftconvolve(src, brir.right)[:n],
            ]
        )
        references.append(dsp.AudioSignal(image, sr))
    speech_sum = dsp.AudioSignal(
        np.sum([r.samples for r in references], axis=0), sr
    )
    noise = dsp.AudioSignal(binaural_noise(recipe.noise_id, duration, recipe.seed, sr), sr)
    scale = scale_noise_to_snr(speech_sum, noise, recipe.snr_db)
    scaled_noise = dsp.AudioSignal(scale * noise.samples, sr)
    mixture = dsp.AudioSignal(speech_sum.samples + scaled_noise.samples, sr)
    enrollment = None
    if recipe.task == "tse":
        if recipe.enrollment_utterance is None:
            raise ConfigError("TSE recipe is missing an enrollment utterance")
        enrollment = dsp.AudioSignal(
            speech_like_source(
                recipe.speaker_ids[recipe.target_index],
                recipe.enrollment_utterance,
                ENROLLMENT_SECONDS,
                recipe.seed,
                sr,
            )[None, :].repeat(2, axis=0),
            sr,
        )
    return Mixture(mixture, references, scaled_noise, enrollment)


# --- corpus ----------------------------------------------------------------

DESK_SCALE_COUNTS = {"train": 2000, "test": 200, "val": 200}


def plan_corpus(
    task: str,
    counts: Optional[Dict[str, int]] = None,
    seed: int = 0,
) -> List[MixtureRecipe]:
    """Deterministic recipe list; no audio is rendered."""
    counts = counts or DESK_SCALE_COUNTS
    recipes = []
    num_sources = TASK_NUM_SOURCES[task]
    for split in SPLITS:
        count = counts.get(split, 0)
        rng = np.random.default_rng([seed, 17, SPLITS.index(split)])
        speakers = split_id_range("speaker", split)
        for i in range(count):
            chosen = rng.choice(len(speakers), size=num_sources, replace=False)
            speaker_ids = [speakers[int(c)] for c in chosen]
            recipes.append(
                MixtureRecipe(
                    mixture_id=f"{task}-{split}-{i:06d}",
                    task=task,
                    split=split,
                    speaker_ids=speaker_ids,
                    utterances=[int(rng.integers(0, 1_000_000)) for _ in speaker_ids],
                    brir_ids=[
                        speakers[int(c)]
                        for c in rng.choice(len(speakers), size=num_sources, replace=False)
                    ],
                    noise_id=speakers[int(rng.integers(0, len(speakers)))],
                    snr_db=float(rng.uniform(*SNR_RANGE_DB)),
                    seed=seed,
                    target_index=0,
                    enrollment_utterance=(
                        int(rng.integers(1_000_000, 2_000_000)) if task == "tse" else None
                    ),
                )
            )
    return recipes


def verify_split_disjointness(recipes: List[MixtureRecipe]) -> None:
    used: Dict[str, Dict[str, set]] = {
        k: {s: set() for s in SPLITS} for k in ("speaker", "brir", "noise")
    }
    for r in recipes:
        used["speaker"][r.split].update(r.speaker_ids)
        used["brir"][r.split].update(r.brir_ids)
        used["noise"][r.split].add(r.noise_id)
    for kind, per_split in used.items():
        for a in SPLITS:
            for b in SPLITS:
                if a < b and per_split[a] & per_split[b]:
                    raise ConfigError(
                        f"{kind} identities shared between {a} and {b}: "
                        f"{sorted(per_split[a] & per_split[b])[:5]}"
                    )


def build_corpus(
    out_dir,
    task: str,
    counts: Optional[Dict[str, int]] = None,
    seed: int = 0,
    duration: float = MIXTURE_SECONDS,
    write_audio: bool = True,
) -> Path:
    """Render a corpus to disk; returns the manifest path.

    The manifest is line-delimited JSON, one recipe per line with the audio
    paths, and is byte-identical across runs with the same arguments.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recipes = plan_corpus(task, counts, seed)
    verify_split_disjointness(recipes)
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for recipe in recipes:
            rel = Path(recipe.split) / recipe.mixture_id
            row = asdict(recipe)
            row["duration"] = duration
            row["sample_rate"] = SAMPLE_RATE
            row["mixture_path"] = str(rel / "mixture.wav")
            row["reference_paths"] = [
                str(rel / f"reference{i}.wav")
                for i in range(len(recipe.speaker_ids))
            ]
            if recipe.task == "tse":
                row["enrollment_path"] = str(rel / "enrollment.wav")
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            if write_audio:
                mix = make_mixture(recipe, duration)
                target = out_dir / rel
                target.mkdir(parents=True, exist_ok=True)
                dsp.write_wav(target / "mixture.wav", mix.mixture)
                for i, ref in enumerate(mix.references):
                    dsp.write_wav(target / f"reference{i}.wav", ref)
                if mix.enrollment is not None:
                    dsp.write_wav(target / "enrollment.wav", mix.enrollment)
    return manifest_path


def load_manifest(manifest_path) -> List[dict]:
    rows = []
    with open(manifest_path) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows
