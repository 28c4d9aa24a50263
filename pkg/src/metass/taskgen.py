"""Meta-task construction for two-speaker separation.

Each speaker pair contributes one task: three utterances per speaker are mixed
pairwise (3 x 3 = 9 mixtures) at a random SNR in [0, 5] dB. One mixture is
kept as the support set and the four mixtures sharing no source utterance with
it form the query set; the other four are dropped.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps

SAMPLE_RATE = 8000
UTTERANCES_PER_SPEAKER = 3
MIX_SNR_RANGE = (0.0, 5.0)
NOISE_SNR_RANGE = (10.0, 15.0)


class AudioFormatError(ValueError):
    pass


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"audio must be mono, got shape {self.samples.shape}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _arr(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, AudioSignal) else x, dtype=np.float64)


def power(x) -> float:
    x = _arr(x)
    return float(np.mean(x * x))


def measured_snr(signal, interferer) -> float:
    return 10.0 * math.log10(power(signal) / power(interferer))


# mixing


def mix_at_snr(s1, s2, snr_db: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Scale ``s2`` so that P(s1) / P(a * s2) equals ``snr_db``; return (mixture, a*s2, a).

    Unequal lengths are trimmed to the shorter one.
    """
    a1, a2 = _arr(s1), _arr(s2)
    n = min(len(a1), len(a2))
    a1, a2 = a1[:n], a2[:n]
    p1, p2 = power(a1), power(a2)
    if p1 == 0 or p2 == 0:
        raise ValueError("cannot mix a zero-power signal at a target SNR")
    scale = math.sqrt(p1 / (p2 * 10.0 ** (snr_db / 10.0)))
    scaled = scale * a2
    return a1 + scaled, scaled, scale


@dataclass
class Mixture:
    """One two-speaker mixture with its clean references (rows of ``references``)."""

    mixture: np.ndarray
    references: np.ndarray
    snr_db: float
    utterances: tuple[int, int]
    noise_snr_db: float | None = None
    noise_label: str | None = None

    @property
    def length(self) -> int:
        return len(self.mixture)


@dataclass
class SeparationTask:
    task_id: str
    speakers: tuple[str, str]
    support: list[Mixture]
    query: list[Mixture]
    role: str = "train"
    seed: int | None = None
    support_index: tuple[int, int] | None = None

    @property
    def noisy(self) -> bool:
        return any(m.noise_snr_db is not None for m in self.support + self.query)

    def sources(self, which: str) -> set[tuple[int, int]]:
        """(speaker slot, utterance index) pairs used by the support or query set."""
        mixes = self.support if which == "support" else self.query
        return {(slot, m.utterances[slot]) for m in mixes for slot in (0, 1)}


def build_task(utts_a: Sequence, utts_b: Sequence, seed) -> list[Mixture]:
    """All 3 x 3 utterance pairings of two speakers, each at an independent SNR in [0, 5] dB.

    Mixture ``3 * i + j`` pairs utterance i of speaker a with utterance j of speaker b.
    """
    if len(utts_a) < UTTERANCES_PER_SPEAKER or len(utts_b) < UTTERANCES_PER_SPEAKER:
        raise ValueError(
            f"need {UTTERANCES_PER_SPEAKER} utterances per speaker, got {len(utts_a)} and {len(utts_b)}"
        )
    rng = np.random.default_rng(seed)
    lo, hi = MIX_SNR_RANGE
    out = []
    for i, j in itertools.product(range(UTTERANCES_PER_SPEAKER), repeat=2):
        snr = float(rng.uniform(lo, hi))
        mix, scaled_b, _ = mix_at_snr(utts_a[i], utts_b[j], snr)
        ref_a = _arr(utts_a[i])[: len(mix)]
        out.append(Mixture(mix, np.stack([ref_a, scaled_b]), snr, (i, j)))
    return out


def query_indices(support_index: tuple[int, int]) -> list[tuple[int, int]]:
    i, j = support_index
    return [(k, l) for k in range(3) for l in range(3) if k != i and l != j]


def split_support_query(
    mixtures: Sequence[Mixture],
    support_index: tuple[int, int],
    task_id: str = "",
    speakers: tuple[str, str] = ("a", "b"),
    **kwargs,
) -> SeparationTask:
    """One-shot split: support = mixture (i, j); query = the four mixtures disjoint from it.

    Indices are zero-based utterance positions.
    """
    i, j = support_index
    if not (0 <= i < 3 and 0 <= j < 3):
        raise ValueError(f"support index {support_index} outside 3 x 3 grid")
    if len(mixtures) != 9:
        raise ValueError(f"expected 9 mixtures, got {len(mixtures)}")
    by_pair = {m.utterances: m for m in mixtures}
    support = [by_pair[(i, j)]]
    query = [by_pair[q] for q in query_indices(support_index)]
    return SeparationTask(task_id, speakers, support, query, support_index=support_index, **kwargs)


def add_noise(mixture, noise, snr_db: float) -> np.ndarray:
    """Add ``noise`` (tiled or trimmed to length) at speech-to-noise ratio ``snr_db``.

    ``snr_db = inf`` is the no-noise path and returns the input unchanged.
    """
    x = _arr(mixture)
    if math.isinf(snr_db) and snr_db > 0:
        return x
    n = _arr(noise.waveform if isinstance(noise, NoiseProfile) else noise)
    if power(n) == 0:
        raise ValueError("noise has zero power")
    reps = math.ceil(len(x) / len(n))
    n = np.tile(n, reps)[: len(x)]
    out, _, _ = mix_at_snr(x, n, snr_db)
    return out


@dataclass
class NoiseProfile:
    waveform: np.ndarray
    label: str

    def __post_init__(self):
        self.waveform = _arr(self.waveform)
        if power(self.waveform) == 0:
            raise ValueError(f"noise profile {self.label!r} has zero power")


def synth_noise(kind: str, length: int, seed) -> NoiseProfile:
    """White, pink or brown noise, RMS 1; stands in for a noise corpus."""
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(length)
    if kind == "white":
        x = white
    elif kind in ("pink", "brown"):
        spec = np.fft.rfft(white)
        f = np.arange(len(spec), dtype=np.float64)
        f[0] = 1.0
        spec /= np.sqrt(f) if kind == "pink" else f
        x = np.fft.irfft(spec, n=length)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    x = x - x.mean()
    return NoiseProfile(x / np.sqrt(np.mean(x * x)), kind)


# synthetic speakers


@dataclass(frozen=True)
class SpeakerSpec:
    """A synthetic voice: pitch band, harmonic amplitudes and an envelope seed."""

    speaker_id: str
    band: tuple[float, float]
    harmonics: tuple[float, ...]
    seed: int

    def __post_init__(self):
        if not 1 <= len(self.harmonics) <= 5:
            raise ValueError("a synthetic speaker has between 1 and 5 harmonics")


def synth_speaker_utterance(
    speaker: SpeakerSpec,
    duration_s: float,
    sample_rate: int = SAMPLE_RATE,
    utterance: int = 0,
) -> AudioSignal:
    """Harmonic tone with f0 drawn from the speaker's band under a slow random envelope.

    The result is RMS-normalised to 1 and a pure function of
    ``(speaker, duration_s, sample_rate, utterance)``.
    """
    lo, hi = speaker.band
    nyquist = sample_rate / 2.0
    if not (0 < lo <= hi < nyquist):
        raise ValueError(f"band {speaker.band} Hz must lie inside (0, {nyquist}) Hz")
    rng = np.random.default_rng([speaker.seed, utterance])
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(lo, hi)
    # light vibrato, kept inside the band
    depth = min(f0 - lo, hi - f0, 0.02 * f0)
    rate = rng.uniform(3.0, 6.0)
    phase_f0 = 2 * np.pi * np.cumsum(f0 + depth * np.sin(2 * np.pi * rate * t)) / sample_rate
    x = np.zeros(n)
    for k, amp in enumerate(speaker.harmonics, start=1):
        if k * (f0 + depth) >= nyquist:
            break
        x += amp * np.sin(k * phase_f0 + rng.uniform(0, 2 * np.pi))
    knots = max(int(duration_s * 4) + 2, 3)
    env = np.interp(t, np.linspace(0, t[-1] if n > 1 else 1.0, knots), rng.uniform(0.2, 1.0, knots))
    x *= env
    return AudioSignal(x / np.sqrt(np.mean(x * x)), sample_rate)


def synth_speakers(n: int, seed: int, band_range: tuple[float, float] = (90.0, 360.0)) -> list[SpeakerSpec]:
    """``n`` voices with log-uniform band centres, about +-8% wide, decaying harmonics."""
    rng = np.random.default_rng(seed)
    specs = []
    for k in range(n):
        centre = math.exp(rng.uniform(math.log(band_range[0]), math.log(band_range[1])))
        n_harm = int(rng.integers(3, 6))
        amps = np.sort(rng.uniform(0.15, 0.8, n_harm - 1))[::-1]
        specs.append(
            SpeakerSpec(
                speaker_id=f"spk{k:03d}",
                band=(round(centre * 0.92, 3), round(centre * 1.08, 3)),
                harmonics=(1.0, *map(float, amps)),
                seed=int(rng.integers(2**31)),
            )
        )
    return specs


@dataclass
class SpeakerPool:
    speakers: dict[str, list[AudioSignal]]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        for sid, utts in self.speakers.items():
            if len(utts) < UTTERANCES_PER_SPEAKER:
                raise ValueError(f"speaker {sid} has {len(utts)} utterances; need {UTTERANCES_PER_SPEAKER}")
            for u in utts:
                a = _arr(u)
                if a.ndim != 1 or not np.all(np.isfinite(a)) or power(a) == 0:
                    raise ValueError(f"speaker {sid}: utterances must be mono, finite and nonzero")
                if isinstance(u, AudioSignal) and u.sample_rate != self.sample_rate:
                    raise ValueError(f"speaker {sid}: sample rate {u.sample_rate} != {self.sample_rate}")

    @property
    def ids(self) -> list[str]:
        return sorted(self.speakers)

    @classmethod
    def synthetic(
        cls,
        specs: Sequence[SpeakerSpec],
        utterances: int = 4,
        duration_s: float = 1.0,
        sample_rate: int = SAMPLE_RATE,
    ) -> "SpeakerPool":
        return cls(
            {
                s.speaker_id: [synth_speaker_utterance(s, duration_s, sample_rate, u) for u in range(utterances)]
                for s in specs
            },
            sample_rate,
        )


def enumerate_tasks(pool: SpeakerPool | Sequence[str]) -> list[tuple[str, str]]:
    """Every unordered speaker pair, ordered by speaker id."""
    ids = pool.ids if isinstance(pool, SpeakerPool) else sorted(pool)
    if len(ids) < 2:
        raise ValueError("need at least two speakers")
    return list(itertools.combinations(ids, 2))


def task_seed(master_seed: int, pair: tuple[str, str]) -> np.random.SeedSequence:
    """Child seed depending only on the master seed and the speaker pair."""
    key = [int.from_bytes(s.encode(), "little") % (2**63) for s in pair]
    return np.random.SeedSequence(entropy=master_seed, spawn_key=key)


def select_utterances(pool: SpeakerPool, seed: int) -> dict[str, list[np.ndarray]]:
    """Seed-driven uniform choice of three utterances per speaker."""
    out = {}
    for sid in pool.ids:
        rng = np.random.default_rng(task_seed(seed, (sid, "select")))
        idx = sorted(rng.choice(len(pool.speakers[sid]), UTTERANCES_PER_SPEAKER, replace=False))
        out[sid] = [_arr(pool.speakers[sid][i]) for i in idx]
    return out


def generate_tasks(
    pool: SpeakerPool,
    seed: int,
    role: str = "train",
    noise: Sequence[NoiseProfile] | None = None,
    pairs: Iterable[tuple[str, str]] | None = None,
) -> list[SeparationTask]:
    """Build, split and optionally noise every task of ``pool``.

    With ``noise`` given, each mixture gets a noise profile (chosen per task)
    at an SNR drawn per mixture from [10, 15] dB; references stay clean.
    """
    chosen = select_utterances(pool, seed)
    tasks = []
    for a, b in pairs if pairs is not None else enumerate_tasks(pool):
        ss = task_seed(seed, (a, b))
        mix_seed, split_seed, noise_seed = ss.spawn(3)
        mixtures = build_task(chosen[a], chosen[b], mix_seed)
        rng = np.random.default_rng(split_seed)
        support_index = (int(rng.integers(3)), int(rng.integers(3)))
        task = split_support_query(
            mixtures,
            support_index,
            task_id=f"{a}-{b}",
            speakers=(a, b),
            role=role,
            seed=int(ss.generate_state(1)[0]),
        )
        if noise:
            nrng = np.random.default_rng(noise_seed)
            profile = noise[int(nrng.integers(len(noise)))]
            for m in task.support + task.query:
                snr = float(nrng.uniform(*NOISE_SNR_RANGE))
                m.mixture = add_noise(m.mixture, profile, snr)
                m.noise_snr_db, m.noise_label = snr, profile.label
        tasks.append(task)
    return tasks


def validate_task(task: SeparationTask) -> None:
    """Raise AssertionError if a task breaks the one-shot protocol."""
    assert len(task.support) == 1, "support set must hold exactly one mixture"
    assert len(task.query) == 4, "query set must hold exactly four mixtures"
    assert not (task.sources("support") & task.sources("query")), "support and query share a source"
    for m in task.support + task.query:
        assert MIX_SNR_RANGE[0] <= m.snr_db <= MIX_SNR_RANGE[1], f"mixing SNR {m.snr_db} out of range"
        if m.noise_snr_db is not None:
            assert NOISE_SNR_RANGE[0] <= m.noise_snr_db <= NOISE_SNR_RANGE[1], "noise SNR out of range"
        assert m.references.shape == (2, m.length)


# audio I/O


def load_audio(path: str | Path) -> AudioSignal:
    """Read a mono 16-bit PCM WAV into floats in [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate, frames = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
            raw = fh.readframes(frames)
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: unsupported 'fmt ' chunk ({exc})") from exc
    if width != 2:
        raise AudioFormatError(f"{path}: 'fmt ' chunk declares {8 * width}-bit samples; need 16-bit PCM")
    if channels != 1:
        raise AudioFormatError(f"{path}: 'fmt ' chunk declares {channels} channels; need mono")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(data, rate)


def save_audio(path: str | Path, audio: AudioSignal) -> None:
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(audio.sample_rate)
        fh.writeframes(pcm.tobytes())


def resample_to_8k(audio: AudioSignal) -> AudioSignal:
    """Low-pass and decimate by an integer factor down to 8 kHz."""
    if audio.sample_rate == SAMPLE_RATE:
        return audio
    factor, rem = divmod(audio.sample_rate, SAMPLE_RATE)
    if rem or factor < 1:
        raise ValueError(f"{audio.sample_rate} Hz is not an integer multiple of {SAMPLE_RATE} Hz")
    return AudioSignal(sps.resample_poly(audio.samples, 1, factor), SAMPLE_RATE)


# manifests


def _write_mixture(root: Path, stem: str, m: Mixture, sample_rate: int) -> dict:
    # one gain for mixture and references keeps mixture = ref_a + ref_b (+ noise)
    peak = max(np.max(np.abs(m.mixture)), np.max(np.abs(m.references)))
    gain = 0.9 / peak if peak > 0.9 else 1.0
    paths = {"mixture": f"{stem}_mix.wav", "refs": [f"{stem}_s1.wav", f"{stem}_s2.wav"]}
    save_audio(root / paths["mixture"], AudioSignal(m.mixture * gain, sample_rate))
    for p, ref in zip(paths["refs"], m.references):
        save_audio(root / p, AudioSignal(ref * gain, sample_rate))
    entry = {**paths, "snr_db": m.snr_db, "utterances": list(m.utterances)}
    if m.noise_snr_db is not None:
        entry["noise"] = {"label": m.noise_label, "snr_db": m.noise_snr_db}
    return entry


def write_manifest(
    tasks: Sequence[SeparationTask], manifest: str | Path, sample_rate: int = SAMPLE_RATE
) -> Path:
    """Write task audio next to ``manifest`` and one JSON record per task line."""
    manifest = Path(manifest)
    root = manifest.parent
    audio_dir = root / f"{manifest.stem}_audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    with open(manifest, "w") as fh:
        for task in tasks:
            rel = audio_dir.relative_to(root)
            record = {
                "task_id": task.task_id,
                "speakers": list(task.speakers),
                "role": task.role,
                "seed": task.seed,
                "support_index": list(task.support_index) if task.support_index else None,
                "support": [],
                "query": [],
            }
            for name in ("support", "query"):
                for k, m in enumerate(getattr(task, name)):
                    entry = _write_mixture(audio_dir, f"{task.task_id}_{name}{k}", m, sample_rate)
                    entry["mixture"] = str(rel / entry["mixture"])
                    entry["refs"] = [str(rel / r) for r in entry["refs"]]
                    record[name].append(entry)
            if task.noisy:
                record["noise"] = {"label": task.support[0].noise_label}
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def read_manifest(manifest: str | Path) -> list[SeparationTask]:
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    root = manifest.parent
    tasks = []
    with open(manifest) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            sets = {}
            for name in ("support", "query"):
                mixes = []
                for e in rec[name]:
                    mix = resample_to_8k(load_audio(root / e["mixture"]))
                    refs = np.stack([resample_to_8k(load_audio(root / r)).samples for r in e["refs"]])
                    noise = e.get("noise") or {}
                    mixes.append(
                        Mixture(
                            mix.samples,
                            refs,
                            float(e["snr_db"]),
                            tuple(e.get("utterances", (0, 0))),
                            noise.get("snr_db"),
                            noise.get("label"),
                        )
                    )
                sets[name] = mixes
            idx = rec.get("support_index")
            tasks.append(
                SeparationTask(
                    rec["task_id"],
                    tuple(rec["speakers"]),
                    sets["support"],
                    sets["query"],
                    role=rec.get("role", "train"),
                    seed=rec.get("seed"),
                    support_index=tuple(idx) if idx else None,
                )
            )
    return tasks


def data_root() -> Path:
    return Path(os.environ.get("METASS_DATA_ROOT", "."))
