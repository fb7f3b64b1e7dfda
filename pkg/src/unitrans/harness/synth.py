"""Synthetic corpora: pseudo-phone speech and token-to-unit translation pairs."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dsp import HOP_MS, SAMPLE_RATE, Waveform, ms_to_samples, save_wav
from ..exceptions import ParameterError
from .manifest import Manifest, ManifestRow, write_jsonl


@dataclass
class SynthTaskSpec:
    kind: str = "pair_corpus"
    vocab: int = 32
    min_len: int = 5
    max_len: int = 20
    multimodality: int = 1
    weights: tuple = (0.5, 0.5)
    mapping_seed: int = 1234
    n_utterances: int = 200
    repeats: int = 1
    unit_vocab: int = 64
    frames_per_token: int = 4
    n_mels: int = 80
    noise: float = 0.5
    test_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in ("speech_corpus", "pair_corpus"):
            raise ParameterError(f"unknown corpus kind {self.kind!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ParameterError("need 1 <= min_len <= max_len")
        if self.multimodality not in (1, 2):
            raise ParameterError("multimodality must be 1 or 2")
        if self.kind == "pair_corpus" and self.vocab > self.unit_vocab:
            raise ParameterError("source vocab cannot exceed the unit vocabulary")
        w = np.asarray(self.weights, dtype=float)
        if self.multimodality == 2 and (w.size != 2 or np.any(w < 0) or w.sum() <= 0):
            raise ParameterError("multimodality 2 needs two non-negative weights")


# -------------------------------------------------------------- speech corpus


@dataclass
class Phone:
    formants: np.ndarray  # Hz
    bandwidths: np.ndarray  # Hz
    envelope: str  # flat | rise | fall


@dataclass
class SpeechCorpus:
    manifest: Manifest
    waveforms: dict
    alignments: dict  # utt_id -> list of (phone, start_sample, end_sample)
    phones: list

    def phone_string(self, utt_id: str) -> list:
        return [p for p, _, _ in self.alignments[utt_id]]


def phone_inventory(n: int, seed: int, min_sep: float = 0.25, min_pattern_sep: float = 0.15,
                    bandwidth=(150.0, 300.0)) -> list:
    """``n`` pseudo-phones whose 3-formant patterns differ by at least ``min_sep`` (log-Hz).

    Candidates are drawn at random and rejected when their log-formant vector
    lies closer than ``min_sep`` (RMS over formants) to an accepted phone, or
    closer than ``min_pattern_sep`` once both vectors have their mean removed.
    The second test keeps phones apart under any uniform formant scaling, so a
    formant shift never turns one phone into another. Both thresholds shrink
    by 5% whenever 2000 draws fail.
    """
    rng = np.random.default_rng(seed)
    shapes = ("flat", "rise", "fall")
    out, logs = [], []
    sep, pat = min_sep, min_pattern_sep

    def far(lf, o):
        d = lf - o
        return np.sqrt(np.mean(d ** 2)) >= sep and np.sqrt(np.mean((d - d.mean()) ** 2)) >= pat

    while len(out) < n:
        for _ in range(2000):
            f1 = rng.uniform(250, 900)
            f2 = rng.uniform(max(f1 + 400, 900), 2600)
            f3 = rng.uniform(max(f2 + 400, 2300), 3800)
            lf = np.log([f1, f2, f3])
            if all(far(lf, o) for o in logs):
                break
        else:
            sep *= 0.95
            pat *= 0.95
            continue
        logs.append(lf)
        bw = rng.uniform(*bandwidth, size=3)
        out.append(Phone(np.array([f1, f2, f3]), bw, shapes[len(out) % 3]))
    return out


def _envelope_gain(freqs: np.ndarray, phone: Phone) -> np.ndarray:
    g = np.full_like(freqs, 0.02)
    for f, b in zip(phone.formants, phone.bandwidths):
        g += 1.0 / (1.0 + ((freqs - f) / b) ** 2)
    return g


def _shape(kind: str, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    if kind == "rise":
        return 0.6 + 0.4 * t
    if kind == "fall":
        return 1.0 - 0.4 * t
    return np.ones(n)


def _shaped_noise(n: int, phone: Phone, rng, sample_rate: int, cap: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec *= _envelope_gain(f, phone) * (f < cap)
    out = np.fft.irfft(spec, n)
    return out / max(np.sqrt(np.mean(out ** 2)), 1e-12)


def synth_utterance(phone_ids, phones, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE,
                    mean_f0: float | None = None, gain: float | None = None, aspiration: float = 0.3):
    """Render a phone string; returns ``(samples, alignment)``.

    Each phone is a harmonic tone under its formant envelope plus
    envelope-shaped noise at ``aspiration`` times the harmonic RMS.
    """
    mean_f0 = rng.uniform(90, 220) if mean_f0 is None else mean_f0
    gain = rng.uniform(0.1, 0.3) if gain is None else gain
    durs = [ms_to_samples(rng.uniform(60, 140), sample_rate) for _ in phone_ids]
    n = int(sum(durs))
    bounds = np.concatenate([[0], np.cumsum(durs)])
    # f0 contour: linear interpolation between per-phone targets
    targets = mean_f0 * rng.uniform(0.9, 1.1, size=len(phone_ids))
    centers = (bounds[:-1] + bounds[1:]) / 2.0
    f0 = np.interp(np.arange(n), centers, targets)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    amp = np.zeros(n)
    out = np.zeros(n)
    ramp = ms_to_samples(10, sample_rate)
    nyq_cap = min(5000.0, 0.45 * sample_rate)
    for i, p in enumerate(phone_ids):
        s, e = bounds[i], bounds[i + 1]
        seg_amp = rng.uniform(0.6, 1.0) * _shape(phones[p].envelope, e - s)
        r = min(ramp, (e - s) // 2)
        win = np.ones(e - s)
        win[:r] = np.sin(np.linspace(0, np.pi / 2, r)) ** 2
        win[e - s - r:] = np.cos(np.linspace(0, np.pi / 2, r)) ** 2
        amp[s:e] = seg_amp * win
        n_harm = int(nyq_cap // f0[s:e].max())
        k = np.arange(1, n_harm + 1)
        hf = f0[s:e, None] * k[None, :]
        g = _envelope_gain(hf, phones[p]) * (hf < nyq_cap)
        tone = np.einsum("tk,tk->t", g, np.sin(phase[s:e, None] * k[None, :]))
        tone /= max(np.sqrt(np.mean(tone ** 2)), 1e-12)
        out[s:e] = tone + aspiration * _shaped_noise(e - s, phones[p], rng, sample_rate, nyq_cap)
    out *= amp
    out *= gain / max(np.sqrt(np.mean(out ** 2)), 1e-12)
    peak = np.max(np.abs(out))
    if peak > 0.95:
        out *= 0.95 / peak
    align = [(int(p), int(bounds[i]), int(bounds[i + 1])) for i, p in enumerate(phone_ids)]
    return out, align


def random_phone_string(rng, n_phones: int, lo: int, hi: int) -> list:
    """Random phone ids with no immediate repeats, so collapsing is lossless."""
    length = int(rng.integers(lo, hi + 1))
    seq = [int(rng.integers(n_phones))]
    while len(seq) < length:
        p = int(rng.integers(n_phones - 1))
        seq.append(p if p < seq[-1] else p + 1)
    return seq


def gen_speech_corpus(spec: SynthTaskSpec, seed: int = 0, out_dir=None,
                      phone_strings=None) -> SpeechCorpus:
    """Pseudo-phone corpus; ``spec.vocab`` phones, ``spec.min_len..max_len`` phones per utterance."""
    if spec.kind != "speech_corpus":
        raise ParameterError("gen_speech_corpus needs kind='speech_corpus'")
    phones = phone_inventory(spec.vocab, spec.mapping_seed)
    rng = np.random.default_rng(seed)
    waves, aligns, rows = {}, {}, []
    n_test = int(round(spec.n_utterances * spec.test_fraction))
    for i in range(spec.n_utterances):
        uid = f"utt{i:05d}"
        seq = (phone_strings[i] if phone_strings is not None
               else random_phone_string(rng, spec.vocab, spec.min_len, spec.max_len))
        samples, align = synth_utterance(seq, phones, rng)
        waves[uid] = Waveform(samples, SAMPLE_RATE)
        aligns[uid] = align
        rows.append(ManifestRow(uid, f"{uid}.wav", "test" if i >= spec.n_utterances - n_test else "train"))
    manifest = Manifest(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for uid, w in waves.items():
            save_wav(w, out / f"{uid}.wav")
        manifest.base_dir = out
        manifest.save(out / "manifest.tsv")
        write_jsonl(out / "alignments.jsonl",
                    [{"utt_id": u, "phones": [list(a) for a in al]} for u, al in aligns.items()])
    return SpeechCorpus(manifest, waves, aligns, phones)


def ideal_units(alignment, n_frames: int, hop_ms: float = HOP_MS,
                sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Frame-level phone labels (frame i centered at sample i * hop)."""
    hop = ms_to_samples(hop_ms, sample_rate)
    centers = np.arange(n_frames) * hop
    ends = np.array([e for _, _, e in alignment])
    labels = np.array([p for p, _, _ in alignment])
    return labels[np.minimum(np.searchsorted(ends, centers, side="right"), len(labels) - 1)]


# ---------------------------------------------------------------- pair corpus


@dataclass
class PairExample:
    src: list
    frames: np.ndarray
    target: list
    valid_targets: list = field(default_factory=list)
    split: str = "train"
    utt_id: str = ""


@dataclass
class PairTask:
    """Deterministic source-token -> unit mapping with a local reorder."""

    spec: SynthTaskSpec
    primary_map: np.ndarray = field(init=False)
    alt_map: np.ndarray = field(init=False)
    prototypes: np.ndarray = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.spec.mapping_seed)
        self.primary_map = rng.permutation(self.spec.unit_vocab)[:self.spec.vocab]
        self.alt_map = rng.permutation(self.spec.unit_vocab)[:self.spec.vocab]
        self.prototypes = 2.0 * rng.standard_normal((self.spec.vocab, self.spec.n_mels))

    def translate(self, src, variant: int = 0) -> list:
        """Variant 0 maps tokens then swaps adjacent pairs; variant 1 uses the alternate map in order."""
        if variant == 0:
            mapped = [int(self.primary_map[s]) for s in src]
            for i in range(0, len(mapped) - 1, 2):
                mapped[i], mapped[i + 1] = mapped[i + 1], mapped[i]
            return mapped
        return [int(self.alt_map[s]) for s in src]

    def valid_targets(self, src) -> list:
        return [self.translate(src, v) for v in range(self.spec.multimodality)]

    def render(self, src) -> np.ndarray:
        """Pseudo-mel frames; identical token strings render identically."""
        key = zlib.crc32(np.asarray(src, dtype=np.int64).tobytes())
        rng = np.random.default_rng([self.spec.mapping_seed, key])
        frames = np.repeat(self.prototypes[np.asarray(src)], self.spec.frames_per_token, axis=0)
        return (frames + self.spec.noise * rng.standard_normal(frames.shape)).astype(np.float32)


def gen_pair_corpus(spec: SynthTaskSpec, seed: int = 0, lengths=None):
    """``spec.n_utterances`` distinct sources, each emitted ``spec.repeats`` times.

    With multimodality 2 every emission samples one of the two valid targets
    by ``spec.weights``. Held-out sources (split ``test``) never occur in train.
    ``lengths`` optionally fixes the source length of each distinct source.
    Returns ``(task, examples)``.
    """
    if spec.kind != "pair_corpus":
        raise ParameterError("gen_pair_corpus needs kind='pair_corpus'")
    task = PairTask(spec)
    rng = np.random.default_rng(seed)
    seen, examples = set(), []
    w = np.asarray(spec.weights, dtype=float)
    w = w / w.sum()
    n_test = int(round(spec.n_utterances * spec.test_fraction))
    i = 0
    while i < spec.n_utterances:
        n = int(lengths[i]) if lengths is not None else int(rng.integers(spec.min_len, spec.max_len + 1))
        src = rng.integers(spec.vocab, size=n).tolist()
        if tuple(src) in seen:
            continue
        seen.add(tuple(src))
        split = "test" if i >= spec.n_utterances - n_test else "train"
        frames = task.render(src)
        valid = task.valid_targets(src)
        for r in range(spec.repeats if split == "train" else 1):
            v = int(rng.choice(2, p=w)) if spec.multimodality == 2 else 0
            examples.append(PairExample(src, frames, valid[v], valid, split, f"pair{i:05d}-{r}"))
        i += 1
    return task, examples
