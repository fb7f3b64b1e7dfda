"""Bilateral perturbation: style normalization and information enhancement.

Style normalization pulls every utterance to the corpus-average pitch and
loudness, so units derived from it carry linguistic content only.
Information enhancement does the opposite to the encoder input: it randomizes
formants, pitch, spectral tilt, rhythm and loudness while leaving content
intact.

All pitch and rhythm manipulation runs through one STFT phase vocoder
(1024-point Hann window, 10 ms hop) so frames line up with the mel grid.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import sosfilt
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dsp import (
    HOP_MS,
    Waveform,
    extract_pitch,
    interp_rows,
    istft,
    ms_to_samples,
    rms_energy,
    stft,
)
from .exceptions import ParameterError, StatsError

VOCODER_FFT = 1024
MODES = ("rhythm", "pitch", "energy", "full")
PEAK_LIMIT = 0.99


@dataclass
class StyleStats:
    mean_f0: float
    mean_rms: float

    def __post_init__(self):
        if not (50.0 <= self.mean_f0 <= 600.0):
            raise StatsError(f"mean_f0 {self.mean_f0:.2f} Hz outside [50, 600]")
        if not self.mean_rms > 0:
            raise StatsError("mean_rms must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "StyleStats":
        d = json.loads(text)
        return cls(float(d["mean_f0"]), float(d["mean_rms"]))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "StyleStats":
        return cls.from_json(Path(path).read_text())


@dataclass
class PeqParams:
    num_peaking: int = 8
    low_shelf: int = 1
    high_shelf: int = 1
    gain_db_range: tuple = (-12.0, 12.0)
    q_range: tuple = (2.0, 5.0)
    freq_range: tuple = (60.0, None)  # upper bound None -> 0.45 * sample_rate


@dataclass
class PerturbParams:
    formant_ratio_range: tuple = (1.0, 1.4)
    pitch_shift_range: tuple = (1.0, 2.0)
    pitch_range_range: tuple = (1.0, 1.5)
    reciprocal_prob: float = 0.5
    rr_segment_frames: tuple = (19, 32)
    rr_factor_range: tuple = (0.5, 1.5)
    peq: PeqParams = field(default_factory=PeqParams)
    energy_gain_db_range: tuple = (-6.0, 6.0)
    energy_crossfade_ms: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.peq, dict):
            self.peq = PeqParams(**self.peq)
        for name in ("formant_ratio_range", "pitch_shift_range", "pitch_range_range",
                     "rr_segment_frames", "rr_factor_range", "energy_gain_db_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ParameterError(f"{name}: low {lo} > high {hi}")
            setattr(self, name, (lo, hi))
        if self.peq.num_peaking != 8:
            raise ParameterError("the equalizer uses exactly 8 peaking sections")
        if self.rr_segment_frames[0] < 1:
            raise ParameterError("segments must be at least one frame long")
        if not 0.0 <= self.reciprocal_prob <= 1.0:
            raise ParameterError("reciprocal_prob must lie in [0, 1]")

    @classmethod
    def identity(cls, **overrides) -> "PerturbParams":
        """Parameters under which every perturbation is a no-op."""
        base = dict(
            formant_ratio_range=(1.0, 1.0),
            pitch_shift_range=(1.0, 1.0),
            pitch_range_range=(1.0, 1.0),
            rr_factor_range=(1.0, 1.0),
            peq=PeqParams(gain_db_range=(0.0, 0.0)),
            energy_gain_db_range=(0.0, 0.0),
        )
        base.update(overrides)
        return cls(**base)


def utterance_seed(seed: int, utt_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(utt_id.encode("utf-8"))])


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _ratio(rng, lo, hi, reciprocal_prob) -> float:
    r = rng.uniform(lo, hi)
    if rng.random() < reciprocal_prob:
        r = 1.0 / r
    return float(r)


# ------------------------------------------------------------------ vocoder core


def _princarg(phase):
    return np.mod(phase + np.pi, 2.0 * np.pi) - np.pi


def _analysis(x: np.ndarray, hop: int):
    """STFT magnitude, phase, and per-bin instantaneous frequency (rad/sample)."""
    spec = stft(x, VOCODER_FFT, hop)
    mag = np.abs(spec)
    phase = np.angle(spec)
    omega = 2.0 * np.pi * np.arange(spec.shape[1]) / VOCODER_FFT
    inst = np.empty_like(mag)
    inst[0] = omega
    dev = _princarg(np.diff(phase, axis=0) - omega * hop)
    inst[1:] = omega + dev / hop
    return mag, phase, inst


def _harmonic_weight(mag: np.ndarray, floor_db: float = 30.0) -> np.ndarray:
    """0 for frames with one spectral peak, 1 from four peaks up.

    An envelope is only meaningful where several harmonics sample it; a lone
    sinusoid would otherwise be pinned to its original frequency.
    """
    inner = mag[:, 1:-1]
    top = mag.max(axis=1, keepdims=True) * 10.0 ** (-floor_db / 20.0)
    peaks = (inner > mag[:, :-2]) & (inner >= mag[:, 2:]) & (inner > top)
    return np.clip((peaks.sum(axis=1) - 1) / 3.0, 0.0, 1.0)


def _peak_regions(mag_t: np.ndarray):
    """Local maxima of one frame and, for every bin, the index of the peak it belongs to."""
    inner = mag_t[1:-1]
    peaks = np.nonzero((inner > mag_t[:-2]) & (inner >= mag_t[2:]))[0] + 1
    if peaks.size == 0:
        peaks = np.array([int(np.argmax(mag_t))])
    # region boundaries halfway between neighbouring peaks
    edges = (peaks[:-1] + peaks[1:]) / 2.0
    return peaks, np.searchsorted(edges, np.arange(mag_t.size), side="right")


def _pitch_shift_frames(x: np.ndarray, ratios: np.ndarray, hop: int,
                        keep_envelope: bool = True) -> np.ndarray:
    """Frequency-domain pitch shift with a per-frame ratio; duration is unchanged.

    Each spectral peak carries the bins around it to its scaled frequency as
    a block. Phases are locked to the peak (identity phase locking): the peak
    advances by its shifted instantaneous frequency and the other bins keep
    their analysis offset to it, which keeps harmonics periodic.

    Moving bins scales the spectral envelope along with the harmonics. With
    ``keep_envelope`` the original envelope is restored afterwards, so
    formants stay put (formant movement is the job of ``formant_shift``).
    """
    mag, phase, inst = _analysis(x, hop)
    n_frames, n_bins = mag.shape
    ratios = np.broadcast_to(np.asarray(ratios, dtype=np.float64), (n_frames,))
    bins = np.arange(n_bins)
    bin_width = 2.0 * np.pi / VOCODER_FFT
    new_mag = np.zeros_like(mag)
    out_phase = np.empty_like(phase)
    out_phase[0] = phase[0]
    prev = phase[0] - inst[0] * hop
    for t in range(n_frames):
        r = ratios[t]
        peaks, owner = _peak_regions(mag[t])
        dest_peak = np.clip(np.rint(inst[t, peaks] * r / bin_width).astype(int), 0, n_bins - 1)
        if t > 0 or r != 1.0:
            peak_phase = prev[dest_peak] + hop * inst[t, peaks] * r
        else:
            peak_phase = phase[0, peaks]
        dest = bins + (dest_peak - peaks)[owner]
        ok = (dest >= 0) & (dest < n_bins)
        src, dst = bins[ok], dest[ok]
        np.add.at(new_mag[t], dst, mag[t, src] ** 2)
        new_mag[t] = np.sqrt(new_mag[t])
        # unreached bins advance at their own centre frequency
        cur = prev + bins * bin_width * hop
        # strongest contributor decides each target bin's phase
        order = np.argsort(mag[t, src])
        cur[dst[order]] = (peak_phase[owner] + phase[t] - phase[t, peaks][owner])[src][order]
        out_phase[t] = cur
        prev = cur
    if keep_envelope:
        moved = ratios != 1.0
        if moved.any():
            # bounded by the 80 dB floor inside spectral_envelope
            gain = spectral_envelope(mag[moved]) - spectral_envelope(new_mag[moved])
            new_mag[moved] *= np.exp(gain * _harmonic_weight(mag[moved])[:, None])
    return istft(new_mag * np.exp(1j * out_phase), VOCODER_FFT, hop, x.size)


def _stretch_frames(x: np.ndarray, time_steps: np.ndarray, hop: int, length: int) -> np.ndarray:
    """Phase-vocoder resynthesis at fractional analysis frames ``time_steps``."""
    mag, phase, inst = _analysis(x, hop)
    n_frames = mag.shape[0]
    new_mag = interp_rows(mag, np.clip(time_steps, 0, n_frames - 1))
    nxt = np.minimum(np.floor(time_steps).astype(int) + 1, n_frames - 1)
    acc = phase[0].copy()
    out = np.empty((time_steps.size, mag.shape[1]), dtype=np.complex128)
    for i, t in enumerate(time_steps):
        if i > 0:
            acc = acc + inst[nxt[i - 1]] * hop
        out[i] = new_mag[i] * np.exp(1j * acc)
    return istft(out, VOCODER_FFT, hop, length)


# --------------------------------------------------------------- normalization


def compute_style_stats(corpus) -> StyleStats:
    """Dataset-average voiced pitch and utterance RMS."""
    corpus = list(corpus)
    if not corpus:
        raise StatsError("corpus is empty")
    voiced = [extract_pitch(w).f0 for w in corpus]
    voiced = np.concatenate([f[f > 0] for f in voiced])
    if voiced.size == 0:
        raise StatsError("corpus has no voiced frames")
    return StyleStats(float(voiced.mean()), float(np.mean([rms_energy(w) for w in corpus])))


def pitch_shift(w: Waveform, ratio) -> Waveform:
    """Scale pitch by ``ratio`` (scalar or one value per 10 ms frame), keeping duration."""
    hop = ms_to_samples(HOP_MS, w.sample_rate)
    if np.all(np.asarray(ratio) == 1.0):
        return w.replace(w.samples.copy())
    return w.replace(_pitch_shift_frames(w.samples, ratio, hop))


def _set_rms(samples: np.ndarray, target: float) -> np.ndarray:
    cur = rms_energy(samples)
    if cur <= 0:
        return samples
    return samples * (target / cur)


def style_normalize(w: Waveform, stats: StyleStats, refine: int = 3, tol: float = 0.01) -> Waveform:
    """Shift mean voiced pitch to ``stats.mean_f0`` and RMS to ``stats.mean_rms``.

    The set of voiced frames changes with the shift, so the measured mean of
    the output can miss the target. Up to ``refine`` corrections re-measure
    the output and rescale the ratio (always applied to the original ``w``)
    until the output is within ``tol`` of the target.
    """
    mean_f0 = extract_pitch(w).mean_voiced()
    out = w
    if np.isfinite(mean_f0):
        ratio = stats.mean_f0 / mean_f0
        if abs(ratio - 1.0) > 1e-3:
            out = pitch_shift(w, ratio)
            for _ in range(refine):
                got = extract_pitch(out).mean_voiced()
                if not np.isfinite(got) or abs(got / stats.mean_f0 - 1.0) <= tol:
                    break
                ratio *= stats.mean_f0 / got
                out = pitch_shift(w, ratio)
    return w.replace(_set_rms(out.samples, stats.mean_rms))


# ------------------------------------------------------------------ enhancement


def spectral_envelope(mag: np.ndarray, lifter: int = 40, iterations: int = 16) -> np.ndarray:
    """Log spectral envelope per frame by iterated cepstral smoothing ("true envelope").

    Plain cepstral smoothing sags into the gaps between harmonics; iterating
    ``max(log|X|, envelope)`` makes the estimate ride on the harmonic peaks.
    """
    n_fft = 2 * (mag.shape[1] - 1)
    log_mag = np.log(mag + 1e-12)
    # floor 80 dB below each frame's peak
    log_mag = np.maximum(log_mag, log_mag.max(axis=1, keepdims=True) - 9.2)

    def smooth(lm):
        ceps = np.fft.irfft(lm, n=n_fft, axis=1)
        ceps[:, lifter + 1:n_fft - lifter] = 0.0
        return np.fft.rfft(ceps, axis=1).real

    env = smooth(log_mag)
    for _ in range(iterations):
        env = smooth(np.maximum(log_mag, env))
    return env


def formant_shift(w: Waveform, rng=None, ratio: float | None = None,
                  params: PerturbParams | None = None, lifter: int = 40) -> Waveform:
    """Warp the cepstral spectral envelope by ``ratio`` while keeping harmonics in place."""
    params = params or PerturbParams()
    if ratio is None:
        ratio = _ratio(_as_rng(rng), *params.formant_ratio_range, params.reciprocal_prob)
    if ratio == 1.0:
        return w.replace(w.samples.copy())
    hop = ms_to_samples(HOP_MS, w.sample_rate)
    spec = stft(w.samples, VOCODER_FFT, hop)
    envelope = spectral_envelope(np.abs(spec), lifter)
    bins = np.arange(spec.shape[1], dtype=np.float64)
    src = np.clip(bins / ratio, 0, spec.shape[1] - 1)
    warped = interp_rows(envelope.T, src).T
    new_spec = spec * np.exp(warped - envelope)
    return w.replace(istft(new_spec, VOCODER_FFT, hop, len(w)))


def pitch_randomize(w: Waveform, rng=None, shift: float | None = None,
                    range_ratio: float | None = None,
                    params: PerturbParams | None = None) -> Waveform:
    """Scale f0 by ``shift`` and its excursions about the utterance mean by ``range_ratio``."""
    params = params or PerturbParams()
    rng = _as_rng(rng)
    if shift is None:
        shift = _ratio(rng, *params.pitch_shift_range, params.reciprocal_prob)
    if range_ratio is None:
        range_ratio = _ratio(rng, *params.pitch_range_range, params.reciprocal_prob)
    if shift == 1.0 and range_ratio == 1.0:
        return w.replace(w.samples.copy())
    contour = extract_pitch(w)
    ratios = np.full(contour.f0.size, float(shift))
    if contour.voiced.any():
        f0 = contour.f0[contour.voiced]
        mean = f0.mean()
        ratios[contour.voiced] = shift * (mean + range_ratio * (f0 - mean)) / f0
    return pitch_shift(w, ratios)


def _shelf(kind, freq, gain_db, q, sr):
    a = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * freq / sr
    cw, alpha = np.cos(w0), np.sin(w0) / (2.0 * q)
    sq = 2.0 * np.sqrt(a) * alpha
    sign = 1.0 if kind == "low" else -1.0
    b0 = a * ((a + 1) - sign * (a - 1) * cw + sq)
    b1 = sign * 2 * a * ((a - 1) - sign * (a + 1) * cw)
    b2 = a * ((a + 1) - sign * (a - 1) * cw - sq)
    a0 = (a + 1) + sign * (a - 1) * cw + sq
    a1 = -sign * 2 * ((a - 1) + sign * (a + 1) * cw)
    a2 = (a + 1) + sign * (a - 1) * cw - sq
    return np.array([b0, b1, b2, a0, a1, a2]) / a0


def _peaking(freq, gain_db, q, sr):
    a = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * freq / sr
    alpha = np.sin(w0) / (2.0 * q)
    cw = np.cos(w0)
    b = [1 + alpha * a, -2 * cw, 1 - alpha * a]
    den = [1 + alpha / a, -2 * cw, 1 - alpha / a]
    return np.array(b + den) / den[0]


def peq_sections(rng, sample_rate: int, params: PerturbParams | None = None) -> np.ndarray:
    """Draw a low shelf, 8 peaking filters and a high shelf as an ``[10, 6]`` SOS array.

    Shelves use Q = 1/sqrt(2) so they stay monotone; the Q range applies to peaks.
    """
    peq = (params or PerturbParams()).peq
    rng = _as_rng(rng)
    lo = peq.freq_range[0]
    hi = peq.freq_range[1] or 0.45 * sample_rate

    def draw():
        freq = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        return freq, float(rng.uniform(*peq.gain_db_range)), float(rng.uniform(*peq.q_range))

    sections = []
    for _ in range(peq.low_shelf):
        f, g, _q = draw()
        sections.append(_shelf("low", f, g, 1 / np.sqrt(2), sample_rate))
    for _ in range(peq.num_peaking):
        sections.append(_peaking(*draw(), sample_rate))
    for _ in range(peq.high_shelf):
        f, g, _q = draw()
        sections.append(_shelf("high", f, g, 1 / np.sqrt(2), sample_rate))
    return np.stack(sections)


def parametric_eq(w: Waveform, rng=None, params: PerturbParams | None = None,
                  sections: np.ndarray | None = None) -> Waveform:
    if sections is None:
        sections = peq_sections(rng, w.sample_rate, params)
    return w.replace(sosfilt(sections, w.samples))


def _segments(n_frames: int, rng, lo: int, hi: int):
    bounds, start = [], 0
    while start < n_frames:
        length = int(rng.integers(lo, hi + 1))
        bounds.append((start, min(start + length, n_frames)))
        start += length
    return bounds


def random_resample(w: Waveform, rng=None, params: PerturbParams | None = None,
                    factors=None) -> Waveform:
    """Stretch or squeeze random 19-32 frame segments along time.

    Each segment's frame trajectory is linearly interpolated to
    ``round(len * factor)`` frames and resynthesized by the phase vocoder, so
    local pitch survives. ``factors`` (one per segment) overrides sampling.
    """
    params = params or PerturbParams()
    rng = _as_rng(rng)
    hop = ms_to_samples(HOP_MS, w.sample_rate)
    n_frames = len(w) // hop
    if n_frames < 1:
        return w.replace(w.samples.copy())
    segs = _segments(n_frames, rng, *params.rr_segment_frames)
    if factors is None:
        factors = rng.uniform(*params.rr_factor_range, size=len(segs))
    factors = np.broadcast_to(np.asarray(factors, dtype=np.float64), (len(segs),))
    if np.all(factors == 1.0):
        return w.replace(w.samples.copy())
    steps = []
    for (s, e), a in zip(segs, factors):
        n = e - s
        m = max(1, int(round(n * a)))
        steps.append(s + (np.linspace(0.0, n - 1, m) if m > 1 else np.zeros(1)))
    steps = np.concatenate(steps)
    tail = len(w) - n_frames * hop
    return w.replace(_stretch_frames(w.samples, steps, hop, steps.size * hop + tail))


def _limit_peak(samples: np.ndarray, ceiling: float) -> np.ndarray:
    peak = np.max(np.abs(samples))
    if peak > ceiling:
        return samples * (ceiling / peak)
    return samples


def energy_perturb(w: Waveform, rng=None, params: PerturbParams | None = None,
                   gains_db=None) -> Waveform:
    """Piecewise gains per rhythm-sized segment, joined by linear crossfades."""
    params = params or PerturbParams()
    rng = _as_rng(rng)
    hop = ms_to_samples(HOP_MS, w.sample_rate)
    n_frames = max(1, len(w) // hop)
    segs = _segments(n_frames, rng, *params.rr_segment_frames)
    if gains_db is None:
        gains_db = rng.uniform(*params.energy_gain_db_range, size=len(segs))
    gains_db = np.broadcast_to(np.asarray(gains_db, dtype=np.float64), (len(segs),))
    if np.all(gains_db == 0.0):
        return w.replace(w.samples.copy())
    gain = 10.0 ** (gains_db / 20.0)
    # piecewise-linear envelope: flat inside segments, ramps across boundaries
    half = ms_to_samples(params.energy_crossfade_ms, w.sample_rate) // 2
    knots_x, knots_y = [0.0], [gain[0]]
    for i in range(1, len(segs)):
        b = segs[i][0] * hop
        knots_x += [b - half, b + half]
        knots_y += [gain[i - 1], gain[i]]
    knots_x.append(float(len(w) - 1))
    knots_y.append(gain[-1])
    env = np.interp(np.arange(len(w)), np.maximum.accumulate(np.array(knots_x)), knots_y)
    out = w.samples * env
    return w.replace(_limit_peak(out, max(PEAK_LIMIT, np.max(np.abs(w.samples)))))


def enhance_chain(w: Waveform, params: PerturbParams | None = None, mode: str = "full",
                  rng=None) -> Waveform:
    """Single-family or full information enhancement.

    ``pitch`` applies equalizer, pitch randomization and formant shift in that
    order; ``full`` follows it with rhythm and energy perturbation.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {MODES}")
    params = params or PerturbParams()
    rng = _as_rng(params.seed if rng is None else rng)
    out = w
    if mode in ("pitch", "full"):
        out = parametric_eq(out, rng, params)
        out = pitch_randomize(out, rng, params=params)
        out = formant_shift(out, rng, params=params)
        out = out.replace(_limit_peak(out.samples, max(PEAK_LIMIT, np.max(np.abs(w.samples)))))
    if mode in ("rhythm", "full"):
        out = random_resample(out, rng, params)
    if mode in ("energy", "full"):
        out = energy_perturb(out, rng, params)
    return out


# ------------------------------------------------------------------- estimators


class StyleNormalizer(BaseEstimator, TransformerMixin):
    """Fit corpus pitch/energy statistics; transform utterances onto them."""

    def __init__(self, stats: StyleStats | None = None):
        self.stats = stats

    def fit(self, X, y=None):
        self.stats_ = self.stats if self.stats is not None else compute_style_stats(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return [style_normalize(w, self.stats_) for w in X]


class InformationEnhancer(BaseEstimator, TransformerMixin):
    """Stateless enhancement; per-utterance seeds derive from ``seed`` and the utterance id."""

    def __init__(self, mode: str = "full", seed: int = 0, params: PerturbParams | None = None):
        self.mode = mode
        self.seed = seed
        self.params = params

    def fit(self, X=None, y=None):
        if self.mode not in MODES:
            raise ParameterError(f"unknown mode {self.mode!r}")
        return self

    def transform(self, X, utt_ids=None):
        X = list(X)
        if utt_ids is None:
            utt_ids = [str(i) for i in range(len(X))]
        out = []
        for w, uid in zip(X, utt_ids):
            rng = np.random.default_rng(utterance_seed(self.seed, uid))
            out.append(enhance_chain(w, self.params, self.mode, rng))
        return out
