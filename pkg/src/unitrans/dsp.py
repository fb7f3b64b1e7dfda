"""Audio primitives: WAV I/O, log-mel features, YIN pitch, RMS energy, STFT."""

from __future__ import annotations

import io
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    EmptyInputError,
    FormatError,
    ParameterError,
    UnsupportedFormatError,
)

SAMPLE_RATE = 16000
NUM_MELS = 80
HOP_MS = 10.0
WIN_MS = 25.0
LOG_FLOOR = 1e-10
PITCH_FMIN = 50.0
PITCH_FMAX = 600.0
YIN_THRESHOLD = 0.15


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ParameterError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size < 1:
            raise EmptyInputError("waveform must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def replace(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    hop_ms: float = HOP_MS
    num_mels: int = NUM_MELS

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class PitchContour:
    f0: np.ndarray
    voiced: np.ndarray = field(default=None)

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        if self.voiced is None:
            self.voiced = self.f0 > 0
        self.voiced = np.asarray(self.voiced, dtype=bool)

    def mean_voiced(self) -> float:
        """Mean f0 over voiced frames; nan if nothing is voiced."""
        if not self.voiced.any():
            return float("nan")
        return float(self.f0[self.voiced].mean())


@dataclass
class EnergyContour:
    rms: np.ndarray


def require_canonical_rate(w: Waveform) -> Waveform:
    if w.sample_rate != SAMPLE_RATE:
        raise UnsupportedFormatError(
            f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz; resample upstream"
        )
    return w


# --------------------------------------------------------------------------- WAV


def load_wav(source) -> Waveform:
    """Read 16-bit PCM mono WAV from a path, raw bytes or a binary file object."""
    if isinstance(source, (bytes, bytearray)):
        fh = io.BytesIO(source)
    elif isinstance(source, (str, Path)):
        fh = open(source, "rb")
    else:
        fh = source
    try:
        with wave.open(fh, "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"malformed WAV: {exc}") from exc
    finally:
        if isinstance(source, (str, Path)):
            fh.close()
    if channels != 1:
        raise UnsupportedFormatError(f"only mono audio is supported, got {channels} channels")
    if width != 2:
        raise UnsupportedFormatError(f"only 16-bit PCM is supported, got {8 * width}-bit")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise FormatError("WAV file contains no samples")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def save_wav(w: Waveform, path=None) -> bytes:
    """Encode as 16-bit PCM mono; optionally also write to ``path``."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(w.sample_rate))
        wf.writeframes(pcm.tobytes())
    data = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return data


# ----------------------------------------------------------------------- framing


def ms_to_samples(ms: float, sample_rate: int) -> int:
    return int(round(ms * sample_rate / 1000.0))


def next_pow2(n: int) -> int:
    return 1 << max(0, int(np.ceil(np.log2(max(n, 1)))))


def frame_signal(x: np.ndarray, win: int, hop: int, pad_mode: str = "reflect") -> np.ndarray:
    """Split into ``len(x) // hop`` frames of ``win`` samples, frame i centered on sample i*hop.

    Samples outside the signal are filled per ``pad_mode`` (odd ``"reflect"`` keeps edges smooth, or ``"constant"``).
    """
    n_frames = x.size // hop
    left = win // 2
    right = n_frames * hop + win - x.size
    if pad_mode == "reflect" and x.size > 1:
        padded = np.pad(x, (left, right), mode="reflect", reflect_type="odd")
    else:
        padded = np.pad(x, (left, right))
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def stft(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Hann-windowed STFT, ``[len(x)//hop, n_fft//2 + 1]`` complex."""
    frames = frame_signal(x, n_fft, hop) * np.hanning(n_fft + 1)[:-1]
    return np.fft.rfft(frames, axis=1)


def istft(spec: np.ndarray, n_fft: int, hop: int, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`, trimmed to ``length`` samples."""
    window = np.hanning(n_fft + 1)[:-1]
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    n_frames = frames.shape[0]
    left = n_fft // 2
    total = left + max(n_frames * hop, length) + n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        out[i * hop:i * hop + n_fft] += frames[i]
        norm[i * hop:i * hop + n_fft] += window ** 2
    # edges where the window sum vanishes carry no signal
    norm = np.where(norm > 1e-8, norm, 1.0)
    out = out / norm
    return out[left:left + length]


# --------------------------------------------------------------------------- mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_mels: int, n_fft: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-style triangular filters, shape ``[num_mels, n_fft//2 + 1]``."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lower) / (center - lower)
    down = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


def mel_spectrogram(w: Waveform, num_mels: int = NUM_MELS, hop_ms: float = HOP_MS,
                    win_ms: float = WIN_MS) -> MelSpectrogram:
    if win_ms < hop_ms:
        raise ParameterError("win_ms must be >= hop_ms")
    hop = ms_to_samples(hop_ms, w.sample_rate)
    win = ms_to_samples(win_ms, w.sample_rate)
    if len(w) < win:
        raise EmptyInputError(f"waveform has {len(w)} samples, shorter than one {win}-sample window")
    n_fft = next_pow2(win)
    frames = frame_signal(w.samples, win, hop) * np.hanning(win + 1)[:-1]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(num_mels, n_fft, w.sample_rate)
    mel = np.log(np.maximum(power @ fb.T, LOG_FLOOR))
    return MelSpectrogram(mel, hop_ms, num_mels)


# ------------------------------------------------------------------------- pitch


def _yin_cmndf(frames: np.ndarray, width: int, max_lag: int) -> np.ndarray:
    """Cumulative-mean-normalized difference, one row per frame, lags 0..max_lag."""
    n = frames.shape[1]
    n_fft = next_pow2(n + width)
    head = frames[:, :width]
    spec_a = np.fft.rfft(head, n=n_fft, axis=1)
    spec_b = np.fft.rfft(frames, n=n_fft, axis=1)
    # r[tau] = sum_j x[j] x[j + tau], j < width
    corr = np.fft.irfft(np.conj(spec_a) * spec_b, n=n_fft, axis=1)[:, :max_lag + 1]
    sq = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    energy_0 = sq[:, width][:, None]
    energy_tau = sq[:, lags + width] - sq[:, lags]
    diff = np.maximum(energy_0 + energy_tau - 2.0 * corr, 0.0)
    cum = np.cumsum(diff[:, 1:], axis=1)
    cmndf = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmndf[:, 1:] = np.where(cum > 0, diff[:, 1:] * lags[1:] / cum, 1.0)
    return cmndf


def extract_pitch(w: Waveform, hop_ms: float = HOP_MS, fmin: float = PITCH_FMIN,
                  fmax: float = PITCH_FMAX, threshold: float = YIN_THRESHOLD,
                  win_ms: float = WIN_MS) -> PitchContour:
    """YIN pitch track on the mel frame grid (one value per ``hop_ms``)."""
    sr = w.sample_rate
    if sr < 8000:
        raise ParameterError("pitch extraction needs sample_rate >= 8 kHz")
    hop = ms_to_samples(hop_ms, sr)
    width = ms_to_samples(win_ms, sr)
    min_lag = int(np.floor(sr / fmax))
    max_lag = int(np.ceil(sr / fmin))
    n_frames = len(w) // hop
    f0 = np.zeros(n_frames)
    if n_frames == 0:
        return PitchContour(f0)
    frames = frame_signal(w.samples, width + max_lag + 1, hop)
    cmndf = _yin_cmndf(frames, width, max_lag)
    energy = np.sum(frames[:, :width] ** 2, axis=1)
    for i in range(n_frames):
        if energy[i] < 1e-8 * width:
            continue
        d = cmndf[i]
        below = np.nonzero(d[min_lag:max_lag] < threshold)[0]
        if below.size == 0:
            continue
        tau = min_lag + below[0]
        while tau + 1 < max_lag and d[tau + 1] < d[tau]:
            tau += 1
        shift = 0.0
        if 1 <= tau < max_lag:
            a, b, c = d[tau - 1], d[tau], d[tau + 1]
            denom = a - 2.0 * b + c
            if denom > 0:
                shift = 0.5 * (a - c) / denom
        freq = sr / (tau + shift)
        if fmin <= freq <= fmax:
            f0[i] = freq
    return PitchContour(f0)


# ------------------------------------------------------------------------ energy


def rms_energy(w) -> float:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(x * x)))


def rms_contour(w: Waveform, hop_ms: float = HOP_MS, win_ms: float = WIN_MS) -> EnergyContour:
    hop = ms_to_samples(hop_ms, w.sample_rate)
    win = ms_to_samples(win_ms, w.sample_rate)
    frames = frame_signal(w.samples, win, hop)
    return EnergyContour(np.sqrt(np.mean(frames ** 2, axis=1)))


# -------------------------------------------------------------------- resampling


def resample_segment(samples, factor: float) -> np.ndarray:
    """Linear-interpolation resampling along axis 0 to ``round(len * factor)`` points.

    The first and last input points map onto the first and last output points.
    """
    if not factor > 0 or not np.isfinite(factor):
        raise ParameterError(f"resampling factor must be positive, got {factor}")
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise EmptyInputError("cannot resample an empty segment")
    m = max(1, int(round(n * factor)))
    if m == n:
        return x.copy()
    pos = np.linspace(0.0, n - 1, m) if m > 1 else np.zeros(1)
    return interp_rows(x, pos)


def interp_rows(x: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Linearly interpolate rows of ``x`` at fractional indices ``pos``."""
    n = x.shape[0]
    lo = np.clip(np.floor(pos).astype(int), 0, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = (pos - lo).reshape((-1,) + (1,) * (x.ndim - 1))
    return x[lo] * (1.0 - frac) + x[hi] * frac
