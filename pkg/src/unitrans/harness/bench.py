"""Decode latency: wall-clock and decoder-call counts per target-length bucket."""

from __future__ import annotations

import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch

from ..maskpredict import DecodeConfig, length_beam_decode
from ..seqmodel import ar_beam_decode, conformer_encode

BUCKETS = (20, 50, 100, 200)


@dataclass
class BucketTiming:
    length: int
    n_utterances: int
    mean_time: float
    median_time: float
    calls: list = field(default_factory=list)


@dataclass
class LatencyReport:
    ar: dict  # length -> BucketTiming
    nar: dict  # config label -> {length -> BucketTiming}
    threads: int = 1

    def speedup(self, label: str, length: int) -> float:
        return self.ar[length].mean_time / self.nar[label][length].mean_time

    def to_dict(self) -> dict:
        def row(b: BucketTiming):
            return {"length": b.length, "n": b.n_utterances, "mean_s": b.mean_time,
                    "median_s": b.median_time, "calls_min": min(b.calls), "calls_max": max(b.calls)}
        return {"threads": self.threads,
                "ar_beam5": [row(b) for b in self.ar.values()],
                "nar": {k: [dict(row(b), speedup=self.speedup(k, L)) for L, b in v.items()]
                        for k, v in self.nar.items()}}


@contextmanager
def single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def _median_time(fn, repeats: int) -> tuple[float, object]:
    times, out = [], None
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times), out


def _nar_fn(model, frames, length, cfg: DecodeConfig, teacher):
    """Full NAR decode (encoder + length-forced mask-predict), as timed."""
    def run():
        with torch.no_grad():
            enc = conformer_encode(model, frames)
            if cfg.length_beam == 1 and not cfg.npd:
                from ..maskpredict import mask_predict_decode
                return mask_predict_decode(model, enc, length, cfg.iterations)[1].decoder_calls
            t_enc = conformer_encode(teacher, frames) if cfg.npd else None
            return length_beam_decode(model, enc, cfg, teacher, t_enc)[1].decoder_calls
    return run


def _ar_fn(model, frames, length, beam):
    def run():
        with torch.no_grad():
            enc = conformer_encode(model, frames)
            return ar_beam_decode(model, enc, beam=beam, min_len=length, max_len=length).decoder_calls
    return run


def bench_latency(nar_model, ar_model, sources: dict, configs: dict | None = None, beam: int = 5,
                  repeats: int = 5, warmup: int = 2, teacher=None) -> LatencyReport:
    """Time AR beam search and NAR decoding on ``sources[length] -> list of frame matrices``.

    Every decode is forced to the bucket length (AR: eos blocked before and
    forced at that length; NAR: single length candidate unless a config asks
    for a length beam), so call counts are comparable: AR makes length + 1
    decoder calls, NAR makes T. Per-utterance time is the median of
    ``repeats`` runs after ``warmup`` untimed runs.
    """
    configs = configs or {"T5": DecodeConfig(iterations=5)}
    nar_model.eval()
    ar_model.eval()
    report = LatencyReport({}, {k: {} for k in configs})
    with single_thread():
        for length, utts in sorted(sources.items()):
            jobs = [("ar", None, lambda f: _ar_fn(ar_model, f, length, beam))]
            jobs += [("nar", k, lambda f, c=c: _nar_fn(nar_model, f, length, c, teacher or ar_model))
                     for k, c in configs.items()]
            for kind, label, make in jobs:
                fn0 = make(utts[0])
                for _ in range(warmup):
                    fn0()
                times, calls = [], []
                for frames in utts:
                    t, c = _median_time(make(frames), repeats)
                    times.append(t)
                    calls.append(int(c))
                timing = BucketTiming(length, len(utts), float(np.mean(times)),
                                      float(np.median(times)), calls)
                if kind == "ar":
                    report.ar[length] = timing
                else:
                    report.nar[label][length] = timing
    return report
