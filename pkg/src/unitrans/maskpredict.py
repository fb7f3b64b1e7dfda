"""Mask-predict decoding, length beam, noisy parallel decoding, distillation, training loops."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import LengthError, ParameterError, TrainingError
from .seqmodel import (ARModel, Batch, EncoderState, ModelConfig, NARModel, ar_beam_decode,
                       ar_score_batch, conformer_encode, length_predict, train_step)
from .units import UnitSequence

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- masking


def sample_training_mask(N: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n ~ U{1..N}, then a uniform n-subset of positions (sorted)."""
    if N < 1:
        raise ParameterError("target length must be >= 1")
    n = int(rng.integers(1, N + 1))
    return np.sort(rng.choice(N, size=n, replace=False))


def mask_schedule(N: int, T: int, t: int) -> int:
    """Number of positions remasked at iteration ``t`` (linear decay, floor, at least 1)."""
    if T < 1 or N < 1:
        raise ParameterError("need N >= 1 and T >= 1")
    if t == 0:
        return N
    if not 1 <= t <= T - 1:
        raise ParameterError(f"iteration {t} outside 0..{T - 1}")
    return max(1, (N * (T - t)) // T)


# ------------------------------------------------------------------ decoding


@dataclass
class DecodeConfig:
    iterations: int = 5
    length_beam: int = 1
    npd: bool = False
    seed: int = 0

    def validate(self, max_len: int) -> "DecodeConfig":
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if not 1 <= self.length_beam <= max_len:
            raise ParameterError(f"length_beam must be in 1..{max_len}")
        return self


@dataclass
class IterationRecord:
    masked: list
    predicted: list
    scores: list


@dataclass
class CandidateTrace:
    length: int
    iterations: list = field(default_factory=list)
    units: list = field(default_factory=list)
    avg_log_score: float = 0.0
    ar_score: float | None = None


@dataclass
class DecodeTrace:
    """Per-candidate iteration records. Iteration 0 is the all-mask pass and counts toward T."""

    candidates: dict = field(default_factory=dict)  # length -> CandidateTrace
    selected_length: int | None = None
    decoder_calls: int = 0
    utt_id: str = ""

    def to_dict(self) -> dict:
        return {"utt_id": self.utt_id, "selected_length": self.selected_length,
                "decoder_calls": self.decoder_calls,
                "candidates": [asdict(self.candidates[k]) for k in sorted(self.candidates)]}


def _mask_predict_batch(model: NARModel, enc: EncoderState, lengths, T: int):
    """Refine all candidate lengths together: one decoder call per iteration."""
    cfg = model.cfg
    mask_id, pad_id = cfg.tokens.mask, cfg.tokens.pad
    K, L = len(lengths), max(lengths)
    if L > cfg.max_len:
        raise LengthError(f"target length {L} exceeds max_len {cfg.max_len}")
    real = np.zeros((K, L), dtype=bool)
    for i, n in enumerate(lengths):
        real[i, :n] = True
    preds = np.full((K, L), mask_id, dtype=np.int64)
    scores = np.zeros((K, L))
    traces = [CandidateTrace(int(n)) for n in lengths]
    enc_k = enc if enc.states.shape[0] == K else enc.repeat(K)
    masked = [np.arange(n) for n in lengths]
    real_t = torch.as_tensor(real)
    for t in range(T):
        if t > 0:
            # lowest scores first, stable sort keeps ties at the lowest index
            masked = [np.sort(np.argsort(scores[i, :n], kind="stable")[:mask_schedule(n, T, t)])
                      for i, n in enumerate(lengths)]
        tokens = np.where(real, preds, pad_id)
        for i, m in enumerate(masked):
            tokens[i, m] = mask_id
        with torch.no_grad():
            lp = model.decoder(torch.as_tensor(tokens), enc_k, real_t).double().numpy()
        best = lp.argmax(axis=-1)
        best_p = np.exp(np.take_along_axis(lp, best[..., None], axis=-1)[..., 0])
        for i, m in enumerate(masked):
            preds[i, m] = best[i, m]
            scores[i, m] = best_p[i, m]
            traces[i].iterations.append(IterationRecord(m.tolist(), best[i, m].tolist(),
                                                        best_p[i, m].tolist()))
    for i, n in enumerate(lengths):
        traces[i].units = preds[i, :n].tolist()
        traces[i].avg_log_score = float(np.mean(np.log(scores[i, :n])))
    return traces


def mask_predict_decode(model: NARModel, enc: EncoderState, N: int, T: int):
    """Decode a single target length ``N`` with ``T`` decoder passes."""
    if T < 1:
        raise ParameterError("T must be >= 1")
    calls = model.decoder.calls
    (cand,) = _mask_predict_batch(model, enc, [int(N)], T)
    trace = DecodeTrace({cand.length: cand}, cand.length, model.decoder.calls - calls)
    return UnitSequence(cand.units, K=model.cfg.unit_vocab), trace


def npd_select(teacher: ARModel, teacher_enc: EncoderState, candidates):
    """Index of the candidate with the highest length-normalized teacher log-probability."""
    if not candidates:
        raise ParameterError("npd needs at least one candidate")
    scores = ar_score_batch(teacher, teacher_enc, candidates, normalize=True)
    return int(np.argmax(scores)), scores


def length_beam_decode(model: NARModel, enc: EncoderState, cfg: DecodeConfig | None = None,
                       teacher: ARModel | None = None, teacher_enc: EncoderState | None = None,
                       sequential: bool = False):
    """Decode the top-K predicted lengths and pick by average log score (or teacher with NPD)."""
    cfg = (cfg or DecodeConfig()).validate(model.cfg.max_len)
    calls = model.decoder.calls
    lengths = length_predict(model, enc).top_k(cfg.length_beam)
    if sequential:
        cands = [c for n in lengths for c in _mask_predict_batch(model, enc, [n], cfg.iterations)]
    else:
        cands = _mask_predict_batch(model, enc, lengths, cfg.iterations)
    trace = DecodeTrace({c.length: c for c in cands})
    if cfg.npd:
        if teacher is None or teacher_enc is None:
            raise ParameterError("npd requires a teacher and its encoder state")
        best, ar = npd_select(teacher, teacher_enc, [c.units for c in cands])
        for c, s in zip(cands, ar):
            c.ar_score = float(s)
    else:
        best = int(np.argmax([c.avg_log_score for c in cands]))
    trace.selected_length = cands[best].length
    trace.decoder_calls = model.decoder.calls - calls
    return UnitSequence(cands[best].units, K=model.cfg.unit_vocab), trace


# -------------------------------------------------------------- distillation


def _source_key(frames) -> str:
    a = np.ascontiguousarray(np.asarray(frames, dtype=np.float32))
    return hashlib.sha1(a.tobytes() + str(a.shape).encode()).hexdigest()


@torch.no_grad()
def distill_corpus(teacher: ARModel, train_pairs, beam: int = 5):
    """Replace every target with the teacher's beam output; identical sources decode once."""
    teacher.eval()
    cache, out, dropped = {}, [], []
    for i, (src, _tgt) in enumerate(train_pairs):
        key = _source_key(src)
        if key not in cache:
            try:
                enc = conformer_encode(teacher, src)
                cache[key] = ar_beam_decode(teacher, enc, beam=beam).units
            except Exception as exc:  # noqa: BLE001 - recorded, source dropped
                cache[key] = None
                log.warning("distillation failed for pair %d: %s", i, exc)
        if cache[key] is None or not cache[key]:
            dropped.append(i)
            continue
        out.append((src, list(cache[key])))
    if dropped:
        log.warning("dropped %d sources during distillation", len(dropped))
    return out


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    max_updates: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 200
    grad_clip: float = 1.0
    seed: int = 0
    time_limit: float | None = None
    log_every: int = 100


def _lr_factor(warmup: int):
    def factor(step):
        s = step + 1
        return min(s / warmup, math.sqrt(warmup / s)) if warmup > 0 else 1.0
    return factor


def train_model(model, pairs, mode: str, config: TrainConfig | None = None, history: list | None = None):
    """Minibatch Adam training of an NAR (``mode='nar'``) or AR (``'ar'``) model on (frames, units) pairs."""
    config = config or TrainConfig()
    pairs = [(np.asarray(s), [int(u) for u in t]) for s, t in pairs if len(t) > 0]
    if not pairs:
        raise TrainingError("no non-empty training pairs", {})
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.98), eps=1e-8)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_factor(config.warmup))
    history = [] if history is None else history
    start = time.perf_counter()
    order, cursor = rng.permutation(len(pairs)), 0
    for step in range(config.max_updates):
        if cursor + config.batch_size > len(order):
            order, cursor = rng.permutation(len(pairs)), 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        chunk = [pairs[i] for i in idx]
        batch = Batch.from_pairs(chunk, dtype)
        masks = [sample_training_mask(len(t), rng) for _, t in chunk] if mode == "nar" else None
        losses = train_step(model, opt, batch, mode, masks, config.grad_clip)
        sched.step()
        history.append(losses["loss"])
        if config.log_every and step % config.log_every == 0:
            log.info("%s step %d loss %.4f", mode, step, losses["loss"])
        if config.time_limit and time.perf_counter() - start > config.time_limit:
            log.info("time limit reached after %d updates", step + 1)
            break
    model.eval()
    return history


# ---------------------------------------------------------------- estimators


class _TranslatorBase(BaseEstimator):
    kind = ""

    def _model_config(self, n_mels: int) -> ModelConfig:
        return ModelConfig(n_mels=n_mels, **(self.model_config or {}))

    def _train_config(self) -> TrainConfig:
        return TrainConfig(max_updates=self.max_updates, batch_size=self.batch_size, lr=self.lr,
                           seed=self.random_state, time_limit=self.time_limit)

    def fit(self, X, y):
        X = [np.asarray(x, dtype=np.float32) for x in X]
        if len(X) != len(y) or not X:
            raise ParameterError("X and y must be non-empty and equally long")
        torch.manual_seed(self.random_state)
        self.model_ = (NARModel if self.kind == "nar" else ARModel)(self._model_config(X[0].shape[1]))
        self.loss_history_ = train_model(self.model_, list(zip(X, y)), self.kind, self._train_config())
        return self

    def score(self, X, y):
        from .harness.bleu import corpus_bleu

        return corpus_bleu([[list(map(int, r))] for r in y], [list(p) for p in self.predict(X)]).bleu


class MaskPredictTranslator(_TranslatorBase):
    """Speech-to-unit NAR translator decoded with mask-predict and a length beam."""

    kind = "nar"

    def __init__(self, model_config: dict | None = None, iterations: int = 5, length_beam: int = 1,
                 npd: bool = False, teacher=None, max_updates: int = 2000, batch_size: int = 32,
                 lr: float = 1e-3, random_state: int = 0, time_limit: float | None = None):
        self.model_config = model_config
        self.iterations = iterations
        self.length_beam = length_beam
        self.npd = npd
        self.teacher = teacher
        self.max_updates = max_updates
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state
        self.time_limit = time_limit

    @torch.no_grad()
    def decode_one(self, frames):
        check_is_fitted(self, "model_")
        cfg = DecodeConfig(self.iterations, self.length_beam, self.npd, self.random_state)
        teacher = getattr(self.teacher, "model_", self.teacher)
        enc = conformer_encode(self.model_, frames)
        t_enc = conformer_encode(teacher, frames) if self.npd else None
        return length_beam_decode(self.model_, enc, cfg, teacher, t_enc)

    def predict(self, X):
        return [self.decode_one(x)[0].ids for x in X]


class AutoregressiveTranslator(_TranslatorBase):
    """Causal-decoder teacher decoded with length-normalized beam search."""

    kind = "ar"

    def __init__(self, model_config: dict | None = None, beam: int = 5, max_updates: int = 2000,
                 batch_size: int = 32, lr: float = 1e-3, random_state: int = 0,
                 time_limit: float | None = None):
        self.model_config = model_config
        self.beam = beam
        self.max_updates = max_updates
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state
        self.time_limit = time_limit

    @torch.no_grad()
    def predict(self, X):
        check_is_fitted(self, "model_")
        out = []
        for x in X:
            enc = conformer_encode(self.model_, x)
            out.append(np.asarray(ar_beam_decode(self.model_, enc, beam=self.beam).units, dtype=np.int64))
        return out
