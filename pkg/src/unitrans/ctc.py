"""CTC loss, greedy decoding, and encoder finetuning on perturbed/normalized pairs.

Lattice column 0 is the blank; column ``k + 1`` is unit ``k``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .exceptions import InfeasibleAlignmentError, ParameterError, ShapeError, TrainingError
from .units import UnitSequence, collapse_units

log = logging.getLogger(__name__)

BLANK = 0
NEG = -1e30


def min_frames(target) -> int:
    """Fewest frames any alignment of ``target`` needs: one per label plus a blank between repeats."""
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    return int(t.size + np.sum(t[1:] == t[:-1])) if t.size else 0


def check_lattice(lattice, atol: float = 1e-6) -> np.ndarray:
    lp = np.asarray(lattice, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[1] < 2:
        raise ShapeError("lattice must be [frames, vocab + 1]")
    norm = logsumexp(lp, axis=1)
    if np.max(np.abs(norm)) > atol:
        raise ShapeError("lattice rows are not normalized log-probabilities")
    return lp


def _extend(target: np.ndarray) -> np.ndarray:
    ext = np.zeros(2 * target.size + 1, dtype=np.int64)
    ext[1::2] = target + 1
    return ext


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    """Shift right by ``k`` (left if negative), filling with -inf."""
    out = np.full_like(a, -np.inf)
    if k > 0:
        out[k:] = a[:-k] if k < a.size else out[k:]
    elif k < 0 and -k < a.size:
        out[:k] = a[-k:]
    return out


def _alpha_beta(lp: np.ndarray, ext: np.ndarray):
    T, S = lp.shape[0], ext.size
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        a = alpha[t - 1]
        prev = np.stack([a, _shift(a, 1), np.where(skip, _shift(a, 2), -np.inf)])
        alpha[t] = logsumexp(prev, axis=0) + emit[t]
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_next = np.concatenate([skip, [False, False]])[2:]
    for t in range(T - 2, -1, -1):
        b = beta[t + 1]
        nxt = np.stack([b, _shift(b, -1), np.where(skip_next, _shift(b, -2), -np.inf)])
        beta[t] = logsumexp(nxt, axis=0) + emit[t]
    return alpha, beta


def ctc_nll(lattice, target) -> float:
    """Negative log of the total probability of alignments collapsing to ``target``.

    Raises InfeasibleAlignmentError when the lattice is too short.
    """
    lp = check_lattice(lattice)
    tgt = np.asarray(target.ids if isinstance(target, UnitSequence) else target, dtype=np.int64)
    if tgt.size and (tgt.min() < 0 or tgt.max() + 1 >= lp.shape[1]):
        raise ShapeError("target id outside lattice vocabulary")
    if min_frames(tgt) > lp.shape[0]:
        raise InfeasibleAlignmentError(
            f"target needs {min_frames(tgt)} frames, lattice has {lp.shape[0]}")
    ext = _extend(tgt)
    alpha, _ = _alpha_beta(lp, ext)
    tail = alpha[-1, -2:] if ext.size > 1 else alpha[-1, -1:]
    return float(-logsumexp(tail))


def ctc_grad_logits(logits, target):
    """NLL and its analytic gradient w.r.t. unnormalized per-frame logits.

    ``d nll / d logit[t, k] = softmax[t, k] - occupancy[t, k]`` where occupancy
    is the forward-backward posterior of emitting k at t.
    """
    z = np.asarray(logits, dtype=np.float64)
    lp = z - logsumexp(z, axis=1, keepdims=True)
    tgt = np.asarray(target, dtype=np.int64)
    if min_frames(tgt) > lp.shape[0]:
        raise InfeasibleAlignmentError("target does not fit in the lattice")
    ext = _extend(tgt)
    alpha, beta = _alpha_beta(lp, ext)
    tail = alpha[-1, -2:] if ext.size > 1 else alpha[-1, -1:]
    log_total = logsumexp(tail)
    # alpha * beta double counts the emission at t
    post = alpha + beta - lp[:, ext] - log_total
    occ = np.zeros_like(lp)
    for s, k in enumerate(ext):
        occ[:, k] += np.exp(post[:, s])
    return float(-log_total), np.exp(lp) - occ


def ctc_loss_batch(log_probs: torch.Tensor, targets, input_lengths) -> torch.Tensor:
    """Per-sample CTC NLL for a padded batch ``[B, T, C]``, differentiable through autograd.

    Infeasible samples come back as +inf.
    """
    B, T, _ = log_probs.shape
    device, dtype = log_probs.device, log_probs.dtype
    lens = torch.as_tensor(np.asarray(input_lengths), dtype=torch.long, device=device)
    exts = [_extend(np.asarray(t, dtype=np.int64)) for t in targets]
    S = max(e.size for e in exts)
    ext = torch.zeros(B, S, dtype=torch.long, device=device)
    valid = torch.zeros(B, S, dtype=torch.bool, device=device)
    skip = torch.zeros(B, S, dtype=torch.bool, device=device)
    for b, e in enumerate(exts):
        et = torch.as_tensor(e)
        ext[b, :e.size] = et
        valid[b, :e.size] = True
        if e.size > 2:
            skip[b, 2:e.size] = (et[2:] != BLANK) & (et[2:] != et[:-2])
    emit = torch.gather(log_probs, 2, ext.unsqueeze(1).expand(B, T, S))
    neg = torch.full((B, S), NEG, dtype=dtype, device=device)
    alpha = neg.clone()
    alpha[:, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 1] = torch.where(valid[:, 1], emit[:, 0, 1], alpha[:, 1])
    pad1 = torch.full((B, 1), NEG, dtype=dtype, device=device)
    pad2 = torch.full((B, 2), NEG, dtype=dtype, device=device)
    for t in range(1, T):
        a1 = torch.cat([pad1, alpha], dim=1)[:, :S]
        a2 = torch.where(skip, torch.cat([pad2, alpha], dim=1)[:, :S], neg)
        nxt = torch.logsumexp(torch.stack([alpha, a1, a2]), dim=0) + emit[:, t]
        nxt = torch.where(valid, nxt, neg)
        alpha = torch.where((t < lens).unsqueeze(1), nxt, alpha)
    last = torch.as_tensor([e.size - 1 for e in exts], device=device)
    end1 = alpha.gather(1, last.unsqueeze(1)).squeeze(1)
    end2 = alpha.gather(1, (last - 1).clamp(min=0).unsqueeze(1)).squeeze(1)
    end2 = torch.where(last > 0, end2, torch.full_like(end2, NEG))
    nll = -torch.logsumexp(torch.stack([end1, end2]), dim=0)
    need = torch.as_tensor([min_frames(t) for t in targets], device=device)
    return torch.where(need <= lens, nll, torch.full_like(nll, math.inf))


def ctc_greedy_decode(lattice) -> UnitSequence:
    """Frame argmax, merge repeats, drop blanks."""
    lp = np.asarray(lattice)
    best = np.argmax(lp, axis=1)
    best = collapse_units(best)
    return UnitSequence(best[best != BLANK] - 1)


# --------------------------------------------------------------------- encoder


@dataclass
class CTCConfig:
    n_units: int = 64
    n_mels: int = 80
    hidden: int = 128
    layers: int = 3
    kernel: int = 5
    feature_dim: int = 80
    lr: float = 2e-3
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-8
    warmup: int = 100
    max_updates: int = 1500
    batch_size: int = 16
    grad_clip: float = 5.0
    seed: int = 0


class FeatureEncoder(nn.Module):
    """Stride-preserving conv stack over mel frames plus a CTC head.

    ``encode`` returns the pre-head features used for clustering.
    """

    def __init__(self, config: CTCConfig):
        super().__init__()
        self.config = config
        c = config
        self.register_buffer("feat_mean", torch.zeros(c.n_mels))
        self.register_buffer("feat_std", torch.ones(c.n_mels))
        layers, dim = [], c.n_mels
        for _ in range(c.layers):
            layers += [nn.Conv1d(dim, c.hidden, c.kernel, padding=c.kernel // 2), nn.GELU()]
            dim = c.hidden
        layers.append(nn.Conv1d(dim, c.feature_dim, 1))
        self.net = nn.Sequential(*layers)
        self.head = nn.Linear(c.feature_dim, c.n_units + 1)

    def set_normalization(self, frames: np.ndarray):
        self.feat_mean.copy_(torch.as_tensor(frames.mean(axis=0)))
        self.feat_std.copy_(torch.as_tensor(frames.std(axis=0) + 1e-5))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """``[B, T, n_mels]`` -> ``[B, T, feature_dim]``."""
        x = (x - self.feat_mean) / self.feat_std
        return self.net(x.transpose(1, 2)).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.head(self.features(x)), dim=-1)

    @torch.no_grad()
    def encode(self, frames: np.ndarray) -> np.ndarray:
        self.eval()
        x = torch.as_tensor(np.asarray(frames), dtype=self.feat_mean.dtype).unsqueeze(0)
        return self.features(x)[0].double().numpy()

    @torch.no_grad()
    def lattice(self, frames: np.ndarray) -> np.ndarray:
        self.eval()
        x = torch.as_tensor(np.asarray(frames), dtype=self.feat_mean.dtype).unsqueeze(0)
        return self(x)[0].double().numpy()


def inverse_sqrt_schedule(warmup: int):
    def factor(step):
        step = step + 1
        if step < warmup:
            return step / warmup
        return math.sqrt(warmup / step)
    return factor


def _pad(frames_list):
    lens = [f.shape[0] for f in frames_list]
    out = np.zeros((len(frames_list), max(lens), frames_list[0].shape[1]), dtype=np.float32)
    for i, f in enumerate(frames_list):
        out[i, :f.shape[0]] = f
    return torch.as_tensor(out), lens


def finetune_encoder(pairs, config: CTCConfig | None = None, encoder: FeatureEncoder | None = None,
                     history: list | None = None) -> FeatureEncoder:
    """Train encoder + head on CTC.

    ``pairs`` is a list of ``(mel_frames, target_ids)`` or a callable
    ``epoch -> list`` so every epoch can draw fresh perturbations. Pairs whose
    target cannot be aligned are skipped. Per-batch mean losses are appended
    to ``history`` when given.
    """
    config = config or CTCConfig()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    make_epoch = pairs if callable(pairs) else (lambda _epoch, _p=list(pairs): _p)
    first = make_epoch(0)
    if not first:
        raise ParameterError("no training pairs")
    if encoder is None:
        encoder = FeatureEncoder(config)
        encoder.set_normalization(np.concatenate([f for f, _ in first], axis=0))
    opt = torch.optim.Adam(encoder.parameters(), lr=config.lr, betas=config.betas, eps=config.eps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, inverse_sqrt_schedule(config.warmup))
    history = [] if history is None else history
    step, epoch, data = 0, 0, first
    encoder.train()
    while step < config.max_updates:
        feasible = [(f, t) for f, t in data if 0 < min_frames(t) <= f.shape[0]]
        skipped = len(data) - len(feasible)
        if skipped:
            log.info("epoch %d: skipped %d infeasible pairs", epoch, skipped)
        order = rng.permutation(len(feasible))
        for s in range(0, len(order), config.batch_size):
            batch = [feasible[i] for i in order[s:s + config.batch_size]]
            x, lens = _pad([f for f, _ in batch])
            targets = [np.asarray(t) for _, t in batch]
            nll = ctc_loss_batch(encoder(x), targets, lens)
            loss = (nll / torch.as_tensor([len(t) for t in targets], dtype=nll.dtype)).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"CTC loss became {loss.item()} at update {step}",
                                    {"update": step, "epoch": epoch, "history_tail": history[-10:]})
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(encoder.parameters(), config.grad_clip)
            opt.step()
            sched.step()
            history.append(loss.item())
            step += 1
            if step >= config.max_updates:
                break
        epoch += 1
        if step < config.max_updates:
            data = make_epoch(epoch)
    encoder.eval()
    return encoder


class CTCFinetuner(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit(frames, targets)`` trains, ``transform`` yields features."""

    def __init__(self, n_units: int = 64, hidden: int = 128, layers: int = 3, feature_dim: int = 80,
                 lr: float = 2e-3, max_updates: int = 1500, batch_size: int = 16, warmup: int = 100,
                 random_state: int = 0):
        self.n_units = n_units
        self.hidden = hidden
        self.layers = layers
        self.feature_dim = feature_dim
        self.lr = lr
        self.max_updates = max_updates
        self.batch_size = batch_size
        self.warmup = warmup
        self.random_state = random_state

    def _config(self, n_mels):
        return CTCConfig(n_units=self.n_units, n_mels=n_mels, hidden=self.hidden, layers=self.layers,
                         feature_dim=self.feature_dim, lr=self.lr, max_updates=self.max_updates,
                         batch_size=self.batch_size, warmup=self.warmup, seed=self.random_state)

    def fit(self, X, y=None):
        """``X`` is a list of mel frame matrices (with targets ``y``) or an epoch callable."""
        if callable(X):
            n_mels = X(0)[0][0].shape[1]
            pairs = X
        else:
            pairs = list(zip(X, y))
            n_mels = pairs[0][0].shape[1]
        self.loss_history_ = []
        self.encoder_ = finetune_encoder(pairs, self._config(n_mels), history=self.loss_history_)
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return [self.encoder_.encode(f) for f in X]

    def encode(self, frames):
        check_is_fitted(self, "encoder_")
        return self.encoder_.encode(frames)


def config_dict(config: CTCConfig) -> dict:
    return asdict(config)
