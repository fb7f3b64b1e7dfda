"""Conformer encoder, non-autoregressive and autoregressive unit decoders, length head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import LengthError, ShapeError, TrainingError, VocabError


@dataclass
class ModelConfig:
    n_mels: int = 80
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    hidden: int = 64
    heads: int = 4
    dropout: float = 0.1
    conv_kernel: int = 7
    subsample_kernels: tuple = (5, 5)
    subsample_strides: tuple = (2, 2)
    ffn_mult: int = 4
    unit_vocab: int = 64
    max_len: int = 128
    max_source_frames: int = 8192
    label_smoothing: float = 0.1
    length_proj: int = 64
    length_loss_factor: float = 0.1
    encoder_abs_pos: bool = True

    def __post_init__(self):
        self.subsample_kernels = tuple(self.subsample_kernels)
        self.subsample_strides = tuple(self.subsample_strides)
        if self.hidden % self.heads:
            raise ShapeError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """Full-size hyperparameters (6+6 blocks, 512 hidden, 8 heads, 1000 units)."""
        base = dict(encoder_blocks=6, decoder_blocks=6, hidden=512, heads=8, dropout=0.1,
                    unit_vocab=1000, length_proj=512, max_len=1024)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def tokens(self) -> "SpecialTokens":
        return SpecialTokens.for_vocab(self.unit_vocab)


@dataclass(frozen=True)
class SpecialTokens:
    bos: int
    eos: int
    mask: int
    pad: int

    @classmethod
    def for_vocab(cls, unit_vocab: int) -> "SpecialTokens":
        return cls(unit_vocab, unit_vocab + 1, unit_vocab + 2, unit_vocab + 3)

    @property
    def size(self) -> int:
        return self.pad + 1


@dataclass
class EncoderState:
    states: torch.Tensor  # [B, S, H]
    mask: torch.Tensor  # [B, S], True on real frames

    @property
    def lengths(self) -> torch.Tensor:
        return self.mask.sum(dim=1)

    def select(self, index) -> "EncoderState":
        return EncoderState(self.states[index], self.mask[index])

    def repeat(self, n: int) -> "EncoderState":
        """Repeat every batch row ``n`` times (row-major)."""
        return EncoderState(self.states.repeat_interleave(n, dim=0),
                            self.mask.repeat_interleave(n, dim=0))


@dataclass
class TokenDistribution:
    log_probs: np.ndarray  # [tgt_len, unit_vocab]


@dataclass
class LengthDistribution:
    log_probs: np.ndarray  # index i <-> length i + 1

    def top_k(self, k: int) -> list:
        order = np.argsort(-self.log_probs, kind="stable")[:k]
        return [int(i) + 1 for i in order]

    def argmax(self) -> int:
        return self.top_k(1)[0]


def sinusoid_table(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """``[len(positions), dim]`` sine/cosine embeddings; positions may be negative."""
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = positions.to(torch.float64)[:, None] * freq[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


# ------------------------------------------------------------------- attention


def relpos_attention(q, k, v, rel, pos_bias_u, pos_bias_v, key_mask=None):
    """Transformer-XL attention with relative positions.

    ``q, k, v``: ``[B, H, L, d]``; ``rel``: ``[H, 2L-1, d]`` projected embeddings
    for offsets ``i - j`` from ``L-1`` down to ``-(L-1)``; biases ``[H, d]``.
    Logits are ``(q_i + u) . k_j + (q_i + v) . r_{i-j}``, scaled by ``1/sqrt(d)``.
    Returns ``(context [B, H, L, d], weights [B, H, L, L])``.
    """
    B, H, L, d = q.shape
    if k.shape != v.shape or k.shape[:2] != q.shape[:2] or k.shape[2] != L:
        raise ShapeError("relative attention expects equal-length self-attention inputs")
    if rel.shape != (H, 2 * L - 1, d):
        raise ShapeError(f"rel embeddings must be [{H}, {2 * L - 1}, {d}], got {tuple(rel.shape)}")
    content = torch.matmul(q + pos_bias_u[None, :, None, :], k.transpose(-1, -2))
    pos_all = torch.matmul(q + pos_bias_v[None, :, None, :], rel.transpose(-1, -2).unsqueeze(0))
    # rel row r holds offset L-1-r, so (i, j) reads row L-1-(i-j)
    idx = (L - 1 - (torch.arange(L)[:, None] - torch.arange(L)[None, :])).to(q.device)
    pos = torch.gather(pos_all, 3, idx.expand(B, H, L, L))
    logits = (content + pos) / math.sqrt(d)
    if key_mask is not None and not bool(key_mask.all()):
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return torch.matmul(weights, v), weights


class RelPositionSelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float):
        super().__init__()
        self.h, self.d = heads, hidden // heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.pos = nn.Linear(hidden, hidden, bias=False)
        self.out = nn.Linear(hidden, hidden)
        self.pos_bias_u = nn.Parameter(torch.zeros(heads, self.d))
        self.pos_bias_v = nn.Parameter(torch.zeros(heads, self.d))
        nn.init.xavier_uniform_(self.pos_bias_u)
        nn.init.xavier_uniform_(self.pos_bias_v)
        self.drop = nn.Dropout(dropout)

    def rel_embeddings(self, L: int, dtype) -> torch.Tensor:
        offsets = torch.arange(L - 1, -L, -1)
        table = sinusoid_table(offsets, self.h * self.d).to(dtype=dtype, device=self.pos.weight.device)
        return self.pos(table).view(2 * L - 1, self.h, self.d).transpose(0, 1)

    def positional_bias(self, L: int) -> torch.Tensor:
        """Query-independent term ``v . r_{i-j}`` as ``[H, L, L]``; Toeplitz per head."""
        rel = self.rel_embeddings(L, self.pos_bias_v.dtype)
        pos_all = torch.einsum("hd,hrd->hr", self.pos_bias_v, rel)
        idx = L - 1 - (torch.arange(L)[:, None] - torch.arange(L)[None, :])
        return pos_all[:, idx] / math.sqrt(self.d)

    def forward(self, x, key_mask=None, return_weights=False):
        B, L, _ = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.h, self.d).permute(2, 0, 3, 1, 4)
        ctx, w = relpos_attention(q, k, v, self.rel_embeddings(L, x.dtype),
                                  self.pos_bias_u, self.pos_bias_v, key_mask)
        out = self.out(self.drop(ctx).transpose(1, 2).reshape(B, L, -1))
        return (out, w) if return_weights else out


class MultiHeadAttention(nn.Module):
    """Plain scaled dot-product attention for decoder self- and cross-attention."""

    def __init__(self, hidden: int, heads: int, dropout: float):
        super().__init__()
        self.h, self.d = heads, hidden // heads
        self.q = nn.Linear(hidden, hidden)
        self.kv = nn.Linear(hidden, 2 * hidden)
        self.out = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, key_mask=None, causal=False):
        B, Lq, _ = x.shape
        Lk = memory.shape[1]
        q = self.q(x).view(B, Lq, self.h, self.d).transpose(1, 2)
        k, v = self.kv(memory).view(B, Lk, 2, self.h, self.d).permute(2, 0, 3, 1, 4)
        allowed = None  # True = may attend
        if key_mask is not None and not bool(key_mask.all()):
            allowed = key_mask[:, None, None, :]
        if causal:
            past = torch.ones(Lq, Lk, dtype=torch.bool, device=x.device).tril()
            allowed = past if allowed is None else allowed & past
        ctx = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed,
                                             dropout_p=self.drop.p if self.training else 0.0)
        return self.out(ctx.transpose(1, 2).reshape(B, Lq, -1))


def feed_forward(hidden: int, mult: int, dropout: float) -> nn.Sequential:
    return nn.Sequential(nn.LayerNorm(hidden), nn.Linear(hidden, mult * hidden), nn.SiLU(),
                         nn.Dropout(dropout), nn.Linear(mult * hidden, hidden), nn.Dropout(dropout))


class ConvModule(nn.Module):
    """Pointwise-GLU, depthwise conv, norm, swish, pointwise.

    Uses LayerNorm where the original block has BatchNorm, so padded batches
    and single utterances normalize identically.
    """

    def __init__(self, hidden: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(hidden)
        self.pw1 = nn.Conv1d(hidden, 2 * hidden, 1)
        self.dw = nn.Conv1d(hidden, hidden, kernel, padding=kernel // 2, groups=hidden)
        self.mid_norm = nn.LayerNorm(hidden)
        self.pw2 = nn.Conv1d(hidden, hidden, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        y = self.norm(x)
        if mask is not None:
            y = y * mask[..., None]
        y = F.glu(self.pw1(y.transpose(1, 2)), dim=1)
        if mask is not None:
            # pointwise biases would otherwise leak into the depthwise window at the edge
            y = y * mask[:, None, :]
        y = self.dw(y).transpose(1, 2)
        y = F.silu(self.mid_norm(y)).transpose(1, 2)
        return self.drop(self.pw2(y).transpose(1, 2))


class ConformerBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden
        self.ff1 = feed_forward(h, cfg.ffn_mult, cfg.dropout)
        self.attn_norm = nn.LayerNorm(h)
        self.attn = RelPositionSelfAttention(h, cfg.heads, cfg.dropout)
        self.attn_drop = nn.Dropout(cfg.dropout)
        self.conv = ConvModule(h, cfg.conv_kernel, cfg.dropout)
        self.ff2 = feed_forward(h, cfg.ffn_mult, cfg.dropout)
        self.final_norm = nn.LayerNorm(h)

    def forward(self, x, mask=None):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn_drop(self.attn(self.attn_norm(x), mask))
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


class Subsampler(nn.Module):
    """Two strided 1-D convolutions over mel frames (4x time reduction by default)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers, dim = [], cfg.n_mels
        for k, s in zip(cfg.subsample_kernels, cfg.subsample_strides):
            layers.append(nn.Conv1d(dim, cfg.hidden, k, stride=s, padding=k // 2))
            dim = cfg.hidden
        self.convs = nn.ModuleList(layers)
        self.cfg = cfg

    def out_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        for k, s in zip(self.cfg.subsample_kernels, self.cfg.subsample_strides):
            lengths = torch.div(lengths + 2 * (k // 2) - k, s, rounding_mode="floor") + 1
        return lengths

    def forward(self, x, lengths=None):
        y = x.transpose(1, 2)
        for k, s, conv in zip(self.cfg.subsample_kernels, self.cfg.subsample_strides, self.convs):
            y = F.gelu(conv(y))
            if lengths is not None:
                lengths = torch.div(lengths + 2 * (k // 2) - k, s, rounding_mode="floor") + 1
                y = y * (torch.arange(y.shape[2], device=y.device)[None, :] < lengths[:, None])[:, None, :]
        return y.transpose(1, 2)


class ConformerEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.subsample = Subsampler(cfg)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList([ConformerBlock(cfg) for _ in range(cfg.encoder_blocks)])

    def forward(self, frames: torch.Tensor, lengths: torch.Tensor) -> EncoderState:
        x = self.subsample(frames, lengths)
        out_len = self.subsample.out_lengths(lengths)
        S = x.shape[1]
        mask = torch.arange(S, device=x.device)[None, :] < out_len[:, None]
        x = x * math.sqrt(self.cfg.hidden)
        if self.cfg.encoder_abs_pos:
            x = x + sinusoid_table(torch.arange(S), self.cfg.hidden).to(x.dtype)[None]
        x = self.drop(x) * mask[..., None]
        for block in self.blocks:
            x = block(x, mask) * mask[..., None]
        return EncoderState(x, mask)


class LengthPredictor(nn.Module):
    """Masked mean-pool of encoder states, projection, classifier over lengths 1..max_len."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cfg.hidden, cfg.length_proj), nn.ReLU(),
                                 nn.Linear(cfg.length_proj, cfg.max_len))

    def forward(self, enc: EncoderState) -> torch.Tensor:
        m = enc.mask[..., None].to(enc.states.dtype)
        pooled = (enc.states * m).sum(1) / m.sum(1).clamp(min=1.0)
        return torch.log_softmax(self.net(pooled), dim=-1)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden
        self.self_norm = nn.LayerNorm(h)
        self.self_attn = MultiHeadAttention(h, cfg.heads, cfg.dropout)
        self.cross_norm = nn.LayerNorm(h)
        self.cross_attn = MultiHeadAttention(h, cfg.heads, cfg.dropout)
        self.ff = feed_forward(h, cfg.ffn_mult, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, enc: EncoderState, self_mask=None, causal=False):
        y = self.self_norm(x)
        x = x + self.drop(self.self_attn(y, y, self_mask, causal))
        x = x + self.drop(self.cross_attn(self.cross_norm(x), enc.states, enc.mask))
        return x + self.ff(x)


class UnitDecoder(nn.Module):
    """Transformer decoder over unit tokens.

    ``causal=False`` is the conditional masked LM (outputs over units);
    ``causal=True`` the AR teacher (outputs over units plus eos).
    """

    def __init__(self, cfg: ModelConfig, causal: bool):
        super().__init__()
        self.cfg, self.causal = cfg, causal
        self.tokens = cfg.tokens
        self.embed = nn.Embedding(self.tokens.size, cfg.hidden)
        # unit-scale after the sqrt(hidden) factor, comparable to the position table
        nn.init.normal_(self.embed.weight, std=cfg.hidden ** -0.5)
        self.layers = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.decoder_blocks)])
        self.norm = nn.LayerNorm(cfg.hidden)
        self.proj = nn.Linear(cfg.hidden, cfg.unit_vocab + (1 if causal else 0))
        self.drop = nn.Dropout(cfg.dropout)
        self.calls = 0

    def forward(self, tokens: torch.Tensor, enc: EncoderState, token_mask=None) -> torch.Tensor:
        self.calls += 1
        L = tokens.shape[1]
        x = self.embed(tokens) * math.sqrt(self.cfg.hidden)
        x = x + sinusoid_table(torch.arange(L), self.cfg.hidden).to(x.dtype)[None]
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x, enc, token_mask, self.causal)
        return torch.log_softmax(self.proj(self.norm(x)), dim=-1)


class NARModel(nn.Module):
    kind = "nar"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConformerEncoder(cfg)
        self.length = LengthPredictor(cfg)
        self.decoder = UnitDecoder(cfg, causal=False)


class ARModel(nn.Module):
    kind = "ar"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConformerEncoder(cfg)
        self.decoder = UnitDecoder(cfg, causal=True)


def build_model(kind: str, cfg: ModelConfig) -> nn.Module:
    if kind == "nar":
        return NARModel(cfg)
    if kind == "ar":
        return ARModel(cfg)
    raise ValueError(f"unknown model kind {kind!r}")


# ------------------------------------------------------------------ operations


def _param_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def pad_frames(frames_list, dtype=torch.float32):
    lens = [int(np.asarray(f).shape[0]) for f in frames_list]
    dim = np.asarray(frames_list[0]).shape[1]
    out = torch.zeros(len(frames_list), max(lens), dim, dtype=dtype)
    for i, f in enumerate(frames_list):
        out[i, :lens[i]] = torch.as_tensor(np.asarray(f), dtype=dtype)
    return out, torch.as_tensor(lens)


def conformer_encode(model, mel) -> EncoderState:
    """Encode one ``[frames, n_mels]`` matrix (or a list of them as a padded batch)."""
    batch = mel if isinstance(mel, (list, tuple)) else [mel]
    batch = [m.frames if hasattr(m, "frames") else m for m in batch]
    for m in batch:
        n = np.asarray(m).shape[0]
        if n == 0:
            raise ShapeError("empty mel input")
        if n > model.cfg.max_source_frames:
            raise LengthError(f"{n} source frames exceed max {model.cfg.max_source_frames}")
    x, lens = pad_frames(batch, _param_dtype(model))
    return model.encoder(x, lens)


def length_predict(model: NARModel, enc: EncoderState) -> LengthDistribution:
    with torch.no_grad():
        lp = model.length(enc)
    return LengthDistribution(lp[0].double().numpy())


def _check_tokens(tokens: torch.Tensor, cfg: ModelConfig, allowed_specials):
    bad = (tokens < 0) | (tokens >= cfg.tokens.size)
    special = tokens >= cfg.unit_vocab
    for s in allowed_specials:
        special = special & (tokens != s)
    if bool((bad | special).any()):
        raise VocabError("token ids must be units or the mask token")


def nar_decoder_forward(model: NARModel, enc: EncoderState, partial_target) -> TokenDistribution:
    """One bidirectional pass: log-probs for every position of ``partial_target``."""
    tokens = torch.as_tensor(np.asarray(partial_target), dtype=torch.long).reshape(1, -1)
    if tokens.shape[1] > model.cfg.max_len:
        raise LengthError(f"target length {tokens.shape[1]} exceeds max_len {model.cfg.max_len}")
    _check_tokens(tokens, model.cfg, [model.cfg.tokens.mask])
    with torch.no_grad():
        lp = model.decoder(tokens, enc)
    return TokenDistribution(lp[0].double().numpy())


def _ar_inputs(units, tok: SpecialTokens):
    return [tok.bos] + [int(u) for u in units]


def ar_score(model: ARModel, enc: EncoderState, units) -> float:
    """Teacher-forced log P(units, eos | source)."""
    cfg = model.cfg
    units = [int(u) for u in np.asarray(units).reshape(-1)]
    if units and units[-1] == cfg.tokens.eos:
        units = units[:-1]
    if any(u < 0 or u >= cfg.unit_vocab for u in units):
        raise VocabError("ar_score takes unit ids, optionally terminated by eos")
    tokens = torch.as_tensor(_ar_inputs(units, cfg.tokens))[None]
    with torch.no_grad():
        lp = model.decoder(tokens, enc)[0]
    targets = torch.as_tensor(units + [cfg.unit_vocab])
    return float(lp.gather(1, targets[:, None]).sum())


def ar_score_batch(model: ARModel, enc: EncoderState, candidates, normalize: bool = False):
    """Scores for several candidates under one source in a single padded pass."""
    cfg = model.cfg
    cands = [[int(u) for u in c] for c in candidates]
    L = max(len(c) for c in cands) + 1
    tokens = torch.full((len(cands), L), cfg.tokens.pad, dtype=torch.long)
    targets = torch.full((len(cands), L), 0, dtype=torch.long)
    valid = torch.zeros(len(cands), L, dtype=torch.bool)
    for i, c in enumerate(cands):
        tokens[i, :len(c) + 1] = torch.as_tensor(_ar_inputs(c, cfg.tokens))
        targets[i, :len(c) + 1] = torch.as_tensor(c + [cfg.unit_vocab])
        valid[i, :len(c) + 1] = True
    with torch.no_grad():
        lp = model.decoder(tokens, enc.repeat(len(cands)) if enc.states.shape[0] == 1 else enc)
    tok_lp = lp.gather(2, targets[..., None])[..., 0].masked_fill(~valid, 0.0)
    scores = tok_lp.sum(1).double().numpy()
    if normalize:
        scores = scores / valid.sum(1).double().numpy()
    return scores


@dataclass
class BeamResult:
    units: list
    score: float
    normalized: float
    finished: list = field(default_factory=list)
    decoder_calls: int = 0


def ar_beam_decode(model: ARModel, enc: EncoderState, beam: int = 5, max_len: int | None = None,
                   min_len: int = 0, len_penalty: float = 1.0) -> BeamResult:
    """Length-normalized beam search.

    Hypothesis score is ``sum log p / (len + 1) ** len_penalty`` (eos
    included). eos is blocked before ``min_len`` and forced at ``max_len``.
    Search stops once ``beam`` hypotheses have finished.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    cfg = model.cfg
    tok = cfg.tokens
    max_len = cfg.max_len if max_len is None else min(max_len, cfg.max_len)
    eos_col = cfg.unit_vocab
    calls_before = model.decoder.calls
    live = [([], 0.0)]
    finished = []
    enc_b = None
    with torch.no_grad():
        for step in range(max_len + 1):
            n = len(live)
            tokens = torch.as_tensor([[tok.bos] + h for h, _ in live])
            if enc_b is None or enc_b.states.shape[0] != n:
                enc_b = enc.repeat(n)
            lp = model.decoder(tokens, enc_b)[:, -1].double()
            if step < min_len:
                lp[:, eos_col] = -math.inf
            if step >= max_len:
                lp[:, :eos_col] = -math.inf
            totals = torch.as_tensor([s for _, s in live], dtype=torch.float64)[:, None] + lp
            flat = totals.reshape(-1)
            k = min(2 * beam, int(torch.isfinite(flat).sum()))
            top = torch.topk(flat, k)
            new_live = []
            for val, idx in zip(top.values.tolist(), top.indices.tolist()):
                h, w = divmod(idx, lp.shape[1])
                hyp = live[h][0]
                if w == eos_col:
                    if len(finished) < beam:
                        finished.append((hyp, val))
                elif len(new_live) < beam:
                    new_live.append((hyp + [w], val))
            if len(finished) >= beam or not new_live:
                break
            live = new_live
    if not finished:
        finished = live
    norm = [s / (len(h) + 1) ** len_penalty for h, s in finished]
    best = int(np.argmax(norm))
    return BeamResult(finished[best][0], finished[best][1], norm[best],
                      [(h, s, ns) for (h, s), ns in zip(finished, norm)],
                      model.decoder.calls - calls_before)


def ar_greedy_decode(model: ARModel, enc: EncoderState, max_len: int | None = None):
    """Greedy decode; returns ``(units, per-step log-probs)``."""
    cfg = model.cfg
    max_len = cfg.max_len if max_len is None else max_len
    out, steps = [], []
    with torch.no_grad():
        for step in range(max_len + 1):
            tokens = torch.as_tensor([[cfg.tokens.bos] + out])
            lp = model.decoder(tokens, enc)[0, -1]
            if step >= max_len:
                w = cfg.unit_vocab
            else:
                w = int(torch.argmax(lp))
            steps.append(float(lp[w]))
            if w == cfg.unit_vocab:
                break
            out.append(w)
    return out, steps


# -------------------------------------------------------------------- training


def label_smoothed_nll(lp: torch.Tensor, target: torch.Tensor, eps: float) -> torch.Tensor:
    """Per-token ``(1 - eps) * nll + eps * mean_k(-log p_k)``."""
    nll = -lp.gather(-1, target[..., None])[..., 0]
    smooth = -lp.mean(dim=-1)
    return (1.0 - eps) * nll + eps * smooth


@dataclass
class Batch:
    frames: torch.Tensor
    frame_lengths: torch.Tensor
    targets: list

    @classmethod
    def from_pairs(cls, pairs, dtype=torch.float32) -> "Batch":
        x, lens = pad_frames([p[0] for p in pairs], dtype)
        return cls(x, lens, [list(map(int, p[1])) for p in pairs])


def nar_losses(model: NARModel, batch: Batch, masks) -> dict:
    """Masked-position label-smoothed CE plus length CE.

    ``masks[i]`` lists the masked positions of ``batch.targets[i]``.
    """
    cfg = model.cfg
    tok = cfg.tokens
    enc = model.encoder(batch.frames, batch.frame_lengths)
    B = len(batch.targets)
    N = max(len(t) for t in batch.targets)
    if N > cfg.max_len:
        raise LengthError(f"target length {N} exceeds max_len {cfg.max_len}")
    tgt = torch.full((B, N), tok.pad, dtype=torch.long)
    inp = torch.full((B, N), tok.pad, dtype=torch.long)
    masked = torch.zeros(B, N, dtype=torch.bool)
    real = torch.zeros(B, N, dtype=torch.bool)
    for i, (t, m) in enumerate(zip(batch.targets, masks)):
        tgt[i, :len(t)] = torch.as_tensor(t)
        inp[i, :len(t)] = torch.as_tensor(t)
        real[i, :len(t)] = True
        masked[i, list(m)] = True
    inp = inp.masked_fill(masked, tok.mask)
    lp = model.decoder(inp, enc, real)
    per_tok = label_smoothed_nll(lp, tgt.clamp(max=cfg.unit_vocab - 1), cfg.label_smoothing)
    token_loss = per_tok[masked].mean()
    len_lp = model.length(enc)
    len_target = torch.as_tensor([len(t) - 1 for t in batch.targets])
    length_loss = -len_lp.gather(1, len_target[:, None]).mean()
    with torch.no_grad():
        nll = -lp.gather(-1, tgt.clamp(max=cfg.unit_vocab - 1)[..., None])[..., 0][masked].mean()
    return {"loss": token_loss + cfg.length_loss_factor * length_loss, "token_loss": token_loss,
            "length_loss": length_loss, "nll": nll}


def ar_losses(model: ARModel, batch: Batch) -> dict:
    cfg = model.cfg
    tok = cfg.tokens
    enc = model.encoder(batch.frames, batch.frame_lengths)
    B = len(batch.targets)
    L = max(len(t) for t in batch.targets) + 1
    if L - 1 > cfg.max_len:
        raise LengthError(f"target length {L - 1} exceeds max_len {cfg.max_len}")
    inp = torch.full((B, L), tok.pad, dtype=torch.long)
    tgt = torch.zeros(B, L, dtype=torch.long)
    real = torch.zeros(B, L, dtype=torch.bool)
    for i, t in enumerate(batch.targets):
        inp[i, :len(t) + 1] = torch.as_tensor([tok.bos] + t)
        tgt[i, :len(t) + 1] = torch.as_tensor(t + [cfg.unit_vocab])
        real[i, :len(t) + 1] = True
    lp = model.decoder(inp, enc, real)
    per_tok = label_smoothed_nll(lp, tgt, cfg.label_smoothing)
    loss = per_tok[real].mean()
    with torch.no_grad():
        nll = -lp.gather(-1, tgt[..., None])[..., 0][real].mean()
    return {"loss": loss, "token_loss": loss, "nll": nll}


def compute_losses(model, batch: Batch, mode: str, masks=None) -> dict:
    if mode == "nar":
        if masks is None:
            raise ValueError("nar losses need masked positions")
        return nar_losses(model, batch, masks)
    if mode == "ar":
        return ar_losses(model, batch)
    raise ValueError(f"unknown mode {mode!r}")


def train_step(model, optimizer, batch: Batch, mode: str, masks=None, grad_clip: float = 1.0) -> dict:
    """One optimizer update; returns float losses."""
    model.train()
    losses = compute_losses(model, batch, mode, masks)
    loss = losses["loss"]
    if not torch.isfinite(loss):
        raise TrainingError(f"{mode} loss is {loss.item()}", {k: float(v.detach()) for k, v in losses.items()})
    optimizer.zero_grad()
    loss.backward()
    if grad_clip:
        nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}
