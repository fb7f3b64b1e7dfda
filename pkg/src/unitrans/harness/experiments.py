"""End-to-end experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..ctc import CTCConfig, finetune_encoder
from ..dsp import mel_spectrogram
from ..maskpredict import DecodeConfig, TrainConfig, length_beam_decode, mask_predict_decode, train_model
from ..perturb import compute_style_stats, enhance_chain, style_normalize, utterance_seed
from ..seqmodel import ModelConfig, NARModel, ARModel, ar_beam_decode, conformer_encode, length_predict
from ..units import collapse_units, kmeans_train, mean_uer, quantize
from .bleu import corpus_bleu, token_accuracy
from .synth import SynthTaskSpec, gen_speech_corpus

log = logging.getLogger(__name__)

FAMILIES = ("rhythm", "pitch", "energy")


# ----------------------------------------------------------- unit robustness


@dataclass
class UnitRobustnessConfig:
    n_utterances: int = 200
    n_phones: int = 10
    min_phones: int = 8
    max_phones: int = 15
    n_units: int = 64
    kmeans_iters: int = 30
    variants_per_utterance: int = 16
    draws_per_epoch: int = 2
    corpus_seed: int = 0
    pool_seed: int = 1000
    eval_seed: int = 7
    ctc: CTCConfig = field(default_factory=lambda: CTCConfig(feature_dim=16, max_updates=1500))


def _mels(waves: dict) -> dict:
    return {u: mel_spectrogram(w).frames for u, w in waves.items()}


def run_unit_robustness(cfg: UnitRobustnessConfig | None = None) -> dict:
    """Baseline mel k-means units vs units from a CTC-tuned encoder, under each perturbation family.

    The encoder is trained on (perturbed audio, collapsed baseline units of
    the style-normalized audio). Every utterance contributes
    ``variants_per_utterance`` pre-rendered perturbations (cycling through all
    enhancement modes), of which ``draws_per_epoch`` are sampled afresh each
    epoch. Evaluation perturbations use a separate seed.
    """
    cfg = cfg or UnitRobustnessConfig()
    t0 = time.perf_counter()
    spec = SynthTaskSpec(kind="speech_corpus", vocab=cfg.n_phones, min_len=cfg.min_phones,
                         max_len=cfg.max_phones, n_utterances=cfg.n_utterances)
    corpus = gen_speech_corpus(spec, seed=cfg.corpus_seed)
    waves = corpus.waveforms
    ids = list(waves)
    mels = _mels(waves)
    baseline = kmeans_train(np.concatenate([mels[u] for u in ids]), cfg.n_units, cfg.kmeans_iters,
                            cfg.corpus_seed)
    stats = compute_style_stats([waves[u] for u in ids])
    pseudo = {}
    pool = {}
    modes = ("rhythm", "pitch", "energy", "full")
    for u in ids:
        normed = mel_spectrogram(style_normalize(waves[u], stats)).frames
        pseudo[u] = collapse_units(quantize(normed, baseline).ids)
        variants = [mels[u].astype(np.float32), normed.astype(np.float32)]
        for k in range(cfg.variants_per_utterance):
            rng = np.random.default_rng(utterance_seed(cfg.pool_seed + k, u))
            w = enhance_chain(waves[u], mode=modes[k % len(modes)], rng=rng)
            variants.append(mel_spectrogram(w).frames.astype(np.float32))
        pool[u] = variants
    pick = np.random.default_rng(cfg.ctc.seed)

    def epoch(_e):
        out = []
        for u in ids:
            for j in pick.choice(len(pool[u]), cfg.draws_per_epoch, replace=False):
                out.append((pool[u][j], pseudo[u]))
        return out

    history = []
    t_train = time.perf_counter()
    encoder = finetune_encoder(epoch, cfg.ctc, history=history)
    train_s = time.perf_counter() - t_train
    feats = {u: encoder.encode(mels[u]) for u in ids}
    tuned = kmeans_train(np.concatenate([feats[u] for u in ids]), cfg.n_units, cfg.kmeans_iters,
                         cfg.corpus_seed)
    result = {"baseline": {}, "tuned": {}}
    for fam in FAMILIES:
        refs_b, hyps_b, refs_t, hyps_t = [], [], [], []
        for u in ids:
            rng = np.random.default_rng(utterance_seed(cfg.eval_seed, u))
            pm = mel_spectrogram(enhance_chain(waves[u], mode=fam, rng=rng)).frames
            refs_b.append(quantize(mels[u], baseline).ids)
            hyps_b.append(quantize(pm, baseline).ids)
            refs_t.append(quantize(feats[u], tuned).ids)
            hyps_t.append(quantize(encoder.encode(pm), tuned).ids)
        result["baseline"][fam] = mean_uer(refs_b, hyps_b)
        result["tuned"][fam] = mean_uer(refs_t, hyps_t)
    result["relative_reduction"] = {f: 1.0 - result["tuned"][f] / result["baseline"][f] for f in FAMILIES}
    result["ctc_loss_start"] = float(np.mean(history[:20]))
    result["ctc_loss_end"] = float(np.mean(history[-50:]))
    result["train_seconds"] = train_s
    result["total_seconds"] = time.perf_counter() - t0
    result["config"] = asdict(cfg)
    result["encoder"] = encoder
    return result


# -------------------------------------------------------------- translation


def to_pairs(examples, split: str = "train"):
    return [(e.frames, e.target) for e in examples if e.split == split]


def held_out(examples):
    return [e for e in examples if e.split == "test"]


def train_translator(kind: str, pairs, model_config: ModelConfig, train_config: TrainConfig):
    torch.manual_seed(train_config.seed)
    model = NARModel(model_config) if kind == "nar" else ARModel(model_config)
    history = train_model(model, pairs, kind, train_config)
    return model, history


def decode_nar(model, examples, cfg: DecodeConfig, teacher=None):
    hyps, traces = [], []
    with torch.no_grad():
        for e in examples:
            enc = conformer_encode(model, e.frames)
            t_enc = conformer_encode(teacher, e.frames) if cfg.npd else None
            units, trace = length_beam_decode(model, enc, cfg, teacher, t_enc)
            trace.utt_id = e.utt_id
            hyps.append(units.tolist())
            traces.append(trace)
    return hyps, traces


def decode_ar(model, examples, beam: int = 5):
    with torch.no_grad():
        return [ar_beam_decode(model, conformer_encode(model, e.frames), beam=beam).units for e in examples]


def score(examples, hyps) -> dict:
    """BLEU against all valid targets, token accuracy, exact-match rate."""
    refs = [e.valid_targets for e in examples]
    report = corpus_bleu(refs, hyps)
    exact = np.mean([any(list(h) == list(r) for r in e.valid_targets) for e, h in zip(examples, hyps)])
    return {"bleu": report.bleu, "token_accuracy": token_accuracy(refs, hyps),
            "exact_match": 100.0 * float(exact)}


def length_accuracy(model, examples, tolerance: int = 2) -> float:
    ok = 0
    with torch.no_grad():
        for e in examples:
            pred = length_predict(model, conformer_encode(model, e.frames)).argmax()
            ok += abs(pred - len(e.target)) <= tolerance
    return 100.0 * ok / len(examples)


def iteration_sweep(model, examples, iterations=(1, 2, 3, 5, 10)) -> dict:
    """BLEU by mask-predict iteration count at the predicted length (no length beam)."""
    out = {}
    for T in iterations:
        hyps = decode_nar(model, examples, DecodeConfig(iterations=T))[0]
        out[T] = score(examples, hyps)["bleu"]
    return out


def oracle_length_decode(model, examples, T: int):
    hyps = []
    with torch.no_grad():
        for e in examples:
            enc = conformer_encode(model, e.frames)
            hyps.append(mask_predict_decode(model, enc, len(e.target), T)[0].tolist())
    return hyps
