"""Command-line entry point: ``unitrans <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import tomli
import torch

from ..checkpoint import load_encoder, load_model, save_encoder, save_model
from ..ctc import CTCConfig, finetune_encoder
from ..dsp import load_wav, mel_spectrogram, save_wav
from ..exceptions import UnitransError
from ..maskpredict import DecodeConfig, TrainConfig, distill_corpus, length_beam_decode, train_model
from ..perturb import (MODES, PerturbParams, StyleStats, compute_style_stats, enhance_chain,
                       style_normalize, utterance_seed)
from ..seqmodel import ModelConfig, build_model, conformer_encode
from ..units import Codebook, collapse_units, encode_features, kmeans_train, mean_uer, quantize
from .bench import BUCKETS, bench_latency
from .bleu import corpus_bleu
from .manifest import Manifest, read_jsonl, write_jsonl
from .reports import latency_markdown, plot_latency, write_json
from .synth import PairTask, SynthTaskSpec, gen_pair_corpus, gen_speech_corpus

log = logging.getLogger("unitrans")


def load_config(path) -> dict:
    """Read a TOML experiment config; missing file means defaults."""
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomli.load(fh)


def _pick(cls, section: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise UnitransError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**section)


def _manifest_mels(manifest: Manifest, split: str | None = None):
    rows = manifest.rows if split is None else manifest.split(split)
    waves = {r.utt_id: load_wav(manifest.resolve(r)) for r in rows}
    return waves, {u: mel_spectrogram(w).frames for u, w in waves.items()}


# ----------------------------------------------------------------- pair data


def _pair_dir_task(data_dir: Path) -> PairTask:
    spec = SynthTaskSpec(**json.loads((data_dir / "task.json").read_text()))
    return PairTask(spec)


def _load_pairs(path: Path, task: PairTask | None = None):
    """Records ``{utt_id, src, target?, valid_targets?, split?}``; frames rendered from ``src``."""
    task = task or _pair_dir_task(path.parent)
    recs = read_jsonl(path)
    for r in recs:
        r["frames"] = np.load(path.parent / r["mel"]) if "mel" in r else task.render(r["src"])
    return recs


# --------------------------------------------------------------- subcommands


def cmd_gen_data(a):
    out = Path(a.out)
    cfg = load_config(a.config).get("data", {})
    if a.kind == "speech":
        spec = SynthTaskSpec(**{"kind": "speech_corpus", "vocab": 10, "min_len": 8, "max_len": 15,
                                "n_utterances": a.n, **cfg})
        gen_speech_corpus(spec, a.seed, out)
    else:
        spec = SynthTaskSpec(**{"kind": "pair_corpus", "n_utterances": a.n,
                                "multimodality": a.multimodality, **cfg})
        _, examples = gen_pair_corpus(spec, a.seed)
        out.mkdir(parents=True, exist_ok=True)
        (out / "task.json").write_text(json.dumps(asdict(spec)))
        for split in ("train", "test"):
            write_jsonl(out / f"{split}.jsonl",
                        [{"utt_id": e.utt_id, "src": e.src, "target": e.target,
                          "valid_targets": e.valid_targets, "split": e.split}
                         for e in examples if e.split == split])
    print(f"wrote {a.kind} corpus to {out}")


def cmd_train_ctc(a):
    cfg = load_config(a.config)
    ctc_cfg = _pick(CTCConfig, cfg.get("ctc", {}))
    params = _pick(PerturbParams, cfg.get("perturb", {}))
    manifest = Manifest.load(a.manifest)
    waves, mels = _manifest_mels(manifest, "train")
    ids = list(waves)
    baseline = kmeans_train(np.concatenate([mels[u] for u in ids]), ctc_cfg.n_units,
                            seed=ctc_cfg.seed)
    stats = compute_style_stats(waves.values())
    pseudo = {u: collapse_units(quantize(mel_spectrogram(style_normalize(waves[u], stats)).frames,
                                         baseline).ids) for u in ids}

    def epoch(e):
        out = []
        for u in ids:
            rng = np.random.default_rng(utterance_seed(ctc_cfg.seed + e, u))
            mode = MODES[int(rng.integers(len(MODES)))]
            w = enhance_chain(waves[u], params, mode, rng)
            out.append((mel_spectrogram(w).frames.astype(np.float32), pseudo[u]))
        return out

    encoder = finetune_encoder(epoch, ctc_cfg)
    save_encoder(a.out, encoder, {"style_stats": asdict(stats)})
    baseline.save(Path(a.out).with_suffix(".baseline.json"))
    print(f"saved encoder to {a.out}")


def cmd_codebook(a):
    manifest = Manifest.load(a.manifest)
    _, mels = _manifest_mels(manifest, "train")
    encoder = load_encoder(a.encoder) if a.encoder else None
    feats = np.concatenate([encode_features(m, encoder) for m in mels.values()])
    kmeans_train(feats, a.k, a.iters, a.seed).save(a.out)
    print(f"saved codebook to {a.out}")


def cmd_unitize(a):
    cb = Codebook.load(a.codebook)
    encoder = load_encoder(a.encoder) if a.encoder else None
    manifest = Manifest.load(a.manifest)
    _, mels = _manifest_mels(manifest)
    recs = []
    for u, m in mels.items():
        ids = quantize(encode_features(m, encoder), cb, u).ids
        if a.collapse:
            ids = collapse_units(ids)
        recs.append({"utt_id": u, "units": ids.tolist()})
    write_jsonl(a.out, recs)


def _by_id(path):
    return {r["utt_id"]: r for r in read_jsonl(path)}


def cmd_uer(a):
    ref, hyp = _by_id(a.ref), _by_id(a.hyp)
    common = sorted(set(ref) & set(hyp))
    if not common:
        raise UnitransError("no shared utt_id between reference and hypothesis files")
    value = mean_uer([ref[u]["units"] for u in common], [hyp[u]["units"] for u in common])
    print(json.dumps({"uer": value, "utterances": len(common)}))


def cmd_eval_bleu(a):
    ref, hyp = _by_id(a.ref), _by_id(a.hyp)
    ids = sorted(ref)
    missing = [u for u in ids if u not in hyp]
    if missing:
        raise UnitransError(f"{len(missing)} hypotheses missing, e.g. {missing[0]}")
    refs = [ref[u].get("valid_targets") or ref[u]["target"] for u in ids]
    rep = corpus_bleu(refs, [hyp[u]["units"] for u in ids])
    print(json.dumps({"bleu": rep.bleu, "precisions": rep.precisions, "bp": rep.brevity_penalty}))


def cmd_train_s2ut(a):
    cfg = load_config(a.config)
    data = Path(a.data)
    recs = _load_pairs(data / a.train_file)
    mcfg = _pick(ModelConfig, {"n_mels": recs[0]["frames"].shape[1], **cfg.get("model", {})})
    tcfg = _pick(TrainConfig, cfg.get("train", {}))
    model = build_model(a.mode, mcfg)
    train_model(model, [(r["frames"], r["target"]) for r in recs], a.mode, tcfg)
    save_model(a.out, model)
    print(f"saved {a.mode} model to {a.out}")


def cmd_distill(a):
    teacher = load_model(a.teacher)
    data = Path(a.data)
    recs = _load_pairs(data / "train.jsonl")
    pairs = distill_corpus(teacher, [(r["frames"], r["target"]) for r in recs], a.beam)
    if len(pairs) != len(recs):
        raise UnitransError("distillation dropped sources; see warnings")
    out = [{"utt_id": r["utt_id"], "src": r["src"], "target": tgt, "split": "train"}
           for r, (_, tgt) in zip(recs, pairs)]
    write_jsonl(data / a.out, out)
    print(f"distilled {len(out)} pairs into {data / a.out}")


@torch.no_grad()
def cmd_decode(a):
    model = load_model(a.model)
    teacher = load_model(a.teacher) if a.teacher else None
    src = Path(a.input)
    recs = _load_pairs(src)
    cfg = DecodeConfig(iterations=a.iters, length_beam=a.beam, npd=a.npd)
    hyps, traces = [], []
    for r in recs:
        if model.kind == "ar":
            from ..seqmodel import ar_beam_decode
            units = ar_beam_decode(model, conformer_encode(model, r["frames"]), beam=a.beam).units
            trace = None
        else:
            enc = conformer_encode(model, r["frames"])
            t_enc = conformer_encode(teacher, r["frames"]) if a.npd else None
            seq, trace = length_beam_decode(model, enc, cfg, teacher, t_enc)
            trace.utt_id = r["utt_id"]
            units = seq.tolist()
        hyps.append({"utt_id": r["utt_id"], "units": list(map(int, units))})
        if trace is not None:
            traces.append(trace.to_dict())
    write_jsonl(a.out, hyps)
    if a.trace:
        write_jsonl(a.trace, traces)


def cmd_bench(a):
    nar, ar = load_model(a.model), load_model(a.ar_model)
    task = _pair_dir_task(Path(a.data))
    rng = np.random.default_rng(a.seed)
    buckets = [int(b) for b in a.buckets.split(",")] if a.buckets else list(BUCKETS)
    sources = {L: [task.render(rng.integers(task.spec.vocab, size=L).tolist()) for _ in range(a.n)]
               for L in buckets}
    configs = {f"T{t}": DecodeConfig(iterations=t) for t in a.iters}
    rep = bench_latency(nar, ar, sources, configs, repeats=a.repeats)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "latency.json", rep.to_dict())
    (out / "latency.md").write_text(latency_markdown(rep))
    plot_latency(rep, out / "latency.svg")
    print(latency_markdown(rep))


def cmd_perturb(a):
    w = load_wav(a.input)
    params = _pick(PerturbParams, load_config(a.config).get("perturb", {}))
    rng = np.random.default_rng(utterance_seed(a.seed, Path(a.input).stem))
    save_wav(enhance_chain(w, params, a.mode, rng), a.out)


def cmd_normalize(a):
    if a.stats and Path(a.stats).exists():
        stats = StyleStats.load(a.stats)
    else:
        manifest = Manifest.load(a.manifest)
        waves, _ = _manifest_mels(manifest)
        stats = compute_style_stats(waves.values())
        if a.stats:
            stats.save(a.stats)
    if a.input:
        save_wav(style_normalize(load_wav(a.input), stats), a.out)
    print(stats.to_json())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unitrans", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="synthesize a speech or pair corpus")
    s.add_argument("--kind", choices=("speech", "pairs"), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--multimodality", type=int, default=1, choices=(1, 2))
    s.add_argument("--config")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-ctc", help="CTC-finetune the feature encoder on perturbed audio")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_train_ctc)

    s = sub.add_parser("codebook", help="fit a k-means codebook on mel or encoder features")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--encoder")
    s.add_argument("--k", type=int, default=64)
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_codebook)

    s = sub.add_parser("unitize", help="quantize a manifest to unit sequences")
    s.add_argument("--codebook", required=True)
    s.add_argument("--encoder")
    s.add_argument("--in", dest="manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--collapse", action="store_true")
    s.set_defaults(func=cmd_unitize)

    s = sub.add_parser("uer", help="mean unit error rate between two unit files")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.set_defaults(func=cmd_uer)

    s = sub.add_parser("eval-bleu", help="corpus BLEU of hypotheses against pair references")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.set_defaults(func=cmd_eval_bleu)

    s = sub.add_parser("train-s2ut", help="train an NAR or AR speech-to-unit model")
    s.add_argument("--mode", choices=("nar", "ar"), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--train-file", default="train.jsonl")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_train_s2ut)

    s = sub.add_parser("distill", help="replace training targets with teacher beam outputs")
    s.add_argument("--teacher", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default="distilled.jsonl")
    s.add_argument("--beam", type=int, default=5)
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("decode", help="decode sources with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--teacher")
    s.add_argument("--iters", type=int, default=5)
    s.add_argument("--beam", type=int, default=1, help="length beam (NAR) or beam size (AR)")
    s.add_argument("--npd", action="store_true")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("bench", help="latency of AR beam search vs NAR mask-predict")
    s.add_argument("--model", required=True)
    s.add_argument("--ar-model", required=True)
    s.add_argument("--data", required=True, help="pair corpus directory (for task.json)")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--iters", type=int, nargs="+", default=[5])
    s.add_argument("--buckets")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("perturb", help="apply information enhancement to one WAV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=MODES, default="full")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("normalize", help="style-normalize audio to corpus pitch and loudness")
    s.add_argument("--manifest")
    s.add_argument("--stats")
    s.add_argument("--in", dest="input")
    s.add_argument("--out")
    s.set_defaults(func=cmd_normalize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UnitransError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
