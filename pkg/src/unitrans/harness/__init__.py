"""Experiment plumbing: synthetic corpora, BLEU, latency benchmark, reports, CLI."""

from .manifest import Manifest, ManifestRow, read_jsonl, write_jsonl
from .synth import (PairExample, PairTask, SpeechCorpus, SynthTaskSpec, gen_pair_corpus,
                    gen_speech_corpus, ideal_units)

__all__ = ["Manifest", "ManifestRow", "read_jsonl", "write_jsonl", "PairExample", "PairTask",
           "SpeechCorpus", "SynthTaskSpec", "gen_pair_corpus", "gen_speech_corpus", "ideal_units"]
