"""Generate a synthetic grounded corpus and poke at what came out.

Every utterance pairs a feature matrix with a transcription and a soft
vision-style target vector; the vision channel misses words, hallucinates
words, and leaks probability onto confusable words.
"""

import sys
import tempfile

import numpy as np

from gkw.synth import SynthConfig, corpus_stats, generate_corpus
from gkw.targets import Vocabulary, load_vision_targets, oracle_bow

out_dir = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="gkw_corpus_")
config = SynthConfig(train_size=200, dev_size=40, test_size=40)
manifest = generate_corpus(config, out_dir)
print("corpus written to", out_dir)

stats = corpus_stats(manifest)
print(f"{stats['utterances']} utterances, {stats['token_count']} tokens, "
      f"{stats['type_count']} word types")
print(f"Zipf fit over realized frequencies: {stats['zipf_exponent']:.2f} "
      f"(configured {config.zipf_exponent})")
top = list(stats["token_frequencies"].items())[:6]
print("most frequent:", ", ".join(f"{w} x{n}" for w, n in top))

vocab = Vocabulary.load(f"{out_dir}/vocabulary.txt")
targets = load_vision_targets(f"{out_dir}/vision_targets.tsv", vocab)
record = manifest.records[0]
truth = oracle_bow(record.transcription, vocab)
soft = targets[record.utt_id]
print(f"\n{record.utt_id}: \"{' '.join(record.transcription)}\"")
print(f"{'word':>8}  truth  vision")
for i in np.argsort(-soft)[:6]:
    print(f"{vocab.words[i]:>8}  {truth[i]:.0f}      {soft[i]:.3f}")

# how often the channel misses a present word outright
miss = hit = 0
for rec in manifest.records:
    t = oracle_bow(rec.transcription, vocab)
    s = targets[rec.utt_id]
    for i in np.flatnonzero(t > 0.5):
        hit += 1
        miss += s[i] < 0.5
print(f"\nchannel missed {miss}/{hit} present words "
      f"(configured miss rate {config.channel.miss_rate})")
