"""Train a word-prediction model on soft vision targets and evaluate it.

Small corpus, small psc model, a couple of minutes on a laptop. Shows the
three evaluation views: bag-of-words precision/recall, pooled average
precision, and per-keyword spotting.
"""

import tempfile

from gkw.evaluation import (
    ScoreTable,
    average_precision,
    bow_metrics,
    bow_predict,
    build_reference,
    keyword_spot,
    select_keywords,
    unigram_baseline,
)
from gkw.models import TrainConfig, psc, score_utterances, train
from gkw.synth import SynthConfig, generate_corpus
from gkw.targets import Vocabulary, load_vision_targets

out_dir = tempfile.mkdtemp(prefix="gkw_train_")
config = SynthConfig(train_size=400, dev_size=60, test_size=60)
manifest = generate_corpus(config, out_dir)
vocab = Vocabulary.load(f"{out_dir}/vocabulary.txt")
print(f"corpus: {len(manifest.records)} utterances, vocabulary {len(vocab)}")

features = manifest.load_features()
targets = load_vision_targets(f"{out_dir}/vision_targets.tsv", vocab)
model, meta = train(
    features, targets, manifest.ids("train"), manifest.ids("dev"),
    psc(len(vocab)), TrainConfig(epochs=25, seed=0),
    progress=lambda e, tr, dv: print(f"  epoch {e:2d}  train {tr:7.4f}  dev {dv:7.4f}"),
)
print(f"stopped after {meta['epochs_run']} epochs, best {meta['best_epoch']}")

test_ids = manifest.ids("test")
table = ScoreTable(test_ids, score_utterances(model, features, test_ids), vocab)
reference = build_reference(manifest.transcriptions("test"))

for alpha in (0.4, 0.7):
    m = bow_metrics(bow_predict(table, alpha), reference)
    print(f"alpha={alpha}: P {m['precision']:.3f}  R {m['recall']:.3f} "
          f" F {m['fscore']:.3f}")
print(f"average precision {average_precision(table, reference):.3f}")

baseline = unigram_baseline(manifest.transcriptions("train"), vocab, test_ids)
print(f"unigram baseline AP {average_precision(baseline, reference):.3f}")

keywords = select_keywords(reference, vocab, count=5, min_occurrences=3, seed=0)
spotted = keyword_spot(table, keywords, reference)
print(f"\nkeyword spotting ({len(keywords)} keywords):")
for kw, row in spotted["per_keyword"].items():
    print(f"  {kw:>8}: P@10 {row['p_at_10']:.2f}  P@N {row['p_at_n']:.2f} "
          f" EER {row['eer']:.2f}  ({row['occurrences']} occurrences)")
avg = spotted["average_percent"]
print(f"  average: P@10 {avg['p_at_10']:.1f}%  EER {avg['eer']:.1f}%")
