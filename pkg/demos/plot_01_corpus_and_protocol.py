"""
Synthetic corpus, cross-genre protocols and trial lists
=======================================================

A seeded corpus stands in for a multi-genre speaker corpus.  Each utterance is
speaker + genre + session noise; every bona fide utterance also has a spoofed
copy made by a fixed linear "re-vocoding" channel.
"""

from collections import Counter

from sasvmeta import CorpusSpec, build_cgp, build_complex_eval, split_manifest, synth_corpus, with_spoofs
from sasvmeta.protocol import DEFAULT_GROUPING, sample_meta_task

# %%
# Generate 10 speakers x 10 genres x 6 utterances, plus one spoof per utterance.
spec = CorpusSpec(num_speakers=10, utterances_per_speaker_genre=6, seed=0)
corpus = with_spoofs(synth_corpus(spec), spec.spoof_scale, spec.seed)
print(len(corpus), "utterances, feature shape", corpus[0].features.shape)

# %%
# The ten genres fall into four groups; protocol k holds out one group.
for name, genres in DEFAULT_GROUPING.groups:
    print(f"group {name:>3}: {' '.join(sorted(genres))}")
for k in range(1, 5):
    cgp = build_cgp(name=k)
    print(f"{cgp.name:>8}: train on {'+'.join(cgp.seen_groups)}, test on {'+'.join(cgp.unseen_groups)}")

# %%
# Hold out 3 utterances per cell for evaluation and build a mixed trial list.
# A trial is true only when the test speech is genuine AND from the enrolled speaker.
train_part, eval_part = split_manifest(corpus, 3, seed=0)
trials = build_complex_eval(eval_part, substitution_rate=0.3, seed=0, num_trials=2000)
print(Counter(t.trial_kind for t in trials))
print(trials[0])

# %%
# A meta-task pairs genre-disjoint halves: several meta-train genres, one meta-test genre.
task = sample_meta_task(train_part, batch_size=64, seed=0)
print("meta-train genres", sorted(task.train_genres), "| meta-test genre", sorted(task.test_genres))
print(Counter(t.trial_kind for t in task.meta_train))
