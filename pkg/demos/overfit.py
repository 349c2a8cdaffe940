"""Overfit the toy model on 64 utterances, then decode greedily and score the result.

Takes a few minutes on one CPU core.
"""

import numpy as np

from isochrony_st.data import CorpusConfig, generate_corpus, prepare_target
from isochrony_st.inference import decoded_record, greedy_decode
from isochrony_st.metrics import evaluate
from isochrony_st.model import ModelConfig
from isochrony_st.training import TrainConfig, token_accuracy, train

cc = CorpusConfig()
vocab = cc.vocabulary()
corpus = generate_corpus(cc, "train", 64)
model, report = train(corpus, ModelConfig(vocab_size=vocab.size, feat_dim=cc.feat_dim),
                      TrainConfig(steps=3000, base_lr=2e-3, eval_interval=500), vocab, dev=corpus[:16])
for row in report.rows:
    print("  ".join(f"{k}={v}" for k, v in row.items()))

records, exact = [], 0
for u in corpus:
    h = greedy_decode(model, u.features, u.total_frames, vocab)
    exact += np.array_equal(h.tokens, prepare_target(u).z)
    records.append(decoded_record(u.uid, h, vocab))
result = evaluate(records, corpus, vocab)
print(f"teacher-forced accuracy {token_accuracy(model, corpus):.4f}")
print(f"greedy exact match      {exact / len(corpus):.4f}")
print(result.summary())
