"""Generate a few synthetic utterances and show the prepared decoder targets."""

from isochrony_st.data import CorpusConfig, generate_corpus, prepare_target

cc = CorpusConfig()
vocab = cc.vocabulary()
for u in generate_corpus(cc, "train", 3):
    pt = prepare_target(u)
    print(f"{u.uid}: {u.total_frames} frames, features {u.features.shape}")
    print(f"  {'token':>6} {'d':>4} {'f':>5} {'s':>2}")
    for z, d, f, s in zip(pt.z, pt.d, pt.f, pt.s):
        print(f"  {vocab.surface(int(z)):>6} {int(d):>4} {int(f):>5} {int(s):>2}")
