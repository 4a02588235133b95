"""Build a toy corpus, look at the layer features, and turn them into tokens.

    python demos/01_corpus_and_tokens.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from distilmos import data, ssl_backend, tokenizer

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")

# Each utterance is a tone mixed with noise. The noise share c sets the
# score: MOS = 5 - 4c, so system sys00 is clean and the last one is pure noise.
corpus = data.generate_synthetic_corpus(60, seed=0)
path = data.save_manifest(corpus, out / "data")
print(f"{len(corpus.entries)} utterances written to {path}")
for sys_id in sorted({u.system_id for u in corpus.entries}):
    scores = [u.mos for u in corpus.entries if u.system_id == sys_id]
    print(f"  {sys_id}: {len(scores)} utts, MOS {min(scores):.2f}..{max(scores):.2f}")

# The synthetic encoder stands in for a pretrained speech model: 50 frames
# per second, four layers of 32-dim features.
backend = ssl_backend.synthetic_backend(ssl_backend.BackendSpec(n_layers=4, dim=32), seed=1)
stacks = ssl_backend.encode(data.collate(corpus.entries[:2]), backend)
print(f"first utterance: {stacks[0].n_layers} layers x {stacks[0].n_frames} frames x {stacks[0].features.shape[-1]} dims")

# One codebook per layer, fit on the train split only.
train = corpus.split("train")
books = tokenizer.fit_codebooks(tokenizer.iter_layer_stacks(train, backend), k=16, batch_size=64, seed=0)
tokenizer.save_codebooks(books, out / "codebooks.dmkm")
for cb in books:
    print(f"layer {cb.layer_index}: k={cb.k}, fit on {cb.n_frames_seen} frames")

tokens = tokenizer.tokenize_corpus(corpus, backend, books, splits=("train",))
seq = tokens[train[0].id].tokens
print(f"tokens for {train[0].id} (MOS {train[0].mos:.2f}):")
for n, row in enumerate(seq, start=1):
    print(f"  layer {n}: {' '.join(f'{t:2d}' for t in row[:20])}")

# How often each layer's token flips between neighbouring frames.
for n, row in enumerate(seq, start=1):
    print(f"  layer {n}: token changes per frame {np.mean(row[1:] != row[:-1]):.2f}")
