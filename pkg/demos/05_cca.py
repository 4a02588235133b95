"""Layer-wise CCA: how much of each encoder layer survives in the predictor?

    python demos/05_cca.py [out_dir] [steps]

Trains the three variants briefly, then compares the pooled feature-processor
output of each with every layer of the untouched encoder.
"""

import sys
from pathlib import Path

import numpy as np

from distilmos import cca, data, model, ssl_backend, tokenizer, trainer

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "cca"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 300

# CCA is invariant to invertible linear maps, which is the whole point:
rng = np.random.default_rng(0)
X = rng.standard_normal((300, 5))
print(f"X vs X @ R + b: {cca.cca_similarity(X, X @ rng.standard_normal((5, 5)) + 1.0):.6f}")
print(f"X vs independent noise: {cca.cca_similarity(X, rng.standard_normal((300, 5))):.3f}")

corpus = data.generate_synthetic_corpus(240, seed=0)
corpus.load_audio()
spec = ssl_backend.BackendSpec(n_layers=4, dim=32)
pretrained = ssl_backend.synthetic_backend(spec, seed=1)
books = tokenizer.fit_codebooks(tokenizer.iter_layer_stacks(corpus.split("train"), pretrained), k=16)

checkpoints = {}
for tag, mode in (("distilmos", "token_prediction"), ("w/o token prediction", "none"), ("mse_distillation", "mse_distillation")):
    config = trainer.TrainingConfig(steps=steps, batch_size=32, lr=1e-3, checkpoint_every=steps, head_mode=mode)
    mcfg = model.ModelConfig(4, 32, hidden_dim=16, n_clusters=16, head_mode=mode)
    result = trainer.train(config, mcfg, corpus, ssl_backend.synthetic_backend(spec, seed=1), out / mode,
                           books if mode == "token_prediction" else None)
    checkpoints[tag] = str(result.best_checkpoint)

# Mean CCA is biased upward when U is not much larger than d, which is why
# this demo uses 240 utterances against 32-dim layers. Compare curves against
# random-init rather than against zero.
curves = cca.analyze(checkpoints, pretrained, corpus, split=None,
                     ssl_mos_checkpoint=checkpoints["w/o token prediction"])
table = cca.format_curves(curves)
print(table)
(out / "cca.txt").write_text(table)
print(f"plot with: distilmos plot {out / 'cca.txt'} --out cca.png")
