"""How does the number of clusters per layer affect the result?

    python demos/04_sweep_k.py [out_dir] [steps]

Fits fresh codebooks for each k, trains a short run and scores the test split.
Toy-scale runs are noisy, so read the table as a demonstration of the sweep
rather than a finding.
"""

import sys
from pathlib import Path

from distilmos import data, evaluation, model, ssl_backend, tokenizer, trainer

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "sweep"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 300

corpus = data.generate_synthetic_corpus(60, seed=0)
corpus.load_audio()
spec = ssl_backend.BackendSpec(n_layers=4, dim=32)
pretrained = ssl_backend.synthetic_backend(spec, seed=1)

rows = []
for k in (4, 8, 16, 32):
    books = tokenizer.fit_codebooks(tokenizer.iter_layer_stacks(corpus.split("train"), pretrained), k=k)
    config = trainer.TrainingConfig(steps=steps, batch_size=32, lr=1e-3, checkpoint_every=steps // 3)
    mcfg = model.ModelConfig(4, 32, hidden_dim=32, n_clusters=k)
    result = trainer.train(config, mcfg, corpus, ssl_backend.synthetic_backend(spec, seed=1), out / f"k{k}", books)
    reports, _ = evaluation.evaluate(str(result.best_checkpoint), corpus, "test")
    rows.append((k, reports[0].srcc, reports[1].srcc))
    print(f"k={k:3d}  utterance SRCC {reports[0].srcc:.3f}  system SRCC {reports[1].srcc or float('nan'):.3f}")

table = "k|utterance_srcc|system_srcc\n" + "".join(f"{k}|{u:.4f}|{s:.4f}\n" for k, u, s in rows)
(out / "sweep_k.txt").write_text(table)
print(f"table written to {out / 'sweep_k.txt'}; plot it with: distilmos plot {out / 'sweep_k.txt'} --out sweep.png")
