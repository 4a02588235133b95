"""Train the MOS predictor with layer-token prediction as an auxiliary task.

    python demos/02_train.py [out_dir] [steps]

Run 01_corpus_and_tokens.py first; it leaves the manifest and codebooks here.
"""

import logging
import sys
from pathlib import Path

import numpy as np

from distilmos import data, evaluation, model, ssl_backend, tokenizer, trainer

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 600

corpus = data.load_manifest(out / "data" / "manifest.txt").load_audio()
books = tokenizer.load_codebooks(out / "codebooks.dmkm")
backend = ssl_backend.synthetic_backend(ssl_backend.BackendSpec(n_layers=4, dim=32), seed=1)

config = trainer.TrainingConfig(steps=steps, batch_size=32, checkpoint_every=max(steps // 4, 1))
model_config = model.ModelConfig(n_layers=4, ssl_dim=32, hidden_dim=64, n_clusters=books[0].k)
run = trainer.Trainer(config, model_config, corpus, backend, out / "run", books,
                      data.file_sha256(out / "codebooks.dmkm"))
print(f"{model_config.head_mode}: {run.model.inference_parameter_count()} parameters on the inference path, "
      f"{sum(p.numel() for p in run.model.aux.parameters())} more in the token predictors")
result = run.run()

log = result.log
for rec in log[:: max(len(log) // 6, 1)]:
    print(f"step {rec['step']:5d}  l_mos {rec['l_mos']:.3f}  l_aux {rec['l_aux_mean']:.3f}  lr {rec['lr']:.2e}")
print(f"best checkpoint: step {result.best_step}, valid SRCC {result.best_valid_srcc:.3f}")

# The weighted sum shows which encoder layers the predictor leans on.
print("layer weights:", np.round(run.model.layer_weights().detach().numpy(), 3))
preds = evaluation.predictions_for(run.model, run.backend, run.train_utts)
print(f"train SRCC {evaluation.srcc(preds.predicted, preds.target):.3f}")
