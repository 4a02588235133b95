"""Score a trained checkpoint in-domain and on an unseen corpus.

    python demos/03_evaluate.py [out_dir]

Needs the run from 02_train.py.
"""

import sys
from pathlib import Path

from distilmos import data, evaluation, trainer

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
records = trainer.read_log(out / "run" / "valid_log.jsonl")
best = out / "run" / "checkpoints" / records[trainer.select_best(records)]["checkpoint"]

corpus = data.load_manifest(out / "data" / "manifest.txt")
reports, preds = evaluation.evaluate(str(best), corpus, split="test")
print(evaluation.format_reports(reports, f"in-domain test split ({best.name})"))

# The test split is small, so system level rests on a handful of points.
for row in evaluation.system_level(preds).rows:
    print(f"  {row.system_id}: predicted {row.predicted:.2f}, target {row.target:.2f}")

# A corpus the model never saw, scored with no further training.
other = data.generate_synthetic_corpus(40, seed=11)
reports, _ = evaluation.evaluate(str(best), other, split=None, system=False)
print()
print(evaluation.format_reports(reports, "zero-shot, fresh corpus (utterance level only)"))

# Constant predictions make every correlation undefined, MSE is still reported.
flat = evaluation.PredictionSet.from_arrays(["a", "b", "c"], ["s", "s", "s"], [3.0, 3.0, 3.0], [1.0, 3.0, 5.0])
print()
print(evaluation.format_reports(evaluation.report_levels(flat), "constant predictor"))
