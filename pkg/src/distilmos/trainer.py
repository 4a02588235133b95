"""Training loop: AdamW, one-cycle schedule, global-norm clipping, and
checkpoint selection on validation utterance-level SRCC.

A run directory looks like::

    run/
      config.json          echo of every setting used
      train_log.jsonl      one record per step
      valid_log.jsonl      one record per checkpoint
      checkpoints/step_001000.pt ...
      state.pt             latest resumable training state
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import collate
from .errors import (
    ConfigError,
    DegenerateInput,
    IncompatibleCheckpoint,
    MissingCodebooks,
    NonFiniteInput,
    NonFiniteLoss,
    StepOutOfRange,
)
from .evaluation import predictions_for, srcc
from .losses import compute_losses
from .model import DistilMOS, run_batch, save_checkpoint
from .ssl_backend import frozen_copy
from .tokenizer import tokenize_corpus

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainingConfig:
    steps: int = 10000
    batch_size: int = 32
    lr: float = 1e-4
    betas: tuple = (0.9, 0.98)
    weight_decay: float = 1e-4
    clip_norm: float = 10.0
    alpha: float = 0.1
    checkpoint_every: int = 1000
    warmup_frac: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    seed: int = 0
    head_mode: str = "token_prediction"
    eval_batch_size: int = 16

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps <= 0 or self.batch_size <= 0 or self.checkpoint_every <= 0:
            raise ConfigError("steps, batch_size and checkpoint_every must be positive")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in (0, 1)")


def one_cycle_lr(step, total_steps, peak_lr, warmup_frac=0.3, div_factor=25.0, final_div_factor=1e4):
    """Cosine warm-up from ``peak/div_factor`` to ``peak``, then cosine decay
    to ``peak/(div_factor*final_div_factor)``.
    """
    if not 0 <= step <= total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps}]")
    initial = peak_lr / div_factor
    final = initial / final_div_factor
    peak_step = peak_step_of(total_steps, warmup_frac)
    if step <= peak_step:
        frac = step / peak_step
        return initial + (peak_lr - initial) * (1 - math.cos(math.pi * frac)) / 2
    frac = (step - peak_step) / (total_steps - peak_step)
    return final + (peak_lr - final) * (1 + math.cos(math.pi * frac)) / 2


def peak_step_of(total_steps, warmup_frac=0.3):
    return min(max(1, round(warmup_frac * total_steps)), max(1, total_steps - 1))


def global_norm(grads):
    grads = [g for g in grads if g is not None]
    if not grads:
        return 0.0
    return float(torch.sqrt(sum((g.detach().double() ** 2).sum() for g in grads)))


def clip_gradients(grads, clip_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``clip_norm``."""
    grads = [g for g in grads if g is not None]
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads:
            g.mul_(scale)
    return grads


@dataclasses.dataclass
class TrainResult:
    run_dir: Path
    best_checkpoint: Optional[Path]
    best_step: int
    best_valid_srcc: float
    log: list


def _pad_tokens(seqs, t_max):
    n = seqs[0].shape[0]
    out = np.zeros((len(seqs), n, t_max), dtype=np.int64)
    for b, s in enumerate(seqs):
        out[b, :, : s.shape[1]] = s
    return torch.from_numpy(out)


def _config_echo(config, model_config, backend, codebook_sha256):
    return {
        "training": dataclasses.asdict(config),
        "model": dataclasses.asdict(model_config),
        "backend": dataclasses.asdict(backend.spec),
        "codebook_sha256": codebook_sha256,
        "schedule": {
            "peak_step": peak_step_of(config.steps, config.warmup_frac),
            "warmup_frac": config.warmup_frac,
            "div_factor": config.div_factor,
            "final_div_factor": config.final_div_factor,
        },
    }


class Trainer:
    """Owns the model, the (fine-tuned) backend and the optimizer for one run.

    ``backend`` is taken to be the pretrained encoder; a frozen copy of it
    provides token targets (via ``codebooks``) and embedding targets, while
    the original is fine-tuned when its spec is trainable.
    """

    def __init__(
        self, config, model_config, manifest, backend, run_dir, codebooks=None, codebook_sha256="", resume=False
    ):
        if model_config.head_mode != config.head_mode:
            model_config = dataclasses.replace(model_config, head_mode=config.head_mode)
        if config.head_mode == "token_prediction":
            if not codebooks:
                raise MissingCodebooks("head_mode=token_prediction needs codebooks")
            ks = {cb.k for cb in codebooks}
            if ks != {model_config.n_clusters}:
                raise ConfigError(f"codebook k {sorted(ks)} != model n_clusters {model_config.n_clusters}")
        self.config = config
        self.model_config = model_config
        self.run_dir = Path(run_dir)
        self.ckpt_dir = self.run_dir / "checkpoints"
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        self.codebook_sha256 = codebook_sha256

        manifest.load_audio()
        self.train_utts = manifest.split("train")
        self.valid_utts = manifest.split("valid")
        if not self.train_utts or not self.valid_utts:
            raise ConfigError("training needs nonempty train and valid splits")

        torch.manual_seed(config.seed)
        self.backend = backend
        self.teacher = frozen_copy(backend)
        self.model = DistilMOS(model_config)
        self.dtype = next(self.model.parameters()).dtype
        self.tokens = None
        if config.head_mode == "token_prediction":
            self.tokens = {
                uid: ts.tokens
                for uid, ts in tokenize_corpus(manifest, self.teacher, codebooks, splits=("train",)).items()
            }
        params = [p for p in self.model.parameters()] + [p for p in backend.parameters() if p.requires_grad]
        self.params = params
        self.optimizer = torch.optim.AdamW(
            params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay
        )
        self.rng = np.random.default_rng(config.seed)
        self.order = self.rng.permutation(len(self.train_utts))
        self.cursor = 0
        self.step = 0
        self.best_step = -1
        self.best_valid_srcc = -math.inf
        self.best_checkpoint = None
        self.log = []

        with open(self.run_dir / "config.json", "w", encoding="utf-8") as fh:
            json.dump(_config_echo(config, model_config, backend, codebook_sha256), fh, indent=2)
        if resume and (self.run_dir / "state.pt").exists():
            self.load_state()
        else:
            for name in ("train_log.jsonl", "valid_log.jsonl"):
                (self.run_dir / name).unlink(missing_ok=True)

    # batching -----------------------------------------------------------
    def _next_indices(self):
        picked = []
        while len(picked) < min(self.config.batch_size, len(self.train_utts)):
            if self.cursor >= len(self.order):
                self.order = self.rng.permutation(len(self.train_utts))
                self.cursor = 0
            picked.append(int(self.order[self.cursor]))
            self.cursor += 1
        return picked

    def _losses(self, batch):
        self.model.train()
        self.backend.train()
        out, _ = run_batch(self.model, self.backend, batch, dtype=self.dtype)
        token_targets = embed_targets = None
        if self.config.head_mode == "token_prediction":
            token_targets = _pad_tokens([self.tokens[i] for i in batch.ids], out.mask.shape[1])
        elif self.config.head_mode == "mse_distillation":
            with torch.no_grad():
                embed_targets, _ = self.teacher(torch.as_tensor(batch.waveforms).to(self.dtype), torch.as_tensor(batch.lengths))
        return compute_losses(out, batch.mos, self.config.alpha, token_targets, embed_targets)

    # one step -----------------------------------------------------------
    def train_step(self):
        cfg = self.config
        idx = self._next_indices()
        batch = collate([self.train_utts[i] for i in idx])
        lr = one_cycle_lr(self.step, cfg.steps, cfg.lr, cfg.warmup_frac, cfg.div_factor, cfg.final_div_factor)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        try:
            losses = self._losses(batch)
        except NonFiniteInput:
            self._dump_nonfinite(batch, None)
        if not torch.isfinite(losses.total):
            self._dump_nonfinite(batch, losses)
        losses.total.backward()
        grads = [p.grad for p in self.params]
        grad_norm = global_norm(grads)
        clip_gradients(grads, cfg.clip_norm)
        self.optimizer.step()
        record = {"step": self.step, **losses.as_record(), "lr": lr, "grad_norm": grad_norm}
        self.log.append(record)
        with open(self.run_dir / "train_log.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        self.step += 1
        return record

    def _dump_nonfinite(self, batch, losses):
        dump = self.run_dir / "nonfinite_batch.json"
        with open(dump, "w", encoding="utf-8") as fh:
            record = losses.as_record() if losses is not None else {"l_mos": None}
            json.dump({"step": self.step, "ids": list(batch.ids), **record}, fh, indent=2)
        raise NonFiniteLoss(f"non-finite loss at step {self.step}; batch ids dumped to {dump}")

    # validation / checkpointing ----------------------------------------
    def validate(self):
        preds = predictions_for(self.model, self.backend, self.valid_utts, self.config.eval_batch_size)
        try:
            return srcc(preds.predicted, preds.target)
        except DegenerateInput:
            return None

    def checkpoint(self):
        value = self.validate()
        path = self.ckpt_dir / f"step_{self.step:06d}.pt"
        save_checkpoint(
            path, self.model, self.backend, self.codebook_sha256, step=self.step, valid_srcc=value,
            head_mode=self.config.head_mode,
        )
        score = -math.inf if value is None else value
        if score > self.best_valid_srcc or self.best_checkpoint is None:
            self.best_valid_srcc, self.best_step, self.best_checkpoint = score, self.step, path
        with open(self.run_dir / "valid_log.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"step": self.step, "valid_srcc": value, "checkpoint": path.name}) + "\n")
        self.save_state()
        return value

    def save_state(self, path=None):
        path = Path(path) if path is not None else self.run_dir / "state.pt"
        torch.save(
            {
                "step": self.step,
                "model": self.model.state_dict(),
                "backend": self.backend.state_dict(),
                "teacher": self.teacher.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "rng": self.rng.bit_generator.state,
                "order": self.order.copy(),
                "cursor": self.cursor,
                "best_step": self.best_step,
                "best_valid_srcc": self.best_valid_srcc,
                "best_checkpoint": str(self.best_checkpoint) if self.best_checkpoint else None,
                "torch_rng": torch.get_rng_state(),
            },
            path,
        )
        return path

    def load_state(self, path=None):
        path = Path(path) if path is not None else self.run_dir / "state.pt"
        state = torch.load(path, map_location="cpu", weights_only=False)
        teacher = self.teacher.state_dict()
        if "teacher" in state and any(not torch.equal(v, teacher[k]) for k, v in state["teacher"].items()):
            raise IncompatibleCheckpoint("resume needs the same pretrained backend the run started from")
        self.model.load_state_dict(state["model"])
        self.backend.load_state_dict(state["backend"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = state["rng"]
        self.order = np.asarray(state["order"])
        self.cursor = state["cursor"]
        self.step = state["step"]
        self.best_step = state["best_step"]
        self.best_valid_srcc = state["best_valid_srcc"]
        self.best_checkpoint = Path(state["best_checkpoint"]) if state["best_checkpoint"] else None
        torch.set_rng_state(state["torch_rng"])
        self._truncate_logs()
        return self

    def _truncate_logs(self):
        for name in ("train_log.jsonl", "valid_log.jsonl"):
            path = self.run_dir / name
            if not path.exists():
                continue
            keep = []
            for line in path.read_text(encoding="utf-8").splitlines():
                rec = json.loads(line)
                limit = self.step if name == "train_log.jsonl" else self.step + 1
                if rec["step"] < limit:
                    keep.append(line)
            path.write_text("".join(l + "\n" for l in keep), encoding="utf-8")
            if name == "train_log.jsonl":
                self.log = [json.loads(l) for l in keep]

    def run(self, max_steps=None):
        """Train to ``config.steps`` (or stop early after ``max_steps`` more steps)."""
        cfg = self.config
        stop = cfg.steps if max_steps is None else min(cfg.steps, self.step + max_steps)
        while self.step < stop:
            self.train_step()
            if self.step % cfg.checkpoint_every == 0 or self.step == cfg.steps:
                value = self.checkpoint()
                logger.info("step %d valid SRCC %s", self.step, value)
        return self.result()

    def result(self):
        return TrainResult(self.run_dir, self.best_checkpoint, self.best_step, self.best_valid_srcc, self.log)


def train(config, model_config, manifest, backend, run_dir, codebooks=None, codebook_sha256="", resume=False):
    trainer = Trainer(config, model_config, manifest, backend, run_dir, codebooks, codebook_sha256, resume=resume)
    return trainer.run()


def select_best(valid_records):
    """Index of the highest validation SRCC; ties keep the earliest entry."""
    best, best_val = None, -math.inf
    for i, rec in enumerate(valid_records):
        v = rec["valid_srcc"]
        v = -math.inf if v is None else v
        if best is None or v > best_val:
            best, best_val = i, v
    return best


def read_log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]

