"""MOS prediction with layer-wise self-distillation from discretised SSL features."""

from .data import CorpusManifest, PaddedBatch, Utterance, collate, generate_synthetic_corpus, load_manifest, save_manifest
from .evaluation import MetricReport, PredictionSet, evaluate, ktau, lcc, mse, srcc, system_level
from .losses import LossBreakdown, combined_loss, embed_mse_loss, mos_loss, token_ce_loss
from .model import DistilMOS, ForwardOutput, ModelConfig, layer_weighted_sum, load_checkpoint, save_checkpoint
from .ssl_backend import BackendSpec, LayerStack, encode, synthetic_backend
from .tokenizer import Codebook, TokenSequence, assign, fit_codebooks, load_codebooks, save_codebooks, tokenize_corpus
from .trainer import Trainer, TrainingConfig, clip_gradients, one_cycle_lr, train

__version__ = "0.1.0"
