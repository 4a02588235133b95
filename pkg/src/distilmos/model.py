"""The MOS prediction network and its auxiliary self-distillation heads.

Data flow for a batch of layer features ``[B, N, T, D]`` with frame mask
``[B, T]``::

    softmax-weighted layer sum -> projector (D -> H) -> feature processor
        |-> token predictors (N x MLP -> k logits)      [token_prediction]
        |-> embedding predictors (N x MLP -> D)          [mse_distillation]
        `-> CNN-BLSTM -> masked mean pool -> linear      (MOS)

Auxiliary heads hang off the feature-processor output and are never run at
inference; an inference-only model does not even construct them.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import AllFramesMasked, IncompatibleCheckpoint, ShapeMismatch, WrongHeadMode

HEAD_MODES = ("token_prediction", "none", "mse_distillation")
CHECKPOINT_FORMAT = "distilmos-checkpoint"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass
class ModelConfig:
    n_layers: int
    ssl_dim: int
    hidden_dim: int = 256
    fp_blocks: int = 3
    conv_kernel: int = 3
    blstm_layers: int = 1
    n_clusters: int = 200
    head_mode: str = "token_prediction"

    def __post_init__(self):
        if self.head_mode not in HEAD_MODES:
            raise WrongHeadMode(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.hidden_dim < 1 or self.fp_blocks < 1:
            raise ValueError("hidden_dim and fp_blocks must be >= 1")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd for same-padding")


@dataclasses.dataclass
class ForwardOutput:
    mos_pred: torch.Tensor  # [B]
    fp_features: torch.Tensor  # [B, T, H]
    mask: torch.Tensor  # [B, T]
    token_logits: Optional[torch.Tensor] = None  # [B, N, T, k]
    embed_preds: Optional[torch.Tensor] = None  # [B, N, T, D]


def _zero_pad(x, mask):
    return x * mask.unsqueeze(-1).to(x.dtype)


def layer_weighted_sum(features, weights):
    """Convex combination of layers with ``softmax(weights)``.

    ``features`` is ``[..., N, T, D]`` (a single stack or a batch of them).
    """
    if hasattr(features, "features"):
        features = features.features
    if weights.shape[-1] != features.shape[-3]:
        raise ShapeMismatch(f"{weights.shape[-1]} weights for {features.shape[-3]} layers")
    w = torch.softmax(weights, dim=-1).to(features.dtype)
    return torch.einsum("n,...ntd->...td", w, features)


class MaskedBatchNorm1d(nn.Module):
    """Batch norm over channels of ``[B, T, C]`` whose moments skip padded frames."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.register_buffer("num_batches_tracked", torch.tensor(0, dtype=torch.long))

    def normalize(self, x, mask):
        """Pre-affine normalised activations (exposed for testing)."""
        m = mask.unsqueeze(-1).to(x.dtype)
        if self.training:
            n = m.sum()
            mean = (x * m).sum(dim=(0, 1)) / n
            var = (((x - mean) ** 2) * m).sum(dim=(0, 1)) / n
            with torch.no_grad():
                unbiased = var * n / (n - 1) if n > 1 else var
                self.running_mean.lerp_(mean.detach().to(self.running_mean.dtype), self.momentum)
                self.running_var.lerp_(unbiased.detach().to(self.running_var.dtype), self.momentum)
                self.num_batches_tracked += 1
        else:
            mean, var = self.running_mean.to(x.dtype), self.running_var.to(x.dtype)
        return (x - mean) / torch.sqrt(var + self.eps)

    def forward(self, x, mask):
        return _zero_pad(self.normalize(x, mask) * self.weight + self.bias, mask)


class _MaskedConv(nn.Conv1d):
    """Same-padded Conv1d over ``[B, T, C]``; padded frames are zeroed first."""

    def __init__(self, channels, kernel):
        super().__init__(channels, channels, kernel, padding=kernel // 2)

    def forward(self, x, mask):
        return super().forward(_zero_pad(x, mask).transpose(1, 2)).transpose(1, 2)


class FeatureProcessorBlock(nn.Module):
    def __init__(self, dim, kernel):
        super().__init__()
        self.linear = nn.Linear(dim, dim)
        self.conv = _MaskedConv(dim, kernel)
        self.norm = MaskedBatchNorm1d(dim)

    def forward(self, x, mask):
        x = self.conv(self.linear(x), mask)
        return _zero_pad(F.gelu(self.norm(x, mask)), mask)


class FeatureProcessor(nn.Module):
    """Linear projector to ``hidden_dim`` followed by the stacked blocks."""

    def __init__(self, in_dim, hidden_dim=256, n_blocks=3, kernel=3):
        super().__init__()
        self.projector = nn.Linear(in_dim, hidden_dim)
        self.blocks = nn.ModuleList(FeatureProcessorBlock(hidden_dim, kernel) for _ in range(n_blocks))

    def forward(self, x, mask):
        x = _zero_pad(self.projector(x), mask)
        for block in self.blocks:
            x = block(x, mask)
        return x


class CNNBLSTM(nn.Module):
    def __init__(self, dim=256, kernel=3, n_layers=1):
        super().__init__()
        self.conv = _MaskedConv(dim, kernel)
        self.blstm = nn.LSTM(dim, dim, num_layers=n_layers, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * dim, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, mask):
        c = _zero_pad(self.conv(x, mask), mask)
        lengths = mask.sum(dim=1).cpu()
        packed = pack_padded_sequence(c, lengths, batch_first=True, enforce_sorted=False)
        h, _ = self.blstm(packed)
        h, _ = pad_packed_sequence(h, batch_first=True, total_length=x.shape[1])
        out = self.norm(F.gelu(self.proj(h)) + c)
        return _zero_pad(out, mask)


def masked_mean(x, mask):
    """Mean over time of ``[B, T, C]`` counting only valid frames."""
    counts = mask.sum(dim=1)
    if (counts == 0).any():
        raise AllFramesMasked("an item has no valid frames")
    return _zero_pad(x, mask).sum(dim=1) / counts.unsqueeze(-1).to(x.dtype)


class MOSHead(nn.Module):
    def __init__(self, dim=256):
        super().__init__()
        self.linear = nn.Linear(dim, 1)

    def forward(self, x, mask):
        return self.linear(masked_mean(x, mask)).squeeze(-1)


def _mlp(dim, out_dim):
    return nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, out_dim))


class LayerPredictors(nn.Module):
    """``N`` independent 3-layer MLPs applied frame-wise to ``[B, T, H]``.

    With ``out_dim = k`` these are the token predictors (logits); with
    ``out_dim = D`` they regress the SSL embeddings.
    """

    def __init__(self, n_layers, dim, out_dim):
        super().__init__()
        self.heads = nn.ModuleList(_mlp(dim, out_dim) for _ in range(n_layers))

    def forward(self, x):
        return torch.stack([head(x) for head in self.heads], dim=1)


class DistilMOS(nn.Module):
    def __init__(self, config: ModelConfig, with_aux: bool = True):
        super().__init__()
        self.config = config
        self.layer_logits = nn.Parameter(torch.zeros(config.n_layers))
        self.feature_processor = FeatureProcessor(
            config.ssl_dim, config.hidden_dim, config.fp_blocks, config.conv_kernel
        )
        self.cnn_blstm = CNNBLSTM(config.hidden_dim, config.conv_kernel, config.blstm_layers)
        self.mos_head = MOSHead(config.hidden_dim)
        self.aux = None
        if with_aux and config.head_mode == "token_prediction":
            self.aux = LayerPredictors(config.n_layers, config.hidden_dim, config.n_clusters)
        elif with_aux and config.head_mode == "mse_distillation":
            self.aux = LayerPredictors(config.n_layers, config.hidden_dim, config.ssl_dim)

    def inference_modules(self):
        return [self.feature_processor, self.cnn_blstm, self.mos_head]

    def inference_parameter_count(self):
        return self.layer_logits.numel() + sum(
            p.numel() for m in self.inference_modules() for p in m.parameters()
        )

    def layer_weights(self):
        return torch.softmax(self.layer_logits, dim=-1)

    def features(self, layer_feats, mask):
        """Feature-processor output ``[B, T, H]``."""
        x = layer_weighted_sum(layer_feats, self.layer_logits)
        return self.feature_processor(_zero_pad(x, mask), mask)

    def forward(self, layer_feats, mask, inference: bool = False) -> ForwardOutput:
        if layer_feats.shape[1] != self.config.n_layers or layer_feats.shape[-1] != self.config.ssl_dim:
            raise ShapeMismatch(
                f"expected [B, {self.config.n_layers}, T, {self.config.ssl_dim}], got {tuple(layer_feats.shape)}"
            )
        fp = self.features(layer_feats, mask)
        out = ForwardOutput(mos_pred=self.mos_head(self.cnn_blstm(fp, mask), mask), fp_features=fp, mask=mask)
        if not inference and self.aux is not None:
            preds = self.aux(fp)
            if self.config.head_mode == "token_prediction":
                out.token_logits = preds
            else:
                out.embed_preds = preds
        return out

    def token_logits(self, fp):
        if self.config.head_mode != "token_prediction" or self.aux is None:
            raise WrongHeadMode("token predictors exist only for head_mode=token_prediction")
        return self.aux(fp)


def run_batch(model, backend, batch, inference=False, dtype=None):
    """Waveform batch -> backend -> model. Returns (ForwardOutput, layer_feats)."""
    waveforms = torch.as_tensor(batch.waveforms)
    if dtype is not None:
        waveforms = waveforms.to(dtype)
    feats, n_frames = backend(waveforms, torch.as_tensor(batch.lengths))
    mask = torch.arange(feats.shape[2])[None, :] < n_frames[:, None]
    return model(feats, mask, inference=inference), feats


def predict(model, backend, utts, batch_size=16):
    """Inference-path MOS predictions for a list of utterances (numpy array)."""
    import numpy as np

    from .data import collate

    was_training = model.training, backend.training
    model.eval()
    backend.eval()
    preds = []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for start in range(0, len(utts), batch_size):
            out, _ = run_batch(model, backend, collate(utts[start : start + batch_size]), inference=True, dtype=dtype)
            preds.append(out.mos_pred.double().numpy())
    model.train(was_training[0])
    backend.train(was_training[1])
    return np.concatenate(preds) if preds else np.zeros(0)


def save_checkpoint(path, model, backend, codebook_sha256="", **meta):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(model.config),
        "backend_spec": dataclasses.asdict(backend.spec),
        "model_state": model.state_dict(),
        "backend_state": backend.state_dict(),
        "codebook_sha256": codebook_sha256,
        "meta": meta,
    }
    torch.save(payload, path)
    return path


def read_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint(f"{path}: not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path, inference_only=False, backend=None, codebook_sha256=None):
    """Rebuild ``(model, backend, payload)`` from a checkpoint.

    With ``inference_only`` the auxiliary heads are neither built nor loaded.
    Passing ``codebook_sha256`` guards against evaluating with a codebook file
    other than the one the model was trained against.
    """
    from .ssl_backend import BackendSpec, build_backend

    payload = read_checkpoint(path)
    if codebook_sha256 is not None and payload["codebook_sha256"] and payload["codebook_sha256"] != codebook_sha256:
        raise IncompatibleCheckpoint(f"{path}: trained against a different codebook file")
    config = ModelConfig(**payload["model_config"])
    spec = BackendSpec(**payload["backend_spec"])
    if backend is None:
        backend = build_backend(spec)
    elif backend.spec.n_layers != spec.n_layers or backend.spec.dim != spec.dim:
        raise IncompatibleCheckpoint(f"{path}: backend dims differ from checkpoint")
    backend_state = payload["backend_state"]
    floats = [v for v in backend_state.values() if v.is_floating_point()]
    if floats:
        backend.to(floats[0].dtype)
    backend.load_state_dict(backend_state)
    model = DistilMOS(config, with_aux=not inference_only)
    state = payload["model_state"]
    if inference_only:
        state = {k: v for k, v in state.items() if not k.startswith("aux.")}
    model.to(state["layer_logits"].dtype)
    model.load_state_dict(state)
    return model, backend, payload
