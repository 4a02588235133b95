"""Per-layer frame features from waveforms.

Two backends share one contract: ``backend(waveforms, lengths)`` returns a
``[B, N, T, D]`` tensor of Transformer-block outputs together with per-item
frame counts, and :func:`encode` turns that into one :class:`LayerStack`
per utterance.

:class:`SyntheticBackend` is a small deterministic stand-in that makes the
whole pipeline runnable on a laptop. :class:`TransformersBackend` wraps a
Wav2Vec2/WavLM checkpoint from ``transformers``.
"""

from __future__ import annotations

import copy
import dataclasses
import math

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, TooShortInput


@dataclasses.dataclass
class BackendSpec:
    name: str = "synthetic"
    n_layers: int = 4
    dim: int = 32
    frame_rate: float = 50.0
    trainable: bool = True
    sample_rate: int = 16000
    # checkpoint path or hub id for real encoders; opaque here
    checkpoint: str = ""
    freeze_feature_encoder: bool = False

    def __post_init__(self):
        if self.n_layers < 1 or self.dim < 1:
            raise ConfigError("n_layers and dim must be >= 1")

    @property
    def hop(self):
        hop = self.sample_rate / self.frame_rate
        if abs(hop - round(hop)) > 1e-9:
            raise ConfigError(f"sample_rate/frame_rate must be an integer, got {hop}")
        return int(round(hop))


@dataclasses.dataclass
class LayerStack:
    features: torch.Tensor  # [N, T, D]
    frame_rate: float
    mask: torch.Tensor  # [T] bool

    @property
    def n_layers(self):
        return self.features.shape[0]

    @property
    def n_frames(self):
        return int(self.mask.sum())


def _masked(x, mask):
    # x [B, T, D], mask [B, T]
    return x * mask.unsqueeze(-1).to(x.dtype)


class SyntheticBackend(nn.Module):
    """Log-power framing followed by a stack of mixing layers.

    Frames do not overlap (window = hop), so frame ``t`` only sees samples
    ``[t*hop, (t+1)*hop)`` and padding never leaks into valid frames. Every
    layer combines a per-frame linear map with a depthwise temporal conv;
    padded frames are zeroed before each conv.
    """

    def __init__(self, spec: BackendSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.hop = spec.hop
        n_bins = self.hop // 2 + 1
        self.front = nn.Linear(n_bins, spec.dim)
        self.mix = nn.ModuleList(nn.Linear(spec.dim, spec.dim) for _ in range(spec.n_layers))
        self.temporal = nn.ModuleList(
            nn.Conv1d(spec.dim, spec.dim, 3, padding=1, groups=spec.dim) for _ in range(spec.n_layers)
        )
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                bound = 1.0 / math.sqrt(p.shape[-1] if p.dim() > 1 else spec.dim)
                p.copy_((torch.rand(p.shape, generator=gen) * 2 - 1) * bound * (1.7 if p.dim() > 1 else 1.0))
        self.requires_grad_(spec.trainable)

    def frame_lengths(self, lengths):
        return torch.as_tensor(lengths, dtype=torch.long) // self.hop

    def forward(self, waveforms, lengths):
        waveforms = torch.as_tensor(waveforms)
        lengths = torch.as_tensor(lengths, dtype=torch.long)
        if (lengths < self.hop).any():
            raise TooShortInput(f"waveform shorter than one hop ({self.hop} samples)")
        n_frames = self.frame_lengths(lengths)
        t_max = int(n_frames.max())
        dtype = self.front.weight.dtype
        frames = waveforms[:, : t_max * self.hop].to(dtype).reshape(len(lengths), t_max, self.hop)
        power = _power(frames)
        mask = torch.arange(t_max)[None, :] < n_frames[:, None]
        h = _masked(self.front(torch.log(power + 1e-6)), mask)
        outs = []
        for lin, conv in zip(self.mix, self.temporal):
            ctx = conv(_masked(h, mask).transpose(1, 2)).transpose(1, 2)
            h = _masked(torch.tanh(lin(h) + ctx) + 0.5 * h, mask)
            outs.append(h)
        return torch.stack(outs, dim=1), n_frames


def _power(frames):
    spec = torch.fft.rfft(frames, dim=-1)
    return spec.real.pow(2) + spec.imag.pow(2)


class TransformersBackend(nn.Module):
    """Adapter over a ``transformers`` Wav2Vec2/WavLM/HuBERT encoder.

    Only the per-block hidden states are exposed; the convolutional front-end
    output (``hidden_states[0]``) is dropped. Items run one at a time without
    padding, so results are independent of what else is in the batch.
    """

    def __init__(self, spec: BackendSpec, model=None):
        super().__init__()
        if model is None:
            from transformers import AutoModel

            model = AutoModel.from_pretrained(spec.checkpoint or spec.name)
        self.model = model
        cfg = model.config
        if cfg.num_hidden_layers != spec.n_layers or cfg.hidden_size != spec.dim:
            raise ConfigError(
                f"spec says N={spec.n_layers}, D={spec.dim}; model has "
                f"N={cfg.num_hidden_layers}, D={cfg.hidden_size}"
            )
        self.spec = spec
        self.requires_grad_(spec.trainable)
        if spec.trainable and spec.freeze_feature_encoder:
            self.model.feature_extractor.requires_grad_(False)

    def frame_lengths(self, lengths):
        lengths = torch.as_tensor(lengths, dtype=torch.long)
        return self.model._get_feat_extract_output_lengths(lengths).long()

    def forward(self, waveforms, lengths):
        waveforms = torch.as_tensor(waveforms)
        lengths = torch.as_tensor(lengths, dtype=torch.long)
        n_frames = self.frame_lengths(lengths)
        if (n_frames < 1).any():
            raise TooShortInput("waveform shorter than the encoder's receptive field")
        t_max = int(n_frames.max())
        out = waveforms.new_zeros(len(lengths), self.spec.n_layers, t_max, self.spec.dim)
        dtype = next(self.model.parameters()).dtype
        for b, n in enumerate(lengths.tolist()):
            hs = self.model(waveforms[b : b + 1, :n].to(dtype), output_hidden_states=True).hidden_states
            feats = torch.stack(hs[1:], dim=1)[0]  # [N, T, D]
            out = out.to(feats.dtype)
            out[b, :, : feats.shape[1]] = feats
        return out, n_frames


def synthetic_backend(spec: BackendSpec, seed: int = 0) -> SyntheticBackend:
    return SyntheticBackend(spec, seed)


def build_backend(spec: BackendSpec, seed: int = 0):
    if spec.name == "synthetic":
        return SyntheticBackend(spec, seed)
    return TransformersBackend(spec)


def frozen_copy(backend):
    """Detached copy used as the pretrained reference (token/embedding targets, CCA)."""
    teacher = copy.deepcopy(backend)
    teacher.requires_grad_(False)
    teacher.eval()
    return teacher


def encode(batch, backend) -> list:
    """One :class:`LayerStack` per batch item, trimmed to its own frame count."""
    feats, n_frames = backend(torch.from_numpy(np.asarray(batch.waveforms)), torch.from_numpy(np.asarray(batch.lengths)))
    rate = backend.spec.frame_rate
    stacks = []
    for b, n in enumerate(n_frames.tolist()):
        stacks.append(LayerStack(feats[b, :, :n], rate, torch.ones(n, dtype=torch.bool)))
    return stacks


def frame_mask(n_frames, t_max=None):
    n_frames = torch.as_tensor(n_frames, dtype=torch.long)
    t_max = int(n_frames.max()) if t_max is None else t_max
    return torch.arange(t_max)[None, :] < n_frames[:, None]
