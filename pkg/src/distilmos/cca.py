"""Layer-wise canonical correlation analysis of pooled representations.

Each utterance is reduced to one vector by a masked temporal mean, then the
mean canonical correlation between a model representation and every
pretrained layer gives one curve per model.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch

from .errors import DegenerateInput, IncompatibleCheckpoint, RankDeficient

EPS_SCALE = 1e-6


@dataclasses.dataclass
class CcaCurve:
    model_tag: str
    values: np.ndarray  # one entry per pretrained layer


def _inv_sqrt(cov, ridge):
    if ridge:
        cov = cov + ridge * np.eye(len(cov))
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() <= 1e-12 * max(vals.max(), 1e-300):
        raise RankDeficient("covariance block is singular; increase the ridge")
    return (vecs / np.sqrt(vals)) @ vecs.T


def _needs_ridge(cov, n_samples):
    d = len(cov)
    if n_samples < d + 2:
        return True
    vals = np.linalg.eigvalsh(cov)
    return vals.min() <= 1e-10 * max(vals.max(), 1e-300)


def canonical_correlations(X, Y, eps_scale=EPS_SCALE, ridge=None):
    """All ``min(d1, d2)`` canonical correlations, sorted descending.

    A ridge of ``eps_scale * trace(C)/d`` is added to each self-covariance
    block when it is needed (``U < d + 2`` or a numerically singular block),
    or always/never when ``ridge`` is True/False.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ValueError(f"need [U, d] inputs with equal U, got {X.shape} and {Y.shape}")
    if len(X) < 3:
        raise DegenerateInput("CCA needs at least 3 samples")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise DegenerateInput("non-finite input")
    u = len(X)
    Xc, Yc = X - X.mean(axis=0), Y - Y.mean(axis=0)
    cxx, cyy, cxy = Xc.T @ Xc / (u - 1), Yc.T @ Yc / (u - 1), Xc.T @ Yc / (u - 1)

    def ridge_for(cov):
        use = _needs_ridge(cov, u) if ridge is None else ridge
        return eps_scale * np.trace(cov) / len(cov) if use else 0.0

    wx = _inv_sqrt(cxx, ridge_for(cxx))
    wy = _inv_sqrt(cyy, ridge_for(cyy))
    rho = np.linalg.svd(wx @ cxy @ wy, compute_uv=False)
    return np.clip(rho[: min(X.shape[1], Y.shape[1])], 0.0, 1.0)


def cca_similarity(X, Y, summary="mean", eps_scale=EPS_SCALE, ridge=None):
    """Mean (or top-1) canonical correlation, in ``[0, 1]`` and symmetric."""
    rho = canonical_correlations(X, Y, eps_scale, ridge)
    if summary == "mean":
        return float(rho.mean())
    if summary == "top1":
        return float(rho[0])
    raise ValueError(f"unknown summary {summary!r}")


def _batches(utts, batch_size):
    from .data import collate

    for start in range(0, len(utts), batch_size):
        yield collate(utts[start : start + batch_size])


def _pooled(x, mask):
    m = mask.unsqueeze(-1).to(x.dtype)
    return (x * m).sum(dim=-2) / m.sum(dim=-2)


@torch.no_grad()
def pooled_layer_reps(backend, utts, batch_size=16):
    """``[N, U, D]`` masked temporal means of every backend layer."""
    backend.eval()
    out = []
    for batch in _batches(utts, batch_size):
        feats, n_frames = backend(torch.as_tensor(batch.waveforms), torch.as_tensor(batch.lengths))
        mask = torch.arange(feats.shape[2])[None, :] < n_frames[:, None]
        out.append(_pooled(feats, mask[:, None, :]).transpose(0, 1).double().numpy())
    return np.concatenate(out, axis=1)


@torch.no_grad()
def pooled_model_reps(model, backend, utts, batch_size=16):
    """``[U, H]`` masked temporal means of the feature-processor output."""
    model.eval()
    backend.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for batch in _batches(utts, batch_size):
        feats, n_frames = backend(torch.as_tensor(batch.waveforms).to(dtype), torch.as_tensor(batch.lengths))
        mask = torch.arange(feats.shape[2])[None, :] < n_frames[:, None]
        out.append(_pooled(model.features(feats.to(dtype), mask), mask).double().numpy())
    return np.concatenate(out, axis=0)


def pooled_reps(source, utts, backend=None, batch_size=16):
    """Pooled rows for a backend (``[N, U, D]``) or a model (``[U, H]``, needs ``backend``)."""
    if backend is None:
        return pooled_layer_reps(source, utts, batch_size)
    return pooled_model_reps(source, backend, utts, batch_size)


def layer_curve(tag, reps, layer_reps, **kwargs):
    return CcaCurve(tag, np.array([cca_similarity(reps, layer, **kwargs) for layer in layer_reps]))


def analyze(checkpoints, backend, manifest, split="test", ssl_mos_checkpoint=None, random_seed=0, **kwargs):
    """One CCA curve per model against the pretrained ``backend``'s layers.

    ``checkpoints`` maps a tag (e.g. ``"distilmos"``) to a checkpoint path.
    Adds a ``random-init`` curve from an untrained model of the first
    checkpoint's architecture and, if ``ssl_mos_checkpoint`` is given, an
    ``ssl-mos-style`` curve from that checkpoint's fine-tuned final layer.
    """
    from .model import DistilMOS, load_checkpoint, read_checkpoint

    manifest.load_audio()
    utts = manifest.entries if split is None else manifest.split(split)
    reference = pooled_layer_reps(backend, utts)
    curves, first_config = [], None
    for tag, path in checkpoints.items():
        payload = read_checkpoint(path)
        spec = payload["backend_spec"]
        if spec["n_layers"] != backend.spec.n_layers or spec["dim"] != backend.spec.dim:
            raise IncompatibleCheckpoint(f"{path}: backend spec differs from the reference backend")
        model, tuned, _ = load_checkpoint(path, inference_only=True)
        first_config = first_config or model.config
        curves.append(layer_curve(tag, pooled_model_reps(model, tuned, utts), reference, **kwargs))
    if first_config is not None:
        torch.manual_seed(random_seed)
        fresh = DistilMOS(first_config, with_aux=False)
        curves.append(layer_curve("random-init", pooled_model_reps(fresh, backend, utts), reference, **kwargs))
    if ssl_mos_checkpoint is not None:
        _, tuned, _ = load_checkpoint(ssl_mos_checkpoint, inference_only=True)
        final = pooled_layer_reps(tuned, utts)[-1]
        curves.append(layer_curve("ssl-mos-style", final, reference, **kwargs))
    return curves


def format_curves(curves, delimiter="|"):
    """Delimited table, one row per layer (1-based) and one column per model."""
    header = delimiter.join(["layer"] + [c.model_tag for c in curves])
    n = len(curves[0].values) if curves else 0
    rows = [
        delimiter.join([str(i + 1)] + [f"{c.values[i]:.6f}" for c in curves]) for i in range(n)
    ]
    return "\n".join([header] + rows) + "\n"
