"""Per-layer k-means codebooks fit by streaming mini-batch updates.

Centroids are seeded with k-means++ over an initial fill buffer and then
refined with Sculley's web-scale mini-batch k-means: every frame in a batch
is assigned against the centroids as they stood at the start of the batch,
and each centroid moves toward its assigned frames with learning rate
``1 / count``. With that rate a centroid is exactly the running mean of every
frame ever assigned to it, which is how the update is vectorised below.

Codebook files are little-endian::

    b"DMKM"
    repeat per layer: layer_index u32, k u32, dim u32, seed u64,
                      centroids float32[k * dim] (row-major)
"""

from __future__ import annotations

import dataclasses
import logging
import struct

import numpy as np
import torch

from .errors import CorruptFile, DimMismatch, InsufficientData, MissingLayerCodebook

logger = logging.getLogger(__name__)

MAGIC = b"DMKM"
_RECORD = struct.Struct("<IIIQ")
DEFAULT_K = 200
DEFAULT_BATCH = 64
SWEEP_KS = (50, 100, 150, 200, 250, 300)


@dataclasses.dataclass
class Codebook:
    layer_index: int  # 1-based
    centroids: np.ndarray  # [k, D] float32
    seed: int = 0
    n_frames_seen: int = dataclasses.field(default=0, compare=False)

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.layer_index == other.layer_index
            and self.seed == other.seed
            and self.centroids.dtype == other.centroids.dtype
            and np.array_equal(self.centroids, other.centroids)
        )


@dataclasses.dataclass
class TokenSequence:
    utterance_id: str
    tokens: np.ndarray  # [N, T] int64


def _sq_dists(frames, centroids, chunk=4096):
    """Exact squared distances via differences (no ||x||^2 - 2xc + ||c||^2 cancellation)."""
    out = np.empty((len(frames), len(centroids)), dtype=np.float64)
    step = max(1, chunk // max(1, centroids.shape[1]))
    for s in range(0, len(frames), step):
        diff = frames[s : s + step, None, :] - centroids[None, :, :]
        out[s : s + step] = np.einsum("tkd,tkd->tk", diff, diff)
    return out


def assign(codebook, frames):
    """Index of the nearest centroid for every frame; ties go to the lowest index."""
    frames = np.asarray(frames, dtype=np.float64)
    centroids = codebook.centroids if isinstance(codebook, Codebook) else np.asarray(codebook)
    if frames.ndim != 2 or frames.shape[1] != centroids.shape[1]:
        raise DimMismatch(f"frames {frames.shape} vs centroids {centroids.shape}")
    if len(frames) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(_sq_dists(frames, centroids.astype(np.float64)), axis=1).astype(np.int64)


def quantization_error(centroids, frames):
    frames = np.asarray(frames, dtype=np.float64)
    d = _sq_dists(frames, np.asarray(centroids, dtype=np.float64))
    return float(d.min(axis=1).mean())


def kmeans_plusplus(frames, k, rng):
    """k-means++ seeding; only points at positive distance can be drawn."""
    n = len(frames)
    centers = np.empty((k, frames.shape[1]))
    centers[0] = frames[rng.integers(n)]
    closest = _sq_dists(frames, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise InsufficientData(f"only {i} distinct frames available for k={k}")
        idx = rng.choice(n, p=closest / total)
        centers[i] = frames[idx]
        closest = np.minimum(closest, _sq_dists(frames, centers[i : i + 1])[:, 0])
    return centers


class MiniBatchKMeans:
    """Streaming k-means for one layer.

    Feed frames with :meth:`partial_fit`; the first ``init_size`` frames are
    buffered for k-means++ seeding and then replayed through the mini-batch
    updates like everything after them.
    """

    def __init__(self, k, batch_size=DEFAULT_BATCH, seed=0, init_size=None):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.batch_size = batch_size
        self.seed = seed
        self.init_size = init_size if init_size is not None else max(3 * k, 3 * batch_size)
        self.rng = np.random.default_rng(seed)
        self.centers = None
        self.counts = np.zeros(k, dtype=np.int64)
        self.n_seen = 0
        self._buffer = []
        self._pending = np.zeros((0, 0))
        self.dim = None

    def partial_fit(self, frames):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2:
            raise DimMismatch(f"expected [T, D] frames, got {frames.shape}")
        if self.dim is None:
            self.dim = frames.shape[1]
            self._pending = np.zeros((0, self.dim))
        elif frames.shape[1] != self.dim:
            raise DimMismatch(f"frame dim {frames.shape[1]} != {self.dim}")
        if len(frames) == 0:
            return self
        if self.centers is None:
            self._buffer.append(frames)
            if sum(len(b) for b in self._buffer) >= self.init_size:
                self._initialise()
            return self
        self._pending = np.concatenate([self._pending, frames])
        self._drain(final=False)
        return self

    def finalize(self):
        if self.centers is None:
            n = sum(len(b) for b in self._buffer)
            if n < self.k:
                raise InsufficientData(f"{n} frames seen, need at least k={self.k}")
            self._initialise()
        self._drain(final=True)
        return self.centers

    def _initialise(self):
        buf = np.concatenate(self._buffer)
        self._buffer = []
        self.centers = kmeans_plusplus(buf, self.k, self.rng)
        self._pending = np.concatenate([self._pending, buf])
        self._drain(final=False)

    def _drain(self, final):
        while len(self._pending) >= self.batch_size or (final and len(self._pending)):
            batch, self._pending = self._pending[: self.batch_size], self._pending[self.batch_size :]
            self._update(batch)

    def _update(self, batch):
        labels = np.argmin(_sq_dists(batch, self.centers), axis=1)
        self.n_seen += len(batch)
        for c in np.unique(labels):
            members = batch[labels == c]
            old = self.counts[c]
            new = old + len(members)
            self.centers[c] = (old * self.centers[c] + members.sum(axis=0)) / new
            self.counts[c] = new


def _layer_frames(stack):
    """Yield (layer_index0, [T_valid, D] float64 array) for a LayerStack."""
    feats = stack.features
    mask = stack.mask
    if isinstance(feats, torch.Tensor):
        feats = feats.detach().cpu().numpy()
        mask = mask.detach().cpu().numpy()
    feats = np.asarray(feats, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    for n in range(feats.shape[0]):
        yield n, feats[n][mask]


def fit_codebooks(stream, k=DEFAULT_K, batch_size=DEFAULT_BATCH, seed=0, init_size=None):
    """Fit one codebook per layer over a stream of :class:`LayerStack`.

    Layers are independent; every layer uses a generator seeded with ``seed``.
    Masked frames are skipped.
    """
    fitters = None
    for stack in stream:
        if fitters is None:
            fitters = [MiniBatchKMeans(k, batch_size, seed, init_size) for _ in range(stack.n_layers)]
        elif stack.n_layers != len(fitters):
            raise DimMismatch(f"stack has {stack.n_layers} layers, expected {len(fitters)}")
        for n, frames in _layer_frames(stack):
            fitters[n].partial_fit(frames)
    if fitters is None:
        raise InsufficientData("empty feature stream")
    books = []
    for n, fitter in enumerate(fitters):
        centers = fitter.finalize()
        books.append(Codebook(n + 1, centers.astype(np.float32), seed, fitter.n_seen))
        empty = int((fitter.counts == 0).sum())
        if empty:
            logger.warning("layer %d: %d of %d clusters received no frames", n + 1, empty, k)
    return books


def iter_layer_stacks(utts, backend, batch_size=8):
    """Encode utterances in batches and yield one LayerStack each, without grad."""
    from .data import collate
    from .ssl_backend import encode

    with torch.no_grad():
        for start in range(0, len(utts), batch_size):
            yield from encode(collate(utts[start : start + batch_size]), backend)


def tokenize_stack(stack, codebooks):
    feats = stack.features
    if isinstance(feats, torch.Tensor):
        feats = feats.detach().cpu().numpy()
    by_layer = {cb.layer_index: cb for cb in codebooks}
    rows = []
    for n in range(feats.shape[0]):
        if n + 1 not in by_layer:
            raise MissingLayerCodebook(f"no codebook for layer {n + 1}")
        rows.append(assign(by_layer[n + 1], feats[n]))
    return np.stack(rows) if rows else np.zeros((0, 0), dtype=np.int64)


def tokenize_corpus(manifest, backend, codebooks, splits=None, batch_size=8):
    """Token IDs ``[N, T]`` for every utterance (optionally only some splits)."""
    n_layers = backend.spec.n_layers
    have = {cb.layer_index for cb in codebooks}
    missing = [n for n in range(1, n_layers + 1) if n not in have]
    if missing:
        raise MissingLayerCodebook(f"no codebook for layers {missing}")
    utts = [u for u in manifest.entries if splits is None or u.split in splits]
    out = {}
    for utt, stack in zip(utts, iter_layer_stacks(utts, backend, batch_size)):
        out[utt.id] = TokenSequence(utt.id, tokenize_stack(stack, codebooks))
    return out


def save_codebooks(codebooks, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for cb in codebooks:
            c = np.ascontiguousarray(cb.centroids, dtype="<f4")
            fh.write(_RECORD.pack(cb.layer_index, c.shape[0], c.shape[1], cb.seed))
            fh.write(c.tobytes())
    return path


def load_codebooks(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CorruptFile(f"{path}: bad magic")
    pos, books = 4, []
    while pos < len(blob):
        if pos + _RECORD.size > len(blob):
            raise CorruptFile(f"{path}: truncated record header at byte {pos}")
        layer, k, dim, seed = _RECORD.unpack_from(blob, pos)
        pos += _RECORD.size
        if layer < 1 or (books and layer <= books[-1].layer_index):
            raise CorruptFile(f"{path}: implausible layer index {layer} at byte {pos - _RECORD.size}")
        nbytes = 4 * k * dim
        if k < 1 or dim < 1 or pos + nbytes > len(blob):
            raise CorruptFile(f"{path}: layer {layer} declares {k}x{dim} centroids, data too short")
        centroids = np.frombuffer(blob, dtype="<f4", count=k * dim, offset=pos).reshape(k, dim)
        pos += nbytes
        books.append(Codebook(layer, centroids.astype(np.float32), seed))
    if not books:
        raise CorruptFile(f"{path}: no records")
    return books
