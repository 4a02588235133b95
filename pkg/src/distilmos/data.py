"""Corpus manifests, a synthetic stand-in corpus, and padded batching.

A manifest is a ``|``-delimited text file::

    id|audio_path|system_id|mos|split
    sys1_0001|wav/sys1_0001.wav|sys1|3.125|train

``audio_path`` is resolved relative to the manifest's directory. Paths of the
form ``waveforms.f32#<id>`` point into a float32 sidecar written by
:func:`save_manifest` (used for synthetic corpora, which have no wav files).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DataError,
    DuplicateId,
    EmptyBatch,
    InvalidCount,
    MalformedRow,
    MissingFile,
)

HEADER = "id|audio_path|system_id|mos|split"
SPLITS = ("train", "valid", "test")
MOS_MIN, MOS_MAX = 1.0, 5.0
SIDECAR_DATA = "waveforms.f32"
SIDECAR_INDEX = "waveforms.idx"


@dataclasses.dataclass
class Utterance:
    id: str
    audio_path: str
    system_id: str
    mos: float
    split: str
    waveform: Optional[np.ndarray] = dataclasses.field(default=None, repr=False, compare=False)


@dataclasses.dataclass
class CorpusManifest:
    name: str
    entries: list
    sample_rate: int = 16000
    root: Optional[Path] = dataclasses.field(default=None, compare=False)

    def split(self, name):
        return [u for u in self.entries if u.split == name]

    def by_id(self):
        return {u.id: u for u in self.entries}

    def load_audio(self):
        """Populate ``waveform`` on every entry that does not have one yet."""
        cache = {}
        for utt in self.entries:
            if utt.waveform is None:
                utt.waveform = _read_audio(utt.audio_path, self.root, self.sample_rate, cache)
        return self


@dataclasses.dataclass
class PaddedBatch:
    waveforms: np.ndarray  # [B, T_max] float32
    lengths: np.ndarray  # [B] int64
    mos: np.ndarray  # [B] float32
    mask: np.ndarray  # [B, T_max] bool
    ids: list = dataclasses.field(default_factory=list)
    system_ids: list = dataclasses.field(default_factory=list)

    def __len__(self):
        return len(self.lengths)


def _check_utterance(utt, seen):
    if not (MOS_MIN <= utt.mos <= MOS_MAX):
        raise ValueError(f"mos {utt.mos} outside [{MOS_MIN}, {MOS_MAX}]")
    if utt.split not in SPLITS:
        raise ValueError(f"unknown split {utt.split!r}")
    if not utt.id:
        raise ValueError("empty id")
    if utt.id in seen:
        raise DuplicateId(f"duplicate utterance id {utt.id!r}")


def load_manifest(path, sample_rate=16000):
    """Parse and validate a manifest file.

    Raises :class:`MissingFile`, :class:`MalformedRow` (with the 1-based line
    number) or :class:`DuplicateId`. Audio is not read until
    :meth:`CorpusManifest.load_audio` is called.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise MalformedRow(1, f"expected header {HEADER!r}")

    entries, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("|")
        if len(fields) != 5:
            raise MalformedRow(lineno, f"expected 5 fields, got {len(fields)}")
        uid, audio_path, system_id, mos, split = (f.strip() for f in fields)
        try:
            utt = Utterance(uid, audio_path, system_id, float(mos), split)
            _check_utterance(utt, seen)
        except DuplicateId:
            raise
        except ValueError as exc:
            raise MalformedRow(lineno, str(exc)) from None
        seen.add(uid)
        entries.append(utt)
    # a bare "manifest.txt" is named after its corpus directory
    name = path.parent.resolve().name if path.stem == "manifest" else path.stem
    return CorpusManifest(name, entries, sample_rate, root=path.parent)


def save_manifest(manifest, directory, filename="manifest.txt"):
    """Write the manifest, plus a float32 sidecar for in-memory waveforms.

    Output is a pure function of the manifest contents, so two identical
    manifests serialize to identical bytes.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    inline = [u for u in manifest.entries if u.waveform is not None]
    if inline:
        offset = 0
        with open(directory / SIDECAR_DATA, "wb") as data, open(
            directory / SIDECAR_INDEX, "w", encoding="utf-8"
        ) as index:
            for utt in inline:
                wav = np.asarray(utt.waveform, dtype="<f4")
                data.write(wav.tobytes())
                index.write(f"{utt.id}\t{offset}\t{len(wav)}\n")
                offset += len(wav)
    lines = [HEADER]
    for utt in manifest.entries:
        audio_path = f"{SIDECAR_DATA}#{utt.id}" if utt.waveform is not None else utt.audio_path
        lines.append(f"{utt.id}|{audio_path}|{utt.system_id}|{utt.mos!r}|{utt.split}")
    out = directory / filename
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def _read_sidecar_index(path):
    index = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            uid, offset, length = line.rstrip("\n").split("\t")
            index[uid] = (int(offset), int(length))
    return index


def _read_audio(audio_path, root, sample_rate, cache):
    root = Path(root) if root is not None else Path(".")
    if "#" in audio_path:
        data_name, uid = audio_path.split("#", 1)
        data_path = root / data_name
        if data_path not in cache:
            idx_path = data_path.with_suffix(".idx")
            if not data_path.is_file() or not idx_path.is_file():
                raise MissingFile(f"sidecar missing: {data_path}")
            cache[data_path] = (np.fromfile(data_path, dtype="<f4"), _read_sidecar_index(idx_path))
        samples, index = cache[data_path]
        if uid not in index:
            raise DataError(f"{uid!r} not in sidecar index {data_path}")
        offset, length = index[uid]
        return samples[offset:offset + length].astype(np.float32)

    from scipy.io import wavfile

    path = root / audio_path
    if not path.is_file():
        raise MissingFile(f"audio not found: {path}")
    rate, wav = wavfile.read(path)
    if rate != sample_rate:
        raise DataError(f"{path}: sample rate {rate} != manifest rate {sample_rate}")
    if wav.ndim > 1:
        wav = wav.mean(axis=1)
    if np.issubdtype(wav.dtype, np.integer):
        wav = wav / float(np.iinfo(wav.dtype).max)
    return np.asarray(wav, dtype=np.float32)


def _tone(rng, n, sample_rate):
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(100.0, 300.0)
    sig = np.zeros(n)
    for h, amp in enumerate((1.0, 0.5, 0.25), start=1):
        sig += amp * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi))
    # slow amplitude modulation so frames are not all alike
    sig *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t)
    return sig / np.sqrt(np.mean(sig**2))


def generate_synthetic_corpus(n_utts, seed, sample_rate=16000, min_dur=0.3, max_dur=0.6):
    """Tone-plus-noise corpus whose MOS is ``5 - 4 * corruption``.

    Each system has a base corruption level evenly spaced in ``[0, 1]``;
    system ``sys00`` is clean (corruption exactly 0, MOS 5.0) and the last
    system is pure noise (MOS 1.0). Other utterances jitter around their
    system level. Waveforms are ``sqrt(1-c) * tone + sqrt(c) * noise``, both
    at unit RMS, so loudness carries no information about quality.
    """
    if n_utts < 3:
        raise InvalidCount(f"n_utts must be >= 3, got {n_utts}")
    rng = np.random.default_rng(seed)
    n_systems = int(np.clip(n_utts // 6, 2, 10))
    levels = np.linspace(0.0, 1.0, n_systems)

    order = rng.permutation(n_utts)
    n_valid = max(1, round(0.15 * n_utts))
    n_test = max(1, round(0.15 * n_utts))
    split_of = {}
    for rank, i in enumerate(order):
        split_of[i] = "valid" if rank < n_valid else "test" if rank < n_valid + n_test else "train"

    entries = []
    for i in range(n_utts):
        sys_idx = i % n_systems
        level = levels[sys_idx]
        if 0 < sys_idx < n_systems - 1:
            corruption = float(np.clip(level + rng.normal(0.0, 0.05), 0.0, 1.0))
        else:
            corruption = float(level)
        n = int(rng.integers(int(min_dur * sample_rate), int(max_dur * sample_rate) + 1))
        noise = rng.standard_normal(n)
        noise /= np.sqrt(np.mean(noise**2))
        wav = 0.3 * (np.sqrt(1.0 - corruption) * _tone(rng, n, sample_rate) + np.sqrt(corruption) * noise)
        uid = f"utt{i:04d}"
        entries.append(
            Utterance(
                id=uid,
                audio_path=f"{SIDECAR_DATA}#{uid}",
                system_id=f"sys{sys_idx:02d}",
                mos=5.0 - 4.0 * corruption,
                split=split_of[i],
                waveform=wav.astype(np.float32),
            )
        )
    return CorpusManifest(f"synthetic-{n_utts}-{seed}", entries, sample_rate)


def corruption_of(mos):
    """Inverse of the synthetic MOS mapping."""
    return (5.0 - np.asarray(mos)) / 4.0


def collate(utts: Sequence[Utterance]) -> PaddedBatch:
    """Zero-pad waveforms to the longest item and build the validity mask."""
    if not utts:
        raise EmptyBatch("cannot collate an empty list")
    for u in utts:
        if u.waveform is None:
            raise DataError(f"{u.id}: waveform not loaded")
    lengths = np.array([len(u.waveform) for u in utts], dtype=np.int64)
    t_max = int(lengths.max())
    waveforms = np.zeros((len(utts), t_max), dtype=np.float32)
    for b, u in enumerate(utts):
        waveforms[b, : lengths[b]] = u.waveform
    mask = np.arange(t_max)[None, :] < lengths[:, None]
    return PaddedBatch(
        waveforms=waveforms,
        lengths=lengths,
        mos=np.array([u.mos for u in utts], dtype=np.float32),
        mask=mask,
        ids=[u.id for u in utts],
        system_ids=[u.system_id for u in utts],
    )


def iter_batches(utts, batch_size):
    for start in range(0, len(utts), batch_size):
        yield collate(utts[start:start + batch_size])


def file_sha256(path):
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


__all__ = [
    "HEADER",
    "SPLITS",
    "Utterance",
    "CorpusManifest",
    "PaddedBatch",
    "load_manifest",
    "save_manifest",
    "generate_synthetic_corpus",
    "corruption_of",
    "collate",
    "iter_batches",
    "file_sha256",
]
