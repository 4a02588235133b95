import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from distilmos.cca import (
    CcaCurve,
    analyze,
    canonical_correlations,
    cca_similarity,
    format_curves,
    pooled_layer_reps,
    pooled_model_reps,
    pooled_reps,
)
from distilmos.data import Utterance, generate_synthetic_corpus
from distilmos.errors import DegenerateInput, IncompatibleCheckpoint, RankDeficient
from distilmos.model import DistilMOS, ModelConfig, save_checkpoint
from distilmos.ssl_backend import BackendSpec, synthetic_backend


def generalized_eig_cca(X, Y):
    """Canonical correlations as the top eigenvalues of the symmetric-definite pencil."""
    Xc, Yc = X - X.mean(0), Y - Y.mean(0)
    n = len(X) - 1
    cxx, cyy, cxy = Xc.T @ Xc / n, Yc.T @ Yc / n, Xc.T @ Yc / n
    d1, d2 = X.shape[1], Y.shape[1]
    A = np.zeros((d1 + d2, d1 + d2))
    A[:d1, d1:], A[d1:, :d1] = cxy, cxy.T
    B = scipy.linalg.block_diag(cxx, cyy)
    vals = scipy.linalg.eigh(A, B, eigvals_only=True)
    return np.sort(vals)[::-1][: min(d1, d2)]


def test_self_similarity(rng):
    X = rng.standard_normal((50, 6))
    assert abs(cca_similarity(X, X) - 1.0) < 1e-6
    assert abs(cca_similarity(X, X, summary="top1") - 1.0) < 1e-6


def test_affine_invariance(rng):
    X = rng.standard_normal((60, 5))
    R = rng.standard_normal((5, 5)) + 3 * np.eye(5)
    assert abs(cca_similarity(X, X @ R + rng.standard_normal(5)) - 1.0) < 1e-6
    Y = rng.standard_normal((60, 4))
    scale = rng.uniform(0.1, 10, 5)
    assert abs(cca_similarity(X * scale + 7, Y) - cca_similarity(X, Y)) < 1e-4


def test_independent_random_matches_eigen_oracle():
    rng = np.random.default_rng(7)
    X, Y = rng.standard_normal((2000, 4)), rng.standard_normal((2000, 3))
    rho = canonical_correlations(X, Y)
    np.testing.assert_allclose(rho, generalized_eig_cca(X, Y), atol=1e-9)
    value = cca_similarity(X, Y)
    assert value == pytest.approx(generalized_eig_cca(X, Y).mean(), abs=1e-9)
    # U >> d: each correlation is of order sqrt(d/U)
    assert value < 0.1


@pytest.mark.parametrize("seed", range(5))
def test_related_data_matches_eigen_oracle(seed):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((80, 3))
    X = np.hstack([Z, rng.standard_normal((80, 2))]) @ rng.standard_normal((5, 5))
    Y = Z @ rng.standard_normal((3, 4)) + 0.5 * rng.standard_normal((80, 4))
    np.testing.assert_allclose(canonical_correlations(X, Y), generalized_eig_cca(X, Y), atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 40), st.integers(1, 6), st.integers(1, 6))
def test_range_and_symmetry(seed, u, d1, d2):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((u, d1)), rng.standard_normal((u, d2))
    a, b = cca_similarity(X, Y), cca_similarity(Y, X)
    assert 0.0 <= a <= 1 + 1e-9
    assert abs(a - b) < 1e-9
    assert cca_similarity(X, Y) == a


def test_small_sample_engages_ridge(rng):
    X, Y = rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
    rho = canonical_correlations(X, Y)
    assert np.isfinite(rho).all() and len(rho) == 8
    with pytest.raises(RankDeficient):
        canonical_correlations(X, Y, ridge=False)


def test_errors(rng):
    with pytest.raises(DegenerateInput):
        cca_similarity(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)))
    X = rng.standard_normal((10, 2))
    X[0, 0] = np.nan
    with pytest.raises(DegenerateInput):
        cca_similarity(X, X)


def _utt(uid, wave):
    return Utterance(uid, f"waveforms.f32#{uid}", "s", 3.0, "test", waveform=wave.astype(np.float32))


def test_pooled_reps_shape_and_padding():
    backend = synthetic_backend(BackendSpec(n_layers=3, dim=4), seed=0)
    rng = np.random.default_rng(0)
    utts = [_utt(f"u{i}", rng.standard_normal(320 * (3 + i))) for i in range(5)]
    reps = pooled_reps(backend, utts)
    assert reps.shape == (3, 5, 4)
    # batching with longer utterances pads the short one; its row must not change
    alone = pooled_layer_reps(backend, utts[:1])
    np.testing.assert_allclose(reps[:, 0], alone[:, 0], atol=1e-6)
    model = DistilMOS(ModelConfig(3, 4, hidden_dim=6, head_mode="none")).eval()
    assert pooled_reps(model, utts, backend=backend).shape == (5, 6)


def test_pooled_constant_features():
    class Constant(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.spec = BackendSpec(n_layers=2, dim=3)

        def forward(self, waveforms, lengths):
            n = torch.as_tensor(lengths) // 320
            t = int(n.max())
            feats = torch.tensor([1.0, -2.0, 0.5]).expand(len(n), 2, t, 3).clone()
            pad = torch.arange(t)[None, :] >= n[:, None]
            feats[pad[:, None, :, None].expand_as(feats)] = 99.0  # garbage padding
            return feats, n

    utts = [_utt("a", np.ones(640)), _utt("b", np.ones(3200))]
    reps = pooled_layer_reps(Constant(), utts)
    np.testing.assert_allclose(reps, np.broadcast_to([1.0, -2.0, 0.5], (2, 2, 3)))


def test_backend_self_cca_diagonal():
    backend = synthetic_backend(BackendSpec(n_layers=3, dim=6), seed=0)
    corpus = generate_synthetic_corpus(30, 1)
    corpus.load_audio()
    reps = pooled_layer_reps(backend, corpus.entries)
    for n in range(3):
        assert abs(cca_similarity(reps[n], reps[n]) - 1.0) < 1e-6


@pytest.fixture(scope="module")
def cca_setup(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cca")
    spec = BackendSpec(n_layers=3, dim=6)
    backend = synthetic_backend(spec, seed=0)
    corpus = generate_synthetic_corpus(40, 2)
    for u in corpus.entries:
        u.split = "test"
    paths = {}
    for i, mode in enumerate(("token_prediction", "none")):
        torch.manual_seed(i)
        model = DistilMOS(ModelConfig(3, 6, hidden_dim=5, n_clusters=4, head_mode=mode))
        paths["distilmos" if i == 0 else "w/o token prediction"] = save_checkpoint(tmp / f"{mode}.pt", model, backend)
    return backend, corpus, paths, tmp


def test_analyze_curves(cca_setup):
    backend, corpus, paths, _ = cca_setup
    curves = analyze(paths, backend, corpus, ssl_mos_checkpoint=paths["distilmos"])
    assert [c.model_tag for c in curves] == ["distilmos", "w/o token prediction", "random-init", "ssl-mos-style"]
    for c in curves:
        assert c.values.shape == (3,)
        assert np.isfinite(c.values).all() and (c.values >= 0).all() and (c.values <= 1 + 1e-9).all()
    # untouched backend: the final-layer curve hits 1 on the last layer
    assert abs(curves[-1].values[-1] - 1.0) < 1e-6
    again = analyze(paths, backend, corpus, ssl_mos_checkpoint=paths["distilmos"])
    for a, b in zip(curves, again):
        assert np.array_equal(a.values, b.values)
    table = format_curves(curves)
    lines = table.splitlines()
    assert lines[0] == "layer|distilmos|w/o token prediction|random-init|ssl-mos-style"
    assert len(lines) == 4 and lines[1].startswith("1|")


def test_analyze_incompatible(cca_setup):
    _, corpus, paths, _ = cca_setup
    other = synthetic_backend(BackendSpec(n_layers=4, dim=6))
    with pytest.raises(IncompatibleCheckpoint):
        analyze(paths, other, corpus)


def test_format_empty():
    assert format_curves([]) == "layer\n"
    assert format_curves([CcaCurve("a", np.array([0.5]))]) == "layer|a\n1|0.500000\n"
