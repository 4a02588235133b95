import time

import numpy as np
import pytest
import torch

from distilmos.data import collate, generate_synthetic_corpus
from distilmos.errors import AllFramesMasked, ShapeMismatch, WrongHeadMode
from distilmos.losses import compute_losses
from distilmos.model import (
    CNNBLSTM,
    DistilMOS,
    FeatureProcessor,
    LayerPredictors,
    MaskedBatchNorm1d,
    ModelConfig,
    MOSHead,
    layer_weighted_sum,
    load_checkpoint,
    run_batch,
    save_checkpoint,
)
from distilmos.ssl_backend import LayerStack


def full_mask(b, t):
    return torch.ones(b, t, dtype=torch.bool)


def tiny(head_mode="token_prediction", dtype=torch.float32, seed=0, **kw):
    torch.manual_seed(seed)
    cfg = ModelConfig(n_layers=kw.pop("n_layers", 4), ssl_dim=kw.pop("ssl_dim", 8), hidden_dim=kw.pop("hidden_dim", 16),
                      n_clusters=kw.pop("n_clusters", 8), head_mode=head_mode, **kw)
    return DistilMOS(cfg).to(dtype)


# layer-weighted sum

def test_weighted_sum_identical_layers():
    layer = torch.randn(6, 5)
    stack = layer.expand(3, 6, 5)
    out = layer_weighted_sum(stack, torch.tensor([0.3, -2.0, 5.0]))
    torch.testing.assert_close(out, layer)


def test_weighted_sum_saturates():
    stack = torch.randn(4, 6, 5, dtype=torch.float64)
    out = layer_weighted_sum(stack, torch.tensor([0.0, 60.0, 0.0, 0.0], dtype=torch.float64))
    assert (out - stack[1]).abs().max() < 1e-4


def test_weighted_sum_uniform_is_mean(rng):
    raw = rng.standard_normal((3, 7, 4))
    out = layer_weighted_sum(LayerStack(torch.from_numpy(raw), 50.0, torch.ones(7, dtype=torch.bool)), torch.zeros(3, dtype=torch.float64))
    direct = (raw[0] + raw[1] + raw[2]) / 3.0
    assert np.abs(out.numpy() - direct).max() < 1e-6


def test_weighted_sum_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        layer_weighted_sum(torch.randn(3, 4, 2), torch.zeros(2))


# feature processor

def test_feature_processor_t1():
    fp = FeatureProcessor(8, 16)
    assert fp(torch.randn(2, 1, 8), full_mask(2, 1)).shape == (2, 1, 16)
    fp = FeatureProcessor(8, 16)
    assert fp(torch.randn(2, 9, 8), full_mask(2, 9)).shape == (2, 9, 16)


def test_feature_processor_eval_deterministic():
    fp = FeatureProcessor(8, 16).eval()
    x = torch.randn(3, 10, 8)
    torch.testing.assert_close(fp(x, full_mask(3, 10)), fp(x, full_mask(3, 10)), rtol=0, atol=0)


def test_masked_batchnorm_moments(rng):
    bn = MaskedBatchNorm1d(5).double().train()
    x = torch.from_numpy(rng.normal(3.0, 2.0, (4, 12, 5)))
    mask = torch.ones(4, 12, dtype=torch.bool)
    mask[1, 7:] = False
    mask[3, 2:] = False
    x[~mask] = 1e3  # padding garbage must not enter the moments
    y = bn.normalize(x, mask)[mask].numpy()
    assert np.abs(y.mean(axis=0)).max() < 1e-4
    assert np.abs(y.var(axis=0) - 1.0).max() < 1e-4
    # running stats track the unmasked moments
    valid = x[mask].numpy()
    np.testing.assert_allclose(bn.running_mean.numpy(), 0.1 * valid.mean(axis=0), rtol=1e-10)


def test_batchnorm_eval_uses_running_stats():
    bn = MaskedBatchNorm1d(3).eval()
    x = torch.randn(2, 4, 3)
    torch.testing.assert_close(bn.normalize(x, full_mask(2, 4)), x / np.sqrt(1 + 1e-5))


# CNN-BLSTM

@pytest.mark.parametrize("t", [1, 7, 50])
def test_cnn_blstm_shape(t):
    assert CNNBLSTM(16)(torch.randn(2, t, 16), full_mask(2, t)).shape == (2, t, 16)


def test_cnn_blstm_layer_norm_stats():
    torch.manual_seed(0)
    block = CNNBLSTM(16).double()
    x = torch.randn(2, 9, 16, dtype=torch.float64)
    mask = full_mask(2, 9)
    with torch.no_grad():
        block.norm.weight.fill_(1.0)
        block.norm.bias.zero_()
        y = block(x, mask)
    assert y.mean(dim=-1).abs().max() < 1e-4
    assert (y.var(dim=-1, unbiased=False) - 1).abs().max() < 1e-3  # layer-norm eps 1e-5


def test_cnn_blstm_is_not_time_symmetric():
    torch.manual_seed(3)
    block = CNNBLSTM(16).double().eval()
    with torch.no_grad():
        block.conv.weight.zero_()
        block.conv.weight[:, :, 1] = torch.eye(16)
    x = torch.randn(1, 12, 16, dtype=torch.float64)
    mask = full_mask(1, 12)
    with torch.no_grad():
        forward = block(x, mask)
        reverse = block(x.flip(1), mask).flip(1)
    assert (forward - reverse).abs().max() > 1e-3


def test_cnn_blstm_ignores_padding():
    torch.manual_seed(0)
    block = CNNBLSTM(16).eval()
    x = torch.randn(1, 10, 16)
    mask = full_mask(1, 10)
    mask[0, 6:] = False
    noisy = x.clone()
    noisy[0, 6:] = 100.0
    with torch.no_grad():
        torch.testing.assert_close(block(x, mask)[0, :6], block(noisy, mask)[0, :6])
        torch.testing.assert_close(block(x, mask)[0, :6], block(x[:, :6], mask[:, :6])[0])


# MOS head

def test_mos_head_constant_independent_of_t():
    head = MOSHead(16)
    c = torch.randn(16)
    a = head(c.expand(1, 3, 16), full_mask(1, 3))
    b = head(c.expand(1, 40, 16), full_mask(1, 40))
    torch.testing.assert_close(a, b)


def test_mos_head_mask():
    head = MOSHead(16)
    x = torch.randn(1, 5, 16)
    padded = torch.cat([x, torch.full((1, 4, 16), 7.0)], dim=1)
    mask = torch.tensor([[True] * 5 + [False] * 4])
    torch.testing.assert_close(head(padded, mask), head(x, full_mask(1, 5)))


def test_mos_head_zero_weights():
    head = MOSHead(16)
    with torch.no_grad():
        head.linear.weight.zero_()
        head.linear.bias.fill_(3.25)
    assert head(torch.randn(2, 4, 16), full_mask(2, 4)).tolist() == [3.25, 3.25]


def test_mos_head_all_masked():
    with pytest.raises(AllFramesMasked):
        MOSHead(4)(torch.randn(1, 3, 4), torch.zeros(1, 3, dtype=torch.bool))


# token predictors

def test_predictor_shape():
    assert LayerPredictors(4, 16, 16)(torch.randn(1, 10, 16)).shape == (1, 4, 10, 16)


def test_predictor_zero_final_layer_uniform():
    pred = LayerPredictors(2, 16, 16)
    for head in pred.heads:
        with torch.no_grad():
            head[-1].weight.zero_()
            head[-1].bias.zero_()
    p = torch.softmax(pred(torch.randn(1, 5, 16)), dim=-1)
    torch.testing.assert_close(p, torch.full_like(p, 1 / 16))


def test_predictors_independent():
    torch.manual_seed(0)
    out = LayerPredictors(2, 16, 16)(torch.randn(1, 5, 16))
    assert not torch.allclose(out[:, 0], out[:, 1])


def test_token_logits_wrong_mode():
    model = tiny("none")
    with pytest.raises(WrongHeadMode):
        model.token_logits(torch.randn(1, 3, 16))


# full forward

def test_forward_inference_mode():
    model = tiny()
    out = model(torch.randn(2, 4, 6, 8), full_mask(2, 6), inference=True)
    assert out.mos_pred.shape == (2,) and out.fp_features.shape == (2, 6, 16)
    assert out.token_logits is None and out.embed_preds is None


def test_forward_modes():
    x, mask = torch.randn(2, 4, 6, 8), full_mask(2, 6)
    out = tiny("token_prediction")(x, mask)
    assert out.token_logits.shape == (2, 4, 6, 8) and out.embed_preds is None
    out = tiny("none")(x, mask)
    assert out.token_logits is None and out.embed_preds is None
    out = tiny("mse_distillation")(x, mask)
    assert out.embed_preds.shape == (2, 4, 6, 8) and out.token_logits is None


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        tiny()(torch.randn(1, 3, 6, 8), full_mask(1, 6))


def test_inference_parameter_count_equal_across_modes():
    counts = {m: DistilMOS(ModelConfig(13, 768, n_clusters=200, head_mode=m)).inference_parameter_count()
              for m in ("token_prediction", "none", "mse_distillation")}
    assert len(set(counts.values())) == 1
    full = DistilMOS(ModelConfig(13, 768, head_mode="token_prediction"))
    mlp = 2 * (256 * 256 + 256) + 256 * 200 + 200
    assert sum(p.numel() for p in full.parameters()) == counts["none"] + 13 * mlp


def test_inference_weights_shared_across_modes():
    a = tiny("token_prediction", seed=4)
    b = tiny("none", seed=4)
    sb = b.state_dict()
    for k, v in a.state_dict().items():
        if not k.startswith("aux."):
            assert torch.equal(v, sb[k]), k


def test_layer_weights_sum_to_one():
    model = tiny()
    with torch.no_grad():
        model.layer_logits.copy_(torch.tensor([3.0, -1.0, 0.5, 9.0]))
    assert abs(float(model.layer_weights().sum().detach()) - 1.0) < 1e-6


# gradient check

def _loss(model, x, mask, mos, tokens):
    out = model(x, mask)
    return compute_losses(out, mos, 0.1, token_targets=tokens).total


def test_finite_difference_gradients():
    start = time.time()
    model = tiny(n_layers=2, ssl_dim=8, hidden_dim=16, n_clusters=8, dtype=torch.float64, seed=11).train()
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(3, 2, 5, 8, generator=gen, dtype=torch.float64)
    mask = full_mask(3, 5)
    mask[2, 3:] = False
    mos = torch.tensor([1.5, 3.0, 4.2], dtype=torch.float64)
    tokens = torch.randint(0, 8, (3, 2, 5), generator=gen)

    # batch-norm running stats move each forward but never affect train-mode outputs
    model.zero_grad()
    _loss(model, x, mask, mos, tokens).backward()
    grads = {n: p.grad.clone() for n, p in model.named_parameters()}
    params = dict(model.named_parameters())
    h = 1e-6
    rng = np.random.default_rng(0)

    def numeric(p, direction):
        with torch.no_grad():
            p.add_(h * direction)
            up = float(_loss(model, x, mask, mos, tokens))
            p.sub_(2 * h * direction)
            down = float(_loss(model, x, mask, mos, tokens))
            p.add_(h * direction)
        return (up - down) / (2 * h)

    worst = 0.0
    for name, p in params.items():
        # directional derivative over the whole group
        d = torch.from_numpy(rng.standard_normal(p.shape))
        analytic = float((grads[name] * d).sum())
        num = numeric(p, d)
        worst = max(worst, abs(analytic - num) / max(abs(analytic), abs(num), 1e-6))
        # a few single entries
        flat = p.view(-1)
        for idx in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
            e = torch.zeros_like(flat)
            e[idx] = 1.0
            a = float(grads[name].view(-1)[idx])
            num = numeric(p, e.view(p.shape))
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    assert worst <= 1e-3, worst
    assert time.time() - start < 60


# masking end to end

def test_padding_samples_do_not_change_prediction(small_backend):
    corpus = generate_synthetic_corpus(4, 2)
    corpus.load_audio()
    batch = collate(corpus.entries)
    torch.manual_seed(0)
    model = DistilMOS(ModelConfig(4, 32, hidden_dim=16, n_clusters=8)).train()
    short = int(np.argmin(batch.lengths))
    assert batch.lengths[short] < batch.waveforms.shape[1]
    out1, _ = run_batch(model, small_backend, batch)
    noisy = batch.waveforms.copy()
    noisy[short, batch.lengths[short]:] = np.random.default_rng(0).normal(0, 5, noisy.shape[1] - batch.lengths[short])
    batch.waveforms = noisy
    out2, _ = run_batch(model, small_backend, batch)
    assert (out1.mos_pred - out2.mos_pred).abs().max() < 1e-5
    model.eval()
    with torch.no_grad():
        out3, _ = run_batch(model, small_backend, batch)
        batch.waveforms = np.zeros_like(noisy) + np.where(np.arange(noisy.shape[1])[None] < batch.lengths[:, None], noisy, 0)
        out4, _ = run_batch(model, small_backend, batch)
    assert (out3.mos_pred - out4.mos_pred).abs().max() < 1e-5


# checkpoints

@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_checkpoint_round_trip(tmp_path, small_backend, dtype):
    model = tiny("token_prediction", dtype=dtype, ssl_dim=32)
    small_backend.to(dtype)
    save_checkpoint(tmp_path / "m.pt", model, small_backend, "abc", step=3)
    back, backend, payload = load_checkpoint(tmp_path / "m.pt", codebook_sha256="abc")
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    for v, v2 in zip(small_backend.state_dict().values(), backend.state_dict().values()):
        assert torch.equal(v, v2)
    assert payload["meta"]["step"] == 3
    inf, _, _ = load_checkpoint(tmp_path / "m.pt", inference_only=True)
    assert inf.aux is None


def test_checkpoint_codebook_guard(tmp_path, small_backend):
    from distilmos.errors import IncompatibleCheckpoint

    save_checkpoint(tmp_path / "m.pt", tiny(ssl_dim=32), small_backend, "abc")
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(tmp_path / "m.pt", codebook_sha256="other")
    torch.save({"x": 1}, tmp_path / "junk.pt")
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(tmp_path / "junk.pt")
