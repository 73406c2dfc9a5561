import math

import numpy as np
import pytest
import torch

from rfsr.dsp import MagPhaseTensor, StftConfig
from rfsr.errors import ConfigError, DataError, NumericError
from rfsr.model import (
    ModelConfig,
    SpectralViT,
    backward,
    count_parameters,
    infer_lines,
    load_checkpoint,
    positional_encoding,
    predict,
    save_checkpoint,
)


def tiny(**overrides):
    cfg = dict(dim=16, heads=2, enc_layers=1, dec_layers=1, n_frames=16, n_bins=16)
    return ModelConfig(**(cfg | overrides))


def test_default_grid():
    cfg = ModelConfig()
    assert (cfg.pad_t, cfg.pad_f) == (56, 264)
    assert cfg.grid == (7, 33)
    assert cfg.n_patches == 231
    assert cfg.patch_dim == 128


def test_presets():
    large = ModelConfig.preset("large")
    assert (large.dim, large.enc_layers, large.dec_layers, large.heads) == (768, 4, 2, 12)
    desk = ModelConfig.preset("desk", dim=32)
    assert (desk.dim, desk.heads) == (32, 4)
    with pytest.raises(ConfigError, match="preset"):
        ModelConfig.preset("huge")


def test_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(dim=18, heads=4)
    with pytest.raises(ConfigError, match="multiple of 4"):
        ModelConfig(dim=18, heads=2)


def test_fold_inverts_patchify():
    torch.manual_seed(0)
    model = SpectralViT(ModelConfig(dim=16, heads=2, enc_layers=1, dec_layers=1))
    cfg = model.cfg
    for _ in range(20):
        x = torch.randn(2, 2, cfg.pad_t, cfg.pad_f)
        assert torch.equal(model.fold(model.patchify(x)), x)


def test_fold_averages_overlapping_patches():
    torch.manual_seed(1)
    model = SpectralViT(tiny(stride_t=4, stride_f=4))
    x = torch.randn(1, 2, model.cfg.pad_t, model.cfg.pad_f, dtype=torch.float64)
    assert torch.allclose(model.fold(model.patchify(x)), x, atol=1e-12)


def test_positional_encoding_layout():
    pe = positional_encoding(3, 4, 16)
    assert pe.shape == (12, 16)
    assert pe.dtype == torch.float64
    # patches in the same time block share the time half
    assert torch.equal(pe[0, :8], pe[3, :8])
    assert not torch.equal(pe[0, 8:], pe[3, 8:])
    assert torch.equal(pe[0, 8:], pe[4, 8:])
    assert len({tuple(row.tolist()) for row in pe}) == 12


def test_encoding_similarity_decays_with_offset():
    grid_t, grid_f, dim = 5, 6, 64
    pe = positional_encoding(grid_t, grid_f, dim)
    time, freq = pe[:, : dim // 2], pe[:, dim // 2 :]
    along_t = [float(time[0] @ time[k * grid_f]) for k in range(4)]
    along_f = [float(freq[0] @ freq[k]) for k in range(4)]
    for dots in (along_t, along_f):
        assert dots[0] == pytest.approx(dim / 4)
        assert dots[0] > dots[1] > dots[2] > dots[3]


def test_forward_shape_and_ranges():
    torch.manual_seed(2)
    model = SpectralViT(ModelConfig(dim=16, heads=2, enc_layers=1, dec_layers=1))
    x = torch.randn(3, 2, 49, 257)
    out = model(x)
    assert out.shape == (3, 2, 49, 257)
    assert torch.all(out[:, 0] >= 0)
    assert torch.all(out[:, 1].abs() <= math.pi)


def test_transform_is_permutation_equivariant_without_positions():
    torch.manual_seed(3)
    model = SpectralViT(tiny(n_frames=32, n_bins=32)).double().eval()
    model.pos_embed.zero_()
    patches = torch.randn(1, model.cfg.n_patches, model.cfg.patch_dim, dtype=torch.float64)
    perm = torch.randperm(model.cfg.n_patches)
    with torch.no_grad():
        assert torch.allclose(
            model.transform_patches(patches[:, perm]), model.transform_patches(patches)[:, perm], atol=1e-10
        )


def _layer_norm(x, ln):
    mean = x.mean(-1, keepdim=True)
    var = ((x - mean) ** 2).mean(-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + ln.eps) * ln.weight + ln.bias


def _block(x, block):
    h = _layer_norm(x, block.norm1)
    qkv = h @ block.attn.qkv.weight.T + block.attn.qkv.bias
    d = x.shape[-1]
    q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
    heads = block.attn.heads
    dh = d // heads
    outs = []
    for i in range(heads):
        sl = slice(i * dh, (i + 1) * dh)
        scores = q[..., sl] @ k[..., sl].transpose(-2, -1) / math.sqrt(dh)
        weights = torch.exp(scores - scores.max(-1, keepdim=True).values)
        weights = weights / weights.sum(-1, keepdim=True)
        outs.append(weights @ v[..., sl])
    x = x + torch.cat(outs, -1) @ block.attn.proj.weight.T + block.attn.proj.bias
    h = _layer_norm(x, block.norm2)
    h = h @ block.mlp.fc1.weight.T + block.mlp.fc1.bias
    h = 0.5 * h * (1 + torch.erf(h / math.sqrt(2)))
    return x + h @ block.mlp.fc2.weight.T + block.mlp.fc2.bias


def reference_forward(model, x):
    cfg = model.cfg
    bn = model.norm
    shape = (1, 2, 1, 1)
    x = (x - bn.running_mean.view(shape)) / torch.sqrt(bn.running_var.view(shape) + bn.eps)
    x = x * bn.weight.view(shape) + bn.bias.view(shape)
    B, _, T, F = x.shape
    padded = torch.zeros(B, 2, cfg.pad_t, cfg.pad_f, dtype=x.dtype)
    padded[..., :T, :F] = x
    gt, gf = cfg.grid
    kt, kf = cfg.patch_t, cfg.patch_f
    tokens = padded.reshape(B, 2, gt, kt, gf, kf).permute(0, 2, 4, 1, 3, 5).reshape(B, gt * gf, 2 * kt * kf)
    h = tokens @ model.proj.weight.T + model.pos_embed
    for block in model.encoder:
        h = _block(h, block)
    h = _layer_norm(h, model.encoder_norm)
    for block in model.decoder:
        h = _block(h, block)
    h = _layer_norm(h, model.decoder_norm) @ model.recon.weight.T + model.recon.bias
    grid = h.reshape(B, gt, gf, 2, kt, kf).permute(0, 3, 1, 4, 2, 5).reshape(B, 2, gt * kt, gf * kf)
    grid = grid[..., :T, :F]
    mag = torch.nn.functional.softplus(grid[:, 0])
    phase = torch.atan2(torch.sin(grid[:, 1]), torch.cos(grid[:, 1]))
    return torch.stack([mag, phase], 1)


def test_forward_matches_reference():
    torch.manual_seed(4)
    model = SpectralViT(tiny(n_frames=20, n_bins=27)).double().eval()
    with torch.no_grad():
        model.norm.running_mean.uniform_(-1, 1)
        model.norm.running_var.uniform_(0.5, 2.0)
        model.norm.weight.uniform_(0.5, 1.5)
        model.recon.weight.normal_(0, 0.5)
        x = torch.randn(2, 2, 20, 27, dtype=torch.float64)
        assert torch.allclose(model(x), reference_forward(model, x), atol=1e-10)


def test_gradients_match_finite_differences():
    torch.manual_seed(5)
    model = SpectralViT(tiny()).double().train()
    x = torch.randn(2, 2, 16, 16, dtype=torch.float64)
    w = torch.randn(2, 2, 16, 16, dtype=torch.float64)

    def objective():
        return (model(x) * w).sum()

    model.zero_grad()
    backward(objective())
    h = 1e-4
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = objective().item()
                flat[i] = orig - h
                down = objective().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
        scale = max(numeric.abs().max().item(), 1e-6)
        assert (analytic - numeric).abs().max().item() / scale < 1e-4, name


def test_zeroed_head_blocks_upstream_gradients():
    torch.manual_seed(6)
    model = SpectralViT(tiny()).double()
    with torch.no_grad():
        model.recon.weight.zero_()
    backward(model(torch.randn(2, 2, 16, 16, dtype=torch.float64)).sum())
    for name, p in model.named_parameters():
        if not name.startswith("recon"):
            assert torch.count_nonzero(p.grad) == 0, name
    assert torch.count_nonzero(model.recon.bias.grad) > 0


def test_input_normalisation_statistics():
    torch.manual_seed(9)
    norm = SpectralViT(tiny()).train().norm
    out = norm(torch.randn(8, 2, 16, 16))
    for c in range(2):
        assert abs(out[:, c].mean().item()) < 0.05
        assert abs(out[:, c].std().item() - 1) < 0.05

    norm.reset_running_stats()
    mean, var = torch.zeros(2), torch.ones(2)
    for shift in (0.0, 3.0, -1.5):
        x = 2 * torch.randn(4, 2, 16, 16) + shift
        norm(x)
        mean = 0.9 * mean + 0.1 * x.mean(dim=(0, 2, 3))
        var = 0.9 * var + 0.1 * x.var(dim=(0, 2, 3))
    assert torch.allclose(norm.running_mean, mean, atol=1e-5)
    assert torch.allclose(norm.running_var, var, rtol=1e-5, atol=1e-5)


def test_repeated_backward_accumulates():
    torch.manual_seed(10)
    model = SpectralViT(tiny()).double()
    loss = model(torch.randn(2, 2, 16, 16, dtype=torch.float64)).pow(2).mean()
    backward(loss, retain_graph=True)
    first = {name: p.grad.clone() for name, p in model.named_parameters()}
    backward(loss)
    for name, p in model.named_parameters():
        assert torch.equal(p.grad, 2 * first[name]), name


def test_predict_leaves_model_state_alone():
    torch.manual_seed(7)
    model = SpectralViT(tiny()).train()
    before = model.norm.running_mean.clone()
    rng = np.random.default_rng(0)
    polar = MagPhaseTensor(rng.random((16, 16)), rng.uniform(-np.pi, np.pi, (16, 16)))
    out = predict(model, polar)
    assert out.mag.shape == (16, 16)
    assert model.training
    assert torch.equal(model.norm.running_mean, before)
    again = predict(model, polar)
    assert np.array_equal(out.mag, again.mag)


def test_non_finite_input_is_named():
    model = SpectralViT(tiny())
    x = torch.zeros(2, 2, 16, 16)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError, match="input"):
        model(x)


def test_backward_needs_a_graph():
    with pytest.raises(NumericError):
        backward(torch.tensor(1.0))


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(8)
    model = SpectralViT(tiny()).eval()
    with torch.no_grad():
        model.norm.running_mean.fill_(0.25)
    path = save_checkpoint(model, tmp_path / "m.rfck", {"epoch": 3})
    loaded, extra = load_checkpoint(path)
    assert extra == {"epoch": 3}
    assert loaded.cfg == model.cfg
    for (name, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert a.dtype == b.dtype, name
        assert torch.equal(a, b), name
    x = torch.randn(2, 2, 16, 16)
    assert torch.equal(model(x), loaded.eval()(x))
    assert save_checkpoint(loaded, tmp_path / "again.rfck", extra).read_bytes() == path.read_bytes()


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "bad.rfck"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_count_parameters():
    model = SpectralViT(tiny())
    assert count_parameters(model) == sum(p.numel() for p in model.parameters())
    assert count_parameters(SpectralViT(tiny(dim=32))) > count_parameters(model)


def test_infer_lines_shape_and_finiteness():
    torch.manual_seed(9)
    stft_cfg = StftConfig()
    model = SpectralViT(ModelConfig(dim=16, heads=2, enc_layers=1, dec_layers=1))
    lines = np.random.default_rng(1).standard_normal((3, 1536))
    out = infer_lines(model, lines, stft_cfg, batch_size=2)
    assert out.shape == (3, 1536)
    assert np.all(np.isfinite(out))
    assert np.array_equal(out, infer_lines(model, lines, stft_cfg, batch_size=2))


def test_infer_lines_rejects_other_lengths():
    model = SpectralViT(ModelConfig(dim=16, heads=2, enc_layers=1, dec_layers=1))
    with pytest.raises(DataError, match="checkpoint expects"):
        infer_lines(model, np.zeros((1, 1000)), StftConfig())
