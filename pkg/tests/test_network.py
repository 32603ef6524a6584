import numpy as np
import pytest
import torch

from patchpcc.network import (
    CheckpointError,
    ModelConfig,
    PatchAutoencoder,
    SetAbstractionPerPoint,
    decoder_forward,
    encoder_forward,
    init_params,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from patchpcc.entropy import build_coding_tables

from gradcheck import PatternRecorder, check_gradients


@pytest.fixture(scope="module")
def model():
    return init_params(ModelConfig(K=256, k=128, d=16), seed=3)


def test_init_deterministic():
    a = init_params(ModelConfig(K=64, k=32, d=8), seed=11).state_dict()
    b = init_params(ModelConfig(K=64, k=32, d=8), seed=11).state_dict()
    c = init_params(ModelConfig(K=64, k=32, d=8), seed=12).state_dict()
    assert all(torch.equal(a[n], b[n]) for n in a)
    assert not all(torch.equal(a[n], c[n]) for n in a)


def test_init_shapes_and_bounds(model):
    assert tuple(model.decoder.fc[0].weight.shape) == (128, 16)
    for m in model.modules():
        if isinstance(m, torch.nn.Linear):
            fan_out, fan_in = m.weight.shape
            bound = (6 / (fan_in + fan_out)) ** 0.5
            assert m.weight.abs().max() <= bound
            assert torch.all(m.bias == 0)


def test_parameter_count_closed_form(model):
    sa = (3 * 32 + 32) + (32 * 64 + 64) + (64 * 128 + 128)
    pn = (128 * 64 + 64) + (64 * 32 + 32) + (32 * 16 + 16)
    dec = (16 * 128 + 128) + (128 * 256 + 256) + (256 * 384 + 384)
    entropy = 16 * ((3 + 9 + 9 + 3) + (3 + 3 + 3 + 1) + (3 + 3 + 3))
    assert parameter_count(model) == sa + pn + dec + entropy == 156000


def test_encoder_output_and_permutation(model, rng):
    patch = rng.normal(scale=5, size=(256, 3))
    z = encoder_forward(patch, model)
    assert z.shape == (16,)
    perm = rng.permutation(256)
    torch.testing.assert_close(encoder_forward(patch[perm], model), z, rtol=0, atol=1e-5)


def test_encoder_zero_patch_deterministic(model):
    zero = np.zeros((256, 3))
    assert torch.equal(encoder_forward(zero, model), encoder_forward(zero, model))


def test_encoder_shape_mismatch(model):
    with pytest.raises(ValueError):
        encoder_forward(np.zeros((255, 3)), model)


def test_decoder_shape_zero_and_layout(model):
    out = decoder_forward(torch.randn(16), model)
    assert out.shape == (128, 3)
    assert torch.all(decoder_forward(torch.zeros(16), model) == 0)
    z = torch.randn(1, 16)
    flat = model.decoder.fc(z)[0]
    pts = model.decoder(z)[0]
    for j in (0, 5, 127):
        assert torch.equal(pts[j], flat[3 * j:3 * j + 3])
    with pytest.raises(ValueError):
        decoder_forward(torch.zeros(8), model)


def test_sa_grouping_includes_self(rng):
    sa = SetAbstractionPerPoint(8, [4])
    x = torch.as_tensor(rng.normal(size=(1, 20, 3)))
    from patchpcc.network import group_neighbors
    idx = group_neighbors(x, 8)
    assert torch.equal(idx[0, :, 0], torch.arange(20))
    assert sa.double()(x).shape == (1, 20, 4)


def test_linear_gradient_identity():
    W = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    x = torch.randn(3, dtype=torch.float64)
    up = torch.randn(4, dtype=torch.float64)
    (gW,) = torch.autograd.grad((W @ x * up).sum(), W)
    torch.testing.assert_close(gW, torch.outer(up, x))


def test_relu_subgradient_at_zero():
    x = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(torch.relu(x).sum(), x)
    assert torch.all(g == 0)


def test_maxpool_routes_to_lowest_index_on_ties():
    x = torch.tensor([[1.0, 3.0, 3.0, 2.0]], requires_grad=True)
    (g,) = torch.autograd.grad(x.max(dim=1).values.sum(), x)
    assert g.tolist() == [[0.0, 1.0, 0.0, 0.0]]


SMALL = ModelConfig(K=32, k=16, d=4)


def _small(seed=0):
    m = init_params(SMALL, seed).double()
    # non-zero biases exercise the bias paths
    with torch.no_grad():
        for p in m.parameters():
            if p.ndim == 1:
                p.uniform_(-0.1, 0.1)
    return m


@pytest.mark.parametrize("part", ["sa", "pointnet", "decoder", "composed"])
def test_layer_gradients_match_finite_differences(part, rng):
    m = _small()
    x = torch.as_tensor(rng.normal(scale=3, size=(2, 32, 3)), dtype=torch.float64).requires_grad_()
    if part == "sa":
        mod, out = m.encoder.sa, lambda: (m.encoder.sa(x) ** 2).sum() * 1e-3
    elif part == "pointnet":
        feats = m.encoder.sa(x).detach().requires_grad_()
        x = feats
        mod, out = m.encoder.pn, lambda: (m.encoder.pool(m.encoder.pn(feats)) ** 2).sum()
    elif part == "decoder":
        z = torch.as_tensor(rng.normal(size=(2, 4)), dtype=torch.float64).requires_grad_()
        x = z
        mod, out = m.decoder, lambda: (m.decoder(z) ** 2).sum()
    else:
        mod, out = m, lambda: ((m(x) - 1.0) ** 2).sum()
    rec = PatternRecorder()
    with rec.attach(m):
        def fn():
            v = out()
            return v, rec.take()
        report = check_gradients(fn, [x] + list(mod.parameters()))
    assert report.max_rel < 1e-4
    assert report.straddle_fraction < 0.5
    assert report.checked >= 50


def test_checkpoint_roundtrip(tmp_path, model, rng):
    z = torch.as_tensor(rng.normal(size=(50, 16))).round()
    model.tables = build_coding_tables(model.entropy, z.numpy())
    patch = rng.normal(size=(256, 3))
    before = encoder_forward(patch, model)
    path = tmp_path / "m.ppcc"
    save_checkpoint(model, model.cfg, path)
    loaded, cfg = load_checkpoint(path)
    assert cfg == model.cfg
    for name, t in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[name], t)
    assert loaded.tables == model.tables
    assert torch.equal(encoder_forward(patch, loaded), before)
    save_checkpoint(loaded, cfg, tmp_path / "again.ppcc")
    assert (tmp_path / "again.ppcc").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path, model):
    path = tmp_path / "m.ppcc"
    save_checkpoint(model, model.cfg, path)
    data = path.read_bytes()
    (tmp_path / "bad.ppcc").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ppcc")
    (tmp_path / "ver.ppcc").write_bytes(data[:4] + b"\x09\x00" + data[6:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ppcc")
    (tmp_path / "short.ppcc").write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ppcc")


def test_untrained_checkpoint_has_no_tables(tmp_path):
    m = init_params(SMALL, 0)
    save_checkpoint(m, SMALL, tmp_path / "u.ppcc")
    loaded, _ = load_checkpoint(tmp_path / "u.ppcc")
    assert loaded.tables is None and isinstance(loaded, PatchAutoencoder)
