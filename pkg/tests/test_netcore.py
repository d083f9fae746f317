import numpy as np
import pytest
import torch

from mapfuse.geometry import Pose
from mapfuse.netcore import (
    ABLATION_MODES,
    Checkpoint,
    ConfigurationError,
    NetworkConfig,
    NumericFailure,
    ShapeContractError,
    build_model,
    compose_correction,
    corr,
    load_checkpoint,
    pose_loss,
    prepare_inputs,
    regress_pose,
    save_checkpoint,
    spatial_softmax,
)
from mapfuse.netcore.vit import VisionTransformer

SMALL = NetworkConfig(height=64, width=96).reduced()


def inputs(cfg, b=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (
        torch.rand(b, 3, cfg.height, cfg.width, generator=g, dtype=dtype),
        torch.rand(b, 1, cfg.height, cfg.width, generator=g, dtype=dtype),
    )


def corr_oracle(f1, f2, d):
    c, h, w = f1.shape
    out = np.zeros(((2 * d + 1) ** 2, h, w))
    for k, (dy, dx) in enumerate((dy, dx) for dy in range(-d, d + 1) for dx in range(-d, d + 1)):
        for i in range(h):
            for j in range(w):
                if 0 <= i + dy < h and 0 <= j + dx < w:
                    out[k, i, j] = sum(f1[ch, i, j] * f2[ch, i + dy, j + dx] for ch in range(c)) / c
    return out


def test_corr_matches_quadruple_loop():
    rng = np.random.default_rng(0)
    f1, f2 = rng.normal(size=(5, 6, 7)), rng.normal(size=(5, 6, 7))
    got = corr(torch.tensor(f1), torch.tensor(f2), 2).numpy()
    np.testing.assert_allclose(got, corr_oracle(f1, f2, 2), atol=1e-6)


def test_corr_self_and_channel_count():
    f = torch.randn(8, 5, 6, dtype=torch.float64)
    out = corr(f, f, 4)
    assert out.shape == (81, 5, 6)
    np.testing.assert_allclose(out[40].numpy(), (f * f).sum(0).numpy() / 8, atol=1e-12)
    with pytest.raises(ShapeContractError):
        corr(f, f[:, :4], 1)


def test_spatial_softmax_sums_to_one():
    w = spatial_softmax(torch.randn(3, 7, 4, 6))
    np.testing.assert_allclose(w.sum(dim=(2, 3)).numpy(), 1.0, atol=1e-5)


def test_local_features_pooling_oracle():
    model = build_model(SMALL, 1)
    color, depth = inputs(SMALL)
    with torch.no_grad():
        out = model(color, depth)
    fb = out.features
    f_c, f_d2 = fb.f_c.numpy().astype(np.float64), fb.f_depth2.numpy().astype(np.float64)
    b, c, h, w = f_c.shape
    for bi in range(b):
        for ch in range(c):
            ex = np.exp(f_d2[bi, ch] - f_d2[bi, ch].max())
            weights = ex / ex.sum()
            total = 0.0
            for i in range(h):
                for j in range(w):
                    total += f_c[bi, ch, i, j] * weights[i, j]
            assert abs(total - float(fb.f_local[bi, ch])) < 1e-5
    flat = fb.f_c.flatten(2)
    assert torch.all(fb.f_local >= flat.min(-1).values - 1e-5)
    assert torch.all(fb.f_local <= flat.max(-1).values + 1e-5)


def test_constant_fc_gives_constant_local_feature():
    model = build_model(SMALL, 2)
    k = torch.linspace(-2, 3, SMALL.local_channels)

    class Const(torch.nn.Module):
        def forward(self, x):
            b, _, h, w = x.shape
            return k.reshape(1, -1, 1, 1).expand(b, -1, h, w)

    model.fe1 = Const()
    color, depth = inputs(SMALL)
    with torch.no_grad():
        f_local = model.local_features(color, depth)
    np.testing.assert_allclose(f_local.numpy(), np.broadcast_to(k.numpy(), f_local.shape), atol=1e-5)


def test_global_features_depend_on_depth():
    model = build_model(SMALL, 3)
    color, depth = inputs(SMALL, b=1)
    depth2 = depth.clone()
    depth2[..., 10:30, 20:50] = 0.0
    with torch.no_grad():
        a = model.global_features(color, depth)
        b = model.global_features(color, depth2)
    assert a.shape == (1, SMALL.vit_embed_dim)
    assert not torch.allclose(a, b)


@pytest.mark.parametrize("mode", ABLATION_MODES)
def test_all_modes_same_output_shapes(mode):
    cfg = SMALL.replace(ablation_mode=mode)
    model = build_model(cfg, 0)
    color, depth = inputs(cfg)
    rough = [Pose([1, 2, 3]), Pose([0, 0, 0])]
    with torch.no_grad():
        out = model(color, depth, rough)
    assert out.t.shape == (2, 3)
    assert out.q.shape == (2, 4)
    assert out.features.f_global.shape == (2, cfg.vit_embed_dim)
    assert out.features.f_local.shape == (2, cfg.local_channels)
    assert out.features.fused.shape == (2, cfg.fused_dim)
    assert len(out.absolute) == 2
    if mode != "local_only":
        assert tuple(out.features.vit_input.shape[1:]) == (3, 224, 224)


def test_local_only_global_is_zero_and_depth_still_matters():
    cfg = SMALL.replace(ablation_mode="local_only")
    model = build_model(cfg, 4)
    color, depth = inputs(cfg, b=1)
    depth2 = depth.clone()
    depth2[..., :16, :16] = 0
    with torch.no_grad():
        a, b = model(color, depth), model(color, depth2)
    assert torch.count_nonzero(a.features.f_global) == 0
    assert torch.count_nonzero(b.features.f_global) == 0
    assert not torch.allclose(a.features.f_local, b.features.f_local)
    assert not hasattr(model, "vit")


def test_config_errors():
    with pytest.raises(ConfigurationError):
        NetworkConfig(ablation_mode="nope")
    with pytest.raises(ShapeContractError):
        NetworkConfig(height=100, width=96)
    model = build_model(SMALL)
    with pytest.raises(ShapeContractError):
        model(torch.rand(1, 3, 48, 96), torch.rand(1, 1, 48, 96))
    with pytest.raises(ShapeContractError):
        model(torch.rand(1, 3, 64, 90), torch.rand(1, 1, 64, 90))


def test_regress_pose_contract():
    model = build_model(SMALL, 5)
    rough = Pose([3.0, -1.0, 1.6], [0.5, -0.5, 0.5, -0.5])
    t, q, absolute = regress_pose(model, torch.randn(SMALL.local_channels), torch.randn(SMALL.vit_embed_dim), rough)
    assert abs(float(q.detach().norm()) - 1) < 1e-6
    assert isinstance(absolute, Pose)
    assert compose_correction(rough, torch.zeros(3), torch.tensor([1.0, 0, 0, 0])) == rough
    with pytest.raises(ShapeContractError):
        model.regress(torch.randn(1, 5), torch.randn(1, SMALL.vit_embed_dim))


def test_numeric_failure_reports_layer():
    model = build_model(SMALL)
    f_local = torch.full((1, SMALL.local_channels), float("inf"))
    with pytest.raises(NumericFailure) as info:
        model.regress(f_local, torch.zeros(1, SMALL.vit_embed_dim))
    assert info.value.layer_index == 0


def test_loss_zero_cases():
    t = torch.tensor([[0.1, -0.2, 0.3]])
    q = torch.nn.functional.normalize(torch.tensor([[0.9, 0.1, -0.2, 0.1]]), dim=-1)
    assert float(pose_loss(t, q, t, q)) == pytest.approx(0.0, abs=1e-7)
    assert float(pose_loss(t, -q, t, q)) == pytest.approx(0.0, abs=1e-7)
    assert float(pose_loss(t, 3 * q, t, q)) == pytest.approx(0.0, abs=1e-6)
    assert float(pose_loss(t + 0.05, q, t, q)) > 0
    assert float(pose_loss(t, q + torch.tensor([[0, 0.3, 0, 0]]), t, q)) > 0


def test_loss_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    t = torch.randn(3, 3, dtype=torch.float64, generator=g, requires_grad=True)
    q = torch.randn(3, 4, dtype=torch.float64, generator=g, requires_grad=True)
    ts = torch.randn(3, 3, dtype=torch.float64, generator=g) * 0.2
    qs = torch.nn.functional.normalize(torch.randn(3, 4, dtype=torch.float64, generator=g), dim=-1)
    loss = pose_loss(t, q, ts, qs)
    loss.backward()
    eps = 1e-6
    for param in (t, q):
        for idx in np.ndindex(*param.shape):
            with torch.no_grad():
                orig = param[idx].item()
                param[idx] = orig + eps
                up = pose_loss(t, q, ts, qs).item()
                param[idx] = orig - eps
                down = pose_loss(t, q, ts, qs).item()
                param[idx] = orig
            num = (up - down) / (2 * eps)
            ana = param.grad[idx].item()
            assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana), 1e-6)


def test_forward_is_deterministic():
    color, depth = inputs(SMALL)
    a = build_model(SMALL, 7)(color, depth)
    b = build_model(SMALL, 7)(color, depth)
    assert torch.equal(a.t, b.t) and torch.equal(a.q_raw, b.q_raw)
    c = build_model(SMALL, 8)(color, depth)
    assert not torch.equal(a.t, c.t)


def test_fusion_uses_global_path():
    model = build_model(SMALL, 9)
    color, depth = inputs(SMALL, b=1)
    with torch.no_grad():
        out = model(color, depth)
        t0, q0 = model.regress(out.features.f_local, torch.zeros_like(out.features.f_global))
    assert not torch.allclose(out.t, t0)


def test_every_parameter_group_gets_gradient():
    model = build_model(SMALL, 10)
    color, depth = inputs(SMALL)
    out = model(color, depth)
    loss = pose_loss(out.t, out.q_raw, torch.randn(2, 3) * 0.3, torch.tensor([[1.0, 0, 0, 0]] * 2))
    loss.backward()
    groups = {}
    for name, p in model.named_parameters():
        groups.setdefault(name.split(".")[0], []).append(p.grad.abs().sum().item())
    assert set(groups) == {
        "conv_rgb_prime", "conv_depth_prime", "vit", "conv_rgb", "conv_depth", "fe1", "fe2", "mlp_position", "mlp_posture",
    }
    for name, sums in groups.items():
        assert sum(sums) > 0, name


def test_prepare_inputs_normalization():
    color = np.full((64, 96, 3), 255, np.uint8)
    depth = np.zeros((64, 96), np.float32)
    depth[3, 4] = 50.0
    depth[5, 6] = 150.0
    depth[7, 8] = 0.5
    depth[9, 9] = 4.0
    c, d = prepare_inputs(color, depth, 100.0)
    assert c.shape == (1, 3, 64, 96) and float(c.max()) == 1.0
    assert d.shape == (1, 1, 64, 96)
    # inverse depth 2 m / d, saturating at 1; no return and beyond the far clip -> 0
    assert float(d[0, 0, 3, 4]) == pytest.approx(0.04) and float(d[0, 0, 9, 9]) == 0.5
    assert float(d[0, 0, 7, 8]) == 1.0 and float(d[0, 0, 5, 6]) == 0.0 and float(d[0, 0, 0, 0]) == 0.0


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = build_model(SMALL, 11)
    ckpt = Checkpoint.from_model(model, step=5, seed=11)
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    save_checkpoint(tmp_path / "b.ckpt", ckpt)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.config == SMALL and back.step == 5 and back.seed == 11
    assert list(back.tensors) == list(ckpt.tensors)
    for k, v in ckpt.tensors.items():
        assert back.tensors[k].dtype == np.float32
        assert np.array_equal(back.tensors[k], v)
    restored = back.to_model()
    for (k, a), (_, b) in zip(model.state_dict().items(), restored.state_dict().items()):
        assert torch.equal(a, b), k
    names = set(ckpt.tensors)
    assert any(n.startswith("conv_rgb_prime.") for n in names)
    assert any(n.startswith("mlp_position.") for n in names)


def test_vit_pretrained_hook():
    big = VisionTransformer(embed_dim=48, depth=3, heads=4)
    small = VisionTransformer(embed_dim=48, depth=1, heads=4)
    state = dict(big.state_dict())
    state["head.weight"] = torch.zeros(10, 48)
    loaded = small.load_pretrained(state)
    assert "blocks.0.attn.qkv.weight" in loaded and "head.weight" not in loaded
    assert torch.equal(small.cls_token, big.cls_token)
    assert torch.equal(small.blocks[0].mlp.fc1.weight, big.blocks[0].mlp.fc1.weight)
    with pytest.raises(ValueError):
        VisionTransformer(embed_dim=32, depth=1, heads=4).load_pretrained(state)
