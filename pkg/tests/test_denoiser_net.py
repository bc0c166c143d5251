import numpy as np
import pytest
import torch

from modules.tcd_forecast.denoiser_net import (DenoiserNet, TrainingBatch, init_params, loss_and_grad,
                                               masked_eps_loss, step_embedding)
from modules.tcd_forecast.errors import DegenerateBatchError, ModeError, ParameterError, StructuralError

from conftest import tiny_denoiser_config


def _inputs(B=2, F=6, J=5, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    s_t = torch.randn((B, F, J, 3), generator=gen, dtype=dtype)
    keep = torch.zeros((B, F, J, 3), dtype=torch.bool)
    keep[:, :3] = True
    observed = torch.where(keep, s_t, torch.zeros_like(s_t))
    t = torch.tensor([3, 17])[:B]
    return s_t, t, keep, observed


def _randomized(cfg, seed=1):
    """Fresh net with every parameter drawn at random (init zeroes the output path)."""
    net = DenoiserNet(cfg).to(torch.float64)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(0.3 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    return net


def test_fresh_network_predicts_zero_noise():
    cfg = tiny_denoiser_config(6, joints=5, precision="float64")
    net = init_params(cfg, seed=0)
    s_t, t, keep, observed = _inputs()
    out = net(s_t, t, keep, observed)
    assert out.shape == s_t.shape
    assert torch.equal(out, torch.zeros_like(out))


def test_init_is_seeded():
    cfg = tiny_denoiser_config(6, joints=5)
    a, b, c = init_params(cfg, 4), init_params(cfg, 4), init_params(cfg, 5)
    for (name, pa), pb, pc in zip(a.named_parameters(), b.parameters(), c.parameters()):
        assert torch.equal(pa, pb), name
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))
    assert a.dtype == torch.float32


def test_step_embedding_layout():
    emb = step_embedding(torch.tensor([0, 5]), 8)
    assert emb.shape == (2, 8)
    torch.testing.assert_close(emb[0], torch.tensor([0.0] * 4 + [1.0] * 4, dtype=torch.float64))


def test_temporal_stage_mixes_frames_and_spatial_mixes_joints():
    s_t, t, keep, observed = _inputs(B=1)
    bumped = s_t.clone()
    bumped[0, 0, 0] += 1.0

    temporal_only = _randomized(tiny_denoiser_config(6, joints=5, spatial=False))
    delta = temporal_only(bumped, t, keep, observed) - temporal_only(s_t, t, keep, observed)
    assert delta[0, 4, 0].abs().max() > 1e-8        # same joint, later frame
    assert delta[0, 0, 1:].abs().max() == 0.0       # other joints untouched

    spatial_only = _randomized(tiny_denoiser_config(6, joints=5, temporal=False))
    delta = spatial_only(bumped, t, keep, observed) - spatial_only(s_t, t, keep, observed)
    assert delta[0, 0, 3].abs().max() > 1e-8        # same frame, other joint
    assert delta[0, 1:].abs().max() == 0.0          # other frames untouched


def test_ablated_stages_drop_parameters():
    full = DenoiserNet(tiny_denoiser_config(6, joints=5))
    no_temporal = DenoiserNet(tiny_denoiser_config(6, joints=5, temporal=False))
    assert no_temporal.layers[0].temporal is None
    assert no_temporal.parameter_count() < full.parameter_count()


def test_input_checks():
    net = init_params(tiny_denoiser_config(6, joints=5, precision="float64"), 0)
    s_t, t, keep, observed = _inputs()
    with pytest.raises(StructuralError):
        net(s_t[:, :, :4], t, keep[:, :, :4], observed[:, :, :4])
    with pytest.raises(StructuralError):
        net(torch.zeros(2, 7, 5, 3, dtype=torch.float64), t, torch.zeros(2, 7, 5, 3, dtype=torch.bool),
            torch.zeros(2, 7, 5, 3, dtype=torch.float64))
    with pytest.raises(ParameterError):
        net(s_t, torch.tensor([0, 3]), keep, observed)
    with pytest.raises(ModeError):
        net(s_t, t, keep, observed, hint=torch.zeros(2, 6, 5, 4, dtype=torch.float64))

    refine = init_params(tiny_denoiser_config(6, joints=5, refine=True, precision="float64"), 0)
    with pytest.raises(ModeError):
        refine(s_t, t, keep, observed)
    hinted = refine(s_t, t, keep, observed, hint=torch.zeros(2, 6, 5, 4, dtype=torch.float64))
    assert hinted.shape == s_t.shape


def test_masked_loss_counts_only_missing_entries():
    keep = torch.zeros(1, 2, 2, 3, dtype=torch.bool)
    keep[0, 0] = True
    eps = torch.zeros(1, 2, 2, 3, dtype=torch.float64)
    eps_hat = torch.ones(1, 2, 2, 3, dtype=torch.float64)
    eps_hat[0, 1] = 2.0
    assert float(masked_eps_loss(eps_hat, eps, keep)) == pytest.approx(4.0)
    with pytest.raises(DegenerateBatchError):
        masked_eps_loss(eps_hat, eps, torch.ones_like(keep))


def test_gradients_match_finite_differences():
    cfg = tiny_denoiser_config(6, joints=5, precision="float64")
    net = _randomized(cfg, seed=3)
    s_t, t, keep, observed = _inputs(seed=2)
    eps = torch.randn(s_t.shape, generator=torch.Generator().manual_seed(9), dtype=torch.float64)
    batch = TrainingBatch(s_t=s_t, t=t, keep=keep, observed=observed, eps=eps)
    _, grads = loss_and_grad(net, batch)

    params = net.named_params()
    h = 1e-6
    for name in ("input_proj.weight", "layers.0.temporal.attn.in_proj_weight", "output_proj.bias"):
        p = params[name]
        index = (0,) * p.dim()
        with torch.no_grad():
            original = p[index].item()
            p[index] = original + h
            up = float(masked_eps_loss(net(s_t, t, keep, observed), eps, keep))
            p[index] = original - h
            down = float(masked_eps_loss(net(s_t, t, keep, observed), eps, keep))
            p[index] = original
        numeric = (up - down) / (2 * h)
        assert grads[name][index].item() == pytest.approx(numeric, rel=1e-4, abs=1e-7), name


def _batch(seed=2, B=2):
    s_t, t, keep, observed = _inputs(B=B, seed=seed)
    eps = torch.randn(s_t.shape, generator=torch.Generator().manual_seed(seed + 7), dtype=torch.float64)
    return TrainingBatch(s_t=s_t, t=t, keep=keep, observed=observed, eps=eps)


def test_every_parameter_group_matches_finite_differences():
    cfg = tiny_denoiser_config(6, joints=5, residual_layers=2, channels=8, heads=2, precision="float64")
    net = _randomized(cfg, seed=5)
    batch = _batch()
    _, grads = loss_and_grad(net, batch)

    def loss():
        return float(masked_eps_loss(net(batch.s_t, batch.t, batch.keep, batch.observed), batch.eps, batch.keep))

    rng = np.random.default_rng(0)
    h = 1e-5
    for name, p in net.named_params().items():
        flat = p.detach().view(-1)
        picks = rng.choice(flat.numel(), size=min(50, flat.numel()), replace=False)
        for k in picks:
            with torch.no_grad():
                original = float(flat[k])
                flat[k] = original + h
                up = loss()
                flat[k] = original - h
                down = loss()
                flat[k] = original
            numeric = (up - down) / (2 * h)
            assert float(grads[name].reshape(-1)[k]) == pytest.approx(numeric, rel=1e-4, abs=1e-7), (name, int(k))


def test_hidden_preactivations_at_init_have_unit_scale():
    cfg = tiny_denoiser_config(10, joints=17, residual_layers=4, channels=32, heads=4, step_embed_dim=32)
    net = init_params(cfg, seed=1)
    spreads = {}

    def record(name):
        def hook(module, inputs, output):
            spreads[name] = float(output.std())
        return hook

    for name, module in net.named_modules():
        if name == "input_proj" or name.endswith("ff.0") or name.endswith("ff.2"):
            module.register_forward_hook(record(name))
    gen = torch.Generator().manual_seed(3)
    s_t = torch.randn((4, 10, 17, 3), generator=gen)
    keep = torch.zeros(s_t.shape, dtype=torch.bool)
    keep[:, :5] = True
    observed = torch.where(keep, torch.randn(s_t.shape, generator=gen), torch.zeros_like(s_t))
    net(s_t, torch.tensor([1, 10, 25, 50]), keep, observed)

    assert len(spreads) == 1 + 2 * cfg.residual_layers
    for name, std in spreads.items():
        assert 0.5 <= std <= 2.0, (name, std)


def test_exact_noise_prediction_gives_zero_loss_and_gradients():
    net = init_params(tiny_denoiser_config(6, joints=5, precision="float64"), seed=0)
    batch = _batch()
    batch.eps = torch.zeros_like(batch.eps)
    loss, grads = loss_and_grad(net, batch)
    assert float(loss) == 0.0
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_duplicated_batch_leaves_loss_and_gradients_unchanged():
    net = _randomized(tiny_denoiser_config(6, joints=5, precision="float64"), seed=4)
    batch = _batch()
    doubled = TrainingBatch(s_t=torch.cat([batch.s_t] * 2), t=torch.cat([batch.t] * 2),
                            keep=torch.cat([batch.keep] * 2), observed=torch.cat([batch.observed] * 2),
                            eps=torch.cat([batch.eps] * 2))
    loss, grads = loss_and_grad(net, batch)
    loss2, grads2 = loss_and_grad(net, doubled)
    assert float(loss2) == pytest.approx(float(loss), abs=1e-12)
    for name in grads:
        torch.testing.assert_close(grads2[name], grads[name], rtol=1e-10, atol=1e-12)


def test_loss_ignores_observed_entries():
    batch = _batch()
    eps_hat = torch.randn(batch.eps.shape, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    shifted = eps_hat + 50.0 * batch.keep
    assert float(masked_eps_loss(shifted, batch.eps, batch.keep)) == float(masked_eps_loss(eps_hat, batch.eps,
                                                                                          batch.keep))
