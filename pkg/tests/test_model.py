import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_toon.branches import graft, partition
from fewshot_toon.config import ContractError, Direction, ModelConfig, RegistryError, ShapeError
from fewshot_toon.model import CartoonGAN, adalin, patch_size

from conftest import MINI, make_basic, rand_images

R2C = Direction.REAL2CARTOON


def test_encode_specific_shape(basic):
    f = basic.generator(R2C).encode_specific(rand_images(1, 16), 0)
    assert tuple(f.shape) == (1, MINI.ngf * 4, 4, 4)


def test_encode_specific_grafted_branches_agree(basic):
    g = graft(basic, [1, 2]).generator(R2C)
    x = rand_images(2, 16)
    assert torch.equal(g.encode_specific(x, 1), g.encode_specific(x, 2))


def test_encode_specific_parameter_disjointness(basic):
    g = graft(basic, [1, 2]).generator(R2C)
    x = rand_images(1, 16)
    before1, before2 = g.encode_specific(x, 1), g.encode_specific(x, 2)
    with torch.no_grad():
        next(g.enc_specific["2"].parameters()).add_(0.1)
    assert torch.equal(g.encode_specific(x, 1), before1)
    assert not torch.equal(g.encode_specific(x, 2), before2)


def test_encode_specific_errors(basic):
    g = basic.generator(R2C)
    with pytest.raises(RegistryError):
        g.encode_specific(rand_images(1, 16), 5)
    with pytest.raises(ShapeError):
        g.encode_specific(rand_images(1, 32), 0)


def test_shared_forward_detach_is_forward_transparent(basic):
    g = basic.generator(R2C)
    f = g.encode_specific(rand_images(2, 16), 0)
    a, b = g.shared_forward(f, detach=False), g.shared_forward(f, detach=True)
    assert torch.equal(a.features, b.features)
    assert torch.equal(a.cam_logit, b.cam_logit)
    assert torch.equal(a.attention, b.attention)


def test_shared_forward_detach_blocks_shared_grads(basic):
    g = basic.generator(R2C)
    f = g.encode_specific(rand_images(2, 16), 0)
    s = g.shared_forward(f, detach=True)
    (s.features.square().mean() + s.cam_logit.sum()).backward()
    assert all(p.grad is None or not p.grad.any() for p in g.shared.parameters())
    # the clone still passes gradient through to the branch
    assert any(p.grad is not None and p.grad.any() for p in g.enc_specific["0"].parameters())


def test_shared_forward_attention_resolution(basic):
    g = basic.generator(R2C)
    s = g.shared_forward(g.encode_specific(rand_images(1, 16), 0))
    assert tuple(s.attention.shape) == (1, 1, 4, 4)
    assert tuple(s.cam_logit.shape) == (1, 2)
    with pytest.raises(ShapeError):
        g.shared_forward(torch.zeros(1, 32, 8, 8))


def test_decode_specific_shape_and_range(basic):
    g = basic.generator(R2C)
    s = g.shared_forward(g.encode_specific(rand_images(3, 16), 0))
    y = g.decode_specific(s.features, 0)
    assert tuple(y.shape) == (3, 3, 16, 16)
    assert y.abs().max() <= 1


def test_decode_specific_grafted_identical(basic):
    g = graft(basic, [1, 3]).generator(R2C)
    f = torch.randn(2, MINI.ngf * 4, 4, 4)
    assert torch.equal(g.decode_specific(f, 1), g.decode_specific(f, 3))
    with pytest.raises(RegistryError):
        g.decode_specific(f, 2)
    with pytest.raises(ShapeError):
        g.decode_specific(torch.randn(1, 8, 4, 4), 1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 50.0))
def test_generator_output_in_range(seed, scale):
    torch.manual_seed(seed)
    model = CartoonGAN(MINI)  # framework default init, not the trained-model init
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(1 + seed % 3)
    model.clamp_rho()
    x = rand_images(2, 16, seed) * scale
    y, _, _ = model.translate(x, 0)
    assert y.min() >= -1 and y.max() <= 1


def _in(f):
    return F.instance_norm(f, eps=1e-5)


def _ln(f):
    return F.layer_norm(f, f.shape[1:], eps=1e-5)


def test_adalin_rho_one_is_instance_norm():
    f = torch.randn(2, 6, 5, 5, dtype=torch.float64)
    out = adalin(f, torch.ones(6, dtype=torch.float64), torch.zeros(6, dtype=torch.float64), torch.ones(6))
    assert (out - _in(f)).abs().max() <= 1e-6


def test_adalin_rho_zero_is_layer_norm():
    f = torch.randn(2, 6, 5, 5, dtype=torch.float64)
    out = adalin(f, torch.ones(6, dtype=torch.float64), torch.zeros(6, dtype=torch.float64), torch.zeros(6))
    assert (out - _ln(f)).abs().max() <= 1e-6


def test_adalin_half_mix_and_affine():
    gen = torch.Generator().manual_seed(3)
    f = torch.randn(3, 4, 6, 6, generator=gen, dtype=torch.float64) * 3 + 1
    gamma = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    beta = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    rho = torch.full((4,), 0.5, dtype=torch.float64)
    expected = (0.5 * _in(f) + 0.5 * _ln(f)) * gamma[:, :, None, None] + beta[:, :, None, None]
    assert (adalin(f, gamma, beta, rho) - expected).abs().max() <= 1e-10


def test_adalin_rejects_rho_out_of_range():
    f = torch.randn(1, 2, 3, 3)
    with pytest.raises(ContractError):
        adalin(f, torch.ones(2), torch.zeros(2), torch.tensor([0.5, 1.2]))
    with pytest.raises(ShapeError):
        adalin(f, torch.ones(3), torch.zeros(3), torch.ones(2))


def test_translate_graft_identity(basic):
    model = graft(basic, [1, 2, 3])
    x = rand_images(4, 16, seed=9)
    y0 = model.translate(x, 0)[0]
    for i in (1, 2, 3):
        assert (model.translate(x, i)[0] - y0).abs().max() <= 1e-6


def test_translate_full_resolution():
    cfg = ModelConfig(img_size=256, ngf=4, ndf=4, n_res=1, light=True)
    model = CartoonGAN(cfg)
    with torch.no_grad():
        y, cam, att = model.translate(rand_images(1, 256), 0)
    assert tuple(y.shape) == (1, 3, 256, 256)
    assert tuple(att.shape) == (1, 1, 64, 64)


def test_translate_selective_backprop(basic):
    model = graft(basic, [1, 2, 3]).train()
    g = model.generator(R2C)
    y, cam, _ = g.translate(rand_images(1, 16, seed=4), 2)
    (y.square().mean() + cam.sum()).backward()
    part = partition(model)
    params = dict(model.named_parameters())
    assert all(params[n].grad is None for n in part.shared)
    assert any(params[n].grad is not None and params[n].grad.any() for n in part.specific[2])


def test_translate_eval_mode_does_not_detach(basic):
    model = graft(basic, [1]).eval()
    y, _, _ = model.translate(rand_images(1, 16), 1)
    y.sum().backward()
    assert any(p.grad is not None for p in model.generator(R2C).shared.parameters())


def conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def test_discriminate_patch_map_size():
    # five stride-2 k4 p1 convs then a stride-1 k4 p1 head
    s = 256
    for _ in range(5):
        s = conv_out(s, 4, 2, 1)
    expected = conv_out(s, 4, 1, 1)
    assert expected == 7 == patch_size(256, 5)
    cfg = ModelConfig(img_size=256, ngf=4, ndf=4, n_res=1, disc_layers=5, light=True)
    model = CartoonGAN(cfg, n_groups=4)
    with torch.no_grad():
        patch, cam, cls, _ = model.discriminate(rand_images(1, 256), "cartoon")
    assert tuple(patch.shape) == (1, 1, expected, expected)
    assert tuple(cls.shape) == (1, 4)


def test_discriminate_deterministic(basic):
    x = rand_images(2, 16)
    a = basic.discriminate(x, "real")
    b = basic.discriminate(x, "real")
    for u, v in zip(a, b):
        assert torch.equal(u, v)
    with pytest.raises(ShapeError):
        basic.discriminate(rand_images(1, 32), "real")


def test_forward_determinism_across_instances():
    a, b = make_basic(seed=5), make_basic(seed=5)
    x = rand_images(2, 16)
    assert torch.equal(a.translate(x, 0)[0], b.translate(x, 0)[0])


def test_hourglass_option_builds_and_splits():
    cfg = ModelConfig(img_size=16, ngf=4, ndf=4, n_res=1, n_hourglass=1, disc_layers=2)
    model = CartoonGAN(cfg)
    g = model.generator(R2C)
    assert g.n_enc_specific == 4 and g.n_dec_specific == 4
    y, _, _ = model.translate(rand_images(1, 16), 0)
    assert tuple(y.shape) == (1, 3, 16, 16)


def test_model_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(img_size=8)
    with pytest.raises(ContractError):
        ModelConfig(img_size=18, n_down=2, disc_layers=1)
    with pytest.raises(ContractError):
        ModelConfig(img_size=32, disc_layers=5)
