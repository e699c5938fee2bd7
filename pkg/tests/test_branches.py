import pytest
import torch

from fewshot_toon.branches import graft, gradient_report, partition, resplit, routed_loss_backward, split_of
from fewshot_toon.config import ContractError, Direction, RegistryError, SplitConfig
from fewshot_toon.model import CartoonGAN, DetachPolicy
from fewshot_toon.trainer import generator_losses, prepare_fewshot
from fewshot_toon.losses import FaceEmbedder, total_g

from conftest import MINI, make_basic, rand_images

R2C = Direction.REAL2CARTOON


def specific_stack_size(cfg) -> int:
    """Parameters in one direction's specific encoder + decoder under the default split."""
    ngf = cfg.ngf
    enc = 3 * ngf * 7 * 7  # input conv, no bias
    dec = ngf * 3 * 7 * 7  # output conv, no bias
    for i in range(cfg.n_down):
        c = ngf * 2**i
        enc += c * 2 * c * 3 * 3
        # upsampling conv (2c -> c) plus rho/gamma/beta of its layer-instance norm
        dec += 2 * c * c * 3 * 3 + 3 * c
    return enc + dec


def test_graft_empty_is_identity(basic):
    model = graft(basic, [])
    x = rand_images(3, 16)
    for d in Direction:
        assert torch.equal(model.translate(x, 0, d)[0], basic.translate(x, 0, d)[0])


def test_graft_parameter_count(basic):
    part = partition(basic)
    params = dict(basic.named_parameters())
    n_shared = sum(params[n].numel() for n in part.shared)
    n_spec = sum(params[n].numel() for n in part.specific[0])
    assert n_spec == 2 * specific_stack_size(MINI)
    n_disc = sum(p.numel() for p in basic.discriminator_parameters())

    model = graft(basic, [1, 2, 3])
    total = sum(p.numel() for p in model.parameters())
    assert total == n_shared + 4 * n_spec + n_disc


def test_graft_identity_many_inputs(basic):
    model = graft(basic, [1, 2, 3])
    for seed in range(16):
        x = rand_images(1, 16, seed=seed)
        for d in Direction:
            y0 = basic.translate(x, 0, d)[0]
            for i in (0, 1, 2, 3):
                assert (model.translate(x, i, d)[0] - y0).abs().max() <= 1e-6


def test_graft_does_not_alias_parameters(basic):
    model = graft(basic, [1])
    g = model.generator(R2C)
    with torch.no_grad():
        next(g.enc_specific["1"].parameters()).add_(1.0)
    x = rand_images(1, 16)
    assert torch.equal(g.translate(x, 0)[0], basic.translate(x, 0)[0])


def test_graft_errors(basic):
    with pytest.raises(RegistryError):
        graft(basic, [1, 1])
    with pytest.raises(RegistryError):
        graft(basic, [0, 1])
    with pytest.raises(RegistryError):
        graft(graft(basic, [1]), [1])
    with pytest.raises(ContractError):
        graft(basic, [1], SplitConfig(n_enc_specific=99))
    with pytest.raises(ContractError):
        graft("not a model", [1])


def test_partition_is_disjoint_cover(basic):
    model = graft(basic, [1, 2, 3])
    part = partition(model)
    gen_names = {n for n, _ in model.named_parameters() if n.startswith("gen.")}
    cells = [set(part.shared)] + [set(v) for v in part.specific.values()]
    assert set().union(*cells) == gen_names
    assert sum(len(c) for c in cells) == len(gen_names)
    assert sorted(part.specific) == [0, 1, 2, 3]


def test_partition_cells_shape_isomorphic(basic):
    model = graft(basic, [1, 2, 3])
    part = partition(model)
    params = dict(model.named_parameters())
    ref = [params[n].shape for n in part.specific[0]]
    for b in (1, 2, 3):
        assert [params[n].shape for n in part.specific[b]] == ref
        assert [n.replace(f"_specific.{b}.", "_specific.0.") for n in part.specific[b]] == part.specific[0]


def test_partition_order_is_stable(basic):
    model = graft(basic, [1, 2])
    assert partition(model) == partition(model)
    with pytest.raises(ContractError):
        partition(model, SplitConfig(4, 3))


def test_deeper_split_moves_one_residual_block(basic):
    def counts(m):
        part = partition(m)
        params = dict(m.named_parameters())
        return (
            sum(params[n].numel() for n in part.shared),
            sum(params[n].numel() for n in part.specific[0]),
        )

    sh0, sp0 = counts(basic)
    deeper = resplit(basic, split_of(basic).deeper(MINI, enc=1))
    sh1, sp1 = counts(deeper)
    block = 2 * (2 * 9 * MINI.feature_channels**2)  # one residual block, both directions
    assert sp1 - sp0 == block
    assert sh0 - sh1 == block
    x = rand_images(2, 16)
    assert torch.equal(deeper.translate(x, 0)[0], basic.translate(x, 0)[0])


def test_decoder_split_into_adalin_blocks(basic):
    split = split_of(basic).deeper(MINI, enc=0, dec=1)
    model = graft(basic, [1], split)
    g = model.generator(R2C)
    assert g.n_dec_specific == 4
    x = rand_images(2, 16)
    assert torch.equal(model.translate(x, 1)[0], basic.translate(x, 0)[0])
    s = g.shared_forward(g.encode_specific(x, 1))
    with pytest.raises(ContractError):
        g.decode_specific(s.features, 1)


def _fewshot(basic, groups=(0, 1, 2, 3)):
    model, _, _ = prepare_fewshot(basic, list(groups))
    return model.train()


def _g_loss(model, group, seed=0):
    emb = FaceEmbedder(MINI.embed_dim)
    real, cartoon = rand_images(1, 16, seed), rand_images(1, 16, seed + 100)
    return total_g(generator_losses(model, emb, real, cartoon, group))


def test_routed_backward_fewshot_group_isolated(basic):
    model = _fewshot(basic)
    report = routed_loss_backward(_g_loss(model, 2), 2, DetachPolicy(), model)
    assert report.shared == 0.0
    assert report.specific[2] > 0
    assert report.specific[0] == report.specific[1] == report.specific[3] == 0.0


def test_routed_backward_group0_reaches_shared(basic):
    model = _fewshot(basic)
    report = routed_loss_backward(_g_loss(model, 0), 0, DetachPolicy(), model)
    assert report.shared > 0
    assert report.specific[0] > 0
    assert report.specific[1] == 0.0


def test_routed_backward_group1_leaves_other_branches(basic):
    model = _fewshot(basic)
    report = routed_loss_backward(_g_loss(model, 1), 1, DetachPolicy(), model)
    assert report.specific[2] == 0.0 and report.specific[3] == 0.0


def test_routed_backward_contract(basic):
    model = _fewshot(basic, (0, 1))
    with pytest.raises(ContractError):
        routed_loss_backward(torch.tensor(1.0), 1, DetachPolicy(), model)
    with pytest.raises(RegistryError):
        routed_loss_backward(_g_loss(model, 1), 7, DetachPolicy(), model)
    # loss built without the detach policy contradicts the policy
    model.eval()
    with pytest.raises(ContractError):
        routed_loss_backward(_g_loss(model, 1), 1, DetachPolicy(), model)


def test_no_selective_policy_reaches_shared(basic):
    model = _fewshot(basic, (0, 1))
    model.set_detach_policy(DetachPolicy(selective=False))
    report = routed_loss_backward(_g_loss(model, 1), 1, DetachPolicy(selective=False), model)
    assert report.shared > 0


def test_additivity_of_shared_gradients(basic):
    model = _fewshot(basic)
    part = partition(model)
    params = dict(model.named_parameters())

    model.zero_grad(set_to_none=True)
    _g_loss(model, 0).backward()
    g0 = {n: params[n].grad.clone() for n in part.shared}

    model.zero_grad(set_to_none=True)
    sum(_g_loss(model, g, seed=0 if g == 0 else 10 * g) for g in range(4)).backward()
    for n in part.shared:
        assert (params[n].grad - g0[n]).abs().max() <= 1e-6
    rep = gradient_report(model, part)
    assert all(rep.specific[b] > 0 for b in range(4))
