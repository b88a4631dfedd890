"""Network blocks against straight-line numpy re-implementations, plus contracts."""

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from qsynth.model import (
    CBIN,
    MMAF,
    CBINResBlock,
    ChannelAttention,
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    ProjectionHead,
    QEmbedding,
    SMAEncoder,
    check_q,
    flatten_parameters,
    load_flat_parameters,
    parameter_layout,
)

from oracles import (
    cbin_oracle,
    linear,
    mmaf_oracle,
    np_,
    projection_oracle,
    random_q,
    rel_err,
    relu,
    sma_encode_oracle,
)


# --- block equivalence (float64) ------------------------------------------------


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def test_sma_encoder_matches_oracle(rng):
    enc = SMAEncoder(8, 1, 4).double()
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal((1, 1, 8, 8))
        out = np_(enc(torch.tensor(x))[0])
        worst = max(worst, rel_err(out, sma_encode_oracle(x[0], enc)))
    assert worst <= 1e-6


def test_mmaf_matches_oracle(rng):
    mmaf = MMAF(8, 4).double()
    for _ in range(20):
        zs = [rng.standard_normal((8, 4, 4)) for _ in range(3)]
        fused, A = mmaf(*[torch.tensor(z[None]) for z in zs])
        f_ref, A_ref = mmaf_oracle(zs, mmaf)
        assert rel_err(np_(fused[0]), f_ref) <= 1e-6
        assert rel_err(np_(A[0]), A_ref) <= 1e-6


def test_cbin_matches_oracle(rng):
    cbin = CBIN(6, 5).double()
    for _ in range(20):
        z = rng.standard_normal((6, 4, 4)) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
        q_hat = rng.standard_normal(5)
        out = np_(cbin(torch.tensor(z[None]), torch.tensor(q_hat[None]))[0])
        assert rel_err(out, cbin_oracle(z, q_hat, cbin)) <= 1e-6


@pytest.mark.parametrize("spatial", [False, True])
def test_projection_heads_match_oracle(rng, spatial):
    head = ProjectionHead(7, 5).double()
    torch.nn.init.normal_(head.V)
    for _ in range(20):
        gamma = rng.standard_normal((7, 4, 4) if spatial else (7,))
        q_hat = rng.standard_normal(5)
        out = np_(head(torch.tensor(gamma[None]), torch.tensor(q_hat[None]))[0])
        assert rel_err(np.atleast_1d(out), np.atleast_1d(projection_oracle(gamma, q_hat, head))) <= 1e-6


def test_discriminator_heads_use_q_embedding(rng):
    disc = Discriminator(DiscriminatorConfig(in_size=(8, 8), base_channels=4, n_downsample=2,
                                             q_embed_dim=6)).double()
    x = torch.tensor(rng.uniform(0, 1, (2, 1, 8, 8)))
    q = random_q(rng, 2)
    score, pmap = disc(x, q)
    gamma_g, gamma_p = disc.features(x)
    q_hat = np_(disc.q_embed(q))
    for i in range(2):
        ref_s = projection_oracle(np_(gamma_g[i]), q_hat[i], disc.global_head)
        ref_p = projection_oracle(np_(gamma_p[i]), q_hat[i], disc.pixel_head)
        assert rel_err(np.atleast_1d(np_(score[i])), np.atleast_1d(ref_s)) <= 1e-6
        assert rel_err(np_(pmap[i]), ref_p) <= 1e-6
    assert score.shape == (2,) and pmap.shape == (2, 8, 8)


def test_q_embedding_oracle(rng):
    emb = QEmbedding(12).double()
    q = random_q(rng, 5)
    ref = np.stack([linear(relu(linear(v, emb.fc1)), emb.fc2) for v in q.numpy()])
    assert rel_err(np_(emb(q)), ref) <= 1e-12


# --- gradients (central differences, float64) ------------------------------------


def _gradcheck(fn, *inputs):
    assert gradcheck(fn, inputs, eps=1e-6, atol=1e-8, rtol=1e-3)


def test_gradcheck_channel_attention_and_encoder(rng):
    enc = SMAEncoder(4, 1, 2).double()
    x = torch.tensor(rng.standard_normal((1, 1, 8, 8)), requires_grad=True)
    _gradcheck(enc, x)
    att = ChannelAttention(4, 2).double()
    f = torch.tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
    _gradcheck(att, f)


def test_gradcheck_mmaf(rng):
    mmaf = MMAF(4, 2).double()
    zs = [torch.tensor(rng.standard_normal((1, 4, 8, 8)), requires_grad=True) for _ in range(3)]
    _gradcheck(lambda a, b, c: mmaf(a, b, c)[0], *zs)


def test_gradcheck_cbin_and_block(rng):
    cbin = CBIN(4, 3).double()
    z = torch.tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
    qh = torch.tensor(rng.standard_normal((2, 3)), requires_grad=True)
    _gradcheck(cbin, z, qh)
    block = CBINResBlock(4, 3).double()
    _gradcheck(block, z, qh)


def test_gradcheck_projection_and_q_embedding(rng):
    head = ProjectionHead(4, 3).double()
    torch.nn.init.normal_(head.V)
    g = torch.tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
    qh = torch.tensor(rng.standard_normal((2, 3)), requires_grad=True)
    _gradcheck(head, g, qh)
    _gradcheck(head, g.mean(dim=(2, 3)).detach().requires_grad_(), qh)
    emb = QEmbedding(5).double()
    # b_norm kept inside (0, 1) so the finite-difference probe stays in the valid domain
    q = torch.tensor([[1.0, 0.0, 0.0, 0.5]], dtype=torch.float64, requires_grad=True)
    _gradcheck(lambda v: emb.fc2(torch.relu(emb.fc1(v))), q)


def test_gradcheck_generator_and_discriminator(rng):
    gen = Generator(GeneratorConfig(in_size=(8, 8), base_channels=4, n_downsample=1,
                                    n_res_blocks=1, q_embed_dim=4, attention_reduction=2)).double()
    s = torch.tensor(rng.uniform(0, 1, (1, 3, 8, 8)), requires_grad=True)
    q = random_q(rng, 2)
    _gradcheck(lambda x: gen(x, q), s)
    disc = Discriminator(DiscriminatorConfig(in_size=(8, 8), base_channels=4, n_downsample=1,
                                             q_embed_dim=4)).double()
    x = torch.tensor(rng.uniform(0, 1, (2, 1, 8, 8)), requires_grad=True)
    _gradcheck(lambda v: disc(v, q)[0], x)
    _gradcheck(lambda v: disc(v, q)[1], x)


# --- contracts --------------------------------------------------------------------


def test_cbin_contract_100_pairs(rng):
    cbin = CBIN(8, 16).double()
    for _ in range(100):
        z = torch.tensor(rng.standard_normal((1, 8, 8, 8)) * rng.uniform(0.5, 5) + rng.uniform(-3, 3))
        qh = torch.tensor(rng.standard_normal((1, 16)))
        out = cbin(z, qh)[0]
        bias = cbin.bias_head(qh)[0]
        std = out.std(dim=(1, 2), unbiased=False)
        assert torch.all((std - 1).abs() <= 1e-4)
        assert torch.all((out.mean(dim=(1, 2)) - bias).abs() <= 1e-5)


def test_mmaf_rows_sum_to_one(rng):
    mmaf = MMAF(8, 2).double()
    for _ in range(20):
        zs = [torch.tensor(rng.standard_normal((3, 8, 4, 4)) * 10) for _ in range(3)]
        _, A = mmaf(*zs)
        assert A.shape == (3, 8, 3)
        assert torch.all((A.sum(dim=2) - 1).abs() <= 1e-6)


def test_mmaf_zero_omega2_is_uniform(rng):
    mmaf = MMAF(8, 2).double()
    with torch.no_grad():
        mmaf.omega2.weight.zero_()
        mmaf.omega2.bias.zero_()
    zs = [torch.tensor(rng.standard_normal((2, 8, 4, 4))) for _ in range(3)]
    fused, A = mmaf(*zs)
    assert torch.all((A - 1 / 3).abs() <= 1e-6)
    # uniform weights: shared = mean(z), each z_n + shared, averaged -> 2 * mean(z)
    closed = 2 * (zs[0] + zs[1] + zs[2]) / 3
    assert torch.all((fused - closed).abs() <= 1e-6)


def test_mmaf_rejects_mismatched_shapes():
    mmaf = MMAF(8, 2)
    with pytest.raises(ValueError):
        mmaf(torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 2, 2))
    with pytest.raises(ValueError):
        mmaf(torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 4, 4))


def test_attention_residual_bounds(rng):
    # F + F * w with w in (0, 1): output lies between F and 2F elementwise
    enc = SMAEncoder(8, 1, 4).double()
    x = torch.tensor(rng.standard_normal((2, 1, 8, 8)))
    F_ = enc.backbone(x)
    z = enc(x)
    assert torch.all(z >= F_ - 1e-12) and torch.all(z <= 2 * F_ + 1e-12)


@pytest.fixture(scope="module")
def small_gen():
    return Generator(GeneratorConfig(in_size=(16, 16), base_channels=8, n_downsample=2,
                                     n_res_blocks=2, q_embed_dim=8))


def test_generator_output_shape_and_range(small_gen):
    s = torch.rand(3, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    q = torch.tensor([[0, 0, 0, 0.0], [1, 0, 0, 1.0], [0, 0.6, 0.8, 0.5]])
    out = small_gen(s, q)
    assert out.shape == (3, 1, 16, 16)
    assert out.min() >= 0 and out.max() <= 1


def test_generator_broadcasts_single_structural_stack(small_gen):
    s = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(1))
    q = torch.tensor([[1, 0, 0, 1.0], [0, 1, 0, 0.5]])
    torch.testing.assert_close(small_gen(s, q), small_gen(s.expand(2, -1, -1, -1), q),
                               rtol=0, atol=1e-6)


def test_generator_deterministic_given_seed():
    cfg = GeneratorConfig(in_size=(16, 16), base_channels=8, q_embed_dim=8, seed=5)
    a, b = Generator(cfg), Generator(cfg)
    np.testing.assert_array_equal(flatten_parameters(a), flatten_parameters(b))
    other = Generator(GeneratorConfig(in_size=(16, 16), base_channels=8, q_embed_dim=8, seed=6))
    assert not np.array_equal(flatten_parameters(a), flatten_parameters(other))


def test_generator_depends_on_q(small_gen):
    s = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(2))
    q = torch.tensor([[1, 0, 0, 1.0], [0, 0, 1, 1.0]])
    out = small_gen(s, q)
    assert not torch.equal(out[0], out[1])


def test_generator_rejects_bad_inputs(small_gen):
    s = torch.rand(1, 3, 16, 16)
    with pytest.raises(ValueError):
        small_gen(s, torch.tensor([[1, 0, 0, 1.5]]))
    with pytest.raises(ValueError):
        small_gen(s, torch.tensor([[1, 1, 0, 1.0]]))
    with pytest.raises(ValueError):
        small_gen(torch.rand(1, 3, 32, 32), torch.tensor([[1, 0, 0, 1.0]]))
    with pytest.raises(ValueError):
        small_gen(torch.rand(1, 2, 16, 16), torch.tensor([[1, 0, 0, 1.0]]))


def test_check_q_accepts_b0_and_unit():
    check_q(torch.tensor([[0, 0, 0, 0.0], [0.6, 0.8, 0, 0.3]]))
    with pytest.raises(ValueError):
        check_q(torch.tensor([[0, 0, 0, -0.1]]))
    with pytest.raises(ValueError):
        check_q(torch.zeros(2, 3))


@pytest.mark.parametrize("kwargs", [
    {"base_channels": 0}, {"n_res_blocks": 0}, {"in_size": (30, 30)},
    {"base_channels": 4, "attention_reduction": 8},
])
def test_generator_config_validation(kwargs):
    with pytest.raises(ValueError):
        GeneratorConfig(**kwargs)


def test_discriminator_config_validation():
    with pytest.raises(ValueError):
        DiscriminatorConfig(in_size=(20, 20), n_downsample=3)


def test_flat_parameter_round_trip(small_gen):
    flat = flatten_parameters(small_gen)
    assert flat.dtype == np.dtype("<f4")
    assert flat.size == sum(int(np.prod(s)) for _, s in parameter_layout(small_gen))
    clone = Generator(GeneratorConfig(in_size=(16, 16), base_channels=8, n_downsample=2,
                                      n_res_blocks=2, q_embed_dim=8, seed=99))
    load_flat_parameters(clone, flat)
    s = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(3))
    q = torch.tensor([[0, 0, 1, 0.7]])
    assert torch.equal(clone(s, q), small_gen(s, q))
    with pytest.raises(ValueError):
        load_flat_parameters(clone, flat[:-1])
