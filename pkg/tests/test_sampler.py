import numpy as np
import pytest
import torch

from ddmm import denoiser
from ddmm.errors import NumericFailure, ValidationError
from ddmm.phantom import PhantomConfig, generate_phantom, read_gray
from ddmm.sampler import SamplePair, SamplerConfig, consistency_scores, decode_mask, sample_batch, sample_pair, save_pairs


def randomize_out(net, seed):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        net.out.weight.copy_(0.1 * torch.randn(net.out.weight.shape, generator=gen))
        net.out.bias.copy_(0.01 * torch.randn(net.out.bias.shape, generator=gen))


@pytest.fixture
def live_model(tiny_model):
    randomize_out(tiny_model.image_net, 1)
    randomize_out(tiny_model.mask_net, 2)
    return tiny_model


def test_sampler_config_validation():
    with pytest.raises(ValidationError):
        SamplerConfig(kind="euler")
    with pytest.raises(ValidationError):
        SamplerConfig(eta=1.5)
    assert SamplerConfig().steps_used(100) == 100
    assert SamplerConfig(kind="ddim", ddim_steps=5).steps_used(100) == 5


def test_decode_mask_threshold():
    soft = torch.tensor([-0.5, 0.0, 0.25])
    assert decode_mask(soft).tolist() == [0, 1, 1]


def test_sampling_is_deterministic(live_model):
    a = sample_batch(live_model, 5, 3)
    b = sample_batch(live_model, 5, 3)
    for x, y in zip(a, b):
        assert torch.equal(x.image, y.image)
        assert torch.equal(x.mask_soft, y.mask_soft)
        assert torch.equal(x.mask, y.mask)


def test_pair_fields(live_model):
    pairs = sample_batch(live_model, 10, 3, SamplerConfig(chunk_size=2))
    assert [p.seed for p in pairs] == [10, 11, 12]
    for p in pairs:
        assert p.image.shape == (1, 8, 8)
        assert p.mask.dtype == torch.uint8
        assert set(p.mask.unique().tolist()) <= {0, 1}
        assert float(p.image.abs().max()) <= 1.0
        assert p.sampler_kind == "ddpm" and p.steps_used == 10


def test_single_pair_matches_batch(live_model):
    one = sample_pair(live_model, 4)
    batch = sample_batch(live_model, 4, 1)[0]
    assert torch.equal(one.image, batch.image)
    assert torch.equal(one.mask_soft, batch.mask_soft)


def test_chunking_does_not_change_draws(live_model):
    whole = sample_batch(live_model, 0, 4, SamplerConfig(chunk_size=4))
    split = sample_batch(live_model, 0, 4, SamplerConfig(chunk_size=1))
    for x, y in zip(whole, split):
        assert torch.allclose(x.image, y.image, atol=1e-5)


def test_distinct_seeds_differ(live_model):
    a, b = sample_batch(live_model, 0, 2)
    assert not torch.equal(a.image, b.image)


def test_identical_branches_give_identical_chains(tiny_model):
    randomize_out(tiny_model.image_net, 3)
    tiny_model.mask_net.load_state_dict(tiny_model.image_net.state_dict())
    for cfg in (SamplerConfig(), SamplerConfig(kind="ddim", ddim_steps=4, eta=0.5)):
        for p in sample_batch(tiny_model, 0, 2, cfg):
            assert torch.equal(p.image, p.mask_soft)


def test_unshared_step_noise_decouples_chains(tiny_model):
    randomize_out(tiny_model.image_net, 3)
    tiny_model.mask_net.load_state_dict(tiny_model.image_net.state_dict())
    p = sample_pair(tiny_model, 0, shared_step_noise=False)
    assert not torch.equal(p.image, p.mask_soft)


def test_ddim_eta_zero_full_steps_is_deterministic(live_model):
    cfg = SamplerConfig(kind="ddim", ddim_steps=live_model.schedule.t_max, eta=0.0)
    a = sample_batch(live_model, 3, 2, cfg)
    b = sample_batch(live_model, 3, 2, cfg)
    assert all(torch.equal(x.image, y.image) for x, y in zip(a, b))
    assert a[0].steps_used == live_model.schedule.t_max


def test_bad_requests(live_model):
    with pytest.raises(ValidationError):
        sample_batch(live_model, 0, 0)
    with pytest.raises(ValidationError):
        sample_batch(live_model, -1, 1)
    with pytest.raises(ValidationError):
        sample_batch(live_model, 0, 1, SamplerConfig(kind="ddim", ddim_steps=1))


def test_nan_parameters_are_reported(live_model):
    with torch.no_grad():
        live_model.mask_net.out.bias.fill_(float("nan"))
    with pytest.raises(NumericFailure, match="mask branch"):
        sample_pair(live_model, 0)


def test_non_finite_chain_output_is_reported(live_model):
    live_model.image_net.forward = lambda x, t=None: torch.full_like(x, float("inf"))
    with pytest.raises(NumericFailure, match="seeds 3..3"):
        sample_pair(live_model, 3, clamp=False)


def phantom_pairs(n):
    cfg = PhantomConfig(size=32)
    pairs = []
    for i in range(n):
        image, mask = generate_phantom(cfg, i)
        pairs.append(SamplePair(torch.from_numpy(image), torch.from_numpy(2.0 * mask - 1.0).float(), torch.from_numpy(mask), i, "ddpm", 1))
    return cfg, pairs


def test_consistency_scores_separate_matched_from_shuffled():
    cfg, pairs = phantom_pairs(6)
    matched, shuffled = consistency_scores(pairs, cfg, seed=0)
    assert matched > 0.95
    assert shuffled < matched
    assert consistency_scores(pairs, cfg, seed=0) == (matched, shuffled)


def test_consistency_needs_two_pairs():
    cfg, pairs = phantom_pairs(1)
    with pytest.raises(ValidationError):
        consistency_scores(pairs, cfg)


def test_save_pairs_writes_pgm_files(tmp_path, live_model):
    pairs = sample_batch(live_model, 7, 2)
    manifest = save_pairs(pairs, tmp_path)
    lines = manifest.read_text().splitlines()
    assert lines[0] == "name,seed,sampler,steps,image,mask"
    assert lines[1] == "sample-000007,7,ddpm,10,images/sample-000007.pgm,masks/sample-000007.pgm"
    mask = read_gray(tmp_path / "masks" / "sample-000008.pgm")
    assert set(np.unique(mask).tolist()) <= {0, 255}
    np.testing.assert_array_equal(mask > 0, pairs[1].mask.numpy()[0] > 0)
    image = read_gray(tmp_path / "images" / "sample-000007.pgm")
    assert image.shape == (8, 8)
