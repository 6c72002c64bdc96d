import pytest
import torch

from dctts.denoiser import Denoiser, DenoiserConfig, denoise_logits, sinusoidal_embedding
from dctts.errors import ConfigError, InputError, NumericError
from dctts.gradcheck import check_gradients

D = torch.float64


def small(conditional=True, **kw):
    torch.manual_seed(0)
    cfg = dict(K=6, layers=2, heads=2, width=8, ffn_mult=2, max_positions=16, f=2, conditional=conditional)
    cfg.update(kw)
    return Denoiser(DenoiserConfig(**cfg))


def test_output_shape():
    den = small()
    x = torch.randint(0, 7, (3, 8))
    cond = torch.randn(3, 4, 8, dtype=D)
    assert den(x, torch.tensor([1, 5, 9]), cond).shape == (3, 8, 6)
    assert denoise_logits(den, x[0], torch.tensor(3), cond[0]).shape == (1, 8, 6)


def test_timestep_changes_output():
    den = small()
    x = torch.randint(0, 7, (1, 8))
    cond = torch.randn(1, 4, 8, dtype=D)
    assert not torch.allclose(den(x, torch.tensor([1]), cond), den(x, torch.tensor([100]), cond))


def test_condition_changes_output():
    den = small()
    x = torch.randint(0, 7, (1, 8))
    cond = torch.randn(1, 4, 8, dtype=D)
    assert not torch.allclose(den(x, torch.tensor([3]), cond), den(x, torch.tensor([3]), torch.zeros_like(cond)))


def test_condition_columns_align_with_token_blocks():
    den = small()
    x = torch.randint(0, 7, (1, 8))
    cond = torch.randn(1, 4, 8, dtype=D)
    bumped = cond.clone()
    bumped[0, 3] += 1.0
    # one attention layer per block lets the change spread, but the first
    # block's fuse projection only touches the two positions of column 3
    h0 = den.token_embed(x) + den.position_embed(torch.arange(8))[None]
    temb = den.time_embed(torch.tensor([3]))
    b0 = den.blocks[0]
    a = b0(h0, temb, cond.repeat_interleave(2, dim=1))
    b = b0(h0, temb, bumped.repeat_interleave(2, dim=1))
    changed = (a - b).abs().sum(-1)[0] > 0
    assert changed.tolist() == [False] * 6 + [True, True]


def test_bad_lengths():
    den = small()
    with pytest.raises(InputError):
        den(torch.zeros(1, 7, dtype=torch.long), torch.tensor([1]), torch.zeros(1, 4, 8, dtype=D))
    with pytest.raises(InputError):
        den(torch.zeros(1, 8, dtype=torch.long), torch.tensor([1]), torch.zeros(1, 3, 8, dtype=D))
    with pytest.raises(InputError):
        den(torch.zeros(1, 18, dtype=torch.long), torch.tensor([1]), torch.zeros(1, 9, 8, dtype=D))
    with pytest.raises(InputError):
        den(torch.zeros(1, 8, dtype=torch.long), torch.tensor([1]), None)


def test_unconditional():
    den = small(conditional=False)
    assert den.blocks[0].fuse is None
    assert den(torch.zeros(2, 5, dtype=torch.long), torch.tensor([1, 2])).shape == (2, 5, 6)


def test_config_validation():
    with pytest.raises(ConfigError):
        DenoiserConfig(width=10, heads=3)
    with pytest.raises(ConfigError):
        DenoiserConfig(layers=0)


def test_check_finite():
    den = small()
    with torch.no_grad():
        den.head.weight[0, 0] = float("nan")
    with pytest.raises(NumericError, match="head.weight"):
        den.check_finite()


def test_sinusoidal_embedding():
    e = sinusoidal_embedding(torch.tensor([0, 7]), 9)
    assert e.shape == (2, 9)
    assert torch.allclose(e[0, :4], torch.zeros(4, dtype=D))
    assert torch.allclose(e[0, 4:8], torch.ones(4, dtype=D))


def test_gradients_through_denoiser():
    den = small()
    g = torch.Generator().manual_seed(1)
    x = torch.randint(0, 7, (2, 8), generator=g)
    cond = torch.randn(2, 4, 8, generator=g, dtype=D, requires_grad=True)
    target = torch.randint(0, 6, (2, 8), generator=g)

    def fn():
        logits = den(x, torch.tensor([2, 9]), cond)
        return torch.nn.functional.cross_entropy(logits.reshape(-1, 6), target.reshape(-1))

    tensors = {"cond": cond, "fuse": den.blocks[1].fuse.weight, "ada": den.blocks[0].norm1.to_scale_shift.weight,
               "time": den.time_embed.fc1.weight}
    assert check_gradients(fn, tensors, max_coords=10, seed=1)["all"] < 1e-4
