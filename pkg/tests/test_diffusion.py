import math

import numpy as np
import pytest
import torch

from dctts.acceptance import enumerated_posterior, kernel_product_error, random_schedule
from dctts.diffusion import (build_linear_schedule, corrupt_with_uniforms, forward_corrupt, forward_step,
                             posterior_probs, q_xt_given_x0, reverse_from_x0_probs, sample, strided_timesteps,
                             transition_matrix, true_posterior, vlb_loss, vlb_terms)
from dctts.errors import ConfigError, InputError


def test_schedule_boundaries():
    s = build_linear_schedule(100, 128)
    assert (s.alpha_bar[0], s.beta_bar[0], s.gamma_bar[0]) == (1.0, 0.0, 0.0)
    assert s.gamma_bar[100] == 0.9
    assert s.K * s.beta_bar[100] == 0.1
    assert s.alpha_bar[100] == 0.0


def test_schedule_two_step_hand_values():
    s = build_linear_schedule(2, 2)
    assert s.gamma[1] == pytest.approx(0.45, abs=1e-15)
    assert s.alpha[1] == pytest.approx(0.5, abs=1e-15)
    assert s.beta[1] == pytest.approx(0.025, abs=1e-15)
    assert s.gamma[2] == pytest.approx(9 / 11, abs=1e-15)
    assert s.alpha[2] == 0.0
    assert s.beta[2] == pytest.approx((1 - 9 / 11) / 2, abs=1e-15)
    # two-step product reproduces the cumulative closed form
    prod = transition_matrix(s, 2) @ transition_matrix(s, 1)
    for x0 in range(2):
        assert np.allclose(prod[:, x0], q_xt_given_x0(s, 2, x0), atol=1e-15)


def test_schedule_rows_sum_to_one():
    for mode in ("cumulative", "per_step"):
        s = build_linear_schedule(50, 16, mode=mode)
        assert np.abs(s.alpha[1:] + s.K * s.beta[1:] + s.gamma[1:] - 1).max() < 1e-12
        assert np.abs(s.alpha_bar + s.K * s.beta_bar + s.gamma_bar - 1).max() < 1e-12


def test_schedule_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        build_linear_schedule(0, 4)
    with pytest.raises(ConfigError):
        build_linear_schedule(10, 1)
    with pytest.raises(ConfigError):
        build_linear_schedule(10, 4, mode="cosine")
    with pytest.raises(ConfigError):
        build_linear_schedule(10, 4, gamma_end=0.95, beta_end=0.2)


def test_transition_matrix_definition():
    s = build_linear_schedule(3, 2)
    s.alpha[1], s.beta[1], s.gamma[1] = 0.5, 0.1, 0.3
    M = transition_matrix(s, 1)
    assert np.allclose(M[:, 0], [0.6, 0.1, 0.3])
    assert np.allclose(M.sum(0), 1.0)
    assert np.all(M[:2, 2] == 0.0)


def test_q_endpoints():
    s = build_linear_schedule(100, 128)
    assert np.array_equal(q_xt_given_x0(s, 0, 5), np.eye(129)[5])
    assert q_xt_given_x0(s, 100, 5)[128] == pytest.approx(0.9, abs=1e-15)


@pytest.mark.parametrize("K,T", [(4, 3), (8, 10)])
def test_closed_form_matches_products(K, T):
    assert kernel_product_error(K, T) < 1e-10


def test_forward_corrupt_identity_at_zero():
    s = build_linear_schedule(10, 4)
    x0 = torch.tensor([0, 1, 2, 3])
    assert torch.equal(forward_corrupt(s, 0, x0, seed=1), x0)


def test_forward_corrupt_monte_carlo():
    s = build_linear_schedule(10, 4)
    n = 100_000
    x = forward_corrupt(s, 6, torch.full((n,), 2), seed=3)
    p = q_xt_given_x0(s, 6, 2)
    freq = np.bincount(x.numpy(), minlength=5) / n
    sigma = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) <= 3 * sigma + 1e-12)


def test_forward_corrupt_rejects_masks():
    s = build_linear_schedule(10, 4)
    with pytest.raises(InputError):
        forward_corrupt(s, 3, torch.tensor([4, 0]), seed=0)


def test_forward_step_mask_absorbing():
    s = build_linear_schedule(10, 4)
    x = torch.full((500,), 4)
    for t in range(1, 11):
        x = forward_step(s, t, x, seed=t)
        assert torch.all(x == 4)


def test_true_posterior_simple_cases():
    s = build_linear_schedule(10, 5)
    assert np.array_equal(true_posterior(s, 1, 3, 2), np.eye(6)[2])
    post = true_posterior(s, 5, 2, 2)
    assert post[5] == 0.0
    assert post.sum() == pytest.approx(1.0, abs=1e-12)


def test_true_posterior_impossible_pair():
    s = build_linear_schedule(1, 3)
    s.beta[1] = s.beta_bar[1] = 0.0
    s.alpha[1] = s.alpha_bar[1] = 1.0 - s.gamma[1]
    with pytest.raises(InputError, match="impossible"):
        true_posterior(s, 1, 1, 0)


def test_true_posterior_enumeration():
    s = random_schedule(3, 3, seed=5)
    worst = 0.0
    for t in range(1, 4):
        for x0 in range(3):
            for x_t in range(4):
                ref = enumerated_posterior(s, t, x_t, x0)
                if ref is not None:
                    worst = max(worst, np.abs(true_posterior(s, t, x_t, x0) - ref).max())
    assert worst < 1e-10


def test_batched_posterior_one_hot_equals_true_posterior():
    s = build_linear_schedule(8, 4)
    x_t = torch.tensor([[0, 1, 4, 3]])
    x0 = torch.tensor([[0, 2, 1, 3]])
    for t in range(2, 9):
        got = posterior_probs(s, torch.tensor([t]), x_t, torch.nn.functional.one_hot(x0, 4).double())[0]
        for i in range(4):
            assert np.allclose(got[i].numpy(), true_posterior(s, t, int(x_t[0, i]), int(x0[0, i])), atol=1e-14)


def test_batched_posterior_normalized_for_random_logits():
    s = build_linear_schedule(20, 6)
    g = torch.Generator().manual_seed(0)
    x_t = torch.randint(0, 7, (3, 10), generator=g)
    probs = torch.softmax(torch.randn(3, 10, 6, generator=g, dtype=torch.float64), -1)
    out = posterior_probs(s, torch.tensor([2, 10, 20]), x_t, probs)
    assert (out.sum(-1) - 1).abs().max() < 1e-12


def test_uniform_logits_average_two_posteriors():
    s = build_linear_schedule(2, 2)
    for x_t in range(3):
        got = posterior_probs(s, torch.tensor([2]), torch.tensor([[x_t]]),
                              torch.full((1, 1, 2), 0.5, dtype=torch.float64))[0, 0].numpy()
        ref = 0.5 * (true_posterior(s, 2, x_t, 0) + true_posterior(s, 2, x_t, 1))
        assert np.allclose(got, ref, atol=1e-14)


def test_batched_matches_reference_for_strided_steps():
    s = build_linear_schedule(20, 4)
    probs = np.array([0.1, 0.2, 0.3, 0.4])
    for x_t in range(5):
        got = posterior_probs(s, torch.tensor([15]), torch.tensor([[x_t]]),
                              torch.tensor(probs)[None, None], prev=torch.tensor([9]))[0, 0].numpy()
        assert np.allclose(got, reverse_from_x0_probs(s, 15, x_t, probs, prev=9), atol=1e-14)


def test_vlb_zero_when_model_is_exact():
    s = build_linear_schedule(10, 4)
    x0 = torch.tensor([[0, 1, 2, 3]])
    x_t = corrupt_with_uniforms(s, torch.tensor([5]), x0, torch.rand(1, 4, dtype=torch.float64))
    logits = torch.log(torch.nn.functional.one_hot(x0, 4).double().clamp_min(1e-300))
    assert float(vlb_loss(s, x0, x_t, torch.tensor([5]), logits)) == pytest.approx(0.0, abs=1e-12)


def test_vlb_nonnegative():
    s = build_linear_schedule(10, 5)
    g = torch.Generator().manual_seed(1)
    for _ in range(5):
        x0 = torch.randint(0, 5, (4, 7), generator=g)
        t = torch.randint(1, 11, (4,), generator=g)
        x_t = corrupt_with_uniforms(s, t, x0, torch.rand(4, 7, generator=g, dtype=torch.float64))
        terms = vlb_terms(s, x0, x_t, t, torch.randn(4, 7, 5, generator=g, dtype=torch.float64))
        assert torch.all(terms >= -1e-14)


def test_vlb_hand_kl():
    # K=2, t=2 of a T=2 schedule with x_t = MASK and x0 = 0: the true posterior over x1
    s = build_linear_schedule(2, 2)
    q = true_posterior(s, 2, 2, 0)
    x0 = torch.tensor([[0]])
    x_t = torch.tensor([[2]])
    got = float(vlb_loss(s, x0, x_t, torch.tensor([2]), torch.zeros(1, 1, 2, dtype=torch.float64)))
    p = posterior_probs(s, torch.tensor([2]), x_t, torch.full((1, 1, 2), 0.5, dtype=torch.float64))[0, 0].numpy()
    assert got == pytest.approx(float(np.sum(q * np.log(q / p))), abs=1e-14)


def test_vlb_hand_kl_three_way():
    # direct KL arithmetic from the stated example: uniform model vs (0.8, 0.1, 0.1)
    q = torch.tensor([0.8, 0.1, 0.1], dtype=torch.float64)
    p = torch.full((3,), 1 / 3, dtype=torch.float64)
    from dctts.diffusion import kl_categorical
    assert float(kl_categorical(q, p)) == pytest.approx(0.8 * math.log(2.4) + 0.2 * math.log(0.3), abs=1e-14)


def test_vlb_t1_is_nll():
    s = build_linear_schedule(10, 3)
    logits = torch.tensor([[[2.0, 0.0, -1.0]]], dtype=torch.float64)
    got = float(vlb_loss(s, torch.tensor([[1]]), torch.tensor([[3]]), torch.tensor([1]), logits))
    assert got == pytest.approx(-float(torch.log_softmax(logits, -1)[0, 0, 1]), abs=1e-14)


def test_strided_timesteps():
    assert strided_timesteps(100, 4) == [100, 75, 50, 25]
    assert strided_timesteps(10, 10) == list(range(10, 0, -1))
    with pytest.raises(ConfigError):
        strided_timesteps(10, 11)


def _uniform_denoiser(K):
    return lambda x, t: torch.zeros(*x.shape, K, dtype=torch.float64)


@pytest.mark.parametrize("steps", [20, 5, 1])
def test_sample_is_mask_free_and_deterministic(steps):
    s = build_linear_schedule(20, 6)
    a = sample(_uniform_denoiser(6), s, 3, 9, steps, seed=4)
    b = sample(_uniform_denoiser(6), s, 3, 9, steps, seed=4)
    assert a.shape == (3, 9)
    assert torch.equal(a, b)
    assert int(a.max()) < 6 and int(a.min()) >= 0
