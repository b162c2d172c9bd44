import pytest
import torch

from uaagan.discriminator import DiscriminatorSpec, build_discriminator, discriminator_forward
from uaagan.errors import ConfigurationError, ShapeError


def expected_discriminator_params(spec: DiscriminatorSpec):
    k, cin, total = spec.kernel_size, spec.input_channels, 0
    for cout in spec.conv_blocks:
        total += cout * cin * k * k + cout + 2 * cout  # conv + bias + BN affine
        cin = cout
    return total + cin * spec.head_kernel_size ** 2 + 1


def test_param_count():
    d = build_discriminator()
    n = sum(p.numel() for p in d.parameters())
    # 392 + 16, 2064 + 32, 8224 + 64, head 289
    assert n == expected_discriminator_params(DiscriminatorSpec()) == 11081


def test_same_seed_identical():
    a, b = build_discriminator(seed=4).state_dict(), build_discriminator(seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("slope", [1.5, 0.0, -0.1])
def test_bad_leaky_slope(slope):
    with pytest.raises(ConfigurationError):
        DiscriminatorSpec(leaky_slope=slope).validate()


def test_scores_shape_and_range():
    d = build_discriminator()
    s = discriminator_forward(d, torch.rand(5, 3, 64, 64))
    assert s.shape == (5,)
    assert bool(((s > 0) & (s < 1)).all())


def test_zero_head_gives_half():
    d = build_discriminator()
    with torch.no_grad():
        d.head.weight.zero_()
        d.head.bias.zero_()
    s = discriminator_forward(d, torch.rand(3, 3, 32, 32))
    assert torch.equal(s, torch.full((3,), 0.5))


def test_duplicates_score_equal_in_eval():
    d = build_discriminator().eval()
    x = torch.rand(1, 3, 32, 32).repeat(4, 1, 1, 1)
    s = discriminator_forward(d, x)
    assert torch.equal(s, s[:1].expand(4))


def test_too_small_input():
    with pytest.raises(ShapeError):
        discriminator_forward(build_discriminator(), torch.rand(1, 3, 4, 4))


def test_discriminator_gradcheck_double():
    d = build_discriminator(DiscriminatorSpec(conv_blocks=[2, 3]), dtype=torch.float64).train()
    x = torch.rand(3, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: discriminator_forward(d, t), (x,), eps=1e-6, atol=1e-8, rtol=1e-4)
    # parameters too
    params = tuple(p for p in d.parameters())

    def f(*ps):
        return torch.func.functional_call(d, {n: p for (n, _), p in zip(d.named_parameters(), ps)}, (x.detach(),))

    assert torch.autograd.gradcheck(f, tuple(p.detach().clone().requires_grad_(True) for p in params),
                                    eps=1e-6, atol=1e-8, rtol=1e-4)
