import math

import pytest
import torch

from uaagan.discriminator import build_discriminator
from uaagan.errors import ConfigurationError, TrainingError
from uaagan.generator import GeneratorSpec, build_generator, perturb
from uaagan.losses import LossWeights
from uaagan.trainer import (HISTORY_FIELDS, TrainConfig, decay_milestones, init_state, load_checkpoint,
                            lr_at_epoch, mine_hard_negatives, read_history, save_checkpoint, train,
                            train_step, write_history)


def test_mining_collinear():
    f = torch.tensor([[0.0], [1.0], [5.0]])
    assert mine_hard_negatives(f).tolist() == [2, 2, 0]


def test_mining_two_identical_one_distant():
    f = torch.tensor([[1.0, 1.0], [1.0, 1.0], [9.0, -3.0]])
    neg = mine_hard_negatives(f).tolist()
    assert neg[0] == 2 and neg[1] == 2


def test_mining_all_identical_tie_rule():
    f = torch.ones(4, 3)
    assert mine_hard_negatives(f).tolist() == [1, 0, 0, 0]


def test_mining_errors_and_validity():
    with pytest.raises(ConfigurationError):
        mine_hard_negatives(torch.ones(1, 3))
    f = torch.randn(17, 5)
    neg = mine_hard_negatives(f, "cosine")
    assert all(0 <= j < 17 and j != i for i, j in enumerate(neg.tolist()))


def test_decay_milestones_scaling():
    assert decay_milestones(TrainConfig()) == [150, 200]
    assert decay_milestones(TrainConfig(epochs=200)) == [60, 80]
    assert decay_milestones(TrainConfig(epochs=20)) == [6, 8]
    assert decay_milestones(TrainConfig(epochs=10, decay_epochs=[2, 5])) == [2, 5]


def test_lr_closed_form():
    cfg = TrainConfig(epochs=200)
    lrs = [lr_at_epoch(1e-3, e, cfg) for e in range(200)]
    assert lrs[:60] == [1e-3] * 60
    assert all(v == pytest.approx(0.9e-3, rel=1e-12) for v in lrs[60:80])
    assert all(v == pytest.approx(0.81e-3, rel=1e-12) for v in lrs[80:])


@pytest.mark.parametrize("kw", [dict(batch_size=1), dict(lr_g=0.0), dict(epochs=10, decay_epochs=[3, 10]),
                                dict(recon_mode="l1"), dict(epsilon=0.0), dict(decay_factor=1.5)])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw).validate()


def _cfg(**kw):
    base = dict(epochs=2, batch_size=8, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_train_step_bookkeeping_and_frozen_target(tiny_data, random_target):
    x, _ = tiny_data
    state = init_state(_cfg())
    before = {k: v.clone() for k, v in random_target.state_dict().items()}
    _, rec = train_step(state, x[:8], random_target)
    w = state.config.weights
    assert abs(rec.total_g - (rec.gan_g + w.lambda_r * rec.recon + w.lambda_m * rec.metric)) <= 1e-6
    assert all(math.isfinite(v) for v in rec.as_dict().values())
    assert all(torch.equal(before[k], v) for k, v in random_target.state_dict().items())
    with torch.no_grad():
        delta, x_adv = perturb(state.generator, x[:8], 0.1)
    assert float(delta.abs().max()) <= 0.1
    assert 0 <= float(x_adv.min()) and float(x_adv.max()) <= 1


def test_train_step_deterministic(tiny_data, random_target):
    x, _ = tiny_data
    recs = [train_step(init_state(_cfg()), x[:8], random_target)[1] for _ in range(2)]
    assert recs[0] == recs[1]


def test_train_step_nonfinite_aborts(tiny_data, random_target):
    x, _ = tiny_data
    state = init_state(_cfg())
    with torch.no_grad():
        state.generator.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingError) as info:
        train_step(state, x[:8], random_target)
    assert "step" in info.value.diagnostics


def test_epochs_zero(random_target):
    init = build_generator(seed=3)
    gen, hist = train(_cfg(epochs=0), torch.rand(8, 3, 32, 32), random_target)
    assert hist == []
    assert all(torch.equal(a, b) for a, b in zip(gen.state_dict().values(), init.state_dict().values()))


def test_train_errors(random_target):
    with pytest.raises(ConfigurationError):
        train(_cfg(), torch.zeros(0, 3, 32, 32), random_target)
    with pytest.raises(ConfigurationError):
        train(_cfg(), torch.rand(4, 3, 32, 32), random_target)


def test_history_schedule_and_drop_last(tiny_data, random_target):
    x, _ = tiny_data  # 36 images, batch 8: 4 full batches, 4 images dropped
    cfg = _cfg(epochs=4, decay_epochs=[1, 3])
    _, hist = train(cfg, x, random_target)
    assert len(hist) == 16
    assert [r["step"] for r in hist] == list(range(16))
    assert [r["lr_g"] for r in hist[::4]] == pytest.approx([1e-3, 0.9e-3, 0.9e-3, 0.81e-3], rel=1e-12)
    assert [r["lr_d"] for r in hist[::4]] == pytest.approx([4e-3, 3.6e-3, 3.6e-3, 3.24e-3], rel=1e-12)
    assert all(math.isfinite(r[k]) for r in hist for k in HISTORY_FIELDS)


def test_uaag_never_touches_discriminator(tiny_data, random_target, tmp_path):
    x, _ = tiny_data
    cfg = _cfg(ablate_discriminator=True)
    _, hist = train(cfg, x, random_target, checkpoint_dir=tmp_path)
    init = build_discriminator(seed=cfg.seed + 1).state_dict()
    saved = load_checkpoint(tmp_path / "last.ckpt").discriminator.state_dict()
    assert all(torch.equal(init[k], saved[k]) for k in init)
    assert all(r["gan_g"] == 0.0 and r["gan_d"] == 0.0 for r in hist)


def test_straight_through_and_flip_options_run(tiny_data, random_target):
    x, _ = tiny_data
    _, hist = train(_cfg(epochs=1, straight_through_clip=True, flip_augment=True, recon_mode="l2"),
                    x, random_target)
    assert len(hist) == 4


def test_resume_matches_uninterrupted(tiny_data, random_target, tmp_path):
    x, _ = tiny_data
    cfg = _cfg(epochs=4, checkpoint_every=1)
    _, full = train(cfg, x, random_target, checkpoint_dir=tmp_path / "a")
    state = load_checkpoint(tmp_path / "a" / "epoch_0002.ckpt")
    assert state.epoch == 2 and len(state.history) == 8
    gen, resumed = train(_cfg(epochs=4, checkpoint_every=1), x, random_target, state=state,
                         checkpoint_dir=tmp_path / "b")
    assert resumed == full
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()


def test_two_runs_identical(tiny_data, random_target, tmp_path):
    x, _ = tiny_data
    paths = []
    for name in ("r1", "r2"):
        _, hist = train(_cfg(), x, random_target)
        paths.append(write_history(hist, tmp_path / f"{name}.csv"))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert read_history(paths[0]) == hist


def test_epsilon_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        init_state(_cfg(), GeneratorSpec(epsilon=0.05))


def test_weights_from_dict():
    assert TrainConfig(weights=dict(lambda_r=1.0, lambda_m=2.0)).weights == LossWeights(1.0, 2.0)
