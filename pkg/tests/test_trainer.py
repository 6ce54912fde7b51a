import numpy as np
import pytest

from calpref import seeding
from calpref.diffmodel import init_params, sample
from calpref.errors import DegenerateSet, DivergenceDetected, NonConvergence
from calpref.pairing import select_all
from calpref.reward import calibrate
from calpref.schedule import NoiseSchedule
from calpref.toy import conflicting_rewards, single_gaussian
from calpref.trainer import (PretrainConfig, TrainConfig, finetune, generate_candidates, pretrain, sweep_beta,
                             warmup_lr)

RF = NoiseSchedule("rectified_flow")


@pytest.fixture(scope="module")
def setup():
    bench = conflicting_rewards(n_prompts=4)
    cfg = PretrainConfig(max_steps=300, batch_size=64, hidden=(16, 16), energy_threshold=None)
    ref = pretrain(cfg, bench, RF).params.frozen()
    cands = generate_candidates(ref, bench, 8, 0, RF, steps=10)
    pools = select_all([calibrate(c) for c in cands], "frs")
    return bench, ref, cands, pools


def small_train(**kw):
    base = dict(max_steps=30, eval_every=10, batch_size=16, warmup_steps=5, val_samples=4, sampler_steps=5)
    base.update(kw)
    return TrainConfig(**base)


def test_warmup_exact():
    for s in range(1, 200):
        assert warmup_lr(1e-3, s, 200) == 1e-3 * s / 200
    assert warmup_lr(1e-3, 200, 200) == 1e-3
    assert warmup_lr(1e-3, 1, 0) == 1e-3


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_steps=10, eval_every=20)
    with pytest.raises(ValueError):
        TrainConfig(beta=0)
    with pytest.raises(ValueError):
        TrainConfig(objective="kto")


def test_generate_candidates(setup):
    bench, ref, cands, _ = setup
    with pytest.raises(DegenerateSet):
        generate_candidates(ref, bench, 1, 0, RF, steps=2)
    assert generate_candidates(ref, bench, 2, 0, RF, steps=2)[0].n == 2
    for n in (8, 16, 32):
        c = generate_candidates(ref, bench, n, 5, RF, steps=3)
        assert all(x.n == n for x in c) and len(c) == 4
    again = generate_candidates(ref, bench, 8, 0, RF, steps=10)
    for a, b in zip(cands, again):
        assert np.array_equal(a.samples, b.samples) and np.array_equal(a.scores, b.scores)


def test_generate_candidates_subset_matches(setup):
    bench, ref, cands, _ = setup
    sub = generate_candidates(ref, bench, 8, 0, RF, steps=10, prompts=[bench.prompts[2]])
    assert np.array_equal(sub[0].samples, cands[2].samples)


def test_lr_zero_keeps_reference(setup):
    bench, ref, cands, pools = setup
    params, log = finetune(small_train(lr=0.0), ref, pools, cands, bench, RF)
    assert np.array_equal(params.theta, ref.theta)
    assert all(np.all(e.win_rates == 0.5) for e in log.evals)


def test_determinism_and_reference_immutability(setup):
    bench, ref, cands, pools = setup
    digest = ref.digest()
    p1, l1 = finetune(small_train(), ref, pools, cands, bench, RF)
    p2, l2 = finetune(small_train(), ref, pools, cands, bench, RF)
    assert ref.digest() == digest
    assert np.array_equal(p1.theta, p2.theta)
    assert l1.to_csv() == l2.to_csv()


def test_chosen_step_maximizes_validation(setup):
    bench, ref, cands, pools = setup
    _, log = finetune(small_train(lr=3e-3, beta=0.3), ref, pools, cands, bench, RF)
    means = {e.step: e.mean for e in log.evals}
    assert [e.step for e in log.evals] == [0, 10, 20, 30]
    assert means[log.chosen_step] == max(means.values())
    csv = log.to_csv("h")
    assert csv.startswith("# schema_version=1 config_hash=h")
    assert len(csv.strip().splitlines()) == 2 + 1 + 30


def test_ipo_equals_capo_with_unit_gaps(setup):
    bench, ref, cands, pools = setup
    _, a = finetune(small_train(objective="ipo", max_steps=100, eval_every=100), ref, pools, cands, bench, RF,
                    loss_only_steps=True)
    _, b = finetune(small_train(objective="capo", delta_override=1.0, max_steps=100, eval_every=100), ref, pools,
                    cands, bench, RF, loss_only_steps=True)
    assert len(a.losses) == 100
    assert np.max(np.abs(np.array(a.losses) - np.array(b.losses))) <= 1e-12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(setup):
    bench, ref, cands, pools = setup
    with pytest.raises(DivergenceDetected) as exc:
        finetune(small_train(lr=1e300, warmup_steps=0), ref, pools, cands, bench, RF, loss_only_steps=True)
    assert "lr=1e+300" in str(exc.value)


def test_sweep_beta_picks_best(setup):
    bench, ref, cands, pools = setup
    (beta, _, _, score), runs = sweep_beta(small_train(lr=3e-3), [0.3, 3.0], ref, pools, cands, bench, RF)
    assert score == max(r[3] for r in runs)
    assert beta in (0.3, 3.0)


def test_pretrain_zero_steps_is_init():
    bench = conflicting_rewards(n_prompts=2)
    cfg = PretrainConfig(max_steps=0, hidden=(8,), energy_threshold=None)
    res = pretrain(cfg, bench, RF)
    expected = init_params(res.params.arch, int(seeding.stage_rng(0, seeding.INIT).integers(2**63)))
    assert np.array_equal(res.params.theta, expected.theta)


def test_pretrain_deterministic():
    bench = conflicting_rewards(n_prompts=2)
    cfg = PretrainConfig(max_steps=40, batch_size=32, hidden=(8,), energy_threshold=None)
    assert np.array_equal(pretrain(cfg, bench, RF).losses, pretrain(cfg, bench, RF).losses)


def test_pretrain_nonconvergence_reported():
    bench = conflicting_rewards(n_prompts=2)
    cfg = PretrainConfig(max_steps=5, batch_size=32, hidden=(8,), energy_threshold=1e-6, eval_samples=64,
                         sampler_steps=5)
    with pytest.raises(NonConvergence) as exc:
        pretrain(cfg, bench, RF)
    assert exc.value.result.energy > 1e-6


def test_pretrain_single_gaussian_moments():
    mean = np.array([1.0, -2.0])
    cov = np.array([[0.6, 0.25], [0.25, 0.4]])
    bench = single_gaussian(mean, cov)
    cfg = PretrainConfig(max_steps=3000, batch_size=256, hidden=(64, 64), energy_threshold=0.05)
    res = pretrain(cfg, bench, RF)
    xs = sample(res.params, "p00", 10000, steps=100, seed=11, schedule=RF)
    assert np.all(np.abs(xs.mean(axis=0) - mean) <= 0.05 * np.abs(mean))
    emp = np.cov(xs.T)
    assert np.all(np.abs(emp - cov) <= 0.05 * np.abs(cov))
