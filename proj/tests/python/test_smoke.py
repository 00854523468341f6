import math

import numpy as np
import pytest

care = pytest.importorskip("care_rl")


def small_config():
    c = care.Config()
    for k, v in {"train_count": 40, "l1_count": 10, "l2_count": 10, "l3_count": 10, "total_steps": 4,
                 "eval_interval": 2, "batch_size": 2, "group_size": 4, "embed_dim": 6, "hidden_dim": 8}.items():
        c[k] = v
    return c


def test_config_round_trip():
    c = care.Config()
    c["lambda_cons"] = 0.25
    c["constrained_decoding"] = False
    assert care.Config.from_text(c.to_text()) == c
    assert "gamma_p" in c.keys()
    with pytest.raises(care.ConfigError):
        c["no_such_key"] = 1
    c["ema_alpha"] = 1.0
    with pytest.raises(ValueError):
        c.validate()


def test_dataset_and_oracle_trace(tmp_path):
    d = care.build_splits(3)
    assert len(d.split(care.Level.L1)) == 200
    ep = d.split(care.Level.L2)[0]
    t = care.oracle_trace(ep, d.vocab)
    assert care.format_score(t, d.vocab) == 1.0
    assert care.consistency_oracle(t, ep, d.vocab)
    d.write(tmp_path)
    again = care.read_dataset(tmp_path)
    assert again.split(care.Level.L2)[0].candidates == ep.candidates


def test_policy_sampling_and_logprobs():
    d = care.build_splits(4)
    m = care.ModelSpec(care.Config(), d.vocab)
    p = care.init_params(m, 1)
    assert len(p) == m.num_params
    ep = d.split(care.Level.TRAIN)[0]
    lp = care.next_token_log_probs(m, p, ep, [care.Vocabulary.THINK_OPEN])
    assert math.isclose(np.exp(lp).sum(), 1.0, rel_tol=1e-12)
    t = care.sample_trajectory(m, p, ep, seed=7)
    assert care.logprob_of(m, p, ep, t.tokens) == pytest.approx(t.logprobs, abs=1e-12)
    assert 0.0 < care.reference_likelihood(m, p, ep, t) < 1.0

    arr = p.numpy()
    arr[:] = 0.0
    p.assign(arr)
    assert not p.numpy().any()


def test_reward_phases():
    assert care.normalize_advantages([1, 1, 0, 0]) == [1, 1, -1, -1]
    g = care.care_group([1, 1, 0, 0], [1, 1, 1, 0], [0.9, 0.8, 0.5, 0.1], care.Config())
    assert g["acc_baseline"] == 0.5
    assert g["mask"] == [True, True, False, False]
    assert g["cons_baseline"] == pytest.approx(0.84)
    assert g["consistent"] == [True, False, False, False]
    assert g["rewards"] == pytest.approx([2.5, 2.0, 1.0, 0.0])


def test_training_round_trip(tmp_path):
    c = small_config()
    c["variant"] = "care"
    c["kl_beta"] = 0
    r = care.train(c, care.build_splits(5), str(tmp_path / "run"))
    assert r.step == 4
    assert r.theta.all_finite()
    assert r.log[0].startswith("{")
    assert r.warnings == []
    assert set(r.final_eval) == {"l1", "l2", "l3", "overall", "consistency"}
    step, variant, theta, phi = care.load_checkpoint(tmp_path / "run" / "final.ckpt")
    assert (step, variant) == (4, "CARE")
    assert np.array_equal(theta.numpy(), r.theta.numpy())
    assert np.array_equal(phi.numpy(), r.phi.numpy())


def test_gradcheck():
    passed, n, worst = care.gradcheck(seed=2, cases=6)
    assert passed == n == 6
    assert worst < 1e-4


def test_evaluate_is_deterministic():
    d = care.build_splits(6)
    c = care.Config()
    m = care.ModelSpec(c, d.vocab)
    p = care.init_params(m, 6)
    assert care.evaluate(m, p, d, c) == care.evaluate(m, p, d, c)
