import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from batt import poisoner as P
from batt import transforms as T
from batt.dataset_io import Dataset, Split
from batt.poisoner import PoisonConfig
from batt.transforms import Kind

from conftest import random_dataset


@pytest.fixture(scope="module")
def big():
    # labels balanced over 10 classes; pixels small so the 50k case stays quick
    return random_dataset(50000, (1, 4, 4), k=10, seed=11)


def test_cardinality_at_five_percent_of_50000(big):
    idx = P.select_poison_indices(big, PoisonConfig())
    assert len(idx) == 2500 and len(np.unique(idx)) == 2500
    assert np.all(np.diff(idx) > 0)


@pytest.mark.parametrize("n,gamma,k", [(50000, 0.05, 2500), (10, 0.05, 1), (30, 0.05, 2), (20, 1.0, 20), (99, 0.5, 50)])
def test_half_up_rounding(n, gamma, k):
    assert P.poison_count(n, gamma) == k


def test_zero_selection_is_an_error():
    with pytest.raises(P.PoisonConfigError):
        P.select_poison_indices(random_dataset(9), PoisonConfig(gamma=0.05))


@pytest.mark.parametrize("bad", [dict(gamma=0.0), dict(gamma=1.5), dict(target_label=-1), dict(theta_star=200.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        PoisonConfig(**bad)


def test_trigger_inside_domain_warns(caplog):
    PoisonConfig(theta_star=5.0)
    assert "inside the benign domain" in caplog.text


def test_target_label_out_of_range():
    with pytest.raises(P.PoisonConfigError):
        P.build_poisoned_dataset(random_dataset(40, k=3), PoisonConfig(target_label=3, gamma=0.1))


def test_full_rate_selects_everything():
    ds = random_dataset(20)
    assert P.select_poison_indices(ds, PoisonConfig(gamma=1.0)).tolist() == list(range(20))


def test_poisoned_set_contract(big):
    cfg = PoisonConfig(seed=5)
    sub = big.subset(np.arange(4000))
    out = P.build_poisoned_dataset(sub, cfg)
    flagged = np.flatnonzero(out.poisoned)
    assert len(out) == len(sub) and len(flagged) == 200
    assert np.array_equal(flagged, P.select_poison_indices(sub, cfg))
    assert np.all(out.labels[flagged] == 1)
    rest = np.flatnonzero(~out.poisoned)
    assert np.array_equal(out.labels[rest], sub.labels[rest])
    # each flagged image is the trigger applied to its original; benign ones use their own stream
    for i in flagged[:5]:
        assert np.array_equal(out.images[i], T.rotate(sub.images[i], 16.0))
    params = P.benign_parameters(len(sub), cfg)
    for i in rest[:5]:
        assert -10 <= params[i] <= 10
        assert np.array_equal(out.images[i], T.rotate(sub.images[i], params[i]))


def test_determinism_and_thread_independence(big):
    cfg = PoisonConfig(seed=9)
    sub = big.subset(np.arange(6000))
    a = P.build_poisoned_dataset(sub, cfg)
    b = P.build_poisoned_dataset(sub, cfg)
    c = P.build_poisoned_dataset(sub, cfg, threads=4)
    assert a.digest() == b.digest() == c.digest()
    assert a.equals(c)


def test_seed_changes_selection_near_hypergeometric_overlap(big):
    overlaps = []
    for s in range(5):
        a = P.select_poison_indices(big, PoisonConfig(seed=2 * s))
        b = P.select_poison_indices(big, PoisonConfig(seed=2 * s + 1))
        overlaps.append(len(np.intersect1d(a, b)))
    # expectation 2500*2500/50000 = 125, standard deviation about 10.6
    assert all(60 <= o <= 190 for o in overlaps)
    assert abs(np.mean(overlaps) - 125) < 15


def test_single_poisoned_sample():
    ds = random_dataset(100, (1, 6, 6))
    out = P.build_poisoned_dataset(ds, PoisonConfig(gamma=0.01))
    assert out.poisoned.sum() == 1


def test_identity_domain_leaves_benign_images_bitwise():
    ds = random_dataset(50, (3, 6, 8))
    cfg = PoisonConfig.translation(theta_star=2, domain_low=0, domain_high=0, gamma=0.1)
    out = P.build_poisoned_dataset(ds, cfg)
    rest = ~out.poisoned
    assert np.array_equal(out.images[rest].view(np.uint32), ds.images[rest].view(np.uint32))
    rot = P.build_poisoned_dataset(ds, PoisonConfig(domain_low=0, domain_high=0, gamma=0.1))
    assert np.array_equal(rot.images[~rot.poisoned], ds.images[~rot.poisoned])


def test_exclude_target_class_knob():
    ds = random_dataset(200, k=4)
    idx = P.select_poison_indices(ds, PoisonConfig(gamma=0.5, exclude_target_class_from_selection=True))
    assert np.all(ds.labels[idx] != 1)
    with pytest.raises(P.PoisonConfigError):
        P.select_poison_indices(ds, PoisonConfig(gamma=0.9, exclude_target_class_from_selection=True))


def test_train_split_only():
    with pytest.raises(P.PoisonConfigError):
        P.select_poison_indices(random_dataset(100, split=Split.TEST), PoisonConfig())


def test_asr_set_drops_target_class():
    test = random_dataset(10000, (1, 4, 4), k=10, split=Split.TEST)
    asr = P.build_asr_test_set(test, PoisonConfig())
    assert len(asr) == 9000
    assert np.all(asr.labels != 1) and np.all(asr.poisoned)
    keep = test.labels != 1
    assert np.array_equal(asr.images, T.rotate(test.images[keep], 16.0))


def test_asr_set_zero_translation_only_filters():
    test = random_dataset(50, (1, 4, 6), k=5, split=Split.TEST)
    asr = P.build_asr_test_set(test, PoisonConfig.translation(theta_star=0, domain_low=-1, domain_high=1, target_label=2))
    assert np.array_equal(asr.images, test.images[test.labels != 2])


def test_asr_set_errors():
    only_target = Dataset(np.zeros((4, 1, 2, 2), np.float32), [1, 1, 1, 1], 2, Split.TEST)
    with pytest.raises(P.PoisonConfigError):
        P.build_asr_test_set(only_target, PoisonConfig())
    with pytest.raises(P.PoisonConfigError):
        P.build_asr_test_set(random_dataset(20), PoisonConfig())


@settings(max_examples=30)
@given(st.integers(20, 300), st.floats(0.01, 1.0), st.integers(0, 2**63), st.sampled_from([Kind.ROTATION, Kind.TRANSLATION]))
def test_cardinality_and_label_properties(n, gamma, seed, kind):
    if P.poison_count(n, gamma) == 0:
        return
    ds = random_dataset(n, (1, 5, 5), k=3, seed=seed % 1000)
    cfg = PoisonConfig(kind=kind, theta_star=16.0 if kind is Kind.ROTATION else 2, domain_low=-1, domain_high=1,
                       gamma=gamma, target_label=2, seed=seed)
    out = P.build_poisoned_dataset(ds, cfg)
    assert out.poisoned.sum() == P.poison_count(n, gamma)
    assert np.all(out.labels[out.poisoned] == 2)
    assert np.array_equal(out.labels[~out.poisoned], ds.labels[~out.poisoned])


def test_config_round_trip():
    cfg = PoisonConfig.translation(seed=3, target_label=4)
    assert PoisonConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() != PoisonConfig().digest()
