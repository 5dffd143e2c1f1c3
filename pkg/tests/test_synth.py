import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anomattr import synth
from anomattr.errors import IndexOutOfRange, InvalidConfig, MissingColumn
from anomattr.table import load_table, write_table


def test_rate_zero_all_normal():
    _, truth = synth.generate(synth.SynthConfig(length=300, rate=0.0))
    assert not truth.flags.any() and truth.culprits == {} and truth.log == []


def test_same_seed_identical():
    a, ta = synth.generate(synth.SynthConfig(length=500, seed=3))
    b, tb = synth.generate(synth.SynthConfig(length=500, seed=3))
    c, _ = synth.generate(synth.SynthConfig(length=500, seed=4))
    assert a.values.tobytes() == b.values.tobytes()
    assert ta.culprits == tb.culprits
    assert not np.array_equal(a.values, c.values)


def test_within_block_correlation():
    table, _ = synth.generate(synth.SynthConfig(n_features=6, length=10_000, rho=0.8, rate=0.0, seed=2))
    R = np.corrcoef(table.values.T)
    for block in ([0, 1, 2], [3, 4, 5]):
        for i in block:
            for j in block:
                if i < j:
                    assert 0.75 <= R[i, j] <= 0.85
    assert np.abs(R[:3, 3:]).max() < 0.1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["single", "multi"]), st.floats(0.005, 0.1))
def test_truth_matches_log(seed, policy, rate):
    cfg = synth.SynthConfig(n_features=4, length=400, rate=rate, culprit_policy=policy, seed=seed)
    table, truth = synth.generate(cfg)
    clean, _ = synth.generate(synth.SynthConfig(n_features=4, length=400, rate=0.0, seed=seed))
    logged = {}
    for t, f, amount in truth.log:
        logged.setdefault(t, []).append(f)
        assert amount == cfg.magnitude
    assert logged == truth.culprits
    assert set(np.nonzero(truth.flags)[0]) == set(truth.culprits)
    # undoing the log restores a table whose untouched cells match exactly
    undone = table.values.copy()
    for t, f, amount in truth.log:
        undone[t, int(f[1:])] -= amount
    touched = np.zeros_like(undone, dtype=bool)
    for t, f, _ in truth.log:
        touched[t, int(f[1:])] = True
    assert np.all(table.values[~touched] == undone[~touched])
    expected = 1 if policy == "single" else 2
    assert all(len(c) == expected for c in truth.culprits.values())


def test_event_rate_and_culprit_pool():
    cfg = synth.SynthConfig(length=5000, rate=0.02, culprit_features=["f1", "f5"], seed=42)
    _, truth = synth.generate(cfg)
    assert 0.01 <= truth.flags.mean() <= 0.03
    assert {c for cs in truth.culprits.values() for c in cs} <= {"f1", "f5"}


def test_inject():
    table, _ = synth.generate(synth.SynthConfig(length=50, rate=0.0))
    assert np.array_equal(synth.inject(table, 3, "f2", 0.0).values, table.values)
    bumped = synth.inject(table, 3, "f2", 2.5)
    diff = bumped.values - table.values
    assert diff[3, 2] == pytest.approx(2.5) and np.count_nonzero(diff) == 1
    back = synth.inject(synth.inject(table, 7, "f0", 4.0), 7, "f0", -4.0)
    np.testing.assert_allclose(back.values, table.values, atol=1e-15)
    with pytest.raises(IndexOutOfRange):
        synth.inject(table, 50, "f0", 1.0)
    with pytest.raises(MissingColumn):
        synth.inject(table, 0, "nope", 1.0)


def test_timestamps_noleap_five_day():
    ts = synth.noleap_timestamps(146, 5, 1952)
    days = ts.astype("datetime64[D]")
    assert str(days[0]) == "1952-01-01" and str(days[73]) == "1953-01-01"
    assert not any(str(d).endswith("02-29") for d in days)
    assert np.all(np.diff(days) > np.timedelta64(0, "D"))


def test_schema_roundtrip(tmp_path):
    table, _ = synth.generate(synth.SynthConfig(length=200, seed=8))
    write_table(tmp_path / "s.csv", table)
    back = load_table(tmp_path / "s.csv", table.feature_names)
    assert back.values.tobytes() == table.values.tobytes()
    np.testing.assert_array_equal(back.timestamps, table.timestamps)


def test_config_validation_and_dict_roundtrip():
    with pytest.raises(InvalidConfig):
        synth.SynthConfig(rho=1.0).validate()
    with pytest.raises(InvalidConfig):
        synth.SynthConfig(culprit_features=["zz"]).validate()
    with pytest.raises(InvalidConfig):
        synth.config_from_dict({"bogus": 1})
    cfg = synth.SynthConfig(n_features=6, event_length=(2, 4), seed=9)
    assert synth.config_from_dict(synth.config_to_dict(cfg)) == cfg
