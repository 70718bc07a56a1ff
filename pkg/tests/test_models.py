import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cyclone_alexnet.errors import CheckpointError, ConfigError
from cyclone_alexnet.models import (
    BY_CODE,
    CATEGORIES,
    DistributedModel,
    GlobalEnsemble,
    bootstrap_subset,
    bootstrap_train_ensemble,
    categorize,
    categorize_many,
    ensemble_predict,
    expert_range,
    expert_ranges,
    expert_subsets,
    load_any,
    moe_predict,
    save_distributed,
    save_ensemble,
)
from cyclone_alexnet.network import NetworkConfig, build_alexnet, save_checkpoint
from cyclone_alexnet.rng import make_rng
from cyclone_alexnet.training import TrainHyper

from fixtures import make_index, random_index
from stubs import ConstModel, PixelGate, gate_images

# Table rows as printed: inclusive integer knot ranges
TABLE_ROWS = [("TD", 0, 33), ("TS", 34, 63), ("H1", 64, 82), ("H2", 83, 95), ("H3", 96, 112), ("H4", 113, 136), ("H5", 137, 10**6)]


def table_lookup(v):
    return next(code for code, lo, hi in TABLE_ROWS if lo <= v <= hi)


def test_categorize_table_rows():
    for v, code in [(20, "TD"), (50, "TS"), (70, "H1"), (90, "H2"), (100, "H3"), (120, "H4"), (150, "H5")]:
        assert categorize(v).code == code
    assert categorize(33.0).code == "TD" and categorize(34.0).code == "TS"
    assert categorize(33.7).code == "TD"


def test_categorize_every_integer():
    for v in range(1, 201):
        assert categorize(v).code == table_lookup(v)
    np.testing.assert_array_equal(
        categorize_many(np.arange(1, 201)), [BY_CODE[table_lookup(v)].level - 1 for v in range(1, 201)]
    )


@pytest.mark.parametrize("bad", [0, -3, float("nan")])
def test_categorize_rejects_nonpositive(bad):
    with pytest.raises(ConfigError):
        categorize(bad)


@given(st.floats(1e-6, 1e4))
def test_categorize_total_and_consistent(v):
    c = categorize(v)
    assert c.lo <= v < c.hi
    assert categorize(c.lo if c.lo > 0 else v) == c


def test_categories_contiguous():
    assert CATEGORIES[0].lo == 0 and math.isinf(CATEGORIES[-1].hi)
    for a, b in zip(CATEGORIES, CATEGORIES[1:]):
        assert a.hi == b.lo


def test_expert_range_examples():
    lo, hi = expert_range("H2", policy="one-third-adjacent")
    assert abs(lo - (83 - 19 / 3)) < 1e-12 and abs(hi - (96 + 17 / 3)) < 1e-12
    assert round(lo, 2) == 76.67 and round(hi, 2) == 101.67
    lo, hi = expert_range("TS", policy="one-third-adjacent")
    assert round(lo, 2) == 22.67 and round(hi, 2) == 70.33
    assert expert_range("TD", policy="none") == (0.0, 34.0)
    assert expert_range("TD", policy="one-third-adjacent")[0] == 0.0
    h4 = expert_range("H4", max_speed=185, policy="one-third-adjacent")
    assert h4[1] == pytest.approx(137 + 48 / 3)
    assert math.isinf(expert_range("H5", policy="one-third-adjacent")[1])
    with pytest.raises(ConfigError):
        expert_range("H6")
    with pytest.raises(ConfigError):
        expert_range("TS", policy="half")


def test_overlap_structure():
    wide = expert_ranges(185, "one-third-adjacent")
    codes = [c.code for c in CATEGORIES]
    for c in CATEGORIES:
        lo, hi = wide[c.code]
        assert lo <= c.lo and hi >= c.hi
    for i, a in enumerate(codes):
        for j, b in enumerate(codes):
            if j <= i:
                continue
            (alo, ahi), (blo, bhi) = wide[a], wide[b]
            overlap = max(alo, blo) < min(ahi, bhi)
            if j == i + 1:
                assert overlap
            else:
                assert not overlap


def test_ensemble_mean_and_identity():
    ens = GlobalEnsemble([ConstModel(10), ConstModel(12), ConstModel(14)])
    np.testing.assert_array_equal(ensemble_predict(ens, np.zeros((2, 4, 4))), [12.0, 12.0])
    m = build_alexnet(NetworkConfig(input_size=32), 0)
    x = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(GlobalEnsemble([m]).predict(x), m.predict(x).astype(np.float64))
    with pytest.raises(ConfigError):
        GlobalEnsemble([])


def test_ensemble_bitwise_stable():
    vals = [0.1, 0.7, 1e8, -1e8 + 3]
    a = GlobalEnsemble([ConstModel(v) for v in vals]).predict(np.zeros((1, 2, 2)))
    b = GlobalEnsemble([ConstModel(v) for v in vals]).predict(np.zeros((1, 2, 2)))
    assert a.tobytes() == b.tobytes()


@given(st.integers(0, 10**6))
def test_bootstrap_covers_speeds(seed):
    idx = random_index(np.random.default_rng(seed))
    sub, drawn = bootstrap_subset(idx, make_rng(seed, 1))
    assert set(sub.speeds) == set(idx.speeds)
    assert len(drawn) >= len(idx.storm_ids)
    again, drawn2 = bootstrap_subset(idx, make_rng(seed, 1))
    assert drawn == drawn2
    assert [s.image_id for s in sub] == [s.image_id for s in again]


def test_bootstrap_duplicates_become_distinct_storms():
    idx = make_index([("A", 30, 2), ("B", 40, 1)])
    rng = make_rng(0, 0)
    for _ in range(20):
        sub, drawn = bootstrap_subset(idx, rng)
        assert len(sub.storm_ids) == len(drawn)
        assert len({s.image_id for s in sub}) == len(sub)


def test_expert_subsets_clipped_data():
    idx = make_index([("A", sp, 1) for sp in range(15, 61)])
    none = expert_subsets(idx, expert_ranges(60, "none"))
    assert sorted(none) == ["TD", "TS"]
    third = expert_subsets(idx, expert_ranges(60, "one-third-adjacent"))
    assert set(third) >= set(none)
    for code, sub in third.items():
        lo, hi = expert_ranges(60, "one-third-adjacent")[code]
        assert all(lo <= s.wind_speed < hi for s in sub)
        if code in none:
            assert len(sub) >= len(none[code])


def test_moe_examples():
    experts = {"TS": ConstModel(60), "H2": ConstModel(90)}
    dm = DistributedModel(PixelGate(), experts)
    final, diag = moe_predict(dm, gate_images([50.0, 20.0, 95.5]))
    np.testing.assert_array_equal(final, [55.0, 20.0, 92.75])
    assert diag["category"].tolist() == ["TS", "TD", "H2"]
    assert diag["fallback"].tolist() == [False, True, False]
    assert np.isnan(diag["expert"][1])
    assert set(dm.fallbacks) == {"TD", "H1", "H3", "H4", "H5"}


@given(st.lists(st.floats(1.0, 250.0), min_size=1, max_size=20))
def test_moe_average_exact(values):
    experts = {c.code: ConstModel(10 * c.level + 0.5) for c in CATEGORIES}
    final, diag = moe_predict(DistributedModel(PixelGate(), experts), gate_images(values))
    g = np.array(values)
    e = np.array([10 * categorize(v).level + 0.5 for v in values])
    np.testing.assert_array_equal(final, (g + e) / 2)
    np.testing.assert_array_equal(diag["gate"], g)


def test_moe_deterministic_routing():
    dm = DistributedModel(PixelGate(), {"TS": ConstModel(60)})
    imgs = gate_images(np.linspace(1, 200, 40))
    a, da = moe_predict(dm, imgs)
    b, db = moe_predict(dm, imgs)
    assert a.tobytes() == b.tobytes() and da["category"].tolist() == db["category"].tolist()


def test_distributed_rejects_unknown_category():
    with pytest.raises(ConfigError):
        DistributedModel(PixelGate(), {"H6": ConstModel(1)})


SMALL = NetworkConfig(input_size=32, conv_channels=(2, 2, 2, 2, 2), fc_widths=(4, 1))


def test_bootstrap_train_ensemble_small(synth_small):
    hyper = TrainHyper(epochs=1, steps_per_epoch=1)
    ens, reports = bootstrap_train_ensemble(synth_small, SMALL, hyper, m=2, seed=3)
    again, _ = bootstrap_train_ensemble(synth_small, SMALL, hyper, m=2, seed=3)
    assert len(ens) == 2 and len(reports) == 2
    assert ens.subsets == again.subsets
    x = synth_small.images()[:5]
    assert ens.predict(x).tobytes() == again.predict(x).tobytes()


def test_parallel_training_matches_serial(synth_small):
    hyper = TrainHyper(epochs=1, steps_per_epoch=1)
    a, _ = bootstrap_train_ensemble(synth_small, SMALL, hyper, m=2, seed=1, jobs=1)
    b, _ = bootstrap_train_ensemble(synth_small, SMALL, hyper, m=2, seed=1, jobs=2)
    x = synth_small.images()[:5]
    assert a.predict(x).tobytes() == b.predict(x).tobytes()


def test_composite_checkpoints(tmp_path):
    members = [build_alexnet(SMALL, k) for k in range(2)]
    ens = GlobalEnsemble(members, seeds=[5, 6], subsets=[["a"], ["b"]])
    save_ensemble(ens, tmp_path / "ens")
    back = load_any(tmp_path / "ens")
    x = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
    assert back.predict(x).tobytes() == ens.predict(x).tobytes()
    assert back.seeds == [5, 6]

    ranges = expert_ranges(185, "one-third-adjacent")
    dm = DistributedModel(ens, {"TS": build_alexnet(SMALL, 9)}, "one-third-adjacent", ranges)
    save_distributed(dm, tmp_path / "dm")
    dm2 = load_any(tmp_path / "dm")
    assert dm2.ranges == ranges and dm2.overlap_policy == "one-third-adjacent"
    assert moe_predict(dm2, x)[0].tobytes() == moe_predict(dm, x)[0].tobytes()

    save_checkpoint(members[0], tmp_path / "single")
    assert load_any(tmp_path / "single").predict(x).tobytes() == members[0].predict(x).tobytes()
    (tmp_path / "junk").mkdir()
    (tmp_path / "junk" / "manifest.json").write_text('{"format": "zip"}')
    with pytest.raises(CheckpointError):
        load_any(tmp_path / "junk")
