import filecmp
import json

import numpy as np
import pytest
from experiments import PLANTED, SEEDS, median_auc, related_transfer, variant_aucs

from boardcast import dataset as ds
from boardcast import synthgen as sg


def tiny(seed=0, **kw):
    periods = (sg.SynthPeriod("a", 30), sg.SynthPeriod("b", 30, static_strength=1.0))
    return sg.SynthConfig(seed=seed, n_catchments=3, buildings_per_catchment=2, periods=periods, **kw)


def same_tree(a, b) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_identical_configs_byte_identical(tmp_path):
    sg.generate(tiny(3)).write(tmp_path / "x")
    sg.generate(tiny(3)).write(tmp_path / "y")
    assert same_tree(tmp_path / "x", tmp_path / "y")


def test_seed_changes_files(tmp_path):
    sg.generate(tiny(3)).write(tmp_path / "x")
    sg.generate(tiny(4)).write(tmp_path / "y")
    assert (tmp_path / "x/c000/waits.csv").read_bytes() != (tmp_path / "y/c000/waits.csv").read_bytes()


def test_written_layout(tmp_path):
    sg.generate(tiny()).write(tmp_path)
    assert (tmp_path / "periods.csv").read_text().splitlines()[0] == "name,start,end"
    for name, header in [("waits", ds.WAITS_HEADER), ("cases", ds.CASES_HEADER), ("static", ds.STATIC_HEADER)]:
        assert (tmp_path / f"c000/{name}.csv").read_text().splitlines()[0] == ",".join(header)
    truth = json.loads((tmp_path / "ground_truth.json").read_text())
    assert set(truth["coefficients"]["static_weights"]) == set(ds.load_dataset(tmp_path).catchments["c000"].profile.slot_names())


@pytest.mark.parametrize(
    "kw",
    [
        dict(periods=(sg.SynthPeriod("a", 0),)),
        dict(periods=()),
        dict(label_noise=1.5),
        dict(periods=(sg.SynthPeriod("a", 10, baseline=1.0),)),
        dict(beta_cases=float("inf")),
        dict(periods=(sg.SynthPeriod("a", 10, shock_scale=-1.0),)),
        dict(dominant_feature="nope"),
        dict(n_catchments=0),
    ],
)
def test_degenerate_configs(kw):
    with pytest.raises(sg.SynthConfigError):
        sg.SynthConfig(**kw)


def test_config_dict_round_trip():
    cfg = tiny(5, label_noise=0.1)
    assert sg.SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("missing", [0.0, 0.05])
@pytest.mark.parametrize("horizon", [3, 14])
def test_round_trip_through_files(tmp_path, missing, horizon):
    gen = sg.generate(tiny(1, missing_hour_rate=missing))
    gen.write(tmp_path)
    rule = ds.LabelRule(horizon, 17 / 24)
    internal = gen.to_dataset().windows(rule)
    loaded = ds.load_dataset(tmp_path).windows(rule)
    assert internal.keys() == loaded.keys()
    for p in internal:
        a, b = internal[p], loaded[p]
        assert len(a) == len(b) > 0
        for x, y in zip(a, b):
            assert (x.anchor_date, x.catchment, x.label) == (y.anchor_date, y.catchment, y.label)
            assert x.temporal.tobytes() == y.temporal.tobytes() and x.static.tobytes() == y.static.tobytes()


def test_periods_are_contiguous():
    gen = sg.generate(tiny())
    a, b = gen.periods
    assert (b.start - a.end).days == 1 and (a.end - a.start).days == 29


def test_label_noise_changes_only_breaches():
    clean, noisy = sg.generate(tiny(2)), sg.generate(tiny(2, label_noise=0.2))
    assert clean.cases["c000"].values.tolist() == noisy.cases["c000"].values.tolist()
    assert [r.breached for r in clean.waits["c000"]] != [r.breached for r in noisy.waits["c000"]]


def test_dominant_feature_weight():
    gen = sg.generate(tiny(dominance=4.0))
    assert gen.truth["coefficients"]["static_weights"]["resident_transiency"] == 4.0


# -- related pairs ---------------------------------------------------------------------------


def test_relatedness_one_identical_coefficients():
    src, tgt = sg.make_related_pair(tiny(7), 1.0)
    assert src.coefficients.vector().tobytes() == tgt.coefficients.vector().tobytes()
    assert [r.breached for r in src.waits["c000"]] != [r.breached for r in tgt.waits["c000"]]


def test_relatedness_zero_uncorrelated():
    pairs = [sg.make_related_pair(tiny(s), 0.0) for s in range(150)]
    src = np.stack([p[0].coefficients.vector() for p in pairs])
    tgt = np.stack([p[1].coefficients.vector() for p in pairs])
    varying = [j for j in range(src.shape[1]) if src[:, j].std() > 0 and tgt[:, j].std() > 0]
    corr = np.array([np.corrcoef(src[:, j], tgt[:, j])[0, 1] for j in varying])
    assert len(varying) > 10
    assert np.mean(np.abs(corr)) < 0.12 and np.max(np.abs(corr)) < 0.35


def test_relatedness_interpolates():
    cfg = tiny(9)
    src, tgt = sg.make_related_pair(cfg, 0.5)
    _, fresh = sg.make_related_pair(cfg, 0.0)
    np.testing.assert_allclose(tgt.coefficients.vector(), 0.5 * src.coefficients.vector() + 0.5 * fresh.coefficients.vector(), atol=1e-12)


def test_relatedness_range():
    with pytest.raises(sg.SynthConfigError):
        sg.make_related_pair(tiny(), 1.5)


# -- learned-model oracles (seeded, 10 seeds each) --------------------------------------------

ABLATION = (("beta_cases", 0.0), ("beta_static", 0.0))


@pytest.mark.slow
@pytest.mark.parametrize("horizon", [3, 14])
def test_ablation_cases_add_nothing(horizon):
    deltas = []
    for s in SEEDS:
        r = variant_aucs(s, horizon, ABLATION, (PLANTED,), ("HistoryOnly", "HistoryPlusCases"))
        deltas.append(r[(PLANTED, "HistoryPlusCases")] - r[(PLANTED, "HistoryOnly")])
    assert np.median(deltas) < 0.03, deltas


@pytest.mark.slow
def test_planted_static_lifts_full_over_cases():
    gap = median_auc(14, PLANTED, "Full") - median_auc(14, PLANTED, "HistoryPlusCases")
    assert gap >= 0.05, gap


@pytest.mark.slow
def test_transfer_benefit_grows_with_relatedness():
    def delta(r):
        return float(np.median([a - b for a, b, _ in (related_transfer(s, r) for s in SEEDS)]))

    assert delta(0.9) >= delta(0.1), (delta(0.9), delta(0.1))
