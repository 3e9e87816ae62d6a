import datetime as dt
import math

import numpy as np
import pytest

from boardcast import dataset as ds
from boardcast import model as M
from boardcast import train as T
from boardcast.metrics import auc

D0 = dt.date(2021, 1, 1)


def chain(n, L=7, H=14, labels=None):
    """One sample per day from ``D0``; labels default to alternating."""
    out = []
    for i in range(n):
        a = D0 + dt.timedelta(days=i + L - 1)
        y = labels[i] if labels is not None else i % 2
        out.append(ds.WindowSample(np.zeros((L, 1)), np.zeros(0), y, a, a + dt.timedelta(days=H)))
    return out


def separable(n, seed):
    """Breach-fraction windows whose level decides the label with a wide margin."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    y[:2] = [0, 1]
    out = []
    for i in range(n):
        level = 0.75 if y[i] else 0.25
        t = np.clip(level + rng.normal(scale=0.05, size=(7, 1)), 0, 1)
        a = D0 + dt.timedelta(days=i)
        out.append(ds.WindowSample(t, np.zeros(0), int(y[i]), a, a + dt.timedelta(days=3)))
    return out


# -- split ------------------------------------------------------------------------


def test_split_with_purge_enumerated():
    tr, va = T.split_chronological(chain(100), 0.8)
    anchors = [(s.anchor_date - D0).days - 5 for s in tr]  # 1-based anchor index
    assert anchors == list(range(1, 61))
    assert [(s.anchor_date - D0).days - 5 for s in va] == list(range(81, 101))


def test_split_degenerate():
    with pytest.raises(T.SplitError):
        T.split_chronological(chain(10), 0.99)
    with pytest.raises(T.SplitError):
        T.split_chronological(chain(10), 0.8)  # purge swallows every training sample


def test_split_single_class_passes_through():
    tr, va = T.split_chronological(chain(100, labels=[1] * 100), 0.8)
    assert tr and va
    assert auc(np.zeros(len(va)), [s.label for s in va]).auc is None


@pytest.mark.parametrize("n,frac,H,L", [(100, 0.8, 14, 7), (60, 0.5, 3, 7), (200, 0.7, 7, 3), (80, 0.9, 1, 1)])
def test_purged_split_no_overlap(n, frac, H, L):
    tr, va = T.split_chronological(chain(n, L, H), frac)
    last_label = max(s.label_date for s in tr)
    assert all(s.input_start > last_label for s in va)


def test_budget_keeps_latest_days():
    tr = chain(30)
    kept = T.limit_budget(tr, 10)
    assert [s.anchor_date for s in kept] == [s.anchor_date for s in tr[-10:]]
    assert T.limit_budget(tr, None) == tr


# -- loss -------------------------------------------------------------------------


def test_bce_examples():
    assert T.bce_loss([0.5, 0.5, 0.5], [1, 0, 1]) == pytest.approx(math.log(2), abs=1e-15)
    assert T.bce_loss([1.0, 0.0], [1, 0]) == pytest.approx(0.0, abs=1e-11)
    assert T.bce_loss([0.9, 0.2], [1, 0]) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-15)
    with pytest.raises(ValueError):
        T.bce_loss([0.5], [1, 0])


def test_class_weight_threshold():
    assert T.class_weight(np.array([1, 0, 0, 0]), 3.0) == 1.0
    assert T.class_weight(np.array([1, 0, 0, 0, 0]), 3.0) == 4.0
    assert T.class_weight(np.zeros(5), 3.0) == 1.0


def test_config_validation():
    for bad in (dict(split_fraction=1.0), dict(early_stop_patience=0), dict(learning_rate=0.0)):
        with pytest.raises(ValueError):
            T.TrainConfig(**bad)


# -- training ----------------------------------------------------------------------


def test_zero_epochs_is_identity():
    m = M.build("HistoryOnly", seed=0)
    out, man = T.train(m, separable(40, 0), separable(20, 1), T.TrainConfig(epochs_max=0))
    assert out.same_params(m) and man.stop_epoch == 0


def test_separable_reaches_perfect_auc():
    m = M.build("HistoryOnly", seed=0)
    out, _ = T.train(m, separable(120, 0), separable(60, 1), T.TrainConfig(epochs_max=200, seed=0))
    assert auc(T.evaluate(out, separable(60, 1)), [s.label for s in separable(60, 1)]).auc == 1.0


def test_loss_decreases_on_most_seeds():
    wins = 0
    for seed in range(10):
        cfg = T.TrainConfig(epochs_max=10, seed=seed, early_stop_patience=100)
        _, man = T.train(M.build("HistoryOnly", seed=seed), separable(120, seed), separable(40, seed + 50), cfg)
        wins += man.train_loss[9] < man.train_loss[0]
    assert wins >= 9


def test_freeze_all_layers_is_identity():
    m = M.build("HistoryOnly", seed=0)
    cfg = T.TrainConfig(epochs_max=5, freeze_mask=frozenset(m.layers))
    out, _ = T.train(m, separable(40, 0), separable(20, 1), cfg)
    assert out.same_params(m)


def test_freeze_some_layers():
    m = M.build("HistoryOnly", seed=0)
    cfg = T.TrainConfig(epochs_max=5, freeze_mask=frozenset({"temporal.1.lstm"}), early_stop_patience=100)
    out, _ = T.train(m, separable(40, 0), separable(20, 1), cfg)
    lstm_a, lstm_b = m.layers["temporal.1.lstm"].tensors, out.layers["temporal.1.lstm"].tensors
    assert all(lstm_a[k].tobytes() == lstm_b[k].tobytes() for k in lstm_a)
    assert not np.array_equal(m.layers["head.1.dense"].tensors["weight"], out.layers["head.1.dense"].tensors["weight"])


def test_unknown_freeze_layer():
    with pytest.raises(ValueError, match="unknown layers"):
        T.train(M.build("HistoryOnly", seed=0), separable(10, 0), separable(10, 1), T.TrainConfig(freeze_mask={"x.0.dense"}))


def test_training_deterministic(tmp_path):
    cfg = T.TrainConfig(epochs_max=8, seed=4)
    a, ma = T.train(M.build("HistoryOnly", seed=4), separable(60, 0), separable(20, 1), cfg)
    b, mb = T.train(M.build("HistoryOnly", seed=4), separable(60, 0), separable(20, 1), cfg)
    assert M.to_json(a) == M.to_json(b)
    assert ma.train_loss == mb.train_loss and ma.val_auc == mb.val_auc
    assert ma.data_fingerprint == mb.data_fingerprint


def test_best_epoch_restored():
    cfg = T.TrainConfig(epochs_max=30, seed=0, early_stop_patience=3)
    out, man = T.train(M.build("HistoryOnly", seed=0), separable(60, 0), separable(30, 1), cfg)
    va = separable(30, 1)
    best = max(a for a in man.val_auc if a is not None)
    assert auc(T.evaluate(out, va), [s.label for s in va]).auc == best
    assert man.val_auc[man.best_epoch - 1] == best


def test_single_class_validation_falls_back_to_loss():
    va = [s for s in separable(60, 1) if s.label == 0]
    _, man = T.train(M.build("HistoryOnly", seed=0), separable(40, 0), va, T.TrainConfig(epochs_max=3))
    assert man.criterion == "neg_val_loss" and man.val_auc == [None] * man.stop_epoch


def test_non_finite_loss_aborts_with_hint():
    tr = separable(20, 0)
    tr[0].temporal[0, 0] = np.nan
    with pytest.raises(T.NumericError, match="learning rate"):
        T.train(M.build("HistoryOnly", seed=0), tr, separable(10, 1), T.TrainConfig(epochs_max=2))


def test_shape_mismatch_surfaces_before_training():
    bad = [ds.WindowSample(np.zeros((5, 1)), np.zeros(0), 0, D0, D0) for _ in range(4)]
    with pytest.raises(Exception, match="temporal"):
        T.train(M.build("HistoryOnly", seed=0), bad, bad, T.TrainConfig(epochs_max=1))


def test_manifest_files(tmp_path):
    _, man = T.train(M.build("HistoryOnly", seed=0), separable(40, 0), separable(20, 1), T.TrainConfig(epochs_max=3))
    man.write(tmp_path, "probe")
    assert (tmp_path / "curve_probe.csv").read_text().splitlines()[0] == "epoch,train_loss,val_auc"
    assert (tmp_path / "run_probe.json").exists()
