import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modfab.data_pipeline import Vocab, ingest, split_dataset
from modfab.errors import ConfigError, ContractError
from modfab.harness.experiments import (AblationTable, Cell, LOSS_GRID, ablate,
                                        component_variant, jaccard, route_profiles,
                                        similarity_analysis)
from modfab.harness.metrics import auc, auc_bruteforce, mean_defined
from modfab.harness.train import (Adam, EvalReport, TrainConfig, evaluate, load_checkpoint,
                                  save_checkpoint, train)
from modfab.losses import LossConfig
from modfab.synthgen import WorldConfig, gen_dataset, gen_world

TINY = dict(H=6, I=4, window=3, batch_size=16)


@pytest.fixture(scope="module")
def world():
    return gen_world(WorldConfig())


@pytest.fixture(scope="module")
def seqs64(world):
    return ingest(gen_dataset(world, 64, seed=3).transactions)


# AUC ---------------------------------------------------------------------------

def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.9, 0.1], [0, 1]) == 0.0


def test_auc_single_class_is_undefined(caplog):
    with caplog.at_level(logging.INFO):
        assert auc([0.1, 0.2], [1, 1]) is None
    assert "undefined" in caplog.text
    assert mean_defined([None, 0.5, 1.0]) == 0.75
    assert mean_defined([None]) is None


@pytest.mark.parametrize("seed", range(10))
def test_auc_random_draws_match_bruteforce(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        n = int(rng.integers(2, 200))
        scores = rng.integers(0, 10, n) / 10.0   # plenty of ties
        labels = rng.integers(0, 2, n)
        assert auc(scores, labels) == auc_bruteforce(scores, labels)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=60))
def test_auc_property(pairs):
    s = [p[0] / 5 for p in pairs]
    y = [p[1] for p in pairs]
    a = auc(s, y)
    assert a == auc_bruteforce(s, y)
    if a is not None:
        assert 0.0 <= a <= 1.0
        # flipping scores mirrors the AUC
        assert auc([-v for v in s], y) == pytest.approx(1.0 - a, abs=1e-12)


# optimiser and training ------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -1.0])}
    Adam(p, lr=0.1).step(p, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["w"], [0.9, -0.9], atol=1e-7)


def test_lr_zero_leaves_parameters(seqs64):
    cfg = TrainConfig(epochs=1, lr=0.0, **TINY)
    from modfab.harness.train import build_model
    vocab = Vocab.from_sequences(seqs64)
    model = build_model(cfg, vocab, 10, 4)
    before = model.checksum()
    res = train(seqs64, cfg, vocab, model=model.copy())
    assert res.model.checksum() == before


@pytest.mark.parametrize("kind", ["modular", "recurrent_baseline"])
def test_one_epoch_reduces_loss(seqs64, kind):
    from modfab.harness.train import batch_loss, _mean_loss
    from modfab.data_pipeline import SensorScaler, encode_windows, windows_of
    cfg = TrainConfig(epochs=1, lr=3e-3, val_fraction=0.0, model_kind=kind, **TINY)
    vocab = Vocab.from_sequences(seqs64)
    from modfab.harness.train import build_model
    model = build_model(cfg, vocab, 10, 4)
    scaler = SensorScaler.fit(seqs64)
    data = encode_windows(windows_of(seqs64, cfg.window), vocab, scaler)
    start = _mean_loss(model, data, cfg.loss)
    res = train(seqs64, cfg, vocab, model=model.copy())
    assert _mean_loss(res.model, data, cfg.loss) < start
    assert set(res.history[0]) >= {"epoch", "l1", "l2", "l3", "total"}


def test_training_is_deterministic(seqs64):
    cfg = TrainConfig(epochs=2, **TINY)
    a = train(seqs64, cfg)
    b = train(seqs64, cfg)
    assert a.model.checksum() == b.model.checksum()
    assert a.history == b.history
    c = train(seqs64, TrainConfig(epochs=2, seed=1, **TINY))
    assert c.model.checksum() != a.model.checksum()


def test_masks_stay_clamped(seqs64):
    res = train(seqs64, TrainConfig(epochs=2, lr=0.05, **TINY))
    m = res.model.values["proto.mask"]
    assert m.min() >= 0.0 and m.max() <= 1.0


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(model_kind="transformer")
    with pytest.raises(ContractError):
        train([], TrainConfig())


def test_nonfinite_loss_aborts_with_context(seqs64):
    from modfab.errors import NumericError
    from modfab.harness.train import build_model
    cfg = TrainConfig(epochs=1, **TINY)
    vocab = Vocab.from_sequences(seqs64)
    model = build_model(cfg, vocab, 10, 4)
    model.values["clf.b"][:] = np.nan
    with pytest.raises(NumericError, match=r"epoch 0 batch 0.*clf\.b="):
        train(seqs64, cfg, vocab, model=model)


# evaluation ----------------------------------------------------------------------------

def test_overfit_tiny_set(world):
    seqs = ingest(gen_dataset(world, 10, seed=5).transactions)
    cfg = TrainConfig(epochs=150, lr=1e-2, H=16, I=4, window=3, batch_size=8,
                      val_fraction=0.0, patience=1000)
    report = evaluate(train(seqs, cfg), seqs)
    defined = [a for a in report.auc if a is not None]
    assert defined and min(defined) >= 0.95


def test_zero_classifier_gives_half(seqs64):
    res = train(seqs64, TrainConfig(epochs=1, **TINY))
    res.model.values["clf.W"][:] = 0
    res.model.values["clf.b"][:] = 0
    report = evaluate(res, seqs64)
    assert all(a == 0.5 for a in report.auc if a is not None)


def test_report_round_trip(seqs64):
    res = train(seqs64, TrainConfig(epochs=1, **TINY))
    report = evaluate(res, seqs64)
    back = EvalReport.from_json(report.to_json())
    assert back == report and back.to_json() == report.to_json()
    assert report.fingerprint == res.cfg.fingerprint()


@pytest.mark.parametrize("kind", ["modular", "recurrent_baseline"])
def test_checkpoint_round_trip(tmp_path, seqs64, kind):
    res = train(seqs64, TrainConfig(epochs=1, model_kind=kind, **TINY))
    save_checkpoint(tmp_path / "c.npz", res)
    back = load_checkpoint(tmp_path / "c.npz")
    assert back.model.checksum() == res.model.checksum()
    assert back.cfg.fingerprint() == res.cfg.fingerprint()
    assert evaluate(back, seqs64) .auc == evaluate(res, seqs64).auc


def test_baseline_ignores_stage_and_mod_inputs(seqs64):
    from modfab.data_pipeline import SensorScaler, encode_windows, windows_of
    from modfab.harness.train import predict
    res = train(seqs64, TrainConfig(epochs=1, model_kind="recurrent_baseline", **TINY))
    batch = encode_windows(windows_of(seqs64, 3), res.vocab, res.scaler)
    a = predict(res.model, batch)
    batch.stage[:] = 0
    batch.mods[:] = 0
    assert predict(res.model, batch).tobytes() == a.tobytes()
    assert set(res.history[0]) >= {"l1", "total"} and "l2" not in res.history[0] or \
        res.history[0]["l2"] == 0.0


# ablation bookkeeping -------------------------------------------------------------------

def splits_of(seqs):
    return {"by_product_type": split_dataset(seqs, "by_product_type",
                                             sorted({s.product_type for s in seqs})[:2])}


def test_ablate_single_row(seqs64):
    table = ablate(splits_of(seqs64), TrainConfig(epochs=1, **TINY), grid=[(True, True, True)],
                   seeds=[0])
    assert len(table.rows) == 1
    assert table.to_tsv().splitlines()[1].startswith("✓\t✓\t✓")


def test_ablate_three_seeds_and_layout(seqs64):
    grid = [(True, True, True), (True, False, False)]
    table = ablate(splits_of(seqs64), TrainConfig(epochs=1, **TINY), grid=grid, seeds=[0, 1, 2])
    for _, cells in table.rows:
        cell = cells["by_product_type"]
        assert len(cell.values) == 3 and cell.std is not None
    lines = table.to_tsv().splitlines()
    assert lines[0] == "l1\tl2\tl3\tby_product_type"
    assert lines[2].startswith("✓\t-\t-") and "±" in lines[2]
    assert LOSS_GRID[0] == (True, True, True)


def test_ablate_records_failures(seqs64):
    table = ablate(splits_of(seqs64), TrainConfig(epochs=1, window=50, H=6, I=4), grid=[(True, True, True)],
                   seeds=[0, 1])
    cell = table.rows[0][1]["by_product_type"]
    assert cell.values == [] and len(cell.failures) == 2
    assert "failed" in table.to_tsv()


def test_ablate_rejects_empty_grid(seqs64):
    with pytest.raises(ContractError):
        ablate(splits_of(seqs64), TrainConfig(), grid=[])


def test_component_variants():
    cfg = TrainConfig(I=8)
    assert component_variant(cfg, (False, True)).I == 1
    assert component_variant(cfg, (True, False)).shared_stage_module
    assert component_variant(cfg, (True, True)) == cfg


def test_cell_std_needs_two_values():
    assert Cell([0.7]).std is None and Cell([0.7]).fmt() == "0.700"
    assert Cell([0.6, 0.8]).fmt() == "0.700±0.141"


# similarity ----------------------------------------------------------------------------------

def test_identical_products_have_unit_cosine(seqs64):
    res = train(seqs64, TrainConfig(epochs=1, **TINY))
    prof = route_profiles(res, seqs64)
    twin = [s for s in seqs64 if s.product_type == seqs64[0].product_type]
    import dataclasses
    renamed = [dataclasses.replace(s, product_type="TWIN") for s in twin]
    prof2 = route_profiles(res, twin + renamed)
    a, b = prof2[seqs64[0].product_type], prof2["TWIN"]
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) == pytest.approx(1.0, abs=1e-9)
    assert prof2["TWIN"].shape == prof[seqs64[0].product_type].shape


def test_jaccard_disjoint_is_zero():
    assert jaccard({"A", "B"}, {"C"}) == 0.0
    assert jaccard({"A", "B"}, {"B", "C"}) == pytest.approx(1 / 3)


def test_similarity_report_shapes(seqs64):
    res = train(seqs64, TrainConfig(epochs=1, **TINY))
    rep = similarity_analysis([res], seqs64)
    n = len({s.product_type for s in seqs64})
    assert np.array(rep.attention).shape == (n, n)
    assert len(rep.per_seed) == 1
    assert "Pearson" in rep.to_tsv()
    json.dumps(rep.to_dict())


def test_similarity_needs_three_groups(seqs64):
    res = train(seqs64, TrainConfig(epochs=1, **TINY))
    two = [s for s in seqs64 if s.product_group in ("GRP00", "GRP01")]
    with pytest.raises(ContractError):
        similarity_analysis([res], two)


def test_similarity_degenerate_truth_is_undefined(seqs64):
    res = train(seqs64, TrainConfig(epochs=1, **TINY))
    names = sorted({s.product_type for s in seqs64})
    flat = {(a, b): 0.5 for a in names for b in names}
    rep = similarity_analysis([res], seqs64, truth=flat)
    assert rep.statistic is None and rep.pvalue is None
