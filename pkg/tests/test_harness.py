import math
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from mmmna.data import PhantomSpec, generate_phantoms, stack_subjects
from mmmna.errors import ConfigError, ContractError, NonFiniteError, ParseError
from mmmna.harness import (ABLATION_CONFIGS, METRICS, ContingencyTable, MetricsReport,
                           TrainConfig, ablation_name, compare_predictions, contingency_table,
                           dump_key_values, emit_report, evaluate, fusion_loss_eval, load_checkpoint,
                           load_train_config, mcnemar_test, parse_key_values, predict, prediction_rows,
                           read_fold_report, read_predictions, report_from_predictions,
                           run_cross_validation, run_missing_modality_ablation, save_checkpoint, train,
                           write_predictions)
from mmmna.model import build_model

TINY = (16, 16, 16)


def tiny_config(**kw):
    base = dict(max_epochs=4, patience=2, base_channels=4, lr=1e-3, augment=False, batch_size=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def subjects():
    return generate_phantoms(PhantomSpec(seed=7, n_subjects=12, shape=TINY))


# -- config ----------------------------------------------------------------

def test_config_defaults_match_recipe():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.max_epochs, cfg.lam) == (1e-4, 1e-4, 200, 0.25)


def test_config_parsing(tmp_path):
    text = "lr = 0.001  # faster\n\nsingle_scale=true\nmax_epochs=30\nvariant=full\n"
    vals = parse_key_values(text, TrainConfig())
    assert vals == {"lr": 0.001, "single_scale": True, "max_epochs": 30, "variant": "full"}
    path = tmp_path / "c.txt"
    path.write_text(dump_key_values(TrainConfig(seed=3, augment=False)))
    assert load_train_config(path) == TrainConfig(seed=3, augment=False)
    for bad in ("nonsense=1", "lr", "max_epochs=ten", "augment=maybe"):
        with pytest.raises(ConfigError):
            parse_key_values(bad, TrainConfig())


@pytest.mark.parametrize("bad", [dict(patience=0), dict(patience=200), dict(lr=0), dict(batch_size=0),
                                 dict(gamma=-1.0)])
def test_config_invariants(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


# -- metrics ---------------------------------------------------------------

def brute_force_metrics(labels, preds):
    acc = sum(a == b for a, b in zip(labels, preds)) / len(labels)
    precs, recs = [], []
    for c in range(3):
        tp = sum(1 for a, b in zip(labels, preds) if a == c and b == c)
        fp = sum(1 for a, b in zip(labels, preds) if a != c and b == c)
        fn = sum(1 for a, b in zip(labels, preds) if a == c and b != c)
        precs.append(tp / (tp + fp) if tp + fp else 0.0)
        recs.append(tp / (tp + fn) if tp + fn else 0.0)
    p, r = sum(precs) / 3, sum(recs) / 3
    return acc, r, p, (2 * p * r / (p + r) if p + r else 0.0)


def test_evaluate_examples():
    m = evaluate([0, 1, 2, 1], [0, 1, 2, 1])
    assert (m.accuracy, m.recall, m.precision, m.f_score) == (1.0, 1.0, 1.0, 1.0)
    m = evaluate([0, 1, 1, 2, 2, 0], [0, 0, 1, 1, 2, 2])
    assert m.accuracy == 0.5
    # each class: one hit, one miss, one false alarm
    assert m.precision == pytest.approx(0.5) and m.recall == pytest.approx(0.5) and m.f_score == pytest.approx(0.5)
    np.testing.assert_array_equal(m.confusion, [[1, 1, 0], [0, 1, 1], [1, 0, 1]])


def test_evaluate_hundred_random_cases():
    r = np.random.default_rng(0)
    for _ in range(100):
        n = int(r.integers(1, 51))
        labels, preds = r.integers(0, 3, n).tolist(), r.integers(0, 3, n).tolist()
        m = evaluate(preds, labels)
        assert (m.accuracy, m.recall, m.precision, m.f_score) == brute_force_metrics(labels, preds)
        assert m.accuracy == np.trace(m.confusion) / m.confusion.sum()
        assert all(0 <= v <= 1 for v in m.values().values())


def test_evaluate_contracts():
    with pytest.raises(ContractError):
        evaluate([0, 1], [0])
    with pytest.raises(ContractError):
        evaluate([0, 3], [0, 1])
    m = evaluate([0, 0, 0], [0, 0, 0])
    assert m.recall == pytest.approx(1 / 3) and m.precision == pytest.approx(1 / 3)


def test_mcnemar_examples():
    res = mcnemar_test(ContingencyTable(0, 10, 10, 0))
    assert res.statistic == pytest.approx(0.05) and res.p_value == pytest.approx(0.823, abs=5e-4)
    res = mcnemar_test(ContingencyTable(30, 15, 5, 2))
    assert abs(res.statistic - 4.05) < 1e-12 and abs(res.p_value - 0.0442) < 1e-4 and res.p_value < 0.05
    res = mcnemar_test(ContingencyTable(3, 1, 0, 0))
    assert (res.statistic, res.p_value) == (0.0, 1.0)
    res = mcnemar_test(ContingencyTable(5, 0, 0, 5))
    assert res.p_value == 1.0 and res.degenerate


def test_mcnemar_grid_matches_chi2_survival():
    for b in range(51):
        for c in range(51):
            res = mcnemar_test(ContingencyTable(0, b, c, 0))
            if b + c == 0:
                assert res.p_value == 1.0
                continue
            chi2 = (abs(b - c) - 1) ** 2 / (b + c)
            assert res.statistic == chi2
            assert abs(res.p_value - stats.chi2.sf(chi2, df=1)) < 1e-6
            assert abs(res.p_value - math.erfc(math.sqrt(chi2 / 2))) < 1e-15


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
def test_contingency_counts(rows):
    labels, a, b = zip(*rows)
    t = contingency_table(labels, a, b)
    assert t.total == len(rows) and min(t.both_correct, t.b, t.c, t.both_wrong) >= 0
    assert t.b == sum(1 for y, p, q in rows if p == y and q != y)


# -- reports and prediction files -----------------------------------------

def _report(r, n):
    folds = []
    for _ in range(n):
        labels, preds = r.integers(0, 3, 20), r.integers(0, 3, 20)
        folds.append(evaluate(preds, labels))
    return MetricsReport(folds)


def test_summary_mean_and_sample_std(rng):
    rep = _report(rng, 10)
    summ = rep.summary()
    for m in METRICS:
        vals = [getattr(f, m) for f in rep.folds]
        assert abs(summ[m][0] - sum(vals) / len(vals)) < 1e-9
        assert summ[m][1] == pytest.approx(np.std(vals, ddof=1))
    assert MetricsReport([rep.folds[0]]).summary()["accuracy"][1] == 0.0


def test_emit_report_round_trip(tmp_path, rng):
    reps = {"MMMNA-Net": _report(rng, 10), "FLAIR+T1": _report(rng, 3)}
    emit_report(reps, tmp_path)
    back = read_fold_report(tmp_path / "folds.csv")
    assert list(back) == list(reps)
    for name in reps:
        for a, b in zip(reps[name].folds, back[name].folds):
            for m in METRICS:
                assert abs(getattr(a, m) - getattr(b, m)) < 1e-9
    lines = (tmp_path / "summary.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "name,accuracy,recall,precision,f_score"
    mean, std = reps["MMMNA-Net"].summary()["accuracy"]
    assert f"{mean:.4f}±{std:.4f}" in lines[1]
    assert "MMMNA-Net" in (tmp_path / "summary.txt").read_text(encoding="utf-8")


def test_emit_empty_report(tmp_path):
    emit_report({}, tmp_path)
    assert (tmp_path / "folds.csv").read_text().splitlines() == ["name,fold,accuracy,recall,precision,f_score"]
    assert (tmp_path / "summary.csv").read_text().splitlines() == ["name,accuracy,recall,precision,f_score"]


def test_mean_std_format():
    from mmmna.harness import format_mean_std

    assert format_mean_std(0.69891, 0.03712) == "0.6989±0.0371"


def test_prediction_files(tmp_path):
    logits = {b: np.eye(3)[[0, 2, 1]] for b in ("fusion", "flair", "t1", "t1ce", "t2")}
    rows = prediction_rows(["a", "b", "c"], [0, 1, 1], logits)
    write_predictions(tmp_path / "p.csv", rows)
    assert read_predictions(tmp_path / "p.csv") == rows
    table, res = compare_predictions(rows, rows)
    assert res.p_value == 1.0 and res.degenerate and table.b == table.c == 0
    (tmp_path / "bad.csv").write_text("id,label\nx,1\n")
    with pytest.raises(ParseError):
        read_predictions(tmp_path / "bad.csv")
    other = [dict(r, label=2) for r in rows]
    with pytest.raises(ContractError):
        compare_predictions(rows, other)


def test_majority_dummy_matches_prevalence():
    subs = generate_phantoms(PhantomSpec(seed=0, n_subjects=200, shape=TINY))
    labels = np.array([int(s.label) for s in subs])
    majority = np.bincount(labels).argmax()
    m = evaluate(np.full(len(labels), majority), labels)
    assert m.accuracy == pytest.approx(np.mean(labels == majority))


# -- training --------------------------------------------------------------

def test_train_determinism_and_best_restore(subjects):
    train_set, val_set = subjects[:8], subjects[8:]
    runs = []
    for _ in range(2):
        cfg = tiny_config(max_epochs=5, patience=3, augment=True)
        model = build_model(cfg.model_config(TINY))
        res = train(model, train_set, val_set, cfg)
        runs.append((res, model))
    (r1, m1), (r2, m2) = runs
    assert r1.history[0]["train_loss"] == r2.history[0]["train_loss"]
    assert r1.history == r2.history
    best = min(h["val_loss"] for h in r1.history)
    assert r1.history[r1.best_epoch]["val_loss"] == best
    x, ni, y = stack_subjects(val_set)
    assert fusion_loss_eval(m1, x, ni, y) == pytest.approx(best, rel=1e-6)


def test_train_stops_early(subjects):
    cfg = tiny_config(max_epochs=40, patience=1, lr=5e-2)
    model = build_model(cfg.model_config(TINY))
    res = train(model, subjects[:8], subjects[8:], cfg)
    assert len(res.history) < 40
    assert len(res.history) - 1 - res.best_epoch == 1


def test_train_callback_keeps_current_weights(subjects):
    cfg = tiny_config()
    model = build_model(cfg.model_config(TINY))
    seen = []
    res = train(model, subjects[:8], None, cfg, on_epoch_end=lambda e, m, rec: seen.append(e) or e == 1)
    assert seen == [0, 1] and res.best_epoch == 1
    np.testing.assert_array_equal(model.head_fusion.weight.data, res.state["head_fusion.weight"])


def test_train_rejects_overlap(subjects):
    cfg = tiny_config()
    with pytest.raises(ContractError):
        train(build_model(cfg.model_config(TINY)), subjects[:8], subjects[6:], cfg)


def test_train_aborts_on_nan_with_context(subjects):
    cfg = tiny_config()
    x, ni, y = stack_subjects(subjects[:4])
    x[1, 0, 0, 3, 3, 3] = np.nan
    with pytest.raises(NonFiniteError, match="epoch 0, batch 0"):
        train(build_model(cfg.model_config(TINY)), (x, ni, y), None, cfg)


# -- cross-validation and ablation ----------------------------------------

def test_cross_validation_structure_and_determinism(subjects, tmp_path):
    cfg = tiny_config(max_epochs=3, patience=1)
    res = run_cross_validation(subjects, cfg, folds=3, out_dir=tmp_path / "a", ablate=True)
    assert len(res.report.folds) == 3 and set(res.report.summary()) == set(METRICS)
    files = sorted((tmp_path / "a").glob("preds_fold*.csv"))
    assert [f.name for f in files] == ["preds_fold00.csv", "preds_fold01.csv", "preds_fold02.csv"]
    ids = sorted(r["subject_id"] for f in files for r in read_predictions(f))
    assert ids == sorted(s.id for s in subjects)
    again = report_from_predictions(files)
    for a, b in zip(res.report.folds, again.folds):
        assert a.values() == b.values()
    assert list(res.ablation) == [ablation_name(c) for c in ABLATION_CONFIGS]
    assert res.ablation["FLAIR+T1+T1Ce+T2"].summary() == res.report.summary()
    par = run_cross_validation(subjects, cfg, folds=3, out_dir=tmp_path / "b", workers=2)
    assert [f.values() for f in par.report.folds] == [f.values() for f in res.report.folds]
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    with pytest.raises(ConfigError):
        run_cross_validation(subjects, cfg, folds=1)


def test_baseline_cross_validation(subjects):
    cfg = tiny_config(max_epochs=2, patience=1, baseline_concat=True)
    res = run_cross_validation(subjects, cfg, folds=2, ablate=True)
    assert res.ablation is None and len(res.report.folds) == 2
    assert all(r["pred_flair"] == -1 for rows in res.predictions for r in rows)


def test_ablation_rows(subjects):
    cfg = tiny_config()
    model = build_model(cfg.model_config(TINY))
    rows = run_missing_modality_ablation(model, subjects)
    assert list(rows) == ["FLAIR", "FLAIR+T1", "FLAIR+T1Ce", "FLAIR+T2", "FLAIR+T1+T1Ce",
                          "FLAIR+T1+T2", "FLAIR+T1Ce+T2", "FLAIR+T1+T1Ce+T2"]
    x, ni, y = stack_subjects(subjects)
    plain = evaluate(predict(model, x, ni)["fusion"].argmax(axis=1), y)
    assert rows["FLAIR+T1+T1Ce+T2"].folds[0].values() == plain.values()
    np.testing.assert_array_equal(rows["FLAIR+T1+T1Ce+T2"].folds[0].confusion, plain.confusion)
    with pytest.raises(ConfigError):
        run_missing_modality_ablation(model, subjects, configs=[("t1", "t2")])


def test_ablation_identical_modalities(subjects):
    s = subjects[0]
    clone = type(s)(id=s.id, flair=s.flair, t1=s.flair, t1ce=s.flair, t2=s.flair, seg=s.seg,
                    age=s.age, survival_days=s.survival_days)
    cfg = tiny_config()
    model = build_model(cfg.model_config(TINY))
    rows = run_missing_modality_ablation(model, [clone, clone])
    x, ni, _ = stack_subjects([clone])
    ref = predict(model, x, ni)["fusion"]
    from mmmna.harness import substitute_array

    for avail in ABLATION_CONFIGS:
        np.testing.assert_array_equal(predict(model, substitute_array(x, avail), ni)["fusion"], ref)
    first = rows["FLAIR"].folds[0].values()
    assert all(r.folds[0].values() == first for r in rows.values())


def test_checkpoint_round_trip(subjects, tmp_path):
    cfg = tiny_config(variant="full", single_scale=True)
    model = build_model(cfg.model_config(TINY))
    save_checkpoint(model, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert asdict(back.config) == asdict(model.config)
    x, ni, _ = stack_subjects(subjects[:2])
    a, b = predict(model, x, ni), predict(back, x, ni)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    (tmp_path / "ck" / "config.txt").write_text("bogus=1\n")
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "ck")
