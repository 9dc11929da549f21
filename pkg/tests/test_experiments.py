import numpy as np
import pytest

from margincal.calibration import CalibConfig, ClassStats
from margincal.experiments import ExperimentSpec, LossSetting, run_bound, run_compare, run_gap
from margincal.synth import SynthSpec, generate, split
from margincal.trainer import TrainConfig, evaluate, train

SMALL = SynthSpec(images=30, height=16, width=16, noise_sigma=0.4)
SPLITS = (20, 5, 5)
FAST = TrainConfig(epochs=3, learning_rate=1e-2)


def data_comments(text):
    return [ln for ln in text.splitlines() if ln.startswith("#")]


def test_single_cell_matches_direct_run():
    spec = ExperimentSpec([LossSetting("ce")], FAST, [2], SMALL, SPLITS)
    rep = run_compare(spec)
    assert len(rep.rows) == 1
    tr, va, te = split(generate(SynthSpec(**{**SMALL.__dict__, "seed": SMALL.seed + 2})), *SPLITS)
    model, _ = train(tr, va, TrainConfig(epochs=3, learning_rate=1e-2, seed=2))
    direct = evaluate(model, te)
    assert rep.rows[0].miou == direct.miou
    np.testing.assert_array_equal(rep.rows[0].per_class_iou, direct.per_class_iou)
    assert rep.rows[0].pixel_accuracy == direct.pixel_accuracy


def test_identical_entries_give_identical_rows(tmp_path):
    spec = ExperimentSpec([LossSetting("mc"), LossSetting("mc")], FAST, [0, 1], SMALL, SPLITS, out_dir=tmp_path)
    rep = run_compare(spec)
    rows = rep.by_loss()["mc(tau=10,upsilon=1)"]
    assert len(rows) == 4
    for seed in (0, 1):
        a, b = [r for r in rows if r.seed == seed]
        assert a.miou == b.miou
    text = (tmp_path / "compare.csv").read_text()
    assert len(data_comments(text)) == 2 and '"seeds": [0, 1]' in text
    assert (tmp_path / "compare_summary.csv").exists()
    assert (tmp_path / "compare_curves.svg").read_text().lstrip().startswith("<?xml")


def test_abort_is_recorded_and_run_continues():
    spec = ExperimentSpec([LossSetting("ce")], TrainConfig(epochs=2, learning_rate=1e300), [0], SMALL, SPLITS)
    with np.errstate(all="ignore"):
        rep = run_compare(spec)
    assert rep.rows[0].status.startswith("abort")
    assert rep.summary()[0]["failed"] == 1


def test_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec([], FAST, [0])
    with pytest.raises(ValueError):
        ExperimentSpec([LossSetting("ce")], FAST, [])


def test_gap_report_schema(tmp_path):
    spec = ExperimentSpec([LossSetting("ce"), LossSetting("mc")], FAST, [0], SMALL, SPLITS, out_dir=tmp_path)
    rep = run_gap(spec)
    lines = [ln for ln in (tmp_path / "gap.csv").read_text().splitlines() if not ln.startswith("#")]
    assert lines[0].split(",")[:3] == ["loss", "seed", "epoch"]
    body = lines[1:]
    assert sum(ln.startswith("ce,") for ln in body) == 3
    assert sum(ln.startswith('"mc(') for ln in body) == 3
    assert all(r.phase != "warmup" for log in rep.logs.values() for r in log.records)
    assert (tmp_path / "gap.svg").exists() and (tmp_path / "gap_curves.svg").exists()


def test_noiseless_gap_is_small():
    spec = ExperimentSpec([LossSetting("ce"), LossSetting("mc")], TrainConfig(epochs=30), [0],
                          SynthSpec(images=90, noise_sigma=0.0), (60, 15, 15))
    rep = run_gap(spec)
    for label in ("ce", "mc(tau=10,upsilon=1)"):
        assert rep.final_gap(label, 0) < 0.01


def test_bound_balanced_is_uniform(tmp_path):
    rep = run_bound(ClassStats([40, 40, 40], 10), CalibConfig(4.0, 1.0), F=0.1, out_dir=tmp_path)
    np.testing.assert_allclose(rep.rho_0k, 4.0)
    text = (tmp_path / "bound.csv").read_text()
    assert text.startswith("# margincal")


def test_bound_from_manifest_includes_surrogates(tmp_path):
    from margincal.core import LabelMask, ScoreMap, save_manifest, save_mask, save_scores

    rng = np.random.default_rng(0)
    entries = []
    for i in range(3):
        y = rng.integers(0, 2, 16)
        s = np.eye(2)[y] * 3 + rng.normal(size=(16, 2))
        save_mask(LabelMask(4, 4, 2, y), tmp_path / f"{i}.msk")
        save_scores(ScoreMap(4, 4, 2, s), tmp_path / f"{i}.scr")
        entries.append((tmp_path / f"{i}.scr", tmp_path / f"{i}.msk"))
    save_manifest(entries, tmp_path / "m.tsv")
    from margincal.core import load_manifest

    rep = run_bound(load_manifest(tmp_path / "m.tsv"), CalibConfig(10.0, 1.0), F=1.0, trials=10)
    assert rep.iou_lower is not None and rep.miou_lower <= 1.0
