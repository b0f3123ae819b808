import pandas as pd
import pytest

from ablation import (
    BAR_CHART,
    RESULTS_CSV,
    RESULTS_JSON,
    AblationVariant,
    canonical_variants,
    emit_report,
    offset_sweep_variants,
    overlay_selection,
    run_ablation,
    variants_by_name,
)
from constants import FRAME_DIFFERENCE, KEY_FRAME, OPTICAL_FLOW, TDL_OUTPUT
from synthgen import PhantomConfig, generate_dataset
from train_model import EvaluationReport, SampleScore, TrainConfig
from utils import load_json

SMALL_RUN = TrainConfig(batch_size=4, epochs=2, tdl_warmup_epochs=1, base_width=4, depth=2, val_fraction=0.0)


@pytest.fixture(scope="module")
def ablation_run(tmp_path_factory, tiny_dataset):
    variants = variants_by_name(["baseline", "kf+fd"]) + [
        AblationVariant("kf+fd-offset15", (KEY_FRAME, FRAME_DIFFERENCE), fd_offset=15)
    ]
    out_dir = tmp_path_factory.mktemp("ablation")
    return run_ablation(tiny_dataset, variants, SMALL_RUN, out_dir), out_dir


def test_canonical_variants():
    variants = canonical_variants()
    assert [v.name for v in variants] == [
        "baseline",
        "kf+of",
        "kf+fd",
        "kf+bs",
        "kf+tdl-unsupervised",
        "kf+tdl-supervised",
        "ffs+lrs",
        "dsa-ltdnet",
    ]
    channels = {v.name: v.configs(TrainConfig())[0].ffs.in_channels for v in variants}
    assert channels["baseline"] == 1
    assert channels["kf+of"] == 2
    assert channels["dsa-ltdnet"] == 3


def test_variant_training_protocols():
    cfg = TrainConfig()
    variants = {v.name: v for v in canonical_variants()}
    bundle, unsupervised = variants["kf+tdl-unsupervised"].configs(cfg)
    assert bundle.tdl is not None
    assert unsupervised.weights.lambda0 == 0.0
    assert unsupervised.tdl_warmup_epochs == 0
    _, supervised = variants["kf+tdl-supervised"].configs(cfg)
    assert supervised.weights.lambda0 == cfg.weights.lambda0
    assert supervised.tdl_warmup_epochs == cfg.tdl_warmup_epochs
    bundle, raw = variants["kf+of"].configs(cfg)
    assert bundle.tdl is None and bundle.lrs is None
    assert raw.tdl_warmup_epochs == 0


def test_offset_sweep():
    sweep = offset_sweep_variants()
    assert [v.fd_offset for v in sweep] == [5, 7, 9, 11, 13]
    assert all(v.configs(TrainConfig())[0].fd_offset == v.fd_offset for v in sweep)
    names = [v.name for v in variants_by_name(["baseline"], offset_sweep=True)]
    assert names[0] == "baseline" and len(names) == 6


def test_invalid_variants():
    with pytest.raises(ValueError):
        AblationVariant("bad", (KEY_FRAME, TDL_OUTPUT, OPTICAL_FLOW))
    with pytest.raises(ValueError):
        AblationVariant("bad", (OPTICAL_FLOW,))
    with pytest.raises(KeyError):
        variants_by_name(["baseline", "kf+sparkle"])


def test_run_ablation_rejects_duplicates(tmp_path, tiny_dataset):
    baseline = canonical_variants()[0]
    with pytest.raises(ValueError):
        run_ablation(tiny_dataset, [baseline, baseline], SMALL_RUN, tmp_path)
    with pytest.raises(ValueError):
        run_ablation(tiny_dataset, [], SMALL_RUN, tmp_path)


def test_failed_variant_is_recorded(ablation_run):
    report, _ = ablation_run
    status = {r.variant.name: r.status for r in report.results}
    assert status == {"baseline": "ok", "kf+fd": "ok", "kf+fd-offset15": "failed"}
    failed = report.results[2]
    assert failed.error
    assert failed.to_dict()["mean_dice"] is None


def test_variants_share_the_test_split(ablation_run, tiny_dataset):
    report, _ = ablation_run
    test_ids = [e.id for e in tiny_dataset.entries("test")]
    for result in report.results[:2]:
        assert [s.sample_id for s in result.evaluation.scores] == test_ids


def test_report_files(ablation_run, tmp_path):
    report, _ = ablation_run
    files, failures = emit_report(report, tmp_path)
    assert failures == {}
    for name in (RESULTS_JSON, RESULTS_CSV, BAR_CHART):
        assert (tmp_path / name) in files
    for variant in ("baseline", "kf+fd"):
        assert len(list((tmp_path / "overlays" / variant).glob("*.png"))) == 8
    assert not (tmp_path / "overlays" / "kf+fd-offset15").exists()

    table = pd.read_csv(tmp_path / RESULTS_CSV)
    assert list(table["variant"]) == ["baseline", "kf+fd", "kf+fd-offset15"]
    assert table.loc[0, "delta_vs_baseline"] == pytest.approx(0.0)
    assert table.loc[0, "reference_dice"] == pytest.approx(70.75)


def test_results_json(ablation_run, tmp_path):
    report, _ = ablation_run
    emit_report(report, tmp_path / "a")
    emit_report(report, tmp_path / "b")
    first = (tmp_path / "a" / RESULTS_JSON).read_bytes()
    assert first == (tmp_path / "b" / RESULTS_JSON).read_bytes()

    data = load_json(tmp_path / "a" / RESULTS_JSON)
    assert data["schema_version"] == 1
    assert data["seed"] == SMALL_RUN.seed
    for variant in data["variants"]:
        if variant["status"] != "ok":
            continue
        dices = [s["dice"] for s in variant["per_sample"]]
        assert variant["mean_dice"] == pytest.approx(sum(dices) / len(dices), abs=1e-9)
        assert variant["train_log_path"] == f"{variant['name']}/train_log.csv"


def test_overlay_selection_ties_break_by_id():
    scores = tuple(SampleScore(sample_id=f"s{i}", dice=d) for i, d in enumerate([0.5, 0.9, 0.5, 0.1, 0.9]))
    selection = overlay_selection(EvaluationReport(scores=scores), per_side=2)
    assert selection == [
        ("best", 1, "s1"),
        ("best", 2, "s4"),
        ("worst", 1, "s3"),
        ("worst", 2, "s0"),
    ]


@pytest.mark.slow
def test_full_synthetic_ablation(tmp_path):
    manifest = generate_dataset(PhantomConfig(num_samples=80, train_fraction=0.8), tmp_path / "data")
    assert len(manifest.entries("train")) == 64
    report = run_ablation(manifest, canonical_variants(), TrainConfig(), tmp_path / "runs")
    assert all(r.status == "ok" for r in report.results)
    full = next(r for r in report.results if r.variant.name == "dsa-ltdnet")
    assert full.evaluation.mean_dice >= 0.70
    _, failures = emit_report(report, tmp_path / "report", manifest)
    assert failures == {}
    assert len(pd.read_csv(tmp_path / "report" / RESULTS_CSV)) == 8
