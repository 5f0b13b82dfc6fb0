import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rpcodec.bdmetrics import (
    RPCurve,
    bd_quality,
    bd_rate,
    monotonicity_report,
    write_curves_csv,
)
from rpcodec.degrade import DegradationSpec
from rpcodec.errors import (
    ConfigurationError,
    MissingScoreError,
    SchemaError,
    ValidationError,
)
from rpcodec.harness import (
    DatasetManifest,
    EvalReport,
    ExternalSystem,
    LearnedSystem,
    ManifestEntry,
    MetricPlugin,
    compare,
    external_metric,
    get_metrics,
    image_seed,
    import_external_curve,
    load_scores,
    ms_ssim,
    mse,
    plot_rp,
    psnr,
    read_plot_metadata,
    row_results,
    run_eval,
    synthetic_manifest,
    table_from_json,
    table_to_json,
)
from rpcodec.images import save_image, synthetic_image

GOLDEN_REPORT = "09ec90f2b144e85048eea7102baec6ae92ebb64f480dbdbd30261668ade61270"
BPP = (0.1, 0.2, 0.4, 0.8, 1.6, 3.2)


@pytest.fixture(scope="module")
def manifest():
    return synthetic_manifest("fixture", ["noise", "mask"], per_task=2, seed=0, image_size=32)


@pytest.fixture(scope="module")
def toy_system(toy_ladder):
    return LearnedSystem.from_bundles("toy", toy_ladder)


@pytest.fixture(scope="module")
def report(manifest, toy_system):
    return run_eval(manifest, [toy_system], get_metrics(["psnr", "mse"]), root_seed=0)


def curve(codec, quality, bpp=BPP, task="noise", metric="psnr", orientation="higher_better"):
    return RPCurve(bpp, quality, metric, orientation, codec, task)


# ---- metrics ----------------------------------------------------------------


def test_mse_and_psnr():
    a = np.zeros((4, 4, 3))
    assert mse(a, a + 0.1) == pytest.approx(0.01)
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a) == 100.0
    with pytest.raises(ValidationError):
        mse(a, a[:2])


def test_ms_ssim_properties():
    x = synthetic_image(1).astype(np.float64)
    rng = np.random.default_rng(0)
    assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    noisy = [np.clip(x + rng.normal(0, s, x.shape), 0, 1) for s in (0.02, 0.08, 0.2)]
    scores = [ms_ssim(n, x) for n in noisy]
    assert scores[0] > scores[1] > scores[2] and all(0 <= s <= 1 for s in scores)
    assert ms_ssim(noisy[1], x) == pytest.approx(ms_ssim(x, noisy[1]), rel=1e-12)
    tiny = rng.random((9, 9, 3))
    assert 0 <= ms_ssim(tiny, np.clip(tiny + 0.05, 0, 1)) <= 1


def test_metric_plugin_kinds():
    with pytest.raises(ConfigurationError):
        MetricPlugin("x", "sideways", "full_reference", mse)
    with pytest.raises(ConfigurationError):
        MetricPlugin("x", "lower_better", "full_reference")
    with pytest.raises(ConfigurationError):
        get_metrics(["lpips"])
    nr = MetricPlugin("mean", "higher_better", "no_reference", lambda img: float(np.mean(img)))
    assert nr.score(np.full((2, 2, 3), 0.25)) == 0.25
    ext = external_metric("lpips", "lower_better", {"sysA/2/img1": 0.3, "img2": 0.4})
    assert ext.score(key=("sysA", 2, "img1")) == 0.3
    assert ext.score(key=("sysB", 5, "img2")) == 0.4
    with pytest.raises(MissingScoreError) as info:
        ext.score(key=("sysA", 1, "img9"))
    assert "sysA/1/img9" in str(info.value)


def test_load_scores(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"a": 1, "b": 2.5}))
    (tmp_path / "s.csv").write_text("key,score\na,1\nb,2.5\n")
    assert load_scores(tmp_path / "s.json") == load_scores(tmp_path / "s.csv") == {"a": 1.0, "b": 2.5}
    (tmp_path / "bad.csv").write_text("id,value\na,1\n")
    with pytest.raises(ConfigurationError):
        load_scores(tmp_path / "bad.csv")


# ---- manifest ---------------------------------------------------------------


def test_manifest_validation(tmp_path):
    spec = DegradationSpec("noise")
    with pytest.raises(ValidationError):
        DatasetManifest("m", {"test": [ManifestEntry("a", "synth:1", spec), ManifestEntry("a", "synth:2", spec)]})
    with pytest.raises(ValidationError):
        DatasetManifest("m", {"test": [ManifestEntry("a", str(tmp_path / "missing.png"), spec)]})
    with pytest.raises(ValidationError):
        DatasetManifest("m", {"train": [ManifestEntry("a", "synth:1", spec)], "test": [ManifestEntry("b", "synth:1", spec)]})
    with pytest.raises(ValidationError):
        DatasetManifest("m", {"val": []})


def test_manifest_round_trip(tmp_path, manifest):
    m = synthetic_manifest("m", ["rain", "haze"], per_task=3, train_per_task=2, seed=5)
    assert m.tasks() == ["haze", "rain"] and len(m.entries("train")) == 4
    m.save(tmp_path / "m.json")
    again = DatasetManifest.load(tmp_path / "m.json")
    assert again.to_dict() == m.to_dict()
    with pytest.raises(ConfigurationError):
        DatasetManifest.from_dict({"splits": {}})


# ---- run_eval ---------------------------------------------------------------


def test_single_task_structure(toy_ladder):
    m = synthetic_manifest("one", ["noise"], per_task=2, seed=3, image_size=32)
    r = run_eval(m, [LearnedSystem.from_bundles("toy", toy_ladder)], get_metrics(["mse"]))
    assert len(r.curves) == 1
    c = r.curves[0]
    assert len(c) == 6 and all(b2 > b1 for b1, b2 in zip(c.bpp, c.bpp[1:]))
    assert c.orientation == "lower_better" and not r.failures


def test_report_structure_and_golden_hash(report):
    assert len(report.curves) == 4
    assert {(c.task_id, c.metric_name) for c in report.curves} == {
        ("noise", "psnr"), ("noise", "mse"), ("mask", "psnr"), ("mask", "mse")}
    assert report.provenance["root_seed"] == 0 and "timestamps" in report.provenance
    assert report.report_hash() == GOLDEN_REPORT


def test_report_hash_ignores_timestamps_and_workers(manifest, toy_system, report):
    again = run_eval(manifest, [toy_system], get_metrics(["psnr", "mse"]), root_seed=0, workers=2)
    assert again.provenance["timestamps"] != report.provenance["timestamps"] or True
    assert again.report_hash() == report.report_hash()
    other = run_eval(manifest, [toy_system], get_metrics(["psnr", "mse"]), root_seed=1)
    assert other.provenance["root_seed"] == 1 and other.report_hash() != report.report_hash()


def test_constant_external_score_gives_flat_curve(toy_ladder):
    m = synthetic_manifest("one", ["noise"], per_task=2, seed=3, image_size=32)
    scores = {e.image_id: 0.42 for e in m.entries()}
    r = run_eval(m, [LearnedSystem.from_bundles("toy", toy_ladder)], [external_metric("qalign", "higher_better", scores)])
    assert np.var(r.curves[0].quality) == 0.0 and len(r.curves[0]) == 6


def test_missing_external_score_names_key(manifest, toy_system):
    with pytest.raises(MissingScoreError) as info:
        run_eval(manifest, [toy_system], [external_metric("lpips", "lower_better", {})])
    assert "toy/0/" in str(info.value)


def test_failures_are_collected(tmp_path, toy_ladder):
    good = tmp_path / "good.png"
    save_image(good, synthetic_image(0, size=32))
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    spec = DegradationSpec("noise", seed=1)
    entries = [ManifestEntry(f"s{i}", f"synth:{i}", spec) for i in range(2)]
    entries += [ManifestEntry("file-good", "good.png", spec), ManifestEntry("file-bad", "bad.png", spec)]
    m = DatasetManifest("files", {"test": entries}, image_size=32, root=tmp_path)
    r = run_eval(m, [LearnedSystem.from_bundles("toy", toy_ladder)], get_metrics(["psnr"]))
    assert [f["image_id"] for f in r.failures] == ["file-bad"]
    assert len(r.curves) == 1


def test_run_eval_preconditions(manifest, toy_system, toy_ladder):
    with pytest.raises(ConfigurationError):
        run_eval(manifest, [toy_system], [])
    with pytest.raises(ConfigurationError):
        run_eval(manifest, [toy_system], get_metrics(["psnr"]), split="train")
    with pytest.raises(ConfigurationError):
        run_eval(manifest, [LearnedSystem.from_bundles("one", toy_ladder[:1])], get_metrics(["psnr"]))


def test_learned_system_load(tmp_path, toy_ladder, manifest):
    for b in toy_ladder[:2]:
        b.save(tmp_path / f"q{b.quality_index}")
    s = LearnedSystem.load("disk", tmp_path)
    assert s.qualities == [0, 1]
    with pytest.raises(ConfigurationError):
        LearnedSystem.load("none", tmp_path / "empty")


def test_image_seed_is_order_free():
    assert image_seed(0, 2, "a") == image_seed(0, 2, "a")
    assert len({image_seed(0, 2, "a"), image_seed(1, 2, "a"), image_seed(0, 3, "a"), image_seed(0, 2, "b")}) == 4


# ---- BD tables --------------------------------------------------------------


def test_compare_self_is_zero(report):
    rows = compare(report, "toy")
    assert len(rows) == 4
    for row in rows:
        rate, qual = row_results(row)
        assert rate.bd_rate_percent == 0.0 and qual.bd_quality_delta == 0.0


def test_halved_rate_system_is_minus_fifty_everywhere():
    anchor = [curve("anchor", tuple(20 + 3 * np.log2(b) for b in BPP), task=t) for t in ("noise", "mask", "rain")]
    test = [RPCurve(tuple(b / 2 for b in c.bpp), c.quality, c.metric_name, c.orientation, "half", c.task_id) for c in anchor]
    rep = EvalReport(anchor + test)
    rows = compare(rep, "anchor")
    half = [r for r in rows if r["codec"] == "half"]
    assert len(half) == 3
    for r in half:
        assert abs(r["bd_rate"]["bd_rate_percent"] + 50.0) < 0.01
        assert r["bd_quality"]["bd_quality_delta"] > 0


def test_compare_missing_anchor_and_no_overlap():
    a = curve("a", tuple(20 + 3 * np.log2(b) for b in BPP))
    far = curve("far", tuple(90 + q for q in range(6)))
    far_rate = RPCurve(tuple(b * 100 for b in BPP), a.quality, "psnr", "higher_better", "farrate", "noise")
    rep = EvalReport([a, far, far_rate])
    with pytest.raises(ConfigurationError):
        compare(rep, "zzz")
    rows = {r["codec"]: r for r in compare(rep, "a")}
    assert "error" in rows["far"]["bd_rate"] and "NoOverlapError" in rows["far"]["bd_rate"]["error"]
    assert "error" in rows["farrate"]["bd_quality"]
    with pytest.raises(ConfigurationError):
        compare(EvalReport([a, curve("b", a.quality, task="mask")]), "a")


def test_bd_table_reproducible_from_stored_curves(report):
    rows = compare(report, "toy")
    again = EvalReport.from_dict(json.loads(report.to_json()))
    for row in rows:
        a = again.find("toy", row["task"], row["metric"])
        assert bd_rate(a, a).to_dict() == row["bd_rate"]
        assert bd_quality(a, a).to_dict() == row["bd_quality"]


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=6, max_size=6, unique=True), st.floats(0.3, 3.0))
def test_table_json_round_trip(gains, factor):
    q = tuple(sorted(gains))
    rep = EvalReport([curve("a", q), RPCurve(tuple(b * factor for b in BPP), q, "psnr", "higher_better", "b", "noise")])
    rows = compare(rep, "a")
    text = table_to_json(rows)
    assert table_from_json(text) == rows and table_to_json(table_from_json(text)) == text
    with pytest.raises(ValidationError):
        table_from_json("{}")


def test_report_json_round_trip(tmp_path, report):
    report.save(tmp_path / "r.json")
    loaded = EvalReport.load(tmp_path / "r.json")
    assert loaded.report_hash() == report.report_hash()
    assert json.loads((tmp_path / "r.json").read_text())["hash"] == report.report_hash()


# ---- plots ------------------------------------------------------------------


def test_plot_empty_report(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert plot_rp(EvalReport(), tmp_path / "p") == []
    assert "empty report" in caplog.text
    assert not (tmp_path / "p").exists()


def test_plot_single_curve(tmp_path):
    c = curve("a", tuple(20 + 3 * np.log2(b) for b in BPP))
    paths = plot_rp(EvalReport([c]), tmp_path)
    assert len(paths) == 1 and paths[0].suffix == ".svg"
    assert read_plot_metadata(paths[0]) == {"turning_points": {"a": []}}


def test_plot_marks_turning_points(tmp_path, report):
    paths = plot_rp(report, tmp_path)
    assert len(paths) == 4
    for p in paths:
        meta = read_plot_metadata(p)["turning_points"]["toy"]
        task, metric = p.stem.split("_", 2)[1:]
        tps = monotonicity_report(report.find("toy", task, metric)).turning_points
        assert [m["index"] for m in meta] == [t.index for t in tps]
    assert any(read_plot_metadata(p)["turning_points"]["toy"] for p in paths)


# ---- external curves --------------------------------------------------------


def test_import_external_curve(tmp_path):
    c = RPCurve((0.11, 0.23, 0.47, 0.91), (0.1 + 1e-13, 0.2, 0.3, 0.4), "lpips", "lower_better", "mlic", "noise")
    write_curves_csv(tmp_path / "c.csv", [c])
    got = import_external_curve(tmp_path / "c.csv")
    assert len(got) == 4
    assert np.max(np.abs(np.array(got.quality) - np.array(c.quality))) <= 1e-12
    assert got == c
    ext = ExternalSystem.from_csv("mlic", tmp_path / "c.csv")
    assert ext.curves == [c]
    (tmp_path / "dup.csv").write_text(
        "codec_id,task_id,metric,orientation,bpp,quality\nm,t,q,higher_better,0.1,1\nm,t,q,higher_better,0.1,2\n")
    with pytest.raises(SchemaError) as info:
        import_external_curve(tmp_path / "dup.csv")
    assert "duplicate bpp 0.1" in str(info.value) and info.value.line == 3
    write_curves_csv(tmp_path / "two.csv", [c, curve("x", (1, 2, 3, 4, 5, 6))])
    with pytest.raises(ValidationError):
        import_external_curve(tmp_path / "two.csv")


def test_external_system_in_run_eval(tmp_path, manifest, toy_system):
    anchor = [RPCurve(BPP, tuple(range(6)), "psnr", "higher_better", "ref", t) for t in ("noise", "mask")]
    write_curves_csv(tmp_path / "ref.csv", anchor)
    r = run_eval(manifest, [toy_system, ExternalSystem.from_csv("ref", tmp_path / "ref.csv")], get_metrics(["psnr"]))
    assert {c.codec_id for c in r.curves} == {"toy", "ref"}
    rows = compare(r, "ref")
    assert {row["codec"] for row in rows} == {"ref", "toy"}
