import csv
import json

import numpy as np
import pytest

from satmaker import cli
from satmaker.errors import ConfigError, IntegrityError
from satmaker.harness import (
    CSV_FIELDS,
    ExperimentSpec,
    build_dataset,
    check_disjoint,
    read_results,
    results_table,
    run_experiment,
    scene_configs,
    split_scenes,
    sweep_report,
    write_dataset,
)
from satmaker.training import Sample


@pytest.fixture(scope="module")
def small():
    return build_dataset(1, scene_configs(10, 32, seed=0), bands=("red", "nir"))


def test_split_counts_and_determinism():
    ids = [f"s{i}" for i in range(10)]
    tr, te = split_scenes(ids, (0.8, 0.2), seed=4)
    assert len(tr) == 8 and len(te) == 2 and not set(tr) & set(te)
    assert split_scenes(ids, (0.8, 0.2), seed=4) == (tr, te)
    with pytest.raises(ConfigError):
        split_scenes(ids, (0.7, 0.2))


def test_dataset_scene_disjoint(small):
    assert len(small.train_scenes) == 8 and len(small.test_scenes) == 2
    assert {s.scene for s in small.train}.isdisjoint({s.scene for s in small.test})
    assert len(small.test) == 4  # two scenes, two bands, one tile each
    dup = small.train[0]
    with pytest.raises(IntegrityError):
        check_disjoint(small.train, small.test + [dup])
    img = np.zeros((4, 4), np.float32)
    same_scene = Sample("other", img, img, small.test[0].prompt, scene=small.train[0].scene)
    with pytest.raises(IntegrityError):
        check_disjoint(small.train, [same_scene])


def test_task2_dataset():
    ds = build_dataset(2, scene_configs(5, 32, seed=1), bands=("nir",), n_steps=3)
    s = [x for x in ds.test if x.prompt.day == 1][0]
    assert s.prompt.task == 2 and s.prompt.date is not None
    assert s.previous is not None and s.previous.shape == s.image.shape


def test_manifest_round_trip(small, tmp_path):
    from satmaker.harness import load_split

    paths = write_dataset(small, tmp_path)
    tr, te = load_split(paths["train"], paths["test"])
    assert [s.id for s in te] == [s.id for s in small.test]
    assert np.array_equal(te[0].image, small.test[0].image.astype(np.float32))
    entry = json.loads(paths["test"].read_text())["entries"][0]
    assert {"id", "scene", "band", "image", "dem", "prompt", "mask"} <= set(entry)


def test_spec_validation(monkeypatch):
    with pytest.raises(ConfigError):
        ExperimentSpec(methods=("nearest", "kriging"))
    with pytest.raises(ConfigError):
        ExperimentSpec(missing_ratios=(1.5,))
    with pytest.raises(ConfigError):
        ExperimentSpec.from_dict({"bogus": 1})
    spec = ExperimentSpec(seeds=(0, 1))
    assert ExperimentSpec.from_dict(spec.to_dict()) == spec
    monkeypatch.setenv("SATMAKER_SEED", "7")
    assert spec.with_env().seeds == (7,)


def _spec(tmp_path, **kw):
    base = dict(methods=("nearest",), missing_ratios=(0.3,), bands=("red", "nir"), output_dir=str(tmp_path),
                previews=False)
    base.update(kw)
    return ExperimentSpec(**base)


def test_row_count_and_rerun_identity(small, tmp_path):
    spec = _spec(tmp_path / "a")
    res = run_experiment(spec, small.test, small.train)
    assert len(res.rows) == 2 * 2  # bands x scopes
    assert {r["scope"] for r in res.rows} == {"masked", "full"}
    assert all(r["error"] == "" and r["n_tiles"] == "2" for r in res.rows)
    again = run_experiment(_spec(tmp_path / "b"), small.test, small.train)
    assert res.csv_path.read_bytes() == again.csv_path.read_bytes()
    assert read_results(res.csv_path)[0].keys() == set(CSV_FIELDS)


def test_adapter_toggle_only_touches_masked_pixels(small, tmp_path):
    from satmaker.harness import METHODS, Resources, adapt_outputs, make_masks

    spec = _spec(tmp_path, adapter="on", adapt_steps=3, adapt_tol=0.0)
    test = small.test[:2]
    masks = make_masks(test, 0.3, 0)
    off = METHODS["nearest"](spec, Resources(), test, masks, 0)
    on = adapt_outputs(spec, Resources(), test, masks, off)
    for m, a, b in zip(masks, off, on):
        assert np.array_equal(a[~m], b[~m])
    assert any(not np.array_equal(a[m], b[m]) for m, a, b in zip(masks, off, on))
    res_on = run_experiment(spec, small.test, small.train, write=False)
    assert all(r["adapter"] == "on" for r in res_on.rows)


def test_cell_failure_is_isolated(small, tmp_path):
    spec = _spec(tmp_path, methods=("nearest", "autoencoder"), autoencoder=str(tmp_path / "nope.smk"), ae_epochs=1)
    # no training data and no checkpoint: the autoencoder cannot be built at all
    with pytest.raises(ConfigError):
        run_experiment(spec, small.test, [])
    spec = _spec(tmp_path, missing_ratios=(0.0, 0.3))
    res = run_experiment(spec, small.test, small.train)
    zero = [r for r in res.rows if float(r["missing_ratio"]) == 0.0]
    assert zero and all(r["error"] == "no masked tiles" for r in zero)


def test_harmonic_psnr_drops_with_ratio(small, tmp_path):
    spec = _spec(tmp_path, methods=("harmonic",), missing_ratios=(0.1, 0.5))
    res = run_experiment(spec, small.test, small.train, write=False)
    assert res.pooled("harmonic", 0.5, "psnr") < res.pooled("harmonic", 0.1, "psnr")


def _write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in CSV_FIELDS})


def test_sweep_report_single_cell_verbatim(tmp_path):
    _write_csv(tmp_path / "r.csv", [dict(method="nearest", band="nir", missing_ratio="0.3", scope="masked",
                                         psnr="27.123456789", rmse="0.0441")])
    out = sweep_report(tmp_path / "r.csv", tmp_path / "rep")
    tpath, ppath, table = out["psnr_nir_masked"]
    assert table == {"nearest": {"0.3": "27.123456789"}}
    assert tpath.read_text().splitlines() == ["method,0.3", "nearest,27.123456789"]
    assert ppath.stat().st_size > 0


def test_report_tables_are_pure_reshaping(small, tmp_path):
    spec = _spec(tmp_path, methods=("nearest", "harmonic"), missing_ratios=(0.1, 0.3))
    res = run_experiment(spec, small.test, small.train)
    rows = read_results(res.csv_path)
    for metric in ("psnr", "rmse"):
        table, ratios = results_table(rows, metric, "nir", "masked")
        assert ratios == ["0.1", "0.3"]
        values = {r[metric] for r in rows}
        assert all(v in values for cells in table.values() for v in cells.values())
    _write_csv(tmp_path / "gap.csv", [
        dict(method="a", band="nir", missing_ratio="0.1", scope="masked", psnr="30.0"),
        dict(method="a", band="nir", missing_ratio="0.5", scope="masked", error="RuntimeError: x"),
        dict(method="b", band="nir", missing_ratio="0.1", scope="masked", psnr="20.0"),
    ])
    table, _ = results_table(read_results(tmp_path / "gap.csv"), "psnr", "nir", "masked")
    assert table == {"a": {"0.1": "30.0", "0.5": "NA[error]"}, "b": {"0.1": "20.0", "0.5": "NA[missing]"}}


def test_cli_end_to_end(tmp_path, capsys):
    data, run, res = tmp_path / "data", tmp_path / "run", tmp_path / "res"
    assert cli.main(["synth", "--out", str(data), "--scenes", "5", "--size", "16", "--bands", "nir"]) == 0
    assert (data / "train.json").exists() and (data / "scenes.json").exists()
    vocab = json.loads((data / "train.json").read_text())["vocab"]
    test_sites = {e["prompt"]["site"] for e in json.loads((data / "test.json").read_text())["entries"]}
    assert all(f"site:{s}" in vocab for s in test_sites)
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs": 1, "batch": 4, "widths": [8, 16, 16], "lr": 1e-3}))
    assert cli.main(["train", "--config", str(cfg), "--manifest", str(data / "train.json"),
                     "--out", str(run)]) == 0
    assert (run / "model.smk").exists() and (run / "train_log.png").exists()

    tile = json.loads((data / "test.json").read_text())["entries"][0]
    mask = tmp_path / "m.rsr"
    assert cli.main(["mask", "--raster", str(data / tile["image"]), "--ratio", "0.3", "--out", str(mask)]) == 0
    assert json.loads((tmp_path / "m.rsr.json").read_text())["ratio"] == 0.3
    filled = tmp_path / "f.rsr"
    assert cli.main(["infer", "--model", str(run / "model.smk"), "--dem", str(data / tile["dem"]),
                     "--observed", str(data / tile["image"]), "--mask", str(mask), "--steps", "3",
                     "--prompt", f"<satelliteMaker> {tile['prompt']['site']}, nir", "--out", str(filled)]) == 0
    assert cli.main(["adapt", "--generated", str(filled), "--reference", str(data / tile["image"]),
                     "--mask", str(mask), "--steps", "2", "--out", str(tmp_path / "a.rsr")]) == 0
    assert (tmp_path / "a.rsr.png").exists()

    assert cli.main(["sweep", "--methods", "nearest,diffusion", "--missing-ratios", "0.1", "0.3",
                     "--bands", "nir", "--steps", "3", "--model", str(run / "model.smk"),
                     "--train-manifest", str(data / "train.json"), "--test-manifest", str(data / "test.json"),
                     "--output-dir", str(res)]) == 0
    rows = read_results(res / "results.csv")
    assert len(rows) == 2 * 2 * 2 and all(r["error"] == "" for r in rows)
    assert (res / "report" / "psnr_nir_masked.png").exists()
    assert list((res / "previews").glob("*.png"))
    capsys.readouterr()
    assert cli.main(["report", "--results", str(res / "results.csv"), "--out", str(tmp_path / "rep")]) == 0
    printed = capsys.readouterr().out
    assert "# psnr_nir_masked" in printed and "diffusion" in printed


def test_cli_config_and_errors(tmp_path):
    assert cli._parse_prompt("<satelliteMaker> 03, 2021-02, 1, red").date == "2021-02"
    assert cli._parse_prompt("site=02,band=nir").text() == "<satelliteMaker> 02, nir"
    with pytest.raises(ValueError):
        cli._parse_prompt("just words")
    with pytest.raises(SystemExit):
        cli.main(["infer", "--model", "x"])
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit):
        cli.main(["mask", "--config", str(bad)])
