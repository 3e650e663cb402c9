import csv
import json

import pytest
from oracles import imp_oracle

from morec.cli import ExperimentConfig, emit_report, main, run_experiment
from morec.metrics import EvalReport, SolutionSet, pareto_frontier

SWEEP = [
    {"label": f"r{n}", "objectives": ["accuracy", "revenue", "fairness"],
     "rho": {"revenue": r, "fairness": round(1 - r, 2)}}
    for n, r in enumerate((0.0, 0.2, 0.4, 0.6, 0.8, 1.0))
]


def write_config(tmp_path, **over):
    cfg = {
        "seed": 0,
        "data": {"synth": {"n_users": 120, "n_items": 50, "n_interactions": 1500,
                           "n_categories": 3}},
        "kcore": 5,
        "backbone": {"dim": 8, "epochs": 4, "patience": 2, "batch_size": 256, "lr": 0.005,
                     "n_negatives": 4},
        "train": {"epochs": 2, "patience": 2},
        "sweep": SWEEP,
        "out": str(tmp_path / "out"),
    }
    cfg.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    path = write_config(tmp)
    assert run_experiment(path) == 0
    return tmp, path


def test_empty_sweep_is_config_error(tmp_path, capsys):
    assert main(["run", "--config", str(write_config(tmp_path, sweep=[]))]) == 2
    assert "sweep" in capsys.readouterr().err


@pytest.mark.parametrize("bad", [{"sweep": [{"objectives": ["revenue"]}]},
                                 {"sweep": [{"label": "base"}]},
                                 {"sweep": [{"label": "a"}, {"label": "a"}]},
                                 {"kcore": 0},
                                 {"colour": "red"},
                                 {"backbone": {"patience": 0}}])
def test_invalid_configs_exit_2(tmp_path, bad):
    assert main(["run", "--config", str(write_config(tmp_path, **bad))]) == 2


def test_missing_config_file(tmp_path):
    assert main(["prep", "--config", str(tmp_path / "nope.json")]) == 2


def test_table_has_six_solutions_and_one_selection(finished_run):
    tmp, _ = finished_run
    rows = read_csv(tmp / "out" / "table.csv")
    assert [r["label"] for r in rows] == ["base"] + [e["label"] for e in SWEEP]
    assert sum(int(r["selected"]) for r in rows) == 1
    assert float(rows[0]["Imp"]) == 0.0
    assert len({r["digest"] for r in rows}) == 1


def test_table_imp_recomputable(finished_run):
    tmp, _ = finished_run
    rows = read_csv(tmp / "out" / "table.csv")
    cols = ["Hit", "rHit", "Pop-KL", "min-Hit"]
    base = [float(rows[0][c]) for c in cols]
    for r in rows[1:]:
        assert float(r["Imp"]) == pytest.approx(
            imp_oracle(base, [float(r[c]) for c in cols]), abs=1e-9)


def test_csv_round_trip_matches_json(finished_run):
    tmp, _ = finished_run
    report = json.loads((tmp / "out" / "report.json").read_text(encoding="utf-8"))
    rows = {r["label"]: r for r in read_csv(tmp / "out" / "table.csv")}
    for s in [report["base"], *report["solutions"]]:
        row = rows[s["label"]]
        assert abs(float(row["Hit"]) - s["report"]["hit"]) <= 1e-9
        assert abs(float(row["Pop-KL"]) - s["report"]["pop_kl"]) <= 1e-9
        assert abs(float(row["Imp"]) - s["imp"]) <= 1e-9


def test_frontier_is_pareto_output(finished_run):
    tmp, _ = finished_run
    table = read_csv(tmp / "out" / "table.csv")
    frontier = read_csv(tmp / "out" / "frontier.csv")
    for other, direction in (("rHit", "max"), ("Pop-KL", "min"), ("min-Hit", "max")):
        pts = [[float(r["Hit"]), float(r[other])] for r in table]
        expect = [table[i]["label"] for i in pareto_frontier(pts, ["max", direction])]
        got = [f["label"] for f in frontier if f["y_metric"] == other]
        assert got == expect


def test_artifacts_carry_digest(finished_run):
    tmp, path = finished_run
    digest = ExperimentConfig.load(path).digest()
    out = tmp / "out"
    for name in ("table.csv", "frontier.csv", "alpha_trace.csv"):
        assert {r["digest"] for r in read_csv(out / name)} == {digest}
    assert json.loads((out / "report.json").read_text())["digest"] == digest
    assert len(read_csv(out / "alpha_trace.csv")) > 0


def test_rerun_hits_cache_and_reproduces(finished_run, caplog):
    tmp, path = finished_run
    before = (tmp / "out" / "report.json").read_text()
    with caplog.at_level("INFO", logger="morec"):
        assert run_experiment(path) == 0
    assert any("pretrain cache hit" in m for m in caplog.messages)
    assert (tmp / "out" / "report.json").read_text() == before


def test_parallel_jobs_match_serial(finished_run, tmp_path):
    _, path = finished_run
    assert run_experiment(path, out=str(tmp_path / "par"), jobs=2) == 0
    serial = json.loads((path.parent / "out" / "report.json").read_text())
    par = json.loads((tmp_path / "par" / "report.json").read_text())
    assert serial == par


def test_seed_override_changes_digest(finished_run, tmp_path):
    _, path = finished_run
    assert main(["prep", "--config", str(path), "--seed", "3",
                 "--out", str(tmp_path / "s3")]) == 0
    cached = list((tmp_path / "s3" / "cache").glob("data-*.npz"))
    assert len(cached) == 1
    assert ExperimentConfig.load(path).data_digest() not in cached[0].name


def test_base_only_report(tmp_path):
    base = EvalReport(0.3, 12.0, 0.4, 0.2)
    emit_report(SolutionSet.build(base, [], "d0"), tmp_path)
    rows = read_csv(tmp_path / "table.csv")
    assert len(rows) == 1 and float(rows[0]["Imp"]) == 0.0 and rows[0]["selected"] == "1"


def test_mixed_digests_rejected(tmp_path):
    base = EvalReport(0.3, 12.0, 0.4, 0.2)
    sset = SolutionSet.build(base, [("a", base)], "d0")
    sset.solutions[0].digest = "other"
    with pytest.raises(ValueError):
        emit_report(sset, tmp_path)


def test_synth_subcommand_writes_tsv(tmp_path):
    path = write_config(tmp_path, out=str(tmp_path / "syn"))
    assert main(["synth", "--config", str(path)]) == 0
    assert (tmp_path / "syn" / "interactions.tsv").exists()
    assert (tmp_path / "syn" / "items.tsv").exists()


def test_prep_from_written_files_matches_synth(tmp_path):
    syn = write_config(tmp_path, out=str(tmp_path / "syn"))
    assert main(["synth", "--config", str(syn)]) == 0
    direct = ExperimentConfig.load(syn)
    from_files = ExperimentConfig.from_dict(
        {"data": {"interactions": "syn/interactions.tsv", "items": "syn/items.tsv",
                  "rating_threshold": None}, "out": str(tmp_path / "files")}, tmp_path)
    from morec.cli import prepare

    a_ds, a_cat = prepare(direct)
    b_ds, b_cat = prepare(from_files)
    assert a_ds.user_ids == b_ds.user_ids and a_ds.item_ids == b_ds.item_ids
    assert (a_ds.train == b_ds.train).all() and (a_ds.test == b_ds.test).all()
    assert (a_cat.price == b_cat.price).all()
