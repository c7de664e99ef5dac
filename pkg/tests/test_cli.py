import json
import subprocess
import sys

import pytest

from mad_dg import cli

SMALL = {"epochs": 1, "widths": [4, 8, 8], "latent": 4, "batch_size": 8}


def _err(capsys) -> dict:
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.startswith("{")]
    return json.loads(lines[-1])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-data", "--out", str(out), "--n-train", "12", "--n-test", "6", "--quiet"]) == 0
    return out


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "train.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture(scope="module")
def run_dir(data_dir, cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "train"
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out), "--quiet"]) == 0
    return out


def _reachable(out_dir):
    meta = json.loads((out_dir / "run_meta.json").read_text())
    listed = [out_dir / p for p in meta["outputs"]]
    for f in out_dir.rglob("*"):
        if f.is_file() and f.name != "run_meta.json":
            assert any(f == p or p in f.parents for p in listed), f"orphan output {f}"
    return meta


def test_parse_valid_train(tmp_path, cfg_path):
    inv = cli.parse_and_validate(["train", "--config", str(cfg_path), "--data", "d", "--out", "o"])
    assert inv.command == "train" and inv.config == SMALL and str(inv.out) == "o"


def test_unknown_flag_exits_2(capsys):
    assert cli.main(["train", "--data", "d", "--foo"]) == cli.EXIT_USAGE
    err = _err(capsys)
    assert err["error"] == "usage" and "--foo" in err["message"]


def test_missing_subcommand_exits_2(capsys):
    assert cli.main([]) == cli.EXIT_USAGE


def test_negative_lambda_exits_3(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"lam": -1}))
    assert cli.main(["train", "--config", str(p), "--data", "d", "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    err = _err(capsys)
    assert err["error"] == "config_invalid" and err["field"] == "lam" and err["constraint"] == "minimum"
    assert "lam" in err["message"]


@pytest.mark.parametrize("doc,field_name", [({"epochs": "ten"}, "epochs"), ({"warmup": 3}, "<root>"),
                                            ({"mv_variant": "cosine"}, "mv_variant")])
def test_schema_errors_name_the_field(tmp_path, capsys, doc, field_name):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    assert cli.main(["train", "--config", str(p), "--data", "d"]) == cli.EXIT_CONFIG
    assert _err(capsys)["field"] == field_name


def test_sweep_needs_three_seeds(tmp_path, capsys, data_dir):
    g = tmp_path / "grid.json"
    g.write_text(json.dumps({"lam": [0.1]}))
    assert cli.main(["sweep", "--data", str(data_dir), "--grid", str(g), "--seeds", "0,1"]) == cli.EXIT_CONFIG
    assert _err(capsys)["field"] == "seeds"
    g.write_text(json.dumps({"lam": [0.5]}))
    assert cli.main(["sweep", "--data", str(data_dir), "--grid", str(g)]) == cli.EXIT_CONFIG


def test_missing_dataset_exits_1(tmp_path, capsys, cfg_path):
    out = tmp_path / "o"
    code = cli.main(["train", "--config", str(cfg_path), "--data", str(tmp_path / "nowhere"), "--out", str(out)])
    assert code == cli.EXIT_RUNTIME
    assert _err(capsys)["error"] == "dataset_not_found"
    meta = json.loads((out / "run_meta.json").read_text())
    assert meta["status"] == "failed" and (out / ".incomplete").exists()


def test_missing_checkpoint_exits_1(tmp_path, capsys, data_dir):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(data_dir),
                     "--out", str(tmp_path / "e")]) == cli.EXIT_RUNTIME
    assert _err(capsys)["error"] == "checkpoint_not_found"


def test_gen_data_outputs(data_dir):
    meta = _reachable(data_dir)
    assert meta["status"] == "complete" and meta["dataset_hash"]
    assert not (data_dir / ".incomplete").exists()
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert [d["role"] for d in manifest["domains"]] == ["source", "source", "target"]


def test_train_eval_pipeline(run_dir, data_dir, tmp_path):
    meta = _reachable(run_dir)
    assert meta["argv"][0] == "train" and meta["config_hash"] and meta["dataset_hash"]
    assert set(meta["versions"]) >= {"mad_dg", "numpy", "python", "kernel_backend"}
    assert {"report.json", "model.ckpt", "train_log.csv", "loss_curves.svg"} <= set(meta["outputs"])
    ev = tmp_path / "eval"
    assert cli.main(["eval", "--checkpoint", str(run_dir / "model.ckpt"), "--data", str(data_dir),
                     "--out", str(ev), "--quiet"]) == 0
    acc = json.loads((ev / "eval.json").read_text())
    report = json.loads((run_dir / "report.json").read_text())
    assert acc["per_domain"] == report["final"]["per_domain"]
    _reachable(ev)


def test_train_is_reproducible(run_dir, data_dir, cfg_path, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(again),
                     "--quiet"]) == 0
    for name in ("report.json", "train_log.csv", "model.ckpt", "loss_curves.svg"):
        assert (again / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_seed_flag_overrides_config(data_dir, cfg_path, tmp_path):
    out = tmp_path / "s7"
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out), "--seed", "7",
                     "--quiet"]) == 0
    assert json.loads((out / "report.json").read_text())["config"]["seed"] == 7


def test_augment_writes_sidecar(data_dir, tmp_path):
    out = tmp_path / "aug"
    assert cli.main(["augment", "--data", str(data_dir), "--out", str(out), "--limit", "2", "--seed", "3",
                     "--quiet"]) == 0
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["augmentation"] == {"r_low": 2.0, "r_high": None, "mode": "intent", "sigma": 1.0, "seed": 3}
    assert len(list((out / "train").glob("*.bin"))) == 6
    _reachable(out)


def test_probe_with_views(run_dir, data_dir, tmp_path):
    out = tmp_path / "probe"
    assert cli.main(["probe", "--checkpoint", str(run_dir / "model.ckpt"), "--data", str(data_dir), "--out",
                     str(out), "--epochs", "2", "--views", "--quiet"]) == 0
    res = json.loads((out / "probe.json").read_text())
    assert set(res) >= {"phase1_accuracy", "phase2_accuracy", "phase1_curve", "phase2_curve", "gain"}
    assert json.loads((out / "views.json").read_text())["levels"]["instance"]["distances"][0][0] == 0.0
    _reachable(out)


def test_sweep_and_report(data_dir, cfg_path, run_dir, tmp_path):
    g = tmp_path / "grid.json"
    g.write_text(json.dumps({"n_views": [1, 2], "lam": [0.05, 0.1]}))
    sw = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(cfg_path), "--data", str(data_dir), "--grid", str(g), "--out",
                     str(sw), "--workers", "0", "--quiet"]) == 0
    _reachable(sw)
    bad = tmp_path / "broken"
    bad.mkdir()
    (bad / "report.json").write_text("{not json")
    rep = tmp_path / "rep"
    assert cli.main(["report", str(run_dir), str(sw), str(bad), str(tmp_path / "absent"), "--out", str(rep),
                     "--quiet"]) == 0
    md = (rep / "report.md").read_text()
    assert md.count("| domain | role | accuracy | instances |") == 1
    assert "## Sweep" in md and "## Errors" in md
    assert "broken/report.json: malformed" in md and "absent/report.json: report.json not found" in md
    svg = (rep / "sweep_0.svg").read_text()
    assert "lambda" in svg and "views M" in svg
    rep2 = tmp_path / "rep2"
    assert cli.main(["report", str(run_dir), str(sw), str(bad), str(tmp_path / "absent"), "--out", str(rep2),
                     "--quiet"]) == 0
    for name in ("report.md", "sweep_0.svg", "loss_curves.svg"):
        assert (rep / name).read_bytes() == (rep2 / name).read_bytes()
    _reachable(rep)


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "mad_dg.cli", "eval", "--bogus"], capture_output=True, text=True)
    assert out.returncode == 2
    assert json.loads(out.stderr.strip().splitlines()[-1])["error"] == "usage"
